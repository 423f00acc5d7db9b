//! Plain-text persistence: Gram dumps, sparse-model checkpoints and CSV tables.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so reading a
//! file back gives bit-identical values.

use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::DMatrix;

use crate::error::{DkmError, Result};
use crate::gram::{GramMatrix, WidthProfile};
use crate::kernels::KernelSpec;
use crate::optimizer::Trace;
use crate::sparse::SparseState;

const GRAM_MAGIC: &str = "dkm-grams 1";
const CHECKPOINT_MAGIC: &str = "dkm-sparse 1";

fn write_rows<W: Write>(w: &mut W, m: &DMatrix<f64>) -> Result<()> {
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

/// Writes `G_1 … G_L` as `dkm-grams 1`, `P n`, `L n`, then `layer ℓ` followed
/// by `P` rows for each layer.
pub fn write_grams<W: Write>(mut w: W, grams: &[GramMatrix]) -> Result<()> {
    let p = grams.first().map_or(0, |g| g.p());
    writeln!(w, "{GRAM_MAGIC}")?;
    writeln!(w, "P {p}")?;
    writeln!(w, "L {}", grams.len())?;
    for (l, g) in grams.iter().enumerate() {
        writeln!(w, "layer {}", l + 1)?;
        write_rows(&mut w, g.matrix())?;
    }
    Ok(())
}

pub fn read_grams<R: Read>(r: R) -> Result<Vec<GramMatrix>> {
    let mut lines = Lines::new(r)?;
    lines.expect_exact(GRAM_MAGIC)?;
    let p = lines.keyed_usize("P")?;
    let depth = lines.keyed_usize("L")?;
    let mut out = Vec::with_capacity(depth);
    for l in 1..=depth {
        lines.expect_exact(&format!("layer {l}"))?;
        out.push(GramMatrix::from_trusted(lines.matrix(p, p)?));
    }
    lines.expect_end()?;
    Ok(out)
}

/// Checkpoint layout: magic line, `inducing P_i`, `layers L`, `nu …` (`L + 2`
/// values), `noise_var σ²`, `L + 1` lines `kernel <json>`, then matrices
/// `inducing_inputs`, `gram 1 … gram L` and `inducing_outputs`, each introduced
/// by `matrix <name> <rows> <cols>`.
pub fn write_checkpoint<W: Write>(mut w: W, state: &SparseState) -> Result<()> {
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    writeln!(w, "inducing {}", state.n_inducing())?;
    writeln!(w, "layers {}", state.depth())?;
    let nus: Vec<String> = state
        .widths
        .as_slice()
        .iter()
        .map(|v| v.to_string())
        .collect();
    writeln!(w, "nu {}", nus.join(" "))?;
    writeln!(w, "noise_var {}", state.noise_var)?;
    for k in &state.kernels {
        let json = serde_json::to_string(k).map_err(|e| DkmError::InvalidInput(e.to_string()))?;
        writeln!(w, "kernel {json}")?;
    }
    let mut matrix = |name: &str, m: &DMatrix<f64>| -> Result<()> {
        writeln!(w, "matrix {name} {} {}", m.nrows(), m.ncols())?;
        write_rows(&mut w, m)
    };
    matrix("inducing_inputs", &state.inducing_inputs)?;
    for (l, g) in state.inducing_grams.iter().enumerate() {
        matrix(&format!("gram_{}", l + 1), g.matrix())?;
    }
    matrix("inducing_outputs", &state.inducing_outputs)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<SparseState> {
    let mut lines = Lines::new(r)?;
    lines.expect_exact(CHECKPOINT_MAGIC)?;
    let pi = lines.keyed_usize("inducing")?;
    let depth = lines.keyed_usize("layers")?;
    let nus = lines.keyed_floats("nu")?;
    if nus.len() != depth + 2 {
        return Err(lines.error(
            0,
            format!("expected {} width ratios, found {}", depth + 2, nus.len()),
        ));
    }
    let widths = WidthProfile::new(nus)?;
    let noise = lines.keyed_floats("noise_var")?;
    if noise.len() != 1 {
        return Err(lines.error(0, "noise_var takes one value".into()));
    }
    let mut kernels = Vec::with_capacity(depth + 1);
    for _ in 0..=depth {
        let (row, rest) = lines.keyed("kernel")?;
        let k: KernelSpec = serde_json::from_str(rest.trim()).map_err(|e| DkmError::Parse {
            row,
            column: 2,
            message: e.to_string(),
        })?;
        kernels.push(k);
    }
    let x_i = lines.named_matrix("inducing_inputs", Some(pi), None)?;
    let mut grams = Vec::with_capacity(depth);
    for l in 1..=depth {
        grams.push(GramMatrix::from_trusted(lines.named_matrix(
            &format!("gram_{l}"),
            Some(pi),
            Some(pi),
        )?));
    }
    let outputs = lines.named_matrix("inducing_outputs", Some(pi), None)?;
    lines.expect_end()?;
    SparseState::new(x_i, grams, outputs, kernels, widths, noise[0])
}

struct Lines {
    lines: Vec<String>,
    next: usize,
}

impl Lines {
    fn new<R: Read>(r: R) -> Result<Self> {
        let lines = BufReader::new(r)
            .lines()
            .collect::<std::io::Result<Vec<_>>>()?;
        Ok(Lines { lines, next: 0 })
    }

    fn error(&self, column: usize, message: String) -> DkmError {
        DkmError::Parse {
            row: self.next.max(1),
            column,
            message,
        }
    }

    fn line(&mut self) -> Result<(usize, String)> {
        while self.next < self.lines.len() {
            let l = self.lines[self.next].trim().to_string();
            self.next += 1;
            if !l.is_empty() {
                return Ok((self.next, l));
            }
        }
        Err(DkmError::Parse {
            row: self.lines.len() + 1,
            column: 0,
            message: "unexpected end of file".into(),
        })
    }

    fn expect_exact(&mut self, want: &str) -> Result<()> {
        let (row, l) = self.line()?;
        if l != want {
            return Err(DkmError::Parse {
                row,
                column: 1,
                message: format!("expected `{want}`, found `{l}`"),
            });
        }
        Ok(())
    }

    fn expect_end(&mut self) -> Result<()> {
        if self.lines[self.next..].iter().any(|l| !l.trim().is_empty()) {
            return Err(self.error(1, "trailing content".into()));
        }
        Ok(())
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, String)> {
        let (row, l) = self.line()?;
        match l.split_once(char::is_whitespace) {
            Some((k, rest)) if k == key => Ok((row, rest.trim().to_string())),
            _ => Err(DkmError::Parse {
                row,
                column: 1,
                message: format!("expected `{key} …`, found `{l}`"),
            }),
        }
    }

    fn keyed_usize(&mut self, key: &str) -> Result<usize> {
        let (row, rest) = self.keyed(key)?;
        rest.parse().map_err(|_| DkmError::Parse {
            row,
            column: 2,
            message: format!("`{rest}` is not a non-negative integer"),
        })
    }

    fn keyed_floats(&mut self, key: &str) -> Result<Vec<f64>> {
        let (row, rest) = self.keyed(key)?;
        parse_floats(row, &rest, 2)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(rows, cols);
        for i in 0..rows {
            let (row, l) = self.line()?;
            let vals = parse_floats(row, &l, 1)?;
            if vals.len() != cols {
                return Err(DkmError::Parse {
                    row,
                    column: vals.len().min(cols) + 1,
                    message: format!("expected {cols} values, found {}", vals.len()),
                });
            }
            for (j, v) in vals.into_iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    fn named_matrix(
        &mut self,
        name: &str,
        rows: Option<usize>,
        cols: Option<usize>,
    ) -> Result<DMatrix<f64>> {
        let (row, rest) = self.keyed("matrix")?;
        let parts: Vec<&str> = rest.split_whitespace().collect();
        let bad = |message: String| DkmError::Parse {
            row,
            column: 2,
            message,
        };
        if parts.len() != 3 || parts[0] != name {
            return Err(bad(format!("expected `matrix {name} <rows> <cols>`")));
        }
        let r: usize = parts[1].parse().map_err(|_| bad("bad row count".into()))?;
        let c: usize = parts[2]
            .parse()
            .map_err(|_| bad("bad column count".into()))?;
        if rows.is_some_and(|x| x != r) || cols.is_some_and(|x| x != c) {
            return Err(bad(format!(
                "{name} has shape {r}x{c}, which does not fit the header"
            )));
        }
        self.matrix(r, c)
    }
}

fn parse_floats(row: usize, s: &str, first_column: usize) -> Result<Vec<f64>> {
    s.split_whitespace()
        .enumerate()
        .map(|(j, t)| {
            let v: f64 = t.parse().map_err(|_| DkmError::Parse {
                row,
                column: first_column + j,
                message: format!("`{t}` is not a number"),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(DkmError::Parse {
                    row,
                    column: first_column + j,
                    message: format!("non-finite value `{t}`"),
                })
            }
        })
        .collect()
}

fn csv_err(e: csv::Error) -> DkmError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DkmError::Io(io),
        other => DkmError::InvalidInput(format!("{other:?}")),
    }
}

/// Columns `iteration, objective, log_lik, layer_1 … layer_L`.
pub fn write_trace_csv<W: Write>(w: W, trace: &Trace) -> Result<()> {
    let depth = trace.rows.first().map_or(0, |r| r.layer_terms.len());
    let mut header = vec![
        "iteration".to_string(),
        "objective".into(),
        "log_lik".into(),
    ];
    header.extend((1..=depth).map(|l| format!("layer_{l}")));
    let rows: Vec<Vec<String>> = trace
        .rows
        .iter()
        .map(|r| {
            let mut v = vec![
                r.iteration.to_string(),
                r.objective.to_string(),
                r.log_lik.to_string(),
            ];
            v.extend(r.layer_terms.iter().map(|x| x.to_string()));
            v
        })
        .collect();
    write_table(w, &header, &rows)
}

/// Writes a header and string rows as CSV.
pub fn write_table<W: Write, S: AsRef<str>>(
    w: W,
    header: &[S],
    rows: &[Vec<String>],
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header.iter().map(|h| h.as_ref()))
        .map_err(csv_err)?;
    for r in rows {
        out.write_record(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes equal-length numeric columns as CSV.
pub fn write_columns_csv<W: Write>(w: W, header: &[&str], columns: &[&[f64]]) -> Result<()> {
    let n = columns.first().map_or(0, |c| c.len());
    if header.len() != columns.len() || columns.iter().any(|c| c.len() != n) {
        return Err(DkmError::InvalidInput(
            "columns and header must line up".into(),
        ));
    }
    let rows: Vec<Vec<String>> = (0..n)
        .map(|i| columns.iter().map(|c| c[i].to_string()).collect())
        .collect();
    write_table(w, header, &rows)
}
