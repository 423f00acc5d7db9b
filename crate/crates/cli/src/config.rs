//! Run configuration: a TOML file plus `key=value` overrides from the command line.

use std::path::{Path, PathBuf};

use dkm::{
    DatasetSource, DgpConfig, KernelSpec, KlOrder, ObjectiveKind, OptimizerConfig, OutputMode,
    SparseConfig, SparseMethod, SplitSetup,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Every random choice in a run derives from this seed.
    pub seed: u64,
    /// Parent directory; each run writes into its own subdirectory.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub sparse: SparseSection,
    #[serde(default)]
    pub langevin: LangevinSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub unimodality: UnimodalitySection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    /// Defaults to `<name>.csv` under `$DKM_DATA_DIR`, or under `data/`.
    pub path: Option<PathBuf>,
    /// Target columns; empty means the last column.
    #[serde(default)]
    pub targets: Vec<String>,
    /// Keep only this many rows.
    pub subset: Option<usize>,
    /// Draw the subset at random with this seed instead of taking the first rows.
    pub subset_seed: Option<u64>,
}

impl DatasetConfig {
    pub fn source(&self) -> DatasetSource {
        let path = self.path.clone().unwrap_or_else(|| {
            let dir = std::env::var_os("DKM_DATA_DIR")
                .map_or_else(|| PathBuf::from("data"), PathBuf::from);
            dir.join(format!("{}.csv", self.name))
        });
        DatasetSource {
            name: self.name.clone(),
            path,
            targets: self.targets.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Gram matrices at the kernel recursion.
    #[default]
    Prior,
    /// Random factors scaled by inverse-Gamma draws.
    Random,
}

/// Full (non-sparse) model used by `train`, `validate-langevin` and `unimodality`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    /// Used at every layer unless `kernels` is given.
    pub kernel: KernelSpec,
    /// One kernel per hidden layer plus the output kernel.
    pub kernels: Vec<KernelSpec>,
    /// `ν_ℓ` of every hidden layer.
    pub nu: f64,
    pub noise_var: f64,
    pub likelihood_weight: f64,
    pub objective: ObjectiveKind,
    pub init: InitKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            kernel: KernelSpec::sqexp(1.0),
            kernels: Vec::new(),
            nu: 1.0,
            noise_var: 0.1,
            likelihood_weight: 1.0,
            objective: ObjectiveKind::Dkm,
            init: InitKind::Prior,
        }
    }
}

impl ModelConfig {
    pub fn kernel_list(&self) -> Result<Vec<KernelSpec>, CliError> {
        if self.layers == 0 {
            return Err(CliError::key("model.layers", "must be at least 1"));
        }
        if self.kernels.is_empty() {
            return Ok(vec![self.kernel.clone(); self.layers + 1]);
        }
        if self.kernels.len() != self.layers + 1 {
            return Err(CliError::key(
                "model.kernels",
                format!(
                    "needs {} entries (hidden layers plus output), got {}",
                    self.layers + 1,
                    self.kernels.len()
                ),
            ));
        }
        Ok(self.kernels.clone())
    }
}

/// Inducing-point runs; mirrors [`SplitSetup`] plus the method and split.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparseSection {
    pub method: SparseMethod,
    /// Split number; the split is drawn with this number as its seed.
    pub split: u64,
    pub test_fraction: f64,
    pub hidden_layers: usize,
    pub kernel: KernelSpec,
    pub hidden_nu: f64,
    pub noise_fraction: f64,
    pub inducing: usize,
    pub batch_size: Option<usize>,
    pub kl_order: KlOrder,
    pub output: OutputMode,
    pub train_hypers: bool,
    pub train_noise: bool,
}

impl Default for SparseSection {
    fn default() -> Self {
        let s = SplitSetup::default();
        SparseSection {
            method: SparseMethod::Dkm,
            split: 0,
            test_fraction: 0.1,
            hidden_layers: s.hidden_layers,
            kernel: s.kernel,
            hidden_nu: s.hidden_nu,
            noise_fraction: s.noise_fraction,
            inducing: s.sparse.inducing,
            batch_size: s.sparse.batch_size,
            kl_order: s.sparse.kl_order,
            output: s.sparse.output,
            train_hypers: s.sparse.train_hypers,
            train_noise: s.sparse.train_noise,
        }
    }
}

impl SparseSection {
    pub fn setup(&self, optimizer: &OptimizerConfig) -> SplitSetup {
        SplitSetup {
            hidden_layers: self.hidden_layers,
            kernel: self.kernel.clone(),
            hidden_nu: self.hidden_nu,
            noise_fraction: self.noise_fraction,
            sparse: SparseConfig {
                inducing: self.inducing,
                optimizer: optimizer.clone(),
                batch_size: self.batch_size,
                kl_order: self.kl_order,
                objective: ObjectiveKind::Dkm,
                output: self.output,
                train_hypers: self.train_hypers,
                train_noise: self.train_noise,
            },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LangevinSection {
    /// Hidden widths to sample at; every hidden layer gets the same width.
    pub widths: Vec<usize>,
    pub step_size: f64,
    pub chains: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub samples_per_chain: usize,
    /// Width ratio of the first hidden layer.
    pub nu: f64,
    /// Row whose feature values are written out as marginal samples.
    pub marginal_point: usize,
}

impl Default for LangevinSection {
    fn default() -> Self {
        let d = DgpConfig::default();
        LangevinSection {
            widths: vec![32, 512],
            step_size: d.step_size,
            chains: d.chains,
            burn_in: d.burn_in,
            thin: d.thin,
            samples_per_chain: d.samples_per_chain,
            nu: d.nu,
            marginal_point: 0,
        }
    }
}

impl LangevinSection {
    pub fn dgp(&self, width: usize, model: &ModelConfig, seed: u64) -> Result<DgpConfig, CliError> {
        Ok(DgpConfig {
            widths: vec![width; model.layers],
            kernels: model.kernel_list()?,
            noise_var: model.noise_var,
            step_size: self.step_size,
            chains: self.chains,
            burn_in: self.burn_in,
            thin: self.thin,
            samples_per_chain: self.samples_per_chain,
            nu: self.nu,
            seed,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    /// Input Gram matrix, row by row; taken from the dataset when absent.
    pub input_gram: Option<Vec<Vec<f64>>>,
    /// Output Gram matrix; `(1/ν)YYᵀ` of the dataset when absent.
    pub output_gram: Option<Vec<Vec<f64>>>,
    pub layers: usize,
    /// `ν_1 … ν_{L+1}`; equal widths when absent.
    pub nus: Option<Vec<f64>>,
    /// Added to the diagonal of a dataset output Gram, relative to its mean diagonal.
    pub jitter: f64,
    /// Also run the optimizer with linear kernels and compare.
    pub optimize: bool,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            input_gram: None,
            output_gram: None,
            layers: 3,
            nus: None,
            jitter: 1e-6,
            optimize: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UnimodalitySection {
    /// Number of random restarts; restart `k` uses seed `seed + k`.
    pub restarts: u64,
}

impl Default for UnimodalitySection {
    fn default() -> Self {
        UnimodalitySection { restarts: 5 }
    }
}

/// Reads the config (if any), applies `key=value` overrides with dotted keys,
/// then validates the result.
pub fn load(
    path: Option<&Path>,
    overrides: &[(String, toml::Value)],
) -> Result<RunConfig, CliError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    let origin = path.map_or_else(|| "command line".to_string(), |p| p.display().to_string());
    if overrides.is_empty() {
        return toml::from_str(&text).map_err(|e| CliError::Config(format!("{origin}: {e}")));
    }
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
    for (key, value) in overrides {
        set_dotted(&mut table, key, value.clone())?;
    }
    let merged = toml::to_string(&table).map_err(|e| CliError::Config(e.to_string()))?;
    toml::from_str(&merged).map_err(|e| CliError::Config(format!("{origin} with overrides: {e}")))
}

/// TOML literal if it parses as one, otherwise a plain string.
pub fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::key(key, "malformed key"));
    }
    let mut here = table;
    for part in &parts[..parts.len() - 1] {
        let entry = here
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        here = entry
            .as_table_mut()
            .ok_or_else(|| CliError::key(key, format!("`{part}` is not a table")))?;
    }
    here.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Splits `KEY=VALUE`.
pub fn split_assignment(raw: &str) -> Result<(String, String), CliError> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| CliError::Config(format!("override {raw:?} is not of the form KEY=VALUE")))
}

/// `sqexp` becomes `{ type = "sqexp" }`; inline tables pass through.
pub fn kernel_value(raw: &str) -> toml::Value {
    match parse_value(raw) {
        toml::Value::String(name) => {
            let mut t = toml::Table::new();
            t.insert("type".into(), toml::Value::String(name));
            toml::Value::Table(t)
        }
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(pairs: &[(&str, &str)]) -> Vec<(String, toml::Value)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), parse_value(v)))
            .collect()
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = load(
            None,
            &set(&[
                ("seed", "3"),
                ("model.kernel", "{ type = \"leaky_relu\", p = 0.5 }"),
                ("optimizer.iterations", "7"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.kernel, KernelSpec::LeakyRelu { p: 0.5 });
        assert_eq!(cfg.optimizer.iterations, 7);
    }

    #[test]
    fn seed_is_required() {
        let e = load(None, &[]).unwrap_err();
        assert!(e.to_string().contains("seed"), "{e}");
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = load(None, &set(&[("seed", "1"), ("model.depth", "2")])).unwrap_err();
        assert!(e.to_string().contains("depth"), "{e}");
    }

    #[test]
    fn bare_kernel_names_become_tables() {
        assert_eq!(
            kernel_value("arc_cos_relu").to_string(),
            "{ type = \"arc_cos_relu\" }"
        );
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = load(None, &set(&[("seed", "5"), ("dataset.name", "yacht")])).unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.seed, 5);
        assert_eq!(back.sparse.kernel, cfg.sparse.kernel);
    }
}
