//! Run directories and the files written into them.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::RunConfig;
use crate::error::CliError;

pub const SUMMARY_SCHEMA: &str = "dkm-summary/1";

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    /// Creates `<output_dir>/<name>` and snapshots the resolved config into it.
    pub fn create(config: &RunConfig, name: &str) -> Result<Self, CliError> {
        let path = config.output_dir.join(name);
        std::fs::create_dir_all(&path)?;
        let dir = RunDir { path };
        let text = toml::to_string(config).map_err(|e| CliError::Other(e.into()))?;
        std::fs::write(dir.file("config.toml"), text)?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn writer(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        Ok(BufWriter::new(File::create(self.file(name))?))
    }

    /// Writes `summary.json`: the schema tag and command name, then `fields`.
    pub fn summary(&self, command: &str, fields: impl Serialize) -> Result<Value, CliError> {
        let value = summary_value(command, fields)?;
        write_json(&self.file("summary.json"), &value)?;
        Ok(value)
    }
}

pub fn summary_value(command: &str, fields: impl Serialize) -> Result<Value, CliError> {
    let mut map = Map::new();
    map.insert("schema".into(), SUMMARY_SCHEMA.into());
    map.insert("command".into(), command.into());
    match serde_json::to_value(fields)? {
        Value::Object(rest) => map.extend(rest),
        other => {
            map.insert("result".into(), other);
        }
    }
    Ok(Value::Object(map))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Filesystem-friendly run name component.
pub fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}
