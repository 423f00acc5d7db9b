mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{kernel_value, parse_value, split_assignment, RunConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "dkm", version, about = "Deep kernel machine experiments")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the Gram matrices of a full model on a dataset.
    Train(RunArgs),
    /// Train an inducing-point model on one train/test split.
    TrainSparse(RunArgs),
    /// Predict with a `train-sparse` run on a CSV file.
    Predict {
        /// Directory written by `train-sparse`.
        #[arg(long)]
        run: PathBuf,
        /// CSV with the same input and target columns as the training data.
        #[arg(long)]
        data: PathBuf,
        /// Output CSV; defaults to `predictions.csv` in the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the analytic linear-kernel solution with the optimizer.
    OracleLinear(RunArgs),
    /// Langevin sampling of finite-width networks against the DKM optimum.
    ValidateLangevin(RunArgs),
    /// Optimize from several random starts and compare the solutions.
    Unimodality(RunArgs),
    /// Tabulate test RMSE of `train-sparse` runs.
    Report {
        /// Summary files or directories to search.
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// Directory for `table.md` and `table.csv`; prints the table when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Flags shared by the configured commands. Each one overrides the config key
/// named in its help text; `--set` reaches any other key.
#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set optimizer.learning_rate=1e-2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// `seed`
    #[arg(long)]
    seed: Option<u64>,
    /// `output_dir`
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// `dataset.name`
    #[arg(long)]
    dataset: Option<String>,
    /// `dataset.path`
    #[arg(long)]
    data: Option<PathBuf>,
    /// `dataset.subset`
    #[arg(long)]
    subset: Option<usize>,
    /// `model.layers` (`sparse.hidden_layers` for train-sparse)
    #[arg(long)]
    layers: Option<usize>,
    /// `model.kernel` (`sparse.kernel` for train-sparse): a name or an inline table
    #[arg(long)]
    kernel: Option<String>,
    /// `model.likelihood_weight`
    #[arg(long)]
    likelihood_weight: Option<f64>,
    /// `optimizer.iterations`
    #[arg(long)]
    iterations: Option<usize>,
    /// `optimizer.learning_rate`
    #[arg(long)]
    learning_rate: Option<f64>,
    /// `sparse.method`
    #[arg(long)]
    method: Option<String>,
    /// `sparse.split`
    #[arg(long)]
    split: Option<u64>,
}

impl RunArgs {
    fn load(&self, sparse: bool) -> Result<RunConfig, CliError> {
        let (layers_key, kernel_key) = if sparse {
            ("sparse.hidden_layers", "sparse.kernel")
        } else {
            ("model.layers", "model.kernel")
        };
        let mut overrides: Vec<(String, toml::Value)> = Vec::new();
        let mut push = |k: &str, v: toml::Value| overrides.push((k.to_string(), v));
        let int = |v: u64| toml::Value::Integer(v as i64);
        let path = |p: &PathBuf| toml::Value::String(p.display().to_string());
        if let Some(v) = self.seed {
            push("seed", int(v));
        }
        if let Some(v) = &self.output_dir {
            push("output_dir", path(v));
        }
        if let Some(v) = &self.dataset {
            push("dataset.name", toml::Value::String(v.clone()));
        }
        if let Some(v) = &self.data {
            push("dataset.path", path(v));
        }
        if let Some(v) = self.subset {
            push("dataset.subset", int(v as u64));
        }
        if let Some(v) = self.layers {
            push(layers_key, int(v as u64));
        }
        if let Some(v) = &self.kernel {
            push(kernel_key, kernel_value(v));
        }
        if let Some(v) = self.likelihood_weight {
            push("model.likelihood_weight", toml::Value::Float(v));
        }
        if let Some(v) = self.iterations {
            push("optimizer.iterations", int(v as u64));
        }
        if let Some(v) = self.learning_rate {
            push("optimizer.learning_rate", toml::Value::Float(v));
        }
        if let Some(v) = &self.method {
            push("sparse.method", toml::Value::String(v.clone()));
        }
        if let Some(v) = self.split {
            push("sparse.split", int(v));
        }
        for raw in &self.set {
            let (k, v) = split_assignment(raw)?;
            push(&k, parse_value(&v));
        }
        config::load(self.config.as_deref(), &overrides)
    }
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    match cli.command {
        Command::Train(a) => commands::train(&a.load(false)?),
        Command::TrainSparse(a) => commands::train_sparse(&a.load(true)?),
        Command::Predict { run, data, out } => commands::predict(&run, &data, out.as_deref()),
        Command::OracleLinear(a) => commands::oracle_linear(&a.load(false)?),
        Command::ValidateLangevin(a) => commands::validate_langevin(&a.load(false)?),
        Command::Unimodality(a) => commands::unimodality(&a.load(false)?),
        Command::Report { paths, out } => commands::report(&paths, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(summary) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serializes")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("dkm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
