use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use tracing_subscriber::filter::LevelFilter;

use compose_cli::commands::{cmd_evaluate, cmd_explain, cmd_match, cmd_synth, cmd_train};
use compose_cli::config::parse_assignment;
use compose_cli::{CliError, RunConfig};

/// Patient/trial matching: synthesize data, train, evaluate, match, explain.
#[derive(Debug, Parser)]
#[command(name = "compose", version)]
struct Cli {
    /// JSON config file; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, byte-reproducible run.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
    /// Override any config key, e.g. `--set train.epochs=5`. The named
    /// flags below are applied after these.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    #[arg(long, global = true)]
    paths_data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    paths_output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    paths_model: Option<PathBuf>,
    #[arg(long, global = true)]
    train_epochs: Option<usize>,
    #[arg(long, global = true)]
    train_learning_rate: Option<f64>,
    #[arg(long, global = true)]
    train_batch_size: Option<usize>,
    #[arg(long, global = true)]
    train_use_distance_loss: Option<bool>,
    #[arg(long, global = true)]
    model_mem_dim: Option<usize>,
    #[arg(long, global = true)]
    synth_n_patients: Option<usize>,
    #[arg(long, global = true)]
    synth_n_trials: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset into `paths.data_dir`.
    Synth,
    /// Train a model and write it with its per-epoch metrics.
    Train,
    /// Score the saved model on the test split.
    Evaluate,
    /// Per-criterion predictions and trial verdicts for one pair.
    Match { patient_id: String, trial_id: String },
    /// Attention weights and a PCA projection for one pair.
    Explain { patient_id: String, trial_id: String },
}

impl Cli {
    fn overrides(&self) -> Result<Vec<(String, Value)>, CliError> {
        let mut out = Vec::new();
        for s in &self.set {
            out.push(parse_assignment(s)?);
        }
        let mut put = |key: &str, v: Option<Value>| {
            if let Some(v) = v {
                out.push((key.to_string(), v));
            }
        };
        put("seed", self.seed.map(|v| json!(v)));
        put("deterministic", self.deterministic.then(|| json!(true)));
        put("paths.data_dir", self.paths_data_dir.as_ref().map(|v| json!(v)));
        put("paths.output_dir", self.paths_output_dir.as_ref().map(|v| json!(v)));
        put("paths.model", self.paths_model.as_ref().map(|v| json!(v)));
        put("train.epochs", self.train_epochs.map(|v| json!(v)));
        put("train.learning_rate", self.train_learning_rate.map(|v| json!(v)));
        put("train.batch_size", self.train_batch_size.map(|v| json!(v)));
        put("train.use_distance_loss", self.train_use_distance_loss.map(|v| json!(v)));
        put("model.mem_dim", self.model_mem_dim.map(|v| json!(v)));
        put("synth.n_patients", self.synth_n_patients.map(|v| json!(v)));
        put("synth.n_trials", self.synth_n_trials.map(|v| json!(v)));
        Ok(out)
    }

    fn config(&self) -> Result<RunConfig, CliError> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        base.with_overrides(&self.overrides()?)?.resolve()
    }
}

fn run(cli: &Cli) -> Result<Value, CliError> {
    let cfg = cli.config()?;
    if cfg.deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot configure thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Evaluate => cmd_evaluate(&cfg),
        Command::Match { patient_id, trial_id } => cmd_match(&cfg, patient_id, trial_id),
        Command::Explain { patient_id, trial_id } => cmd_explain(&cfg, patient_id, trial_id),
    }
}

fn fail(err: &CliError) -> ExitCode {
    eprintln!("{}", err.to_json_line());
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Usage(e.to_string().trim().to_string())),
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(if cli.verbose { LevelFilter::INFO } else { LevelFilter::WARN })
        .init();
    match run(&cli) {
        Ok(summary) => {
            // a closed pipe on stdout is not a failure of the command
            let _ = writeln!(std::io::stdout(), "{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
