use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clusterplan::config::PipelineConfig;
use clusterplan::pipeline::PipelineError;
use clusterplan::stages::{self, Workspace};

#[derive(Parser)]
#[command(name = "clusterplan", version, about = "Offline novel-interest planning pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Config overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Artifact directory.
    #[arg(long, short, default_value = "run")]
    out: PathBuf,
    /// Also write plot-ready column files (eval stages).
    #[arg(long)]
    emit_plot_data: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Taxonomy, ground truth, population, novelty prior and catalog.
    Gen(Common),
    /// Serve the logging pool over the population and write the query log.
    SimulateTraffic(Common),
    /// Aggregate the query log into labels.
    Aggregate(Common),
    /// Train the alignment model and select a checkpoint.
    Train(Common),
    /// Best-of-n transition table (plus the novelty-only table).
    BuildTable(Common),
    /// Serve raw histories through the table.
    ServeBatch {
        #[command(flatten)]
        common: Common,
        /// One comma-separated history per line; defaults to the population.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Holdout ranking metrics against the random baseline.
    EvalOffline(Common),
    /// Simulated live experiment across the configured arms.
    EvalAb(Common),
    /// Every stage in order.
    Run(Common),
}

fn load_config(common: &Common) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Stage {
                stage: "config",
                message: format!("reading {}: {e}", path.display()),
            })?;
            PipelineConfig::parse(&text)?
        }
        None => PipelineConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or(clusterplan::config::ConfigError::Syntax { line: 0 })?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Vec<String>, PipelineError> {
    let (common, input) = match &cli.command {
        Command::ServeBatch { common, input } => (common, input.clone()),
        Command::Gen(c)
        | Command::SimulateTraffic(c)
        | Command::Aggregate(c)
        | Command::Train(c)
        | Command::BuildTable(c)
        | Command::EvalOffline(c)
        | Command::EvalAb(c)
        | Command::Run(c) => (c, None),
    };
    let ws = Workspace::new(&common.out, load_config(common)?, common.emit_plot_data)?;
    let one = |r: Result<String, PipelineError>| r.map(|s| vec![s]);
    match cli.command {
        Command::Gen(_) => one(stages::gen(&ws)),
        Command::SimulateTraffic(_) => one(stages::simulate_traffic(&ws)),
        Command::Aggregate(_) => one(stages::aggregate(&ws)),
        Command::Train(_) => one(stages::train(&ws)),
        Command::BuildTable(_) => one(stages::build_table(&ws)),
        Command::ServeBatch { .. } => one(stages::serve_batch_stage(&ws, input.as_deref())),
        Command::EvalOffline(_) => one(stages::eval_offline(&ws)),
        Command::EvalAb(_) => one(stages::eval_ab(&ws)),
        Command::Run(_) => stages::run_all(&ws),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(PipelineError::Config(e)) => {
            eprintln!("error: config: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
