mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use cardioreg_core::{Method, Split};
use clap::{Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

/// Synthetic cardiac SPECT / attenuation-map registration experiments.
#[derive(Parser, Debug)]
#[command(name = "cardioreg", version)]
struct Cli {
    /// Experiment configuration (JSON); omitted fields take the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Start from the 32³, 60-epoch desk defaults instead of full scale.
    #[arg(long, global = true)]
    desk_scale: bool,

    /// Restrict to one method: baseline_motion, mutual_information,
    /// densenet or densenet_dusfe.
    #[arg(long, global = true)]
    method: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the phantom cohort.
    Phantom,
    /// Simulate misregistered cases and write the dataset manifest.
    Simulate,
    /// Train the configured network methods.
    Train,
    /// Write registration estimates for test cases.
    Register {
        /// Only this case.
        #[arg(long)]
        case: Option<String>,
    },
    /// Register and score every configured method on the test split.
    Evaluate,
    /// Rebuild the comparison table from stored per-case results.
    Report,
}

fn methods(cli: &Cli, cfg: &ExperimentConfig) -> CliResult<Vec<Method>> {
    match &cli.method {
        None => Ok(cfg.methods.clone()),
        Some(name) => Method::parse(name)
            .map(|m| vec![m])
            .ok_or_else(|| CliError::Input(format!("unknown method {name:?}"))),
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Input("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Input(format!("thread pool: {e}")))?;
    }
    let cfg = config::load(cli.config.as_deref(), cli.desk_scale, cli.seed)?;
    commands::save_resolved(&cfg)?;
    let methods = methods(cli, &cfg)?;
    match &cli.command {
        Command::Phantom => {
            let records = commands::phantom(&cfg)?;
            println!("{} phantoms under {}", records.len(), cfg.data_root().display());
        }
        Command::Simulate => {
            let records = commands::simulate(&cfg)?;
            println!("{} cases under {}", records.len(), cfg.data_root().display());
        }
        Command::Train => {
            let learned: Vec<Method> = methods.iter().copied().filter(|m| m.is_learned()).collect();
            if learned.is_empty() {
                return Err(CliError::Input("no network method selected for training".into()));
            }
            let cases = commands::load_cases(&cfg, None)?;
            for m in learned {
                commands::train_method(&cfg, m, &cases)?;
            }
        }
        Command::Register { case } => {
            let mut cases = commands::load_cases(&cfg, Some(Split::Test))?;
            if let Some(id) = case {
                cases.retain(|c| &c.case_id == id);
                if cases.is_empty() {
                    return Err(CliError::Input(format!("no test case {id:?}")));
                }
            }
            for m in methods {
                let preds = commands::predict(&cfg, m, &cases)?;
                let path = commands::write_predictions(&cfg, m, &preds)?;
                if case.is_some() {
                    println!("{}", serde_json::to_string(&preds[0]).expect("prediction serializes"));
                }
                println!("{} predictions -> {}", m.as_str(), path.display());
            }
        }
        Command::Evaluate => print!("{}", commands::evaluate(&cfg, &methods)?),
        Command::Report => print!("{}", commands::report(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
