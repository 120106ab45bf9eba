use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gatenas::config::Config;
use gatenas::pipeline::{self, RunOptions};
use gatenas::{archfile, profile, Error, Result};
use gatenas_core::resource::{resource_report, ResourceReport};
use gatenas_core::train::{EpochSummary, StageTag};

/// Per-channel operation search: train, search, fine-tune and inspect
/// pruned convolutional networks.
#[derive(Parser)]
#[command(name = "gatenas", version)]
struct Cli {
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Experiment directory.
    #[arg(long, global = true, default_value = "experiment")]
    out_dir: PathBuf,
    /// Continue from the latest checkpoint in the experiment directory.
    #[arg(long, global = true)]
    resume: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain, search and fine-tune, then write the architecture.
    Run {
        /// Stop after this many epochs (for testing resume).
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Run up to the end of pretraining.
    Pretrain,
    /// Run up to the end of the search.
    Search,
    /// Run up to the end of fine-tuning and write the architecture.
    Finetune,
    /// Compile the latest checkpoint into architecture.json.
    Compile {
        /// Compile the freshly built dense network instead.
        #[arg(long)]
        dense: bool,
    },
    /// Resource report of an architecture file.
    Report {
        architecture: PathBuf,
        /// Latency profile used to predict latency.
        #[arg(long)]
        latency_profile: Option<PathBuf>,
    },
    /// Fit the affine latency model of a profile.
    FitLatency { profile: PathBuf },
    /// Test accuracy of an architecture file on the configured data.
    Eval { architecture: PathBuf },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn print_report(r: &ResourceReport) {
    println!("parameters: {}", r.parameters);
    println!("flops: {}", r.flops);
    match r.predicted_latency_ms {
        Some(ms) => println!("predicted_latency_ms: {ms}"),
        None => println!("predicted_latency_ms: n/a"),
    }
}

fn run_stages(cli: &Cli, until: Option<StageTag>, resume: bool, stop_after: Option<usize>) -> Result<()> {
    let config = load_config(cli)?;
    let mut epochs = 0usize;
    let mut hook = |_: &EpochSummary| {
        epochs += 1;
        stop_after.is_some_and(|n| epochs >= n)
    };
    let opts = RunOptions {
        resume,
        until,
        interrupt: if stop_after.is_some() { Some(&mut hook) } else { None },
    };
    let outcome = pipeline::run(&config, &cli.out_dir, opts)?;
    match outcome.result {
        Some(r) => print!("{}", pipeline::summary_text(&config, &r)),
        None => println!("stopped before stage {} ({} epochs logged)", outcome.stage, outcome.metrics.len()),
    }
    Ok(())
}

fn report(path: &Path, latency_profile: Option<&Path>) -> Result<()> {
    let file = archfile::ArchitectureFile::load(path)?;
    let model = match latency_profile {
        Some(p) => Some(profile::load(p)?.fit()?),
        None => None,
    };
    print_report(&resource_report(&file.descriptor()?, model.as_ref())?);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run { stop_after } => run_stages(cli, None, cli.resume, *stop_after),
        Command::Pretrain => run_stages(cli, Some(StageTag::Pretrain), true, None),
        Command::Search => run_stages(cli, Some(StageTag::Search), true, None),
        Command::Finetune => run_stages(cli, Some(StageTag::Finetune), true, None),
        Command::Compile { dense } => {
            let config = load_config(cli)?;
            let r = pipeline::compile_experiment(&config, &cli.out_dir, *dense)?;
            print_report(&r);
            Ok(())
        }
        Command::Report { architecture, latency_profile } => report(architecture, latency_profile.as_deref()),
        Command::FitLatency { profile: path } => {
            let model = profile::load(path)?.fit()?;
            print!("{}", profile::format_model(&model));
            Ok(())
        }
        Command::Eval { architecture } => {
            let config = load_config(cli)?;
            println!("accuracy: {}", pipeline::evaluate(&config, architecture)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.category());
            ExitCode::from(if matches!(e, Error::Interrupted { .. }) { 3 } else { 1 })
        }
    }
}
