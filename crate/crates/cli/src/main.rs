mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use config::Settings;

#[derive(Debug, Parser)]
#[command(name = "hoproute", version, about = "Two-hop retrieval routing: ingest, embed, train, evaluate, experiment")]
struct Cli {
    /// TOML config file; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// More log output (repeat for debug)
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate dataset files and print counts
    Ingest {
        #[command(flatten)]
        settings: Settings,
    },
    /// Fetch every embedding a run needs into the vector store
    Embed {
        #[command(flatten)]
        settings: Settings,
        /// Only count missing embeddings; no network access
        #[arg(long)]
        dry_run: bool,
    },
    /// Train the selector (from annotations) and the cross-fitted router
    Train {
        #[command(flatten)]
        settings: Settings,
    },
    /// Run the routed evaluation and write a report
    Eval {
        #[command(flatten)]
        settings: Settings,
        /// Leave the timestamp out of the report
        #[arg(long)]
        deterministic: bool,
    },
    /// Run one named experiment
    Experiment {
        /// One of: main-eval, knockout, oracle, ablations, threshold-sweep, synthetic-calibration, calibration, mixture, regime-assignment, kappa
        name: String,
        #[command(flatten)]
        settings: Settings,
        /// Leave the timestamp out of the report
        #[arg(long)]
        deterministic: bool,
    },
    /// Print a summary of a JSON report
    Report {
        /// Report file written by eval or experiment
        path: PathBuf,
    },
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn settings(flags: Settings, config: &Option<PathBuf>) -> anyhow::Result<Settings> {
    let file = match config {
        Some(p) => Settings::load_file(p)?,
        None => Settings::default(),
    };
    Ok(flags.over(file))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Ingest { settings: s } => commands::ingest(&settings(s, &cli.config)?),
        Command::Embed { settings: s, dry_run } => commands::embed(&settings(s, &cli.config)?, dry_run),
        Command::Train { settings: s } => commands::train(&settings(s, &cli.config)?),
        Command::Eval {
            settings: s,
            deterministic,
        } => commands::experiment("main-eval", &settings(s, &cli.config)?, deterministic),
        Command::Experiment {
            name,
            settings: s,
            deterministic,
        } => commands::experiment(&name, &settings(s, &cli.config)?, deterministic),
        Command::Report { path } => report::print_summary(&path),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
