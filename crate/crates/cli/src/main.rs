mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, Command};

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Missing(String),
    Numeric(String),
    Other(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Other(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Missing(m) | CliError::Numeric(m) | CliError::Other(m) => m,
        }
    }
}

impl From<crossdose::Error> for CliError {
    fn from(e: crossdose::Error) -> Self {
        use crossdose::Error as E;
        match e {
            E::Validation(_) | E::Usage(_) => CliError::Config(e.to_string()),
            E::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

fn cli() -> Command {
    let cmd = Command::new("crossdose")
        .about("Cross-dose PET denoising lab on synthetic phantoms")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("out")
                .long("out")
                .value_name("DIR")
                .default_value(".")
                .value_parser(clap::value_parser!(PathBuf))
                .global(true)
                .help("Experiment root; every path is relative to it"),
        )
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .global(true)
                .help("TOML config file; defaults to <out>/crossdose.toml when that exists"),
        )
        .arg(
            Arg::new("quiet")
                .long("quiet")
                .short('q')
                .action(ArgAction::SetTrue)
                .global(true)
                .help("Only log warnings and errors"),
        )
        .subcommand(Command::new("generate").about("Synthesize phantoms and low-dose acquisitions into data/"))
        .subcommand(Command::new("analyze-noise").about("Residual noise statistics and tail histograms into noise/"))
        .subcommand(Command::new("train").about("Train one model into runs/<name>/"))
        .subcommand(Command::new("evaluate").about("Score every trained run on the test split into results/"))
        .subcommand(Command::new("report").about("Render the comparison table and the averaging-gap study into report/"))
        .subcommand(Command::new("describe").about("Print the resolved config and the model layout"));
    config::register_flags(cmd)
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("CROSSDOSE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Config(format!("CROSSDOSE_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Other(format!("thread pool: {e}")))
}

fn run() -> Result<(), CliError> {
    let matches = cli().get_matches();
    let level = if matches.get_flag("quiet") { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    init_threads()?;

    let out = matches.get_one::<PathBuf>("out").expect("has default").clone();
    let file = match matches.get_one::<PathBuf>("config") {
        Some(p) => Some(p.clone()),
        None => Some(out.join("crossdose.toml")).filter(|p| p.exists()),
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cfg = config::resolve(file.as_deref(), sub)?;
    let ctx = commands::Context { out, cfg };
    match name {
        "generate" => commands::generate(&ctx),
        "analyze-noise" => commands::analyze_noise(&ctx),
        "train" => commands::train(&ctx),
        "evaluate" => commands::evaluate(&ctx),
        "report" => commands::report(&ctx),
        "describe" => commands::describe(&ctx),
        other => Err(CliError::Config(format!("unknown command {other}"))),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
