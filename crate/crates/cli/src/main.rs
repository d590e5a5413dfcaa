mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use config::RunConfig;
use error::CliError;
use output::{sha256_hex, Manifest, RunOutput};

/// Spectral stability and decay of periodic traveling waves.
///
/// Numeric settings live in the TOML config; any key can be overridden by an
/// environment variable `PERSTAB_<TABLE>__<KEY>` (for example
/// `PERSTAB_RESOLUTION__SAMPLES=64`).
#[derive(Debug, Parser)]
#[command(name = "perstab", version)]
struct Cli {
    #[arg(long, env = "PERSTAB_CONFIG", global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel sweeps (default: all cores).
    #[arg(long, env = "PERSTAB_THREADS", global = true)]
    threads: Option<usize>,
    /// Output directory; overrides `output` in the config.
    #[arg(long, env = "PERSTAB_OUT", global = true)]
    out: Option<PathBuf>,
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Periodic profiles.
    Profile {
        #[command(subcommand)]
        action: ProfileAction,
    },
    /// Averaged first-order system and its characteristic speeds.
    Homogenize,
    /// Bloch spectra over the Brillouin zone.
    Spectrum,
    /// Critical eigenvalue branches near the origin.
    Surfaces,
    /// Spectral stability conditions at all and at small frequencies.
    StabilityReport,
    /// Periodic Evans function.
    Evans {
        #[command(subcommand)]
        action: EvansAction,
    },
    /// Nonlinear evolution of a perturbation with the energy check.
    Evolve,
    /// Linear decay rates.
    Decay,
    /// Convection-diffusion approximation of the low-frequency part.
    Asymptotics,
    /// Runs the acceptance suite.
    VerifyAll,
}

#[derive(Debug, Subcommand)]
enum ProfileAction {
    Find,
    Continue,
}

#[derive(Debug, Subcommand)]
enum EvansAction {
    Eval,
    Wind,
    Lowfreq,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Profile { action: ProfileAction::Find } => "profile-find",
            Command::Profile { action: ProfileAction::Continue } => "profile-continue",
            Command::Homogenize => "homogenize",
            Command::Spectrum => "spectrum",
            Command::Surfaces => "surfaces",
            Command::StabilityReport => "stability-report",
            Command::Evans { action: EvansAction::Eval } => "evans-eval",
            Command::Evans { action: EvansAction::Wind } => "evans-wind",
            Command::Evans { action: EvansAction::Lowfreq } => "evans-lowfreq",
            Command::Evolve => "evolve",
            Command::Decay => "decay",
            Command::Asymptotics => "asymptotics",
            Command::VerifyAll => "verify-all",
        }
    }

    fn run(&self, cfg: &RunConfig, out: &mut RunOutput) -> Result<Option<bool>, CliError> {
        match self {
            Command::Profile { action: ProfileAction::Find } => commands::profile_find(cfg, out),
            Command::Profile { action: ProfileAction::Continue } => commands::profile_continue(cfg, out),
            Command::Homogenize => commands::homogenize(cfg, out),
            Command::Spectrum => commands::spectrum(cfg, out),
            Command::Surfaces => commands::surfaces(cfg, out),
            Command::StabilityReport => commands::stability_report(cfg, out),
            Command::Evans { action: EvansAction::Eval } => commands::evans_eval(cfg, out),
            Command::Evans { action: EvansAction::Wind } => commands::evans_wind(cfg, out),
            Command::Evans { action: EvansAction::Lowfreq } => commands::evans_lowfreq(cfg, out),
            Command::Evolve => commands::run_evolve(cfg, out),
            Command::Decay => commands::decay(cfg, out),
            Command::Asymptotics => commands::asymptotics(cfg, out),
            Command::VerifyAll => commands::verify_all(cfg, out),
        }
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", output::to_json_string(&e.to_json()));
    ExitCode::from(e.exit_code() as u8)
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_env("PERSTAB_LOG").unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    match &cli.config {
        Some(path) => RunConfig::load(path),
        // The acceptance suite fixes its own problems; the config only selects criteria.
        None if matches!(cli.command, Command::VerifyAll) => RunConfig::from_toml("model = \"heat\"", std::env::vars()),
        None => Err(CliError::Config { message: "--config is required for this command".into(), key: Some("config".into()) }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(&CliError::Config { message: e.to_string().trim().to_string(), key: None }),
    };
    init_logging(cli.verbose);
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let threads = cli.threads.unwrap_or(0);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        return fail(&CliError::Io(format!("cannot start worker pool: {e}")));
    }
    let dir = cli.out.clone().or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("perstab-out"));
    let mut out = match RunOutput::new(&dir) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    let effective = cfg.to_toml();
    let mut result = std::fs::write(dir.join("config.toml"), &effective).map_err(CliError::from).map(|_| None);
    if result.is_ok() {
        out.outputs.push("config.toml".into());
        result = cli.command.run(&cfg, &mut out);
    }
    let manifest = Manifest {
        command: cli.command.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: sha256_hex(effective.as_bytes()),
        seed: cfg.seed,
        threads: rayon::current_num_threads(),
        stages: std::mem::take(&mut out.stages),
        outputs: std::mem::take(&mut out.outputs),
        pass: result.as_ref().ok().copied().flatten(),
        error: result.as_ref().err().map(CliError::to_json),
    };
    if let Err(e) = out.json("manifest.json", &manifest) {
        return fail(&e);
    }
    match result {
        Ok(Some(false)) => {
            eprintln!("{}", output::to_json_string(&serde_json::json!({ "error": "check", "command": manifest.command, "manifest": dir.join("manifest.json") })));
            ExitCode::from(1)
        }
        Ok(_) => {
            println!("{}", dir.join("manifest.json").display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
