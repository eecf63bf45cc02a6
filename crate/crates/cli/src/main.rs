//! `ragadapt`: generate worlds, run adaptation experiments, verify the bounds.
//!
//! Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
//! error (including failed bound checks under `verify`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ragadapt::experiment::{self, ExperimentConfig};
use ragadapt::Error;

#[derive(Parser, Debug)]
#[command(name = "ragadapt", version, about = "Retrieval-augmented cache adaptation on synthetic embedding worlds")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory; must not exist or be empty.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Overrides `experiment.master_seed`.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Worker threads (0 = all cores).
    #[arg(long, global = true, value_name = "N", env = "RAGADAPT_THREADS")]
    threads: Option<usize>,

    /// Suppress progress and summary output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Write one synthetic world (embedding stores plus manifest).
    GenWorld,
    /// Run the experiment grid and write results.csv / summary.csv.
    Run,
    /// Check every bound on a sweep of worlds and write theory_report.csv.
    Verify,
    /// Print the result tables found in --out.
    Report,
}

impl Command {
    fn default_out(self) -> &'static str {
        match self {
            Command::GenWorld => "world",
            Command::Run => "run",
            Command::Verify => "verify",
            Command::Report => "run",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::ConfigInvalid(_) => 1,
        _ => 2,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.experiment.master_seed = seed;
    }
    Ok(cfg)
}

fn execute(cli: &Cli, cfg: &ExperimentConfig, out: &Path) -> Result<u8, Error> {
    let say = |msg: String| {
        if !cli.quiet {
            eprintln!("{msg}");
        }
    };
    match cli.command {
        Command::GenWorld => {
            experiment::gen_world_command(cfg, out)?;
            say(format!("wrote world to {}", out.display()));
        }
        Command::Run => {
            let result = experiment::run_command(cfg, out)?;
            say(format!("wrote {} result rows to {}", result.rows.len(), out.display()));
            if !cli.quiet {
                print!("{}", experiment::report(out)?);
            }
        }
        Command::Verify => {
            let result = experiment::verify_command(cfg, out)?;
            for (w, c) in result.not_applicable() {
                eprintln!("warning: world {w}: {} not applicable (condition not met)", c.name);
            }
            if !cli.quiet {
                print!("{}", result.text());
            }
            let failures = result.failures();
            if !failures.is_empty() {
                for (w, c) in failures {
                    eprintln!("error: world {w}: {} violated: lhs {:e} > rhs {:e}", c.name, c.lhs, c.rhs);
                }
                return Ok(2);
            }
            say(format!("all checks passed; report in {}", out.display()));
        }
        Command::Report => print!("{}", experiment::report(out)?),
    }
    Ok(0)
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
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(cli.command.default_out()));
    match pool.install(|| execute(&cli, &cfg, &out)) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
