use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seek_cli::runner::{describe, gradcheck, GRADCHECK_TOLERANCE};
use seek_cli::{execute, CliError, ConfigKind, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "seek", version, about = "Train and evaluate SEEK Gaussian-process models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every repetition of a single configuration.
    Run(Target),
    /// Run one group per value of the [sweep] axis.
    Sweep(Target),
    /// Run every kernel family listed in [compare] on the same data.
    Compare(Target),
    /// Check a config without training anything.
    Validate(Target),
    /// Compare analytic and finite-difference NLL gradients.
    Gradcheck(Target),
}

#[derive(Args)]
struct Target {
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Target {
    fn load(&self) -> seek_cli::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            seed: self.seed,
            repetitions: self.reps,
            output_dir: self.out.clone(),
        });
        Ok(cfg)
    }
}

fn dispatch(command: Command) -> seek_cli::Result<String> {
    let (target, kind) = match command {
        Command::Run(t) => (t, ConfigKind::Run),
        Command::Sweep(t) => (t, ConfigKind::Sweep),
        Command::Compare(t) => (t, ConfigKind::Compare),
        Command::Validate(t) => return Ok(describe(&t.load()?)?.to_string()),
        Command::Gradcheck(t) => {
            let reports = gradcheck(&t.load()?)?;
            let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
            let line = serde_json::json!({
                "status": if worst <= GRADCHECK_TOLERANCE { "ok" } else { "error" },
                "tolerance": GRADCHECK_TOLERANCE,
                "max_rel_error": worst,
                "groups": reports,
            })
            .to_string();
            if worst > GRADCHECK_TOLERANCE {
                println!("{line}");
                return Err(CliError::Runtime(format!(
                    "gradient check failed: relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:.0e}"
                )));
            }
            return Ok(line);
        }
    };
    Ok(execute(&target.load()?, kind)?.status_line())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
