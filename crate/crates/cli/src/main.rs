use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info, warn};
use mvlap_core::experiment::{execute, exit, exit_code, verify_bundle, ExperimentSpec, RunOptions};
use mvlap_core::Error;

#[derive(Parser)]
#[command(name = "mvlap", version, about = "Particle-system large-deviation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its bundle.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Caps worker threads; results do not depend on it.
        #[arg(long, env = "MVLAP_THREADS")]
        threads: Option<usize>,
        /// Also write the binary path grid.
        #[arg(long)]
        dump_paths: bool,
    },
    /// Re-run a bundle and compare its results byte for byte.
    Verify {
        dir: PathBuf,
        #[arg(long, env = "MVLAP_THREADS")]
        threads: Option<usize>,
    },
}

fn load(path: &PathBuf) -> Result<ExperimentSpec, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentSpec::from_toml(&text)
}

fn write_config_error(out: &PathBuf, e: &Error) {
    let _ = std::fs::create_dir_all(out);
    let record = serde_json::json!({ "error": e.to_string(), "exit_code": exit_code(e), "kind": "Config" });
    let _ = std::fs::write(out.join("error.json"), format!("{record:#}\n"));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run {
            config,
            seed,
            out,
            threads,
            dump_paths,
        } => match load(&config) {
            Err(e) => {
                error!("{e}");
                write_config_error(&out, &e);
                exit_code(&e)
            }
            Ok(spec) => {
                let opts = RunOptions {
                    out_dir: out.clone(),
                    seed_override: seed,
                    threads,
                    dump_paths,
                };
                let summary = execute(spec, &opts);
                for w in &summary.warnings {
                    warn!("{w}");
                }
                match (&summary.message, summary.exit_code) {
                    (Some(m), exit::OK) => info!("{m}"),
                    (Some(m), _) => error!("{m}"),
                    (None, _) => info!("wrote {}", out.display()),
                }
                summary.exit_code
            }
        },
        Command::Verify { dir, threads } => match verify_bundle(&dir, threads) {
            Ok(report) if report.matched => {
                println!("match");
                exit::OK
            }
            Ok(report) => {
                println!("mismatch");
                for d in &report.differences {
                    println!("  {d}");
                }
                exit::FAILURE
            }
            Err(e) => {
                error!("{e}");
                exit_code(&e)
            }
        },
    };
    ExitCode::from(code as u8)
}
