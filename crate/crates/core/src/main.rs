use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use log::error;

use vpconvex::config::{Mode, RunConfig};
use vpconvex::run::{run, EXIT_CONFIG};

/// Environment variable overriding the output directory of the config file.
const OUT_DIR_ENV: &str = "VPCONVEX_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "vpconvex", version, about = "Vlasov–Poisson particle solver for convex domains with specular walls")]
struct Cli {
    /// Run configuration (JSON).
    config: PathBuf,
    /// Run this mode instead of the one in the config.
    #[arg(long, value_enum)]
    mode_override: Option<Mode>,
    /// Output directory; takes precedence over the environment and the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Sampling seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match RunConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            error!("{}: {e}", cli.config.display());
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    if let Some(m) = cli.mode_override {
        cfg.mode = m;
    }
    if let Some(dir) = cli.out_dir {
        cfg.output_dir = dir;
    } else if let Some(dir) = std::env::var_os(OUT_DIR_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(s) = cli.seed {
        cfg.initial.seed = s;
    }
    match run(&cfg) {
        Ok(outcome) => {
            if outcome.exit_code == 0 {
                log::info!("{}", outcome.message);
            } else {
                error!("{}", outcome.message);
            }
            ExitCode::from(outcome.exit_code as u8)
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
