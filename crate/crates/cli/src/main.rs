use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedia_core::harness::{self, RunConfig};
use fedia_core::Method;

#[derive(Parser)]
#[command(name = "fedia", version, about = "Federated segmentation under incomplete annotations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// fedavg, fedia, fedia_no_acag or fedia_no_cac.
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite an existing output directory.
        #[arg(long)]
        force: bool,
    },
    /// Tabulate last-window test Dice across run directories.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        window: usize,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Generate the federated dataset only.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

fn load(path: &Path, out: Option<PathBuf>) -> fedia_core::Result<RunConfig> {
    let mut cfg = harness::load_config(path)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> fedia_core::Result<()> {
    match cli.command {
        Command::Simulate {
            config,
            method,
            seed,
            out,
            force,
        } => {
            let mut cfg = load(&config, out)?;
            if let Some(m) = method {
                cfg.method = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            log::info!("running {} into {}", cfg.run_id(), cfg.out_dir.display());
            let paths = harness::run_experiment(&cfg, force)?;
            let summary = harness::runner::read_summary(&paths.summary)?;
            println!(
                "{}: last-{} Dice {:.2}%, final Dice {:.2}%, artifacts in {}",
                summary.run_id,
                summary.last_window,
                summary.last_window_dice,
                100.0 * summary.final_eval.dice,
                paths.dir.display()
            );
        }
        Command::Compare { runs, window, csv } => {
            let table = harness::compare(&runs, window)?;
            for w in &table.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", table.to_text());
            if let Some(path) = csv {
                std::fs::write(path, table.to_csv())?;
            }
        }
        Command::GenData { config, out, force } => {
            let cfg = load(&config, out)?;
            let dir = harness::generate_dataset(&cfg, force)?;
            println!("dataset written to {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(1)
        }
    }
}
