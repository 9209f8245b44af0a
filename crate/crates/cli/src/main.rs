use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use srm_dyn::experiment::{self, ExperimentConfig};
use srm_dyn::Error;

/// Structural risk minimization for one-step dynamics models.
#[derive(Parser)]
#[command(name = "srm-dyn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit every class, select by SRM error and write report.csv,
    /// curves.csv and config.echo.json.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Estimate true errors by simulation (overrides the config flag).
        #[arg(long)]
        true_error: bool,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
    /// Simulate or load the training set only and write it as CSV.
    GenData {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Output file (default: <out_dir>/dataset.csv).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 1 gives byte-reproducible output.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Overrides {
    fn load(&self, path: &PathBuf) -> Result<ExperimentConfig, Error> {
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("cannot set up {n} threads: {e}")))?;
        }
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            config,
            overrides,
            true_error,
        } => {
            let mut cfg = overrides.load(&config)?;
            cfg.true_error.enabled |= true_error;
            let report = experiment::run_experiment(&cfg)?;
            for row in report.rows.iter().filter_map(|r| r.failure.as_ref().map(|f| (r.k, f))) {
                eprintln!("warning: class {} failed: {}", row.0 + 1, row.1);
            }
            for row in &report.rows {
                if let Some(w) = &row.warning {
                    eprintln!("warning: class {}: {w}", row.k + 1);
                }
            }
            let sel = report.selected();
            println!(
                "selected k = {} ({}), SRM error {:.6}; outputs in {}",
                sel.k + 1,
                sel.class_desc,
                sel.srm_error,
                cfg.out_dir.display()
            );
        }
        Command::Validate { config } => {
            let problems = experiment::validate_config(&config)?;
            if !problems.is_empty() {
                for p in &problems {
                    println!("{p}");
                }
                return Err(Error::Config(format!("{} problem(s) in {}", problems.len(), config.display())));
            }
            println!("{}: ok", config.display());
        }
        Command::GenData {
            config,
            overrides,
            output,
        } => {
            let cfg = overrides.load(&config)?;
            let path = output.unwrap_or_else(|| cfg.out_dir.join("dataset.csv"));
            let s = experiment::gen_data(&cfg, &path)?;
            println!("wrote {} trajectories of length {} to {}", s.len(), s.horizon(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
