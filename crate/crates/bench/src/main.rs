use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use ovfilt_bench::config::{Experiment, Method};
use ovfilt_bench::experiments::execute;
use ovfilt_bench::metrics::write_metrics;
use ovfilt_bench::{run_to_dir, BenchError, RunConfig};

#[derive(Parser)]
#[command(name = "ovfilt", version, about = "Online variational filtering benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment configuration.
    Run {
        /// Configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Overrides the `seed` key.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides the `out` key).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Method, or a comma-separated list run in parallel into per-method subdirectories.
        #[arg(long)]
        method: Option<String>,
        /// Use the full-size budgets instead of the desk-scale defaults.
        #[arg(long)]
        paper_scale: bool,
    },
    /// Exact reference computations.
    Oracle {
        #[command(subcommand)]
        which: Oracle,
    },
    /// Print every configuration key with its default value.
    Reference,
}

#[derive(Subcommand)]
enum Oracle {
    /// Kalman filter on the configured linear-Gaussian data; prints per-step metrics.
    Kalman {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn worker_cap() -> usize {
    std::env::var("OVFILT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn parse_methods(list: &str) -> Result<Vec<Method>, BenchError> {
    list.split(',')
        .map(|s| {
            Method::parse(s.trim()).ok_or_else(|| BenchError::ConfigInvalid { key: "method".into(), msg: format!("unknown method {s:?}") })
        })
        .collect()
}

fn run_one(cfg: &RunConfig, dir: &Path) -> Result<(), BenchError> {
    let s = run_to_dir(cfg, dir)?;
    println!(
        "{} {}: {} steps, final rmse {}, written to {}",
        s.experiment,
        s.method,
        s.steps_completed,
        s.final_rmse.map_or("-".into(), |v| format!("{v:.4}")),
        dir.display()
    );
    Ok(())
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>, method: Option<String>, paper_scale: bool) -> Result<(), BenchError> {
    let mut base = RunConfig::load(config)?;
    if let Some(s) = seed {
        base.seed = s;
    }
    if paper_scale {
        base.apply_paper_scale();
    }
    let out = out.unwrap_or_else(|| PathBuf::from(&base.out));
    let methods = match &method {
        Some(m) => parse_methods(m)?,
        None => vec![base.method],
    };
    let mut jobs = Vec::new();
    for m in &methods {
        let mut cfg = base.clone();
        cfg.method = *m;
        cfg.out = out.display().to_string();
        cfg.validate()?;
        let dir = if methods.len() > 1 { out.join(m.name()) } else { out.clone() };
        jobs.push((cfg, dir));
    }
    if jobs.len() == 1 {
        let (cfg, dir) = &jobs[0];
        return run_one(cfg, dir);
    }
    let next = AtomicUsize::new(0);
    let first_error = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..worker_cap().min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((cfg, dir)) = jobs.get(i) else { break };
                if let Err(e) = run_one(cfg, dir) {
                    eprintln!("{}: {e}", cfg.method.name());
                    first_error.lock().unwrap().get_or_insert(e);
                }
            });
        }
    });
    match first_error.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn oracle_kalman(config: &Path, seed: Option<u64>) -> Result<(), BenchError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.experiment = Experiment::LgInference;
    cfg.method = Method::Kf;
    cfg.validate()?;
    let outcome = execute(&cfg);
    write_metrics(&outcome.rows, std::io::stdout().lock())?;
    if let Some(ll) = outcome.summary.loglik {
        eprintln!("log evidence {ll}");
    }
    match outcome.error {
        Some(e) => Err(BenchError::Numerical(ovfilt_core::Error::Precondition(e))),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out, method, paper_scale } => run(&config, seed, out, method, paper_scale),
        Command::Oracle { which: Oracle::Kalman { config, seed } } => oracle_kalman(&config, seed),
        Command::Reference => {
            print!("{}", RunConfig::reference());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
