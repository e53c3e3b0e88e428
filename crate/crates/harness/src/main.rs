use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use isarlab::config::ExperimentConfig;
use isarlab::error::{HarnessError, Result};
use isarlab::experiment::{run_experiment, run_gridgen, run_sweep, Command, RunOptions};
use isarlab::output::{write_atomic, write_json};
use isarlab::report::{compare_runs, curves_csv, run_curves};

#[derive(Parser)]
#[command(name = "isarlab", version, about = "Incremental meta-RL navigation experiments on generated grid cities")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the configured world and write per-level renderings.
    Gridgen(RunArgs),
    /// Train on the configured task from a fresh initialisation.
    Train(RunArgs),
    /// Meta-train a shared initialisation over sampled meta-tasks.
    MetaTrain(RunArgs),
    /// Meta-train (optionally), then fine-tune through the altitude curriculum.
    Curriculum(RunArgs),
    /// Meta-train on the meta world, then fine-tune on the task world.
    Transfer(RunArgs),
    /// Run one experiment per value of the configured sweep axis.
    Sweep(RunArgs),
    /// Compare episodes-to-convergence across runs; the first run is the baseline.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Smoothed learning curves (mean over seeds) as CSV.
    Curves {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Trailing window in episodes; 1 gives the raw per-episode means.
        #[arg(long, default_value_t = 200)]
        window: usize,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Seeds as a list ("0,3,7") or half-open range ("0..5").
    #[arg(long)]
    seeds: Option<String>,
    /// Seeds run in parallel.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory (overrides out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from per-seed checkpoints.
    #[arg(long)]
    resume: bool,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || HarnessError::Config(format!("--seeds: cannot parse '{s}'"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        return Ok((a..b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}

impl RunArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = parse_seeds(s)?;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn experiment(args: &RunArgs, cmd: Command) -> Result<()> {
    let cfg = args.load()?;
    let summary = run_experiment(&cfg, cmd, &RunOptions { resume: args.resume })?;
    for s in &summary.seeds {
        match s.episodes_to_convergence {
            Some(e) => println!("seed {}: converged after {e} episodes", s.seed),
            None => println!("seed {}: not converged ({} episodes)", s.seed, s.total_episodes),
        }
    }
    println!("results in {}", cfg.run_dir().display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Gridgen(a) => {
            let path = run_gridgen(&a.load()?)?;
            println!("world written to {}", path.display());
        }
        Cmd::Train(a) => experiment(&a, Command::Train)?,
        Cmd::MetaTrain(a) => experiment(&a, Command::MetaTrain)?,
        Cmd::Curriculum(a) => experiment(&a, Command::Curriculum)?,
        Cmd::Transfer(a) => experiment(&a, Command::Transfer)?,
        Cmd::Sweep(a) => {
            let report = run_sweep(&a.load()?, &RunOptions { resume: a.resume })?;
            for p in &report.points {
                println!(
                    "{}={:<6} median {:>8.1}  iqr {:>8.1}  censored {}  mean path {:.1}",
                    report.axis, p.value, p.median, p.iqr, p.censored, p.mean_success_path
                );
            }
            println!("{}", report.note);
        }
        Cmd::Compare { runs, json } => {
            let dirs: Vec<&std::path::Path> = runs.iter().map(PathBuf::as_path).collect();
            let report = compare_runs(&dirs)?;
            print!("{}", report.to_table());
            if let Some(p) = json {
                write_json(&p, &report)?;
            }
        }
        Cmd::Curves { runs, window, out } => {
            let mut points = Vec::new();
            for r in &runs {
                points.extend(run_curves(r, window)?);
            }
            let csv = curves_csv(&points)?;
            match out {
                Some(p) => write_atomic(&p, &csv)?,
                None => print!("{}", String::from_utf8_lossy(&csv)),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
