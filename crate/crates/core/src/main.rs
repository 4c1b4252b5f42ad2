use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use condyn::config::RunConfig;
use condyn::harness;

#[derive(Parser)]
#[command(name = "condyn", version, about = "Model-based RL with sequence-consistent dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the k × α × seed grid; each cell writes to <out_dir>/k<k>-a<α>-s<seed>.
    AblateK {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        ks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Defaults to the config's alpha.
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<f64>,
        /// Worker threads; defaults to the available parallelism.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Imagination log-likelihood of a state-space snapshot at a horizon.
    Robustness {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long, default_value_t = 50)]
        horizon: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a scripted-expert trajectory dataset.
    GenData {
        #[arg(long)]
        env: String,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate metrics across seeds.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        window: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let out = harness::run_experiment(&cfg)?;
            println!("metrics: {}", out.metrics.display());
            println!("snapshot: {}", out.snapshot.display());
        }
        Command::AblateK { config, ks, seeds, alphas, jobs } => {
            let cfg = RunConfig::load(&config)?;
            let alphas = if alphas.is_empty() { vec![cfg.alpha] } else { alphas };
            let plan = harness::ablation_plan(&cfg, &ks, &seeds, &alphas)?;
            let results = harness::run_all(&plan, jobs.unwrap_or_else(harness::default_jobs));
            let mut first_error = None;
            for (cell, result) in plan.iter().zip(results) {
                match result {
                    Ok(out) => println!("{}", out.dir.display()),
                    Err(e) => {
                        eprintln!("{}: {e}", cell.out_dir.display());
                        first_error.get_or_insert(e);
                    }
                }
            }
            if let Some(e) = first_error {
                return Err(e.into());
            }
        }
        Command::Robustness { snapshot, horizon, data, seed } => {
            let ll = harness::evaluate_robustness(&snapshot, horizon, &data, seed)
                .with_context(|| format!("evaluating {}", snapshot.display()))?;
            println!("{ll}");
        }
        Command::GenData { env, episodes, out, seed } => {
            harness::gen_data(&env, episodes, &out, seed)?;
            println!("{}", out.display());
        }
        Command::Report { runs, out, window } => {
            let rows = harness::emit_report(&runs, &out, window)?;
            println!("{rows} rows -> {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<condyn::Error>().map_or(2, condyn::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
