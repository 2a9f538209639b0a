use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use log::info;
use pdp_core::ablation::{self, Ablate};
use pdp_core::config::ExperimentConfig;
use pdp_core::harness::Experiment;
use pdp_core::selfcheck;
use pdp_core::PdpError;

/// Incremental object detection with dual prompt pools on a synthetic
/// glyph stream.
#[derive(Parser)]
#[command(name = "pdp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every task of the stream described by a TOML config and write
    /// the per-task report.
    Run {
        /// Experiment config (TOML). Missing keys take their defaults.
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Compare module toggles instead of a single run: ppg, shared-pool,
        /// ddl, or all for the full module table.
        #[arg(long, value_name = "MODULE")]
        ablate: Option<Ablate>,
        /// Consecutive seeds averaged per ablation row, starting at the
        /// run seed.
        #[arg(long, default_value_t = 1, requires = "ablate")]
        seeds: u64,
    },
    /// Run the oracle suites: gradient checks, Hungarian against brute
    /// force, pseudo-label partition and monotonicity.
    Selfcheck {
        /// Random points per gradient suite.
        #[arg(long, default_value_t = 100)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the default config as TOML.
    DefaultConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out, ablate, seeds } => run(config, seed, out, ablate, seeds),
        Command::Selfcheck { points, seed } => Ok(check(points, seed)),
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml());
            Ok(ExitCode::SUCCESS)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                PdpError::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run(
    path: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
    ablate: Option<Ablate>,
    seeds: u64,
) -> pdp_core::Result<ExitCode> {
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let started = Instant::now();

    if let Some(a) = ablate {
        let seed_list: Vec<u64> = (0..seeds.max(1)).map(|k| cfg.seed + k).collect();
        let rows = ablation::run(&cfg, &ablation::variants(a), &seed_list)?;
        let table = ablation::table(&rows);
        std::fs::create_dir_all(&out)?;
        std::fs::write(out.join("ablation.txt"), &table)?;
        std::fs::write(out.join("ablation.csv"), ablation::to_csv(&rows, &seed_list))?;
        print!("{table}");
        info!("ablation finished in {:.1?}", started.elapsed());
        return Ok(ExitCode::SUCCESS);
    }

    let mut experiment = Experiment::new(cfg.clone())?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    let report = experiment.run(Some(&out))?;
    print!("{}", report.to_csv());
    info!("run finished in {:.1?}; outputs in {}", started.elapsed(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn check(points: usize, seed: u64) -> ExitCode {
    let started = Instant::now();
    let results = selfcheck::run_all(points, seed);
    for r in &results {
        println!("{r}");
    }
    println!("elapsed {:.1?}", started.elapsed());
    if results.iter().all(|r| r.passed()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
