use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::rngs::StdRng;
use rand::SeedableRng;

use ids_core::envs::{true_q, Environment};
use ids_harness::aggregate::{aggregate_dir, render_aggregate_csv, render_svg};
use ids_harness::config::{ExperimentConfig, ExperimentKind};
use ids_harness::error::HarnessError;
use ids_harness::probe::{td_noise_probe, uniform_policy};
use ids_harness::runner::{self, derive_seed};

/// Information-directed exploration experiments.
#[derive(Parser)]
#[command(name = "ids-rl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSV artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dump a per-step decision trace for the IDS policies.
    #[arg(long)]
    trace: bool,
    /// Worker threads for (policy, seed) runs.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Gaussian-process bandit comparison (gp-ucb / gp-ts / gp-ids).
    Bandit(RunArgs),
    /// Train RL agents over the configured (policy, seed) grid.
    Train(RunArgs),
    /// Measure per-(state, action) TD-target variance on the config's env.
    ProbeTdNoise {
        #[arg(long)]
        config: PathBuf,
        /// Samples drawn per (state, action).
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate run CSVs into per-policy curves and an SVG plot.
    Aggregate {
        /// Directory holding the per-run CSVs.
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch() -> Result<(), HarnessError> {
    match Cli::parse().command {
        Command::Bandit(args) => run_experiment(args, ExperimentKind::GpBandit),
        Command::Train(args) => run_experiment(args, ExperimentKind::Rl),
        Command::ProbeTdNoise { config, samples, seed, out } => probe_cmd(config, samples, seed, out),
        Command::Aggregate { runs, out } => aggregate_cmd(runs, out),
    }
}

fn run_experiment(args: RunArgs, expected: ExperimentKind) -> Result<(), HarnessError> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if config.kind != expected {
        return Err(HarnessError::Config(format!(
            "config kind does not match the subcommand (expected {expected:?})"
        )));
    }
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    if let Some(threads) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
    }
    let out_dir = args
        .out
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let summaries = runner::run(&config, &out_dir, args.trace)?;
    println!(
        "{:<16} {:>6} {:>14} {:>14} {:>12} {:>9}",
        "policy", "seed", "final_return", "cum_regret", "steps_thr", "secs"
    );
    for s in &summaries {
        println!(
            "{:<16} {:>6} {:>14.4} {:>14} {:>12} {:>9.2}",
            s.policy.name(),
            s.seed,
            s.final_eval_return,
            s.cumulative_regret.map(|r| format!("{r:.4}")).unwrap_or_else(|| "-".into()),
            s.steps_to_threshold.map(|t| t.to_string()).unwrap_or_else(|| "-".into()),
            s.wall_clock_secs
        );
    }
    println!("wrote {} run CSVs to {}", summaries.len(), out_dir.display());
    Ok(())
}

fn probe_cmd(
    config_path: PathBuf,
    samples: usize,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), HarnessError> {
    let config = ExperimentConfig::load(&config_path)?;
    let env = config
        .env
        .as_ref()
        .ok_or_else(|| HarnessError::Config("probe-td-noise needs an env in the config".into()))?
        .build()?;
    let spec = *env.spec();
    let gamma = spec.gamma;
    let q = true_q(&env, gamma)?;
    let policy = uniform_policy(spec.state_count, spec.action_count);
    let mut rng = StdRng::seed_from_u64(derive_seed(seed.unwrap_or(0), "td-noise-probe"));
    let probe = td_noise_probe(&env, &policy, &q, gamma, samples, &mut rng)?;

    let mut csv = String::from("#schema=td_noise_v1\nstate,action,td_target_variance,std_error\n");
    println!("{:>6} {:>7} {:>18} {:>12}", "state", "action", "td_target_var", "std_err");
    for s in 0..spec.state_count {
        for a in 0..spec.action_count {
            println!(
                "{s:>6} {a:>7} {:>18.6} {:>12.6}",
                probe.variance[s][a], probe.std_error[s][a]
            );
            csv.push_str(&format!(
                "{s},{a},{},{}\n",
                probe.variance[s][a], probe.std_error[s][a]
            ));
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir)?;
        let path = dir.join("td_noise.csv");
        std::fs::write(&path, csv)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn aggregate_cmd(runs: PathBuf, out: Option<PathBuf>) -> Result<(), HarnessError> {
    let curves = aggregate_dir(&runs)?;
    let out_dir = out.unwrap_or_else(|| runs.clone());
    std::fs::create_dir_all(&out_dir)?;
    let csv = render_aggregate_csv(&curves);
    std::fs::write(out_dir.join("aggregate.csv"), &csv)?;
    let svg = render_svg(&curves, "mean with min/max band over seeds", "value");
    std::fs::write(out_dir.join("curves.svg"), &svg)?;
    println!(
        "aggregated {} policies -> {}/aggregate.csv, curves.svg",
        curves.len(),
        out_dir.display()
    );
    Ok(())
}
