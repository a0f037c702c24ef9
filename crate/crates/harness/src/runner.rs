//! Seeded multi-run execution.
//!
//! Each (policy, seed) pair is an isolated run with its own environment,
//! network and RNG streams, executed in a rayon worker pool. Results land as
//! one metrics CSV per run plus an in-memory summary list; everything the
//! CSVs contain is a pure function of (config, seed).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

use ids_core::agent::{Agent, TrainSchedule};
use ids_core::envs::Environment;
use ids_core::gp_bandit::{ids_select, posterior_fit, ts_select, ucb_select};
use ids_core::ids_policy::IdsDecision;

use crate::config::{BanditConfig, ExperimentConfig, ExperimentKind, PolicyKind};
use crate::error::HarnessError;
use crate::policies;

pub const RL_SCHEMA: &str = "#schema=rl_metrics_v1";
pub const RL_HEADER: &str = "step,episode,train_loss_q,train_loss_dist,mean_sigma2,mean_rho2,eval_return_mean,eval_return_min,eval_return_max";
pub const BANDIT_SCHEMA: &str = "#schema=gp_bandit_v1";
pub const BANDIT_HEADER: &str = "step,policy,chosen_x,reward,instantaneous_regret,cumulative_regret";
pub const TRACE_SCHEMA: &str = "#schema=ids_trace_v1";

/// Stable 64-bit label hash, mixed with the user seed so each (policy, seed)
/// run gets its own stream family.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Outcome of one run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub policy: PolicyKind,
    pub seed: u64,
    pub final_eval_return: f64,
    pub cumulative_regret: Option<f64>,
    pub steps_to_threshold: Option<usize>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
struct RlMetricsRow {
    step: usize,
    episode: usize,
    train_loss_q: f64,
    train_loss_dist: Option<f64>,
    mean_sigma2: f64,
    mean_rho2: Option<f64>,
    eval_mean: f64,
    eval_min: f64,
    eval_max: f64,
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

struct RlRunOutput {
    summary: RunSummary,
    csv: String,
    trace_csv: Option<String>,
}

fn render_rl_csv(rows: &[RlMetricsRow]) -> String {
    let mut out = String::new();
    out.push_str(RL_SCHEMA);
    out.push('\n');
    out.push_str(RL_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            r.episode,
            r.train_loss_q,
            opt_field(r.train_loss_dist),
            r.mean_sigma2,
            opt_field(r.mean_rho2),
            r.eval_mean,
            r.eval_min,
            r.eval_max
        );
    }
    out
}

fn render_trace_csv(rows: &[(usize, usize, IdsDecision)], action_count: usize) -> String {
    let mut out = String::new();
    out.push_str(TRACE_SCHEMA);
    out.push('\n');
    out.push_str("step,state,chosen_action");
    for field in ["mu", "sigma2", "delta", "rho2", "info", "psi"] {
        for a in 0..action_count {
            let _ = write!(out, ",{field}_{a}");
        }
    }
    out.push('\n');
    for (step, state, d) in rows {
        let _ = write!(out, "{step},{state},{}", d.chosen_action);
        for vec in [&d.mu, &d.sigma2, &d.delta_hat, &d.rho2, &d.info_gain, &d.psi] {
            for v in vec {
                let _ = write!(out, ",{v}");
            }
        }
        out.push('\n');
    }
    out
}

fn run_rl_single(
    config: &ExperimentConfig,
    policy: PolicyKind,
    seed: u64,
    trace: bool,
) -> Result<RlRunOutput, HarnessError> {
    let started = Instant::now();
    let env = config.env.as_ref().unwrap().build()?;
    let schedule: TrainSchedule = *config.schedule.as_ref().unwrap();
    let spec = *env.spec();

    let mut master = StdRng::seed_from_u64(derive_seed(seed, policy.name()));
    let mut init_rng = StdRng::seed_from_u64(master.gen());
    let mut action_rng = StdRng::seed_from_u64(master.gen());
    let mut env_rng = StdRng::seed_from_u64(master.gen());
    let mut train_rng = StdRng::seed_from_u64(master.gen());
    let mut eval_rng = StdRng::seed_from_u64(master.gen());

    let agent_cfg = policies::agent_config_for(policy, &config.agent, &config.exploration);
    let ids_cfg = policies::ids_config_for(policy, &config.ids);
    let mut agent = Agent::new(&spec, env.return_range_hint(), agent_cfg, &mut init_rng)?;

    let mut rows = Vec::new();
    let mut trace_rows = Vec::new();
    let mut state = env.reset();
    let mut episode = 0usize;
    let mut episode_steps = 0usize;
    let mut episode_head = 0usize;
    let mut loss_q_acc = (0.0, 0usize);
    let mut loss_dist_acc = (0.0, 0usize);
    let mut sigma2_acc = (0.0, 0usize);
    let mut rho2_acc = (0.0, 0usize);
    let mut steps_to_threshold = None;
    let mut final_eval = f64::NAN;

    for step in 0..schedule.total_steps {
        let action = if step < schedule.learning_starts {
            action_rng.gen_range(0..spec.action_count)
        } else {
            let picked = policies::act(
                policy,
                &agent,
                state,
                ids_cfg.as_ref(),
                &config.exploration,
                episode_head,
                spec.action_count,
                &mut action_rng,
            )?;
            if trace {
                if let Some(decision) = picked.decision {
                    trace_rows.push((step, state, decision));
                }
            }
            picked.action
        };
        let t = env.step(state, action, &mut env_rng)?;
        agent.observe(t);
        episode_steps += 1;
        if t.terminal || episode_steps >= spec.horizon_cap {
            episode += 1;
            episode_steps = 0;
            state = env.reset();
            if agent.config().num_heads > 1 {
                episode_head = action_rng.gen_range(0..agent.config().num_heads);
            }
        } else {
            state = t.next_state;
        }
        if let Some(m) = agent.train_step(&schedule, step, &mut train_rng)? {
            loss_q_acc = (loss_q_acc.0 + m.loss_q, loss_q_acc.1 + 1);
            if let Some(l) = m.loss_dist {
                loss_dist_acc = (loss_dist_acc.0 + l, loss_dist_acc.1 + 1);
            }
            sigma2_acc = (sigma2_acc.0 + m.mean_sigma2, sigma2_acc.1 + 1);
            if let Some(r2) = m.mean_rho2 {
                rho2_acc = (rho2_acc.0 + r2, rho2_acc.1 + 1);
            }
        }
        if (step + 1) % schedule.eval_interval == 0 {
            let stats = agent.evaluate(&env, schedule.eval_episodes, &mut eval_rng)?;
            final_eval = stats.mean;
            if steps_to_threshold.is_none() {
                if let Some(threshold) = config.success_return {
                    if stats.mean >= threshold {
                        steps_to_threshold = Some(step + 1);
                    }
                }
            }
            let avg = |acc: (f64, usize)| if acc.1 == 0 { 0.0 } else { acc.0 / acc.1 as f64 };
            rows.push(RlMetricsRow {
                step: step + 1,
                episode,
                train_loss_q: avg(loss_q_acc),
                train_loss_dist: (loss_dist_acc.1 > 0).then(|| avg(loss_dist_acc)),
                mean_sigma2: avg(sigma2_acc),
                mean_rho2: (rho2_acc.1 > 0).then(|| avg(rho2_acc)),
                eval_mean: stats.mean,
                eval_min: stats.min,
                eval_max: stats.max,
            });
            loss_q_acc = (0.0, 0);
            loss_dist_acc = (0.0, 0);
            sigma2_acc = (0.0, 0);
            rho2_acc = (0.0, 0);
        }
    }

    Ok(RlRunOutput {
        summary: RunSummary {
            policy,
            seed,
            final_eval_return: final_eval,
            cumulative_regret: None,
            steps_to_threshold,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
        csv: render_rl_csv(&rows),
        trace_csv: trace.then(|| render_trace_csv(&trace_rows, spec.action_count)),
    })
}

struct BanditRunOutput {
    summary: RunSummary,
    csv: String,
}

fn run_bandit_single(
    bandit: &BanditConfig,
    policy: PolicyKind,
    seed: u64,
) -> Result<BanditRunOutput, HarnessError> {
    let started = Instant::now();
    let grid = bandit.grid();
    let truth: Vec<f64> = grid.iter().map(|&x| bandit.objective.eval(x)).collect();
    let noise_var: Vec<f64> = grid.iter().map(|&x| bandit.noise_variance.eval(x)).collect();
    let best = truth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut rng = StdRng::seed_from_u64(derive_seed(seed, policy.name()));
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut obs_noise: Vec<f64> = Vec::new();
    let mut cumulative = 0.0;
    let mut out = String::new();
    out.push_str(BANDIT_SCHEMA);
    out.push('\n');
    out.push_str(BANDIT_HEADER);
    out.push('\n');

    for step in 0..bandit.steps {
        let posterior = posterior_fit(&xs, &ys, &obs_noise, bandit.kernel, bandit.jitter)?;
        let idx = match policy {
            PolicyKind::GpUcb => ucb_select(&posterior, &grid, bandit.beta)?,
            PolicyKind::GpTs => ts_select(&posterior, &grid, &mut rng)?,
            PolicyKind::GpIds => {
                ids_select(&posterior, &grid, &noise_var, bandit.lambda, bandit.eps2)?
                    .action_index
            }
            _ => unreachable!("rl policies never reach the bandit path"),
        };
        let x = grid[idx];
        let noise: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal);
        let reward = truth[idx] + noise_var[idx].sqrt() * noise;
        let instant = best - truth[idx];
        cumulative += instant;
        xs.push(x);
        ys.push(reward);
        obs_noise.push(noise_var[idx]);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            step,
            policy.name(),
            x,
            reward,
            instant,
            cumulative
        );
    }

    Ok(BanditRunOutput {
        summary: RunSummary {
            policy,
            seed,
            final_eval_return: *ys.last().unwrap_or(&0.0),
            cumulative_regret: Some(cumulative),
            steps_to_threshold: None,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
        csv: out,
    })
}

/// Executes every (policy, seed) pair of the config and writes one metrics
/// CSV per run into `out_dir`. Returns the summaries sorted by (policy,
/// seed) regardless of completion order.
pub fn run(
    config: &ExperimentConfig,
    out_dir: &Path,
    trace: bool,
) -> Result<Vec<RunSummary>, HarnessError> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let pairs: Vec<(PolicyKind, u64)> = config
        .policies
        .iter()
        .flat_map(|&p| config.seeds.iter().map(move |&s| (p, s)))
        .collect();

    let results: Vec<Result<(RunSummary, Vec<(String, String)>), HarnessError>> = pairs
        .par_iter()
        .map(|&(policy, seed)| {
            let base = format!("{}_seed{}", policy.name(), seed);
            match config.kind {
                ExperimentKind::Rl => {
                    let out = run_rl_single(config, policy, seed, trace)?;
                    let mut files = vec![(format!("{base}.csv"), out.csv)];
                    if let Some(t) = out.trace_csv {
                        files.push((format!("{base}_trace.csv"), t));
                    }
                    Ok((out.summary, files))
                }
                ExperimentKind::GpBandit => {
                    let out = run_bandit_single(config.bandit.as_ref().unwrap(), policy, seed)?;
                    Ok((out.summary, vec![(format!("{base}.csv"), out.csv)]))
                }
            }
        })
        .collect();

    let mut summaries = Vec::with_capacity(pairs.len());
    for result in results {
        let (summary, files) = result?;
        for (name, contents) in files {
            fs::write(out_dir.join(name), contents)?;
        }
        summaries.push(summary);
    }
    summaries.sort_by(|a, b| (a.policy.name(), a.seed).cmp(&(b.policy.name(), b.seed)));
    Ok(summaries)
}

/// Runs the config in memory and returns (policy, seed) -> per-step values of
/// the aggregation column, without touching the filesystem. Used by tests
/// and the acceptance suite.
pub fn run_collect(
    config: &ExperimentConfig,
) -> Result<Vec<(RunSummary, Vec<(usize, f64)>)>, HarnessError> {
    config.validate()?;
    let pairs: Vec<(PolicyKind, u64)> = config
        .policies
        .iter()
        .flat_map(|&p| config.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let results: Vec<Result<(RunSummary, Vec<(usize, f64)>), HarnessError>> = pairs
        .par_iter()
        .map(|&(policy, seed)| match config.kind {
            ExperimentKind::Rl => {
                let out = run_rl_single(config, policy, seed, false)?;
                let series = parse_series(&out.csv)?;
                Ok((out.summary, series))
            }
            ExperimentKind::GpBandit => {
                let out = run_bandit_single(config.bandit.as_ref().unwrap(), policy, seed)?;
                let series = parse_series(&out.csv)?;
                Ok((out.summary, series))
            }
        })
        .collect();
    let mut collected: Vec<(RunSummary, Vec<(usize, f64)>)> =
        results.into_iter().collect::<Result<_, _>>()?;
    collected.sort_by(|a, b| (a.0.policy.name(), a.0.seed).cmp(&(b.0.policy.name(), b.0.seed)));
    Ok(collected)
}

/// Extracts (step, value) pairs from a run CSV: eval_return_mean for RL runs,
/// cumulative_regret for bandit runs.
pub fn parse_series(csv: &str) -> Result<Vec<(usize, f64)>, HarnessError> {
    let mut lines = csv.lines();
    let schema = lines
        .next()
        .ok_or_else(|| HarnessError::Format("empty CSV".into()))?;
    let header = lines
        .next()
        .ok_or_else(|| HarnessError::Format("missing CSV header".into()))?;
    let columns: Vec<&str> = header.split(',').collect();
    let value_column = match schema {
        RL_SCHEMA => "eval_return_mean",
        BANDIT_SCHEMA => "cumulative_regret",
        other => {
            return Err(HarnessError::Format(format!("unknown schema line `{other}`")));
        }
    };
    let step_idx = columns
        .iter()
        .position(|&c| c == "step")
        .ok_or_else(|| HarnessError::Format("missing step column".into()))?;
    let value_idx = columns
        .iter()
        .position(|&c| c == value_column)
        .ok_or_else(|| HarnessError::Format(format!("missing {value_column} column")))?;
    let mut series = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(HarnessError::Format(format!(
                "row has {} fields, header has {}",
                fields.len(),
                columns.len()
            )));
        }
        let step = fields[step_idx]
            .parse::<usize>()
            .map_err(|e| HarnessError::Format(format!("bad step: {e}")))?;
        let value = fields[value_idx]
            .parse::<f64>()
            .map_err(|e| HarnessError::Format(format!("bad value: {e}")))?;
        series.push((step, value));
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn small_rl_config() -> ExperimentConfig {
        ExperimentConfig::parse(
            r#"{
            "kind": "rl",
            "policies": ["dqn-ids", "eps-greedy"],
            "seeds": [1, 2, 3],
            "env": {"type": "hetero-bandit", "means": [1.0, 0.0], "noise_stdevs": [0.0, 1.0], "gamma": 0.99},
            "agent": {"batch_size": 8, "buffer_capacity": 512, "trunk_hidden": [8], "head_hidden": [4],
                      "num_heads": 3, "adam": {"alpha": 0.001}},
            "schedule": {"total_steps": 120, "learning_starts": 16, "train_frequency": 2,
                         "target_sync_interval": 20, "eval_interval": 40, "eval_episodes": 4}
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn two_policies_three_seeds_give_six_summaries() {
        let dir = tempfile::tempdir().unwrap();
        let summaries = run(&small_rl_config(), dir.path(), false).unwrap();
        assert_eq!(summaries.len(), 6);
        assert!(summaries.iter().all(|s| s.final_eval_return.is_finite()));
        assert!(summaries.iter().all(|s| s.wall_clock_secs >= 0.0));
        // One CSV per run.
        let count = std::fs::read_dir(dir.path()).unwrap().count();
        assert_eq!(count, 6);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = small_rl_config();
        run(&config, dir_a.path(), true).unwrap();
        run(&config, dir_b.path(), true).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(dir_a.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert!(!names.is_empty());
        for name in names {
            let a = std::fs::read(dir_a.path().join(&name)).unwrap();
            let b = std::fs::read(dir_b.path().join(&name)).unwrap();
            assert_eq!(a, b, "{name} differs between reruns");
        }
    }

    #[test]
    fn rl_csv_parses_back() {
        let config = small_rl_config();
        let collected = run_collect(&config).unwrap();
        assert_eq!(collected.len(), 6);
        for (_, series) in &collected {
            assert_eq!(series.len(), 3); // 120 steps / eval every 40
            assert_eq!(series[0].0, 40);
        }
    }

    #[test]
    fn bandit_runs_emit_regret_rows() {
        let config = ExperimentConfig::parse(
            r#"{
            "kind": "gp-bandit",
            "policies": ["gp-ucb", "gp-ids"],
            "seeds": [7],
            "bandit": {
                "domain": [0.0, 1.0],
                "grid_size": 12,
                "steps": 8,
                "kernel": {"lengthscale": 0.2, "signal_variance": 1.0},
                "objective": {"bumps": [{"center": 0.6, "height": 1.0, "width": 0.15}]},
                "noise_variance": {"base": 0.05, "bumps": []}
            }
        }"#,
        )
        .unwrap();
        let collected = run_collect(&config).unwrap();
        assert_eq!(collected.len(), 2);
        for (summary, series) in &collected {
            assert_eq!(series.len(), 8);
            let last = series.last().unwrap().1;
            assert_eq!(summary.cumulative_regret, Some(last));
            // Cumulative regret never decreases.
            for w in series.windows(2) {
                assert!(w[1].1 >= w[0].1 - 1e-12);
            }
        }
    }

    #[test]
    fn trace_files_have_per_action_columns() {
        let mut config = small_rl_config();
        config.policies = vec![crate::config::PolicyKind::DqnIds];
        config.seeds = vec![5];
        let dir = tempfile::tempdir().unwrap();
        run(&config, dir.path(), true).unwrap();
        let trace =
            std::fs::read_to_string(dir.path().join("dqn-ids_seed5_trace.csv")).unwrap();
        let mut lines = trace.lines();
        assert_eq!(lines.next().unwrap(), TRACE_SCHEMA);
        let header = lines.next().unwrap();
        for col in ["mu_0", "mu_1", "sigma2_0", "delta_1", "rho2_0", "info_1", "psi_0"] {
            assert!(header.contains(col), "missing {col}");
        }
        assert!(lines.count() > 0);
    }

    #[test]
    fn derive_seed_separates_policies() {
        assert_ne!(derive_seed(1, "gp-ucb"), derive_seed(1, "gp-ts"));
        assert_ne!(derive_seed(1, "gp-ucb"), derive_seed(2, "gp-ucb"));
        assert_eq!(derive_seed(3, "gp-ids"), derive_seed(3, "gp-ids"));
    }
}
