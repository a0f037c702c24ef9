//! TD-target noise diagnostic.
//!
//! Bootstrapped targets y = r + gamma Q(s', a') are noisy through three
//! channels: reward noise, transition stochasticity, and the draw of a' from
//! the behavior policy. The probe measures the per-(state, action) target
//! variance empirically, which makes the state-action dependence of that
//! noise a number instead of an argument.

use rand::rngs::StdRng;
use rand::Rng;

use ids_core::envs::{Environment, TabularMdp};

use crate::error::HarnessError;

/// Empirical TD-target variance per (state, action), with the standard error
/// of each variance estimate.
#[derive(Debug, Clone)]
pub struct TdNoiseProbe {
    pub variance: Vec<Vec<f64>>,
    pub std_error: Vec<Vec<f64>>,
    pub samples_per_sa: usize,
}

/// Draws `samples_per_sa` one-step targets y = r + gamma * (1 - terminal) *
/// Q[s'][a'], a' ~ policy(s'), for every non-terminal (s, a).
pub fn td_noise_probe(
    env: &TabularMdp,
    policy: &[Vec<f64>],
    q_table: &[Vec<f64>],
    gamma: f64,
    samples_per_sa: usize,
    rng: &mut StdRng,
) -> Result<TdNoiseProbe, HarnessError> {
    let spec = *env.spec();
    if policy.len() != spec.state_count || q_table.len() != spec.state_count {
        return Err(HarnessError::Config(
            "policy and Q tables must cover every state".into(),
        ));
    }
    if samples_per_sa < 2 {
        return Err(HarnessError::Config("need at least 2 samples per (s,a)".into()));
    }
    let mut variance = vec![vec![0.0; spec.action_count]; spec.state_count];
    let mut std_error = vec![vec![0.0; spec.action_count]; spec.state_count];
    for s in 0..spec.state_count {
        if env.is_terminal(s) {
            continue;
        }
        for a in 0..spec.action_count {
            let mut ys = Vec::with_capacity(samples_per_sa);
            for _ in 0..samples_per_sa {
                let t = env.step(s, a, rng)?;
                let continuation = if t.terminal {
                    0.0
                } else {
                    let a_next = sample_action(&policy[t.next_state], rng);
                    q_table[t.next_state][a_next]
                };
                ys.push(t.reward + gamma * continuation);
            }
            let n = ys.len() as f64;
            let mean = ys.iter().sum::<f64>() / n;
            let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
            let m4 = ys.iter().map(|y| (y - mean).powi(4)).sum::<f64>() / n;
            variance[s][a] = var;
            std_error[s][a] = ((m4 - var * var).max(0.0) / n).sqrt();
        }
    }
    Ok(TdNoiseProbe { variance, std_error, samples_per_sa })
}

fn sample_action(probs: &[f64], rng: &mut StdRng) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (a, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    probs.len() - 1
}

/// Uniform behavior policy over the action set.
pub fn uniform_policy(state_count: usize, action_count: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0 / action_count as f64; action_count]; state_count]
}

/// Exact TD-target variance from the environment tables, used as the oracle
/// the empirical probe is checked against:
/// Var(y) = Var(r) + gamma^2 Var_{s',a'}((1-terminal) Q[s'][a']).
pub fn exact_td_target_variance(
    env: &TabularMdp,
    policy: &[Vec<f64>],
    q_table: &[Vec<f64>],
    gamma: f64,
) -> Vec<Vec<f64>> {
    let spec = *env.spec();
    let mut out = vec![vec![0.0; spec.action_count]; spec.state_count];
    for s in 0..spec.state_count {
        if env.is_terminal(s) {
            continue;
        }
        for a in 0..spec.action_count {
            let reward_var = env.reward_std(s, a) * env.reward_std(s, a);
            let mut mean = 0.0;
            let mut second = 0.0;
            for &(ns, p) in env.transition_probs(s, a) {
                if env.is_terminal(ns) {
                    // Continuation value is 0 with probability p.
                    continue;
                }
                for (a2, &pi) in policy[ns].iter().enumerate() {
                    let q = q_table[ns][a2];
                    mean += p * pi * q;
                    second += p * pi * q * q;
                }
            }
            out[s][a] = reward_var + gamma * gamma * (second - mean * mean);
        }
    }
    out
}
