//! Desk-scale tabular environments with heteroscedastic returns.
//!
//! Every environment is an explicit-table MDP: categorical transitions and
//! Gaussian per-(state, action) reward noise. That makes the ground truth
//! computable exactly — Q* by value iteration, return variances by a second
//! moment recursion — which the tests lean on heavily.
//!
//! Three concrete constructions are provided:
//! - a multi-armed bandit with per-arm noise levels,
//! - a left-to-right chain whose noisy low-reward end punishes
//!   noise-blind exploration,
//! - a small grid with a nearby noisy distractor goal and a farther
//!   deterministic one.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub type State = usize;
pub type Action = usize;

/// Shape of an environment: sizes, discount and the episode cap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub state_count: usize,
    pub action_count: usize,
    pub gamma: f64,
    pub horizon_cap: usize,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.state_count == 0 || self.action_count == 0 {
            return Err(CoreError::InvalidSpec("state and action counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(CoreError::InvalidSpec(format!(
                "gamma must lie in [0, 1), got {}",
                self.gamma
            )));
        }
        if self.horizon_cap == 0 {
            return Err(CoreError::InvalidSpec("horizon_cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// One environment step as stored in the replay buffer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: State,
    pub action: Action,
    pub reward: f64,
    pub next_state: State,
    pub terminal: bool,
}

/// The environment contract: a deterministic start state and a sampling step.
///
/// Instances hold no shared state; each run owns its instance and RNG.
pub trait Environment {
    fn spec(&self) -> &EnvSpec;

    /// Deterministic initial state.
    fn reset(&self) -> State;

    /// Samples one transition. Fails on an out-of-range action.
    fn step<R: Rng + ?Sized>(&self, state: State, action: Action, rng: &mut R)
        -> Result<Transition>;

    /// Suggested [v_min, v_max] for sizing a categorical return support.
    fn return_range_hint(&self) -> (f64, f64);

    /// Exposes the explicit tables when the environment has them.
    fn as_tabular(&self) -> Option<&TabularMdp> {
        None
    }
}

/// Explicit-table MDP: categorical transition rows and Gaussian reward noise.
#[derive(Debug, Clone)]
pub struct TabularMdp {
    spec: EnvSpec,
    start_state: State,
    /// transitions[s][a] = list of (next_state, probability).
    transitions: Vec<Vec<Vec<(State, f64)>>>,
    reward_mean: Vec<Vec<f64>>,
    reward_std: Vec<Vec<f64>>,
    terminal: Vec<bool>,
    return_range: (f64, f64),
}

impl TabularMdp {
    /// Builds an MDP from explicit tables, validating stochasticity of every
    /// transition row and table shapes.
    #[allow(clippy::too_many_arguments)]
    pub fn from_tables(
        spec: EnvSpec,
        start_state: State,
        transitions: Vec<Vec<Vec<(State, f64)>>>,
        reward_mean: Vec<Vec<f64>>,
        reward_std: Vec<Vec<f64>>,
        terminal: Vec<bool>,
        return_range: (f64, f64),
    ) -> Result<Self> {
        spec.validate()?;
        let (s, a) = (spec.state_count, spec.action_count);
        if transitions.len() != s || reward_mean.len() != s || reward_std.len() != s
            || terminal.len() != s
        {
            return Err(CoreError::InvalidSpec("table row count != state_count".into()));
        }
        if start_state >= s {
            return Err(CoreError::InvalidSpec("start state out of range".into()));
        }
        for state in 0..s {
            if transitions[state].len() != a || reward_mean[state].len() != a
                || reward_std[state].len() != a
            {
                return Err(CoreError::InvalidSpec("table column count != action_count".into()));
            }
            for action in 0..a {
                let row = &transitions[state][action];
                if row.is_empty() {
                    return Err(CoreError::InvalidSpec(format!(
                        "empty transition row at ({state}, {action})"
                    )));
                }
                let total: f64 = row.iter().map(|&(_, p)| p).sum();
                if (total - 1.0).abs() > 1e-12 || row.iter().any(|&(ns, p)| ns >= s || p < 0.0) {
                    return Err(CoreError::InvalidSpec(format!(
                        "transition row at ({state}, {action}) is not a distribution"
                    )));
                }
                if reward_std[state][action] < 0.0 {
                    return Err(CoreError::InvalidSpec("negative reward stdev".into()));
                }
            }
        }
        Ok(Self {
            spec,
            start_state,
            transitions,
            reward_mean,
            reward_std,
            terminal,
            return_range,
        })
    }

    pub fn transition_probs(&self, state: State, action: Action) -> &[(State, f64)] {
        &self.transitions[state][action]
    }

    pub fn reward_mean(&self, state: State, action: Action) -> f64 {
        self.reward_mean[state][action]
    }

    pub fn reward_std(&self, state: State, action: Action) -> f64 {
        self.reward_std[state][action]
    }

    pub fn is_terminal(&self, state: State) -> bool {
        self.terminal[state]
    }
}

impl Environment for TabularMdp {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self) -> State {
        self.start_state
    }

    fn step<R: Rng + ?Sized>(
        &self,
        state: State,
        action: Action,
        rng: &mut R,
    ) -> Result<Transition> {
        if state >= self.spec.state_count {
            return Err(CoreError::Contract(format!("state {state} out of range")));
        }
        if action >= self.spec.action_count {
            return Err(CoreError::Contract(format!(
                "action {action} out of range (A = {})",
                self.spec.action_count
            )));
        }
        // Next state and reward noise are drawn independently, and the noise
        // draw happens even for zero-noise cells so RNG streams stay aligned.
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let row = &self.transitions[state][action];
        let mut next_state = row[row.len() - 1].0;
        for &(ns, p) in row {
            acc += p;
            if u < acc {
                next_state = ns;
                break;
            }
        }
        let z: f64 = rng.sample(StandardNormal);
        let reward = self.reward_mean[state][action] + self.reward_std[state][action] * z;
        Ok(Transition {
            state,
            action,
            reward,
            next_state,
            terminal: self.terminal[next_state],
        })
    }

    fn return_range_hint(&self) -> (f64, f64) {
        self.return_range
    }

    fn as_tabular(&self) -> Option<&TabularMdp> {
        Some(self)
    }
}

/// Multi-armed bandit: one state, Gaussian arms with per-arm noise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeteroBanditSpec {
    pub means: Vec<f64>,
    pub noise_stdevs: Vec<f64>,
}

impl HeteroBanditSpec {
    /// Single-state MDP: every arm terminates the episode.
    pub fn build(&self, gamma: f64) -> Result<TabularMdp> {
        if self.means.len() != self.noise_stdevs.len() || self.means.is_empty() {
            return Err(CoreError::InvalidSpec(
                "bandit means and noise_stdevs must be equal-length and nonempty".into(),
            ));
        }
        if self.noise_stdevs.iter().any(|&s| s < 0.0) {
            return Err(CoreError::InvalidSpec("bandit noise stdevs must be >= 0".into()));
        }
        let a = self.means.len();
        let spec = EnvSpec { state_count: 2, action_count: a, gamma, horizon_cap: 1 };
        let transitions = vec![
            vec![vec![(1, 1.0)]; a], // every arm moves to the terminal sink
            vec![vec![(1, 1.0)]; a],
        ];
        let reward_mean = vec![self.means.clone(), vec![0.0; a]];
        let reward_std = vec![self.noise_stdevs.clone(), vec![0.0; a]];
        let lo = self
            .means
            .iter()
            .zip(&self.noise_stdevs)
            .map(|(m, s)| m - 3.0 * s)
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .means
            .iter()
            .zip(&self.noise_stdevs)
            .map(|(m, s)| m + 3.0 * s)
            .fold(f64::NEG_INFINITY, f64::max);
        TabularMdp::from_tables(
            spec,
            0,
            transitions,
            reward_mean,
            reward_std,
            vec![false, true],
            (lo, hi),
        )
    }
}

/// Left-to-right chain. The agent starts at the left end; stepping right from
/// the second-to-last state pays `large_reward` and terminates, while the
/// left action at state 0 pays `small_reward`. Per-state reward noise is
/// added to every step taken from that state.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSpec {
    pub length: usize,
    pub small_reward: f64,
    pub large_reward: f64,
    pub step_noise_std: Vec<f64>,
}

impl ChainSpec {
    pub const LEFT: Action = 0;
    pub const RIGHT: Action = 1;

    pub fn build(&self, gamma: f64, horizon_cap: usize) -> Result<TabularMdp> {
        let n = self.length;
        if n < 3 {
            return Err(CoreError::InvalidSpec("chain length must be >= 3".into()));
        }
        if self.step_noise_std.len() != n {
            return Err(CoreError::InvalidSpec("step_noise_std length must equal chain length".into()));
        }
        // The far reward must beat milking the left end forever.
        let milked = self.small_reward / (1.0 - gamma);
        let far = gamma.powi(n as i32 - 2) * self.large_reward;
        if far <= milked {
            return Err(CoreError::InvalidSpec(format!(
                "large_reward does not dominate: gamma^(N-2)*large = {far} <= small/(1-gamma) = {milked}"
            )));
        }
        let spec = EnvSpec { state_count: n, action_count: 2, gamma, horizon_cap };
        let mut transitions = vec![vec![Vec::new(); 2]; n];
        let mut reward_mean = vec![vec![0.0; 2]; n];
        let mut reward_std = vec![vec![0.0; 2]; n];
        for s in 0..n {
            let left_to = s.saturating_sub(1);
            transitions[s][Self::LEFT] = vec![(left_to, 1.0)];
            transitions[s][Self::RIGHT] = vec![((s + 1).min(n - 1), 1.0)];
            reward_std[s][Self::LEFT] = self.step_noise_std[s];
            reward_std[s][Self::RIGHT] = self.step_noise_std[s];
        }
        reward_mean[0][Self::LEFT] = self.small_reward;
        reward_mean[n - 2][Self::RIGHT] = self.large_reward;
        let mut terminal = vec![false; n];
        terminal[n - 1] = true;
        let max_noise = self
            .step_noise_std
            .iter()
            .cloned()
            .fold(0.0f64, f64::max);
        let spread = 3.0 * max_noise / (1.0 - gamma);
        let hi = self.large_reward.max(milked) + spread;
        let lo = 0.0f64.min(self.small_reward / (1.0 - gamma)) - spread;
        TabularMdp::from_tables(spec, 0, transitions, reward_mean, reward_std, terminal, (lo, hi))
    }
}

/// A goal cell of the grid environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridGoal {
    pub x: usize,
    pub y: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
}

/// Small gridworld with terminal goal cells; `slip_prob` replaces the chosen
/// move with a uniformly random direction, which makes transitions
/// stochastic. State id = y * width + x.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeteroGridSpec {
    pub width: usize,
    pub height: usize,
    pub start_x: usize,
    pub start_y: usize,
    pub goals: Vec<GridGoal>,
    #[serde(default)]
    pub slip_prob: f64,
}

impl HeteroGridSpec {
    pub fn build(&self, gamma: f64, horizon_cap: usize) -> Result<TabularMdp> {
        let (w, h) = (self.width, self.height);
        if w == 0 || h == 0 {
            return Err(CoreError::InvalidSpec("grid dimensions must be positive".into()));
        }
        if self.start_x >= w || self.start_y >= h {
            return Err(CoreError::InvalidSpec("grid start cell out of range".into()));
        }
        if !(0.0..=1.0).contains(&self.slip_prob) {
            return Err(CoreError::InvalidSpec("slip_prob must be in [0, 1]".into()));
        }
        if self.goals.is_empty() {
            return Err(CoreError::InvalidSpec("grid needs at least one goal".into()));
        }
        let n = w * h;
        let cell = |x: usize, y: usize| y * w + x;
        let mut terminal = vec![false; n];
        let mut goal_mean = vec![0.0; n];
        let mut goal_std = vec![0.0; n];
        for g in &self.goals {
            if g.x >= w || g.y >= h {
                return Err(CoreError::InvalidSpec("grid goal out of range".into()));
            }
            if g.reward_std < 0.0 {
                return Err(CoreError::InvalidSpec("goal reward stdev must be >= 0".into()));
            }
            terminal[cell(g.x, g.y)] = true;
            goal_mean[cell(g.x, g.y)] = g.reward_mean;
            goal_std[cell(g.x, g.y)] = g.reward_std;
        }
        if terminal[cell(self.start_x, self.start_y)] {
            return Err(CoreError::InvalidSpec("start cell cannot be a goal".into()));
        }
        // Actions: 0 up, 1 down, 2 left, 3 right; moves off the edge stay put.
        let deltas: [(isize, isize); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];
        let move_to = |x: usize, y: usize, a: usize| {
            let nx = (x as isize + deltas[a].0).clamp(0, w as isize - 1) as usize;
            let ny = (y as isize + deltas[a].1).clamp(0, h as isize - 1) as usize;
            cell(nx, ny)
        };
        let spec = EnvSpec { state_count: n, action_count: 4, gamma, horizon_cap };
        let mut transitions = vec![vec![Vec::new(); 4]; n];
        let mut reward_mean = vec![vec![0.0; 4]; n];
        let mut reward_std = vec![vec![0.0; 4]; n];
        for y in 0..h {
            for x in 0..w {
                let s = cell(x, y);
                for a in 0..4 {
                    let mut probs = vec![0.0; n];
                    probs[move_to(x, y, a)] += 1.0 - self.slip_prob;
                    for slip in 0..4 {
                        probs[move_to(x, y, slip)] += self.slip_prob / 4.0;
                    }
                    transitions[s][a] = probs
                        .iter()
                        .enumerate()
                        .filter(|(_, &p)| p > 0.0)
                        .map(|(ns, &p)| (ns, p))
                        .collect();
                    // Entering a goal pays that goal's (noisy) reward.
                    let (mut mean, mut var) = (0.0, 0.0);
                    for &(ns, p) in &transitions[s][a] {
                        mean += p * goal_mean[ns];
                        var += p * goal_std[ns] * goal_std[ns];
                    }
                    reward_mean[s][a] = mean;
                    reward_std[s][a] = var.sqrt();
                }
            }
        }
        let hi = self
            .goals
            .iter()
            .map(|g| g.reward_mean + 3.0 * g.reward_std)
            .fold(0.0f64, f64::max);
        let lo = self
            .goals
            .iter()
            .map(|g| g.reward_mean - 3.0 * g.reward_std)
            .fold(0.0f64, f64::min);
        TabularMdp::from_tables(
            spec,
            cell(self.start_x, self.start_y),
            transitions,
            reward_mean,
            reward_std,
            terminal,
            (lo, hi),
        )
    }
}

const FIXED_POINT_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 1_000_000;

/// Optimal action values by value iteration on the explicit tables, run to a
/// 1e-12 fixed point. Works on the infinite-horizon discounted problem; the
/// episode cap is an episode mechanic, not part of the Bellman operator.
///
/// Fails with [`CoreError::Unsupported`] when `env` exposes no tables.
pub fn true_q<E: Environment>(env: &E, gamma: f64) -> Result<Vec<Vec<f64>>> {
    let mdp = env
        .as_tabular()
        .ok_or_else(|| CoreError::Unsupported("true_q needs a tabular environment".into()))?;
    let (s_count, a_count) = (mdp.spec.state_count, mdp.spec.action_count);
    let mut q = vec![vec![0.0; a_count]; s_count];
    for _ in 0..MAX_SWEEPS {
        let mut delta: f64 = 0.0;
        for s in 0..s_count {
            if mdp.terminal[s] {
                continue;
            }
            for a in 0..a_count {
                let mut value = mdp.reward_mean[s][a];
                for &(ns, p) in &mdp.transitions[s][a] {
                    if !mdp.terminal[ns] {
                        let best = q[ns].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        value += gamma * p * best;
                    }
                }
                delta = delta.max((value - q[s][a]).abs());
                q[s][a] = value;
            }
        }
        if delta < FIXED_POINT_TOL {
            return Ok(q);
        }
    }
    Err(CoreError::Numerical("value iteration did not reach the 1e-12 fixed point".into()))
}

/// Largest |Q(s,a) - (r + gamma * E max Q)| over the tables; the fixed-point
/// residual the tests pin below 1e-10.
pub fn bellman_residual(mdp: &TabularMdp, q: &[Vec<f64>], gamma: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for s in 0..mdp.spec.state_count {
        if mdp.terminal[s] {
            continue;
        }
        for a in 0..mdp.spec.action_count {
            let mut value = mdp.reward_mean[s][a];
            for &(ns, p) in &mdp.transitions[s][a] {
                if !mdp.terminal[ns] {
                    let best = q[ns].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    value += gamma * p * best;
                }
            }
            worst = worst.max((value - q[s][a]).abs());
        }
    }
    worst
}

/// Per-(state, action) variance of the discounted return under a fixed
/// stochastic policy `policy[s][a]`, by exact recursion on the first and
/// second moments. Reward noise and the next-state draw are independent by
/// construction of [`TabularMdp`], which is what the recursion needs.
pub fn true_return_variance<E: Environment>(
    env: &E,
    policy: &[Vec<f64>],
    gamma: f64,
) -> Result<Vec<Vec<f64>>> {
    let mdp = env.as_tabular().ok_or_else(|| {
        CoreError::Unsupported("true_return_variance needs a tabular environment".into())
    })?;
    let (s_count, a_count) = (mdp.spec.state_count, mdp.spec.action_count);
    if policy.len() != s_count || policy.iter().any(|row| row.len() != a_count) {
        return Err(CoreError::Contract("policy table shape mismatch".into()));
    }
    // First moment: Q^pi by policy evaluation.
    let mut q = vec![vec![0.0; a_count]; s_count];
    for _ in 0..MAX_SWEEPS {
        let mut delta: f64 = 0.0;
        for s in 0..s_count {
            if mdp.terminal[s] {
                continue;
            }
            for a in 0..a_count {
                let mut value = mdp.reward_mean[s][a];
                for &(ns, p) in &mdp.transitions[s][a] {
                    if !mdp.terminal[ns] {
                        let cont: f64 =
                            policy[ns].iter().zip(&q[ns]).map(|(&pi, &qv)| pi * qv).sum();
                        value += gamma * p * cont;
                    }
                }
                delta = delta.max((value - q[s][a]).abs());
                q[s][a] = value;
            }
        }
        if delta < FIXED_POINT_TOL {
            break;
        }
    }
    // Second moment: M = E[R^2] + 2 gamma E[R] E[Z'] + gamma^2 E[M'].
    let mut m = vec![vec![0.0; a_count]; s_count];
    for s in 0..s_count {
        for a in 0..a_count {
            let mean = mdp.reward_mean[s][a];
            let std = mdp.reward_std[s][a];
            m[s][a] = mean * mean + std * std;
        }
    }
    for _ in 0..MAX_SWEEPS {
        let mut delta: f64 = 0.0;
        for s in 0..s_count {
            if mdp.terminal[s] {
                continue;
            }
            for a in 0..a_count {
                let mean = mdp.reward_mean[s][a];
                let std = mdp.reward_std[s][a];
                let mut cont_q = 0.0;
                let mut cont_m = 0.0;
                for &(ns, p) in &mdp.transitions[s][a] {
                    if !mdp.terminal[ns] {
                        for a2 in 0..a_count {
                            cont_q += p * policy[ns][a2] * q[ns][a2];
                            cont_m += p * policy[ns][a2] * m[ns][a2];
                        }
                    }
                }
                let value =
                    mean * mean + std * std + 2.0 * gamma * mean * cont_q + gamma * gamma * cont_m;
                delta = delta.max((value - m[s][a]).abs());
                m[s][a] = value;
            }
        }
        if delta < FIXED_POINT_TOL {
            break;
        }
    }
    let mut var = vec![vec![0.0; a_count]; s_count];
    for s in 0..s_count {
        for a in 0..a_count {
            var[s][a] = (m[s][a] - q[s][a] * q[s][a]).max(0.0);
        }
    }
    Ok(var)
}
