//! Training-loop wiring for the information-directed agent.
//!
//! Owns the replay buffer, the ensemble network with its target copy and the
//! optimizer. Per-head targets are double-DQN style: the online head picks
//! the next action, its own target head evaluates it. The distributional
//! head is trained on projected categorical targets (or shifted quantile
//! targets), computed under the target network without double-DQN, and its
//! gradients stay out of the trunk unless configured otherwise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributional::{
    categorical_kl_loss_grad, categorical_mean, categorical_variance, project_categorical,
    quantile_huber_loss_grad, quantile_variance, softmax, CategoricalSupport,
};
use crate::envs::{Environment, EnvSpec, State, Transition};
use crate::error::{CoreError, Result};
use crate::ids_policy::{decide, IdsConfig, IdsDecision};
use crate::nn::{AdamConfig, AdamState, BackwardFlags, DistKind, EnsembleNetwork, NetworkShape};

/// Uniform-replay ring buffer.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    storage: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self { capacity, storage: Vec::with_capacity(capacity.min(4096)), next: 0 }
    }

    pub fn push(&mut self, t: Transition) {
        if self.storage.len() < self.capacity {
            self.storage.push(t);
        } else {
            self.storage[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<Transition> {
        debug_assert!(!self.is_empty());
        (0..batch)
            .map(|_| self.storage[rng.gen_range(0..self.storage.len())])
            .collect()
    }
}

/// When the agent warms up, trains, syncs and evaluates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub total_steps: usize,
    pub learning_starts: usize,
    pub train_frequency: usize,
    pub target_sync_interval: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
}

impl TrainSchedule {
    pub fn validate(&self, batch_size: usize) -> Result<()> {
        let fields = [
            self.total_steps,
            self.learning_starts,
            self.train_frequency,
            self.target_sync_interval,
            self.eval_interval,
            self.eval_episodes,
        ];
        if fields.iter().any(|&f| f == 0) {
            return Err(CoreError::InvalidSpec("schedule fields must all be positive".into()));
        }
        if self.learning_starts < batch_size {
            return Err(CoreError::InvalidSpec(
                "learning_starts must be at least the batch size".into(),
            ));
        }
        Ok(())
    }
}

/// Network and optimization knobs of a single agent.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub trunk_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub num_heads: usize,
    pub init_scale: f64,
    pub dist: DistKind,
    pub adam: AdamConfig,
    /// Overrides the environment's return-range hint for the support.
    pub v_range: Option<(f64, f64)>,
    /// Huber width of the quantile loss.
    pub kappa: f64,
    pub stop_dist_into_trunk: bool,
    pub scale_heads_by_inv_k: bool,
    pub double_dqn: bool,
    /// Pick the distributional argmax under the target net (otherwise online).
    pub dist_argmax_target: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            buffer_capacity: 50_000,
            trunk_hidden: vec![64, 64],
            head_hidden: vec![32],
            num_heads: 10,
            init_scale: 1.0,
            dist: DistKind::Categorical { atoms: 51 },
            adam: AdamConfig::default(),
            v_range: None,
            kappa: 1.0,
            stop_dist_into_trunk: true,
            scale_heads_by_inv_k: true,
            double_dqn: true,
            dist_argmax_target: true,
        }
    }
}

/// Aggregates reported by one gradient step.
#[derive(Debug, Clone, Copy)]
pub struct TrainMetrics {
    /// Mean over heads of the per-head MSE loss.
    pub loss_q: f64,
    /// Distributional loss, when a distributional head exists.
    pub loss_dist: Option<f64>,
    /// Batch mean of the ensemble variance.
    pub mean_sigma2: f64,
    /// Batch mean of the normalized noise variance (None without a dist head).
    pub mean_rho2: Option<f64>,
}

/// Episode-return statistics from an evaluation window.
#[derive(Debug, Clone, Copy)]
pub struct EvalStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

pub struct Agent {
    net: EnsembleNetwork,
    adam: AdamState,
    buffer: ReplayBuffer,
    config: AgentConfig,
    support: Option<CategoricalSupport>,
    state_count: usize,
    action_count: usize,
    gamma: f64,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(
        env_spec: &EnvSpec,
        range_hint: (f64, f64),
        config: AgentConfig,
        rng: &mut R,
    ) -> Result<Self> {
        env_spec.validate()?;
        if config.batch_size == 0 || config.kappa <= 0.0 {
            return Err(CoreError::InvalidSpec("batch_size and kappa must be positive".into()));
        }
        let support = match config.dist {
            DistKind::Categorical { atoms } => {
                let (v_min, v_max) = config.v_range.unwrap_or(range_hint);
                Some(CategoricalSupport::new(v_min, v_max, atoms)?)
            }
            _ => None,
        };
        let shape = NetworkShape {
            input_dim: env_spec.state_count,
            trunk_hidden: config.trunk_hidden.clone(),
            head_hidden: config.head_hidden.clone(),
            num_heads: config.num_heads,
            num_actions: env_spec.action_count,
            dist: config.dist,
        };
        let net = EnsembleNetwork::init(shape, config.init_scale, rng)?;
        let adam = AdamState::new(config.adam, net.param_count());
        let buffer = ReplayBuffer::new(config.buffer_capacity);
        Ok(Self {
            net,
            adam,
            buffer,
            config,
            support,
            state_count: env_spec.state_count,
            action_count: env_spec.action_count,
            gamma: env_spec.gamma,
        })
    }

    pub fn net(&self) -> &EnsembleNetwork {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut EnsembleNetwork {
        &mut self.net
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn support(&self) -> Option<&CategoricalSupport> {
        self.support.as_ref()
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn observe(&mut self, t: Transition) {
        self.buffer.push(t);
    }

    fn encode(&self, state: State) -> Vec<f64> {
        let mut v = vec![0.0; self.state_count];
        v[state] = 1.0;
        v
    }

    fn encode_batch(&self, states: impl Iterator<Item = State>) -> Vec<Vec<f64>> {
        states.map(|s| self.encode(s)).collect()
    }

    /// Per-head Q-values at one state: `[k][a]`.
    pub fn q_values(&self, state: State) -> Vec<Vec<f64>> {
        let out = self.net.forward(&[self.encode(state)]);
        out.q_values.iter().map(|per_head| per_head[0].clone()).collect()
    }

    /// Return-distribution variance per action from the distributional head.
    pub fn var_z(&self, state: State) -> Option<Vec<f64>> {
        let out = self.net.forward(&[self.encode(state)]);
        let dist = out.dist?;
        Some(self.dist_variances(&dist[0]))
    }

    fn dist_variances(&self, per_action: &[Vec<f64>]) -> Vec<f64> {
        match self.config.dist {
            DistKind::Categorical { .. } => {
                let support = self.support.as_ref().unwrap();
                per_action
                    .iter()
                    .map(|logits| categorical_variance(support, &softmax(logits)))
                    .collect()
            }
            DistKind::Quantile { .. } => {
                per_action.iter().map(|theta| quantile_variance(theta)).collect()
            }
            DistKind::None => unreachable!(),
        }
    }

    /// Algorithm-1 action selection with the full audit trail.
    pub fn act_train<R: Rng + ?Sized>(
        &self,
        state: State,
        ids_config: &IdsConfig,
        rng: &mut R,
    ) -> Result<(usize, IdsDecision)> {
        let q = self.q_values(state);
        let var_z = if ids_config.homoscedastic_rho2.is_some() { None } else { self.var_z(state) };
        let decision = decide(&q, var_z.as_deref(), ids_config, rng)?;
        Ok((decision.chosen_action, decision))
    }

    /// Mean-greedy evaluation policy over the bootstrap heads; ties go to the
    /// lowest action index.
    pub fn act_eval(&self, state: State) -> usize {
        let q = self.q_values(state);
        let k = q.len() as f64;
        let mut mean = vec![0.0; self.action_count];
        for per_head in &q {
            for (m, &v) in mean.iter_mut().zip(per_head.iter()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= k;
        }
        let best = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        mean.iter().position(|&m| m == best).unwrap()
    }

    /// Per-head scalar targets `y[k][b]`.
    ///
    /// Double-DQN: head k's online copy selects argmax at s', head k's target
    /// copy evaluates it. Terminal transitions mask the bootstrap term.
    pub fn q_targets(&self, batch: &[Transition]) -> Vec<Vec<f64>> {
        let next_states = self.encode_batch(batch.iter().map(|t| t.next_state));
        let online = self.net.forward(&next_states);
        let target = self.net.forward_target(&next_states);
        let k_count = self.config.num_heads;
        let mut y = vec![vec![0.0; batch.len()]; k_count];
        for (b, t) in batch.iter().enumerate() {
            for k in 0..k_count {
                let continue_value = if t.terminal {
                    0.0
                } else {
                    let chooser = if self.config.double_dqn {
                        &online.q_values[k][b]
                    } else {
                        &target.q_values[k][b]
                    };
                    let best = chooser.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let a_star = chooser.iter().position(|&v| v == best).unwrap();
                    target.q_values[k][b][a_star]
                };
                y[k][b] = t.reward + self.gamma * continue_value;
            }
        }
        y
    }

    /// Projected categorical target rows `[b][atom]`.
    ///
    /// The next action is the argmax of the distribution mean (under the
    /// target network by default), then the target-net distribution at that
    /// action is shifted by (r, gamma) and projected back onto the support.
    pub fn dist_targets_categorical(&self, batch: &[Transition]) -> Result<Vec<Vec<f64>>> {
        let support = self.support.as_ref().ok_or_else(|| {
            CoreError::Contract("categorical targets need a categorical head".into())
        })?;
        let next_states = self.encode_batch(batch.iter().map(|t| t.next_state));
        let target = self.net.forward_target(&next_states);
        let target_dist = target.dist.as_ref().unwrap();
        let chooser_dist_owned;
        let chooser_dist = if self.config.dist_argmax_target {
            target_dist
        } else {
            chooser_dist_owned = self.net.forward(&next_states).dist.unwrap();
            &chooser_dist_owned
        };
        let mut rewards = Vec::with_capacity(batch.len());
        let mut gammas = Vec::with_capacity(batch.len());
        let mut rows = Vec::with_capacity(batch.len());
        for (b, t) in batch.iter().enumerate() {
            let means: Vec<f64> = chooser_dist[b]
                .iter()
                .map(|logits| categorical_mean(support, &softmax(logits)))
                .collect();
            let best = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let a_star = means.iter().position(|&m| m == best).unwrap();
            rewards.push(t.reward);
            gammas.push(if t.terminal { 0.0 } else { self.gamma });
            rows.push(softmax(&target_dist[b][a_star]));
        }
        Ok(project_categorical(&rewards, &gammas, &rows, support))
    }

    /// Shifted quantile target samples `[b][j]`: r + gamma * theta_target.
    pub fn dist_targets_quantile(&self, batch: &[Transition]) -> Result<Vec<Vec<f64>>> {
        if !matches!(self.config.dist, DistKind::Quantile { .. }) {
            return Err(CoreError::Contract("quantile targets need a quantile head".into()));
        }
        let next_states = self.encode_batch(batch.iter().map(|t| t.next_state));
        let target = self.net.forward_target(&next_states);
        let target_dist = target.dist.as_ref().unwrap();
        let mut rows = Vec::with_capacity(batch.len());
        for (b, t) in batch.iter().enumerate() {
            let means: Vec<f64> = target_dist[b]
                .iter()
                .map(|theta| theta.iter().sum::<f64>() / theta.len() as f64)
                .collect();
            let best = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let a_star = means.iter().position(|&m| m == best).unwrap();
            let gamma = if t.terminal { 0.0 } else { self.gamma };
            rows.push(target_dist[b][a_star].iter().map(|&q| t.reward + gamma * q).collect());
        }
        Ok(rows)
    }

    /// One scheduled tick: syncs the target copy and takes a gradient step
    /// when due. Before `learning_starts` (and below one batch of data) no
    /// parameter changes.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        schedule: &TrainSchedule,
        agent_step: usize,
        rng: &mut R,
    ) -> Result<Option<TrainMetrics>> {
        if agent_step < schedule.learning_starts || self.buffer.len() < self.config.batch_size {
            return Ok(None);
        }
        if agent_step % schedule.target_sync_interval == 0 {
            self.net.sync_target();
        }
        if agent_step % schedule.train_frequency != 0 {
            return Ok(None);
        }
        let batch = self.buffer.sample(self.config.batch_size, rng);
        Ok(Some(self.gradient_step(&batch)?))
    }

    fn gradient_step(&mut self, batch: &[Transition]) -> Result<TrainMetrics> {
        let b_count = batch.len();
        let inv_b = 1.0 / b_count as f64;
        let y = self.q_targets(batch);
        let cat_targets = match self.config.dist {
            DistKind::Categorical { .. } => Some(self.dist_targets_categorical(batch)?),
            _ => None,
        };
        let quant_targets = match self.config.dist {
            DistKind::Quantile { .. } => Some(self.dist_targets_quantile(batch)?),
            _ => None,
        };

        let states = self.encode_batch(batch.iter().map(|t| t.state));
        let (out, cache) = self.net.forward_cached(&states);

        let k_count = self.config.num_heads;
        let a_count = self.action_count;
        let mut d_q = vec![vec![vec![0.0; a_count]; b_count]; k_count];
        let mut loss_q = 0.0;
        for k in 0..k_count {
            for (b, t) in batch.iter().enumerate() {
                let q = out.q_values[k][b][t.action];
                let diff = q - y[k][b];
                loss_q += inv_b * diff * diff / k_count as f64;
                d_q[k][b][t.action] = 2.0 * inv_b * diff;
            }
        }

        let per_action = self.config.dist.outputs_per_action();
        let mut d_dist = vec![vec![0.0; a_count * per_action]; b_count];
        let mut loss_dist = None;
        if let Some(rows) = &cat_targets {
            let mut total = 0.0;
            for (b, t) in batch.iter().enumerate() {
                let logits = &out.dist.as_ref().unwrap()[b][t.action];
                let (loss, grad) = categorical_kl_loss_grad(logits, &rows[b]);
                total += inv_b * loss;
                for (slot, g) in d_dist[b][t.action * per_action..(t.action + 1) * per_action]
                    .iter_mut()
                    .zip(grad.iter())
                {
                    *slot = inv_b * g;
                }
            }
            loss_dist = Some(total);
        }
        if let Some(rows) = &quant_targets {
            let mut total = 0.0;
            for (b, t) in batch.iter().enumerate() {
                let theta = &out.dist.as_ref().unwrap()[b][t.action];
                let (loss, grad) = quantile_huber_loss_grad(theta, &rows[b], self.config.kappa);
                total += inv_b * loss;
                for (slot, g) in d_dist[b][t.action * per_action..(t.action + 1) * per_action]
                    .iter_mut()
                    .zip(grad.iter())
                {
                    *slot = inv_b * g;
                }
            }
            loss_dist = Some(total);
        }

        // Batch summaries for the metrics stream. A single head has no
        // ensemble spread.
        let mut mean_sigma2 = 0.0;
        if k_count >= 2 {
            for b in 0..b_count {
                let per_state: Vec<Vec<f64>> =
                    (0..k_count).map(|k| out.q_values[k][b].clone()).collect();
                let (_, sigma2) = crate::ids_policy::ensemble_stats(&per_state)?;
                mean_sigma2 += sigma2.iter().sum::<f64>() / a_count as f64 * inv_b;
            }
        }
        let mean_rho2 = out.dist.as_ref().map(|dist| {
            let mut acc = 0.0;
            for row in dist {
                let var = self.dist_variances(row);
                let rho2 = crate::ids_policy::normalized_noise_variance(&var, 1e-5, 0.0);
                acc += rho2.iter().sum::<f64>() / a_count as f64 * inv_b;
            }
            acc
        });

        let flags = BackwardFlags {
            stop_dist_into_trunk: self.config.stop_dist_into_trunk,
            scale_heads_by_inv_k: self.config.scale_heads_by_inv_k,
        };
        let d_dist_ref = (per_action > 0).then_some(&d_dist[..]);
        let grad = self.net.backward(&cache, &d_q, d_dist_ref, flags)?;
        self.net.apply_gradients(&mut self.adam, &grad);
        Ok(TrainMetrics { loss_q, loss_dist, mean_sigma2, mean_rho2 })
    }

    /// Frozen-policy evaluation: `episodes` rollouts under the mean-greedy
    /// policy, no learning, returns undiscounted episode-return stats.
    pub fn evaluate<E: Environment, R: Rng + ?Sized>(
        &self,
        env: &E,
        episodes: usize,
        rng: &mut R,
    ) -> Result<EvalStats> {
        assert!(episodes > 0);
        let mut returns = Vec::with_capacity(episodes);
        for _ in 0..episodes {
            let mut state = env.reset();
            let mut total = 0.0;
            for _ in 0..env.spec().horizon_cap {
                let action = self.act_eval(state);
                let t = env.step(state, action, rng)?;
                total += t.reward;
                if t.terminal {
                    break;
                }
                state = t.next_state;
            }
            returns.push(total);
        }
        let mean = returns.iter().sum::<f64>() / episodes as f64;
        let min = returns.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(EvalStats { mean, min, max })
    }
}
