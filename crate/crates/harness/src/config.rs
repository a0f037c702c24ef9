//! Experiment configuration: a strict JSON schema with unknown keys rejected
//! at every level, so a typo fails loudly instead of silently defaulting.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ids_core::agent::{AgentConfig, TrainSchedule};
use ids_core::envs::{ChainSpec, EnvSpec, Environment, HeteroBanditSpec, HeteroGridSpec, TabularMdp};
use ids_core::gp_bandit::Kernel;
use ids_core::ids_policy::IdsConfig;

use crate::error::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Rl,
    GpBandit,
}

/// Exploration and acquisition rules selectable per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// C51 return model, regret-information ratio objective.
    IdsRatio,
    /// C51 return model, additive objective delta^2 - beta I.
    IdsAdditive,
    /// Homoscedastic agent: constant rho^2, no distributional head.
    DqnIds,
    /// Heteroscedastic agent: C51 head feeds rho^2.
    C51Ids,
    /// One head sampled per episode, greedy on it.
    BootstrappedTs,
    /// argmax of mu + lambda sigma over the ensemble.
    UcbEnsemble,
    EpsGreedy,
    GpUcb,
    GpTs,
    GpIds,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::IdsRatio => "ids-ratio",
            PolicyKind::IdsAdditive => "ids-additive",
            PolicyKind::DqnIds => "dqn-ids",
            PolicyKind::C51Ids => "c51-ids",
            PolicyKind::BootstrappedTs => "bootstrapped-ts",
            PolicyKind::UcbEnsemble => "ucb-ensemble",
            PolicyKind::EpsGreedy => "eps-greedy",
            PolicyKind::GpUcb => "gp-ucb",
            PolicyKind::GpTs => "gp-ts",
            PolicyKind::GpIds => "gp-ids",
        }
    }

    pub fn is_gp(&self) -> bool {
        matches!(self, PolicyKind::GpUcb | PolicyKind::GpTs | PolicyKind::GpIds)
    }

    pub fn uses_ids(&self) -> bool {
        matches!(
            self,
            PolicyKind::IdsRatio | PolicyKind::IdsAdditive | PolicyKind::DqnIds | PolicyKind::C51Ids
        )
    }
}

/// Environment declarations; each carries its own discount and episode cap.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EnvConfig {
    HeteroBandit {
        means: Vec<f64>,
        noise_stdevs: Vec<f64>,
        gamma: f64,
    },
    Chain {
        length: usize,
        small_reward: f64,
        large_reward: f64,
        step_noise_std: Vec<f64>,
        gamma: f64,
        horizon_cap: usize,
    },
    HeteroGrid {
        width: usize,
        height: usize,
        start_x: usize,
        start_y: usize,
        goals: Vec<ids_core::envs::GridGoal>,
        #[serde(default)]
        slip_prob: f64,
        gamma: f64,
        horizon_cap: usize,
    },
}

impl EnvConfig {
    pub fn build(&self) -> Result<TabularMdp, HarnessError> {
        let mdp = match self {
            EnvConfig::HeteroBandit { means, noise_stdevs, gamma } => HeteroBanditSpec {
                means: means.clone(),
                noise_stdevs: noise_stdevs.clone(),
            }
            .build(*gamma)?,
            EnvConfig::Chain {
                length,
                small_reward,
                large_reward,
                step_noise_std,
                gamma,
                horizon_cap,
            } => ChainSpec {
                length: *length,
                small_reward: *small_reward,
                large_reward: *large_reward,
                step_noise_std: step_noise_std.clone(),
            }
            .build(*gamma, *horizon_cap)?,
            EnvConfig::HeteroGrid {
                width,
                height,
                start_x,
                start_y,
                goals,
                slip_prob,
                gamma,
                horizon_cap,
            } => HeteroGridSpec {
                width: *width,
                height: *height,
                start_x: *start_x,
                start_y: *start_y,
                goals: goals.clone(),
                slip_prob: *slip_prob,
            }
            .build(*gamma, *horizon_cap)?,
        };
        Ok(mdp)
    }
}

/// Knobs of the non-IDS exploration baselines.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplorationConfig {
    pub epsilon: f64,
    pub ucb_lambda: f64,
    /// Run the eps-greedy baseline with a single Q-head.
    pub eps_greedy_single_head: bool,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self { epsilon: 0.1, ucb_lambda: 1.0, eps_greedy_single_head: true }
    }
}

/// A Gaussian bump of a 1-D profile.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub center: f64,
    pub height: f64,
    pub width: f64,
}

/// base + sum of Gaussian bumps; used for both the bandit target function
/// and its observation-noise variance profile.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Profile {
    #[serde(default)]
    pub base: f64,
    #[serde(default)]
    pub bumps: Vec<Bump>,
}

impl Profile {
    pub fn eval(&self, x: f64) -> f64 {
        self.base
            + self
                .bumps
                .iter()
                .map(|b| {
                    let d = (x - b.center) / b.width;
                    b.height * (-0.5 * d * d).exp()
                })
                .sum::<f64>()
    }
}

fn default_grid_size() -> usize {
    256
}

fn default_jitter() -> f64 {
    1e-8
}

fn default_gp_lambda() -> f64 {
    1.0
}

fn default_gp_beta() -> f64 {
    4.0
}

fn default_eps2() -> f64 {
    1e-5
}

/// The GP bandit experiment: domain, candidate grid, kernel and the declared
/// target/noise profiles. The noise profile is treated as known by gp-ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditConfig {
    pub domain: (f64, f64),
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    pub steps: usize,
    pub kernel: Kernel,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default = "default_gp_lambda")]
    pub lambda: f64,
    /// UCB exploration weight: score = mu + sqrt(beta) sigma.
    #[serde(default = "default_gp_beta")]
    pub beta: f64,
    #[serde(default = "default_eps2")]
    pub eps2: f64,
    pub objective: Profile,
    pub noise_variance: Profile,
}

impl BanditConfig {
    pub fn grid(&self) -> Vec<f64> {
        let (lo, hi) = self.domain;
        let n = self.grid_size;
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.domain.0 >= self.domain.1 {
            return Err(HarnessError::Config("bandit domain must have lo < hi".into()));
        }
        if self.grid_size < 2 || self.steps == 0 {
            return Err(HarnessError::Config("bandit grid_size >= 2 and steps >= 1".into()));
        }
        self.kernel.validate()?;
        for &x in &self.grid() {
            if self.noise_variance.eval(x) <= 0.0 {
                return Err(HarnessError::Config(format!(
                    "noise variance profile is nonpositive at x = {x}"
                )));
            }
        }
        Ok(())
    }
}

/// Top-level experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub policies: Vec<PolicyKind>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub env: Option<EnvConfig>,
    #[serde(default)]
    pub schedule: Option<TrainSchedule>,
    #[serde(default)]
    pub agent: AgentConfig,
    #[serde(default)]
    pub ids: IdsConfig,
    #[serde(default)]
    pub exploration: ExplorationConfig,
    /// Evaluation-return threshold for the steps-to-threshold summary.
    #[serde(default)]
    pub success_return: Option<f64>,
    #[serde(default)]
    pub bandit: Option<BanditConfig>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses and validates a config file, reporting the offending key path
    /// on deserialization errors.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: ExperimentConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| HarnessError::Config(format!("at `{}`: {}", e.path(), e.inner())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.policies.is_empty() {
            return Err(HarnessError::Config("policy list is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("seed list is empty".into()));
        }
        self.ids.validate()?;
        match self.kind {
            ExperimentKind::Rl => {
                if let Some(p) = self.policies.iter().find(|p| p.is_gp()) {
                    return Err(HarnessError::Config(format!(
                        "policy {} belongs to the gp-bandit experiment",
                        p.name()
                    )));
                }
                let env = self
                    .env
                    .as_ref()
                    .ok_or_else(|| HarnessError::Config("rl experiment needs an env".into()))?;
                env.build()?;
                let schedule = self.schedule.as_ref().ok_or_else(|| {
                    HarnessError::Config("rl experiment needs a schedule".into())
                })?;
                schedule.validate(self.agent.batch_size)?;
            }
            ExperimentKind::GpBandit => {
                if let Some(p) = self.policies.iter().find(|p| !p.is_gp()) {
                    return Err(HarnessError::Config(format!(
                        "policy {} belongs to the rl experiment",
                        p.name()
                    )));
                }
                let bandit = self.bandit.as_ref().ok_or_else(|| {
                    HarnessError::Config("gp-bandit experiment needs a bandit block".into())
                })?;
                bandit.validate()?;
            }
        }
        Ok(())
    }

    pub fn env_spec(&self) -> Result<EnvSpec, HarnessError> {
        Ok(*self.env.as_ref().unwrap().build()?.spec())
    }
}
