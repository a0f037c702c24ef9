//! Per-policy wiring: which network architecture, noise model and action
//! rule each selectable policy uses, plus the exploration baselines
//! (eps-greedy, per-episode head sampling, ensemble UCB).

use rand::rngs::StdRng;
use rand::Rng;

use ids_core::agent::Agent;
use ids_core::envs::State;
use ids_core::ids_policy::{ensemble_stats, IdsConfig, IdsDecision, IdsMode};
use ids_core::nn::DistKind;
use ids_core::Result;

use crate::config::{ExplorationConfig, PolicyKind};

use ids_core::agent::AgentConfig;

/// Architecture for a policy: the IDS variants differ in whether they carry
/// a distributional head; the baselines never do, and eps-greedy can drop to
/// a single head.
pub fn agent_config_for(
    policy: PolicyKind,
    base: &AgentConfig,
    exploration: &ExplorationConfig,
) -> AgentConfig {
    let mut cfg = base.clone();
    match policy {
        PolicyKind::DqnIds
        | PolicyKind::BootstrappedTs
        | PolicyKind::UcbEnsemble => {
            cfg.dist = DistKind::None;
        }
        PolicyKind::EpsGreedy => {
            cfg.dist = DistKind::None;
            if exploration.eps_greedy_single_head {
                cfg.num_heads = 1;
            }
        }
        PolicyKind::C51Ids | PolicyKind::IdsRatio | PolicyKind::IdsAdditive => {
            if matches!(cfg.dist, DistKind::None) {
                cfg.dist = DistKind::Categorical { atoms: 51 };
            }
        }
        _ => {}
    }
    cfg
}

/// Noise model and objective of the IDS variants; None for the baselines.
pub fn ids_config_for(policy: PolicyKind, base: &IdsConfig) -> Option<IdsConfig> {
    let mut cfg = base.clone();
    match policy {
        PolicyKind::DqnIds => {
            cfg.homoscedastic_rho2 = Some(base.homoscedastic_rho2.unwrap_or(1.0));
            cfg.mode = IdsMode::Ratio;
        }
        PolicyKind::C51Ids | PolicyKind::IdsRatio => {
            cfg.homoscedastic_rho2 = None;
            cfg.mode = IdsMode::Ratio;
        }
        PolicyKind::IdsAdditive => {
            cfg.homoscedastic_rho2 = None;
            cfg.mode = IdsMode::Additive;
        }
        _ => return None,
    }
    Some(cfg)
}

/// Action selection during training for the RL policies. The IDS variants
/// return their audit trail for the trace stream.
pub struct TrainAction {
    pub action: usize,
    pub decision: Option<IdsDecision>,
}

#[allow(clippy::too_many_arguments)]
pub fn act(
    policy: PolicyKind,
    agent: &Agent,
    state: State,
    ids: Option<&IdsConfig>,
    exploration: &ExplorationConfig,
    episode_head: usize,
    action_count: usize,
    rng: &mut StdRng,
) -> Result<TrainAction> {
    let pick = match policy {
        PolicyKind::DqnIds
        | PolicyKind::C51Ids
        | PolicyKind::IdsRatio
        | PolicyKind::IdsAdditive => {
            let (action, decision) = agent.act_train(state, ids.unwrap(), rng)?;
            return Ok(TrainAction { action, decision: Some(decision) });
        }
        PolicyKind::EpsGreedy => {
            if rng.gen_range(0.0..1.0) < exploration.epsilon {
                rng.gen_range(0..action_count)
            } else {
                agent.act_eval(state)
            }
        }
        PolicyKind::BootstrappedTs => {
            let q = agent.q_values(state);
            argmax_lowest(&q[episode_head])
        }
        PolicyKind::UcbEnsemble => {
            let q = agent.q_values(state);
            let (mu, sigma2) = ensemble_stats(&q)?;
            let scores: Vec<f64> = mu
                .iter()
                .zip(sigma2.iter())
                .map(|(&m, &s2)| m + exploration.ucb_lambda * s2.sqrt())
                .collect();
            argmax_lowest(&scores)
        }
        _ => unreachable!("gp policies never reach the rl action path"),
    };
    Ok(TrainAction { action: pick, decision: None })
}

pub fn argmax_lowest(values: &[f64]) -> usize {
    let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    values.iter().position(|&v| v == best).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ids_core::agent::AgentConfig;
    use ids_core::envs::EnvSpec;
    use rand::SeedableRng;

    fn test_agent(num_heads: usize, biases: &[&[f64]]) -> Agent {
        let spec = EnvSpec { state_count: 1, action_count: 2, gamma: 0.9, horizon_cap: 1 };
        let config = AgentConfig {
            trunk_hidden: vec![4],
            head_hidden: vec![],
            num_heads,
            init_scale: 0.0,
            dist: DistKind::None,
            ..AgentConfig::default()
        };
        let mut agent =
            Agent::new(&spec, (-1.0, 1.0), config, &mut StdRng::seed_from_u64(0)).unwrap();
        for (k, b) in biases.iter().enumerate() {
            let span = agent.net().head_span(k);
            let start = span.end - b.len();
            agent.net_mut().params_mut()[start..span.end].copy_from_slice(b);
        }
        agent
    }

    #[test]
    fn policy_architectures() {
        let base = AgentConfig::default();
        let expl = ExplorationConfig::default();
        assert_eq!(agent_config_for(PolicyKind::DqnIds, &base, &expl).dist, DistKind::None);
        assert_eq!(
            agent_config_for(PolicyKind::C51Ids, &base, &expl).dist,
            DistKind::Categorical { atoms: 51 }
        );
        assert_eq!(agent_config_for(PolicyKind::EpsGreedy, &base, &expl).num_heads, 1);
        assert_eq!(agent_config_for(PolicyKind::BootstrappedTs, &base, &expl).num_heads, 10);
    }

    #[test]
    fn ids_noise_models() {
        let base = IdsConfig::default();
        let dqn = ids_config_for(PolicyKind::DqnIds, &base).unwrap();
        assert_eq!(dqn.homoscedastic_rho2, Some(1.0));
        let c51 = ids_config_for(PolicyKind::C51Ids, &base).unwrap();
        assert_eq!(c51.homoscedastic_rho2, None);
        assert!(ids_config_for(PolicyKind::EpsGreedy, &base).is_none());
        assert_eq!(ids_config_for(PolicyKind::IdsAdditive, &base).unwrap().mode, IdsMode::Additive);
    }

    #[test]
    fn eps_zero_is_the_eval_policy() {
        let agent = test_agent(2, &[&[1.0, 0.0], &[1.0, 0.0]]);
        let expl = ExplorationConfig { epsilon: 0.0, ..ExplorationConfig::default() };
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..50 {
            let a = act(PolicyKind::EpsGreedy, &agent, 0, None, &expl, 0, 2, &mut rng)
                .unwrap()
                .action;
            assert_eq!(a, agent.act_eval(0));
        }
    }

    #[test]
    fn eps_one_is_uniform() {
        let agent = test_agent(2, &[&[1.0, 0.0], &[1.0, 0.0]]);
        let expl = ExplorationConfig { epsilon: 1.0, ..ExplorationConfig::default() };
        let mut rng = StdRng::seed_from_u64(2);
        let n = 10_000;
        let mut zeros = 0;
        for _ in 0..n {
            if act(PolicyKind::EpsGreedy, &agent, 0, None, &expl, 0, 2, &mut rng)
                .unwrap()
                .action
                == 0
            {
                zeros += 1;
            }
        }
        let se = (n as f64 * 0.25).sqrt();
        assert!((zeros as f64 - n as f64 / 2.0).abs() < 3.0 * se, "{zeros}");
    }

    #[test]
    fn ucb_with_zero_spread_is_greedy() {
        // Identical heads: sigma = 0, so UCB is pure argmax of the mean.
        let agent = test_agent(2, &[&[0.2, 0.9], &[0.2, 0.9]]);
        let expl = ExplorationConfig::default();
        let mut rng = StdRng::seed_from_u64(3);
        let a = act(PolicyKind::UcbEnsemble, &agent, 0, None, &expl, 0, 2, &mut rng)
            .unwrap()
            .action;
        assert_eq!(a, 1);
    }

    #[test]
    fn ts_head_sampling_follows_the_selected_head() {
        let agent = test_agent(2, &[&[1.0, 0.0], &[0.0, 1.0]]);
        let expl = ExplorationConfig::default();
        let mut rng = StdRng::seed_from_u64(4);
        let a0 = act(PolicyKind::BootstrappedTs, &agent, 0, None, &expl, 0, 2, &mut rng)
            .unwrap()
            .action;
        let a1 = act(PolicyKind::BootstrappedTs, &agent, 0, None, &expl, 1, 2, &mut rng)
            .unwrap()
            .action;
        assert_eq!(a0, 0);
        assert_eq!(a1, 1);
    }
}
