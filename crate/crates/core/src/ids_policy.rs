//! Information-directed action selection.
//!
//! The per-step pipeline: bootstrap-ensemble mean/variance of the Q-values,
//! a conservative regret surrogate from confidence bounds, return-variance
//! normalization into a noise estimate, the information gain
//! log(1 + sigma^2/rho^2) + eps2, and finally the minimization of either the
//! regret-information ratio or its additive variant. Every per-action
//! quantity is kept in the returned decision so a step can be audited.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Objective used when picking the action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdsMode {
    /// Minimize delta^2 / I.
    Ratio,
    /// Minimize delta^2 - beta * I.
    Additive,
}

/// How equal objective values are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    #[default]
    LowestIndex,
    UniformRandom,
}

/// Knobs of the selection rule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdsConfig {
    /// Confidence-bound scale in the regret surrogate.
    pub lambda: f64,
    /// Regularizer in the variance normalization denominator.
    pub eps1: f64,
    /// Offset added to the information gain.
    pub eps2: f64,
    /// Lower bound applied to the normalized noise variance; 0 disables.
    pub rho2_floor: f64,
    pub mode: IdsMode,
    /// Weight of the information gain in additive mode.
    pub beta: f64,
    /// When set, a constant observation-noise variance is used instead of a
    /// return-distribution estimate (the homoscedastic agent).
    pub homoscedastic_rho2: Option<f64>,
    pub tie_break: TieBreak,
}

impl Default for IdsConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            eps1: 1e-5,
            eps2: 1e-5,
            rho2_floor: 0.0,
            mode: IdsMode::Ratio,
            beta: 1.0,
            homoscedastic_rho2: None,
            tie_break: TieBreak::LowestIndex,
        }
    }
}

impl IdsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps1 <= 0.0 || self.eps2 <= 0.0 {
            return Err(CoreError::InvalidSpec("eps1 and eps2 must be positive".into()));
        }
        if self.lambda < 0.0 || self.beta < 0.0 || self.rho2_floor < 0.0 {
            return Err(CoreError::InvalidSpec(
                "lambda, beta and rho2_floor must be nonnegative".into(),
            ));
        }
        if let Some(r) = self.homoscedastic_rho2 {
            if r <= 0.0 {
                return Err(CoreError::InvalidSpec("homoscedastic rho^2 must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Full audit trail of one selection step.
#[derive(Debug, Clone)]
pub struct IdsDecision {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub delta_hat: Vec<f64>,
    pub rho2: Vec<f64>,
    pub info_gain: Vec<f64>,
    pub psi: Vec<f64>,
    pub chosen_action: usize,
    pub mode: IdsMode,
}

/// Empirical mean and population variance of the head estimates, per action.
///
/// `q_values[k][a]` is head k's estimate for action a. Requires K >= 2.
pub fn ensemble_stats(q_values: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = q_values.len();
    if k < 2 {
        return Err(CoreError::Contract(format!(
            "ensemble statistics need at least 2 heads, got {k}"
        )));
    }
    let actions = q_values[0].len();
    if q_values.iter().any(|row| row.len() != actions) {
        return Err(CoreError::Contract("heads disagree on action count".into()));
    }
    let inv_k = 1.0 / k as f64;
    let mut mu = vec![0.0; actions];
    for row in q_values {
        for (m, &q) in mu.iter_mut().zip(row.iter()) {
            *m += q;
        }
    }
    for m in mu.iter_mut() {
        *m *= inv_k;
    }
    let mut sigma2 = vec![0.0; actions];
    for row in q_values {
        for (a, (&q, s)) in row.iter().zip(sigma2.iter_mut()).enumerate() {
            let d = q - mu[a];
            *s += d * d;
        }
    }
    for s in sigma2.iter_mut() {
        *s *= inv_k;
    }
    Ok((mu, sigma2))
}

/// Conservative regret surrogate from confidence bounds:
/// delta(a) = max_a' (mu(a') + lambda * sigma(a')) - (mu(a) - lambda * sigma(a)).
///
/// Takes standard deviations, not variances.
pub fn regret_surrogate(mu: &[f64], sigma: &[f64], lambda: f64) -> Vec<f64> {
    debug_assert_eq!(mu.len(), sigma.len());
    let upper_max = mu
        .iter()
        .zip(sigma.iter())
        .map(|(&m, &s)| m + lambda * s)
        .fold(f64::NEG_INFINITY, f64::max);
    mu.iter()
        .zip(sigma.iter())
        .map(|(&m, &s)| upper_max - (m - lambda * s))
        .collect()
}

/// Return-variance normalization:
/// rho^2(a) = var_z(a) / (eps1 + mean_a' var_z(a')), then floored.
pub fn normalized_noise_variance(var_z: &[f64], eps1: f64, rho2_floor: f64) -> Vec<f64> {
    let mean = var_z.iter().sum::<f64>() / var_z.len() as f64;
    let denom = eps1 + mean;
    var_z
        .iter()
        .map(|&v| (v / denom).max(rho2_floor))
        .collect()
}

/// I(a) = log(1 + sigma^2(a) / rho^2(a)) + eps2. Requires rho^2 > 0.
pub fn information_gain(sigma2: &[f64], rho2: &[f64], eps2: f64) -> Result<Vec<f64>> {
    debug_assert_eq!(sigma2.len(), rho2.len());
    if let Some(&bad) = rho2.iter().find(|&&r| r <= 0.0) {
        return Err(CoreError::Contract(format!(
            "information gain needs positive noise variance, got {bad}"
        )));
    }
    Ok(sigma2
        .iter()
        .zip(rho2.iter())
        .map(|(&s2, &r2)| (1.0 + s2 / r2).ln() + eps2)
        .collect())
}

/// Information gain with a constant noise variance (the homoscedastic agent).
pub fn homoscedastic_gain(sigma2: &[f64], rho2_const: f64, eps2: f64) -> Result<Vec<f64>> {
    if rho2_const <= 0.0 {
        return Err(CoreError::Contract(format!(
            "homoscedastic rho^2 must be positive, got {rho2_const}"
        )));
    }
    Ok(sigma2
        .iter()
        .map(|&s2| (1.0 + s2 / rho2_const).ln() + eps2)
        .collect())
}

fn argmin_with_ties<R: Rng + ?Sized>(
    objective: &[f64],
    tie_break: TieBreak,
    rng: &mut R,
) -> usize {
    let best = objective.iter().cloned().fold(f64::INFINITY, f64::min);
    match tie_break {
        TieBreak::LowestIndex => objective.iter().position(|&v| v == best).unwrap(),
        TieBreak::UniformRandom => {
            let ties: Vec<usize> = objective
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == best)
                .map(|(i, _)| i)
                .collect();
            ties[rng.gen_range(0..ties.len())]
        }
    }
}

/// Picks the action minimizing the configured objective, given the already
/// computed per-action quantities. `rng` is only consulted for random
/// tie-breaking.
pub fn select<R: Rng + ?Sized>(
    mu: Vec<f64>,
    sigma2: Vec<f64>,
    delta_hat: Vec<f64>,
    rho2: Vec<f64>,
    info_gain: Vec<f64>,
    config: &IdsConfig,
    rng: &mut R,
) -> Result<IdsDecision> {
    let actions = mu.len();
    if [sigma2.len(), delta_hat.len(), rho2.len(), info_gain.len()]
        .iter()
        .any(|&l| l != actions)
    {
        return Err(CoreError::Contract("per-action inputs have mismatched lengths".into()));
    }
    let psi: Vec<f64> = match config.mode {
        IdsMode::Ratio => delta_hat
            .iter()
            .zip(info_gain.iter())
            .map(|(&d, &i)| d * d / i)
            .collect(),
        IdsMode::Additive => delta_hat
            .iter()
            .zip(info_gain.iter())
            .map(|(&d, &i)| d * d - config.beta * i)
            .collect(),
    };
    let chosen_action = argmin_with_ties(&psi, config.tie_break, rng);
    Ok(IdsDecision {
        mu,
        sigma2,
        delta_hat,
        rho2,
        info_gain,
        psi,
        chosen_action,
        mode: config.mode,
    })
}

/// The whole inner loop in one call: ensemble stats, regret surrogate, noise
/// variance (normalized return variance or the homoscedastic constant),
/// information gain and the final argmin.
///
/// `var_z` is the per-action return-distribution variance; it is required
/// exactly when `config.homoscedastic_rho2` is unset.
pub fn decide<R: Rng + ?Sized>(
    q_values: &[Vec<f64>],
    var_z: Option<&[f64]>,
    config: &IdsConfig,
    rng: &mut R,
) -> Result<IdsDecision> {
    let (mu, sigma2) = ensemble_stats(q_values)?;
    let sigma: Vec<f64> = sigma2.iter().map(|&s| s.sqrt()).collect();
    let delta_hat = regret_surrogate(&mu, &sigma, config.lambda);
    let (rho2, info_gain) = match (config.homoscedastic_rho2, var_z) {
        (Some(rho2_const), _) => {
            let rho2 = vec![rho2_const; mu.len()];
            let gain = homoscedastic_gain(&sigma2, rho2_const, config.eps2)?;
            (rho2, gain)
        }
        (None, Some(var_z)) => {
            if var_z.len() != mu.len() {
                return Err(CoreError::Contract(
                    "return-variance vector length does not match action count".into(),
                ));
            }
            let rho2 = normalized_noise_variance(var_z, config.eps1, config.rho2_floor);
            let gain = information_gain(&sigma2, &rho2, config.eps2)?;
            (rho2, gain)
        }
        (None, None) => {
            return Err(CoreError::Contract(
                "need either a return-variance estimate or a homoscedastic rho^2".into(),
            ));
        }
    };
    select(mu, sigma2, delta_hat, rho2, info_gain, config, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn rng() -> StdRng {
        StdRng::seed_from_u64(99)
    }

    #[test]
    fn ensemble_stats_worked_example() {
        let (mu, sigma2) = ensemble_stats(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(mu, vec![2.0, 3.0]);
        assert_eq!(sigma2, vec![1.0, 1.0]);
    }

    #[test]
    fn ensemble_stats_identical_heads_have_zero_spread() {
        let heads = vec![vec![0.5, -1.0, 2.0]; 10];
        let (_, sigma2) = ensemble_stats(&heads).unwrap();
        assert_eq!(sigma2, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn ensemble_stats_rejects_single_head() {
        assert!(matches!(
            ensemble_stats(&[vec![1.0, 2.0]]),
            Err(CoreError::Contract(_))
        ));
    }

    #[test]
    fn regret_surrogate_worked_example() {
        let delta = regret_surrogate(&[1.0, 0.0], &[0.5, 0.5], 0.1);
        assert!((delta[0] - 0.10).abs() < 1e-12);
        assert!((delta[1] - 1.10).abs() < 1e-12);
    }

    #[test]
    fn regret_surrogate_collapses_to_advantage_gap_at_lambda_zero() {
        let delta = regret_surrogate(&[0.25, 0.75, -0.5], &[1.0, 2.0, 3.0], 0.0);
        assert_eq!(delta, vec![0.5, 0.0, 1.25]);
        assert_eq!(delta.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
    }

    #[test]
    fn noise_normalization_worked_example() {
        let rho2 = normalized_noise_variance(&[1.0, 3.0], 0.0, 0.0);
        assert_eq!(rho2, vec![0.5, 1.5]);
    }

    #[test]
    fn noise_normalization_equal_variances_give_unit_rho() {
        let rho2 = normalized_noise_variance(&[2.5, 2.5, 2.5, 2.5], 0.0, 0.0);
        assert_eq!(rho2, vec![1.0; 4]);
    }

    #[test]
    fn noise_floor_clamps_small_entries() {
        let rho2 = normalized_noise_variance(&[0.0, 1.0, 3.0], 0.0, 0.25);
        assert_eq!(rho2[0], 0.25);
        assert!(rho2[1] > 0.25 && rho2[2] > 0.25);
    }

    #[test]
    fn information_gain_worked_example() {
        let gain = information_gain(&[1.0, 1.0], &[0.5, 1.5], 0.0).unwrap();
        assert!((gain[0] - 3.0f64.ln()).abs() < 1e-15);
        assert!((gain[1] - (5.0f64 / 3.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn information_gain_is_eps2_without_parametric_uncertainty() {
        let eps2 = 1e-5;
        let gain = information_gain(&[0.0, 0.0], &[0.7, 2.0], eps2).unwrap();
        assert_eq!(gain, vec![eps2, eps2]);
    }

    #[test]
    fn information_gain_monotone_in_sigma2() {
        let mut r = rng();
        use rand::Rng;
        for _ in 0..100 {
            let s2 = r.gen_range(0.0..5.0);
            let bump = r.gen_range(0.1..2.0);
            let rho2 = r.gen_range(0.05..3.0);
            let lo = information_gain(&[s2], &[rho2], 1e-5).unwrap()[0];
            let hi = information_gain(&[s2 + bump], &[rho2], 1e-5).unwrap()[0];
            assert!(hi > lo);
        }
    }

    #[test]
    fn information_gain_rejects_nonpositive_rho2() {
        assert!(information_gain(&[1.0], &[0.0], 1e-5).is_err());
        assert!(homoscedastic_gain(&[1.0], -1.0, 1e-5).is_err());
    }

    #[test]
    fn homoscedastic_gain_equals_constant_vector_gain() {
        let sigma2 = vec![0.3, 1.7, 0.0];
        let a = homoscedastic_gain(&sigma2, 1.0, 1e-5).unwrap();
        let b = information_gain(&sigma2, &[1.0, 1.0, 1.0], 1e-5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ratio_selection_continues_worked_pipeline() {
        let cfg = IdsConfig { eps2: 1e-12, ..IdsConfig::default() };
        let delta = vec![0.10, 1.10];
        let gain = vec![3.0f64.ln(), (5.0f64 / 3.0).ln()];
        let d = select(
            vec![1.0, 0.0],
            vec![0.25, 0.25],
            delta,
            vec![0.5, 1.5],
            gain,
            &cfg,
            &mut rng(),
        )
        .unwrap();
        assert!((d.psi[0] - 0.01 / 3.0f64.ln()).abs() < 1e-12);
        assert!((d.psi[1] - 1.21 / (5.0f64 / 3.0).ln()).abs() < 1e-12);
        assert_eq!(d.chosen_action, 0);
    }

    #[test]
    fn identical_stats_pick_lowest_index() {
        let cfg = IdsConfig::default();
        let d = select(
            vec![1.0; 4],
            vec![0.5; 4],
            vec![0.2; 4],
            vec![1.0; 4],
            vec![0.3; 4],
            &cfg,
            &mut rng(),
        )
        .unwrap();
        assert_eq!(d.chosen_action, 0);
    }

    #[test]
    fn additive_mode_with_beta_zero_is_greedy_on_regret() {
        let cfg = IdsConfig { mode: IdsMode::Additive, beta: 0.0, ..IdsConfig::default() };
        let d = select(
            vec![0.0, 1.0, 0.5],
            vec![0.0; 3],
            vec![1.0, 0.0, 0.5],
            vec![1.0; 3],
            vec![9.0, 0.1, 5.0],
            &cfg,
            &mut rng(),
        )
        .unwrap();
        assert_eq!(d.chosen_action, 1);
    }

    #[test]
    fn decide_requires_exactly_one_noise_source() {
        let heads = vec![vec![1.0, 0.0], vec![0.5, 0.5]];
        let cfg = IdsConfig::default();
        assert!(decide(&heads, None, &cfg, &mut rng()).is_err());
        let homo = IdsConfig { homoscedastic_rho2: Some(1.0), ..IdsConfig::default() };
        assert!(decide(&heads, None, &homo, &mut rng()).is_ok());
        assert!(decide(&heads, Some(&[0.5, 0.5]), &cfg, &mut rng()).is_ok());
    }

    #[test]
    fn decide_degenerate_ensemble_is_greedy() {
        // All heads equal and uniform return variances: I is flat eps2 and
        // the ratio reduces to the squared regret gap, i.e. greedy on mu.
        let heads = vec![vec![0.1, 0.9, 0.4]; 5];
        let cfg = IdsConfig { homoscedastic_rho2: Some(1.0), ..IdsConfig::default() };
        let d = decide(&heads, None, &cfg, &mut rng()).unwrap();
        assert_eq!(d.chosen_action, 1);
        assert!(d.info_gain.iter().all(|&g| g == cfg.eps2));
    }

    #[test]
    fn random_tie_break_is_seed_deterministic_and_uniformish() {
        let cfg = IdsConfig { tie_break: TieBreak::UniformRandom, ..IdsConfig::default() };
        let pick = |seed: u64| {
            let mut r = StdRng::seed_from_u64(seed);
            select(
                vec![0.0; 2],
                vec![0.0; 2],
                vec![0.0; 2],
                vec![1.0; 2],
                vec![1.0; 2],
                &cfg,
                &mut r,
            )
            .unwrap()
            .chosen_action
        };
        assert_eq!(pick(1), pick(1));
        let mut counts = [0usize; 2];
        for seed in 0..2000 {
            counts[pick(seed)] += 1;
        }
        // 3 standard errors around 1000 for a fair coin over 2000 draws.
        assert!((counts[0] as f64 - 1000.0).abs() < 3.0 * (2000.0f64 * 0.25).sqrt());
    }

    #[test]
    fn config_validation() {
        assert!(IdsConfig::default().validate().is_ok());
        assert!(IdsConfig { eps1: 0.0, ..IdsConfig::default() }.validate().is_err());
        assert!(IdsConfig { lambda: -0.1, ..IdsConfig::default() }.validate().is_err());
        assert!(
            IdsConfig { homoscedastic_rho2: Some(0.0), ..IdsConfig::default() }
                .validate()
                .is_err()
        );
    }
}
