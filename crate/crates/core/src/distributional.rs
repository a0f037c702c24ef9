//! Return-distribution representations and their losses.
//!
//! Two parameterizations of the random return Z(s,a) live here: a categorical
//! distribution over a fixed atom grid (with the Bellman projection that maps
//! shifted atoms back onto the grid, and the KL/cross-entropy loss on logits),
//! and a fixed-fraction quantile representation with the asymmetric Huber
//! quantile loss. Both expose first and second moments, which is what the
//! exploration policy consumes.

use crate::error::{CoreError, Result};

/// Equidistant atom grid on [v_min, v_max].
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalSupport {
    v_min: f64,
    v_max: f64,
    atoms: Vec<f64>,
    delta_z: f64,
}

impl CategoricalSupport {
    pub fn new(v_min: f64, v_max: f64, atom_count: usize) -> Result<Self> {
        if !(v_min < v_max) {
            return Err(CoreError::InvalidSpec(format!(
                "support requires v_min < v_max, got [{v_min}, {v_max}]"
            )));
        }
        if atom_count < 2 {
            return Err(CoreError::InvalidSpec(format!(
                "support requires at least 2 atoms, got {atom_count}"
            )));
        }
        let delta_z = (v_max - v_min) / (atom_count - 1) as f64;
        let mut atoms: Vec<f64> = (0..atom_count)
            .map(|i| v_min + i as f64 * delta_z)
            .collect();
        // Pin the endpoints so clamping is bit-exact.
        atoms[0] = v_min;
        atoms[atom_count - 1] = v_max;
        Ok(Self { v_min, v_max, atoms, delta_z })
    }

    pub fn v_min(&self) -> f64 {
        self.v_min
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn delta_z(&self) -> f64 {
        self.delta_z
    }
}

/// A categorical return distribution over a support's atoms.
#[derive(Debug, Clone)]
pub struct CategoricalReturn {
    probs: Vec<f64>,
}

impl CategoricalReturn {
    /// Validates the probability vector against the support.
    pub fn new(support: &CategoricalSupport, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != support.atom_count() {
            return Err(CoreError::Contract(format!(
                "probability vector length {} does not match {} atoms",
                probs.len(),
                support.atom_count()
            )));
        }
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(CoreError::Contract("probabilities must be finite and >= 0".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CoreError::Contract(format!(
                "probabilities sum to {total}, expected 1 within 1e-9"
            )));
        }
        Ok(Self { probs })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Bellman projection of shifted categorical distributions back onto `support`.
///
/// For every row, each atom z_j is shifted to r + gamma * z_j, clamped into
/// [v_min, v_max], and its mass is split linearly between the two neighboring
/// support atoms. A shifted atom landing exactly on a support atom assigns its
/// full mass there. Terminal transitions are expressed as gamma = 0, which
/// collapses the row to a (projected) point mass at r.
pub fn project_categorical(
    rewards: &[f64],
    gammas: &[f64],
    next_probs: &[Vec<f64>],
    support: &CategoricalSupport,
) -> Vec<Vec<f64>> {
    assert_eq!(rewards.len(), gammas.len());
    assert_eq!(rewards.len(), next_probs.len());
    let n = support.atom_count();
    let mut out = vec![vec![0.0; n]; rewards.len()];
    for (row, ((&r, &gamma), probs)) in out
        .iter_mut()
        .zip(rewards.iter().zip(gammas.iter()).zip(next_probs.iter()))
    {
        debug_assert_eq!(probs.len(), n);
        for (j, &p) in probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let tz = (r + gamma * support.atoms[j]).clamp(support.v_min, support.v_max);
            // Roundoff can push the grid coordinate an ulp past the last atom.
            let b = ((tz - support.v_min) / support.delta_z).clamp(0.0, (n - 1) as f64);
            let lo = b.floor();
            let hi = b.ceil();
            let li = lo as usize;
            if lo == hi {
                row[li] += p;
            } else {
                let hi_idx = hi as usize;
                row[li] += p * (hi - b);
                row[hi_idx] += p * (b - lo);
            }
        }
    }
    out
}

/// E[Z] = sum_i p_i z_i.
pub fn categorical_mean(support: &CategoricalSupport, probs: &[f64]) -> f64 {
    support
        .atoms
        .iter()
        .zip(probs.iter())
        .map(|(&z, &p)| p * z)
        .sum()
}

/// Var(Z) = sum_i p_i (z_i - E[Z])^2.
pub fn categorical_variance(support: &CategoricalSupport, probs: &[f64]) -> f64 {
    let mean = categorical_mean(support, probs);
    support
        .atoms
        .iter()
        .zip(probs.iter())
        .map(|(&z, &p)| p * (z - mean) * (z - mean))
        .sum()
}

/// Cross-entropy between `target_probs` and softmax(`logits`), with its
/// gradient w.r.t. the logits.
///
/// Equals the KL divergence up to the target's entropy, so the gradient
/// softmax(logits) - target is the same for both. Log-sum-exp stabilized.
pub fn categorical_kl_loss_grad(logits: &[f64], target_probs: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), target_probs.len());
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let lse = max + sum_exp.ln();
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for i in 0..logits.len() {
        let log_softmax = logits[i] - lse;
        loss -= target_probs[i] * log_softmax;
        grad[i] = log_softmax.exp() - target_probs[i];
    }
    (loss, grad)
}

/// Numerically stable softmax, shared by the agent's distribution readout.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Midpoint quantile fractions tau_j = (2j+1)/(2M).
pub fn quantile_fractions(quantile_count: usize) -> Vec<f64> {
    (0..quantile_count)
        .map(|j| (2 * j + 1) as f64 / (2 * quantile_count) as f64)
        .collect()
}

/// Fixed-fraction quantile representation of a return distribution.
#[derive(Debug, Clone)]
pub struct QuantileReturn {
    values: Vec<f64>,
}

impl QuantileReturn {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn fractions(&self) -> Vec<f64> {
        quantile_fractions(self.values.len())
    }
}

/// Asymmetric Huber quantile loss of predicted quantiles against a set of
/// target samples, averaged over the samples, with the gradient w.r.t. the
/// predictions.
///
/// loss = (1/S) sum_i sum_j |tau_j - 1[y_i < theta_j]| * huber_k(y_i - theta_j) / k
pub fn quantile_huber_loss_grad(
    pred_quantiles: &[f64],
    target_samples: &[f64],
    kappa: f64,
) -> (f64, Vec<f64>) {
    assert!(kappa > 0.0, "kappa must be positive");
    assert!(!target_samples.is_empty());
    let taus = quantile_fractions(pred_quantiles.len());
    let inv_s = 1.0 / target_samples.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred_quantiles.len()];
    for (j, (&theta, &tau)) in pred_quantiles.iter().zip(taus.iter()).enumerate() {
        for &y in target_samples {
            let u = y - theta;
            let weight = if u < 0.0 { 1.0 - tau } else { tau };
            let (huber, dhuber_du) = if u.abs() <= kappa {
                (0.5 * u * u, u)
            } else {
                (kappa * (u.abs() - 0.5 * kappa), kappa * u.signum())
            };
            loss += inv_s * weight * huber / kappa;
            grad[j] -= inv_s * weight * dhuber_du / kappa;
        }
    }
    (loss, grad)
}

/// Population variance of the quantile values, used as the Var(Z) estimate
/// for the quantile head.
pub fn quantile_variance(quantiles: &[f64]) -> f64 {
    let m = quantiles.len();
    if m < 2 {
        return 0.0;
    }
    let mean: f64 = quantiles.iter().sum::<f64>() / m as f64;
    quantiles.iter().map(|&q| (q - mean) * (q - mean)).sum::<f64>() / m as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Independent projection oracle: per-atom loop with explicit clamp and
    /// split, written without reference to the production code path.
    fn brute_force_project(
        r: f64,
        gamma: f64,
        probs: &[f64],
        atoms: &[f64],
        v_min: f64,
        v_max: f64,
    ) -> Vec<f64> {
        let n = atoms.len();
        let dz = (v_max - v_min) / (n - 1) as f64;
        let mut out = vec![0.0; n];
        for j in 0..n {
            let mut tz = r + gamma * atoms[j];
            if tz < v_min {
                tz = v_min;
            }
            if tz > v_max {
                tz = v_max;
            }
            let pos = (tz - v_min) / dz;
            let lower = pos.floor() as usize;
            let upper = if pos.ceil() as usize > n - 1 { n - 1 } else { pos.ceil() as usize };
            if lower == upper {
                out[lower] += probs[j];
            } else {
                out[lower] += probs[j] * (upper as f64 - pos);
                out[upper] += probs[j] * (pos - lower as f64);
            }
        }
        out
    }

    fn random_dist(rng: &mut StdRng, n: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|p| p / total).collect()
    }

    #[test]
    fn support_endpoints_are_exact() {
        let s = CategoricalSupport::new(-10.0, 10.0, 51).unwrap();
        assert_eq!(s.atoms()[0], -10.0);
        assert_eq!(s.atoms()[50], 10.0);
        assert_eq!(s.delta_z(), 0.4);
        assert!(s.atoms().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn support_rejects_bad_ranges() {
        assert!(CategoricalSupport::new(1.0, 1.0, 3).is_err());
        assert!(CategoricalSupport::new(0.0, 1.0, 1).is_err());
    }

    #[test]
    fn categorical_return_validates() {
        let s = CategoricalSupport::new(-1.0, 1.0, 3).unwrap();
        assert!(CategoricalReturn::new(&s, vec![0.2, 0.3, 0.5]).is_ok());
        assert!(CategoricalReturn::new(&s, vec![0.2, 0.3]).is_err());
        assert!(CategoricalReturn::new(&s, vec![0.5, 0.6, 0.5]).is_err());
        assert!(CategoricalReturn::new(&s, vec![-0.1, 0.6, 0.5]).is_err());
    }

    #[test]
    fn projection_identity_shift() {
        // r=0, gamma=1 keeps every atom in place.
        let s = CategoricalSupport::new(-1.0, 1.0, 3).unwrap();
        let p = vec![0.2, 0.5, 0.3];
        let out = project_categorical(&[0.0], &[1.0], &[p.clone()], &s);
        for (a, b) in out[0].iter().zip(p.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_terminal_half_split() {
        // gamma=0 collapses to a point at r=0.5, halfway between atoms 0 and 1.
        let s = CategoricalSupport::new(-1.0, 1.0, 3).unwrap();
        let p = vec![0.1, 0.6, 0.3];
        let out = project_categorical(&[0.5], &[0.0], &[p], &s);
        assert!((out[0][0] - 0.0).abs() < 1e-12);
        assert!((out[0][1] - 0.5).abs() < 1e-12);
        assert!((out[0][2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn projection_exact_hit_assigns_full_mass() {
        let s = CategoricalSupport::new(-1.0, 1.0, 5).unwrap();
        // Terminal with r equal to an atom exactly.
        let out = project_categorical(&[0.5], &[0.0], &[vec![0.2; 5]], &s);
        let idx = s.atoms().iter().position(|&z| z == 0.5).unwrap();
        assert_eq!(out[0][idx], 1.0);
    }

    #[test]
    fn projection_matches_brute_force_on_random_cases() {
        let mut rng = StdRng::seed_from_u64(0xC51);
        let mut max_err: f64 = 0.0;
        for _ in 0..1000 {
            let n = rng.gen_range(2..16);
            let v_min = rng.gen_range(-5.0..0.0);
            let v_max = v_min + rng.gen_range(0.5..10.0);
            let support = CategoricalSupport::new(v_min, v_max, n).unwrap();
            let r = rng.gen_range(-8.0..8.0);
            let gamma = if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..1.0) };
            let p = random_dist(&mut rng, n);
            let ours = project_categorical(&[r], &[gamma], &[p.clone()], &support);
            let oracle =
                brute_force_project(r, gamma, &p, support.atoms(), v_min, v_max);
            for (a, b) in ours[0].iter().zip(oracle.iter()) {
                max_err = max_err.max((a - b).abs());
            }
            let mass: f64 = ours[0].iter().sum();
            assert!((mass - 1.0).abs() < 1e-9, "mass {mass} not conserved");
        }
        assert!(max_err < 1e-9, "max abs error vs oracle: {max_err}");
    }

    #[test]
    fn projection_mean_matches_shifted_mean_when_inside_range() {
        let mut rng = StdRng::seed_from_u64(7);
        let support = CategoricalSupport::new(-10.0, 10.0, 51).unwrap();
        for _ in 0..200 {
            let r = rng.gen_range(-1.0..1.0);
            let gamma = rng.gen_range(0.0..0.9);
            let p = random_dist(&mut rng, 51);
            // All shifted atoms stay strictly inside [-10, 10] for these draws.
            let out = project_categorical(&[r], &[gamma], &[p.clone()], &support);
            let shifted = r + gamma * categorical_mean(&support, &p);
            let got = categorical_mean(&support, &out[0]);
            assert!((got - shifted).abs() < 1e-9, "{got} vs {shifted}");
        }
    }

    #[test]
    fn moments_on_small_cases() {
        let s = CategoricalSupport::new(-1.0, 1.0, 3).unwrap();
        // Point mass at an atom.
        assert_eq!(categorical_mean(&s, &[0.0, 1.0, 0.0]), 0.0);
        assert_eq!(categorical_variance(&s, &[0.0, 1.0, 0.0]), 0.0);
        // Uniform over {-1, 0, 1}.
        let u = vec![1.0 / 3.0; 3];
        assert!(categorical_mean(&s, &u).abs() < 1e-15);
        assert!((categorical_variance(&s, &u) - 2.0 / 3.0).abs() < 1e-12);
        // Symmetric distribution over symmetric support has mean 0.
        assert!(categorical_mean(&s, &[0.25, 0.5, 0.25]).abs() < 1e-15);
    }

    #[test]
    fn kl_loss_matched_uniform() {
        let n = 7;
        let logits = vec![0.0; n];
        let target = vec![1.0 / n as f64; n];
        let (loss, grad) = categorical_kl_loss_grad(&logits, &target);
        assert!((loss - (n as f64).ln()).abs() < 1e-12);
        for g in grad {
            assert!(g.abs() < 1e-12);
        }
    }

    #[test]
    fn kl_gradient_zero_at_stationary_point() {
        let logits = vec![0.3, -1.2, 2.0, 0.0];
        let target = softmax(&logits);
        let (_, grad) = categorical_kl_loss_grad(&logits, &target);
        for g in grad {
            assert!(g.abs() < 1e-12);
        }
    }

    /// Relative error between an analytic and a finite-difference gradient,
    /// measured on the whole vector.
    fn grad_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
        let diff: f64 = analytic
            .iter()
            .zip(fd.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale = fd.iter().map(|g| g * g).sum::<f64>().sqrt().max(1e-8);
        diff / scale
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        let h = 1e-5;
        for _ in 0..100 {
            let n = rng.gen_range(2..12);
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let target = random_dist(&mut rng, n);
            let (_, grad) = categorical_kl_loss_grad(&logits, &target);
            let mut fd = vec![0.0; n];
            for i in 0..n {
                let mut plus = logits.clone();
                plus[i] += h;
                let mut minus = logits.clone();
                minus[i] -= h;
                let (lp, _) = categorical_kl_loss_grad(&plus, &target);
                let (lm, _) = categorical_kl_loss_grad(&minus, &target);
                fd[i] = (lp - lm) / (2.0 * h);
            }
            assert!(grad_rel_err(&grad, &fd) < 1e-4);
        }
    }

    #[test]
    fn quantile_loss_zero_on_perfect_fit() {
        let (loss, _) = quantile_huber_loss_grad(&[2.5, 2.5, 2.5], &[2.5], 1.0);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn quantile_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(13);
        let h = 1e-5;
        for _ in 0..100 {
            let m = rng.gen_range(1..9);
            let s = rng.gen_range(1..6);
            let preds: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let targets: Vec<f64> = (0..s).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let kappa = rng.gen_range(0.3..2.0);
            let (_, grad) = quantile_huber_loss_grad(&preds, &targets, kappa);
            let mut fd = vec![0.0; m];
            for i in 0..m {
                let mut plus = preds.clone();
                plus[i] += h;
                let mut minus = preds.clone();
                minus[i] -= h;
                fd[i] = (quantile_huber_loss_grad(&plus, &targets, kappa).0
                    - quantile_huber_loss_grad(&minus, &targets, kappa).0)
                    / (2.0 * h);
            }
            assert!(grad_rel_err(&grad, &fd) < 1e-4);
        }
    }

    #[test]
    fn quantile_median_limit_has_sign_gradient() {
        // M=1 gives tau=0.5; as kappa -> 0 the gradient behaves like median
        // regression: sign(theta - y) up to a constant factor.
        for &(theta, y) in &[(1.0, 0.0), (-2.0, 3.0)] {
            let (_, grad) = quantile_huber_loss_grad(&[theta], &[y], 1e-6);
            assert_eq!(grad[0].signum(), (theta - y).signum());
        }
    }

    #[test]
    fn quantile_variance_cases() {
        assert_eq!(quantile_variance(&[2.0, 2.0, 2.0]), 0.0);
        assert_eq!(quantile_variance(&[-1.0, 1.0]), 1.0);
        let a = quantile_variance(&[0.5, -1.5, 3.0]);
        let b = quantile_variance(&[3.0, 0.5, -1.5]);
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn projection_conserves_mass(
            r in -20.0f64..20.0,
            gamma in 0.0f64..1.0,
            raw in proptest::collection::vec(0.01f64..1.0, 2..32),
        ) {
            let n = raw.len();
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let support = CategoricalSupport::new(-5.0, 5.0, n).unwrap();
            let out = project_categorical(&[r], &[gamma], &[p], &support);
            let mass: f64 = out[0].iter().sum();
            prop_assert!((mass - 1.0).abs() < 1e-9);
            prop_assert!(out[0].iter().all(|&q| q >= 0.0));
        }

        #[test]
        fn projection_is_linear_in_probabilities(
            r in -3.0f64..3.0,
            gamma in 0.0f64..1.0,
            raw_a in proptest::collection::vec(0.01f64..1.0, 8),
            raw_b in proptest::collection::vec(0.01f64..1.0, 8),
            w in 0.0f64..1.0,
        ) {
            let norm = |raw: &[f64]| {
                let t: f64 = raw.iter().sum();
                raw.iter().map(|x| x / t).collect::<Vec<_>>()
            };
            let pa = norm(&raw_a);
            let pb = norm(&raw_b);
            let mix: Vec<f64> = pa.iter().zip(pb.iter()).map(|(a, b)| w * a + (1.0 - w) * b).collect();
            let support = CategoricalSupport::new(-2.0, 2.0, 8).unwrap();
            let out_mix = project_categorical(&[r], &[gamma], &[mix], &support);
            let out_a = project_categorical(&[r], &[gamma], &[pa], &support);
            let out_b = project_categorical(&[r], &[gamma], &[pb], &support);
            for i in 0..8 {
                let lin = w * out_a[0][i] + (1.0 - w) * out_b[0][i];
                prop_assert!((out_mix[0][i] - lin).abs() < 1e-9);
            }
        }

        #[test]
        fn categorical_variance_is_bounded_by_range(
            raw in proptest::collection::vec(0.01f64..1.0, 2..40),
        ) {
            let n = raw.len();
            let total: f64 = raw.iter().sum();
            let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let support = CategoricalSupport::new(-7.0, 3.0, n).unwrap();
            let half_range = (support.v_max() - support.v_min()) / 2.0;
            prop_assert!(categorical_variance(&support, &p) <= half_range * half_range + 1e-12);
        }
    }
}
