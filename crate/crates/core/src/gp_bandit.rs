//! Heteroscedastic Gaussian-process bandit.
//!
//! Exact GP regression with a per-observation noise variance on the diagonal,
//! factored once per fit, plus three acquisition rules over a candidate set:
//! upper confidence bound, Thompson sampling from the joint posterior, and
//! information-directed sampling. IDS scores each candidate by the
//! regret-information ratio, where the information gain divides the
//! parametric variance by the known observation-noise variance at that
//! candidate — the quantity UCB and TS ignore.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::ids_policy::{information_gain, regret_surrogate};

/// Stationary kernel; only the squared-exponential form is provided.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Kernel {
    pub lengthscale: f64,
    pub signal_variance: f64,
}

impl Kernel {
    pub fn validate(&self) -> Result<()> {
        if self.lengthscale <= 0.0 || self.signal_variance <= 0.0 {
            return Err(CoreError::InvalidSpec(
                "kernel lengthscale and signal variance must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn eval(&self, a: f64, b: f64) -> f64 {
        let d = (a - b) / self.lengthscale;
        self.signal_variance * (-0.5 * d * d).exp()
    }
}

/// Jitter values tried, in order, after the caller-provided one.
const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Cholesky with progressively larger diagonal jitter. Returns the lower
/// factor and the jitter that made the matrix factor.
fn cholesky_with_jitter(base: &DMatrix<f64>, initial_jitter: f64) -> Result<(DMatrix<f64>, f64)> {
    let n = base.nrows();
    let mut tried = Vec::new();
    let candidates = std::iter::once(initial_jitter)
        .chain(JITTER_LADDER.iter().copied().filter(move |&j| j > initial_jitter));
    for jitter in candidates {
        let mut m = base.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = m.cholesky() {
            return Ok((chol.unpack(), jitter));
        }
        tried.push(jitter);
    }
    let diag_min = (0..n).map(|i| base[(i, i)]).fold(f64::INFINITY, f64::min);
    let diag_max = (0..n).map(|i| base[(i, i)]).fold(f64::NEG_INFINITY, f64::max);
    Err(CoreError::Numerical(format!(
        "Cholesky failed for {n}x{n} matrix after jitters {tried:?} (diag range [{diag_min}, {diag_max}])"
    )))
}

/// GP regression posterior with heteroscedastic diagonal noise.
///
/// Immutable once fitted; queries are read-only.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    kernel: Kernel,
    inputs: Vec<f64>,
    /// Lower-triangular factor of K + diag(noise) + jitter I.
    factor: DMatrix<f64>,
    /// (K + diag(noise) + jitter I)^-1 y.
    alpha: DVector<f64>,
    jitter: f64,
}

/// Fits the exact GP posterior. `noise_variances[i]` is the observation-noise
/// variance of `observations[i]`; `jitter` seeds the ladder used to keep the
/// factorization positive definite.
pub fn posterior_fit(
    inputs: &[f64],
    observations: &[f64],
    noise_variances: &[f64],
    kernel: Kernel,
    jitter: f64,
) -> Result<GpPosterior> {
    kernel.validate()?;
    if inputs.len() != observations.len() || inputs.len() != noise_variances.len() {
        return Err(CoreError::Contract(
            "inputs, observations and noise_variances must have equal lengths".into(),
        ));
    }
    if noise_variances.iter().any(|&v| v < 0.0) {
        return Err(CoreError::Contract("noise variances must be >= 0".into()));
    }
    if jitter < 0.0 {
        return Err(CoreError::Contract("jitter must be >= 0".into()));
    }
    let n = inputs.len();
    if n == 0 {
        return Ok(GpPosterior {
            kernel,
            inputs: Vec::new(),
            factor: DMatrix::zeros(0, 0),
            alpha: DVector::zeros(0),
            jitter,
        });
    }
    let mut gram = DMatrix::from_fn(n, n, |i, j| kernel.eval(inputs[i], inputs[j]));
    for i in 0..n {
        gram[(i, i)] += noise_variances[i];
    }
    let (factor, used_jitter) = cholesky_with_jitter(&gram, jitter)?;
    let y = DVector::from_column_slice(observations);
    // Solve L L^T alpha = y.
    let tmp = factor
        .solve_lower_triangular(&y)
        .ok_or_else(|| CoreError::Numerical("forward substitution failed".into()))?;
    let alpha = factor
        .transpose()
        .solve_upper_triangular(&tmp)
        .ok_or_else(|| CoreError::Numerical("back substitution failed".into()))?;
    Ok(GpPosterior { kernel, inputs: inputs.to_vec(), factor, alpha, jitter: used_jitter })
}

impl GpPosterior {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn cross_covariance(&self, x: f64) -> DVector<f64> {
        DVector::from_fn(self.inputs.len(), |i, _| self.kernel.eval(self.inputs[i], x))
    }

    /// Posterior mean at a query point.
    pub fn mean(&self, x: f64) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.cross_covariance(x).dot(&self.alpha)
    }

    /// Posterior variance at a query point, clamped at zero against roundoff.
    pub fn variance(&self, x: f64) -> f64 {
        let prior = self.kernel.eval(x, x);
        if self.is_empty() {
            return prior;
        }
        let kx = self.cross_covariance(x);
        let v = self
            .factor
            .solve_lower_triangular(&kx)
            .expect("triangular solve on a successfully factored matrix");
        (prior - v.dot(&v)).max(0.0)
    }

    /// Mean and variance over a candidate set.
    pub fn predict(&self, candidates: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mu = candidates.iter().map(|&x| self.mean(x)).collect();
        let var = candidates.iter().map(|&x| self.variance(x)).collect();
        (mu, var)
    }

    /// One sample from the joint posterior over `candidates`, exploiting the
    /// full posterior covariance (kernel correlations included).
    pub fn sample_joint<R: Rng + ?Sized>(
        &self,
        candidates: &[f64],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let m = candidates.len();
        let mut cov = DMatrix::from_fn(m, m, |i, j| self.kernel.eval(candidates[i], candidates[j]));
        let mean: Vec<f64> = if self.is_empty() {
            vec![0.0; m]
        } else {
            let cross = DMatrix::from_fn(self.inputs.len(), m, |i, j| {
                self.kernel.eval(self.inputs[i], candidates[j])
            });
            let v = self
                .factor
                .solve_lower_triangular(&cross)
                .ok_or_else(|| CoreError::Numerical("triangular solve failed".into()))?;
            cov -= v.transpose() * &v;
            candidates.iter().map(|&x| self.mean(x)).collect()
        };
        let (factor, _) = cholesky_with_jitter(&cov, self.jitter)?;
        let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let noise = factor * z;
        Ok(mean.iter().zip(noise.iter()).map(|(m, n)| m + n).collect())
    }
}

/// Per-candidate audit trail of one IDS decision.
#[derive(Debug, Clone)]
pub struct BanditDecision {
    pub action_index: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub regret_estimate: Vec<f64>,
    pub info_gain: Vec<f64>,
    pub ratio: Vec<f64>,
}

fn argmax_lowest_index(values: &[f64]) -> usize {
    let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    values.iter().position(|&v| v == best).unwrap()
}

/// argmax of mu(x) + sqrt(beta) sigma(x); ties go to the lowest index.
pub fn ucb_select(posterior: &GpPosterior, candidates: &[f64], beta: f64) -> Result<usize> {
    if candidates.is_empty() {
        return Err(CoreError::Contract("candidate set is empty".into()));
    }
    let (mu, var) = posterior.predict(candidates);
    let scores: Vec<f64> = mu
        .iter()
        .zip(var.iter())
        .map(|(&m, &v)| m + beta.sqrt() * v.sqrt())
        .collect();
    Ok(argmax_lowest_index(&scores))
}

/// argmax of one joint posterior sample; ties go to the lowest index.
pub fn ts_select<R: Rng + ?Sized>(
    posterior: &GpPosterior,
    candidates: &[f64],
    rng: &mut R,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(CoreError::Contract("candidate set is empty".into()));
    }
    let sample = posterior.sample_joint(candidates, rng)?;
    Ok(argmax_lowest_index(&sample))
}

/// Information-directed selection over the candidates.
///
/// Confidence bounds mu +- lambda sigma give the conservative regret estimate
/// delta(a) = max_a' u(a') - l(a); the gain is log(1 + sigma^2/rho^2) + eps2
/// with rho^2 the observation-noise variance at each candidate; the chosen
/// index minimizes delta^2 / gain, ties to the lowest index.
pub fn ids_select(
    posterior: &GpPosterior,
    candidates: &[f64],
    noise_variances_at_candidates: &[f64],
    lambda: f64,
    eps2: f64,
) -> Result<BanditDecision> {
    if candidates.is_empty() {
        return Err(CoreError::Contract("candidate set is empty".into()));
    }
    if noise_variances_at_candidates.len() != candidates.len() {
        return Err(CoreError::Contract(
            "noise variances must align with the candidates".into(),
        ));
    }
    let (mu, var) = posterior.predict(candidates);
    let sigma: Vec<f64> = var.iter().map(|&v| v.sqrt()).collect();
    let upper: Vec<f64> = mu.iter().zip(&sigma).map(|(&m, &s)| m + lambda * s).collect();
    let lower: Vec<f64> = mu.iter().zip(&sigma).map(|(&m, &s)| m - lambda * s).collect();
    let regret_estimate = regret_surrogate(&mu, &sigma, lambda);
    let info = information_gain(&var, noise_variances_at_candidates, eps2)?;
    let ratio: Vec<f64> = regret_estimate
        .iter()
        .zip(&info)
        .map(|(&d, &i)| d * d / i)
        .collect();
    let best = ratio.iter().cloned().fold(f64::INFINITY, f64::min);
    let action_index = ratio.iter().position(|&v| v == best).unwrap();
    Ok(BanditDecision { action_index, lower, upper, regret_estimate, info_gain: info, ratio })
}
