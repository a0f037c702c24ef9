//! Small statistics helpers for the experiment reports.

/// One-sided sign test: probability of seeing at least `wins` successes in
/// `trials` fair coin flips. Ties must be dropped by the caller before
/// counting.
pub fn sign_test_p(wins: usize, trials: usize) -> f64 {
    assert!(wins <= trials);
    if trials == 0 {
        return 1.0;
    }
    // Sum the binomial tail iteratively; n stays small (seed counts).
    let mut pmf = 0.5f64.powi(trials as i32); // P(X = 0)
    let mut cdf_below = 0.0;
    for k in 0..wins {
        cdf_below += pmf;
        pmf *= (trials - k) as f64 / (k + 1) as f64;
    }
    (1.0 - cdf_below).clamp(0.0, 1.0)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
