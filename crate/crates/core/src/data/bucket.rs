use statrs::function::erf::erfc;

use super::DataError;
use crate::metrics::ScoreDistribution;

/// Default `c` in the log-normal shape `σ = c / √w`.
pub const LOGNORMAL_SHAPE: f64 = 1.0;
/// Smallest CTR the grid resolves; also the clamp applied to `y = 0`.
pub const CTR_FLOOR: f64 = 1e-6;
const BUCKETS: usize = 10;

/// Eleven geometric edges spanning `[1e-6, 1]`, 0.6 decades apart.
pub fn bucket_edges() -> [f64; BUCKETS + 1] {
    let mut e = [0.0; BUCKETS + 1];
    for (k, v) in e.iter_mut().enumerate() {
        *v = CTR_FLOOR * 10f64.powf(0.6 * k as f64);
    }
    e[BUCKETS] = 1.0;
    e
}

/// Geometric bucket centers, used as the bucket scores.
pub fn bucket_values() -> Vec<f64> {
    bucket_edges().windows(2).map(|w| (w[0] * w[1]).sqrt()).collect()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Ten-bucket CTR distribution from a log-normal with median `y` (clamped to
/// `[1e-6, 1]`) and shape `c / √w`, integrated over the bucket edges and
/// renormalized. Mass beyond the grid is discarded before renormalizing.
pub fn ctr_to_distribution(y: f64, w: u64, c: f64) -> Result<ScoreDistribution, DataError> {
    if w == 0 {
        return Err(DataError::Invalid("ctr_to_distribution needs w >= 1".into()));
    }
    if !(0.0..=1.0).contains(&y) {
        return Err(DataError::Invalid(format!("CTR {y} outside [0, 1]")));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(DataError::Invalid(format!("shape constant {c} must be positive")));
    }
    let mu = y.clamp(CTR_FLOOR, 1.0).ln();
    let sigma = c / (w as f64).sqrt();
    let cdf: Vec<f64> = bucket_edges().iter().map(|e| std_normal_cdf((e.ln() - mu) / sigma)).collect();
    let mass: Vec<f64> = cdf.windows(2).map(|p| (p[1] - p[0]).max(0.0)).collect();
    let total: f64 = mass.iter().sum();
    // the median lies on the grid, so at least half the mass is inside it
    debug_assert!(total >= 0.5 - 1e-12);
    let buckets = mass.iter().map(|m| m / total).collect();
    ScoreDistribution::new(buckets, bucket_values()).map_err(|e| DataError::Invalid(e.to_string()))
}
