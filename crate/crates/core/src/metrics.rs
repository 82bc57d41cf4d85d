//! Ranking metrics and bucketed score distributions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("negative weight {0}")]
    NegativeWeight(f64),
    #[error("distribution sums to {0}, expected 1")]
    NotNormalized(f64),
    #[error("distribution has a negative or non-finite bucket")]
    InvalidBucket,
    #[error("bucket values must be strictly increasing")]
    UnorderedValues,
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("cannot compare scalar outputs with distribution outputs")]
    MixedHeads,
}

pub type Result<T> = std::result::Result<T, MetricError>;

pub const NORMALIZATION_TOL: f64 = 1e-6;

/// Probability mass over ordered buckets, each with a representative score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    buckets: Vec<f64>,
    values: Vec<f64>,
}

impl ScoreDistribution {
    pub fn new(buckets: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if buckets.len() != values.len() {
            return Err(MetricError::LengthMismatch(buckets.len(), values.len()));
        }
        check_normalized(&buckets)?;
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MetricError::UnorderedValues);
        }
        Ok(Self { buckets, values })
    }

    /// Ten buckets scored 1..=10.
    pub fn with_unit_scores(buckets: Vec<f64>) -> Result<Self> {
        let values = (1..=buckets.len()).map(|v| v as f64).collect();
        Self::new(buckets, values)
    }

    pub fn buckets(&self) -> &[f64] {
        &self.buckets
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub(crate) fn check_normalized(buckets: &[f64]) -> Result<()> {
    if buckets.iter().any(|b| !b.is_finite() || *b < 0.0) {
        return Err(MetricError::InvalidBucket);
    }
    let s: f64 = buckets.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(MetricError::NotNormalized(s));
    }
    Ok(())
}

/// Mean and standard deviation of the score under a bucket distribution.
pub fn dist_moments(d: &ScoreDistribution) -> (f64, f64) {
    let mean: f64 = d.buckets.iter().zip(&d.values).map(|(p, v)| p * v).sum();
    let var: f64 = d
        .buckets
        .iter()
        .zip(&d.values)
        .map(|(p, v)| p * (v - mean) * (v - mean))
        .sum();
    (mean, var.max(0.0).sqrt())
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Linear (Pearson) correlation coefficient.
pub fn lcc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(MetricError::TooFew { need: 2, got: a.len() });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(MetricError::Degenerate("constant input to correlation"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn sprc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    lcc(&average_ranks(a), &average_ranks(b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sprc_mean: f64,
    pub lcc_mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sprc_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lcc_std: Option<f64>,
}

/// Outputs of either head kind, or the matching ground truth.
#[derive(Clone, Debug, PartialEq)]
pub enum Outputs {
    Scores(Vec<f64>),
    Distributions(Vec<ScoreDistribution>),
}

impl Outputs {
    pub fn len(&self) -> usize {
        match self {
            Outputs::Scores(s) => s.len(),
            Outputs::Distributions(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// SPRC/LCC on scores, or on distribution means and (separately) standard
/// deviations. The std entries are omitted when either side's standard
/// deviations are constant.
pub fn evaluate(preds: &Outputs, targets: &Outputs) -> Result<MetricReport> {
    match (preds, targets) {
        (Outputs::Scores(p), Outputs::Scores(t)) => Ok(MetricReport {
            sprc_mean: sprc(p, t)?,
            lcc_mean: lcc(p, t)?,
            sprc_std: None,
            lcc_std: None,
        }),
        (Outputs::Distributions(p), Outputs::Distributions(t)) => {
            let (pm, ps): (Vec<f64>, Vec<f64>) = p.iter().map(dist_moments).unzip();
            let (tm, ts): (Vec<f64>, Vec<f64>) = t.iter().map(dist_moments).unzip();
            let (sprc_std, lcc_std) = match (sprc(&ps, &ts), lcc(&ps, &ts)) {
                (Ok(s), Ok(l)) => (Some(s), Some(l)),
                (Err(MetricError::Degenerate(_)), _) | (_, Err(MetricError::Degenerate(_))) => (None, None),
                (Err(e), _) | (_, Err(e)) => return Err(e),
            };
            Ok(MetricReport {
                sprc_mean: sprc(&pm, &tm)?,
                lcc_mean: lcc(&pm, &tm)?,
                sprc_std,
                lcc_std,
            })
        }
        _ => Err(MetricError::MixedHeads),
    }
}
