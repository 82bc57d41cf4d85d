use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use super::StatsError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f: f64,
    pub df_between: usize,
    pub df_within: usize,
    pub p: f64,
}

/// `P(F > f)` for an F(d1, d2) variable, through the regularized incomplete
/// beta function.
pub fn f_survival(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    beta_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)).clamp(0.0, 1.0)
}

/// Classical one-way ANOVA, `F = MS_between / MS_within`.
pub fn one_way_anova(groups: &[Vec<f64>]) -> Result<AnovaResult, StatsError> {
    if groups.len() < 2 {
        return Err(StatsError::Invalid(format!("need at least 2 groups, got {}", groups.len())));
    }
    if let Some(g) = groups.iter().find(|g| g.len() < 2) {
        return Err(StatsError::Invalid(format!("every group needs 2 samples, one has {}", g.len())));
    }
    if groups.iter().flatten().any(|v| !v.is_finite()) {
        return Err(StatsError::Invalid("non-finite sample".into()));
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ss_between += g.len() as f64 * (m - grand).powi(2);
        ss_within += g.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    }
    let df_between = groups.len() - 1;
    let df_within = n - groups.len();
    let scale = groups.iter().flatten().map(|v| (v - grand).powi(2)).sum::<f64>();
    // rounding residue in ss_within counts as zero
    if ss_within == 0.0 || ss_within <= 1e-14 * scale {
        return Err(StatsError::Degenerate("zero within-group variance".into()));
    }
    let f = (ss_between / df_between as f64) / (ss_within / df_within as f64);
    Ok(AnovaResult {
        f,
        df_between,
        df_within,
        p: f_survival(f, df_between as f64, df_within as f64),
    })
}
