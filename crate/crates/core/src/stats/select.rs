use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{logistic_fit_counts, one_way_anova, AnovaResult, StatsError};
use crate::data::{AggregatedInstance, AttrKind, AuxSchema};

pub const DEFAULT_ALPHA: f64 = 0.05;

const NOTE: &str = "methodology reproduction: ANOVA on per-instance CTR by level, \
logistic regression on click counts with the most frequent level as reference; \
values depend on the input log";

/// Both tests for one categorical attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeTest {
    pub attribute: String,
    /// Levels with at least one impression.
    pub levels: usize,
    pub reference: Option<String>,
    pub anova: Option<AnovaResult>,
    /// Joint Wald χ² of all non-reference level terms, its df and p-value.
    pub logit_chi2: Option<f64>,
    pub logit_df: Option<usize>,
    pub logit_p: Option<f64>,
    pub separation: bool,
    /// Smaller of the two p-values (1 when neither test could run).
    pub p: f64,
    pub kept: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub note: String,
    pub alpha: f64,
    /// Ascending by `p`, then by name.
    pub attributes: Vec<AttributeTest>,
}

impl SelectionReport {
    pub fn kept(&self) -> Vec<&str> {
        self.attributes.iter().filter(|a| a.kept).map(|a| a.attribute.as_str()).collect()
    }

    pub fn get(&self, attribute: &str) -> Option<&AttributeTest> {
        self.attributes.iter().find(|a| a.attribute == attribute)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4e}"));
        let mut s = format!("# {}\n# alpha = {}\n", self.note, self.alpha);
        let _ = writeln!(
            s,
            "{:<16} {:>6} {:>12} {:>12} {:>12} {:>12} {:>5}",
            "attribute", "levels", "F", "p_anova", "chi2", "p_logit", "kept"
        );
        for a in &self.attributes {
            let _ = writeln!(
                s,
                "{:<16} {:>6} {:>12} {:>12} {:>12} {:>12} {:>5}",
                a.attribute,
                a.levels,
                opt(a.anova.as_ref().map(|r| r.f)),
                opt(a.anova.as_ref().map(|r| r.p)),
                opt(a.logit_chi2),
                opt(a.logit_p),
                if a.kept { "yes" } else { "no" }
            );
        }
        s
    }
}

fn level_of<'a>(inst: &'a AggregatedInstance, attribute: &str) -> Result<&'a str, StatsError> {
    inst.attributes
        .get(attribute)
        .map(String::as_str)
        .ok_or_else(|| StatsError::Invalid(format!("instance of `{}` has no `{attribute}`", inst.image_id)))
}

fn test_attribute(instances: &[AggregatedInstance], attribute: &str, levels: &[String], alpha: f64) -> Result<AttributeTest, StatsError> {
    let mut ctrs: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut counts: BTreeMap<usize, (u64, u64)> = BTreeMap::new();
    for inst in instances {
        let v = level_of(inst, attribute)?;
        let i = levels
            .iter()
            .position(|l| l == v)
            .ok_or_else(|| StatsError::Invalid(format!("unknown level `{v}` for `{attribute}`")))?;
        ctrs.entry(i).or_default().push(inst.y);
        let e = counts.entry(i).or_default();
        e.0 += inst.clicks;
        e.1 += inst.w;
    }

    let groups: Vec<Vec<f64>> = ctrs.into_values().filter(|g| g.len() >= 2).collect();
    let anova = if groups.len() >= 2 { one_way_anova(&groups).ok() } else { None };

    let observed: Vec<usize> = counts.keys().copied().collect();
    let reference = observed.iter().copied().max_by_key(|i| (counts[i].1, std::cmp::Reverse(*i)));
    let (mut chi2, mut df, mut logit_p, mut separation) = (None, None, None, false);
    if let (Some(r), true) = (reference, observed.len() >= 2) {
        let others: Vec<usize> = observed.iter().copied().filter(|&i| i != r).collect();
        let x: Vec<Vec<f64>> = observed
            .iter()
            .map(|&i| std::iter::once(1.0).chain(others.iter().map(|&o| f64::from(u8::from(o == i)))).collect())
            .collect();
        let s: Vec<f64> = observed.iter().map(|i| counts[i].0 as f64).collect();
        let t: Vec<f64> = observed.iter().map(|i| counts[i].1 as f64).collect();
        let fit = logistic_fit_counts(&x, &s, &t, 50, 1e-8)?;
        separation = fit.separation;
        if let Some((c, d, p)) = fit.wald_joint(&(1..=others.len()).collect::<Vec<_>>()) {
            (chi2, df, logit_p) = (Some(c), Some(d), Some(p));
        }
    }
    let p = anova.as_ref().map(|a| a.p).into_iter().chain(logit_p).fold(1.0, f64::min);
    Ok(AttributeTest {
        attribute: attribute.to_string(),
        levels: observed.len(),
        reference: reference.map(|r| levels[r].clone()),
        anova,
        logit_chi2: chi2,
        logit_df: df,
        logit_p,
        separation,
        p,
        kept: p < alpha,
    })
}

/// Tests every categorical attribute of the schema and keeps those
/// significant under either test at `alpha`. Embedding slots are skipped.
pub fn select_attributes(instances: &[AggregatedInstance], schema: &AuxSchema, alpha: f64) -> Result<SelectionReport, StatsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::Invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    let mut attributes = Vec::new();
    for spec in &schema.attributes {
        if let AttrKind::Categorical { levels, .. } = &spec.kind {
            attributes.push(test_attribute(instances, &spec.name, levels, alpha)?);
        }
    }
    attributes.sort_by(|a, b| a.p.total_cmp(&b.p).then_with(|| a.attribute.cmp(&b.attribute)));
    Ok(SelectionReport {
        note: NOTE.to_string(),
        alpha,
        attributes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CtrBar {
    pub level: String,
    pub ctr: f64,
    /// Impressions at this level.
    pub count: u64,
}

/// Pooled CTR per observed level, in schema level order.
pub fn ctr_bars(instances: &[AggregatedInstance], schema: &AuxSchema, attribute: &str) -> Result<Vec<CtrBar>, StatsError> {
    let (levels, _) = schema
        .levels(attribute)
        .ok_or_else(|| StatsError::Invalid(format!("`{attribute}` is not a categorical attribute")))?;
    let mut counts = vec![(0u64, 0u64); levels.len()];
    for inst in instances {
        let v = level_of(inst, attribute)?;
        let i = levels
            .iter()
            .position(|l| l == v)
            .ok_or_else(|| StatsError::Invalid(format!("unknown level `{v}` for `{attribute}`")))?;
        counts[i].0 += inst.clicks;
        counts[i].1 += inst.w;
    }
    Ok(levels
        .iter()
        .zip(counts)
        .filter(|(_, (_, w))| *w > 0)
        .map(|(l, (c, w))| CtrBar {
            level: l.clone(),
            ctr: c as f64 / w as f64,
            count: w,
        })
        .collect())
}
