//! Attribute selection statistics: one-way ANOVA on per-instance CTR,
//! logistic regression on click counts, and per-level CTR summaries.
//!
//! Results reproduce a methodology, not particular published values; the
//! selection report says so in its header.

mod anova;
mod logit;
mod select;

pub use anova::{f_survival, one_way_anova, AnovaResult};
pub use logit::{logistic_fit, logistic_fit_counts, LogitResult, SEPARATION_LIMIT};
pub use select::{ctr_bars, select_attributes, AttributeTest, CtrBar, SelectionReport, DEFAULT_ALPHA};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("design matrix: {0}")]
    Design(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}
