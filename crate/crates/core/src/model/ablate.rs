use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Toggles};
use super::network::M2fn;
use super::train::{train, Dataset, TrainConfig};
use crate::metrics::MetricReport;
use crate::{Error, Result};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "M2FN_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub marks: String,
    pub sprc: f64,
    pub lcc: f64,
    pub report: MetricReport,
    pub final_train_loss: f64,
}

/// Worker count: `M2FN_THREADS` if set to a positive integer, otherwise the
/// available parallelism.
pub fn thread_cap() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_row(base: &ModelConfig, cfg: &TrainConfig, tr: &Dataset, ev: &Dataset, toggles: Toggles) -> Result<AblationRow> {
    let mut model = M2fn::build(base.clone().with_toggles(toggles))?;
    let rep = train(&mut model, tr, Some(ev), cfg)?;
    let report = rep
        .final_eval()
        .cloned()
        .ok_or_else(|| Error::Config("training ran no epochs".into()))?;
    Ok(AblationRow {
        toggles,
        marks: toggles.marks(),
        sprc: report.sprc_mean,
        lcc: report.lcc_mean,
        final_train_loss: rep.epochs.last().map_or(f64::NAN, |e| e.train_loss),
        report,
    })
}

/// Trains and evaluates the eight toggle rows with the same seeds. Rows run
/// in parallel, capped by [`thread_cap`]; each row owns its model.
pub fn ablate_grid(base: &ModelConfig, cfg: &TrainConfig, tr: &Dataset, ev: &Dataset) -> Result<Vec<AblationRow>> {
    run_rows(base, cfg, tr, ev, &Toggles::grid())
}

/// Same as [`ablate_grid`] over an arbitrary list of rows.
pub fn run_rows(
    base: &ModelConfig,
    cfg: &TrainConfig,
    tr: &Dataset,
    ev: &Dataset,
    rows: &[Toggles],
) -> Result<Vec<AblationRow>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap().min(rows.len()).max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| rows.par_iter().map(|&t| run_row(base, cfg, tr, ev, t)).collect())
}

/// Aligned text table in the Aux/Low/Att/High layout.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("Aux Low Att High |   SPRC     LCC\n");
    out.push_str("-----------------+----------------\n");
    for r in rows {
        let m: Vec<&str> = r.marks.split(' ').collect();
        out.push_str(&format!(
            " {:^3}{:^4}{:^4}{:^5} | {:>7.4} {:>7.4}\n",
            m[0], m[1], m[2], m[3], r.sprc, r.lcc
        ));
    }
    out
}
