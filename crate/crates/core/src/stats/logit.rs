use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erfc;

use super::StatsError;

/// Coefficients beyond this magnitude are taken as a sign of separation.
pub const SEPARATION_LIMIT: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitResult {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub z: Vec<f64>,
    /// Two-sided Wald p-values; `None` when separation was detected.
    pub p_values: Option<Vec<f64>>,
    pub converged: bool,
    pub iterations: usize,
    /// Max-norm of the mean log-likelihood gradient at the returned point.
    pub grad_norm: f64,
    /// Log-likelihood at the start and after every step.
    pub log_likelihood: Vec<f64>,
    pub separation: bool,
    /// Inverse Fisher information at the estimate, row-major.
    pub covariance: Vec<Vec<f64>>,
}

impl LogitResult {
    /// Joint Wald test that the coefficients at `idx` are all zero:
    /// `(χ², df, p)`. `None` under separation or a singular covariance.
    pub fn wald_joint(&self, idx: &[usize]) -> Option<(f64, usize, f64)> {
        if self.separation || idx.is_empty() {
            return None;
        }
        let k = idx.len();
        let cov = DMatrix::from_fn(k, k, |i, j| self.covariance[idx[i]][idx[j]]);
        let b = DVector::from_iterator(k, idx.iter().map(|&i| self.coefficients[i]));
        let inv = cov.cholesky()?.inverse();
        let chi2 = (b.transpose() * inv * &b)[0].max(0.0);
        let p = ChiSquared::new(k as f64).ok()?.sf(chi2);
        Some((chi2, k, p))
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Problem {
    x: DMatrix<f64>,
    succ: DVector<f64>,
    trials: DVector<f64>,
    total: f64,
}

impl Problem {
    fn log_likelihood(&self, beta: &DVector<f64>) -> f64 {
        let eta = &self.x * beta;
        (0..eta.len())
            .map(|i| self.succ[i] * eta[i] - self.trials[i] * softplus(eta[i]))
            .sum()
    }

    /// Score vector and Fisher information.
    fn score_info(&self, beta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let eta = &self.x * beta;
        let p = eta.map(sigmoid);
        let resid = DVector::from_fn(p.len(), |i, _| self.succ[i] - self.trials[i] * p[i]);
        let wts = DVector::from_fn(p.len(), |i, _| self.trials[i] * p[i] * (1.0 - p[i]));
        let grad = self.x.transpose() * resid;
        let mut xw = self.x.clone();
        for (mut row, w) in xw.row_iter_mut().zip(wts.iter()) {
            row *= *w;
        }
        (grad, self.x.transpose() * xw)
    }
}

/// Logistic regression on individual 0/1 outcomes. `x` holds one row per
/// observation and should include an intercept column if one is wanted.
pub fn logistic_fit(x: &[Vec<f64>], y: &[f64], max_iter: usize, tol: f64) -> Result<LogitResult, StatsError> {
    if let Some(v) = y.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(StatsError::Invalid(format!("outcome {v} is not 0 or 1")));
    }
    logistic_fit_counts(x, y, &vec![1.0; y.len()], max_iter, tol)
}

/// Logistic regression on binomial rows: `successes[i]` clicks out of
/// `trials[i]` at covariates `x[i]`. Gives the same estimate as the
/// expanded 0/1 data.
///
/// Iteratively reweighted least squares, halving the step until the
/// log-likelihood does not decrease.
pub fn logistic_fit_counts(
    x: &[Vec<f64>],
    successes: &[f64],
    trials: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<LogitResult, StatsError> {
    let m = x.len();
    if m == 0 || successes.len() != m || trials.len() != m {
        return Err(StatsError::Invalid(format!(
            "{m} design rows, {} outcomes, {} trial counts",
            successes.len(),
            trials.len()
        )));
    }
    let p = x[0].len();
    if p == 0 || x.iter().any(|r| r.len() != p) {
        return Err(StatsError::Design("rows must share a non-zero column count".into()));
    }
    for (s, t) in successes.iter().zip(trials) {
        if !(*t > 0.0 && *s >= 0.0 && s <= t) {
            return Err(StatsError::Invalid(format!("{s} successes out of {t} trials")));
        }
    }
    let prob = Problem {
        x: DMatrix::from_fn(m, p, |i, j| x[i][j]),
        succ: DVector::from_column_slice(successes),
        trials: DVector::from_column_slice(trials),
        total: trials.iter().sum(),
    };
    let gram = prob.x.transpose() * &prob.x;
    let sv = gram.clone().singular_values();
    if sv.min() <= 1e-10 * sv.max().max(1.0) {
        return Err(StatsError::Design(format!("design of {p} columns is rank deficient")));
    }

    let mut beta = DVector::zeros(p);
    let mut trace = vec![prob.log_likelihood(&beta)];
    let mut iterations = 0;
    let mut separation = false;
    while iterations < max_iter {
        let (grad, info) = prob.score_info(&beta);
        if grad.amax() / prob.total < tol {
            break;
        }
        let Some(chol) = info.cholesky() else {
            separation = true;
            break;
        };
        let delta = chol.solve(&grad);
        iterations += 1;
        let ll0 = *trace.last().expect("non-empty");
        let mut step = 1.0;
        let mut next = &beta + &delta;
        let mut ll = prob.log_likelihood(&next);
        while ll < ll0 && step > 1e-10 {
            step *= 0.5;
            next = &beta + &delta * step;
            ll = prob.log_likelihood(&next);
        }
        if ll < ll0 {
            break;
        }
        beta = next;
        trace.push(ll);
        if beta.amax() > SEPARATION_LIMIT {
            separation = true;
            break;
        }
    }

    let (grad, info) = prob.score_info(&beta);
    let grad_norm = grad.amax() / prob.total;
    let cov = info.cholesky().map(|c| c.inverse());
    let covariance: Vec<Vec<f64>> = match &cov {
        Some(c) => c.row_iter().map(|r| r.iter().copied().collect()).collect(),
        None => vec![vec![f64::NAN; p]; p],
    };
    let std_errors: Vec<f64> = (0..p).map(|i| covariance[i][i].sqrt()).collect();
    let z: Vec<f64> = beta.iter().zip(&std_errors).map(|(b, s)| b / s).collect();
    separation |= cov.is_none();
    let p_values = (!separation).then(|| z.iter().map(|z| erfc(z.abs() / std::f64::consts::SQRT_2)).collect());
    if separation {
        log::warn!("logistic_fit: separation detected, p-values suppressed");
    }
    Ok(LogitResult {
        coefficients: beta.iter().copied().collect(),
        std_errors,
        z,
        p_values,
        converged: !separation && grad_norm < tol,
        iterations,
        grad_norm,
        log_likelihood: trace,
        separation,
        covariance,
    })
}
