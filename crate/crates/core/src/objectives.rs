//! Training objectives: impression-weighted MSE, KL divergence over score
//! buckets, and the earth mover's distance baseline.
//!
//! Each loss exists twice: as a plain function over slices, and as a graph
//! node whose reverse pass feeds the autodiff tape.

use serde::{Deserialize, Serialize};

use crate::metrics::{check_normalized, MetricError, Result};
use crate::tensor::{BackwardOp, Graph, Tensor, TensorError, VarId};

/// Floor applied to predicted probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Wmse,
    Kld,
    Emd,
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "wmse" => Ok(Self::Wmse),
            "kld" => Ok(Self::Kld),
            "emd" => Ok(Self::Emd),
            other => Err(format!("unknown loss `{other}` (expected wmse, kld or emd)")),
        }
    }
}

/// `(1/N) Σ w_n (ŷ_n - y_n)²`
pub fn weighted_mse(pred: &[f64], target: &[f64], weights: &[f64]) -> Result<f64> {
    check_weighted(pred, target, weights)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target)
        .zip(weights)
        .map(|((p, t), w)| w * (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

fn check_weighted(pred: &[f64], target: &[f64], weights: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(MetricError::LengthMismatch(pred.len(), target.len()));
    }
    if pred.len() != weights.len() {
        return Err(MetricError::LengthMismatch(pred.len(), weights.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::TooFew { need: 1, got: 0 });
    }
    if let Some(&w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(MetricError::NegativeWeight(w));
    }
    Ok(())
}

/// `Σ_k t_k log(t_k / max(p_k, clamp))`, with `0·log 0 = 0`.
fn kl_row(target: &[f64], pred: &[f64]) -> f64 {
    target
        .iter()
        .zip(pred)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, p)| t * (t.ln() - p.max(LOG_CLAMP).ln()))
        .sum()
}

/// Mean over samples of KL(target ‖ pred).
pub fn kld_loss<T: AsRef<[f64]>, P: AsRef<[f64]>>(targets: &[T], preds: &[P]) -> Result<f64> {
    if targets.len() != preds.len() {
        return Err(MetricError::LengthMismatch(targets.len(), preds.len()));
    }
    if targets.is_empty() {
        return Err(MetricError::TooFew { need: 1, got: 0 });
    }
    let mut total = 0.0;
    for (t, p) in targets.iter().zip(preds) {
        let (t, p) = (t.as_ref(), p.as_ref());
        if t.len() != p.len() {
            return Err(MetricError::LengthMismatch(t.len(), p.len()));
        }
        check_normalized(t)?;
        check_normalized(p)?;
        total += kl_row(t, p);
    }
    // tiny negative values come only from rounding
    Ok((total / targets.len() as f64).max(0.0))
}

/// `(mean_k |CDF_p(k) - CDF_q(k)|^r)^(1/r)` over the ordered buckets.
pub fn emd_loss(p: &[f64], q: &[f64], r: u32) -> Result<f64> {
    if p.len() != q.len() {
        return Err(MetricError::LengthMismatch(p.len(), q.len()));
    }
    check_normalized(p)?;
    check_normalized(q)?;
    Ok(emd_row(p, q, r).0)
}

/// Returns the distance and the CDF differences.
fn emd_row(p: &[f64], q: &[f64], r: u32) -> (f64, Vec<f64>) {
    let mut acc = 0.0;
    let cdf: Vec<f64> = p
        .iter()
        .zip(q)
        .map(|(a, b)| {
            acc += a - b;
            acc
        })
        .collect();
    let mean = cdf.iter().map(|c| c.abs().powi(r as i32)).sum::<f64>() / cdf.len() as f64;
    (mean.powf(1.0 / r as f64), cdf)
}

// ---------------------------------------------------------- graph nodes

struct WmseBack {
    target: Vec<f64>,
    weights: Vec<f64>,
}

impl BackwardOp for WmseBack {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let n = self.target.len() as f64;
        let g = grad_out.data()[0];
        let mut d = Tensor::zeros(inputs[0].shape());
        for (i, v) in d.data_mut().iter_mut().enumerate() {
            *v = g * 2.0 / n * self.weights[i] * (inputs[0].data()[i] - self.target[i]);
        }
        vec![d]
    }
}

/// Impression-weighted MSE of a `[N]` or `[N, 1]` prediction node.
pub fn weighted_mse_node(g: &mut Graph, pred: VarId, target: &[f64], weights: &[f64]) -> crate::Result<VarId> {
    let p = g.value(pred).data().to_vec();
    let v = weighted_mse(&p, target, weights)?;
    Ok(g.push_op(
        "weighted_mse",
        Tensor::scalar(v),
        &[pred],
        Box::new(WmseBack {
            target: target.to_vec(),
            weights: weights.to_vec(),
        }),
    )?)
}

struct KldBack {
    target: Tensor,
}

impl BackwardOp for KldBack {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let n = inputs[0].shape()[0] as f64;
        let g = grad_out.data()[0];
        let mut d = Tensor::zeros(inputs[0].shape());
        for (i, v) in d.data_mut().iter_mut().enumerate() {
            let (t, p) = (self.target.data()[i], inputs[0].data()[i]);
            if t > 0.0 && p > LOG_CLAMP {
                *v = -g * t / (p * n);
            }
        }
        vec![d]
    }
}

fn check_dist_rows(op: &'static str, g: &Graph, pred: VarId, target: &Tensor) -> crate::Result<()> {
    let s = g.shape(pred);
    if s.len() != 2 || s != target.shape() {
        return Err(TensorError::Shape {
            op,
            detail: format!("prediction {s:?} and target {:?} must be equal [N, K]", target.shape()),
        }
        .into());
    }
    Ok(())
}

/// Mean KL(target ‖ pred) for `[N, K]` softmax outputs.
pub fn kld_node(g: &mut Graph, pred: VarId, target: &Tensor) -> crate::Result<VarId> {
    check_dist_rows("kld_loss", g, pred, target)?;
    let k = target.shape()[1];
    let t: Vec<&[f64]> = target.data().chunks(k).collect();
    let p: Vec<&[f64]> = g.value(pred).data().chunks(k).collect();
    let v = kld_loss(&t, &p)?;
    Ok(g.push_op("kld_loss", Tensor::scalar(v), &[pred], Box::new(KldBack { target: target.clone() }))?)
}

struct EmdBack {
    target: Tensor,
    r: u32,
}

impl BackwardOp for EmdBack {
    fn backward(&self, grad_out: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Tensor> {
        let (n, k) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        let g = grad_out.data()[0] / n as f64;
        let r = self.r as f64;
        let mut d = Tensor::zeros(inputs[0].shape());
        for row in 0..n {
            let p = &inputs[0].data()[row * k..(row + 1) * k];
            let q = &self.target.data()[row * k..(row + 1) * k];
            let (_, cdf) = emd_row(p, q, self.r);
            let s = cdf.iter().map(|c| c.abs().powi(self.r as i32)).sum::<f64>() / k as f64;
            if s <= 0.0 {
                continue;
            }
            let outer = s.powf(1.0 / r - 1.0) / k as f64;
            // dE/dp_j = Σ_{m ≥ j} dE/dC_m
            let mut tail = 0.0;
            for j in (0..k).rev() {
                let c = cdf[j];
                if c != 0.0 {
                    tail += outer * c.abs().powi(self.r as i32 - 1) * c.signum();
                }
                d.data_mut()[row * k + j] = g * tail;
            }
        }
        vec![d]
    }
}

/// Mean EMD between `[N, K]` predictions and targets.
pub fn emd_node(g: &mut Graph, pred: VarId, target: &Tensor, r: u32) -> crate::Result<VarId> {
    check_dist_rows("emd_loss", g, pred, target)?;
    let k = target.shape()[1];
    let mut total = 0.0;
    for (p, q) in g.value(pred).data().chunks(k).zip(target.data().chunks(k)) {
        total += emd_loss(p, q, r)?;
    }
    let v = total / target.shape()[0] as f64;
    Ok(g.push_op("emd_loss", Tensor::scalar(v), &[pred], Box::new(EmdBack { target: target.clone(), r }))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wmse_closed_form() {
        assert_eq!(weighted_mse(&[1.0, 0.0], &[0.0, 0.0], &[2.0, 5.0]).unwrap(), 1.0);
        assert_eq!(weighted_mse(&[0.3, 0.7], &[0.3, 0.7], &[1.0, 9.0]).unwrap(), 0.0);
    }

    #[test]
    fn wmse_errors() {
        assert!(matches!(weighted_mse(&[1.0], &[1.0, 2.0], &[1.0]), Err(MetricError::LengthMismatch(..))));
        assert!(matches!(weighted_mse(&[1.0], &[1.0], &[-1.0]), Err(MetricError::NegativeWeight(_))));
    }

    #[test]
    fn kld_closed_form() {
        let v = kld_loss(&[[1.0, 0.0]], &[[0.5, 0.5]]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(kld_loss(&[[0.2, 0.8]], &[[0.2, 0.8]]).unwrap(), 0.0);
        assert!(matches!(kld_loss(&[[0.2, 0.7]], &[[0.2, 0.8]]), Err(MetricError::NotNormalized(_))));
    }

    #[test]
    fn emd_one_step() {
        let mut p = vec![0.0; 10];
        let mut q = vec![0.0; 10];
        p[0] = 1.0;
        q[1] = 1.0;
        assert!((emd_loss(&p, &q, 1).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(emd_loss(&p, &p, 2).unwrap(), 0.0);
    }

    #[test]
    fn loss_kind_parses() {
        assert_eq!("kld".parse::<LossKind>().unwrap(), LossKind::Kld);
        assert!("mae".parse::<LossKind>().is_err());
    }
}
