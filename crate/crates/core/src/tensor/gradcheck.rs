use super::{Graph, Result, Tensor, TensorError, VarId};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Compares reverse-mode gradients of a scalar function with central finite
/// differences and returns `max |a - n| / max(|a|, |n|, 1e-8)` over every
/// element of every input.
pub fn grad_check<F, E>(f: F, inputs: &[Tensor], step: f64) -> std::result::Result<f64, E>
where
    F: Fn(&mut Graph, &[VarId]) -> std::result::Result<VarId, E>,
    E: From<TensorError>,
{
    let eval = |vals: &[Tensor]| -> std::result::Result<f64, E> {
        let mut g = Graph::new();
        let ids: Vec<VarId> = vals.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        Ok(scalar_of(&g, out)?)
    };

    let mut g = Graph::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut vals = inputs.to_vec();
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            vals[i].data_mut()[j] = orig + step;
            let plus = eval(&vals)?;
            vals[i].data_mut()[j] = orig - step;
            let minus = eval(&vals)?;
            vals[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn scalar_of(g: &Graph, out: VarId) -> Result<f64> {
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(TensorError::Contract(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}
