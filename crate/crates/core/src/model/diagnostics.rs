use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{HeadKind, ModelConfig, StageSpec, Toggles, DIST_BUCKETS};
use super::network::M2fn;
use crate::objectives::{emd_node, kld_node, weighted_mse_node};
use crate::tensor::{grad_check, seeded_rng, BnMode, Graph, Mode, Tensor, VarId, DEFAULT_FD_STEP};
use crate::Result;

/// Largest relative error a gradient check may report.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Case = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Graph, &[VarId]) -> Result<VarId>>);

fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = scale * rng.random_range(-1.0..1.0);
    }
    t
}

/// Reduces any output to a scalar through fixed random weights so every
/// element reaches the check with a distinct gradient.
fn project(g: &mut Graph, y: VarId, seed: u64) -> Result<VarId> {
    let r = uniform(&mut seeded_rng(seed, "gradcheck.project"), g.shape(y), 1.0);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p)?)
}

fn primitive_cases() -> Vec<Case> {
    let dist = |n: usize, seed: u64| {
        let mut rng = seeded_rng(seed, "gradcheck.dist");
        let mut t = uniform(&mut rng, &[n, 5], 1.0).map(|v| v.exp());
        for r in 0..n {
            let s: f64 = t.row(r).iter().sum();
            for v in &mut t.data_mut()[r * 5..(r + 1) * 5] {
                *v /= s;
            }
        }
        t
    };
    let (kt, et) = (dist(3, 1), dist(3, 2));
    vec![
        ("conv2d", vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3], vec![3]], Box::new(|g, v| Ok(g.conv2d(v[0], v[1], v[2], 2, 1)?))),
        ("batch_norm_train", vec![vec![3, 2, 2, 2], vec![2], vec![2]], Box::new(|g, v| Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Train)?.0))),
        (
            "batch_norm_eval",
            vec![vec![3, 2, 2, 2], vec![2], vec![2]],
            Box::new(|g, v| Ok(g.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &[0.1, -0.2], var: &[0.5, 2.0] })?.0)),
        ),
        ("channel_modulate", vec![vec![2, 3, 2, 2], vec![2, 3], vec![2, 3]], Box::new(|g, v| Ok(g.channel_modulate(v[0], v[1], v[2])?))),
        ("dense", vec![vec![3, 4], vec![2, 4], vec![2]], Box::new(|g, v| Ok(g.dense(v[0], v[1], v[2])?))),
        ("relu", vec![vec![3, 4]], Box::new(|g, v| Ok(g.relu(v[0])?))),
        ("tanh", vec![vec![3, 4]], Box::new(|g, v| Ok(g.tanh(v[0])?))),
        ("softmax", vec![vec![3, 5]], Box::new(|g, v| Ok(g.softmax_lastdim(v[0])?))),
        ("max_pool2d", vec![vec![2, 2, 4, 4]], Box::new(|g, v| Ok(g.max_pool2d(v[0], 2, 2)?))),
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| Ok(g.add(v[0], v[1])?))),
        ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| Ok(g.sub(v[0], v[1])?))),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|g, v| Ok(g.mul(v[0], v[1])?))),
        ("scale", vec![vec![2, 3]], Box::new(|g, v| Ok(g.scale(v[0], -1.7)?))),
        ("concat", vec![vec![2, 1, 3], vec![2, 2, 3]], Box::new(|g, v| Ok(g.concat(&[v[0], v[1]], 1)?))),
        ("replicate_spatial", vec![vec![2, 3]], Box::new(|g, v| Ok(g.replicate_spatial(v[0], 2, 3)?))),
        ("repeat_rows", vec![vec![4]], Box::new(|g, v| Ok(g.repeat_rows(v[0], 3)?))),
        ("mean", vec![vec![2, 3]], Box::new(|g, v| Ok(g.mean(v[0])?))),
        ("global_avg_pool", vec![vec![2, 3, 2, 2]], Box::new(|g, v| Ok(g.global_avg_pool(v[0])?))),
        ("reshape", vec![vec![2, 6]], Box::new(|g, v| Ok(g.reshape(v[0], &[3, 4])?))),
        ("weighted_spatial_sum", vec![vec![2, 3, 2, 2], vec![2, 4]], Box::new(|g, v| Ok(g.weighted_spatial_sum(v[0], v[1])?))),
        ("weighted_mse", vec![vec![4, 1]], Box::new(|g, v| weighted_mse_node(g, v[0], &[0.1, 0.5, -0.2, 0.3], &[1.0, 2.0, 0.5, 1.5]))),
        (
            "kld",
            vec![vec![3, 5]],
            Box::new(move |g, v| {
                let p = g.softmax_lastdim(v[0])?;
                kld_node(g, p, &kt)
            }),
        ),
        (
            "emd",
            vec![vec![3, 5]],
            Box::new(move |g, v| {
                let p = g.softmax_lastdim(v[0])?;
                emd_node(g, p, &et, 2)
            }),
        ),
    ]
}

/// Tiny network used for whole-model checks.
pub fn micro_config(toggles: Toggles, head: HeadKind) -> ModelConfig {
    ModelConfig {
        backbone: vec![StageSpec::new(4), StageSpec::new(5)],
        image_size: 8,
        cbn_hidden: 3,
        attn_hidden: 3,
        high_dim: 4,
        toggles,
        head,
        dim_aux: 3,
        seed: 7,
    }
}

fn model_check(toggles: Toggles, head: HeadKind, loss: &str, seed: u64) -> Result<f64> {
    let mut model = M2fn::build(micro_config(toggles, head))?;
    // random parameters so no block sits at its identity initialization
    let mut rng = seeded_rng(seed, "gradcheck.model");
    let names: Vec<String> = model.params().params().map(|(k, _)| k.to_string()).collect();
    for k in names {
        let t = model.params_mut().param_mut(&k).expect("listed parameter");
        *t = uniform(&mut rng, &t.shape().to_vec(), 0.8);
    }
    let n = 2;
    let mut inputs = vec![uniform(&mut rng, &[n, 3, 8, 8], 1.0), uniform(&mut rng, &[n, 3], 1.0)];
    inputs.extend(model.params().param_tensors());
    let mut target = Tensor::full(&[n, DIST_BUCKETS], 0.02);
    target.data_mut()[3] += 0.8;
    target.data_mut()[DIST_BUCKETS + 6] += 0.8;
    grad_check(
        |g: &mut Graph, ids: &[VarId]| -> Result<VarId> {
            let bound = model.params().bind_ids(&ids[2..]);
            let out = model.forward(g, &bound, ids[0], Some(ids[1]), Mode::Train)?;
            match loss {
                "kld" => kld_node(g, out.output, &target),
                "emd" => emd_node(g, out.output, &target, 2),
                _ => weighted_mse_node(g, out.output, &[0.1, 0.3], &[1.5, 0.5]),
            }
        },
        &inputs,
        DEFAULT_FD_STEP,
    )
}

/// Finite-difference checks of every graph primitive, every loss node, and
/// the whole forward pass plus loss for several toggle rows and heads.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut out = Vec::new();
    let mut push = |name: String, err: f64| {
        out.push(GradCheckEntry {
            name,
            max_rel_error: err,
            passed: err < GRAD_TOLERANCE,
        })
    };
    let mut rng = seeded_rng(seed, "gradcheck.inputs");
    for (name, shapes, op) in primitive_cases() {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(&mut rng, s, 1.0)).collect();
        let err = grad_check(
            |g: &mut Graph, ids: &[VarId]| -> Result<VarId> {
                let y = op(g, ids)?;
                if g.shape(y).iter().product::<usize>() == 1 {
                    Ok(y)
                } else {
                    project(g, y, seed)
                }
            },
            &inputs,
            DEFAULT_FD_STEP,
        )?;
        push(name.to_string(), err);
    }
    let rows = [
        (Toggles::ALL_ON, HeadKind::Scalar, "wmse"),
        (Toggles::ALL_ON, HeadKind::Distribution, "kld"),
        (Toggles::ALL_ON, HeadKind::Distribution, "emd"),
        (Toggles::new(true, false, false, false), HeadKind::Scalar, "wmse"),
        (Toggles::new(true, false, true, false), HeadKind::Scalar, "wmse"),
        (Toggles::ALL_OFF, HeadKind::Scalar, "wmse"),
    ];
    for (i, (t, head, loss)) in rows.into_iter().enumerate() {
        let err = model_check(t, head, loss, seed.wrapping_add(i as u64))?;
        push(format!("model[{t}]+{loss}"), err);
    }
    Ok(out)
}
