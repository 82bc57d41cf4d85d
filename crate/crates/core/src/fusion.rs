//! The three fusion mechanisms between image features and the auxiliary
//! vector.
//!
//! * [`CbnBlock`]: conditional batch normalization. A small MLP over the
//!   auxiliary vector predicts per-sample offsets to the batch-norm scale and
//!   shift, so the auxiliary data modulates early convolutional features.
//! * [`SpatialAttentionBlock`]: the auxiliary vector is replicated over every
//!   spatial position, concatenated with the features, scored per position by
//!   an MLP, and softmax-normalized into an attention map that pools the
//!   features.
//! * [`HighFusionBlock`]: both modalities are projected to a shared width,
//!   squashed with `tanh` and multiplied element-wise.
//!
//! Blocks hold only dimensions and a parameter prefix; the tensors live in a
//! [`ParamStore`] under `cbn.*`, `attn.*` and `high.*`.

use crate::tensor::{fan_in_uniform, seeded_rng, BnStats, Bound, Graph, Mode, ParamStore, Tensor, VarId};
use crate::{Error, LayerContext, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CbnBlock {
    pub prefix: String,
    pub channels: usize,
    pub dim_aux: usize,
    pub hidden: usize,
}

impl CbnBlock {
    pub fn new(prefix: &str, channels: usize, dim_aux: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            channels,
            dim_aux,
            hidden,
        }
    }

    /// Base batch norm at identity, a Kaiming hidden layer and zeroed output
    /// layers so the block starts out as plain batch normalization.
    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let p = &self.prefix;
        store.init_batch_norm(p, self.channels);
        store.init_dense(&format!("{p}.mlp.hidden"), self.dim_aux, self.hidden, seed);
        store.init_zero_dense(&format!("{p}.mlp.delta_gamma"), self.hidden, self.channels);
        store.init_zero_dense(&format!("{p}.mlp.delta_beta"), self.hidden, self.channels);
    }

    /// Predicted `(Δγ, Δβ)`, each `[N, C]`.
    pub fn deltas(&self, g: &mut Graph, bound: &Bound, aux: VarId) -> Result<(VarId, VarId)> {
        let p = &self.prefix;
        if g.shape(aux).len() != 2 || g.shape(aux)[1] != self.dim_aux {
            return Err(schema_mismatch(&self.prefix, self.dim_aux, g.shape(aux)));
        }
        let name = |s: &str| format!("{p}.mlp.{s}");
        let h = g
            .dense(aux, bound.get(&name("hidden.weight")), bound.get(&name("hidden.bias")))
            .layer(p)?;
        let h = g.relu(h).layer(p)?;
        let dg = g
            .dense(h, bound.get(&name("delta_gamma.weight")), bound.get(&name("delta_gamma.bias")))
            .layer(p)?;
        let db = g
            .dense(h, bound.get(&name("delta_beta.weight")), bound.get(&name("delta_beta.bias")))
            .layer(p)?;
        Ok((dg, db))
    }

    /// `(γ + Δγ(aux))·x̂ + (β + Δβ(aux))` per sample.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        store: &ParamStore,
        features: VarId,
        aux: VarId,
        mode: Mode,
    ) -> Result<(VarId, Option<BnStats>)> {
        let p = &self.prefix;
        let n = g.shape(features)[0];
        if g.shape(aux)[0] != n {
            return Err(Error::Config(format!(
                "{p}: aux has {} rows for a batch of {n}",
                g.shape(aux)[0]
            )));
        }
        let (xhat, stats) = g.bn_normalize(features, store.bn_mode(p, mode)).layer(p)?;
        let (dg, db) = self.deltas(g, bound, aux)?;
        let gamma = g.repeat_rows(bound.get(&format!("{p}.gamma")), n).layer(p)?;
        let beta = g.repeat_rows(bound.get(&format!("{p}.beta")), n).layer(p)?;
        let scale = g.add(gamma, dg).layer(p)?;
        let shift = g.add(beta, db).layer(p)?;
        Ok((g.channel_modulate(xhat, scale, shift).layer(p)?, stats))
    }
}

fn schema_mismatch(prefix: &str, want: usize, got: &[usize]) -> Error {
    Error::Config(format!("{prefix}: aux input {got:?} does not match dim_aux {want}"))
}

/// Replicates `aux [N, D]` over the spatial grid of `features [N, C, W, H]`
/// and appends it as extra channels. With no aux input the features pass
/// through unchanged.
pub fn replicate_and_concat(g: &mut Graph, features: VarId, aux: Option<VarId>) -> Result<VarId> {
    let Some(aux) = aux else { return Ok(features) };
    let fs = g.shape(features).to_vec();
    let as_ = g.shape(aux).to_vec();
    if fs.len() != 4 || as_.len() != 2 || fs[0] != as_[0] {
        return Err(Error::Config(format!(
            "replicate_and_concat: features {fs:?} and aux {as_:?} disagree on batch"
        )));
    }
    let rep = g.replicate_spatial(aux, fs[2], fs[3])?;
    Ok(g.concat(&[features, rep], 1)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionBlock {
    pub prefix: String,
    pub channels: usize,
    pub dim_aux: usize,
    pub hidden: usize,
}

/// Pooled features and the attention map they were pooled with.
pub struct AttentionOutput {
    pub pooled: VarId,
    pub attn: VarId,
    pub logits: VarId,
}

impl SpatialAttentionBlock {
    pub fn new(prefix: &str, channels: usize, dim_aux: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            channels,
            dim_aux,
            hidden,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let p = &self.prefix;
        store.init_dense(&format!("{p}.mlp.hidden"), self.channels + self.dim_aux, self.hidden, seed);
        // softmax ignores a shared offset, so the logit layer has no bias
        let name = format!("{p}.mlp.logit.weight");
        let w = fan_in_uniform(&[1, self.hidden], self.hidden, &mut seeded_rng(seed, &name));
        store.insert(name, w);
    }

    /// The per-position MLP runs as a pair of 1×1 convolutions.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, features: VarId, aux: Option<VarId>) -> Result<AttentionOutput> {
        let p = &self.prefix;
        let fs = g.shape(features).to_vec();
        if fs.len() != 4 || fs[1] != self.channels {
            return Err(Error::Config(format!("{p}: features {fs:?} do not have {} channels", self.channels)));
        }
        let got_aux = aux.map_or(0, |a| g.shape(a)[1]);
        if got_aux != self.dim_aux {
            return Err(schema_mismatch(p, self.dim_aux, &[fs[0], got_aux]));
        }
        let (n, positions) = (fs[0], fs[2] * fs[3]);
        let joined = replicate_and_concat(g, features, aux)?;
        let width = self.channels + self.dim_aux;
        let w1 = g
            .reshape(bound.get(&format!("{p}.mlp.hidden.weight")), &[self.hidden, width, 1, 1])
            .layer(p)?;
        let h = g
            .conv2d(joined, w1, bound.get(&format!("{p}.mlp.hidden.bias")), 1, 0)
            .layer(p)?;
        let h = g.relu(h).layer(p)?;
        let w2 = g
            .reshape(bound.get(&format!("{p}.mlp.logit.weight")), &[1, self.hidden, 1, 1])
            .layer(p)?;
        let zero = g.constant(Tensor::zeros(&[1]));
        let logits = g.conv2d(h, w2, zero, 1, 0).layer(p)?;
        let logits = g.reshape(logits, &[n, positions]).layer(p)?;
        let attn = g.softmax_lastdim(logits).layer(p)?;
        let pooled = g.weighted_spatial_sum(features, attn).layer(p)?;
        Ok(AttentionOutput { pooled, attn, logits })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HighFusionBlock {
    pub prefix: String,
    pub visual_dim: usize,
    pub dim_aux: usize,
    pub fused_dim: usize,
}

impl HighFusionBlock {
    pub fn new(prefix: &str, visual_dim: usize, dim_aux: usize, fused_dim: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            visual_dim,
            dim_aux,
            fused_dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let p = &self.prefix;
        store.init_dense(&format!("{p}.visual"), self.visual_dim, self.fused_dim, seed);
        store.init_dense(&format!("{p}.aux"), self.dim_aux, self.fused_dim, seed);
    }

    /// `tanh(A_v·visual) ⊙ tanh(A_a·aux)`
    pub fn forward(&self, g: &mut Graph, bound: &Bound, visual: VarId, aux: VarId) -> Result<VarId> {
        let p = &self.prefix;
        if g.shape(aux).len() != 2 || g.shape(aux)[1] != self.dim_aux {
            return Err(schema_mismatch(p, self.dim_aux, g.shape(aux)));
        }
        let v = g
            .dense(visual, bound.get(&format!("{p}.visual.weight")), bound.get(&format!("{p}.visual.bias")))
            .layer(p)?;
        let a = g
            .dense(aux, bound.get(&format!("{p}.aux.weight")), bound.get(&format!("{p}.aux.bias")))
            .layer(p)?;
        let v = g.tanh(v).layer(p)?;
        let a = g.tanh(a).layer(p)?;
        g.mul(v, a).layer(p)
    }
}
