use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{HeadKind, ModelConfig, IMAGE_CHANNELS};
use crate::fusion::{CbnBlock, HighFusionBlock, SpatialAttentionBlock};
use crate::tensor::{BnStats, Bound, Checkpoint, Graph, Mode, ParamStore, Tensor, VarId};
use crate::{Error, LayerContext, Result};

const CBN: &str = "cbn";
const ATTN: &str = "attn";
const HIGH: &str = "high";

/// Graph handles produced by one forward pass.
pub struct ForwardOut {
    /// `[N, 1]` scores or `[N, 10]` bucket probabilities.
    pub output: VarId,
    /// `[N, W·H]` attention over the last feature map, when attention is on.
    pub attn: Option<VarId>,
    /// Batch statistics per normalization layer (train mode only).
    pub bn_stats: Vec<(String, BnStats)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prediction {
    Score(f64),
    Dist(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct M2fn {
    config: ModelConfig,
    store: ParamStore,
    cbn: Option<CbnBlock>,
    attn: Option<SpatialAttentionBlock>,
    high: Option<HighFusionBlock>,
}

fn conv_name(i: usize) -> String {
    format!("backbone.{i}.conv.weight")
}

fn bn_prefix(i: usize, low: bool) -> String {
    if i == 0 && low {
        CBN.to_string()
    } else {
        format!("backbone.{i}.bn")
    }
}

impl M2fn {
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let t = config.toggles;
        let seed = config.seed;
        let mut store = ParamStore::new();
        let mut cin = IMAGE_CHANNELS;
        let mut cbn = None;
        for (i, s) in config.backbone.iter().enumerate() {
            store.init_weight(&conv_name(i), &[s.out_channels, cin, s.kernel, s.kernel], cin * s.kernel * s.kernel, seed);
            if i == 0 && t.low {
                let block = CbnBlock::new(CBN, s.out_channels, config.dim_aux, config.cbn_hidden);
                block.init(&mut store, seed);
                cbn = Some(block);
            } else {
                store.init_batch_norm(&bn_prefix(i, false), s.out_channels);
            }
            cin = s.out_channels;
        }
        let visual = cin;
        let attn = t.att.then(|| SpatialAttentionBlock::new(ATTN, visual, config.dim_aux, config.attn_hidden));
        if let Some(b) = &attn {
            b.init(&mut store, seed);
        }
        let high = t.high.then(|| HighFusionBlock::new(HIGH, visual, config.dim_aux, config.high_dim));
        if let Some(b) = &high {
            b.init(&mut store, seed);
        }
        let head_in = match (t.high, t.aux) {
            (true, _) => config.high_dim,
            (false, true) => visual + config.dim_aux,
            (false, false) => visual,
        };
        store.init_dense("head.hidden", head_in, config.high_dim, seed);
        store.init_dense("head.out", config.high_dim, config.head.outputs(), seed);
        Ok(Self {
            config,
            store,
            cbn,
            attn,
            high,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Checks the batch shapes and returns N.
    fn check_inputs(&self, images: &[usize], aux: Option<&[usize]>) -> Result<usize> {
        let s = self.config.image_size;
        if images.len() != 4 || images[1] != IMAGE_CHANNELS || images[2] != s || images[3] != s {
            return Err(Error::Config(format!(
                "images {images:?} must be [N, {IMAGE_CHANNELS}, {s}, {s}]"
            )));
        }
        if self.config.toggles.aux {
            match aux {
                Some(a) if a.len() == 2 && a[0] == images[0] && a[1] == self.config.dim_aux => {}
                Some(a) => {
                    return Err(Error::Config(format!(
                        "aux {a:?} must be [{}, {}] to match the batch and dim_aux",
                        images[0], self.config.dim_aux
                    )))
                }
                None => return Err(Error::Config("model has aux on but no aux input was given".into())),
            }
        }
        Ok(images[0])
    }

    /// Builds the forward pass on `g` with parameters taken from `bound`.
    /// The aux input is never touched when the aux toggle is off.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        images: VarId,
        aux: Option<VarId>,
        mode: Mode,
    ) -> Result<ForwardOut> {
        let aux_shape = aux.map(|a| g.shape(a).to_vec());
        let n = self.check_inputs(g.shape(images), aux_shape.as_deref())?;
        let t = self.config.toggles;
        let aux = if t.aux { aux } else { None };
        let mut bn_stats = Vec::new();
        let mut x = images;
        for (i, s) in self.config.backbone.iter().enumerate() {
            let name = format!("backbone.{i}");
            let zero = g.constant(Tensor::zeros(&[s.out_channels]));
            x = g
                .conv2d(x, bound.get(&conv_name(i)), zero, s.stride, s.kernel / 2)
                .layer(&format!("{name}.conv"))?;
            let prefix = bn_prefix(i, t.low);
            let (y, stats) = match (&self.cbn, i) {
                (Some(block), 0) => block.forward(g, bound, &self.store, x, aux.expect("aux checked"), mode)?,
                _ => g
                    .batch_norm(
                        x,
                        bound.get(&format!("{prefix}.gamma")),
                        bound.get(&format!("{prefix}.beta")),
                        self.store.bn_mode(&prefix, mode),
                    )
                    .layer(&prefix)?,
            };
            if let Some(st) = stats {
                bn_stats.push((prefix, st));
            }
            x = g.relu(y).layer(&name)?;
            if s.pool > 1 {
                x = g.max_pool2d(x, s.pool, s.pool).layer(&format!("{name}.pool"))?;
            }
        }
        let (visual, attn) = match &self.attn {
            Some(block) => {
                let out = block.forward(g, bound, x, aux)?;
                (out.pooled, Some(out.attn))
            }
            None => (g.global_avg_pool(x).layer("pool")?, None),
        };
        let joined = match (&self.high, aux) {
            (Some(block), Some(a)) => block.forward(g, bound, visual, a)?,
            (None, Some(a)) => g.concat(&[visual, a], 1).layer("concat")?,
            _ => visual,
        };
        let h = g
            .dense(joined, bound.get("head.hidden.weight"), bound.get("head.hidden.bias"))
            .layer("head.hidden")?;
        let h = g.relu(h).layer("head.hidden")?;
        let mut out = g
            .dense(h, bound.get("head.out.weight"), bound.get("head.out.bias"))
            .layer("head.out")?;
        if self.config.head == HeadKind::Distribution {
            out = g.softmax_lastdim(out).layer("head.softmax")?;
        }
        debug_assert_eq!(g.shape(out)[0], n);
        Ok(ForwardOut {
            output: out,
            attn,
            bn_stats,
        })
    }

    /// Folds batch statistics from a train-mode pass into the running stats.
    pub fn update_running_stats(&mut self, stats: &[(String, BnStats)]) {
        for (prefix, st) in stats {
            let mut mean = self.store.buffer(&format!("{prefix}.running_mean")).cloned().expect("bn buffer");
            let var = self.store.buffer_mut(&format!("{prefix}.running_var")).expect("bn buffer");
            st.update_running(mean.data_mut(), var.data_mut());
            *self.store.buffer_mut(&format!("{prefix}.running_mean")).expect("bn buffer") = mean;
        }
    }

    /// Forward pass on plain tensors; returns the raw `[N, K]` output and,
    /// when attention is on, the `[N, W·H]` map.
    pub fn run(&self, images: &Tensor, aux: Option<&Tensor>, mode: Mode) -> Result<(Tensor, Option<Tensor>)> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let x = g.constant(images.clone());
        let a = aux.map(|a| g.constant(a.clone()));
        let out = self.forward(&mut g, &bound, x, a, mode)?;
        let attn = out.attn.map(|v| g.value(v).clone());
        Ok((g.value(out.output).clone(), attn))
    }

    /// Eval-mode predictions.
    pub fn predict(&self, images: &Tensor, aux: Option<&Tensor>) -> Result<Vec<Prediction>> {
        let (out, _) = self.run(images, aux, Mode::Eval)?;
        let k = self.config.head.outputs();
        Ok(out
            .data()
            .chunks(k)
            .map(|r| match self.config.head {
                HeadKind::Scalar => Prediction::Score(r[0]),
                HeadKind::Distribution => Prediction::Dist(r.to_vec()),
            })
            .collect())
    }

    /// Parameters, running statistics and the config in one checkpoint.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.store.to_checkpoint();
        ck.meta = Some(serde_json::to_value(&self.config).map_err(|e| Error::Format(e.to_string()))?);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = ck
            .meta
            .clone()
            .ok_or_else(|| Error::Format("checkpoint carries no model config".into()))?;
        let config: ModelConfig = serde_json::from_value(meta).map_err(|e| Error::Format(e.to_string()))?;
        let mut model = Self::build(config)?;
        model.store.load_checkpoint(ck)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
