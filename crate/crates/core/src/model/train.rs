use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{HeadKind, IMAGE_CHANNELS};
use super::network::M2fn;
use crate::data::{ctr_to_distribution, encode_aux, AggregatedInstance, AuxSchema, EmbeddingStore};
use crate::metrics::{evaluate, MetricReport, Outputs, ScoreDistribution};
use crate::objectives::{emd_node, kld_node, weighted_mse_node, LossKind};
use crate::tensor::{seeded_rng, BnStats, Bound, Graph, Mode, Tensor, VarId};
use crate::{Error, Result};

/// Model-ready instances. Images are stored once and referenced by index,
/// since many exposures share an image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Each `[3, S, S]`.
    pub images: Vec<Tensor>,
    pub image_index: Vec<usize>,
    /// `[N, dim_aux]`, absent for image-only data.
    pub aux: Option<Tensor>,
    /// Scalar targets (CTR) and impression weights.
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    /// `[N, K]` bucket targets with their representative values.
    pub dists: Option<(Tensor, Vec<f64>)>,
}

impl Dataset {
    /// Joins instances with their images. With a schema, attributes are
    /// encoded into aux rows; with `dist_shape = Some(c)`, bucketized CTR
    /// targets are attached. Only referenced images are kept, in id order.
    pub fn from_instances(
        instances: &[AggregatedInstance],
        images: &BTreeMap<String, Tensor>,
        schema: Option<&AuxSchema>,
        store: Option<&EmbeddingStore>,
        dist_shape: Option<f64>,
    ) -> Result<Dataset> {
        let mut slot: BTreeMap<&str, usize> = BTreeMap::new();
        for inst in instances {
            if !images.contains_key(&inst.image_id) {
                return Err(Error::Config(format!("no image for `{}`", inst.image_id)));
            }
            slot.insert(&inst.image_id, 0);
        }
        for (i, v) in slot.values_mut().enumerate() {
            *v = i;
        }
        let table: Vec<Tensor> = slot.keys().map(|k| images[*k].clone()).collect();
        let aux = match schema {
            Some(s) => {
                let mut rows = Vec::with_capacity(instances.len() * s.dim_aux());
                for inst in instances {
                    rows.extend(encode_aux(&inst.attributes, s, store)?);
                }
                Some(Tensor::new(vec![instances.len(), s.dim_aux()], rows)?)
            }
            None => None,
        };
        let dists = match dist_shape {
            Some(c) => {
                let mut rows = Vec::new();
                let mut values = Vec::new();
                for inst in instances {
                    let d = ctr_to_distribution(inst.y, inst.w, c)?;
                    rows.extend_from_slice(d.buckets());
                    values = d.values().to_vec();
                }
                Some((Tensor::new(vec![instances.len(), values.len()], rows)?, values))
            }
            None => None,
        };
        let ds = Dataset {
            images: table,
            image_index: instances.iter().map(|i| slot[i.image_id.as_str()]).collect(),
            aux,
            y: instances.iter().map(|i| i.y).collect(),
            w: instances.iter().map(|i| i.w as f64).collect(),
            dists,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Config("dataset is empty".into()));
        }
        let bad = |what: &str| Err(Error::Config(format!("dataset: {what}")));
        if self.image_index.len() != n || self.w.len() != n {
            return bad("image_index, y and w lengths differ");
        }
        if let Some(i) = self.image_index.iter().find(|&&i| i >= self.images.len()) {
            return bad(&format!("image index {i} out of range"));
        }
        if let Some(a) = &self.aux {
            if a.ndim() != 2 || a.shape()[0] != n {
                return bad(&format!("aux {:?} must have {n} rows", a.shape()));
            }
        }
        if let Some((d, v)) = &self.dists {
            if d.ndim() != 2 || d.shape()[0] != n || d.shape()[1] != v.len() {
                return bad(&format!("distribution targets {:?} do not match {n} x {}", d.shape(), v.len()));
            }
        }
        Ok(())
    }

    /// Images and aux rows for the given instances.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Option<Tensor>)> {
        let shape = self.images[0].shape().to_vec();
        let per: usize = shape.iter().product();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(self.images[self.image_index[i]].data());
        }
        let mut full = vec![idx.len()];
        full.extend_from_slice(&shape);
        let images = Tensor::new(full, data)?;
        let aux = match &self.aux {
            Some(a) => {
                let d = a.shape()[1];
                let rows: Vec<f64> = idx.iter().flat_map(|&i| a.row(i).iter().copied()).collect();
                Some(Tensor::new(vec![idx.len(), d], rows)?)
            }
            None => None,
        };
        Ok((images, aux))
    }

    fn dist_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let (d, _) = self
            .dists
            .as_ref()
            .ok_or_else(|| Error::Config("distribution loss needs distribution targets".into()))?;
        let k = d.shape()[1];
        let rows: Vec<f64> = idx.iter().flat_map(|&i| d.row(i).iter().copied()).collect();
        Ok(Tensor::new(vec![idx.len(), k], rows)?)
    }

    /// Ground truth in the form `evaluate` compares against.
    pub fn truth(&self, head: HeadKind) -> Result<Outputs> {
        match head {
            HeadKind::Scalar => Ok(Outputs::Scores(self.y.clone())),
            HeadKind::Distribution => {
                let (d, v) = self
                    .dists
                    .as_ref()
                    .ok_or_else(|| Error::Config("distribution head needs distribution targets".into()))?;
                let rows = (0..d.shape()[0])
                    .map(|i| ScoreDistribution::new(d.row(i).to_vec(), v.clone()))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                Ok(Outputs::Distributions(rows))
            }
        }
    }

    /// Subset of instances, keeping the image table intact.
    pub fn select(&self, idx: &[usize]) -> Result<Dataset> {
        let aux = match &self.aux {
            Some(a) => {
                let d = a.shape()[1];
                Some(Tensor::new(vec![idx.len(), d], idx.iter().flat_map(|&i| a.row(i).to_vec()).collect())?)
            }
            None => None,
        };
        let dists = match &self.dists {
            Some((_, v)) => Some((self.dist_rows(idx)?, v.clone())),
            None => None,
        };
        Ok(Dataset {
            images: self.images.clone(),
            image_index: idx.iter().map(|&i| self.image_index[i]).collect(),
            aux,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            w: idx.iter().map(|&i| self.w[i]).collect(),
            dists,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    /// Exponent of the EMD loss.
    #[serde(default = "default_emd_r")]
    pub emd_r: u32,
    /// Divide impression weights by their training-set mean, which rescales
    /// the weighted MSE by a constant so the learning rate does not depend on
    /// the impression threshold.
    #[serde(default = "default_true")]
    pub normalize_weights: bool,
    /// Evaluate every this many epochs (0: only after the last epoch).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    100
}
fn default_batch_size() -> usize {
    128
}
fn default_lr() -> f64 {
    1e-3
}
fn default_momentum() -> f64 {
    0.9
}
fn default_loss() -> LossKind {
    LossKind::Wmse
}
fn default_emd_r() -> u32 {
    2
}
fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            momentum: default_momentum(),
            loss: default_loss(),
            emd_r: default_emd_r(),
            normalize_weights: true,
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn check_head(&self, head: HeadKind) -> Result<()> {
        match (self.loss, head) {
            (LossKind::Wmse, HeadKind::Scalar) | (LossKind::Kld | LossKind::Emd, HeadKind::Distribution) => Ok(()),
            (loss, head) => Err(Error::Config(format!(
                "loss {} does not fit a {head:?} head",
                serde_json::to_string(&loss).unwrap_or_default()
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
}

impl TrainReport {
    pub fn final_eval(&self) -> Option<&MetricReport> {
        self.epochs.iter().rev().find_map(|e| e.eval.as_ref())
    }

    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch log serializes") + "\n")
            .collect()
    }
}

fn weight_scale(ds: &Dataset, cfg: &TrainConfig) -> f64 {
    if cfg.normalize_weights {
        let mean = ds.w.iter().sum::<f64>() / ds.len() as f64;
        if mean > 0.0 {
            return 1.0 / mean;
        }
    }
    1.0
}

struct BatchGraph {
    g: Graph,
    bound: Bound,
    loss: VarId,
    bn_stats: Vec<(String, BnStats)>,
}

/// Builds the loss node for one batch.
fn batch_loss(
    model: &M2fn,
    ds: &Dataset,
    idx: &[usize],
    cfg: &TrainConfig,
    wscale: f64,
    mode: Mode,
) -> Result<BatchGraph> {
    let (images, aux) = ds.batch(idx)?;
    let mut g = Graph::new();
    let bound = model.params().bind(&mut g);
    let x = g.constant(images);
    let a = aux.map(|a| g.constant(a));
    let out = model.forward(&mut g, &bound, x, a, mode)?;
    let loss = match cfg.loss {
        LossKind::Wmse => {
            let y: Vec<f64> = idx.iter().map(|&i| ds.y[i]).collect();
            let w: Vec<f64> = idx.iter().map(|&i| ds.w[i] * wscale).collect();
            weighted_mse_node(&mut g, out.output, &y, &w)?
        }
        LossKind::Kld => kld_node(&mut g, out.output, &ds.dist_rows(idx)?)?,
        LossKind::Emd => emd_node(&mut g, out.output, &ds.dist_rows(idx)?, cfg.emd_r)?,
    };
    Ok(BatchGraph {
        g,
        bound,
        loss,
        bn_stats: out.bn_stats,
    })
}

/// Mean batch loss over the whole dataset without updating anything.
pub fn dataset_loss(model: &M2fn, ds: &Dataset, cfg: &TrainConfig, mode: Mode) -> Result<f64> {
    cfg.check_head(model.config().head)?;
    ds.validate()?;
    let wscale = weight_scale(ds, cfg);
    let order: Vec<usize> = (0..ds.len()).collect();
    let mut total = 0.0;
    let mut count = 0;
    for idx in order.chunks(cfg.batch_size.max(2)) {
        let b = batch_loss(model, ds, idx, cfg, wscale, mode)?;
        total += b.g.value(b.loss).item()? * idx.len() as f64;
        count += idx.len();
    }
    Ok(total / count as f64)
}

/// Eval-mode outputs over the dataset in chunks.
pub fn predict_dataset(model: &M2fn, ds: &Dataset, chunk: usize) -> Result<Tensor> {
    let k = model.config().head.outputs();
    let mut out = Vec::with_capacity(ds.len() * k);
    let order: Vec<usize> = (0..ds.len()).collect();
    for idx in order.chunks(chunk.max(1)) {
        let (images, aux) = ds.batch(idx)?;
        let (o, _) = model.run(&images, aux.as_ref(), Mode::Eval)?;
        out.extend_from_slice(o.data());
    }
    Ok(Tensor::new(vec![ds.len(), k], out)?)
}

pub fn evaluate_model(model: &M2fn, ds: &Dataset, chunk: usize) -> Result<MetricReport> {
    let head = model.config().head;
    let raw = predict_dataset(model, ds, chunk)?;
    let preds = match head {
        HeadKind::Scalar => Outputs::Scores(raw.data().to_vec()),
        HeadKind::Distribution => {
            let (_, values) = ds
                .dists
                .as_ref()
                .ok_or_else(|| Error::Config("distribution head needs distribution targets".into()))?;
            let rows = (0..ds.len())
                .map(|i| ScoreDistribution::new(raw.row(i).to_vec(), values.clone()))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Outputs::Distributions(rows)
        }
    };
    Ok(evaluate(&preds, &ds.truth(head)?)?)
}

/// Seeded 8:2-style split of `0..n` into (train, eval) index lists, each
/// sorted. At least one instance lands on each side when `n >= 2`.
pub fn split_indices(n: usize, eval_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded_rng(seed, "split"));
    let k = ((n as f64 * eval_fraction).round() as usize).clamp(usize::from(n >= 2), n.saturating_sub(1));
    let mut ev = idx.split_off(n - k);
    idx.sort_unstable();
    ev.sort_unstable();
    (idx, ev)
}

/// Mini-batch SGD with momentum. Batches are reshuffled every epoch from
/// the seed; a trailing batch of one sample is dropped because batch norm
/// needs two.
pub fn train(model: &mut M2fn, train: &Dataset, eval: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.check_head(model.config().head)?;
    train.validate()?;
    if let Some(e) = eval {
        e.validate()?;
    }
    if cfg.batch_size < 2 {
        return Err(Error::Config("batch_size must be at least 2 for batch norm".into()));
    }
    let s = model.config().image_size;
    if train.images[0].shape() != [IMAGE_CHANNELS, s, s] {
        return Err(Error::Config(format!(
            "dataset images {:?} do not match the model's [{IMAGE_CHANNELS}, {s}, {s}]",
            train.images[0].shape()
        )));
    }
    let wscale = weight_scale(train, cfg);
    let mut velocity: Vec<Vec<f64>> = model.params().params().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut rng = seeded_rng(cfg.seed, "train.shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport { epochs: Vec::new() };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut seen) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let BatchGraph {
                mut g,
                bound,
                loss,
                bn_stats,
            } = batch_loss(model, train, idx, cfg, wscale, Mode::Train)?;
            let lv = g.value(loss).item()?;
            let grads = g.backward(loss)?;
            let store = model.params_mut();
            for ((name, id), v) in bound.iter().zip(velocity.iter_mut()) {
                let Some(grad) = grads.get(id) else { continue };
                let param = store.param_mut(name).expect("bound parameter");
                for ((pv, vv), gv) in param.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                    *vv = cfg.momentum * *vv + gv;
                    *pv -= cfg.lr * *vv;
                }
            }
            model.update_running_stats(&bn_stats);
            total += lv * idx.len() as f64;
            seen += idx.len();
        }
        if seen == 0 {
            return Err(Error::Config("no batch of at least 2 samples to train on".into()));
        }
        let last = epoch + 1 == cfg.epochs;
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        let eval_report = match eval {
            Some(e) if last || due => Some(evaluate_model(model, e, cfg.batch_size)?),
            _ => None,
        };
        log::info!("epoch {} loss {:.6e}", epoch + 1, total / seen as f64);
        report.epochs.push(EpochLog {
            epoch: epoch + 1,
            train_loss: total / seen as f64,
            eval: eval_report,
        });
    }
    Ok(report)
}
