use indexmap::IndexMap;

use super::{fan_in_uniform, kaiming_uniform, seeded_rng, BnMode, Checkpoint, Graph, Tensor, VarId};
use crate::{Error, Result};

/// Forward-pass mode for layers with batch statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named trainable parameters plus non-trainable buffers (running stats),
/// in insertion order. Names are dot-separated module paths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
    buffers: IndexMap<String, Tensor>,
}

/// Graph handles for every parameter of a store.
pub struct Bound {
    ids: IndexMap<String, VarId>,
}

impl Bound {
    pub fn get(&self, name: &str) -> VarId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was never bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, VarId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            ids: self
                .params
                .iter()
                .map(|(k, t)| (k.clone(), g.param(t.clone())))
                .collect(),
        }
    }

    /// Binds caller-supplied leaves, in store order, in place of the stored
    /// values. Used by finite-difference checks over the whole model.
    pub fn bind_ids(&self, ids: &[VarId]) -> Bound {
        assert_eq!(ids.len(), self.params.len(), "one id per parameter");
        Bound {
            ids: self.params.keys().cloned().zip(ids.iter().copied()).collect(),
        }
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params.values().cloned().collect()
    }

    /// Fan-in uniform weight `[dout, din]` and zero bias under `prefix`.
    pub fn init_dense(&mut self, prefix: &str, din: usize, dout: usize, seed: u64) {
        let name = format!("{prefix}.weight");
        let w = fan_in_uniform(&[dout, din], din, &mut seeded_rng(seed, &name));
        self.insert(name, w);
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[dout]));
    }

    /// Kaiming-uniform tensor of any shape with the given fan-in.
    pub fn init_weight(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) {
        self.insert(name, kaiming_uniform(shape, fan_in, &mut seeded_rng(seed, name)));
    }

    pub fn init_zero_dense(&mut self, prefix: &str, din: usize, dout: usize) {
        self.insert(format!("{prefix}.weight"), Tensor::zeros(&[dout, din]));
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[dout]));
    }

    /// Batch-norm affine (`gamma` = 1, `beta` = 0) and running statistics.
    pub fn init_batch_norm(&mut self, prefix: &str, channels: usize) {
        self.insert(format!("{prefix}.gamma"), Tensor::ones(&[channels]));
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]));
        self.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]));
        self.insert_buffer(format!("{prefix}.running_var"), Tensor::ones(&[channels]));
    }

    /// Batch-norm statistics source for `prefix` under `mode`.
    pub fn bn_mode(&self, prefix: &str, mode: Mode) -> BnMode<'_> {
        match mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval {
                mean: self.buffers[&format!("{prefix}.running_mean")].data(),
                var: self.buffers[&format!("{prefix}.running_var")].data(),
            },
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (k, t) in &self.params {
            ck.insert(k.clone(), t);
        }
        for (k, t) in &self.buffers {
            ck.insert(k.clone(), t);
        }
        ck
    }

    /// Overwrites every parameter and buffer from `ck`; shapes must match.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        for (k, t) in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            let loaded = ck.tensor(k)?;
            if loaded.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "`{k}`: checkpoint shape {:?}, model expects {:?}",
                    loaded.shape(),
                    t.shape()
                )));
            }
            *t = loaded;
        }
        Ok(())
    }
}
