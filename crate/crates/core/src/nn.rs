//! Named parameters, their binding onto a tape, and the layers built from them.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchStats, BnMode, Tape, Var};
use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.9;
pub const NORM_EPS: f64 = 1e-5;

/// Trainable parameters plus non-trainable buffers (batch-norm running statistics).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

#[derive(Serialize, Deserialize)]
struct StoreIndex {
    params: Vec<String>,
    buffers: Vec<String>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::Usage(format!("missing parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| TensorError::Usage(format!("missing buffer {name}")))
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn init_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..bound)));
        self.params.insert(name.to_string(), t);
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.params.insert(name.to_string(), Tensor::full(shape, T::of(value)));
    }

    pub fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
        self.init_uniform(&format!("{prefix}.w"), &[fan_in, fan_out], fan_in, rng);
        self.init_const(&format!("{prefix}.b"), &[fan_out], 0.0);
    }

    pub fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize, bias: bool, rng: &mut ChaCha8Rng) {
        self.init_uniform(&format!("{prefix}.w"), &[c_out, c_in, k, k], c_in * k * k, rng);
        if bias {
            self.init_const(&format!("{prefix}.b"), &[c_out], 0.0);
        }
    }

    pub fn norm(&mut self, prefix: &str, width: usize) {
        self.init_const(&format!("{prefix}.gamma"), &[width], 1.0);
        self.init_const(&format!("{prefix}.beta"), &[width], 0.0);
    }

    pub fn batch_norm(&mut self, prefix: &str, width: usize) {
        self.norm(prefix, width);
        self.buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[width]));
        self.buffers.insert(format!("{prefix}.running_var"), Tensor::full(&[width], T::one()));
    }

    /// Folds batch statistics into the running estimates with [`BN_MOMENTUM`].
    pub fn update_running(&mut self, stats: &[(String, BatchStats<T>)]) -> Result<()> {
        let m = T::of(BN_MOMENTUM);
        for (prefix, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let name = format!("{prefix}.{suffix}");
                let buf = self
                    .buffers
                    .get_mut(&name)
                    .ok_or_else(|| TensorError::Usage(format!("missing buffer {name}")))?;
                for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = m * *r + (T::one() - m) * b;
                }
            }
        }
        Ok(())
    }

    /// Selected trainable parameters concatenated in name order, with their offsets.
    pub fn flatten(&self, keep: impl Fn(&str) -> bool) -> (Tensor<T>, BTreeMap<String, usize>) {
        let mut data = Vec::new();
        let mut offsets = BTreeMap::new();
        for (name, t) in self.params.iter().filter(|(n, _)| keep(n)) {
            offsets.insert(name.clone(), data.len());
            data.extend_from_slice(t.data());
        }
        let n = data.len().max(1);
        data.resize(n, T::zero());
        (Tensor::new(vec![n], data).expect("flat length"), offsets)
    }

    /// Writes `<name>.bin` per tensor plus an `index.json` listing them.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, t) in self.params.iter().chain(&self.buffers) {
            t.save(dir.join(format!("{name}.bin")))?;
        }
        let index = StoreIndex {
            params: self.params.keys().cloned().collect(),
            buffers: self.buffers.keys().cloned().collect(),
        };
        let json = serde_json::to_vec_pretty(&index).map_err(|e| TensorError::Format(e.to_string()))?;
        fs::write(dir.join("index.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let bytes = fs::read(dir.join("index.json"))?;
        let index: StoreIndex = serde_json::from_slice(&bytes).map_err(|e| TensorError::Format(e.to_string()))?;
        let read = |names: Vec<String>| -> Result<BTreeMap<String, Tensor<T>>> {
            names
                .into_iter()
                .map(|n| {
                    let t = Tensor::load(dir.join(format!("{n}.bin")))?;
                    Ok((n, t))
                })
                .collect()
        };
        Ok(Self {
            params: read(index.params)?,
            buffers: read(index.buffers)?,
        })
    }
}

/// Lazily places parameters of a [`ParamStore`] on a tape for one forward pass.
pub struct Binder<'s, T> {
    store: &'s ParamStore<T>,
    bound: HashMap<String, Var>,
    frozen: Vec<String>,
    flat: Option<(Var, BTreeMap<String, usize>)>,
    /// Batch-statistics normalization for non-frozen batch norms.
    pub train: bool,
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

impl<'s, T: Scalar> Binder<'s, T> {
    pub fn new(store: &'s ParamStore<T>, train: bool) -> Self {
        Self {
            store,
            bound: HashMap::new(),
            frozen: Vec::new(),
            flat: None,
            train,
            bn_stats: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Parameters under `prefix` become constants and their batch norms use running statistics.
    pub fn freeze(mut self, prefix: &str) -> Self {
        self.frozen.push(prefix.to_string());
        self
    }

    /// Reads parameters listed in `offsets` out of the flat vector `flat` instead of the store.
    pub fn with_flat(mut self, flat: Var, offsets: BTreeMap<String, usize>) -> Self {
        self.flat = Some((flat, offsets));
        self
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn p(&mut self, tape: &mut Tape<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.param(name)?;
        let v = match &self.flat {
            Some((flat, offsets)) if offsets.contains_key(name) => {
                let slice = tape.narrow(*flat, 0, offsets[name], t.numel())?;
                tape.reshape(slice, t.shape())?
            }
            _ if self.is_frozen(name) => tape.constant(t.clone()),
            _ => tape.param(t.clone()),
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every trainable parameter bound so far.
    pub fn grads(&self, tape: &Tape<T>) -> BTreeMap<String, Vec<T>> {
        self.bound
            .iter()
            .filter(|(n, _)| !self.is_frozen(n))
            .filter_map(|(n, &v)| tape.grad(v).map(|g| (n.clone(), g.to_vec())))
            .collect()
    }
}

/// `x [n×in] · W + b`.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, b: &mut Binder<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = b.p(tape, &format!("{prefix}.w"))?;
    let bias = b.p(tape, &format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_broadcast(y, bias)
}

/// Convolution with "same" padding for `k = 3`; adds a per-channel bias when the store has one.
pub fn conv<T: Scalar>(tape: &mut Tape<T>, b: &mut Binder<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = b.p(tape, &format!("{prefix}.w"))?;
    let k = tape.shape(w)[2];
    let y = tape.conv2d(x, w, 1, k / 2)?;
    let bias_name = format!("{prefix}.b");
    if b.store().params.contains_key(&bias_name) {
        let bias = b.p(tape, &bias_name)?;
        tape.add_channel_bias(y, bias)
    } else {
        Ok(y)
    }
}

pub fn batch_norm<T: Scalar>(tape: &mut Tape<T>, b: &mut Binder<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = b.p(tape, &format!("{prefix}.gamma"))?;
    let beta = b.p(tape, &format!("{prefix}.beta"))?;
    let eps = T::of(NORM_EPS);
    if b.train && !b.is_frozen(prefix) {
        let (y, stats) = tape.batch_norm(x, gamma, beta, BnMode::Batch, eps)?;
        if let Some(s) = stats {
            b.bn_stats.push((prefix.to_string(), s));
        }
        Ok(y)
    } else {
        let store = b.store();
        let mean = store.buffer(&format!("{prefix}.running_mean"))?.data();
        let var = store.buffer(&format!("{prefix}.running_var"))?.data();
        let (y, _) = tape.batch_norm(x, gamma, beta, BnMode::Frozen { mean, var }, eps)?;
        Ok(y)
    }
}

pub fn layer_norm<T: Scalar>(tape: &mut Tape<T>, b: &mut Binder<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = b.p(tape, &format!("{prefix}.gamma"))?;
    let beta = b.p(tape, &format!("{prefix}.beta"))?;
    tape.layer_norm(x, gamma, beta, T::of(NORM_EPS))
}

/// conv → batch norm → ReLU.
pub fn conv_bn_relu<T: Scalar>(tape: &mut Tape<T>, b: &mut Binder<T>, prefix: &str, x: Var) -> Result<Var> {
    let y = conv(tape, b, &format!("{prefix}.conv"), x)?;
    let y = batch_norm(tape, b, &format!("{prefix}.bn"), y)?;
    tape.relu(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f64>::new();
        s.linear("fc", 3, 2, &mut rng);
        s.batch_norm("bn", 2);
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        assert_eq!(ParamStore::load(dir.path()).unwrap(), s);
    }

    #[test]
    fn flat_binding_matches_store_binding() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f64>::new();
        s.linear("fc", 3, 2, &mut rng);
        let x = Tensor::from_fn(&[4, 3], |i| i as f64 * 0.1);
        let mut t1 = Tape::new();
        let mut b1 = Binder::new(&s, false);
        let xv = t1.constant(x.clone());
        let y1 = linear(&mut t1, &mut b1, "fc", xv).unwrap();

        let (flat, offsets) = s.flatten(|n| n.starts_with("fc"));
        let mut t2 = Tape::new();
        let fv = t2.param(flat);
        let mut b2 = Binder::new(&s, false).with_flat(fv, offsets);
        let xv = t2.constant(x);
        let y2 = linear(&mut t2, &mut b2, "fc", xv).unwrap();
        assert_eq!(t1.value(y1), t2.value(y2));
    }

    #[test]
    fn running_stats_use_momentum() {
        let mut s = ParamStore::<f64>::new();
        s.batch_norm("bn", 1);
        let stats = BatchStats {
            mean: vec![1.0],
            var: vec![3.0],
        };
        s.update_running(&[("bn".into(), stats)]).unwrap();
        assert!((s.buffers["bn.running_mean"].data()[0] - 0.1).abs() < 1e-15);
        assert!((s.buffers["bn.running_var"].data()[0] - 1.2).abs() < 1e-15);
    }
}
