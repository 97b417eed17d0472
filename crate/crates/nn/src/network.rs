use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{NnError, Result};
use crate::layers::{backward_seq, forward_seq, infer_seq, Cache, Layer, Mode, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Activation caches recorded by [`Network::forward`].
#[derive(Clone, Debug)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
    fingerprint: String,
}

/// Named copy of every persistent tensor of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct StateDict<T> {
    pub fingerprint: String,
    pub tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> StateDict<T> {
    /// Largest absolute elementwise difference over all shared keys; errors on
    /// key or shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.tensors.len() != other.tensors.len() {
            return Err(NnError::Shape("state dicts have different key sets".into()));
        }
        let mut worst = T::zero();
        for (k, a) in &self.tensors {
            let b = other.tensors.get(k).ok_or_else(|| NnError::MissingTensor(k.clone()))?;
            worst = worst.max(a.max_abs_diff(b)?);
        }
        Ok(worst)
    }

    /// Euclidean distance between the flattened parameter vectors.
    pub fn distance(&self, other: &Self) -> Result<T> {
        let mut acc = T::zero();
        for (k, a) in &self.tensors {
            let b = other.tensors.get(k).ok_or_else(|| NnError::MissingTensor(k.clone()))?;
            acc += a.sub(b)?.sq_norm();
        }
        Ok(acc.sqrt())
    }
}

/// A sequential stack of layers.
#[derive(Clone, Debug)]
pub struct Network<T> {
    label: String,
    layers: Vec<Layer<T>>,
    frozen: bool,
}

impl<T: Scalar> Network<T> {
    pub fn new(label: impl Into<String>, layers: Vec<Layer<T>>) -> Self {
        Self { label: label.into(), layers, frozen: false }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// Frozen networks never accumulate parameter gradients and are skipped
    /// by optimizers.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tape<T>)> {
        let mode = if self.frozen { Mode::Eval } else { mode };
        let (y, caches) = forward_seq(&mut self.layers, x, mode)?;
        Ok((y, Tape { caches, fingerprint: self.fingerprint() }))
    }

    /// Evaluation-mode forward pass without caching.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        infer_seq(&self.layers, x)
    }

    /// Evaluation-mode forward over `x` in chunks of `batch` samples.
    pub fn infer_batched(&self, x: &Tensor<T>, batch: usize) -> Result<Tensor<T>> {
        let n = x.rows();
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + batch.max(1)).min(n);
            let idx: Vec<usize> = (start..end).collect();
            parts.push(self.infer(&x.select_rows(&idx))?);
            start = end;
        }
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::concat_rows(&refs)
    }

    /// Backpropagates `grad` and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, tape: &Tape<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_tape(tape)?;
        let acc = !self.frozen;
        backward_seq(&mut self.layers, &tape.caches, grad, acc, true)
    }

    /// Backpropagates `grad` into parameter gradients only.
    pub fn backward_params(&mut self, tape: &Tape<T>, grad: &Tensor<T>) -> Result<()> {
        self.check_tape(tape)?;
        if self.frozen {
            return Ok(());
        }
        backward_seq(&mut self.layers, &tape.caches, grad, true, false)?;
        Ok(())
    }

    fn check_tape(&self, tape: &Tape<T>) -> Result<()> {
        let fp = self.fingerprint();
        if tape.fingerprint != fp {
            return Err(NnError::Fingerprint { expected: fp, found: tape.fingerprint.clone() });
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, p| p.grad.fill(T::zero()));
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params_mut(&format!("layers.{i}"), f);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        let mut clone = self.clone();
        clone.visit_params_mut(&mut |_, p| n += p.value.numel());
        n
    }

    /// Sum of squared parameter gradients.
    pub fn grad_sq_norm(&mut self) -> T {
        let mut acc = T::zero();
        self.visit_params_mut(&mut |_, p| acc += p.grad.sq_norm());
        acc
    }

    /// Hash of the label and the layer structure. Networks with equal
    /// fingerprints can exchange state.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.label.as_bytes());
        h.update(T::DTYPE.as_bytes());
        for layer in &self.layers {
            h.update(layer.describe().as_bytes());
            h.update(b";");
        }
        hex::encode(&h.finalize()[..12])
    }

    pub fn state_dict(&self) -> StateDict<T> {
        let mut tensors = BTreeMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_state(&format!("layers.{i}"), &mut |name, t| {
                tensors.insert(name.to_string(), t.clone());
            });
        }
        StateDict { fingerprint: self.fingerprint(), tensors }
    }

    pub fn load_state_dict(&mut self, state: &StateDict<T>) -> Result<()> {
        let fp = self.fingerprint();
        if state.fingerprint != fp {
            return Err(NnError::Fingerprint { expected: fp, found: state.fingerprint.clone() });
        }
        let mut missing = None;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_state_mut(&format!("layers.{i}"), &mut |name, t| match state.tensors.get(name) {
                Some(src) if src.shape() == t.shape() => t.data_mut().copy_from_slice(src.data()),
                _ => {
                    missing.get_or_insert_with(|| name.to_string());
                }
            });
        }
        match missing {
            Some(name) => Err(NnError::MissingTensor(name)),
            None => Ok(()),
        }
    }
}
