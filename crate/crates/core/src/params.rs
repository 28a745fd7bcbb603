//! Named parameter storage shared by the model, optimizer, and checkpoints.
//!
//! Parameters live in a flat [`ParamStore`]; model layouts hold [`ParamId`]
//! handles into it. During a forward pass a [`Binding`] registers each used
//! parameter on the tape once; after backward, gradients are collected in
//! store order with zeros for parameters the loss never touched.

use crate::rng::StreamRng;
use crate::tape::{BufId, Tape};
use crate::tensor::Tensor;

/// Handle to one named tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Flat store of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total scalar parameter count.
    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Flatten every tensor's data into one vector (store order).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }
}

/// Deterministic parameter initializers, keyed by parameter name so values
/// do not depend on construction order.
pub struct Init {
    seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { seed }
    }

    fn stream(&self, name: &str) -> StreamRng {
        StreamRng::new(self.seed, &format!("init/{name}"))
    }

    /// Glorot-uniform matrix (fan_in rows, fan_out cols).
    pub fn glorot(&self, name: &str, fan_in: usize, fan_out: usize) -> Tensor {
        let r = self.stream(name);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|i| (2.0 * r.uniform(0, i as u64) - 1.0) * limit)
            .collect();
        Tensor::new(vec![fan_in, fan_out], data)
    }

    /// N(0, 0.02) embedding-style matrix.
    pub fn embedding(&self, name: &str, rows: usize, cols: usize) -> Tensor {
        let r = self.stream(name);
        let data: Vec<f64> = (0..rows * cols).map(|i| 0.02 * r.normal(0, i as u64)).collect();
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros_vec(&self, n: usize) -> Tensor {
        Tensor::new(vec![n], vec![0.0; n])
    }

    pub fn ones_vec(&self, n: usize) -> Tensor {
        Tensor::new(vec![n], vec![1.0; n])
    }
}

/// Per-forward map from [`ParamId`] to tape buffer, registering lazily.
pub struct Binding {
    bound: Vec<Option<BufId>>,
}

impl Binding {
    pub fn new(store: &ParamStore) -> Self {
        Binding { bound: vec![None; store.len()] }
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> BufId {
        if let Some(buf) = self.bound[id.0] {
            return buf;
        }
        let buf = tape.leaf(store.get(id));
        self.bound[id.0] = Some(buf);
        buf
    }

    /// Gradients for every parameter in store order; zeros where the
    /// parameter was never bound or never reached by the loss.
    pub fn collect_grads(&self, tape: &Tape, store: &ParamStore) -> Vec<Vec<f64>> {
        (0..store.len())
            .map(|i| match self.bound[i] {
                Some(buf) => tape.grad_or_zeros(buf),
                None => vec![0.0; store.get(ParamId(i)).numel()],
            })
            .collect()
    }
}
