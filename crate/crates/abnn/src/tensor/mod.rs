//! Dense tensors and reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: dense row-major storage, a per-forward
//! tape ([`Graph`]) that is consumed by a single [`Graph::backward`] call,
//! and exactly the operations the rest of the crate needs. Element type is
//! `f64` by default; `f32` is available through the same generic surface.

mod element;
mod gradcheck;
mod graph;
#[cfg(test)]
mod tests;

pub use element::Element;
pub use gradcheck::finite_diff_check;
pub use graph::{Graph, Var};

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("non-finite values detected in {context}")]
    NonFinite { context: String },
    #[error("empty tensor passed to {op}")]
    Empty { op: &'static str },
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

/// Dense n-dimensional array. A scalar has the empty shape `[]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element = f64> {
    shape: Vec<usize>,
    data: Vec<E>,
    pub requires_grad: bool,
    pub grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(data: Vec<E>, shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![E::ZERO; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: E) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: E) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> E {
        assert!(self.is_scalar(), "item() on non-scalar tensor {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major offset of a 4-D index.
    pub fn idx4(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert_eq!(self.shape.len(), 4);
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Tensor<E> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }
}

impl Tensor<f64> {
    /// Uniform values in `[lo, hi)`, deterministic for a given rng state.
    pub fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }
}

/// A named, trainable (or frozen) tensor owned by a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Parameter<E: Element = f64> {
    pub name: String,
    pub value: Tensor<E>,
    pub frozen: bool,
}

impl<E: Element> Parameter<E> {
    pub fn new(name: impl Into<String>, value: Tensor<E>) -> Self {
        Parameter { name: name.into(), value: value.with_grad(), frozen: false }
    }

    pub fn zero_grad(&mut self) {
        self.value.grad = None;
    }
}

/// Handle to a parameter inside its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

static STORE_IDS: AtomicU64 = AtomicU64::new(1);

/// Ordered collection of parameters for one model.
///
/// Stores carry a process-unique identity so that gradients recorded on a
/// graph that mixes several models can be scattered back unambiguously.
#[derive(Debug, Clone)]
pub struct ParamStore<E: Element = f64> {
    pub(crate) store_id: u64,
    params: Vec<Parameter<E>>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore { store_id: STORE_IDS.fetch_add(1, Ordering::Relaxed), params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        let id = ParamId(self.params.len());
        self.params.push(Parameter::new(name, value));
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter<E> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<E> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<E>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<E>> {
        self.params.iter_mut()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
            p.value.grad = None;
        }
    }

    pub fn all_frozen(&self) -> bool {
        !self.params.is_empty() && self.params.iter().all(|p| p.frozen)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.grad = None;
        }
    }

    /// Accumulate gradients recorded on `graph` into the owned parameters.
    /// Frozen parameters are skipped.
    pub fn absorb_grads(&mut self, graph: &Graph<E>) {
        for (store_id, pid, var) in graph.param_bindings() {
            if *store_id != self.store_id {
                continue;
            }
            let param = &mut self.params[pid.0];
            if param.frozen {
                continue;
            }
            let Some(g) = graph.grad(*var) else { continue };
            let numel = param.value.numel();
            let buf = param.value.grad.get_or_insert_with(|| vec![E::ZERO; numel]);
            for (a, b) in buf.iter_mut().zip(g) {
                *a = *a + *b;
            }
        }
    }
}

impl ParamStore<f64> {
    /// SHA-256 digest over names, shapes, frozen flags, and exact bit patterns.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            hasher.update([p.frozen as u8]);
            hasher.update((p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                hasher.update((d as u32).to_le_bytes());
            }
            for &v in p.value.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}
