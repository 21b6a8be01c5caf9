//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable, reference-counted node. Operations executed
//! while gradient recording is enabled keep a link to their inputs together
//! with a backward rule; [`backward`] replays those links in reverse creation
//! order. Node ids grow monotonically, so creation order is a topological
//! order of the graph.
//!
//! Learnable weights live in [`Param`] slots, which hand out the current leaf
//! tensor and let optimizers swap in an updated one.

mod autograd;
pub mod gradcheck;
pub mod instrument;
mod nn;
mod ops;

use std::cell::Cell;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

pub use autograd::{backward, Tape};
pub use instrument::{measure, Buffer, InstrumentationStats};
pub use nn::{attention_flops, gelu_scalar, sigmoid_scalar, Activation, NormAxis};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording operations; intermediates are freed as soon as
/// they go out of scope.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(Cell::get)
}

/// Gradients of the parents of one node, `None` where the parent needs none.
pub(crate) type ParentGrads = Vec<Option<Vec<f64>>>;

/// Inputs handed to a backward rule.
pub(crate) struct BackwardCtx<'a> {
    pub grad_out: &'a [f64],
    pub out: &'a [f64],
    pub parents: &'a [Tensor],
    pub needs: &'a [bool],
}

type BackwardFn = dyn Fn(&BackwardCtx<'_>) -> ParentGrads + Send + Sync;

pub(crate) struct GradFn {
    pub name: &'static str,
    pub parents: Vec<Tensor>,
    pub rule: Box<BackwardFn>,
}

pub(crate) struct Node {
    pub id: u64,
    pub shape: Vec<usize>,
    pub data: Buffer,
    pub requires_grad: bool,
    pub grad: Mutex<Option<Buffer>>,
    pub grad_fn: Option<GradFn>,
}

/// An n-dimensional row-major array of f64 values.
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Node>);

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::Input(format!("shape {shape:?} has a zero extent")));
    }
    if shape.iter().product::<usize>() != len {
        return Err(Error::Input(format!(
            "shape {shape:?} needs {} elements, got {len}",
            shape.iter().product::<usize>()
        )));
    }
    Ok(())
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Buffer, requires_grad: bool, grad_fn: Option<GradFn>) -> Self {
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            grad_fn,
        }))
    }

    /// Constant tensor (no gradient).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), Buffer::new(data), false, None))
    }

    /// Leaf tensor whose gradient is accumulated by [`backward`].
    pub fn leaf(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), Buffer::new(data), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![0.0; n]).expect("zeros: invalid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n]).expect("full: invalid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(&[1], vec![value]).expect("scalar")
    }

    /// Builds an operation result. Records the backward rule only when some
    /// parent needs a gradient and recording is enabled.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Buffer,
        parents: &[&Tensor],
        rule: impl Fn(&BackwardCtx<'_>) -> ParentGrads + Send + Sync + 'static,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "{name}");
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        let grad_fn = track.then(|| GradFn {
            name,
            parents: parents.iter().map(|&p| p.clone()).collect(),
            rule: Box::new(rule),
        });
        Self::build(shape, data, track, grad_fn)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    /// Accumulated gradient, present after [`backward`] reached this leaf.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().unwrap().as_ref().map(|g| g.to_vec())
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().unwrap() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock().unwrap();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(Buffer::new(g.to_vec())),
        }
    }

    /// Same values, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data[0]
    }

    pub fn rows(&self) -> usize {
        self.0.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.0.shape[self.0.shape.len() - 1]
    }

    pub(crate) fn expect_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    /// Element `[i, j]` of a matrix.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.0.data[i * self.cols() + j]
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

/// A named, replaceable slot holding a learnable leaf tensor.
///
/// Clones share the slot, so an optimizer updating one clone updates every
/// module holding it.
#[derive(Clone)]
pub struct Param {
    name: Arc<str>,
    slot: Arc<RwLock<Tensor>>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let name: String = name.into();
        Ok(Param {
            name: name.into(),
            slot: Arc::new(RwLock::new(Tensor::leaf(shape, data)?)),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The current leaf tensor.
    pub fn value(&self) -> Tensor {
        self.slot.read().unwrap().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.slot.read().unwrap().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.slot.read().unwrap().numel()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.slot.read().unwrap().grad()
    }

    pub fn zero_grad(&self) {
        self.slot.read().unwrap().zero_grad();
    }

    /// Replaces the stored values (and discards any gradient).
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let mut slot = self.slot.write().unwrap();
        let shape = slot.shape().to_vec();
        *slot = Tensor::leaf(&shape, data)?;
        Ok(())
    }

    /// True when both handles point at the same slot.
    pub fn same_slot(&self, other: &Param) -> bool {
        Arc::ptr_eq(&self.slot, &other.slot)
    }
}

impl fmt::Debug for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Param({}, {:?})", self.name, self.shape())
    }
}

/// Anything owning learnable parameters.
pub trait Module {
    fn parameters(&self) -> Vec<Param>;

    /// Parameter count with shared slots counted once.
    fn num_params(&self) -> usize {
        let mut seen: Vec<Param> = Vec::new();
        for p in self.parameters() {
            if !seen.iter().any(|q| q.same_slot(&p)) {
                seen.push(p);
            }
        }
        seen.iter().map(Param::numel).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[0, 3], vec![]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn ids_increase() {
        let a = Tensor::zeros(&[1]);
        let b = Tensor::zeros(&[1]);
        assert!(b.id() > a.id());
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = Tensor::leaf(&[2], vec![1.0, 2.0]).unwrap();
        let y = no_grad(|| x.scale(2.0));
        assert!(!y.requires_grad());
        assert!(y.is_leaf());
        let z = x.scale(2.0);
        assert!(z.requires_grad());
    }

    #[test]
    fn shared_params_counted_once() {
        struct Tied(Param, Param);
        impl Module for Tied {
            fn parameters(&self) -> Vec<Param> {
                vec![self.0.clone(), self.1.clone()]
            }
        }
        let p = Param::new("w", &[3, 2], vec![0.0; 6]).unwrap();
        assert_eq!(Tied(p.clone(), p).num_params(), 6);
    }
}
