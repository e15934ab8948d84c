//! Dense tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: row-major `Vec`-backed storage, a
//! handful of operations sufficient for a BERT-style encoder, and a tape-free
//! graph where every result tensor records the closure that propagates its
//! gradient back to its inputs. Graphs are acyclic by construction (an
//! operation can only reference tensors that already exist).
//!
//! Precision: training arithmetic is `f32`; the gradient-check harness in
//! [`check`] runs the identical generic kernels in `f64`.

mod autograd;
mod check;
mod linalg;
mod nn;
mod scalar;

pub use check::{grad_check, DEFAULT_EPS};
pub use scalar::Scalar;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use autograd::{BackwardFn, Node};

/// Sentinel label meaning "this position contributes neither loss nor
/// gradient". Never a valid class id.
pub const NO_LABEL: i64 = -1;

/// Errors produced by tensor construction and operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// A constructor or reduction received an unusable shape.
    InvalidShape(String),
    /// Two operands cannot be combined under the supported broadcast rules.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// An integer id exceeded the table or class bound.
    IndexOutOfRange { index: i64, bound: usize },
    /// Non-finite values where finite ones are required.
    NumericError(String),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::InvalidShape(msg) => write!(f, "invalid shape: {msg}"),
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "shape mismatch in {op}: {left:?} vs {right:?}")
            }
            TensorError::IndexOutOfRange { index, bound } => {
                write!(f, "index {index} out of range (bound {bound})")
            }
            TensorError::NumericError(msg) => write!(f, "numeric error: {msg}"),
        }
    }
}

impl std::error::Error for TensorError {}

pub type TensorResult<T> = Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: Cell<bool>,
    node: Option<Node<S>>,
}

/// Shared handle to a dense row-major tensor.
///
/// Cloning is cheap (reference count bump). Data is immutable after
/// creation except for gradient accumulation and explicit parameter
/// updates via [`Tensor::data_mut`].
pub struct Tensor<S: Scalar = f32> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> TensorResult<usize> {
    if shape.is_empty() {
        return Err(TensorError::InvalidShape("empty shape".into()));
    }
    let mut n = 1usize;
    for &d in shape {
        if d == 0 {
            return Err(TensorError::InvalidShape(format!(
                "zero dimension in {shape:?}"
            )));
        }
        n = n
            .checked_mul(d)
            .ok_or_else(|| TensorError::InvalidShape(format!("overflow in {shape:?}")))?;
    }
    Ok(n)
}

impl<S: Scalar> Tensor<S> {
    fn leaf(shape: Vec<usize>, data: Vec<S>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
                node: None,
            }),
        }
    }

    /// Result tensor produced by an operation. Records provenance only when
    /// some input participates in gradient computation.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        inputs: Vec<Tensor<S>>,
        backward: BackwardFn<S>,
    ) -> Self {
        let needs_grad = inputs.iter().any(|t| t.requires_grad());
        if !needs_grad {
            return Tensor::leaf(shape, data);
        }
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(true),
                node: Some(Node { inputs, backward }),
            }),
        }
    }

    /// New tensor from explicit contents.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> TensorResult<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(TensorError::InvalidShape(format!(
                "shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor::leaf(shape.to_vec(), data))
    }

    /// Zero-filled tensor.
    pub fn zeros(shape: &[usize]) -> TensorResult<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor::leaf(shape.to_vec(), vec![S::ZERO; n]))
    }

    /// Constant-filled tensor.
    pub fn constant(shape: &[usize], value: S) -> TensorResult<Self> {
        let n = check_shape(shape)?;
        Ok(Tensor::leaf(shape.to_vec(), vec![value; n]))
    }

    /// Uniform fill over `[lo, hi)`, deterministic for a given seed.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> TensorResult<Self> {
        let n = check_shape(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n)
            .map(|_| S::from_f64(lo + (hi - lo) * rng.gen::<f64>()))
            .collect();
        Ok(Tensor::leaf(shape.to_vec(), data))
    }

    /// Normal fill, deterministic for a given seed.
    pub fn normal(shape: &[usize], mean: f64, std: f64, seed: u64) -> TensorResult<Self> {
        let n = check_shape(shape)?;
        let dist = Normal::new(mean, std)
            .map_err(|e| TensorError::InvalidShape(format!("bad normal parameters: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n).map(|_| S::from_f64(dist.sample(&mut rng))).collect();
        Ok(Tensor::leaf(shape.to_vec(), data))
    }

    /// Scalar (single-element) tensor.
    pub fn scalar(value: S) -> Self {
        Tensor::leaf(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    pub(crate) fn node(&self) -> Option<&Node<S>> {
        self.inner.node.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    /// Marks a leaf tensor as a differentiation target.
    pub fn set_requires_grad(&self, value: bool) {
        self.inner.requires_grad.set(value);
    }

    /// Builder-style variant of [`Tensor::set_requires_grad`].
    pub fn trainable(self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the raw buffer, for optimizer updates between
    /// steps and for the finite-difference harness. Must not be called
    /// while a graph built on this tensor is still alive and in use.
    pub fn data_mut(&self) -> RefMut<'_, Vec<S>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> TensorResult<S> {
        if self.numel() != 1 {
            return Err(TensorError::InvalidShape(format!(
                "item() on shape {:?}",
                self.shape()
            )));
        }
        Ok(self.inner.data.borrow()[0])
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    /// Clears the accumulated gradient.
    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, contribution: &[S]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (g, c) in buf.iter_mut().zip(contribution) {
                    *g += *c;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Detached copy converted to another precision. Keeps the
    /// `requires_grad` flag but drops any provenance.
    pub fn to_precision<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .inner
            .data
            .borrow()
            .iter()
            .map(|&v| T::from_f64(v.to_f64()))
            .collect();
        let t = Tensor::leaf(self.inner.shape.clone(), data);
        t.set_requires_grad(self.requires_grad());
        t
    }

    /// Same data viewed under a different shape (element count preserved).
    pub fn reshape(&self, shape: &[usize]) -> TensorResult<Tensor<S>> {
        let n = check_shape(shape)?;
        if n != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = self.to_vec();
        let in_shape = self.shape().to_vec();
        Ok(Tensor::from_op(
            shape.to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |grads, out_grad, _out, inputs| {
                let _ = &in_shape;
                grads.add(&inputs[0], out_grad);
            }),
        ))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&self, factor: S) -> Tensor<S> {
        let data = self.data().iter().map(|&v| v * factor).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |grads, out_grad, _out, inputs| {
                if inputs[0].requires_grad() {
                    let contrib: Vec<S> = out_grad.iter().map(|&g| g * factor).collect();
                    grads.add(&inputs[0], &contrib);
                }
            }),
        )
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&self) -> Tensor<S> {
        let total = self.data().iter().copied().sum();
        Tensor::from_op(
            vec![1],
            vec![total],
            vec![self.clone()],
            Box::new(move |grads, out_grad, _out, inputs| {
                if inputs[0].requires_grad() {
                    let g = out_grad[0];
                    let contrib = vec![g; inputs[0].numel()];
                    grads.add(&inputs[0], &contrib);
                }
            }),
        )
    }

    /// Swaps axes 1 and 2 of a 4-D tensor (`[a,b,c,d] -> [a,c,b,d]`).
    pub fn swap_axes_1_2(&self) -> TensorResult<Tensor<S>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::InvalidShape(format!(
                "swap_axes_1_2 needs a 4-D tensor, got {s:?}"
            )));
        }
        let (a, b, c, d) = (s[0], s[1], s[2], s[3]);
        let data = permute_1_2(&self.data(), a, b, c, d);
        Ok(Tensor::from_op(
            vec![a, c, b, d],
            data,
            vec![self.clone()],
            Box::new(move |grads, out_grad, _out, inputs| {
                if inputs[0].requires_grad() {
                    // the permutation is an involution on the swapped shape
                    let contrib = permute_1_2(out_grad, a, c, b, d);
                    grads.add(&inputs[0], &contrib);
                }
            }),
        ))
    }

    /// Extracts position `t` along the sequence axis of a `[B,T,H]` tensor.
    pub fn select_token(&self, t: usize) -> TensorResult<Tensor<S>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(TensorError::InvalidShape(format!(
                "select_token needs a 3-D tensor, got {s:?}"
            )));
        }
        let (bsz, seq, hid) = (s[0], s[1], s[2]);
        if t >= seq {
            return Err(TensorError::IndexOutOfRange {
                index: t as i64,
                bound: seq,
            });
        }
        let src = self.data();
        let mut data = Vec::with_capacity(bsz * hid);
        for b in 0..bsz {
            let base = (b * seq + t) * hid;
            data.extend_from_slice(&src[base..base + hid]);
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![bsz, hid],
            data,
            vec![self.clone()],
            Box::new(move |grads, out_grad, _out, inputs| {
                if inputs[0].requires_grad() {
                    let mut contrib = vec![S::ZERO; bsz * seq * hid];
                    for b in 0..bsz {
                        let base = (b * seq + t) * hid;
                        contrib[base..base + hid]
                            .copy_from_slice(&out_grad[b * hid..(b + 1) * hid]);
                    }
                    grads.add(&inputs[0], &contrib);
                }
            }),
        ))
    }
}

fn permute_1_2<S: Scalar>(data: &[S], a: usize, b: usize, c: usize, d: usize) -> Vec<S> {
    let mut out = vec![S::ZERO; data.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&data[src..src + d]);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Elementwise operations with trailing-dimension broadcast.
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Debug)]
enum Broadcast {
    Same,
    /// `b` matches a suffix of `a`'s shape; repeated over the leading dims.
    Suffix,
    /// `b` is a single element.
    Scalar,
}

fn broadcast_kind(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    if a == b {
        return Some(Broadcast::Same);
    }
    if b.iter().product::<usize>() == 1 {
        return Some(Broadcast::Scalar);
    }
    if b.len() < a.len() && a[a.len() - b.len()..] == *b {
        return Some(Broadcast::Suffix);
    }
    None
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
        }
    }

    fn apply<S: Scalar>(self, x: S, y: S) -> S {
        match self {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
        }
    }
}

impl<S: Scalar> Tensor<S> {
    fn binary(&self, other: &Tensor<S>, op: BinOp) -> TensorResult<Tensor<S>> {
        let kind = broadcast_kind(self.shape(), other.shape()).ok_or_else(|| {
            TensorError::ShapeMismatch {
                op: op.name(),
                left: self.shape().to_vec(),
                right: other.shape().to_vec(),
            }
        })?;
        let a = self.data();
        let b = other.data();
        let n = a.len();
        let bn = b.len();
        let mut data = Vec::with_capacity(n);
        match kind {
            Broadcast::Same => {
                for i in 0..n {
                    data.push(op.apply(a[i], b[i]));
                }
            }
            Broadcast::Scalar => {
                let y = b[0];
                for i in 0..n {
                    data.push(op.apply(a[i], y));
                }
            }
            Broadcast::Suffix => {
                for (i, &x) in a.iter().enumerate() {
                    data.push(op.apply(x, b[i % bn]));
                }
            }
        }
        drop(a);
        drop(b);
        let out_shape = self.shape().to_vec();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |grads, out_grad, _out, inputs| {
                let (lhs, rhs) = (&inputs[0], &inputs[1]);
                if lhs.requires_grad() {
                    match op {
                        BinOp::Add | BinOp::Sub => grads.add(lhs, out_grad),
                        BinOp::Mul => {
                            let b = rhs.data();
                            let bn = b.len();
                            let contrib: Vec<S> = match kind {
                                Broadcast::Same => out_grad
                                    .iter()
                                    .zip(b.iter())
                                    .map(|(&g, &y)| g * y)
                                    .collect(),
                                Broadcast::Scalar => {
                                    out_grad.iter().map(|&g| g * b[0]).collect()
                                }
                                Broadcast::Suffix => out_grad
                                    .iter()
                                    .enumerate()
                                    .map(|(i, &g)| g * b[i % bn])
                                    .collect(),
                            };
                            grads.add(lhs, &contrib);
                        }
                    }
                }
                if rhs.requires_grad() {
                    let bn = rhs.numel();
                    let mut contrib = vec![S::ZERO; bn];
                    match op {
                        BinOp::Add => match kind {
                            Broadcast::Same => contrib.copy_from_slice(out_grad),
                            _ => {
                                for (i, &g) in out_grad.iter().enumerate() {
                                    contrib[i % bn] += g;
                                }
                            }
                        },
                        BinOp::Sub => match kind {
                            Broadcast::Same => {
                                for (c, &g) in contrib.iter_mut().zip(out_grad) {
                                    *c = -g;
                                }
                            }
                            _ => {
                                for (i, &g) in out_grad.iter().enumerate() {
                                    contrib[i % bn] += -g;
                                }
                            }
                        },
                        BinOp::Mul => {
                            let a = lhs.data();
                            for (i, &g) in out_grad.iter().enumerate() {
                                contrib[i % bn] += g * a[i];
                            }
                        }
                    }
                    grads.add(rhs, &contrib);
                }
            }),
        ))
    }

    /// Elementwise sum; `other` may broadcast over trailing dimensions.
    pub fn add(&self, other: &Tensor<S>) -> TensorResult<Tensor<S>> {
        self.binary(other, BinOp::Add)
    }

    /// Elementwise difference; `other` may broadcast over trailing dimensions.
    pub fn sub(&self, other: &Tensor<S>) -> TensorResult<Tensor<S>> {
        self.binary(other, BinOp::Sub)
    }

    /// Elementwise product; `other` may broadcast over trailing dimensions.
    pub fn mul(&self, other: &Tensor<S>) -> TensorResult<Tensor<S>> {
        self.binary(other, BinOp::Mul)
    }
}

// ---------------------------------------------------------------------------
// Integer id tensors (token / position / segment ids).
// ---------------------------------------------------------------------------

/// Dense matrix of integer ids used for embedding lookups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdTensor {
    shape: Vec<usize>,
    data: Vec<u32>,
}

impl IdTensor {
    pub fn new(shape: &[usize], data: Vec<u32>) -> TensorResult<Self> {
        let n = check_shape(shape)?;
        if n != data.len() {
            return Err(TensorError::InvalidShape(format!(
                "shape {shape:?} implies {n} ids, got {}",
                data.len()
            )));
        }
        Ok(IdTensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_zeros_and_constant() {
        let z = Tensor::<f32>::zeros(&[2, 2]).unwrap();
        assert_eq!(z.to_vec(), vec![0.0; 4]);
        let c = Tensor::<f32>::constant(&[3], 1.5).unwrap();
        assert_eq!(c.to_vec(), vec![1.5, 1.5, 1.5]);
    }

    #[test]
    fn create_rejects_bad_shapes() {
        assert!(matches!(
            Tensor::<f32>::zeros(&[]),
            Err(TensorError::InvalidShape(_))
        ));
        assert!(matches!(
            Tensor::<f32>::zeros(&[2, 0]),
            Err(TensorError::InvalidShape(_))
        ));
    }

    #[test]
    fn seeded_fills_are_bitwise_deterministic() {
        let a = Tensor::<f32>::uniform(&[4], -1.0, 1.0, 7).unwrap();
        let b = Tensor::<f32>::uniform(&[4], -1.0, 1.0, 7).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        let c = Tensor::<f32>::normal(&[16], 0.0, 0.02, 11).unwrap();
        let d = Tensor::<f32>::normal(&[16], 0.0, 0.02, 11).unwrap();
        assert_eq!(c.to_vec(), d.to_vec());
        let e = Tensor::<f32>::uniform(&[4], -1.0, 1.0, 8).unwrap();
        assert_ne!(a.to_vec(), e.to_vec());
    }

    #[test]
    fn uniform_respects_bounds() {
        let t = Tensor::<f32>::uniform(&[1000], -1.0, 1.0, 3).unwrap();
        assert!(t.to_vec().iter().all(|&v| (-1.0..1.0).contains(&v)));
    }

    #[test]
    fn elementwise_hand_values() {
        let a = Tensor::<f32>::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![4.0, 6.0]);

        let x = Tensor::<f32>::from_vec(&[2], vec![5.0, 5.0]).unwrap();
        let y = Tensor::<f32>::from_vec(&[2], vec![2.0, 3.0]).unwrap();
        assert_eq!(x.sub(&y).unwrap().to_vec(), vec![3.0, 2.0]);

        let m = Tensor::<f32>::from_vec(&[2], vec![2.0, 3.0]).unwrap();
        let zero = Tensor::<f32>::scalar(0.0);
        assert_eq!(m.mul(&zero).unwrap().to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn elementwise_rejects_non_broadcastable() {
        let a = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[2]).unwrap();
        assert!(matches!(
            a.add(&b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn suffix_broadcast_add_bias() {
        let a = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bias = Tensor::<f32>::from_vec(&[2], vec![10.0, 20.0]).unwrap();
        assert_eq!(
            a.add(&bias).unwrap().to_vec(),
            vec![11.0, 22.0, 13.0, 24.0]
        );
    }

    #[test]
    fn swap_axes_roundtrip() {
        let t = Tensor::<f32>::uniform(&[2, 3, 4, 5], -1.0, 1.0, 1).unwrap();
        let back = t.swap_axes_1_2().unwrap().swap_axes_1_2().unwrap();
        assert_eq!(t.to_vec(), back.to_vec());
    }

    #[test]
    fn select_token_picks_position() {
        let t = Tensor::<f32>::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.select_token(0).unwrap().to_vec(), vec![1.0, 2.0]);
        assert_eq!(t.select_token(1).unwrap().to_vec(), vec![3.0, 4.0]);
        assert!(t.select_token(2).is_err());
    }
}
