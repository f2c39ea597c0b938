//! Dense 1-D/2-D tensors with reverse-mode automatic differentiation.
//!
//! The computation graph is built eagerly during the forward pass: every op
//! that touches a `requires_grad` input records a backward closure on its
//! output node. [`Tensor::backward`] walks the recorded graph once, in a fixed
//! topological order (descending creation id), so repeated identical runs
//! accumulate gradients in exactly the same floating-point order and produce
//! bit-identical results. The graph is consumed by the backward pass and freed
//! when the loss tensor is dropped.
//!
//! Scalars default to `f64`; `f32` is selectable through the same generic
//! interface. Additive attention masks represent "minus infinity" with the
//! largest-magnitude negative finite value ([`mask_neg`]) so no NaN can leak
//! out of masked arithmetic; [`Tensor::softmax_rows`] maps such entries to an
//! exact zero weight.

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Scalar element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Floating-point element usable inside a [`Tensor`].
pub trait Element: Float + fmt::Debug + fmt::Display + Send + Sync + 'static {
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn widen_f64(self) -> f64;
    fn append_le_bytes(self, out: &mut Vec<u8>);
    fn from_le_slice(bytes: &[u8]) -> Self;
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn widen_f64(self) -> f64 {
        self
    }
    fn append_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte f64 payload"))
    }
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn widen_f64(self) -> f64 {
        f64::from(self)
    }
    fn append_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte f32 payload"))
    }
}

/// Additive-mask value standing in for minus infinity.
///
/// The largest-magnitude negative finite scalar: adding it to any reasonable
/// logit keeps the sum finite, and softmax treats anything at or below half
/// this value as fully masked.
pub fn mask_neg<E: Element>() -> E {
    E::min_value()
}

fn is_masked<E: Element>(v: E) -> bool {
    v <= E::min_value() * E::from_f64(0.5)
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("computation graph was already consumed by a previous backward pass")]
    GraphConsumed,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// Runs `f` with graph recording disabled on this thread. Ops inside the
/// closure produce constant tensors regardless of input `requires_grad`.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = NO_GRAD.with(|c| c.replace(true));
    let out = f();
    NO_GRAD.with(|c| c.set(prev));
    out
}

fn grad_enabled() -> bool {
    !NO_GRAD.with(|c| c.get())
}

type BackwardFn<E> = Box<dyn Fn(&[E])>;

struct Node<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<E>>>,
    parents: Vec<Tensor<E>>,
    backward: RefCell<Option<BackwardFn<E>>>,
}

/// A dense tensor and, implicitly, one node of the computation graph.
///
/// Cloning is cheap (reference-counted). Data is immutable during a
/// forward/backward round trip; leaves may be rewritten between optimizer
/// steps through [`Tensor::update_data`].
pub struct Tensor<E: Element = f64> {
    inner: Rc<Node<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Element> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<E>,
        requires_grad: bool,
        parents: Vec<Tensor<E>>,
        backward: Option<BackwardFn<E>>,
    ) -> Tensor<E> {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward: RefCell::new(backward),
            }),
        }
    }

    /// Constant (non-trainable) tensor.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Tensor<E>> {
        if numel(shape) != data.len() {
            return Err(TensorError::Invalid {
                op: "from_vec",
                msg: format!("shape {:?} wants {} elements, got {}", shape, numel(shape), data.len()),
            });
        }
        Ok(Self::new_node(shape.to_vec(), data, false, vec![], None))
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<E>) -> Result<Tensor<E>> {
        if numel(shape) != data.len() {
            return Err(TensorError::Invalid {
                op: "param",
                msg: format!("shape {:?} wants {} elements, got {}", shape, numel(shape), data.len()),
            });
        }
        Ok(Self::new_node(shape.to_vec(), data, true, vec![], None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor<E> {
        Self::new_node(shape.to_vec(), vec![E::zero(); numel(shape)], false, vec![], None)
    }

    pub fn zeros_param(shape: &[usize]) -> Tensor<E> {
        Tensor::param(shape, vec![E::zero(); numel(shape)]).expect("consistent shape")
    }

    pub fn full(shape: &[usize], v: E) -> Tensor<E> {
        Self::new_node(shape.to_vec(), vec![v; numel(shape)], false, vec![], None)
    }

    pub fn scalar(v: E) -> Tensor<E> {
        Self::full(&[1], v)
    }

    pub fn scalar_param(v: E) -> Tensor<E> {
        Tensor::param(&[1], vec![v]).expect("consistent shape")
    }

    /// Gaussian-initialized constant with standard deviation `std`.
    pub fn randn<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<E> {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                E::from_f64(z * std)
            })
            .collect();
        Self::new_node(shape.to_vec(), data, false, vec![], None)
    }

    /// Gaussian-initialized trainable leaf.
    pub fn randn_param<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<E> {
        let t = Self::randn(rng, shape, std);
        let data = t.inner.data.borrow().clone();
        Tensor::param(&t.inner.shape, data).expect("consistent shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        numel(&self.inner.shape)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> usize {
        self.inner.shape[0]
    }

    pub fn cols(&self) -> usize {
        *self.inner.shape.get(1).unwrap_or(&1)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    pub fn data_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.len(), 1);
        self.inner.data.borrow()[0]
    }

    /// In-place rewrite of leaf data (optimizer steps, test setups).
    /// Must not be called while a graph referencing this leaf is alive.
    pub fn update_data(&self, f: impl FnOnce(&mut [E])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, contrib: &[E]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi = *gi + *ci;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    fn same_shape(&self, other: &Tensor<E>, op: &'static str) -> Result<()> {
        if self.inner.shape != other.inner.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.inner.shape.clone(),
                rhs: other.inner.shape.clone(),
            });
        }
        Ok(())
    }

    /// Reverse-mode pass from a scalar loss. Populates `grad` on every
    /// reachable `requires_grad` leaf; the graph cannot be replayed.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(TensorError::NonScalarLoss(self.inner.shape.clone()));
        }
        if !self.inner.requires_grad {
            // Constant loss: nothing depends on any parameter.
            return Ok(());
        }
        if !self.inner.parents.is_empty() && self.inner.backward.borrow().is_none() {
            return Err(TensorError::GraphConsumed);
        }

        // Collect every grad-requiring node reachable through parent edges.
        let mut stack = vec![self.clone()];
        let mut seen = std::collections::HashSet::new();
        let mut nodes: Vec<Tensor<E>> = Vec::new();
        while let Some(t) = stack.pop() {
            if !seen.insert(t.inner.id) {
                continue;
            }
            for p in &t.inner.parents {
                if p.inner.requires_grad {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        // Creation order is a topological order: every op node is created
        // after its inputs, so descending id visits consumers first.
        nodes.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));

        self.accumulate_grad(&[E::one()]);
        for node in &nodes {
            let step = node.inner.backward.borrow_mut().take();
            if let Some(step) = step {
                let grad = node.inner.grad.borrow().clone();
                if let Some(grad) = grad {
                    step(&grad);
                }
            }
        }
        Ok(())
    }
}

fn out_flags<E: Element>(inputs: &[&Tensor<E>]) -> (bool, Vec<Tensor<E>>) {
    let req = grad_enabled() && inputs.iter().any(|t| t.inner.requires_grad);
    let parents = if req {
        inputs.iter().map(|t| (*t).clone()).collect()
    } else {
        vec![]
    };
    (req, parents)
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

impl<E: Element> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_shape(other, "add")?;
        let data: Vec<E> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| *x + *y).collect()
        };
        let (req, parents) = out_flags(&[self, other]);
        let backward: Option<BackwardFn<E>> = if req {
            let a = self.clone();
            let b = other.clone();
            Some(Box::new(move |g: &[E]| {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
                if b.requires_grad() {
                    b.accumulate_grad(g);
                }
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(self.inner.shape.clone(), data, req, parents, backward))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_shape(other, "sub")?;
        let data: Vec<E> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| *x - *y).collect()
        };
        let (req, parents) = out_flags(&[self, other]);
        let backward: Option<BackwardFn<E>> = if req {
            let a = self.clone();
            let b = other.clone();
            Some(Box::new(move |g: &[E]| {
                if a.requires_grad() {
                    a.accumulate_grad(g);
                }
                if b.requires_grad() {
                    let neg: Vec<E> = g.iter().map(|v| -*v).collect();
                    b.accumulate_grad(&neg);
                }
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(self.inner.shape.clone(), data, req, parents, backward))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.same_shape(other, "mul")?;
        let data: Vec<E> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| *x * *y).collect()
        };
        let (req, parents) = out_flags(&[self, other]);
        let backward: Option<BackwardFn<E>> = if req {
            let a = self.clone();
            let b = other.clone();
            Some(Box::new(move |g: &[E]| {
                if a.requires_grad() {
                    let bd = b.data();
                    let contrib: Vec<E> = g.iter().zip(bd.iter()).map(|(gi, bi)| *gi * *bi).collect();
                    a.accumulate_grad(&contrib);
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let contrib: Vec<E> = g.iter().zip(ad.iter()).map(|(gi, ai)| *gi * *ai).collect();
                    b.accumulate_grad(&contrib);
                }
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(self.inner.shape.clone(), data, req, parents, backward))
    }

    /// Multiply every element by a compile-time constant.
    pub fn scale(&self, c: E) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|x| *x * c).collect();
        let (req, parents) = out_flags(&[self]);
        let backward: Option<BackwardFn<E>> = if req {
            let a = self.clone();
            Some(Box::new(move |g: &[E]| {
                let contrib: Vec<E> = g.iter().map(|gi| *gi * c).collect();
                a.accumulate_grad(&contrib);
            }))
        } else {
            None
        };
        Tensor::new_node(self.inner.shape.clone(), data, req, parents, backward)
    }

    /// Multiply every element by a one-element tensor (e.g. a learned gate).
    pub fn mul_scalar(&self, s: &Tensor<E>) -> Result<Tensor<E>> {
        if s.len() != 1 {
            return Err(TensorError::Invalid {
                op: "mul_scalar",
                msg: format!("scale must be one element, got shape {:?}", s.shape()),
            });
        }
        let sv = s.item();
        let data: Vec<E> = self.data().iter().map(|x| *x * sv).collect();
        let (req, parents) = out_flags(&[self, s]);
        let backward: Option<BackwardFn<E>> = if req {
            let a = self.clone();
            let sc = s.clone();
            Some(Box::new(move |g: &[E]| {
                let sv = sc.item();
                if a.requires_grad() {
                    let contrib: Vec<E> = g.iter().map(|gi| *gi * sv).collect();
                    a.accumulate_grad(&contrib);
                }
                if sc.requires_grad() {
                    let ad = a.data();
                    let mut acc = E::zero();
                    for (gi, ai) in g.iter().zip(ad.iter()) {
                        acc = acc + *gi * *ai;
                    }
                    sc.accumulate_grad(&[acc]);
                }
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(self.inner.shape.clone(), data, req, parents, backward))
    }

    /// Scale row `i` by the constant `coeffs[i]`.
    pub fn scale_rows(&self, coeffs: &[E]) -> Result<Tensor<E>> {
        let (r, c) = (self.rows(), self.cols());
        if coeffs.len() != r {
            return Err(TensorError::Invalid {
                op: "scale_rows",
                msg: format!("{} coefficients for {} rows", coeffs.len(), r),
            });
        }
        let mut data = self.data_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = data[i * c + j] * coeffs[i];
            }
        }
        let (req, parents) = out_flags(&[self]);
        let backward: Option<BackwardFn<E>> = if req {
            let a = self.clone();
            let coeffs = coeffs.to_vec();
            Some(Box::new(move |g: &[E]| {
                let mut contrib = g.to_vec();
                for i in 0..r {
                    for j in 0..c {
                        contrib[i * c + j] = contrib[i * c + j] * coeffs[i];
                    }
                }
                a.accumulate_grad(&contrib);
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(self.inner.shape.clone(), data, req, parents, backward))
    }

    /// Scale column `j` by the constant `coeffs[j]`.
    pub fn scale_cols(&self, coeffs: &[E]) -> Result<Tensor<E>> {
        let (r, c) = (self.rows(), self.cols());
        if coeffs.len() != c {
            return Err(TensorError::Invalid {
                op: "scale_cols",
                msg: format!("{} coefficients for {} columns", coeffs.len(), c),
            });
        }
        let mut data = self.data_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = coeffs[j] * data[i * c + j];
            }
        }
        let (req, parents) = out_flags(&[self]);
        let backward: Option<BackwardFn<E>> = if req {
            let a = self.clone();
            let coeffs = coeffs.to_vec();
            Some(Box::new(move |g: &[E]| {
                let mut contrib = g.to_vec();
                for i in 0..r {
                    for j in 0..c {
                        contrib[i * c + j] = coeffs[j] * contrib[i * c + j];
                    }
                }
                a.accumulate_grad(&contrib);
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(self.inner.shape.clone(), data, req, parents, backward))
    }

    /// Smooth self-gated activation `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor<E> {
        fn sigmoid<E: Element>(x: E) -> E {
            if x >= E::zero() {
                E::one() / (E::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (E::one() + e)
            }
        }
        let data: Vec<E> = self.data().iter().map(|x| *x * sigmoid(*x)).collect();
        let (req, parents) = out_flags(&[self]);
        let backward: Option<BackwardFn<E>> = if req {
            let a = self.clone();
            Some(Box::new(move |g: &[E]| {
                let ad = a.data();
                let contrib: Vec<E> = g
                    .iter()
                    .zip(ad.iter())
                    .map(|(gi, xi)| {
                        let s = sigmoid(*xi);
                        *gi * (s * (E::one() + *xi * (E::one() - s)))
                    })
                    .collect();
                drop(ad);
                a.accumulate_grad(&contrib);
            }))
        } else {
            None
        };
        Tensor::new_node(self.inner.shape.clone(), data, req, parents, backward)
    }

    pub fn sum_all(&self) -> Tensor<E> {
        let mut acc = E::zero();
        for v in self.data().iter() {
            acc = acc + *v;
        }
        let (req, parents) = out_flags(&[self]);
        let backward: Option<BackwardFn<E>> = if req {
            let a = self.clone();
            let n = self.len();
            Some(Box::new(move |g: &[E]| {
                a.accumulate_grad(&vec![g[0]; n]);
            }))
        } else {
            None
        };
        Tensor::new_node(vec![1], vec![acc], req, parents, backward)
    }
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

fn matmul_raw<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    // i-t-j loop: the inner dim is accumulated in ascending order for every
    // output element, which keeps reductions deterministic.
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            let brow = &b[t * n..(t + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

fn matmul_nt_raw<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    // out[i][j] = dot(a row i, b row j), summed in ascending index order.
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for t in 0..k {
                acc = acc + arow[t] * brow[t];
            }
            out[i * n + j] = acc;
        }
    }
}

fn matmul_tn_raw<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    // out = aT @ b where a is (k, m): out[i][j] = sum_t a[t][i] * b[t][j]
    for t in 0..k {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

impl<E: Element> Tensor<E> {
    fn check_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.inner.shape.len() != 2 {
            return Err(TensorError::Invalid {
                op,
                msg: format!("expected a 2-D tensor, got shape {:?}", self.inner.shape),
            });
        }
        Ok((self.inner.shape[0], self.inner.shape[1]))
    }

    /// Standard matrix product `self @ other`.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, k) = self.check_2d("matmul")?;
        let (k2, n) = other.check_2d("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.inner.shape.clone(),
                rhs: other.inner.shape.clone(),
            });
        }
        let mut data = vec![E::zero(); m * n];
        matmul_raw(&self.data(), &other.data(), m, k, n, &mut data);
        let (req, parents) = out_flags(&[self, other]);
        let backward: Option<BackwardFn<E>> = if req {
            let a = self.clone();
            let b = other.clone();
            Some(Box::new(move |g: &[E]| {
                if a.requires_grad() {
                    // dA = g @ bT
                    let mut contrib = vec![E::zero(); m * k];
                    matmul_nt_raw(g, &b.data(), m, n, k, &mut contrib);
                    a.accumulate_grad(&contrib);
                }
                if b.requires_grad() {
                    // dB = aT @ g
                    let mut contrib = vec![E::zero(); k * n];
                    matmul_tn_raw(&a.data(), g, k, m, n, &mut contrib);
                    b.accumulate_grad(&contrib);
                }
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(vec![m, n], data, req, parents, backward))
    }

    /// `self @ other.T` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, k) = self.check_2d("matmul_nt")?;
        let (n, k2) = other.check_2d("matmul_nt")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_nt",
                lhs: self.inner.shape.clone(),
                rhs: other.inner.shape.clone(),
            });
        }
        let mut data = vec![E::zero(); m * n];
        matmul_nt_raw(&self.data(), &other.data(), m, k, n, &mut data);
        let (req, parents) = out_flags(&[self, other]);
        let backward: Option<BackwardFn<E>> = if req {
            let a = self.clone();
            let b = other.clone();
            Some(Box::new(move |g: &[E]| {
                if a.requires_grad() {
                    // dA = g @ b
                    let mut contrib = vec![E::zero(); m * k];
                    matmul_raw(g, &b.data(), m, n, k, &mut contrib);
                    a.accumulate_grad(&contrib);
                }
                if b.requires_grad() {
                    // dB = gT @ a
                    let mut contrib = vec![E::zero(); n * k];
                    matmul_tn_raw(g, &a.data(), n, m, k, &mut contrib);
                    b.accumulate_grad(&contrib);
                }
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(vec![m, n], data, req, parents, backward))
    }

    pub fn transpose(&self) -> Result<Tensor<E>> {
        let (m, n) = self.check_2d("transpose")?;
        let src = self.data();
        let mut data = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        drop(src);
        let (req, parents) = out_flags(&[self]);
        let backward: Option<BackwardFn<E>> = if req {
            let a = self.clone();
            Some(Box::new(move |g: &[E]| {
                let mut contrib = vec![E::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        contrib[i * n + j] = g[j * m + i];
                    }
                }
                a.accumulate_grad(&contrib);
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(vec![n, m], data, req, parents, backward))
    }

    /// Contiguous slice along an axis (0 = rows, 1 = cols).
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        let (m, n) = self.check_2d("narrow")?;
        let bound = if axis == 0 { m } else { n };
        if axis > 1 || start + len > bound {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("axis {axis} range {start}..{} out of shape {:?}", start + len, self.inner.shape),
            });
        }
        let src = self.data();
        let (om, on) = if axis == 0 { (len, n) } else { (m, len) };
        let mut data = vec![E::zero(); om * on];
        for i in 0..om {
            for j in 0..on {
                let (si, sj) = if axis == 0 { (start + i, j) } else { (i, start + j) };
                data[i * on + j] = src[si * n + sj];
            }
        }
        drop(src);
        let (req, parents) = out_flags(&[self]);
        let backward: Option<BackwardFn<E>> = if req {
            let a = self.clone();
            Some(Box::new(move |g: &[E]| {
                let mut contrib = vec![E::zero(); m * n];
                for i in 0..om {
                    for j in 0..on {
                        let (si, sj) = if axis == 0 { (start + i, j) } else { (i, start + j) };
                        contrib[si * n + sj] = g[i * on + j];
                    }
                }
                a.accumulate_grad(&contrib);
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(vec![om, on], data, req, parents, backward))
    }

    pub fn narrow_rows(&self, start: usize, len: usize) -> Result<Tensor<E>> {
        self.narrow(0, start, len)
    }

    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor<E>> {
        self.narrow(1, start, len)
    }

    /// Embed `self` as rows `offset..offset+rows` of an otherwise-zero
    /// `total_rows x cols` tensor.
    pub fn pad_rows(&self, total_rows: usize, offset: usize) -> Result<Tensor<E>> {
        let (m, n) = self.check_2d("pad_rows")?;
        if offset + m > total_rows {
            return Err(TensorError::Invalid {
                op: "pad_rows",
                msg: format!("rows {offset}..{} exceed total {total_rows}", offset + m),
            });
        }
        let mut data = vec![E::zero(); total_rows * n];
        data[offset * n..(offset + m) * n].copy_from_slice(&self.data());
        let (req, parents) = out_flags(&[self]);
        let backward: Option<BackwardFn<E>> = if req {
            let a = self.clone();
            Some(Box::new(move |g: &[E]| {
                a.accumulate_grad(&g[offset * n..(offset + m) * n]);
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(vec![total_rows, n], data, req, parents, backward))
    }

    /// Column-wise concatenation; all parts must share the row count.
    pub fn concat_cols(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat_cols",
                msg: "no tensors to concatenate".into(),
            });
        }
        let (m, _) = parts[0].check_2d("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pm, pn) = p.check_2d("concat_cols")?;
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![E::zero(); m * n];
        let mut col = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = p.data();
            for i in 0..m {
                data[i * n + col..i * n + col + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            col += w;
        }
        let refs: Vec<&Tensor<E>> = parts.iter().collect();
        let (req, parents) = out_flags(&refs);
        let backward: Option<BackwardFn<E>> = if req {
            let parts: Vec<Tensor<E>> = parts.to_vec();
            let widths = widths.clone();
            Some(Box::new(move |g: &[E]| {
                let mut col = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    if p.requires_grad() {
                        let mut contrib = vec![E::zero(); m * w];
                        for i in 0..m {
                            contrib[i * w..(i + 1) * w].copy_from_slice(&g[i * n + col..i * n + col + w]);
                        }
                        p.accumulate_grad(&contrib);
                    }
                    col += w;
                }
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(vec![m, n], data, req, parents, backward))
    }

    /// Row lookup into an embedding table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor<E>> {
        let (v, d) = self.check_2d("gather_rows")?;
        for &id in ids {
            if id >= v {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    msg: format!("row id {id} out of table height {v}"),
                });
            }
        }
        let src = self.data();
        let mut data = vec![E::zero(); ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&src[id * d..(id + 1) * d]);
        }
        drop(src);
        let (req, parents) = out_flags(&[self]);
        let backward: Option<BackwardFn<E>> = if req {
            let a = self.clone();
            let ids = ids.to_vec();
            Some(Box::new(move |g: &[E]| {
                let mut contrib = vec![E::zero(); v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        contrib[id * d + j] = contrib[id * d + j] + g[i * d + j];
                    }
                }
                a.accumulate_grad(&contrib);
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(vec![ids.len(), d], data, req, parents, backward))
    }
}

// ---------------------------------------------------------------------------
// Row-structured ops: softmax, RMS norm, rotary embedding, cross entropy
// ---------------------------------------------------------------------------

impl<E: Element> Tensor<E> {
    /// Row-wise softmax under an additive mask.
    ///
    /// Mask entries are `0` (keep) or [`mask_neg`] (drop); dropped entries
    /// produce an exact zero weight. The mask may have the same shape as
    /// `self` or be a single broadcast row. A fully-masked row is an error
    /// rather than a silent NaN.
    pub fn softmax_rows(&self, additive_mask: &Tensor<E>) -> Result<Tensor<E>> {
        let (m, n) = self.check_2d("softmax_rows")?;
        let mask_rows = match additive_mask.shape() {
            s if s == [m, n] => m,
            s if s == [1, n] => 1,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_rows",
                    lhs: self.inner.shape.clone(),
                    rhs: additive_mask.shape().to_vec(),
                })
            }
        };
        let src = self.data();
        let mk = additive_mask.data();
        let mut data = vec![E::zero(); m * n];
        let mut keep = vec![false; m * n];
        for i in 0..m {
            let mrow = if mask_rows == 1 { &mk[..n] } else { &mk[i * n..(i + 1) * n] };
            let mut max: Option<E> = None;
            for j in 0..n {
                if is_masked(mrow[j]) {
                    continue;
                }
                keep[i * n + j] = true;
                let s = src[i * n + j] + mrow[j];
                max = Some(match max {
                    Some(mv) if mv >= s => mv,
                    _ => s,
                });
            }
            let max = max.ok_or(TensorError::FullyMaskedRow { row: i })?;
            let mut sum = E::zero();
            for j in 0..n {
                if keep[i * n + j] {
                    let e = ((src[i * n + j] + mrow[j]) - max).exp();
                    data[i * n + j] = e;
                    sum = sum + e;
                }
            }
            for j in 0..n {
                if keep[i * n + j] {
                    data[i * n + j] = data[i * n + j] / sum;
                }
            }
        }
        drop(src);
        drop(mk);
        let y_snapshot = data.clone();
        let (req, parents) = out_flags(&[self]);
        let backward: Option<BackwardFn<E>> = if req {
            let a = self.clone();
            Some(Box::new(move |g: &[E]| {
                let mut contrib = vec![E::zero(); m * n];
                for i in 0..m {
                    let mut dot = E::zero();
                    for j in 0..n {
                        dot = dot + g[i * n + j] * y_snapshot[i * n + j];
                    }
                    for j in 0..n {
                        let y = y_snapshot[i * n + j];
                        contrib[i * n + j] = y * (g[i * n + j] - dot);
                    }
                }
                a.accumulate_grad(&contrib);
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(vec![m, n], data, req, parents, backward))
    }

    /// Row-wise RMS normalization without a learned gain.
    pub fn rms_norm_rows(&self, eps: f64) -> Result<Tensor<E>> {
        let (m, n) = self.check_2d("rms_norm_rows")?;
        let eps = E::from_f64(eps);
        let nn = E::from_f64(n as f64);
        let src = self.data();
        let mut data = vec![E::zero(); m * n];
        let mut inv_r = vec![E::zero(); m];
        for i in 0..m {
            let mut ms = E::zero();
            for j in 0..n {
                let v = src[i * n + j];
                ms = ms + v * v;
            }
            let r = (ms / nn + eps).sqrt();
            inv_r[i] = E::one() / r;
            for j in 0..n {
                data[i * n + j] = src[i * n + j] * inv_r[i];
            }
        }
        drop(src);
        let y_snapshot = data.clone();
        let (req, parents) = out_flags(&[self]);
        let backward: Option<BackwardFn<E>> = if req {
            let a = self.clone();
            Some(Box::new(move |g: &[E]| {
                let mut contrib = vec![E::zero(); m * n];
                for i in 0..m {
                    let mut dot = E::zero();
                    for j in 0..n {
                        dot = dot + g[i * n + j] * y_snapshot[i * n + j];
                    }
                    let mean_dot = dot / nn;
                    for j in 0..n {
                        contrib[i * n + j] = (g[i * n + j] - y_snapshot[i * n + j] * mean_dot) * inv_r[i];
                    }
                }
                a.accumulate_grad(&contrib);
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(vec![m, n], data, req, parents, backward))
    }

    /// Rotary position embedding over consecutive element pairs of each row.
    /// `positions[i]` is the absolute sequence position of row `i`.
    pub fn rope(&self, positions: &[usize], base: f64) -> Result<Tensor<E>> {
        let (m, d) = self.check_2d("rope")?;
        if positions.len() != m {
            return Err(TensorError::Invalid {
                op: "rope",
                msg: format!("{} positions for {} rows", positions.len(), m),
            });
        }
        if d % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "rope",
                msg: format!("row width {d} must be even"),
            });
        }
        let pairs = d / 2;
        let mut cos = vec![E::zero(); m * pairs];
        let mut sin = vec![E::zero(); m * pairs];
        for (i, &p) in positions.iter().enumerate() {
            for q in 0..pairs {
                let inv_freq = base.powf(-2.0 * q as f64 / d as f64);
                let angle = p as f64 * inv_freq;
                cos[i * pairs + q] = E::from_f64(angle.cos());
                sin[i * pairs + q] = E::from_f64(angle.sin());
            }
        }
        let src = self.data();
        let mut data = vec![E::zero(); m * d];
        for i in 0..m {
            for q in 0..pairs {
                let (c, s) = (cos[i * pairs + q], sin[i * pairs + q]);
                let x0 = src[i * d + 2 * q];
                let x1 = src[i * d + 2 * q + 1];
                data[i * d + 2 * q] = x0 * c - x1 * s;
                data[i * d + 2 * q + 1] = x0 * s + x1 * c;
            }
        }
        drop(src);
        let (req, parents) = out_flags(&[self]);
        let backward: Option<BackwardFn<E>> = if req {
            let a = self.clone();
            Some(Box::new(move |g: &[E]| {
                // The rotation is orthogonal; its adjoint is the inverse rotation.
                let mut contrib = vec![E::zero(); m * d];
                for i in 0..m {
                    for q in 0..pairs {
                        let (c, s) = (cos[i * pairs + q], sin[i * pairs + q]);
                        let g0 = g[i * d + 2 * q];
                        let g1 = g[i * d + 2 * q + 1];
                        contrib[i * d + 2 * q] = g0 * c + g1 * s;
                        contrib[i * d + 2 * q + 1] = -g0 * s + g1 * c;
                    }
                }
                a.accumulate_grad(&contrib);
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(vec![m, d], data, req, parents, backward))
    }

    /// Mean cross entropy of `self` (logits, rows = positions) against
    /// `(row, target)` pairs. An empty pair list yields a constant zero loss
    /// disconnected from the graph.
    pub fn cross_entropy(&self, pairs: &[(usize, usize)]) -> Result<Tensor<E>> {
        let (m, v) = self.check_2d("cross_entropy")?;
        if pairs.is_empty() {
            return Ok(Tensor::scalar(E::zero()));
        }
        for &(row, tgt) in pairs {
            if row >= m || tgt >= v {
                return Err(TensorError::Invalid {
                    op: "cross_entropy",
                    msg: format!("pair ({row}, {tgt}) out of logits shape {:?}", self.inner.shape),
                });
            }
        }
        let src = self.data();
        let count = E::from_f64(pairs.len() as f64);
        let mut acc = E::zero();
        let mut row_stats = Vec::with_capacity(pairs.len());
        for &(row, tgt) in pairs {
            let r = &src[row * v..(row + 1) * v];
            let mut max = r[0];
            for &x in &r[1..] {
                if x > max {
                    max = x;
                }
            }
            let mut sum = E::zero();
            for &x in r {
                sum = sum + (x - max).exp();
            }
            let lse = max + sum.ln();
            acc = acc + (lse - r[tgt]);
            row_stats.push((max, sum));
        }
        let loss = acc / count;
        drop(src);
        let (req, parents) = out_flags(&[self]);
        let backward: Option<BackwardFn<E>> = if req {
            let a = self.clone();
            let pairs = pairs.to_vec();
            Some(Box::new(move |g: &[E]| {
                let src = a.data();
                let mut contrib = vec![E::zero(); m * v];
                let scale = g[0] / count;
                for (&(row, tgt), &(max, sum)) in pairs.iter().zip(&row_stats) {
                    let r = &src[row * v..(row + 1) * v];
                    for j in 0..v {
                        let p = (r[j] - max).exp() / sum;
                        let delta = if j == tgt { E::one() } else { E::zero() };
                        contrib[row * v + j] = contrib[row * v + j] + (p - delta) * scale;
                    }
                }
                drop(src);
                a.accumulate_grad(&contrib);
            }))
        } else {
            None
        };
        Ok(Tensor::new_node(vec![1], vec![loss], req, parents, backward))
    }

    /// Index of the maximum element of row `i` (ties to the lower index).
    pub fn argmax_row(&self, i: usize) -> usize {
        let n = self.cols();
        let src = self.data();
        let row = &src[i * n..(i + 1) * n];
        let mut best = 0;
        for (j, &x) in row.iter().enumerate() {
            if x > row[best] {
                best = j;
            }
        }
        best
    }
}

/// Additive causal mask: entry (i, j) is 0 when j <= i and [`mask_neg`] above
/// the diagonal.
pub fn causal_mask<E: Element>(t: usize) -> Tensor<E> {
    let neg = mask_neg::<E>();
    let mut data = vec![E::zero(); t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = neg;
        }
    }
    Tensor::from_vec(&[t, t], data).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = t64(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = t64(&[2, 2], vec![2.0, 3.0, 4.0, 5.0]);
        assert_eq!(a.matmul(&b).unwrap().data_vec(), vec![2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_1x2_2x1() {
        let a = t64(&[1, 2], vec![1.0, 2.0]);
        let b = t64(&[2, 1], vec![3.0, 4.0]);
        assert_eq!(a.matmul(&b).unwrap().data_vec(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = t64(&[2, 3], vec![0.0; 6]);
        let b = t64(&[2, 3], vec![0.0; 6]);
        assert!(matches!(
            a.matmul(&b),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_bt() {
        // loss = sum(a @ b) => dL/da = ones(m, n) @ bT
        let mut rng = crate::rng::stream(11, "test");
        let a = Tensor::<f64>::randn_param(&mut rng, &[5, 4], 1.0);
        let b = Tensor::<f64>::randn(&mut rng, &[4, 3], 1.0);
        let loss = a.matmul(&b).unwrap().sum_all();
        loss.backward().unwrap();
        let got = a.grad().unwrap();

        let ones = t64(&[5, 3], vec![1.0; 15]);
        let expect = ones.matmul(&b.transpose().unwrap()).unwrap().data_vec();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() <= 1e-12 * e.abs().max(1.0), "{g} vs {e}");
        }
    }

    #[test]
    fn softmax_uniform_row() {
        let x = t64(&[1, 3], vec![0.0, 0.0, 0.0]);
        let mask = Tensor::zeros(&[1, 3]);
        let y = x.softmax_rows(&mask).unwrap().data_vec();
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_survivor() {
        let x = t64(&[1, 2], vec![0.7, 123.0]);
        let mask = t64(&[1, 2], vec![0.0, mask_neg::<f64>()]);
        let y = x.softmax_rows(&mask).unwrap().data_vec();
        assert_eq!(y, vec![1.0, 0.0]);
    }

    #[test]
    fn softmax_causal_rows_sum_to_one() {
        let mut rng = crate::rng::stream(3, "test");
        let x = Tensor::<f64>::randn(&mut rng, &[3, 3], 2.0);
        let y = x.softmax_rows(&causal_mask(3)).unwrap();
        let d = y.data_vec();
        for i in 0..3 {
            let s: f64 = d[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
            for j in (i + 1)..3 {
                assert_eq!(d[i * 3 + j], 0.0, "masked entry must be exactly zero");
            }
        }
    }

    #[test]
    fn softmax_fully_masked_row_is_an_error() {
        let x = t64(&[1, 2], vec![1.0, 2.0]);
        let mask = t64(&[1, 2], vec![mask_neg::<f64>(), mask_neg::<f64>()]);
        assert!(matches!(
            x.softmax_rows(&mask),
            Err(TensorError::FullyMaskedRow { row: 0 })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::param(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let loss = x.sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_2x() {
        let x = Tensor::param(&[1, 3], vec![1.0, -2.0, 0.25]).unwrap();
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let x = Tensor::param(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_consumes_the_graph() {
        let x = Tensor::param(&[1, 2], vec![1.0, 2.0]).unwrap();
        let loss = x.sum_all();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(TensorError::GraphConsumed)));
    }

    #[test]
    fn grad_accumulates_across_separate_graphs() {
        let x = Tensor::param(&[1, 2], vec![1.0, 2.0]).unwrap();
        x.sum_all().backward().unwrap();
        x.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_linearity_is_exact_for_binary_scales() {
        // a and b are powers of two, so every product reorder is exact and the
        // combined backward must match the linear combination bitwise.
        let mk = || Tensor::param(&[2, 2], vec![0.3, -1.7, 2.9, 0.01]).unwrap();
        let (a, b) = (2.0, 0.25);

        let x = mk();
        let w = t64(&[2, 2], vec![0.5, 1.5, -0.75, 2.0]);
        let f = x.matmul(&w).unwrap().sum_all();
        let g = x.mul(&x).unwrap().sum_all();
        let combined = f.scale(a).add(&g.scale(b)).unwrap();
        combined.backward().unwrap();
        let got = x.grad().unwrap();

        let xf = mk();
        xf.matmul(&w).unwrap().sum_all().backward().unwrap();
        let gf = xf.grad().unwrap();
        let xg = mk();
        xg.mul(&xg).unwrap().sum_all().backward().unwrap();
        let gg = xg.grad().unwrap();
        for i in 0..got.len() {
            assert_eq!(got[i], a * gf[i] + b * gg[i]);
        }
    }

    #[test]
    fn forward_backward_is_bit_deterministic() {
        let run = || {
            let mut rng = crate::rng::stream(17, "test");
            let x = Tensor::<f64>::randn_param(&mut rng, &[4, 4], 1.0);
            let w = Tensor::<f64>::randn(&mut rng, &[4, 4], 1.0);
            let y = x.matmul(&w).unwrap().silu().rms_norm_rows(1e-6).unwrap();
            let sm = y.softmax_rows(&causal_mask(4)).unwrap();
            let loss = sm.mul(&sm).unwrap().sum_all();
            loss.backward().unwrap();
            (loss.item(), x.grad().unwrap())
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1.len(), g2.len());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn f32_mode_runs_the_same_ops() {
        let x = Tensor::<f32>::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::<f32>::from_vec(&[2, 2], vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        let loss = x.matmul(&w).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.5; 4]);
        assert_eq!(loss.item(), 5.0);
    }

    #[test]
    fn cross_entropy_empty_positions_is_disconnected_zero() {
        let x = Tensor::param(&[2, 3], vec![0.1; 6]).unwrap();
        let loss = x.cross_entropy(&[]).unwrap();
        assert_eq!(loss.item(), 0.0);
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }
}
