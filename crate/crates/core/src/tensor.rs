//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation during the forward pass; [`backward`]
//! replays the tape in reverse creation order (which is a topological order,
//! since an op's inputs always exist before its output) and accumulates
//! gradients for every node. Each node is visited exactly once.
//!
//! Training runs at `f32`; gradient checks instantiate the same code at
//! `f64` because 32-bit central differences are too noisy for tight
//! tolerances. [`Tensor`] handles are cheap clones pointing into a shared
//! tape; the tape itself is single-threaded per training step.

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::rc::Rc;

use crate::error::{CoreError, Result};

// ── Scalar ───────────────────────────────────────────────────────────

/// Element type of tensors: `f32` for training, `f64` for gradient checks.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maxv(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maxv(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maxv(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

// ── Array ────────────────────────────────────────────────────────────

/// Plain dense n-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Array<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Array { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Array {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
        }
    }

    pub fn scalar(v: S) -> Self {
        Array {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64s(shape: Vec<usize>, values: &[f64]) -> Self {
        Array::new(shape, values.iter().map(|&v| S::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Row count / column count for 2-d arrays.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map_to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Array<S>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Convert element type (used to move parameters between precisions).
    pub fn cast<T: Scalar>(&self) -> Array<T> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

/// Raw matmul on slices: C[m,n] += A[m,k] * B[k,n].
fn matmul_slice<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av.to_f64() == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// Raw matmul with transposed A: C[m,n] += A^T[m,k] * B[k,n] where A is [k,m].
fn matmul_at_slice<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for p in 0..k {
        for i in 0..m {
            let av = a[p * m + i];
            if av.to_f64() == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// Raw matmul with transposed B: C[m,n] += A[m,k] * B^T[k,n] where B is [n,k].
fn matmul_bt_slice<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = S::zero();
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            crow[j] += s;
        }
    }
}

// ── Tape ─────────────────────────────────────────────────────────────

type BackFn<S> = Box<dyn Fn(&Array<S>, &mut GradStore<S>)>;

struct Node<S: Scalar> {
    value: Array<S>,
    requires_grad: bool,
    backward: Option<BackFn<S>>,
}

/// Gradient accumulator indexed by node id.
pub struct GradStore<S: Scalar> {
    slots: Vec<Option<Array<S>>>,
}

impl<S: Scalar> GradStore<S> {
    fn new(n: usize) -> Self {
        GradStore {
            slots: (0..n).map(|_| None).collect(),
        }
    }

    /// Zero-initialized gradient buffer for node `id`.
    pub fn slot(&mut self, id: usize, shape: &[usize]) -> &mut [S] {
        if self.slots[id].is_none() {
            self.slots[id] = Some(Array::zeros(shape));
        }
        self.slots[id].as_mut().unwrap().data_mut()
    }

    pub fn accumulate(&mut self, id: usize, contribution: &Array<S>) {
        let slot = self.slot(id, contribution.shape());
        for (g, c) in slot.iter_mut().zip(contribution.data()) {
            *g += *c;
        }
    }
}

/// Gradients produced by [`backward`], addressable by tensor handle.
pub struct Gradients<S: Scalar> {
    slots: Vec<Option<Array<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn of(&self, t: &Tensor<S>) -> Option<&Array<S>> {
        self.slots.get(t.id).and_then(|s| s.as_ref())
    }

    /// Gradient of a leaf, materializing zeros when no path reached it.
    pub fn of_or_zeros(&self, t: &Tensor<S>) -> Array<S> {
        match self.of(t) {
            Some(g) => g.clone(),
            None => Array::zeros(&t.shape()),
        }
    }
}

struct TapeInner<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
}

/// Recording tape. Create one per training step.
pub struct Tape<S: Scalar> {
    inner: Rc<TapeInner<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                nodes: RefCell::new(Vec::new()),
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf: gradients will be produced for it.
    pub fn leaf(&self, value: Array<S>) -> Tensor<S> {
        self.push(value, true, None)
    }

    /// Non-trainable input.
    pub fn constant(&self, value: Array<S>) -> Tensor<S> {
        self.push(value, false, None)
    }

    fn push(&self, value: Array<S>, requires_grad: bool, backward: Option<BackFn<S>>) -> Tensor<S> {
        debug_assert!(value.is_finite(), "non-finite values entering the tape");
        let mut nodes = self.inner.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            requires_grad,
            backward,
        });
        Tensor {
            tape: Rc::clone(&self.inner),
            id,
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Tape::new()
    }
}

/// Handle to a node on the tape. Cheap to clone.
pub struct Tensor<S: Scalar> {
    tape: Rc<TapeInner<S>>,
    id: usize,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            tape: Rc::clone(&self.tape),
            id: self.id,
        }
    }
}

/// Reverse pass over the tape. `loss` must be scalar; every node is visited
/// exactly once, in reverse creation order, so results are deterministic.
pub fn backward<S: Scalar>(loss: &Tensor<S>) -> Result<Gradients<S>> {
    if loss.numel() != 1 {
        return Err(CoreError::NonScalarLoss {
            shape: loss.shape(),
        });
    }
    let nodes = loss.tape.nodes.borrow();
    let mut store = GradStore::new(nodes.len());
    store.slots[loss.id] = Some(Array::new(loss.shape(), vec![S::one()]));
    for id in (0..=loss.id).rev() {
        let node = &nodes[id];
        if !node.requires_grad {
            continue;
        }
        // Leaves keep their accumulated gradient; interior nodes propagate
        // theirs onward once, then retain it for inspection.
        let Some(back) = node.backward.as_ref() else {
            continue;
        };
        if let Some(grad) = store.slots[id].take() {
            back(&grad, &mut store);
            store.slots[id] = Some(grad);
        }
    }
    Ok(Gradients { slots: store.slots })
}

impl<S: Scalar> Tensor<S> {
    pub fn id(&self) -> usize {
        self.id
    }

    fn tape(&self) -> Tape<S> {
        Tape {
            inner: Rc::clone(&self.tape),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn value(&self) -> Array<S> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> S {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        assert_eq!(v.numel(), 1, "item() on non-scalar tensor");
        v.data()[0]
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {

    fn same_tape(&self, other: &Tensor<S>) {
        assert!(
            Rc::ptr_eq(&self.tape, &other.tape),
            "tensors belong to different tapes"
        );
    }

    // ── Elementwise and broadcast ops ────────────────────────────────

    /// `self + rhs`. Shapes must match, or rhs may be a vector matching the
    /// last axis (bias broadcast), or a scalar.
    pub fn add(&self, rhs: &Tensor<S>) -> Tensor<S> {
        self.same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        let out = if a.shape() == b.shape() {
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| x + y)
                .collect();
            Array::new(a.shape().to_vec(), data)
        } else if b.numel() == 1 {
            let c = b.data()[0];
            Array::new(a.shape().to_vec(), a.data().iter().map(|&x| x + c).collect())
        } else if b.shape().len() == 1 && a.shape().last() == Some(&b.numel()) {
            let n = b.numel();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + b.data()[i % n])
                .collect();
            Array::new(a.shape().to_vec(), data)
        } else {
            panic!(
                "add: incompatible shapes {:?} and {:?}",
                a.shape(),
                b.shape()
            );
        };
        let requires = self.requires_grad() || rhs.requires_grad();
        let (lid, rid) = (self.id, rhs.id);
        let (ls, rs) = (a.shape().to_vec(), b.shape().to_vec());
        let back: Option<BackFn<S>> = if requires {
            Some(Box::new(move |g, store| {
                {
                    let slot = store.slot(lid, &ls);
                    for (d, &gv) in slot.iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                }
                let slot = store.slot(rid, &rs);
                if slot.len() == g.numel() {
                    for (d, &gv) in slot.iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                } else if slot.len() == 1 {
                    let mut s = S::zero();
                    for &gv in g.data() {
                        s += gv;
                    }
                    slot[0] += s;
                } else {
                    let n = slot.len();
                    for (i, &gv) in g.data().iter().enumerate() {
                        slot[i % n] += gv;
                    }
                }
            }))
        } else {
            None
        };
        self.tape().push(out, requires, back)
    }

    /// `self - rhs`, same shapes.
    pub fn sub(&self, rhs: &Tensor<S>) -> Tensor<S> {
        self.add(&rhs.scale(-1.0))
    }

    /// Elementwise product, same shapes.
    pub fn mul(&self, rhs: &Tensor<S>) -> Tensor<S> {
        self.same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(
            a.shape(),
            b.shape(),
            "mul: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        );
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Array::new(a.shape().to_vec(), data);
        let requires = self.requires_grad() || rhs.requires_grad();
        let (lid, rid) = (self.id, rhs.id);
        let shape = a.shape().to_vec();
        let back: Option<BackFn<S>> = if requires {
            Some(Box::new(move |g, store| {
                {
                    let slot = store.slot(lid, &shape);
                    for ((d, &gv), &bv) in slot.iter_mut().zip(g.data()).zip(b.data()) {
                        *d += gv * bv;
                    }
                }
                let slot = store.slot(rid, &shape);
                for ((d, &gv), &av) in slot.iter_mut().zip(g.data()).zip(a.data()) {
                    *d += gv * av;
                }
            }))
        } else {
            None
        };
        self.tape().push(out, requires, back)
    }

    /// Multiply by a constant.
    pub fn scale(&self, c: f64) -> Tensor<S> {
        let a = self.value();
        let cs = S::from_f64(c);
        let out = Array::new(
            a.shape().to_vec(),
            a.data().iter().map(|&x| x * cs).collect(),
        );
        let requires = self.requires_grad();
        let id = self.id;
        let shape = a.shape().to_vec();
        let back: Option<BackFn<S>> = if requires {
            Some(Box::new(move |g, store| {
                let slot = store.slot(id, &shape);
                for (d, &gv) in slot.iter_mut().zip(g.data()) {
                    *d += gv * cs;
                }
            }))
        } else {
            None
        };
        self.tape().push(out, requires, back)
    }

    pub fn neg(&self) -> Tensor<S> {
        self.scale(-1.0)
    }

    // ── Matmul / transpose ───────────────────────────────────────────

    /// Matrix product. Supports `[p,q] x [q,r]` and batched `[b,p,q] x [b,q,r]`
    /// (either side may omit the batch axis, which broadcasts it).
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        let mismatch = || CoreError::ShapeMismatch {
            op: "matmul",
            lhs: ash.clone(),
            rhs: bsh.clone(),
        };
        let (batch, m, k, n) = match (ash.len(), bsh.len()) {
            (2, 2) => {
                if ash[1] != bsh[0] {
                    return Err(mismatch());
                }
                (1usize, ash[0], ash[1], bsh[1])
            }
            (3, 3) => {
                if ash[0] != bsh[0] || ash[2] != bsh[1] {
                    return Err(mismatch());
                }
                (ash[0], ash[1], ash[2], bsh[2])
            }
            (3, 2) => {
                if ash[2] != bsh[0] {
                    return Err(mismatch());
                }
                (ash[0], ash[1], ash[2], bsh[1])
            }
            (2, 3) => {
                if ash[1] != bsh[1] {
                    return Err(mismatch());
                }
                (bsh[0], ash[0], ash[1], bsh[2])
            }
            _ => return Err(mismatch()),
        };
        let a_batched = ash.len() == 3;
        let b_batched = bsh.len() == 3;
        let out_shape = if batch == 1 && !a_batched && !b_batched {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let mut out = Array::zeros(&out_shape);
        for bi in 0..batch {
            let ao = if a_batched { bi * m * k } else { 0 };
            let bo = if b_batched { bi * k * n } else { 0 };
            matmul_slice(
                &a.data()[ao..ao + m * k],
                &b.data()[bo..bo + k * n],
                &mut out.data_mut()[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let requires = self.requires_grad() || rhs.requires_grad();
        let (lid, rid) = (self.id, rhs.id);
        let back: Option<BackFn<S>> = if requires {
            let (ash2, bsh2) = (ash.clone(), bsh.clone());
            Some(Box::new(move |g, store| {
                // dA = dC B^T, dB = A^T dC (per batch, summed over broadcasts)
                {
                    let slot = store.slot(lid, &ash2);
                    for bi in 0..batch {
                        let ao = if a_batched { bi * m * k } else { 0 };
                        let bo = if b_batched { bi * k * n } else { 0 };
                        matmul_bt_slice(
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            &b.data()[bo..bo + k * n],
                            &mut slot[ao..ao + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                let slot = store.slot(rid, &bsh2);
                for bi in 0..batch {
                    let ao = if a_batched { bi * m * k } else { 0 };
                    let bo = if b_batched { bi * k * n } else { 0 };
                    matmul_at_slice(
                        &a.data()[ao..ao + m * k],
                        &g.data()[bi * m * n..(bi + 1) * m * n],
                        &mut slot[bo..bo + k * n],
                        k,
                        m,
                        n,
                    );
                }
            }))
        } else {
            None
        };
        Ok(self.tape().push(out, requires, back))
    }

    /// 2-d transpose.
    pub fn transpose(&self) -> Tensor<S> {
        let a = self.value();
        assert_eq!(a.shape().len(), 2, "transpose expects a 2-d tensor");
        let (r, c) = (a.rows(), a.cols());
        let mut out = Array::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[j * r + i] = a.data()[i * c + j];
            }
        }
        let requires = self.requires_grad();
        let id = self.id;
        let back: Option<BackFn<S>> = if requires {
            Some(Box::new(move |g, store| {
                let slot = store.slot(id, &[r, c]);
                for i in 0..r {
                    for j in 0..c {
                        slot[i * c + j] += g.data()[j * r + i];
                    }
                }
            }))
        } else {
            None
        };
        self.tape().push(out, requires, back)
    }

    // ── Nonlinearities ───────────────────────────────────────────────

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&self, axis: usize) -> Tensor<S> {
        let a = self.value();
        let shape = a.shape().to_vec();
        assert!(axis < shape.len(), "softmax: axis {} out of range", axis);
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = Array::zeros(&shape);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut mx = a.data()[base];
                for t in 1..axis_len {
                    mx = mx.maxv(a.data()[base + t * inner]);
                }
                let mut denom = S::zero();
                for t in 0..axis_len {
                    let e = (a.data()[base + t * inner] - mx).exp();
                    out.data_mut()[base + t * inner] = e;
                    denom += e;
                }
                for t in 0..axis_len {
                    let v = out.data()[base + t * inner] / denom;
                    out.data_mut()[base + t * inner] = v;
                }
            }
        }
        let requires = self.requires_grad();
        let id = self.id;
        let y = out.clone();
        let back: Option<BackFn<S>> = if requires {
            let shape2 = shape.clone();
            Some(Box::new(move |g, store| {
                let slot = store.slot(id, &shape2);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * axis_len * inner + i;
                        let mut dot = S::zero();
                        for t in 0..axis_len {
                            let k = base + t * inner;
                            dot += g.data()[k] * y.data()[k];
                        }
                        for t in 0..axis_len {
                            let k = base + t * inner;
                            slot[k] += y.data()[k] * (g.data()[k] - dot);
                        }
                    }
                }
            }))
        } else {
            None
        };
        self.tape().push(out, requires, back)
    }

    /// Row-wise softmax over a 2-d tensor where only `mask[i*cols+j] == true`
    /// entries participate. Masked entries get weight exactly zero; a row with
    /// no unmasked entries becomes all zeros (attention contributes nothing).
    pub fn masked_softmax_rows(&self, mask: &[bool]) -> Tensor<S> {
        let a = self.value();
        assert_eq!(a.shape().len(), 2, "masked_softmax_rows expects 2-d");
        let (r, c) = (a.rows(), a.cols());
        assert_eq!(mask.len(), r * c, "mask length mismatch");
        let mut out = Array::zeros(&[r, c]);
        for i in 0..r {
            let row = &a.data()[i * c..(i + 1) * c];
            let mrow = &mask[i * c..(i + 1) * c];
            let mut mx: Option<S> = None;
            for j in 0..c {
                if mrow[j] {
                    mx = Some(match mx {
                        Some(m) => m.maxv(row[j]),
                        None => row[j],
                    });
                }
            }
            let Some(mx) = mx else { continue }; // fully masked row -> zeros
            let mut denom = S::zero();
            for j in 0..c {
                if mrow[j] {
                    let e = (row[j] - mx).exp();
                    out.data_mut()[i * c + j] = e;
                    denom += e;
                }
            }
            for j in 0..c {
                if mrow[j] {
                    let v = out.data()[i * c + j] / denom;
                    out.data_mut()[i * c + j] = v;
                }
            }
        }
        let requires = self.requires_grad();
        let id = self.id;
        let y = out.clone();
        let mask_owned = mask.to_vec();
        let back: Option<BackFn<S>> = if requires {
            Some(Box::new(move |g, store| {
                let slot = store.slot(id, &[r, c]);
                for i in 0..r {
                    let mut dot = S::zero();
                    for j in 0..c {
                        let k = i * c + j;
                        if mask_owned[k] {
                            dot += g.data()[k] * y.data()[k];
                        }
                    }
                    for j in 0..c {
                        let k = i * c + j;
                        if mask_owned[k] {
                            slot[k] += y.data()[k] * (g.data()[k] - dot);
                        }
                    }
                }
            }))
        } else {
            None
        };
        self.tape().push(out, requires, back)
    }

    /// Layer normalization over the last axis, then affine.
    pub fn layer_norm(&self, gain: &Tensor<S>, bias: &Tensor<S>, eps: f64) -> Tensor<S> {
        self.same_tape(gain);
        self.same_tape(bias);
        let x = self.value();
        let g = gain.value();
        let b = bias.value();
        let d = *x.shape().last().expect("layer_norm on 0-d tensor");
        assert_eq!(g.numel(), d, "gain must match last extent");
        assert_eq!(b.numel(), d, "bias must match last extent");
        let rows = x.numel() / d;
        let epss = S::from_f64(eps);
        let dinv = S::from_f64(1.0 / d as f64);
        let mut out = Array::zeros(x.shape());
        let mut xhat = vec![S::zero(); x.numel()];
        let mut inv_std = vec![S::zero(); rows];
        for i in 0..rows {
            let row = &x.data()[i * d..(i + 1) * d];
            let mut mean = S::zero();
            for &v in row {
                mean += v;
            }
            mean *= dinv;
            let mut var = S::zero();
            for &v in row {
                let dv = v - mean;
                var += dv * dv;
            }
            var *= dinv;
            let istd = S::one() / (var + epss).sqrt();
            inv_std[i] = istd;
            for j in 0..d {
                let xh = (row[j] - mean) * istd;
                xhat[i * d + j] = xh;
                out.data_mut()[i * d + j] = g.data()[j] * xh + b.data()[j];
            }
        }
        let requires = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        let (xid, gid, bid) = (self.id, gain.id, bias.id);
        let xshape = x.shape().to_vec();
        let back: Option<BackFn<S>> = if requires {
            Some(Box::new(move |gr, store| {
                // d gain / d bias
                {
                    let slot = store.slot(gid, &[d]);
                    for i in 0..rows {
                        for j in 0..d {
                            slot[j] += gr.data()[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                {
                    let slot = store.slot(bid, &[d]);
                    for i in 0..rows {
                        for j in 0..d {
                            slot[j] += gr.data()[i * d + j];
                        }
                    }
                }
                // d x: per row, dxhat = g*dy; dx = istd*(dxhat - mean(dxhat)
                //       - xhat * mean(dxhat*xhat))
                let slot = store.slot(xid, &xshape);
                for i in 0..rows {
                    let mut sum_dxh = S::zero();
                    let mut sum_dxh_xh = S::zero();
                    for j in 0..d {
                        let dxh = gr.data()[i * d + j] * g.data()[j];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xhat[i * d + j];
                    }
                    let mean_dxh = sum_dxh * dinv;
                    let mean_dxh_xh = sum_dxh_xh * dinv;
                    for j in 0..d {
                        let dxh = gr.data()[i * d + j] * g.data()[j];
                        slot[i * d + j] +=
                            inv_std[i] * (dxh - mean_dxh - xhat[i * d + j] * mean_dxh_xh);
                    }
                }
            }))
        } else {
            None
        };
        self.tape().push(out, requires, back)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&self) -> Tensor<S> {
        let a = self.value();
        let c = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = S::from_f64(0.044715);
        let half = S::from_f64(0.5);
        let three = S::from_f64(3.0);
        let out = Array::new(
            a.shape().to_vec(),
            a.data()
                .iter()
                .map(|&x| {
                    let u = c * (x + k * x * x * x);
                    half * x * (S::one() + u.tanh())
                })
                .collect(),
        );
        let requires = self.requires_grad();
        let id = self.id;
        let shape = a.shape().to_vec();
        let back: Option<BackFn<S>> = if requires {
            Some(Box::new(move |g, store| {
                let slot = store.slot(id, &shape);
                for (i, (&gv, &x)) in g.data().iter().zip(a.data()).enumerate() {
                    let u = c * (x + k * x * x * x);
                    let t = u.tanh();
                    let du = c * (S::one() + three * k * x * x);
                    let deriv = half * (S::one() + t) + half * x * (S::one() - t * t) * du;
                    slot[i] += gv * deriv;
                }
            }))
        } else {
            None
        };
        self.tape().push(out, requires, back)
    }

    /// Inverted dropout. `keep[i] == false` zeroes element `i`; survivors are
    /// scaled by `1/(1-rate)`. The caller supplies the mask from a seeded RNG.
    pub fn dropout(&self, keep: &[bool], rate: f64) -> Tensor<S> {
        let a = self.value();
        assert_eq!(keep.len(), a.numel(), "dropout mask length mismatch");
        assert!(rate < 1.0, "dropout rate must be < 1");
        let scale = S::from_f64(1.0 / (1.0 - rate));
        let out = Array::new(
            a.shape().to_vec(),
            a.data()
                .iter()
                .zip(keep)
                .map(|(&x, &m)| if m { x * scale } else { S::zero() })
                .collect(),
        );
        let requires = self.requires_grad();
        let id = self.id;
        let shape = a.shape().to_vec();
        let keep_owned = keep.to_vec();
        let back: Option<BackFn<S>> = if requires {
            Some(Box::new(move |g, store| {
                let slot = store.slot(id, &shape);
                for (i, (&gv, &m)) in g.data().iter().zip(&keep_owned).enumerate() {
                    if m {
                        slot[i] += gv * scale;
                    }
                }
            }))
        } else {
            None
        };
        self.tape().push(out, requires, back)
    }

    // ── Gather / scatter ─────────────────────────────────────────────

    /// Row gather from an embedding table `[V, d]`. Backward scatter-adds
    /// into the table gradient, so repeated ids accumulate.
    pub fn embedding_lookup(&self, ids: &[u32]) -> Result<Tensor<S>> {
        let table = self.value();
        assert_eq!(table.shape().len(), 2, "embedding table must be 2-d");
        let (v, d) = (table.rows(), table.cols());
        for (position, &id) in ids.iter().enumerate() {
            if id as usize >= v {
                return Err(CoreError::IdOutOfRange {
                    id,
                    vocab: v,
                    position,
                });
            }
        }
        let mut out = Array::zeros(&[ids.len(), d]);
        for (i, &id) in ids.iter().enumerate() {
            let src = &table.data()[id as usize * d..(id as usize + 1) * d];
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(src);
        }
        let requires = self.requires_grad();
        let tid = self.id;
        let ids_owned: Vec<u32> = ids.to_vec();
        let back: Option<BackFn<S>> = if requires {
            Some(Box::new(move |g, store| {
                let slot = store.slot(tid, &[v, d]);
                for (i, &id) in ids_owned.iter().enumerate() {
                    let dst = &mut slot[id as usize * d..(id as usize + 1) * d];
                    for (dv, &gv) in dst.iter_mut().zip(&g.data()[i * d..(i + 1) * d]) {
                        *dv += gv;
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.tape().push(out, requires, back))
    }

    /// Relative-position gather: `self` is a score table `[R, B]`; the result
    /// is `[rows, cols]` with `out[i][j] = self[i, idx[i][j]]` when `by_row`,
    /// or `self[j, idx[i][j]]` otherwise. `idx` is row-major `rows x cols`.
    pub fn bucket_gather(
        &self,
        idx: &[u32],
        rows: usize,
        cols: usize,
        by_row: bool,
    ) -> Tensor<S> {
        let a = self.value();
        assert_eq!(a.shape().len(), 2, "bucket_gather table must be 2-d");
        let (r, buckets) = (a.rows(), a.cols());
        assert_eq!(idx.len(), rows * cols, "index matrix length mismatch");
        assert_eq!(r, if by_row { rows } else { cols }, "table rows mismatch");
        let mut out = Array::zeros(&[rows, cols]);
        for i in 0..rows {
            for j in 0..cols {
                let bidx = idx[i * cols + j] as usize;
                debug_assert!(bidx < buckets, "bucket index out of range");
                let src = if by_row { i } else { j };
                out.data_mut()[i * cols + j] = a.data()[src * buckets + bidx];
            }
        }
        let requires = self.requires_grad();
        let id = self.id;
        let idx_owned: Vec<u32> = idx.to_vec();
        let tshape = a.shape().to_vec();
        let back: Option<BackFn<S>> = if requires {
            Some(Box::new(move |g, store| {
                let slot = store.slot(id, &tshape);
                for i in 0..rows {
                    for j in 0..cols {
                        let bidx = idx_owned[i * cols + j] as usize;
                        let src = if by_row { i } else { j };
                        slot[src * buckets + bidx] += g.data()[i * cols + j];
                    }
                }
            }))
        } else {
            None
        };
        self.tape().push(out, requires, back)
    }

    // ── Shape ops ────────────────────────────────────────────────────

    /// Rows `[start, start+len)` of a 2-d tensor.
    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor<S> {
        let a = self.value();
        assert_eq!(a.shape().len(), 2, "slice_rows expects 2-d");
        let (r, c) = (a.rows(), a.cols());
        assert!(start + len <= r, "slice_rows out of range");
        let out = Array::new(
            vec![len, c],
            a.data()[start * c..(start + len) * c].to_vec(),
        );
        let requires = self.requires_grad();
        let id = self.id;
        let back: Option<BackFn<S>> = if requires {
            Some(Box::new(move |g, store| {
                let slot = store.slot(id, &[r, c]);
                for (dv, &gv) in slot[start * c..(start + len) * c]
                    .iter_mut()
                    .zip(g.data())
                {
                    *dv += gv;
                }
            }))
        } else {
            None
        };
        self.tape().push(out, requires, back)
    }

    /// Columns `[start, start+len)` of a 2-d tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor<S> {
        let a = self.value();
        assert_eq!(a.shape().len(), 2, "slice_cols expects 2-d");
        let (r, c) = (a.rows(), a.cols());
        assert!(start + len <= c, "slice_cols out of range");
        let mut out = Array::zeros(&[r, len]);
        for i in 0..r {
            out.data_mut()[i * len..(i + 1) * len]
                .copy_from_slice(&a.data()[i * c + start..i * c + start + len]);
        }
        let requires = self.requires_grad();
        let id = self.id;
        let back: Option<BackFn<S>> = if requires {
            Some(Box::new(move |g, store| {
                let slot = store.slot(id, &[r, c]);
                for i in 0..r {
                    for j in 0..len {
                        slot[i * c + start + j] += g.data()[i * len + j];
                    }
                }
            }))
        } else {
            None
        };
        self.tape().push(out, requires, back)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&self) -> Tensor<S> {
        let a = self.value();
        let mut s = S::zero();
        for &v in a.data() {
            s += v;
        }
        let requires = self.requires_grad();
        let id = self.id;
        let shape = a.shape().to_vec();
        let back: Option<BackFn<S>> = if requires {
            Some(Box::new(move |g, store| {
                let gv = g.data()[0];
                let slot = store.slot(id, &shape);
                for d in slot.iter_mut() {
                    *d += gv;
                }
            }))
        } else {
            None
        };
        self.tape().push(Array::scalar(s), requires, back)
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean_all(&self) -> Tensor<S> {
        let n = self.numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Identity forward; contributes exactly zero gradient to the input.
    /// The output is recorded as a fresh constant, so no backward edge exists.
    pub fn stop_gradient(&self) -> Tensor<S> {
        let v = self.value();
        self.tape().constant(v)
    }

    // ── Losses ───────────────────────────────────────────────────────

    /// Mean `-log softmax(logits)[target]` over positions whose target is not
    /// `ignore_id`. All-ignored input yields 0 with zero gradient.
    pub fn cross_entropy_from_logits(
        &self,
        targets: &[u32],
        ignore_id: Option<u32>,
    ) -> Result<Tensor<S>> {
        let logits = self.value();
        assert_eq!(logits.shape().len(), 2, "logits must be [N, V]");
        let (n, v) = (logits.rows(), logits.cols());
        assert_eq!(targets.len(), n, "targets length mismatch");
        for (position, &t) in targets.iter().enumerate() {
            if Some(t) != ignore_id && t as usize >= v {
                return Err(CoreError::IdOutOfRange {
                    id: t,
                    vocab: v,
                    position,
                });
            }
        }
        let active: Vec<usize> = (0..n)
            .filter(|&i| Some(targets[i]) != ignore_id)
            .collect();
        let count = active.len();
        // Per-row softmax probabilities, saved for the backward pass.
        let mut probs = vec![S::zero(); n * v];
        let mut loss = S::zero();
        for &i in &active {
            let row = &logits.data()[i * v..(i + 1) * v];
            let mut mx = row[0];
            for &x in row {
                mx = mx.maxv(x);
            }
            let mut denom = S::zero();
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[i * v + j] = e;
                denom += e;
            }
            for j in 0..v {
                probs[i * v + j] = probs[i * v + j] / denom;
            }
            let t = targets[i] as usize;
            loss += denom.ln() + mx - row[t];
        }
        if count > 0 {
            loss = loss / S::from_f64(count as f64);
        }
        let requires = self.requires_grad() && count > 0;
        let id = self.id;
        let targets_owned: Vec<u32> = targets.to_vec();
        let back: Option<BackFn<S>> = if requires {
            Some(Box::new(move |g, store| {
                let gv = g.data()[0] / S::from_f64(count as f64);
                let slot = store.slot(id, &[n, v]);
                for &i in &active {
                    let t = targets_owned[i] as usize;
                    for j in 0..v {
                        let p = probs[i * v + j];
                        let delta = if j == t { S::one() } else { S::zero() };
                        slot[i * v + j] += gv * (p - delta);
                    }
                }
            }))
        } else {
            None
        };
        Ok(self.tape().push(Array::scalar(loss), requires, back))
    }

    /// Mean binary cross-entropy between logits `self` (any shape, flattened)
    /// and boolean labels, computed in the numerically stable form.
    pub fn binary_ce_with_logits(&self, labels: &[bool]) -> Tensor<S> {
        let scores = self.value();
        assert_eq!(scores.numel(), labels.len(), "labels length mismatch");
        let n = labels.len();
        assert!(n > 0, "binary_ce_with_logits on empty input");
        let ninv = S::from_f64(1.0 / n as f64);
        let mut loss = S::zero();
        for (&s, &y) in scores.data().iter().zip(labels) {
            // max(s,0) - s*y + ln(1 + exp(-|s|))
            let m = s.maxv(S::zero());
            let t = if y { s } else { S::zero() };
            loss += m - t + (S::one() + (-s.abs()).exp()).ln();
        }
        loss *= ninv;
        let requires = self.requires_grad();
        let id = self.id;
        let shape = scores.shape().to_vec();
        let labels_owned: Vec<bool> = labels.to_vec();
        let back: Option<BackFn<S>> = if requires {
            Some(Box::new(move |g, store| {
                let gv = g.data()[0];
                let slot = store.slot(id, &shape);
                for (i, (&s, &y)) in scores.data().iter().zip(&labels_owned).enumerate() {
                    let sig = S::one() / (S::one() + (-s).exp());
                    let yv = if y { S::one() } else { S::zero() };
                    slot[i] += gv * (sig - yv) * ninv;
                }
            }))
        } else {
            None
        };
        self.tape().push(Array::scalar(loss), requires, back)
    }
}

/// Concatenate 2-d tensors along `axis` (0 = rows, 1 = cols).
pub fn concat<S: Scalar>(parts: &[Tensor<S>], axis: usize) -> Tensor<S> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    assert!(axis < 2, "concat supports 2-d tensors only");
    let first = &parts[0];
    for p in &parts[1..] {
        first.same_tape(p);
    }
    let values: Vec<Array<S>> = parts.iter().map(|p| p.value()).collect();
    let (r0, c0) = (values[0].rows(), values[0].cols());
    let out = if axis == 0 {
        let total: usize = values.iter().map(|v| v.rows()).sum();
        let mut data = Vec::with_capacity(total * c0);
        for v in &values {
            assert_eq!(v.cols(), c0, "concat: column mismatch");
            data.extend_from_slice(v.data());
        }
        Array::new(vec![total, c0], data)
    } else {
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = vec![S::zero(); r0 * total];
        let mut off = 0;
        for v in &values {
            assert_eq!(v.rows(), r0, "concat: row mismatch");
            let c = v.cols();
            for i in 0..r0 {
                data[i * total + off..i * total + off + c]
                    .copy_from_slice(&v.data()[i * c..(i + 1) * c]);
            }
            off += c;
        }
        Array::new(vec![r0, total], data)
    };
    let requires = parts.iter().any(|p| p.requires_grad());
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    let out_shape = out.shape().to_vec();
    let back: Option<BackFn<S>> = if requires {
        Some(Box::new(move |g, store| {
            if axis == 0 {
                let mut row_off = 0;
                let c = out_shape[1];
                for (id, sh) in ids.iter().zip(&shapes) {
                    let rows = sh[0];
                    let slot = store.slot(*id, sh);
                    for (dv, &gv) in slot
                        .iter_mut()
                        .zip(&g.data()[row_off * c..(row_off + rows) * c])
                    {
                        *dv += gv;
                    }
                    row_off += rows;
                }
            } else {
                let total = out_shape[1];
                let rows = out_shape[0];
                let mut col_off = 0;
                for (id, sh) in ids.iter().zip(&shapes) {
                    let c = sh[1];
                    let slot = store.slot(*id, sh);
                    for i in 0..rows {
                        for j in 0..c {
                            slot[i * c + j] += g.data()[i * total + col_off + j];
                        }
                    }
                    col_off += c;
                }
            }
        }))
    } else {
        None
    };
    first.tape().push(out, requires, back)
}

// ── Finite-difference oracle ─────────────────────────────────────────

/// Result of a gradient check: worst relative error seen.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

/// Compares analytic gradients with central finite differences at 64-bit
/// precision. `build` reconstructs the scalar loss from leaf tensors; it is
/// invoked on fresh tapes with perturbed inputs, so it must be a pure
/// function of them. Relative error is |analytic - fd| / max(1, |fd|).
///
/// `max_coords_per_input` caps how many coordinates of each input are probed
/// (deterministically spread over the tensor); `None` checks all of them.
pub fn finite_difference_check<F>(
    inputs: &[Array<f64>],
    h: f64,
    max_coords_per_input: Option<usize>,
    build: F,
) -> GradCheck
where
    F: Fn(&Tape<f64>, &[Tensor<f64>]) -> Tensor<f64>,
{
    let eval = |arrays: &[Array<f64>]| -> f64 {
        let tape = Tape::new();
        let leaves: Vec<Tensor<f64>> = arrays.iter().map(|a| tape.constant(a.clone())).collect();
        build(&tape, &leaves).item()
    };

    // Analytic gradients.
    let tape = Tape::new();
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = build(&tape, &leaves);
    let grads = backward(&loss).expect("loss must be scalar");

    let mut max_rel_err: f64 = 0.0;
    let mut coords_checked = 0usize;
    let mut work: Vec<Array<f64>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = grads.of_or_zeros(&leaves[ti]);
        let n = input.numel();
        let stride = match max_coords_per_input {
            Some(cap) if n > cap => (n + cap - 1) / cap,
            _ => 1,
        };
        let mut ci = 0;
        while ci < n {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + h;
            let up = eval(&work);
            work[ti].data_mut()[ci] = orig - h;
            let down = eval(&work);
            work[ti].data_mut()[ci] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (analytic.data()[ci] - fd).abs() / fd.abs().max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            coords_checked += 1;
            ci += stride;
        }
    }
    GradCheck {
        max_rel_err,
        coords_checked,
    }
}
