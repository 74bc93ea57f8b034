//! Reverse-mode autodiff over [`Tensor`] values.
//!
//! A [`Graph`] records every forward operation as a node; node ids grow in
//! topological order, so the backward pass is a single reverse sweep (the
//! graph is acyclic by construction). Parameters enter a step as leaf nodes,
//! gradients are read back out after [`Graph::backward`].

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::{concat as t_concat, matmul as t_matmul, slice as t_slice, transpose as t_transpose};
use crate::tensor::{map_lanes, slice_backward, sum_to_suffix, Tensor};

const GELU_COEF: f64 = 0.044715;

enum Op<F> {
    Leaf,
    Add(usize, usize),
    /// rhs shape is a suffix of lhs shape; rhs is repeated over leading axes.
    AddBcast(usize, usize),
    Mul(usize, usize),
    MulBcast(usize, usize),
    Scale(usize, F),
    Matmul(usize, usize),
    Transpose(usize, Vec<usize>),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize),
    BroadcastLeading(usize),
    /// saved softmax output
    Softmax(usize, usize),
    /// saved normalized output plus per-lane 1/sqrt(var + eps)
    LayerNorm(usize, usize, Tensor<F>),
    Relu(usize),
    Gelu(usize),
    /// saved keep mask already scaled by 1/(1-p)
    Dropout(usize, Vec<F>),
    /// table node, row ids, embedding width
    EmbeddingLookup(usize, Vec<usize>, usize),
    /// mask entries with 1 were overwritten by the fill constant
    MaskedFill(usize, Vec<u8>),
    /// saved normalized output plus per-lane 1/norm
    L2Normalize(usize, usize, Tensor<F>),
    SumAll(usize),
    MeanAll(usize),
    /// logits node, labels, saved softmax probabilities
    CrossEntropy(usize, Vec<usize>, Tensor<F>),
    /// per-position scaling of the last axis by a constant (B, W) mask
    ScalePositions(usize, Vec<F>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

struct GraphInner<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
}

/// Recording tape for one forward/backward pass.
pub struct Graph<F: Scalar> {
    inner: Rc<RefCell<GraphInner<F>>>,
}

impl<F: Scalar> Clone for Graph<F> {
    fn clone(&self) -> Self {
        Graph { inner: Rc::clone(&self.inner) }
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node in a [`Graph`]. Cheap to clone.
pub struct Var<F: Scalar> {
    graph: Graph<F>,
    id: usize,
}

impl<F: Scalar> Clone for Var<F> {
    fn clone(&self) -> Self {
        Var { graph: self.graph.clone(), id: self.id }
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { inner: Rc::new(RefCell::new(GraphInner { nodes: Vec::new(), grads: Vec::new() })) }
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var<F> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { value, op, needs_grad });
        inner.grads.push(None);
        Var { graph: self.clone(), id }
    }

    /// Trainable leaf; gradients will be accumulated for it.
    pub fn param(&self, value: Tensor<F>) -> Var<F> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf (inputs, constants).
    pub fn constant(&self, value: Tensor<F>) -> Var<F> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zero_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        for g in inner.grads.iter_mut() {
            *g = None;
        }
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate across calls
    /// until [`Graph::zero_grads`]. Node ids are topologically ordered by
    /// construction, so no cycle can exist.
    pub fn backward(&self, loss: &Var<F>) {
        let mut inner = self.inner.borrow_mut();
        let inner = &mut *inner;
        assert_eq!(
            inner.nodes[loss.id].value.len(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            inner.nodes[loss.id].value.shape()
        );
        let mut pending: Vec<Option<Tensor<F>>> = vec![None; inner.nodes.len()];
        pending[loss.id] = Some(Tensor::full(inner.nodes[loss.id].value.shape().to_vec(), F::one()));

        for id in (0..=loss.id).rev() {
            let grad = match pending[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !inner.nodes[id].needs_grad {
                continue;
            }
            let mut send = |pid: usize, g: Tensor<F>, pending: &mut Vec<Option<Tensor<F>>>| {
                match &mut pending[pid] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &inner.nodes[id].op {
                Op::Leaf => {
                    match &mut inner.grads[id] {
                        Some(acc) => acc.add_assign(&grad),
                        slot @ None => *slot = Some(grad),
                    }
                    continue;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    send(a, grad.clone(), &mut pending);
                    send(b, grad, &mut pending);
                }
                Op::AddBcast(a, b) => {
                    let (a, b) = (*a, *b);
                    let suffix = inner.nodes[b].value.shape().to_vec();
                    send(b, sum_to_suffix(&grad, &suffix), &mut pending);
                    send(a, grad, &mut pending);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = elementwise(&grad, &inner.nodes[b].value, |g, v| g * v);
                    let gb = elementwise(&grad, &inner.nodes[a].value, |g, v| g * v);
                    send(a, ga, &mut pending);
                    send(b, gb, &mut pending);
                }
                Op::MulBcast(a, b) => {
                    let (a, b) = (*a, *b);
                    let b_val = &inner.nodes[b].value;
                    let ga = mul_suffix(&grad, b_val);
                    let prod = elementwise(&grad, &inner.nodes[a].value, |g, v| g * v);
                    let gb = sum_to_suffix(&prod, b_val.shape());
                    send(a, ga, &mut pending);
                    send(b, gb, &mut pending);
                }
                Op::Scale(a, c) => {
                    let (a, c) = (*a, *c);
                    send(a, grad.map(|g| g * c), &mut pending);
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let a_val = &inner.nodes[a].value;
                    let b_val = &inner.nodes[b].value;
                    let ga = {
                        let bt = transpose_last2(b_val);
                        t_matmul(&grad, &bt)
                    };
                    let gb = if b_val.rank() == 2 && a_val.rank() > 2 {
                        let k = a_val.shape()[a_val.rank() - 1];
                        let n = grad.shape()[grad.rank() - 1];
                        let rows = a_val.len() / k;
                        let a_flat = a_val.reshaped(vec![rows, k]);
                        let g_flat = grad.reshaped(vec![rows, n]);
                        t_matmul(&t_transpose(&a_flat, &[1, 0]), &g_flat)
                    } else {
                        t_matmul(&transpose_last2(a_val), &grad)
                    };
                    send(a, ga, &mut pending);
                    send(b, gb, &mut pending);
                }
                Op::Transpose(a, perm) => {
                    let a = *a;
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    send(a, t_transpose(&grad, &inv), &mut pending);
                }
                Op::Reshape(a) => {
                    let a = *a;
                    let shape = inner.nodes[a].value.shape().to_vec();
                    send(a, grad.reshaped(shape), &mut pending);
                }
                Op::Concat(parts, axis) => {
                    let parts = parts.clone();
                    let axis = *axis;
                    let mut offset = 0;
                    for pid in parts {
                        let len = inner.nodes[pid].value.shape()[axis];
                        let piece = t_slice(&grad, axis, offset, len);
                        offset += len;
                        send(pid, piece, &mut pending);
                    }
                }
                Op::Slice(a, axis, start) => {
                    let (a, axis, start) = (*a, *axis, *start);
                    let full = inner.nodes[a].value.shape().to_vec();
                    send(a, slice_backward(&grad, &full, axis, start), &mut pending);
                }
                Op::BroadcastLeading(a) => {
                    let a = *a;
                    let suffix = inner.nodes[a].value.shape().to_vec();
                    send(a, sum_to_suffix(&grad, &suffix), &mut pending);
                }
                Op::Softmax(a, axis) => {
                    let (a, axis) = (*a, *axis);
                    let y = &inner.nodes[id].value;
                    let gx = softmax_backward(&grad, y, axis);
                    send(a, gx, &mut pending);
                }
                Op::LayerNorm(a, axis, inv_std) => {
                    let (a, axis) = (*a, *axis);
                    let y = &inner.nodes[id].value;
                    let gx = layernorm_backward(&grad, y, inv_std, axis);
                    send(a, gx, &mut pending);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let x = &inner.nodes[a].value;
                    let gx = elementwise(&grad, x, |g, v| if v > F::zero() { g } else { F::zero() });
                    send(a, gx, &mut pending);
                }
                Op::Gelu(a) => {
                    let a = *a;
                    let x = &inner.nodes[a].value;
                    let gx = elementwise(&grad, x, |g, v| g * gelu_derivative(v));
                    send(a, gx, &mut pending);
                }
                Op::Dropout(a, mask) => {
                    let a = *a;
                    let mut gx = grad;
                    for (g, &m) in gx.data_mut().iter_mut().zip(mask.iter()) {
                        *g *= m;
                    }
                    send(a, gx, &mut pending);
                }
                Op::EmbeddingLookup(table, ids, dim) => {
                    let (table, dim) = (*table, *dim);
                    let table_shape = inner.nodes[table].value.shape().to_vec();
                    let mut gt = Tensor::zeros(table_shape);
                    for (row, &id_) in ids.iter().enumerate() {
                        let src = &grad.data()[row * dim..(row + 1) * dim];
                        let dst = &mut gt.data_mut()[id_ * dim..(id_ + 1) * dim];
                        for (d, &s) in dst.iter_mut().zip(src.iter()) {
                            *d += s;
                        }
                    }
                    send(table, gt, &mut pending);
                }
                Op::MaskedFill(a, mask) => {
                    let a = *a;
                    let mut gx = grad;
                    for (g, &m) in gx.data_mut().iter_mut().zip(mask.iter()) {
                        if m != 0 {
                            *g = F::zero();
                        }
                    }
                    send(a, gx, &mut pending);
                }
                Op::L2Normalize(a, axis, inv_norm) => {
                    let (a, axis) = (*a, *axis);
                    let y = &inner.nodes[id].value;
                    let gx = l2_normalize_backward(&grad, y, inv_norm, axis);
                    send(a, gx, &mut pending);
                }
                Op::SumAll(a) => {
                    let a = *a;
                    let g = grad.item();
                    let shape = inner.nodes[a].value.shape().to_vec();
                    send(a, Tensor::full(shape, g), &mut pending);
                }
                Op::MeanAll(a) => {
                    let a = *a;
                    let n = inner.nodes[a].value.len();
                    let g = grad.item() / F::from_f64(n as f64);
                    let shape = inner.nodes[a].value.shape().to_vec();
                    send(a, Tensor::full(shape, g), &mut pending);
                }
                Op::CrossEntropy(logits, labels, probs) => {
                    let logits = *logits;
                    let rows = labels.len();
                    let cols = probs.shape()[1];
                    let scale = grad.item() / F::from_f64(rows as f64);
                    let mut gl = probs.clone();
                    for (r, &label) in labels.iter().enumerate() {
                        gl.data_mut()[r * cols + label] -= F::one();
                    }
                    for v in gl.data_mut() {
                        *v *= scale;
                    }
                    send(logits, gl, &mut pending);
                }
                Op::ScalePositions(a, mask) => {
                    let a = *a;
                    let d: usize = *inner.nodes[a].value.shape().last().unwrap();
                    let mut gx = grad;
                    for (pos, chunk) in gx.data_mut().chunks_exact_mut(d).enumerate() {
                        let m = mask[pos];
                        for g in chunk.iter_mut() {
                            *g *= m;
                        }
                    }
                    send(a, gx, &mut pending);
                }
            }
        }
    }

    /// Accumulated gradient of a leaf (None if backward never reached it).
    pub fn grad(&self, var: &Var<F>) -> Option<Tensor<F>> {
        self.inner.borrow().grads[var.id].clone()
    }

    /// Concatenate along `axis`.
    pub fn concat(&self, parts: &[&Var<F>], axis: usize) -> Var<F> {
        let inner = self.inner.borrow();
        let tensors: Vec<&Tensor<F>> = parts.iter().map(|v| &inner.nodes[v.id].value).collect();
        let out = t_concat(&tensors, axis);
        let needs = parts.iter().any(|v| inner.nodes[v.id].needs_grad);
        let ids = parts.iter().map(|v| v.id).collect();
        drop(inner);
        self.push(out, Op::Concat(ids, axis), needs)
    }

    /// Row lookups into `table` (V, d); output is (ids.len(), d).
    pub fn embedding_lookup(&self, table: &Var<F>, ids: &[usize]) -> Var<F> {
        let inner = self.inner.borrow();
        let t = &inner.nodes[table.id].value;
        assert_eq!(t.rank(), 2, "embedding table must be 2-D, got {:?}", t.shape());
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        for &id in ids {
            assert!(id < vocab, "embedding id {} out of range for table of {} rows", id, vocab);
        }
        let mut out = Tensor::zeros(vec![ids.len(), dim]);
        for (row, &id) in ids.iter().enumerate() {
            out.data_mut()[row * dim..(row + 1) * dim]
                .copy_from_slice(&t.data()[id * dim..(id + 1) * dim]);
        }
        let needs = inner.nodes[table.id].needs_grad;
        drop(inner);
        self.push(out, Op::EmbeddingLookup(table.id, ids.to_vec(), dim), needs)
    }
}

impl<F: Scalar> Var<F> {
    pub fn graph(&self) -> &Graph<F> {
        &self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn value(&self) -> Tensor<F> {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn item(&self) -> F {
        self.graph.inner.borrow().nodes[self.id].value.item()
    }

    fn unary(&self, out: Tensor<F>, op: Op<F>) -> Var<F> {
        let needs = self.graph.inner.borrow().nodes[self.id].needs_grad;
        self.graph.push(out, op, needs)
    }

    fn binary(&self, other: &Var<F>, out: Tensor<F>, op: Op<F>) -> Var<F> {
        let inner = self.graph.inner.borrow();
        let needs = inner.nodes[self.id].needs_grad || inner.nodes[other.id].needs_grad;
        drop(inner);
        self.graph.push(out, op, needs)
    }

    pub fn add(&self, other: &Var<F>) -> Var<F> {
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id].value;
        let b = &inner.nodes[other.id].value;
        assert_eq!(a.shape(), b.shape(), "add shape {:?} vs {:?}", a.shape(), b.shape());
        let out = elementwise(a, b, |x, y| x + y);
        drop(inner);
        self.binary(other, out, Op::Add(self.id, other.id))
    }

    /// Add `other` (whose shape must be a suffix of `self`'s) to every
    /// leading slice; this is the bias-add pattern.
    pub fn add_bcast(&self, other: &Var<F>) -> Var<F> {
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id].value;
        let b = &inner.nodes[other.id].value;
        assert_suffix(a.shape(), b.shape(), "add_bcast");
        let mut out = a.clone();
        let suffix_len = b.len();
        for chunk in out.data_mut().chunks_exact_mut(suffix_len) {
            for (c, &v) in chunk.iter_mut().zip(b.data().iter()) {
                *c += v;
            }
        }
        drop(inner);
        self.binary(other, out, Op::AddBcast(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<F>) -> Var<F> {
        self.add(&other.scale(-F::one()))
    }

    pub fn mul(&self, other: &Var<F>) -> Var<F> {
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id].value;
        let b = &inner.nodes[other.id].value;
        assert_eq!(a.shape(), b.shape(), "mul shape {:?} vs {:?}", a.shape(), b.shape());
        let out = elementwise(a, b, |x, y| x * y);
        drop(inner);
        self.binary(other, out, Op::Mul(self.id, other.id))
    }

    /// Multiply by `other` broadcast over leading axes (the layer-norm
    /// gain pattern).
    pub fn mul_bcast(&self, other: &Var<F>) -> Var<F> {
        let inner = self.graph.inner.borrow();
        let a = &inner.nodes[self.id].value;
        let b = &inner.nodes[other.id].value;
        assert_suffix(a.shape(), b.shape(), "mul_bcast");
        let out = mul_suffix(a, b);
        drop(inner);
        self.binary(other, out, Op::MulBcast(self.id, other.id))
    }

    pub fn scale(&self, c: F) -> Var<F> {
        let out = self.graph.inner.borrow().nodes[self.id].value.map(|v| v * c);
        self.unary(out, Op::Scale(self.id, c))
    }

    pub fn matmul(&self, other: &Var<F>) -> Var<F> {
        let inner = self.graph.inner.borrow();
        let out = t_matmul(&inner.nodes[self.id].value, &inner.nodes[other.id].value);
        drop(inner);
        self.binary(other, out, Op::Matmul(self.id, other.id))
    }

    pub fn transpose(&self, perm: &[usize]) -> Var<F> {
        let out = t_transpose(&self.graph.inner.borrow().nodes[self.id].value, perm);
        self.unary(out, Op::Transpose(self.id, perm.to_vec()))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Var<F> {
        let out = self.graph.inner.borrow().nodes[self.id].value.reshaped(shape);
        self.unary(out, Op::Reshape(self.id))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Var<F> {
        let out = t_slice(&self.graph.inner.borrow().nodes[self.id].value, axis, start, len);
        self.unary(out, Op::Slice(self.id, axis, start))
    }

    /// Repeat `self` across new leading axes.
    pub fn broadcast_leading(&self, leading: &[usize]) -> Var<F> {
        let inner = self.graph.inner.borrow();
        let v = &inner.nodes[self.id].value;
        let mut shape = leading.to_vec();
        shape.extend_from_slice(v.shape());
        let reps: usize = leading.iter().product();
        let mut data = Vec::with_capacity(v.len() * reps);
        for _ in 0..reps {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(shape, data);
        drop(inner);
        self.unary(out, Op::BroadcastLeading(self.id))
    }

    pub fn softmax(&self, axis: usize) -> Var<F> {
        let inner = self.graph.inner.borrow();
        let out = map_lanes(&inner.nodes[self.id].value, axis, |lane, out| {
            let max = lane.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for (o, &v) in out.iter_mut().zip(lane.iter()) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            for o in out.iter_mut() {
                *o = *o / sum;
            }
        });
        drop(inner);
        self.unary(out, Op::Softmax(self.id, axis))
    }

    /// Normalize each lane along `axis` to zero mean and unit variance
    /// (population variance plus `eps`); affine gain/shift is applied by the
    /// caller with `mul_bcast`/`add_bcast`.
    pub fn layernorm(&self, axis: usize, eps: F) -> Var<F> {
        let inner = self.graph.inner.borrow();
        let value = &inner.nodes[self.id].value;
        let lane_len = value.shape()[axis];
        let mut inv_stds = Vec::with_capacity(value.len() / lane_len);
        let out = map_lanes(value, axis, |lane, out| {
            let n = F::from_f64(lane.len() as f64);
            let mean = lane.iter().fold(F::zero(), |a, &v| a + v) / n;
            let var = lane.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let inv_std = F::one() / (var + eps).sqrt();
            inv_stds.push(inv_std);
            for (o, &v) in out.iter_mut().zip(lane.iter()) {
                *o = (v - mean) * inv_std;
            }
        });
        drop(inner);
        let n_lanes = inv_stds.len();
        let inv_std = Tensor::new(vec![n_lanes], inv_stds);
        self.unary(out, Op::LayerNorm(self.id, axis, inv_std))
    }

    pub fn relu(&self) -> Var<F> {
        let out = self.graph.inner.borrow().nodes[self.id].value.map(|v| v.max(F::zero()));
        self.unary(out, Op::Relu(self.id))
    }

    /// tanh-approximated GELU.
    pub fn gelu(&self) -> Var<F> {
        let out = self.graph.inner.borrow().nodes[self.id].value.map(gelu_value);
        self.unary(out, Op::Gelu(self.id))
    }

    /// Inverted dropout; identity when `train` is false or `p` is zero.
    pub fn dropout(&self, p: f64, train: bool, rng: &mut ChaCha8Rng) -> Var<F> {
        assert!((0.0..1.0).contains(&p), "dropout probability {} outside [0, 1)", p);
        if !train || p == 0.0 {
            return self.clone();
        }
        let keep_scale = F::from_f64(1.0 / (1.0 - p));
        let inner = self.graph.inner.borrow();
        let value = &inner.nodes[self.id].value;
        let mask: Vec<F> = (0..value.len())
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { keep_scale })
            .collect();
        let mut out = value.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(mask.iter()) {
            *o *= m;
        }
        drop(inner);
        self.unary(out, Op::Dropout(self.id, mask))
    }

    /// Overwrite entries where `mask` is nonzero with `fill`.
    pub fn masked_fill(&self, mask: &[u8], fill: F) -> Var<F> {
        let inner = self.graph.inner.borrow();
        let value = &inner.nodes[self.id].value;
        assert_eq!(mask.len(), value.len(), "mask length {} vs tensor {}", mask.len(), value.len());
        let mut out = value.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(mask.iter()) {
            if m != 0 {
                *o = fill;
            }
        }
        drop(inner);
        self.unary(out, Op::MaskedFill(self.id, mask.to_vec()))
    }

    /// Scale each lane along `axis` to unit L2 norm.
    ///
    /// Returns an error if any lane has zero norm.
    pub fn l2_normalize(&self, axis: usize) -> Result<Var<F>, ZeroNormError> {
        let inner = self.graph.inner.borrow();
        let value = &inner.nodes[self.id].value;
        let lane_len = value.shape()[axis];
        let mut inv_norms = Vec::with_capacity(value.len() / lane_len);
        let mut zero_lane = None;
        let out = map_lanes(value, axis, |lane, out| {
            let norm = lane.iter().fold(F::zero(), |a, &v| a + v * v).sqrt();
            if norm == F::zero() && zero_lane.is_none() {
                zero_lane = Some(inv_norms.len());
            }
            let inv = if norm == F::zero() { F::zero() } else { F::one() / norm };
            inv_norms.push(inv);
            for (o, &v) in out.iter_mut().zip(lane.iter()) {
                *o = v * inv;
            }
        });
        drop(inner);
        if let Some(lane) = zero_lane {
            return Err(ZeroNormError { lane });
        }
        let n_lanes = inv_norms.len();
        let inv_norm = Tensor::new(vec![n_lanes], inv_norms);
        Ok(self.unary(out, Op::L2Normalize(self.id, axis, inv_norm)))
    }

    pub fn sum_all(&self) -> Var<F> {
        let s = self.graph.inner.borrow().nodes[self.id].value.iter().fold(F::zero(), |a, &v| a + v);
        self.unary(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean_all(&self) -> Var<F> {
        let inner = self.graph.inner.borrow();
        let v = &inner.nodes[self.id].value;
        let s = v.iter().fold(F::zero(), |a, &x| a + x) / F::from_f64(v.len() as f64);
        drop(inner);
        self.unary(Tensor::scalar(s), Op::MeanAll(self.id))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `self` (shape (rows, classes)). Stable log-sum-exp; tolerates
    /// `-inf` logits on non-label entries.
    pub fn cross_entropy(&self, labels: &[usize]) -> Var<F> {
        let inner = self.graph.inner.borrow();
        let logits = &inner.nodes[self.id].value;
        assert_eq!(logits.rank(), 2, "cross_entropy expects (rows, classes), got {:?}", logits.shape());
        let (rows, cols) = (logits.shape()[0], logits.shape()[1]);
        assert_eq!(labels.len(), rows, "labels length {} vs rows {}", labels.len(), rows);
        let mut probs = Tensor::zeros(vec![rows, cols]);
        let mut total = F::zero();
        for r in 0..rows {
            let lane = &logits.data()[r * cols..(r + 1) * cols];
            let max = lane.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for (c, &v) in lane.iter().enumerate() {
                let e = (v - max).exp();
                probs.data_mut()[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                probs.data_mut()[r * cols + c] = probs.data()[r * cols + c] / sum;
            }
            let label = labels[r];
            assert!(label < cols, "label {} out of range for {} classes", label, cols);
            total += sum.ln() + max - lane[label];
        }
        let loss = total / F::from_f64(rows as f64);
        drop(inner);
        self.unary(Tensor::scalar(loss), Op::CrossEntropy(self.id, labels.to_vec(), probs))
    }

    /// Multiply each position's feature row by a constant per-position mask;
    /// `self` is (..., positions, features) flattened so that
    /// `mask.len() * features == self.len()`.
    pub fn scale_positions(&self, mask: &[F]) -> Var<F> {
        let inner = self.graph.inner.borrow();
        let value = &inner.nodes[self.id].value;
        let d = *value.shape().last().expect("scale_positions needs rank >= 1");
        assert_eq!(
            mask.len() * d,
            value.len(),
            "mask of {} positions does not tile shape {:?}",
            mask.len(),
            value.shape()
        );
        let mut out = value.clone();
        for (pos, chunk) in out.data_mut().chunks_exact_mut(d).enumerate() {
            let m = mask[pos];
            for o in chunk.iter_mut() {
                *o *= m;
            }
        }
        drop(inner);
        self.unary(out, Op::ScalePositions(self.id, mask.to_vec()))
    }
}

/// A lane with zero L2 norm where a normalized vector was required.
#[derive(Debug, thiserror::Error)]
#[error("zero-norm lane at index {lane} cannot be normalized")]
pub struct ZeroNormError {
    pub lane: usize,
}

fn assert_suffix(full: &[usize], suffix: &[usize], what: &str) {
    assert!(
        suffix.len() <= full.len() && full[full.len() - suffix.len()..] == *suffix,
        "{}: {:?} is not a suffix of {:?}",
        what,
        suffix,
        full
    );
}

fn elementwise<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    debug_assert_eq!(a.len(), b.len());
    Tensor::new(
        a.shape().to_vec(),
        a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn mul_suffix<F: Scalar>(a: &Tensor<F>, suffix: &Tensor<F>) -> Tensor<F> {
    let mut out = a.clone();
    let suffix_len = suffix.len();
    for chunk in out.data_mut().chunks_exact_mut(suffix_len) {
        for (c, &v) in chunk.iter_mut().zip(suffix.data().iter()) {
            *c *= v;
        }
    }
    out
}

fn transpose_last2<F: Scalar>(t: &Tensor<F>) -> Tensor<F> {
    let rank = t.rank();
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.swap(rank - 2, rank - 1);
    t_transpose(t, &perm)
}

fn gelu_value<F: Scalar>(x: F) -> F {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = F::from_f64(GELU_COEF);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_derivative<F: Scalar>(x: F) -> F {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = F::from_f64(GELU_COEF);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

fn softmax_backward<F: Scalar>(grad: &Tensor<F>, y: &Tensor<F>, axis: usize) -> Tensor<F> {
    let lane_len = y.shape()[axis];
    let mut grad_lanes = grad.data().chunks_exact(lane_len);
    if axis == y.rank() - 1 {
        map_lanes(y, axis, |y_lane, out| {
            let g_lane = grad_lanes.next().unwrap();
            let dot = g_lane.iter().zip(y_lane.iter()).fold(F::zero(), |a, (&g, &v)| a + g * v);
            for ((o, &g), &v) in out.iter_mut().zip(g_lane.iter()).zip(y_lane.iter()) {
                *o = v * (g - dot);
            }
        })
    } else {
        // gather the strided gradient lanes to align with map_lanes order
        let g_aligned = gather_lanes(grad, axis);
        let mut idx = 0;
        map_lanes(y, axis, |y_lane, out| {
            let g_lane = &g_aligned[idx * lane_len..(idx + 1) * lane_len];
            idx += 1;
            let dot = g_lane.iter().zip(y_lane.iter()).fold(F::zero(), |a, (&g, &v)| a + g * v);
            for ((o, &g), &v) in out.iter_mut().zip(g_lane.iter()).zip(y_lane.iter()) {
                *o = v * (g - dot);
            }
        })
    }
}

fn layernorm_backward<F: Scalar>(
    grad: &Tensor<F>,
    y: &Tensor<F>,
    inv_std: &Tensor<F>,
    axis: usize,
) -> Tensor<F> {
    let lane_len = y.shape()[axis];
    let g_aligned: Vec<F> = if axis == y.rank() - 1 {
        grad.data().to_vec()
    } else {
        gather_lanes(grad, axis)
    };
    let mut idx = 0;
    map_lanes(y, axis, |y_lane, out| {
        let g_lane = &g_aligned[idx * lane_len..(idx + 1) * lane_len];
        let s = inv_std.data()[idx];
        idx += 1;
        let n = F::from_f64(lane_len as f64);
        let g_mean = g_lane.iter().fold(F::zero(), |a, &g| a + g) / n;
        let gy_mean = g_lane.iter().zip(y_lane.iter()).fold(F::zero(), |a, (&g, &v)| a + g * v) / n;
        for ((o, &g), &v) in out.iter_mut().zip(g_lane.iter()).zip(y_lane.iter()) {
            *o = s * (g - g_mean - v * gy_mean);
        }
    })
}

fn l2_normalize_backward<F: Scalar>(
    grad: &Tensor<F>,
    y: &Tensor<F>,
    inv_norm: &Tensor<F>,
    axis: usize,
) -> Tensor<F> {
    let lane_len = y.shape()[axis];
    let g_aligned: Vec<F> = if axis == y.rank() - 1 {
        grad.data().to_vec()
    } else {
        gather_lanes(grad, axis)
    };
    let mut idx = 0;
    map_lanes(y, axis, |y_lane, out| {
        let g_lane = &g_aligned[idx * lane_len..(idx + 1) * lane_len];
        let s = inv_norm.data()[idx];
        idx += 1;
        let dot = g_lane.iter().zip(y_lane.iter()).fold(F::zero(), |a, (&g, &v)| a + g * v);
        for ((o, &g), &v) in out.iter_mut().zip(g_lane.iter()).zip(y_lane.iter()) {
            *o = s * (g - v * dot);
        }
    })
}

/// Lanes of `t` along `axis`, gathered contiguously in map_lanes visit order.
fn gather_lanes<F: Scalar>(t: &Tensor<F>, axis: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(t.len());
    map_lanes(t, axis, |lane, scratch| {
        out.extend_from_slice(lane);
        scratch.copy_from_slice(lane);
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn softmax_symmetric_pair() {
        let g = graph();
        let x = g.constant(Tensor::from_f64(vec![1, 2], &[0.0, 0.0]));
        let y = x.softmax(1).value();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let g = graph();
        let x = g.constant(Tensor::from_f64(vec![1, 4], &[3.0, 3.0, 3.0, 3.0]));
        let y = x.layernorm(1, 1e-5).value();
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn linear_map_gradient_broadcasts_input() {
        // loss = sum(W x) with fixed x: dloss/dW[i][j] = x[j]
        let g = graph();
        let w = g.param(Tensor::from_f64(vec![3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let x = g.constant(Tensor::from_f64(vec![2, 1], &[7.0, 11.0]));
        let loss = w.matmul(&x).sum_all();
        g.backward(&loss);
        let grad = g.grad(&w).unwrap();
        assert_eq!(grad.data(), &[7.0, 11.0, 7.0, 11.0, 7.0, 11.0]);
    }

    #[test]
    fn softmax_cross_entropy_closed_form() {
        let g = graph();
        let logits_data = [0.3, -1.2, 0.8, 2.0, 0.1, -0.4];
        let logits = g.param(Tensor::from_f64(vec![2, 3], &logits_data));
        let labels = [2usize, 0];
        let loss = logits.cross_entropy(&labels);
        g.backward(&loss);
        let grad = g.grad(&logits).unwrap();
        // expected (softmax - onehot) / rows
        for r in 0..2 {
            let lane = &logits_data[r * 3..(r + 1) * 3];
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = lane.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for c in 0..3 {
                let mut expect = exps[c] / sum;
                if c == labels[r] {
                    expect -= 1.0;
                }
                expect /= 2.0;
                assert!((grad.data()[r * 3 + c] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let g = graph();
        let x = g.param(Tensor::from_f64(vec![2], &[1.0, 2.0]));
        let loss = x.scale(3.0).sum_all();
        g.backward(&loss);
        g.backward(&loss);
        assert_eq!(g.grad(&x).unwrap().data(), &[6.0, 6.0]);
        g.zero_grads();
        assert!(g.grad(&x).is_none());
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let g = graph();
        let x = g.param(Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]));
        let y = x.masked_fill(&[0, 1, 0], -5.0);
        assert_eq!(y.value().data(), &[1.0, -5.0, 3.0]);
        let loss = y.sum_all();
        g.backward(&loss);
        assert_eq!(g.grad(&x).unwrap().data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn l2_normalize_zero_row_errors() {
        let g = graph();
        let x = g.constant(Tensor::from_f64(vec![2, 2], &[0.0, 0.0, 1.0, 1.0]));
        assert!(x.l2_normalize(1).is_err());
    }

    #[test]
    fn embedding_lookup_scatters_gradients() {
        let g = graph();
        let table = g.param(Tensor::from_f64(vec![3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let out = g.embedding_lookup(&table, &[2, 0, 2]);
        assert_eq!(out.value().data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        let loss = out.sum_all();
        g.backward(&loss);
        assert_eq!(g.grad(&table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
