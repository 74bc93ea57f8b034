//! Dense row-major tensor container and the raw kernels the graph ops build on.

use crate::scalar::Scalar;
use rayon::prelude::*;

/// Work threshold (multiply-adds) above which matmul parallelizes over rows.
const PAR_FLOP_THRESHOLD: usize = 1 << 20;

/// N-dimensional dense array, row-major, at most 4 axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        assert!(
            shape.len() <= 4,
            "tensor rank {} exceeds the supported maximum of 4",
            shape.len()
        );
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} implies {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![F::zero(); numel])
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    pub fn scalar(value: F) -> Self {
        Tensor::new(vec![], vec![value])
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Self {
        Tensor::new(shape, data.iter().map(|&v| F::from_f64(v)).collect())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on tensor of {} elements", self.data.len());
        self.data[0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, F> {
        self.data.iter()
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.data.len(),
            "cannot reshape {:?} ({} elements) to {:?}",
            self.shape,
            self.data.len(),
            shape
        );
        Tensor { shape, data: self.data.clone() }
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        assert_eq!(self.shape, other.shape, "add_assign shape {:?} vs {:?}", self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    /// Frobenius (flat L2) norm.
    pub fn l2_norm(&self) -> F {
        self.data.iter().fold(F::zero(), |acc, &v| acc + v * v).sqrt()
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Visit every lane along `axis`, gathering it into a scratch slice and
/// scattering the transformed values back. `f` maps (lane_in, lane_out).
pub(crate) fn map_lanes<F: Scalar>(
    input: &Tensor<F>,
    axis: usize,
    mut f: impl FnMut(&[F], &mut [F]),
) -> Tensor<F> {
    let shape = input.shape();
    assert!(axis < shape.len(), "axis {} out of range for shape {:?}", axis, shape);
    let lane_len = shape[axis];
    let st = strides(shape);
    let lane_stride = st[axis];
    let n_lanes = input.len() / lane_len;
    let mut out = Tensor::zeros(shape.to_vec());

    if axis == shape.len() - 1 {
        // contiguous fast path
        let mut scratch = vec![F::zero(); lane_len];
        for (i, lane) in input.data().chunks_exact(lane_len).enumerate() {
            f(lane, &mut scratch);
            out.data_mut()[i * lane_len..(i + 1) * lane_len].copy_from_slice(&scratch);
        }
        return out;
    }

    let outer = if axis == 0 { 1 } else { shape[..axis].iter().product::<usize>() };
    let inner = st[axis];
    let mut lane_in = vec![F::zero(); lane_len];
    let mut lane_out = vec![F::zero(); lane_len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * lane_len * inner + i;
            for (k, v) in lane_in.iter_mut().enumerate() {
                *v = input.data()[base + k * lane_stride];
            }
            f(&lane_in, &mut lane_out);
            for (k, &v) in lane_out.iter().enumerate() {
                out.data_mut()[base + k * lane_stride] = v;
            }
        }
    }
    debug_assert_eq!(outer * inner, n_lanes);
    out
}

/// Batched matrix multiply. `a` is `(..., m, k)`; `b` is either `(k, n)`
/// (shared across the batch) or `(..., k, n)` with identical leading axes.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let ar = a.rank();
    let br = b.rank();
    assert!(ar >= 2 && br >= 2, "matmul needs rank >= 2, got {:?} x {:?}", a.shape(), b.shape());
    let m = a.shape()[ar - 2];
    let k = a.shape()[ar - 1];
    let (kb, n) = (b.shape()[br - 2], b.shape()[br - 1]);
    assert_eq!(k, kb, "matmul inner dims differ: {:?} x {:?}", a.shape(), b.shape());
    let batch: usize = a.shape()[..ar - 2].iter().product();
    let b_batched = br > 2;
    if b_batched {
        assert_eq!(
            a.shape()[..ar - 2],
            b.shape()[..br - 2],
            "matmul leading axes differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        );
    }

    let mut out_shape = a.shape()[..ar - 2].to_vec();
    out_shape.push(m);
    out_shape.push(n);
    let mut out = Tensor::zeros(out_shape);

    let a_data = a.data();
    let b_data = b.data();
    let rows = batch * m;
    let work = rows * k * n;

    let row_kernel = |row: usize, c_row: &mut [F]| {
        let bi = row / m;
        let a_row = &a_data[row * k..(row + 1) * k];
        let b_mat = if b_batched { &b_data[bi * k * n..(bi + 1) * k * n] } else { b_data };
        for (kk, &av) in a_row.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let b_row = &b_mat[kk * n..(kk + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *c = *c + av * bv;
            }
        }
    };

    if work >= PAR_FLOP_THRESHOLD {
        out.data_mut()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(|(row, c_row)| row_kernel(row, c_row));
    } else {
        for (row, c_row) in out.data_mut().chunks_exact_mut(n).enumerate() {
            row_kernel(row, c_row);
        }
    }
    out
}

/// Permute axes.
pub fn transpose<F: Scalar>(t: &Tensor<F>, perm: &[usize]) -> Tensor<F> {
    let rank = t.rank();
    assert_eq!(perm.len(), rank, "perm {:?} does not match rank {}", perm, rank);
    let mut seen = vec![false; rank];
    for &p in perm {
        assert!(p < rank && !seen[p], "invalid permutation {:?}", perm);
        seen[p] = true;
    }
    let in_shape = t.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let out_strides = strides(&out_shape);
    let mut out = Tensor::zeros(out_shape.clone());
    let numel = t.len();
    let out_data = out.data_mut();
    for (i, &v) in t.data().iter().enumerate() {
        let mut rem = i;
        let mut oi = 0;
        for d in 0..rank {
            let coord = rem / in_strides[d];
            rem %= in_strides[d];
            // position of input axis d in the output
            let od = perm.iter().position(|&p| p == d).unwrap();
            oi += coord * out_strides[od];
        }
        out_data[oi] = v;
    }
    debug_assert_eq!(numel, out_data.len());
    out
}

/// Concatenate along `axis`; all other axes must agree.
pub fn concat<F: Scalar>(parts: &[&Tensor<F>], axis: usize) -> Tensor<F> {
    assert!(!parts.is_empty(), "concat of zero tensors");
    let rank = parts[0].rank();
    assert!(axis < rank, "concat axis {} out of range", axis);
    let mut out_shape = parts[0].shape().to_vec();
    let mut axis_total = 0;
    for p in parts {
        assert_eq!(p.rank(), rank, "concat rank mismatch");
        for d in 0..rank {
            if d != axis {
                assert_eq!(
                    p.shape()[d],
                    out_shape[d],
                    "concat shapes differ off-axis: {:?} vs {:?}",
                    p.shape(),
                    out_shape
                );
            }
        }
        axis_total += p.shape()[axis];
    }
    out_shape[axis] = axis_total;

    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let mut out = Tensor::zeros(out_shape);
    let out_data = out.data_mut();
    let mut axis_offset = 0;
    for p in parts {
        let p_axis = p.shape()[axis];
        let block = p_axis * inner;
        for o in 0..outer {
            let src = &p.data()[o * block..(o + 1) * block];
            let dst_start = o * axis_total * inner + axis_offset * inner;
            out_data[dst_start..dst_start + block].copy_from_slice(src);
        }
        axis_offset += p_axis;
    }
    out
}

/// Take `len` indices starting at `start` along `axis`.
pub fn slice<F: Scalar>(t: &Tensor<F>, axis: usize, start: usize, len: usize) -> Tensor<F> {
    let rank = t.rank();
    assert!(axis < rank, "slice axis {} out of range", axis);
    assert!(
        start + len <= t.shape()[axis],
        "slice [{}, {}) exceeds axis size {}",
        start,
        start + len,
        t.shape()[axis]
    );
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let axis_len = t.shape()[axis];
    let mut out_shape = t.shape().to_vec();
    out_shape[axis] = len;
    let mut out = Tensor::zeros(out_shape);
    let out_data = out.data_mut();
    for o in 0..outer {
        let src_start = o * axis_len * inner + start * inner;
        let dst_start = o * len * inner;
        out_data[dst_start..dst_start + len * inner]
            .copy_from_slice(&t.data()[src_start..src_start + len * inner]);
    }
    out
}

/// Scatter `src` (shaped like the slice) back into a zero tensor of `full_shape`.
pub(crate) fn slice_backward<F: Scalar>(
    src: &Tensor<F>,
    full_shape: &[usize],
    axis: usize,
    start: usize,
) -> Tensor<F> {
    let len = src.shape()[axis];
    let outer: usize = full_shape[..axis].iter().product();
    let inner: usize = full_shape[axis + 1..].iter().product();
    let axis_len = full_shape[axis];
    let mut out = Tensor::zeros(full_shape.to_vec());
    let out_data = out.data_mut();
    for o in 0..outer {
        let dst_start = o * axis_len * inner + start * inner;
        let src_start = o * len * inner;
        out_data[dst_start..dst_start + len * inner]
            .copy_from_slice(&src.data()[src_start..src_start + len * inner]);
    }
    out
}

/// Sum over the leading axes so that `t` collapses to `suffix_shape`.
pub(crate) fn sum_to_suffix<F: Scalar>(t: &Tensor<F>, suffix_shape: &[usize]) -> Tensor<F> {
    let suffix_len: usize = suffix_shape.iter().product();
    assert!(suffix_len > 0 && t.len() % suffix_len == 0);
    let mut out = Tensor::zeros(suffix_shape.to_vec());
    let out_data = out.data_mut();
    for chunk in t.data().chunks_exact(suffix_len) {
        for (o, &v) in out_data.iter_mut().zip(chunk.iter()) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let x = Tensor::<f64>::from_f64(vec![3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let i3 = Tensor::<f64>::eye(3);
        assert_eq!(matmul(&i3, &x), x);
    }

    #[test]
    fn matmul_batched_rhs() {
        // (2,1,2) x (2,2,2)
        let a = Tensor::<f64>::from_f64(vec![2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::<f64>::from_f64(vec![2, 2, 2], &[1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.shape(), &[2, 1, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 6.0, 8.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let t = Tensor::<f64>::from_f64(vec![2, 3, 4], &(0..24).map(|i| i as f64).collect::<Vec<_>>());
        let p = transpose(&t, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = transpose(&p, &[1, 2, 0]);
        assert_eq!(back, t);
    }

    #[test]
    fn concat_slice_inverse() {
        let a = Tensor::<f64>::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::<f64>::from_f64(vec![2, 3], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let c = concat(&[&a, &b], 1);
        assert_eq!(c.shape(), &[2, 5]);
        assert_eq!(slice(&c, 1, 0, 2), a);
        assert_eq!(slice(&c, 1, 2, 3), b);
    }

    #[test]
    fn sum_to_suffix_bias_pattern() {
        let t = Tensor::<f64>::from_f64(vec![2, 2, 3], &(0..12).map(|i| i as f64).collect::<Vec<_>>());
        let s = sum_to_suffix(&t, &[3]);
        assert_eq!(s.data(), &[0.0 + 3.0 + 6.0 + 9.0, 1.0 + 4.0 + 7.0 + 10.0, 2.0 + 5.0 + 8.0 + 11.0]);
    }
}
