//! Shape arithmetic and the raw compute loops shared by forward and backward.

use crate::Scalar;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Numpy-style broadcast of two shapes: align right, extents must match or be 1.
pub(crate) fn broadcast_shapes(op: &str, a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "{op}: shapes {a:?} and {b:?} are not broadcast-compatible"
        );
        out[i] = da.max(db);
    }
    out
}

/// Left-pad a shape with 1s to the given rank.
pub(crate) fn pad_shape(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut padded = vec![1usize; rank];
    padded[rank - shape.len()..].copy_from_slice(shape);
    padded
}

/// Row-major strides, with stride 0 on broadcast (extent-1) axes relative to
/// the target shape.
fn broadcast_strides(src: &[usize], target_rank: usize) -> Vec<usize> {
    let padded = pad_shape(src, target_rank);
    let mut strides = vec![0usize; target_rank];
    let mut acc = 1usize;
    for d in (0..target_rank).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    strides
}

/// Elementwise binary op with broadcasting.
pub(crate) fn binary_broadcast<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if a_shape == b_shape {
        return a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
    }
    let rank = out_shape.len();
    let sa = broadcast_strides(a_shape, rank);
    let sb = broadcast_strides(b_shape, rank);
    let n = numel(out_shape);
    let mut out = Vec::with_capacity(n);
    let mut coords = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for _ in 0..n {
        out.push(f(a[ia], b[ib]));
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Sum a gradient in `grad_shape` down to `target_shape` over broadcast axes.
pub(crate) fn reduce_to_shape<T: Scalar>(
    grad: &[T],
    grad_shape: &[usize],
    target_shape: &[usize],
) -> Vec<T> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let rank = grad_shape.len();
    let strides = broadcast_strides(target_shape, rank);
    let mut out = vec![T::zero(); numel(target_shape)];
    let mut coords = vec![0usize; rank];
    let mut it = 0usize;
    for &g in grad {
        out[it] = out[it] + g;
        for d in (0..rank).rev() {
            coords[d] += 1;
            it += strides[d];
            if coords[d] < grad_shape[d] {
                break;
            }
            coords[d] = 0;
            it -= strides[d] * grad_shape[d];
        }
    }
    out
}

// ── Matrix kernels (row-major, cache-friendly loop orders) ──────────────

/// C += A[m,k] · B[k,n]
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aip * brow[j];
            }
        }
    }
}

/// C += A[m,k] · B[n,k]ᵀ
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for p in 0..k {
                s = s + arow[p] * brow[p];
            }
            c[i * n + j] = c[i * n + j] + s;
        }
    }
}

/// C += A[k,m]ᵀ · B[k,n]
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = arow[i];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + api * brow[j];
            }
        }
    }
}
