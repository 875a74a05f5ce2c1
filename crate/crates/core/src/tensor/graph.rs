//! Operation-recording graph and reverse-mode gradient propagation.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{CrtError, Result};
use crate::Scalar;

use super::kernels::{
    binary_broadcast, broadcast_shapes, gemm_nn, gemm_nt, gemm_tn, numel, pad_shape,
    reduce_to_shape,
};

/// Handle to a tensor recorded on a [`Graph`]. Valid only for the graph that
/// produced it; graphs are confined to a single logical thread.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

/// Precomputed per-position rotation tables for rotary embeddings: one
/// (cos, sin) entry per token position and dimension pair.
#[derive(Debug)]
pub struct RopeTables<T> {
    pub positions: usize,
    pub half: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

enum Step<T> {
    Leaf,
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Div { a: VarId, b: VarId },
    MatMul { a: VarId, b: VarId },
    Permute { a: VarId, perm: Vec<usize> },
    Reshape { a: VarId },
    Concat { parts: Vec<VarId>, axis: usize },
    Slice { a: VarId, axis: usize, start: usize },
    Sum { a: VarId, axis: Option<usize> },
    Mean { a: VarId, axis: Option<usize> },
    Softmax { a: VarId },
    LayerNorm { x: VarId, scale: VarId, shift: VarId, xhat: Rc<Vec<T>>, inv_std: Rc<Vec<T>> },
    Gelu { a: VarId },
    Sigmoid { a: VarId },
    Log { a: VarId },
    Exp { a: VarId },
    ScalarMul { a: VarId, c: T },
    Abs { a: VarId },
    Correlate2d { signal: VarId, kernel: Rc<Vec<T>>, kh: usize, kw: usize },
    Rope { a: VarId, tables: Rc<RopeTables<T>> },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Rc<Vec<T>>,
    step: Step<T>,
    needs_grad: bool,
    grad: Option<Vec<T>>,
}

/// Single-threaded operation tape. Ops record a backward step only when an
/// operand requires gradients (and the graph is in recording mode), so
/// inference pays no bookkeeping beyond storing results.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), recording: true }
    }

    /// Graph that never records backward information.
    pub fn inference() -> Self {
        Graph { nodes: RefCell::new(Vec::new()), recording: false }
    }

    fn push(&self, shape: Vec<usize>, data: Vec<T>, step: Step<T>, needs_grad: bool) -> VarId {
        debug_assert_eq!(numel(&shape), data.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let (step, needs_grad) = if self.recording && needs_grad {
            (step, true)
        } else {
            (Step::Leaf, false)
        };
        nodes.push(Node { shape, data: Rc::new(data), step, needs_grad, grad: None });
        VarId(id)
    }

    /// Tensor that does not require gradients.
    pub fn constant(&self, data: Vec<T>, shape: &[usize]) -> VarId {
        assert_eq!(
            numel(shape),
            data.len(),
            "constant: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(shape.to_vec(), data, Step::Leaf, false)
    }

    /// Gradient-requiring leaf (a parameter or checked input).
    pub fn leaf(&self, data: Vec<T>, shape: &[usize]) -> VarId {
        assert_eq!(
            numel(shape),
            data.len(),
            "leaf: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let needs = self.recording;
        nodes.push(Node {
            shape: shape.to_vec(),
            data: Rc::new(data),
            step: Step::Leaf,
            needs_grad: needs,
            grad: None,
        });
        VarId(id)
    }

    pub fn scalar(&self, v: T) -> VarId {
        self.constant(vec![v], &[1])
    }

    pub fn data(&self, v: VarId) -> Rc<Vec<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].data)
    }

    pub fn shape(&self, v: VarId) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self, v: VarId) -> T {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[v.0].data.len(), 1, "item: tensor is not scalar");
        nodes[v.0].data[0]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Accumulated gradient of a tensor, if backward reached it.
    pub fn grad(&self, v: VarId) -> Option<Vec<T>> {
        self.nodes.borrow()[v.0].grad.clone()
    }

    pub fn zero_grads(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    fn needs(&self, v: VarId) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    // ── Elementwise binary ops (numpy-style broadcasting) ───────────────

    fn binary(&self, op: &'static str, a: VarId, b: VarId, f: impl Fn(T, T) -> T) -> (Vec<usize>, Vec<T>) {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        let out_shape = broadcast_shapes(op, &na.shape, &nb.shape);
        let out = binary_broadcast(&na.data, &na.shape, &nb.data, &nb.shape, &out_shape, f);
        (out_shape, out)
    }

    pub fn add(&self, a: VarId, b: VarId) -> VarId {
        let (shape, out) = self.binary("add", a, b, |x, y| x + y);
        self.push(shape, out, Step::Add { a, b }, self.needs(a) || self.needs(b))
    }

    pub fn sub(&self, a: VarId, b: VarId) -> VarId {
        let (shape, out) = self.binary("sub", a, b, |x, y| x - y);
        self.push(shape, out, Step::Sub { a, b }, self.needs(a) || self.needs(b))
    }

    pub fn mul(&self, a: VarId, b: VarId) -> VarId {
        let (shape, out) = self.binary("mul", a, b, |x, y| x * y);
        self.push(shape, out, Step::Mul { a, b }, self.needs(a) || self.needs(b))
    }

    pub fn div(&self, a: VarId, b: VarId) -> VarId {
        let (shape, out) = self.binary("div", a, b, |x, y| x / y);
        self.push(shape, out, Step::Div { a, b }, self.needs(a) || self.needs(b))
    }

    pub fn scalar_mul(&self, a: VarId, c: T) -> VarId {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        let out: Vec<T> = na.data.iter().map(|&x| x * c).collect();
        let shape = na.shape.clone();
        drop(nodes);
        self.push(shape, out, Step::ScalarMul { a, c }, self.needs(a))
    }

    pub fn neg(&self, a: VarId) -> VarId {
        self.scalar_mul(a, -T::one())
    }

    // ── Matmul (batched over leading axes, which may broadcast) ─────────

    pub fn matmul(&self, a: VarId, b: VarId) -> VarId {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        assert!(
            na.shape.len() >= 2 && nb.shape.len() >= 2,
            "matmul: operands must have rank >= 2, got {:?} and {:?}",
            na.shape,
            nb.shape
        );
        let (m, ka) = (na.shape[na.shape.len() - 2], na.shape[na.shape.len() - 1]);
        let (kb, n) = (nb.shape[nb.shape.len() - 2], nb.shape[nb.shape.len() - 1]);
        assert_eq!(
            ka, kb,
            "matmul: inner dimensions differ for shapes {:?} and {:?}",
            na.shape, nb.shape
        );
        let batch = broadcast_shapes(
            "matmul",
            &na.shape[..na.shape.len() - 2],
            &nb.shape[..nb.shape.len() - 2],
        );
        let mut out_shape = batch.clone();
        out_shape.extend_from_slice(&[m, n]);
        let cells = numel(&batch);
        let mut out = vec![T::zero(); cells * m * n];
        for cell in 0..cells {
            let oa = batch_offset(cell, &batch, &na.shape[..na.shape.len() - 2]) * m * ka;
            let ob = batch_offset(cell, &batch, &nb.shape[..nb.shape.len() - 2]) * kb * n;
            gemm_nn(
                &na.data[oa..oa + m * ka],
                &nb.data[ob..ob + kb * n],
                &mut out[cell * m * n..(cell + 1) * m * n],
                m,
                ka,
                n,
            );
        }
        drop(nodes);
        self.push(out_shape, out, Step::MatMul { a, b }, self.needs(a) || self.needs(b))
    }

    // ── Shape ops ────────────────────────────────────────────────────────

    pub fn permute(&self, a: VarId, perm: &[usize]) -> VarId {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        let rank = na.shape.len();
        let mut seen = vec![false; rank];
        assert_eq!(perm.len(), rank, "permute: perm {:?} does not match rank {}", perm, rank);
        for &p in perm {
            assert!(p < rank && !seen[p], "permute: invalid permutation {:?}", perm);
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| na.shape[p]).collect();
        let out = permute_data(&na.data, &na.shape, perm);
        drop(nodes);
        self.push(out_shape, out, Step::Permute { a, perm: perm.to_vec() }, self.needs(a))
    }

    /// Swap the last two axes.
    pub fn transpose(&self, a: VarId) -> VarId {
        let rank = self.shape(a).len();
        assert!(rank >= 2, "transpose: rank must be >= 2, got {}", rank);
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&self, a: VarId, shape: &[usize]) -> VarId {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        assert_eq!(
            numel(shape),
            na.data.len(),
            "reshape: cannot reshape {:?} to {:?}",
            na.shape,
            shape
        );
        let data = na.data.as_ref().clone();
        drop(nodes);
        self.push(shape.to_vec(), data, Step::Reshape { a }, self.needs(a))
    }

    pub fn concat(&self, parts: &[VarId], axis: usize) -> VarId {
        assert!(!parts.is_empty(), "concat: no inputs");
        let nodes = self.nodes.borrow();
        let first = &nodes[parts[0].0].shape;
        let rank = first.len();
        assert!(axis < rank, "concat: axis {} out of range for rank {}", axis, rank);
        let mut axis_total = 0usize;
        for &p in parts {
            let s = &nodes[p.0].shape;
            assert_eq!(s.len(), rank, "concat: rank mismatch between {:?} and {:?}", first, s);
            for d in 0..rank {
                assert!(
                    d == axis || s[d] == first[d],
                    "concat: shapes {:?} and {:?} differ off-axis",
                    first,
                    s
                );
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![T::zero(); numel(&out_shape)];
        let out_row = axis_total * inner;
        let mut offset = 0usize;
        for &p in parts {
            let np = &nodes[p.0];
            let rows = np.shape[axis] * inner;
            for o in 0..outer {
                let src = &np.data[o * rows..(o + 1) * rows];
                out[o * out_row + offset..o * out_row + offset + rows].copy_from_slice(src);
            }
            offset += rows;
        }
        let needs = parts.iter().any(|&p| nodes[p.0].needs_grad);
        drop(nodes);
        self.push(out_shape, out, Step::Concat { parts: parts.to_vec(), axis }, needs)
    }

    pub fn slice(&self, a: VarId, axis: usize, start: usize, len: usize) -> VarId {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        let rank = na.shape.len();
        assert!(axis < rank, "slice: axis {} out of range for shape {:?}", axis, na.shape);
        assert!(
            start + len <= na.shape[axis] && len > 0,
            "slice: range {}..{} out of bounds for shape {:?} axis {}",
            start,
            start + len,
            na.shape,
            axis
        );
        let outer: usize = na.shape[..axis].iter().product();
        let inner: usize = na.shape[axis + 1..].iter().product();
        let src_row = na.shape[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * src_row + start * inner;
            out.extend_from_slice(&na.data[base..base + len * inner]);
        }
        let mut out_shape = na.shape.clone();
        out_shape[axis] = len;
        drop(nodes);
        self.push(out_shape, out, Step::Slice { a, axis, start }, self.needs(a))
    }

    // ── Reductions ───────────────────────────────────────────────────────

    fn reduce(&self, a: VarId, axis: Option<usize>, mean: bool) -> VarId {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        let (out_shape, mut out, count) = match axis {
            None => (vec![1], vec![T::zero()], na.data.len()),
            Some(ax) => {
                assert!(ax < na.shape.len(), "reduce: axis {} out of range for {:?}", ax, na.shape);
                let mut s = na.shape.clone();
                s.remove(ax);
                if s.is_empty() {
                    s.push(1);
                }
                let n = numel(&s);
                (s, vec![T::zero(); n], na.shape[ax])
            }
        };
        match axis {
            None => {
                let mut acc = T::zero();
                for &x in na.data.iter() {
                    acc = acc + x;
                }
                out[0] = acc;
            }
            Some(ax) => {
                let outer: usize = na.shape[..ax].iter().product();
                let inner: usize = na.shape[ax + 1..].iter().product();
                for o in 0..outer {
                    for k in 0..na.shape[ax] {
                        let base = (o * na.shape[ax] + k) * inner;
                        for i in 0..inner {
                            out[o * inner + i] = out[o * inner + i] + na.data[base + i];
                        }
                    }
                }
            }
        }
        if mean {
            let inv = T::one() / T::from_usize(count);
            for x in out.iter_mut() {
                *x = *x * inv;
            }
        }
        drop(nodes);
        let step = if mean { Step::Mean { a, axis } } else { Step::Sum { a, axis } };
        self.push(out_shape, out, step, self.needs(a))
    }

    pub fn sum_all(&self, a: VarId) -> VarId {
        self.reduce(a, None, false)
    }

    pub fn sum_axis(&self, a: VarId, axis: usize) -> VarId {
        self.reduce(a, Some(axis), false)
    }

    pub fn mean_all(&self, a: VarId) -> VarId {
        self.reduce(a, None, true)
    }

    pub fn mean_axis(&self, a: VarId, axis: usize) -> VarId {
        self.reduce(a, Some(axis), true)
    }

    // ── Nonlinearities ───────────────────────────────────────────────────

    /// Softmax over the last axis, guarded by row-max subtraction.
    pub fn softmax(&self, a: VarId) -> VarId {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        let last = *na.shape.last().expect("softmax: scalar input");
        let rows = na.data.len() / last;
        let mut out = vec![T::zero(); na.data.len()];
        for r in 0..rows {
            let row = &na.data[r * last..(r + 1) * last];
            let mut mx = row[0];
            for &x in row.iter() {
                if x > mx {
                    mx = x;
                }
            }
            let orow = &mut out[r * last..(r + 1) * last];
            let mut denom = T::zero();
            for (o, &x) in orow.iter_mut().zip(row.iter()) {
                let e = (x - mx).exp();
                *o = e;
                denom = denom + e;
            }
            for o in orow.iter_mut() {
                *o = *o / denom;
            }
        }
        let shape = na.shape.clone();
        drop(nodes);
        self.push(shape, out, Step::Softmax { a }, self.needs(a))
    }

    /// Layer normalization over the last axis with learnable scale and shift.
    pub fn layer_norm(&self, x: VarId, scale: VarId, shift: VarId, eps: T) -> VarId {
        let nodes = self.nodes.borrow();
        let nx = &nodes[x.0];
        let last = *nx.shape.last().expect("layer_norm: scalar input");
        assert_eq!(
            nodes[scale.0].shape,
            vec![last],
            "layer_norm: scale shape {:?} does not match last axis {} of {:?}",
            nodes[scale.0].shape,
            last,
            nx.shape
        );
        assert_eq!(
            nodes[shift.0].shape,
            vec![last],
            "layer_norm: shift shape {:?} does not match last axis {} of {:?}",
            nodes[shift.0].shape,
            last,
            nx.shape
        );
        let rows = nx.data.len() / last;
        let gamma = &nodes[scale.0].data;
        let beta = &nodes[shift.0].data;
        let mut out = vec![T::zero(); nx.data.len()];
        let mut xhat = vec![T::zero(); nx.data.len()];
        let mut inv_std = vec![T::zero(); rows];
        let inv_l = T::one() / T::from_usize(last);
        for r in 0..rows {
            let row = &nx.data[r * last..(r + 1) * last];
            let mut mu = T::zero();
            for &v in row.iter() {
                mu = mu + v;
            }
            mu = mu * inv_l;
            let mut var = T::zero();
            for &v in row.iter() {
                let d = v - mu;
                var = var + d * d;
            }
            var = var * inv_l;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for i in 0..last {
                let h = (row[i] - mu) * inv;
                xhat[r * last + i] = h;
                out[r * last + i] = h * gamma[i] + beta[i];
            }
        }
        let shape = nx.shape.clone();
        let needs = nx.needs_grad || nodes[scale.0].needs_grad || nodes[shift.0].needs_grad;
        drop(nodes);
        self.push(
            shape,
            out,
            Step::LayerNorm { x, scale, shift, xhat: Rc::new(xhat), inv_std: Rc::new(inv_std) },
            needs,
        )
    }

    /// Tanh-approximation GELU; the backward pass differentiates the same
    /// approximation so gradient checks close.
    pub fn gelu(&self, a: VarId) -> VarId {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        let out: Vec<T> = na.data.iter().map(|&x| gelu_forward(x)).collect();
        let shape = na.shape.clone();
        drop(nodes);
        self.push(shape, out, Step::Gelu { a }, self.needs(a))
    }

    pub fn sigmoid(&self, a: VarId) -> VarId {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        let one = T::one();
        let out: Vec<T> = na.data.iter().map(|&x| one / (one + (-x).exp())).collect();
        let shape = na.shape.clone();
        drop(nodes);
        self.push(shape, out, Step::Sigmoid { a }, self.needs(a))
    }

    /// Natural log with the input clamped to at least `Scalar::log_floor()`.
    pub fn log(&self, a: VarId) -> VarId {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        let floor = T::log_floor();
        let out: Vec<T> = na.data.iter().map(|&x| x.max(floor).ln()).collect();
        let shape = na.shape.clone();
        drop(nodes);
        self.push(shape, out, Step::Log { a }, self.needs(a))
    }

    pub fn exp(&self, a: VarId) -> VarId {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        let out: Vec<T> = na.data.iter().map(|&x| x.exp()).collect();
        let shape = na.shape.clone();
        drop(nodes);
        self.push(shape, out, Step::Exp { a }, self.needs(a))
    }

    pub fn abs(&self, a: VarId) -> VarId {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        let out: Vec<T> = na.data.iter().map(|&x| x.abs()).collect();
        let shape = na.shape.clone();
        drop(nodes);
        self.push(shape, out, Step::Abs { a }, self.needs(a))
    }

    // ── Structured ops ───────────────────────────────────────────────────

    /// Valid-mode 2D cross-correlation of a `[C, H, W]` signal with a fixed
    /// `[kh, kw]` kernel. The kernel is constant: gradients flow to the
    /// signal only.
    pub fn correlate2d(&self, signal: VarId, kernel: &[T], kh: usize, kw: usize) -> VarId {
        assert_eq!(kernel.len(), kh * kw, "correlate2d: kernel length != kh*kw");
        let nodes = self.nodes.borrow();
        let ns = &nodes[signal.0];
        assert_eq!(
            ns.shape.len(),
            3,
            "correlate2d: signal must be [C,H,W], got {:?}",
            ns.shape
        );
        let (c, h, w) = (ns.shape[0], ns.shape[1], ns.shape[2]);
        assert!(
            h >= kh && w >= kw,
            "correlate2d: signal {:?} smaller than kernel [{},{}]",
            ns.shape,
            kh,
            kw
        );
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            let plane = &ns.data[ch * h * w..(ch + 1) * h * w];
            let oplane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for u in 0..kh {
                for v in 0..kw {
                    let kuv = kernel[u * kw + v];
                    for i in 0..oh {
                        let srow = &plane[(i + u) * w + v..(i + u) * w + v + ow];
                        let orow = &mut oplane[i * ow..(i + 1) * ow];
                        for j in 0..ow {
                            orow[j] = orow[j] + kuv * srow[j];
                        }
                    }
                }
            }
        }
        drop(nodes);
        self.push(
            vec![c, oh, ow],
            out,
            Step::Correlate2d { signal, kernel: Rc::new(kernel.to_vec()), kh, kw },
            self.needs(signal),
        )
    }

    /// Rotate dimension pairs `(2p, 2p+1)` of the last axis by the per-position
    /// angles in `tables`. Input shape `[..., positions, 2*half]`.
    pub fn rope(&self, a: VarId, tables: &Rc<RopeTables<T>>) -> VarId {
        let nodes = self.nodes.borrow();
        let na = &nodes[a.0];
        let rank = na.shape.len();
        assert!(rank >= 2, "rope: input must have rank >= 2, got {:?}", na.shape);
        let dh = na.shape[rank - 1];
        let n = na.shape[rank - 2];
        assert_eq!(dh, 2 * tables.half, "rope: last axis {} != 2*half {}", dh, 2 * tables.half);
        assert_eq!(n, tables.positions, "rope: position axis {} != table positions {}", n, tables.positions);
        let out = rope_apply(&na.data, na.data.len() / (n * dh), n, tables, false);
        let shape = na.shape.clone();
        drop(nodes);
        self.push(shape, out, Step::Rope { a, tables: Rc::clone(tables) }, self.needs(a))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar root. Visits recorded nodes in exact
    /// reverse order; repeated calls accumulate into existing grads.
    pub fn backward(&self, root: VarId) -> Result<()> {
        {
            let nodes = self.nodes.borrow();
            let n = &nodes[root.0];
            if n.data.len() != 1 {
                return Err(CrtError::Usage(format!(
                    "backward requires a scalar root, got shape {:?}",
                    n.shape
                )));
            }
            if !n.needs_grad {
                return Ok(()); // nothing requires gradients
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut work: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        work[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let g = match work[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !nodes[i].needs_grad {
                continue;
            }
            propagate(&nodes, i, &g, &mut work);
            let node = &mut nodes[i];
            match node.grad.as_mut() {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g.iter()) {
                        *a = *a + *b;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }
}

/// Map a broadcast-batch cell index onto an operand's own batch cells.
fn batch_offset(cell: usize, batch: &[usize], own: &[usize]) -> usize {
    if own.is_empty() {
        return 0;
    }
    let padded = pad_shape(own, batch.len());
    let mut rem = cell;
    let mut idx = 0usize;
    let mut stride = 1usize;
    // Decompose right-to-left, accumulating only non-broadcast axes.
    let mut coords = vec![0usize; batch.len()];
    for d in (0..batch.len()).rev() {
        coords[d] = rem % batch[d];
        rem /= batch[d];
    }
    for d in (0..batch.len()).rev() {
        let c = if padded[d] == 1 { 0 } else { coords[d] };
        idx += c * stride;
        stride *= padded[d];
    }
    idx
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    for _ in 0..n {
        out.push(data[src]);
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            src -= strides[d] * out_shape[d];
        }
    }
    out
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn gelu_forward<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::from_f64(0.044_715);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044_715);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

/// Apply (or, with `inverse`, undo) the pairwise rotations.
fn rope_apply<T: Scalar>(
    data: &[T],
    lead: usize,
    n: usize,
    tables: &RopeTables<T>,
    inverse: bool,
) -> Vec<T> {
    let half = tables.half;
    let dh = 2 * half;
    let mut out = vec![T::zero(); data.len()];
    for l in 0..lead {
        for t in 0..n {
            let base = (l * n + t) * dh;
            for p in 0..half {
                let cos = tables.cos[t * half + p];
                let sin = if inverse { -tables.sin[t * half + p] } else { tables.sin[t * half + p] };
                let x0 = data[base + 2 * p];
                let x1 = data[base + 2 * p + 1];
                out[base + 2 * p] = x0 * cos - x1 * sin;
                out[base + 2 * p + 1] = x0 * sin + x1 * cos;
            }
        }
    }
    out
}

/// Push this node's output gradient onto its parents.
fn propagate<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], work: &mut [Option<Vec<T>>]) {
    let shape = &nodes[i].shape;
    let add_to = |work: &mut [Option<Vec<T>>], v: VarId, contrib: Vec<T>| {
        if !nodes[v.0].needs_grad {
            return;
        }
        match work[v.0].as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(contrib.iter()) {
                    *a = *a + *b;
                }
            }
            None => work[v.0] = Some(contrib),
        }
    };
    match &nodes[i].step {
        Step::Leaf => {}
        Step::Add { a, b } => {
            add_to(work, *a, reduce_to_shape(g, shape, &nodes[a.0].shape));
            add_to(work, *b, reduce_to_shape(g, shape, &nodes[b.0].shape));
        }
        Step::Sub { a, b } => {
            add_to(work, *a, reduce_to_shape(g, shape, &nodes[a.0].shape));
            let neg: Vec<T> = g.iter().map(|&x| -x).collect();
            add_to(work, *b, reduce_to_shape(&neg, shape, &nodes[b.0].shape));
        }
        Step::Mul { a, b } => {
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if nodes[a.0].needs_grad {
                let da = binary_broadcast(g, shape, &nb.data, &nb.shape, shape, |x, y| x * y);
                add_to(work, *a, reduce_to_shape(&da, shape, &na.shape));
            }
            if nodes[b.0].needs_grad {
                let db = binary_broadcast(g, shape, &na.data, &na.shape, shape, |x, y| x * y);
                add_to(work, *b, reduce_to_shape(&db, shape, &nb.shape));
            }
        }
        Step::Div { a, b } => {
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if nodes[a.0].needs_grad {
                let da = binary_broadcast(g, shape, &nb.data, &nb.shape, shape, |x, y| x / y);
                add_to(work, *a, reduce_to_shape(&da, shape, &na.shape));
            }
            if nodes[b.0].needs_grad {
                // -g * a / b^2, expanded over the broadcast shape
                let ga = binary_broadcast(g, shape, &na.data, &na.shape, shape, |x, y| x * y);
                let db = binary_broadcast(&ga, shape, &nb.data, &nb.shape, shape, |x, y| {
                    -x / (y * y)
                });
                add_to(work, *b, reduce_to_shape(&db, shape, &nb.shape));
            }
        }
        Step::MatMul { a, b } => {
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let ra = na.shape.len();
            let rb = nb.shape.len();
            let (m, k) = (na.shape[ra - 2], na.shape[ra - 1]);
            let n = nb.shape[rb - 1];
            let batch = &shape[..shape.len() - 2];
            let cells = numel(batch);
            if na.needs_grad {
                let mut da = vec![T::zero(); na.data.len()];
                for cell in 0..cells {
                    let oa = batch_offset(cell, batch, &na.shape[..ra - 2]) * m * k;
                    let ob = batch_offset(cell, batch, &nb.shape[..rb - 2]) * k * n;
                    gemm_nt(
                        &g[cell * m * n..(cell + 1) * m * n],
                        &nb.data[ob..ob + k * n],
                        &mut da[oa..oa + m * k],
                        m,
                        n,
                        k,
                    );
                }
                add_to(work, *a, da);
            }
            if nb.needs_grad {
                let mut db = vec![T::zero(); nb.data.len()];
                for cell in 0..cells {
                    let oa = batch_offset(cell, batch, &na.shape[..ra - 2]) * m * k;
                    let ob = batch_offset(cell, batch, &nb.shape[..rb - 2]) * k * n;
                    gemm_tn(
                        &na.data[oa..oa + m * k],
                        &g[cell * m * n..(cell + 1) * m * n],
                        &mut db[ob..ob + k * n],
                        k,
                        m,
                        n,
                    );
                }
                add_to(work, *b, db);
            }
        }
        Step::Permute { a, perm } => {
            let inv = invert_perm(perm);
            add_to(work, *a, permute_data(g, shape, &inv));
        }
        Step::Reshape { a } => {
            add_to(work, *a, g.to_vec());
        }
        Step::Concat { parts, axis } => {
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let out_row = shape[*axis] * inner;
            let mut offset = 0usize;
            for &p in parts {
                let np = &nodes[p.0];
                let rows = np.shape[*axis] * inner;
                if np.needs_grad {
                    let mut dp = vec![T::zero(); np.data.len()];
                    for o in 0..outer {
                        dp[o * rows..(o + 1) * rows]
                            .copy_from_slice(&g[o * out_row + offset..o * out_row + offset + rows]);
                    }
                    add_to(work, p, dp);
                }
                offset += rows;
            }
        }
        Step::Slice { a, axis, start } => {
            let na = &nodes[a.0];
            let outer: usize = na.shape[..*axis].iter().product();
            let inner: usize = na.shape[*axis + 1..].iter().product();
            let len = shape[*axis];
            let src_row = na.shape[*axis] * inner;
            let mut da = vec![T::zero(); na.data.len()];
            for o in 0..outer {
                let dst = o * src_row + start * inner;
                da[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            add_to(work, *a, da);
        }
        Step::Sum { a, axis } | Step::Mean { a, axis } => {
            let na = &nodes[a.0];
            let scale = match &nodes[i].step {
                Step::Mean { .. } => match axis {
                    None => T::one() / T::from_usize(na.data.len()),
                    Some(ax) => T::one() / T::from_usize(na.shape[*ax]),
                },
                _ => T::one(),
            };
            let mut da = vec![T::zero(); na.data.len()];
            match axis {
                None => {
                    let v = g[0] * scale;
                    for x in da.iter_mut() {
                        *x = v;
                    }
                }
                Some(ax) => {
                    let outer: usize = na.shape[..*ax].iter().product();
                    let inner: usize = na.shape[*ax + 1..].iter().product();
                    for o in 0..outer {
                        for k in 0..na.shape[*ax] {
                            let base = (o * na.shape[*ax] + k) * inner;
                            for ii in 0..inner {
                                da[base + ii] = g[o * inner + ii] * scale;
                            }
                        }
                    }
                }
            }
            add_to(work, *a, da);
        }
        Step::Softmax { a } => {
            let y = &nodes[i].data;
            let last = *shape.last().unwrap();
            let rows = y.len() / last;
            let mut da = vec![T::zero(); y.len()];
            for r in 0..rows {
                let yr = &y[r * last..(r + 1) * last];
                let gr = &g[r * last..(r + 1) * last];
                let mut dot = T::zero();
                for (yv, gv) in yr.iter().zip(gr.iter()) {
                    dot = dot + *yv * *gv;
                }
                let dr = &mut da[r * last..(r + 1) * last];
                for j in 0..last {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            add_to(work, *a, da);
        }
        Step::LayerNorm { x, scale, shift, xhat, inv_std } => {
            let last = *shape.last().unwrap();
            let rows = g.len() / last;
            let gamma = &nodes[scale.0].data;
            if nodes[shift.0].needs_grad {
                let mut dbeta = vec![T::zero(); last];
                for r in 0..rows {
                    for j in 0..last {
                        dbeta[j] = dbeta[j] + g[r * last + j];
                    }
                }
                add_to(work, *shift, dbeta);
            }
            if nodes[scale.0].needs_grad {
                let mut dgamma = vec![T::zero(); last];
                for r in 0..rows {
                    for j in 0..last {
                        dgamma[j] = dgamma[j] + g[r * last + j] * xhat[r * last + j];
                    }
                }
                add_to(work, *scale, dgamma);
            }
            if nodes[x.0].needs_grad {
                let inv_l = T::one() / T::from_usize(last);
                let mut dx = vec![T::zero(); g.len()];
                for r in 0..rows {
                    let mut mean_gg = T::zero();
                    let mut mean_ggx = T::zero();
                    for j in 0..last {
                        let gg = g[r * last + j] * gamma[j];
                        mean_gg = mean_gg + gg;
                        mean_ggx = mean_ggx + gg * xhat[r * last + j];
                    }
                    mean_gg = mean_gg * inv_l;
                    mean_ggx = mean_ggx * inv_l;
                    for j in 0..last {
                        let gg = g[r * last + j] * gamma[j];
                        dx[r * last + j] =
                            inv_std[r] * (gg - mean_gg - xhat[r * last + j] * mean_ggx);
                    }
                }
                add_to(work, *x, dx);
            }
        }
        Step::Gelu { a } => {
            let xin = &nodes[a.0].data;
            let da: Vec<T> = g.iter().zip(xin.iter()).map(|(&gv, &x)| gv * gelu_grad(x)).collect();
            add_to(work, *a, da);
        }
        Step::Sigmoid { a } => {
            let y = &nodes[i].data;
            let da: Vec<T> =
                g.iter().zip(y.iter()).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect();
            add_to(work, *a, da);
        }
        Step::Log { a } => {
            let xin = &nodes[a.0].data;
            let floor = T::log_floor();
            let da: Vec<T> =
                g.iter().zip(xin.iter()).map(|(&gv, &x)| gv / x.max(floor)).collect();
            add_to(work, *a, da);
        }
        Step::Exp { a } => {
            let y = &nodes[i].data;
            let da: Vec<T> = g.iter().zip(y.iter()).map(|(&gv, &yv)| gv * yv).collect();
            add_to(work, *a, da);
        }
        Step::ScalarMul { a, c } => {
            let da: Vec<T> = g.iter().map(|&gv| gv * *c).collect();
            add_to(work, *a, da);
        }
        Step::Abs { a } => {
            let xin = &nodes[a.0].data;
            let da: Vec<T> = g
                .iter()
                .zip(xin.iter())
                .map(|(&gv, &x)| {
                    if x > T::zero() {
                        gv
                    } else if x < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })
                .collect();
            add_to(work, *a, da);
        }
        Step::Correlate2d { signal, kernel, kh, kw } => {
            let ns = &nodes[signal.0];
            let (c, h, w) = (ns.shape[0], ns.shape[1], ns.shape[2]);
            let (oh, ow) = (h - kh + 1, w - kw + 1);
            let mut da = vec![T::zero(); ns.data.len()];
            for ch in 0..c {
                let gplane = &g[ch * oh * ow..(ch + 1) * oh * ow];
                let dplane = &mut da[ch * h * w..(ch + 1) * h * w];
                for u in 0..*kh {
                    for v in 0..*kw {
                        let kuv = kernel[u * kw + v];
                        for i in 0..oh {
                            let drow = &mut dplane[(i + u) * w + v..(i + u) * w + v + ow];
                            let grow = &gplane[i * ow..(i + 1) * ow];
                            for j in 0..ow {
                                drow[j] = drow[j] + kuv * grow[j];
                            }
                        }
                    }
                }
            }
            add_to(work, *signal, da);
        }
        Step::Rope { a, tables } => {
            let dh = 2 * tables.half;
            let n = tables.positions;
            let da = rope_apply(g, g.len() / (n * dh), n, tables, true);
            add_to(work, *a, da);
        }
    }
}
