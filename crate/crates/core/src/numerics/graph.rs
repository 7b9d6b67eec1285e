//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during one forward pass. Each
//! call returns a [`Var`] handle; [`Graph::backward`] walks the tape in reverse
//! and accumulates gradients for every node that depends on a tracked leaf.
//! Nodes built only from untracked leaves (input data) never receive gradients.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, ConvGeom, ConvTGeom};
use super::tensor::{split_axis, Tensor};
use crate::error::{dim_err, Result};
use crate::scalar::Real;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a batch-norm node obtains its statistics.
#[derive(Debug, Clone, Copy)]
pub enum NormStats<'a, S> {
    /// Normalise by the statistics of the current batch.
    Batch,
    /// Normalise by recorded running statistics.
    Running { mean: &'a [S], var: &'a [S] },
}

/// Batch statistics observed by a train-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct ObservedStats<S> {
    pub key: usize,
    pub mean: Vec<S>,
    /// Unbiased variance, the quantity folded into running statistics.
    pub var: Vec<S>,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Relu(Var),
    Softmax { x: Var, n: usize },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, fin: usize, fout: usize },
    Conv2d { x: Var, k: Var, b: Option<Var>, geom: ConvGeom },
    ConvT2d { x: Var, k: Var, b: Option<Var>, geom: ConvTGeom },
    BatchNorm { x: Var, scale: Var, shift: Var, dims: (usize, usize, usize), xhat: Vec<S>, inv_std: Vec<S>, batch: bool },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    PadLast { x: Var, before: usize, after: usize, len: usize },
    SliceLast { x: Var, start: usize, len: usize, src_len: usize },
    SwapLast2 { x: Var, outer: usize, a: usize, b: usize },
    Reshape(Var),
    Gather { table: Var, rows: Vec<usize>, width: usize },
    MatmulNt { a: Var, b: Var, m: usize, n: usize, k: usize },
    LatentMix { w: Var, v: Var, dims: (usize, usize, usize, usize) },
    Mse { a: Var, b: Var },
    Sum(Var),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    tracked: bool,
}

/// A recorded computation.
#[derive(Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<usize, Var>,
    observed: Vec<ObservedStats<S>>,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn check(cond: bool, operand: &'static str, detail: impl FnOnce() -> alloc::string::String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(dim_err(operand, detail()))
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            observed: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf for parameter `id`, created on first use and reused after.
    pub fn param(&mut self, id: usize, value: &Tensor<S>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.variable(value.clone());
        self.params.insert(id, v);
        v
    }

    /// Makes later [`Graph::param`] calls for `id` return `var`.
    pub fn bind_param(&mut self, id: usize, var: Var) {
        self.params.insert(id, var);
    }

    /// Parameter ids bound on this graph, with their leaf handles.
    pub fn bound_params(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Batch statistics recorded by train-mode batch-norm nodes, in call order.
    pub fn observed_stats(&self) -> &[ObservedStats<S>] {
        &self.observed
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check(ta.shape() == tb.shape(), "add", || format!("{:?} vs {:?}", ta.shape(), tb.shape()))?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check(ta.shape() == tb.shape(), "mul", || format!("{:?} vs {:?}", ta.shape(), tb.shape()))?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(ta.shape(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push(t, Op::Relu(x), &[x])
    }

    /// Softmax along the last axis, computed after subtracting the row maximum.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let n = *tx.shape().last().unwrap();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut z = S::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let t = Tensor::new(tx.shape(), out).unwrap();
        self.push(t, Op::Softmax { x, n }, &[x])
    }

    /// Affine map over the last axis: `x[..., F_in] @ w[F_in, F_out] + b[F_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        check(tw.ndim() == 2, "linear weight", || format!("expected 2-D, got {:?}", tw.shape()))?;
        let (fin, fout) = (tw.shape()[0], tw.shape()[1]);
        let last = *tx.shape().last().unwrap();
        check(last == fin, "linear input", || format!("last dim {last} != weight F_in {fin}"))?;
        if let Some(b) = b {
            let tb = self.value(b);
            check(tb.shape() == [fout], "linear bias", || format!("expected [{fout}], got {:?}", tb.shape()))?;
        }
        let rows = tx.numel() / fin;
        let data = kernels::linear_forward(tx.data(), tw.data(), b.map(|b| self.value(b).data()), rows, fin, fout);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = fout;
        let t = Tensor::new(&shape, data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::Linear { x, w, b, rows, fin, fout }, &inputs))
    }

    /// Cross-correlation of `x[N, C_in, H, W]` with `k[C_out, C_in, kH, kW]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: (usize, usize), padding: (usize, usize)) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(k));
        check(tx.ndim() == 4, "conv2d input", || format!("expected [N,C,H,W], got {:?}", tx.shape()))?;
        check(tk.ndim() == 4, "conv2d kernel", || format!("expected 4-D, got {:?}", tk.shape()))?;
        let (xs, ks) = (tx.shape(), tk.shape());
        check(xs[1] == ks[1], "conv2d kernel", || format!("input has {} channels, kernel expects {}", xs[1], ks[1]))?;
        check(stride.0 > 0 && stride.1 > 0, "conv2d stride", || "stride must be positive".into())?;
        check(ks[2] <= xs[2] + 2 * padding.0 && ks[3] <= xs[3] + 2 * padding.1, "conv2d kernel", || {
            format!("kernel {:?} larger than padded input {:?}", &ks[2..], &xs[2..])
        })?;
        if let Some(b) = b {
            let tb = self.value(b);
            check(tb.shape() == [ks[0]], "conv2d bias", || format!("expected [{}], got {:?}", ks[0], tb.shape()))?;
        }
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ks[0],
            kh: ks[2],
            kw: ks[3],
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
        };
        let data = kernels::conv2d_forward(tx.data(), tk.data(), b.map(|b| self.value(b).data()), &geom);
        let t = Tensor::new(&[geom.n, geom.c_out, geom.out_h(), geom.out_w()], data)?;
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.push(t, Op::Conv2d { x, k, b, geom }, &inputs))
    }

    /// Transposed convolution of `x[N, C_in, H, W]` with `k[C_in, C_out, kH, kW]`.
    pub fn conv_transpose2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: (usize, usize)) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(k));
        check(tx.ndim() == 4, "conv_transpose2d input", || format!("expected [N,C,H,W], got {:?}", tx.shape()))?;
        check(tk.ndim() == 4, "conv_transpose2d kernel", || format!("expected 4-D, got {:?}", tk.shape()))?;
        let (xs, ks) = (tx.shape(), tk.shape());
        check(xs[1] == ks[0], "conv_transpose2d kernel", || {
            format!("input has {} channels, kernel expects {}", xs[1], ks[0])
        })?;
        check(stride.0 > 0 && stride.1 > 0, "conv_transpose2d stride", || "stride must be positive".into())?;
        if let Some(b) = b {
            let tb = self.value(b);
            check(tb.shape() == [ks[1]], "conv_transpose2d bias", || format!("expected [{}], got {:?}", ks[1], tb.shape()))?;
        }
        let geom = ConvTGeom {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ks[1],
            kh: ks[2],
            kw: ks[3],
            sh: stride.0,
            sw: stride.1,
        };
        let data = kernels::conv_transpose2d_forward(tx.data(), tk.data(), b.map(|b| self.value(b).data()), &geom);
        let t = Tensor::new(&[geom.n, geom.c_out, geom.out_h(), geom.out_w()], data)?;
        let mut inputs = vec![x, k];
        inputs.extend(b);
        Ok(self.push(t, Op::ConvT2d { x, k, b, geom }, &inputs))
    }

    /// Batch normalisation over `axis`: one (scale, shift) pair per index of
    /// that axis, statistics pooled over every other axis.
    ///
    /// With [`NormStats::Batch`] the batch statistics are recorded under `key`
    /// in [`Graph::observed_stats`].
    pub fn batch_norm(&mut self, x: Var, scale: Var, shift: Var, axis: usize, stats: NormStats<'_, S>, eps: S, key: usize) -> Result<Var> {
        let tx = self.value(x);
        check(axis < tx.ndim(), "batch_norm axis", || format!("axis {axis} out of range for {:?}", tx.shape()))?;
        let (outer, c, inner) = split_axis(tx.shape(), axis);
        for (v, name) in [(scale, "batch_norm scale"), (shift, "batch_norm shift")] {
            let t = self.value(v);
            check(t.shape() == [c], name, || format!("expected [{c}], got {:?}", t.shape()))?;
        }
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                let (m, v) = kernels::channel_moments(tx.data(), outer, c, inner);
                (m, v, true)
            }
            NormStats::Running { mean, var } => {
                check(mean.len() == c && var.len() == c, "batch_norm running stats", || {
                    format!("expected {c} channels, got {}/{}", mean.len(), var.len())
                })?;
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let (ts, tsh) = (self.value(scale).data(), self.value(shift).data());
        let xd = tx.data();
        let mut xhat = vec![S::zero(); xd.len()];
        let mut y = vec![S::zero(); xd.len()];
        for o in 0..outer {
            for ci in 0..c {
                let off = (o * c + ci) * inner;
                for i in off..off + inner {
                    let h = (xd[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    y[i] = ts[ci] * h + tsh[ci];
                }
            }
        }
        let t = Tensor::new(tx.shape(), y)?;
        if batch {
            let m = outer * inner;
            let unbias = if m > 1 { S::from_usize(m) / S::from_usize(m - 1) } else { S::one() };
            self.observed.push(ObservedStats {
                key,
                mean,
                var: var.iter().map(|&v| v * unbias).collect(),
            });
        }
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                scale,
                shift,
                dims: (outer, c, inner),
                xhat,
                inv_std,
                batch,
            },
            &[x, scale, shift],
        ))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        check(!parts.is_empty(), "concat", || "no inputs".into())?;
        let first = self.shape(parts[0]).to_vec();
        check(axis < first.len(), "concat axis", || format!("axis {axis} out of range for {first:?}"))?;
        let mut total = 0;
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let same = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            check(same, "concat", || format!("{s:?} incompatible with {first:?} on axis {axis}"))?;
            sizes.push((p, s[axis]));
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, len) in &sizes {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Concat { parts: sizes, outer, inner }, parts))
    }

    /// Zero padding along the last axis.
    pub fn pad_last(&mut self, x: Var, before: usize, after: usize) -> Var {
        let tx = self.value(x);
        let len = *tx.shape().last().unwrap();
        let new_len = before + len + after;
        let mut data = Vec::with_capacity(tx.numel() / len * new_len);
        for row in tx.data().chunks(len) {
            data.extend(core::iter::repeat_n(S::zero(), before));
            data.extend_from_slice(row);
            data.extend(core::iter::repeat_n(S::zero(), after));
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = new_len;
        let t = Tensor::new(&shape, data).unwrap();
        self.push(t, Op::PadLast { x, before, after, len }, &[x])
    }

    /// Window `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let src_len = *tx.shape().last().unwrap();
        check(len > 0 && start + len <= src_len, "slice_last", || format!("[{start}, {}) out of 0..{src_len}", start + len))?;
        let mut data = Vec::with_capacity(tx.numel() / src_len * len);
        for row in tx.data().chunks(src_len) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::SliceLast { x, start, len, src_len }, &[x]))
    }

    /// Transposes the two innermost axes.
    pub fn swap_last2(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let nd = tx.ndim();
        assert!(nd >= 2, "swap_last2 needs at least two axes");
        let (a, b) = (tx.shape()[nd - 2], tx.shape()[nd - 1]);
        let outer = tx.numel() / (a * b);
        let data = transpose_blocks(tx.data(), outer, a, b);
        let mut shape = tx.shape().to_vec();
        shape.swap(nd - 2, nd - 1);
        let t = Tensor::new(&shape, data).unwrap();
        self.push(t, Op::SwapLast2 { x, outer, a, b }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Row lookup: `out[i] = table[rows[i]]`, shape `[rows.len(), D]`.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        check(tt.ndim() == 2, "gather table", || format!("expected 2-D, got {:?}", tt.shape()))?;
        let (r, width) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(rows.len() * width);
        for &i in rows {
            check(i < r, "gather index", || format!("row {i} out of 0..{r}"))?;
            data.extend_from_slice(&tt.data()[i * width..(i + 1) * width]);
        }
        let t = Tensor::new(&[rows.len(), width], data)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                rows: rows.to_vec(),
                width,
            },
            &[table],
        ))
    }

    /// `a[M, K] @ b[N, K]^T -> [M, N]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check(ta.ndim() == 2 && tb.ndim() == 2, "matmul_nt", || format!("{:?} x {:?}", ta.shape(), tb.shape()))?;
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        check(tb.shape()[1] == k, "matmul_nt rhs", || format!("inner dims {k} vs {}", tb.shape()[1]))?;
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = ta.data()[i * k..(i + 1) * k]
                    .iter()
                    .zip(&tb.data()[j * k..(j + 1) * k])
                    .map(|(&x, &y)| x * y)
                    .sum();
            }
        }
        let t = Tensor::new(&[m, n], data)?;
        Ok(self.push(t, Op::MatmulNt { a, b, m, n, k }, &[a, b]))
    }

    /// Weighted sum over the latent axis: `w[N, L]`, `v[N, M, L, D]` -> `[N, M, D]`
    /// with `out[n, m, :] = sum_l w[n, l] * v[n, m, l, :]`.
    pub fn latent_mix(&mut self, w: Var, v: Var) -> Result<Var> {
        let (tw, tv) = (self.value(w), self.value(v));
        check(tw.ndim() == 2, "latent_mix weights", || format!("expected [N,L], got {:?}", tw.shape()))?;
        check(tv.ndim() == 4, "latent_mix values", || format!("expected [N,M,L,D], got {:?}", tv.shape()))?;
        let (n, l) = (tw.shape()[0], tw.shape()[1]);
        let (vn, m, vl, d) = (tv.shape()[0], tv.shape()[1], tv.shape()[2], tv.shape()[3]);
        check(vn == n, "latent_mix values", || format!("batch {vn} vs weights batch {n}"))?;
        check(vl == l, "latent_mix values", || format!("{vl} latent sources in values vs {l} weights"))?;
        let mut data = vec![S::zero(); n * m * d];
        for ni in 0..n {
            let wr = &tw.data()[ni * l..(ni + 1) * l];
            for mi in 0..m {
                let out = &mut data[(ni * m + mi) * d..(ni * m + mi + 1) * d];
                let base = (ni * m + mi) * l * d;
                for (li, &wl) in wr.iter().enumerate() {
                    let src = &tv.data()[base + li * d..base + (li + 1) * d];
                    for (o, &s) in out.iter_mut().zip(src) {
                        *o += wl * s;
                    }
                }
            }
        }
        let t = Tensor::new(&[n, m, d], data)?;
        Ok(self.push(t, Op::LatentMix { w, v, dims: (n, m, l, d) }, &[w, v]))
    }

    /// Mean squared difference, a one-element tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check(ta.shape() == tb.shape(), "mse", || format!("{:?} vs {:?}", ta.shape(), tb.shape()))?;
        let s: S = ta.data().iter().zip(tb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let t = Tensor::scalar(s / S::from_usize(ta.numel()));
        Ok(self.push(t, Op::Mse { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Gradients<S> {
        assert_eq!(self.value(root).numel(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![S::one()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node<S>, gy: &[S], grads: &mut [Option<Vec<S>>]) {
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let numel = |v: Var| self.nodes[v.0].value.numel();
        // Returns the gradient buffer of `v`, creating it zeroed when absent.
        fn slot<'g, S: Real>(grads: &'g mut [Option<Vec<S>>], v: Var, n: usize) -> &'g mut [S] {
            grads[v.0].get_or_insert_with(|| vec![S::zero(); n])
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if tracked(v) {
                        let g = slot(grads, v, gy.len());
                        g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if tracked(*a) {
                    let g = slot(grads, *a, gy.len());
                    for i in 0..gy.len() {
                        g[i] += gy[i] * vb[i];
                    }
                }
                if tracked(*b) {
                    let g = slot(grads, *b, gy.len());
                    for i in 0..gy.len() {
                        g[i] += gy[i] * va[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                let g = slot(grads, *x, gy.len());
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * *c);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let g = slot(grads, *x, gy.len());
                for i in 0..gy.len() {
                    if xv[i] > S::zero() {
                        g[i] += gy[i];
                    }
                }
            }
            Op::Softmax { x, n } => {
                let y = node.value.data();
                let g = slot(grads, *x, gy.len());
                for r in 0..gy.len() / n {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &gy[r * n..(r + 1) * n]);
                    let inner: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..*n {
                        g[r * n + j] += yr[j] * (gr[j] - inner);
                    }
                }
            }
            Op::Linear { x, w, b, rows, fin, fout } => {
                if tracked(*x) {
                    let wv = self.value(*w).data();
                    let g = slot(grads, *x, rows * fin);
                    kernels::linear_backward_input(gy, wv, *rows, *fin, *fout, g);
                }
                if tracked(*w) {
                    let xv = self.value(*x).data();
                    let g = slot(grads, *w, fin * fout);
                    kernels::linear_backward_weight(gy, xv, *rows, *fin, *fout, g);
                }
                if let Some(b) = b.filter(|&b| tracked(b)) {
                    let g = slot(grads, b, *fout);
                    kernels::bias_backward(gy, *rows, *fout, g);
                }
            }
            Op::Conv2d { x, k, b, geom } => {
                let (xv, kv) = (self.value(*x).data(), self.value(*k).data());
                let mut gx = tracked(*x).then(|| grads[x.0].take().unwrap_or_else(|| vec![S::zero(); xv.len()]));
                let mut gk = tracked(*k).then(|| grads[k.0].take().unwrap_or_else(|| vec![S::zero(); kv.len()]));
                kernels::conv2d_backward(gy, xv, kv, geom, gx.as_deref_mut(), gk.as_deref_mut());
                if let Some(g) = gx {
                    grads[x.0] = Some(g);
                }
                if let Some(g) = gk {
                    grads[k.0] = Some(g);
                }
                if let Some(b) = b.filter(|&b| tracked(b)) {
                    let hw = geom.out_h() * geom.out_w();
                    let g = slot(grads, b, geom.c_out);
                    kernels::channel_bias_backward(gy, geom.n, geom.c_out, hw, g);
                }
            }
            Op::ConvT2d { x, k, b, geom } => {
                let (xv, kv) = (self.value(*x).data(), self.value(*k).data());
                let mut gx = tracked(*x).then(|| grads[x.0].take().unwrap_or_else(|| vec![S::zero(); xv.len()]));
                let mut gk = tracked(*k).then(|| grads[k.0].take().unwrap_or_else(|| vec![S::zero(); kv.len()]));
                kernels::conv_transpose2d_backward(gy, xv, kv, geom, gx.as_deref_mut(), gk.as_deref_mut());
                if let Some(g) = gx {
                    grads[x.0] = Some(g);
                }
                if let Some(g) = gk {
                    grads[k.0] = Some(g);
                }
                if let Some(b) = b.filter(|&b| tracked(b)) {
                    let hw = geom.out_h() * geom.out_w();
                    let g = slot(grads, b, geom.c_out);
                    kernels::channel_bias_backward(gy, geom.n, geom.c_out, hw, g);
                }
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                dims: (outer, c, inner),
                xhat,
                inv_std,
                batch,
            } => {
                let (outer, c, inner) = (*outer, *c, *inner);
                let sc = self.value(*scale).data();
                let mut sum_g = vec![S::zero(); c];
                let mut sum_gx = vec![S::zero(); c];
                for o in 0..outer {
                    for ci in 0..c {
                        let off = (o * c + ci) * inner;
                        for i in off..off + inner {
                            sum_g[ci] += gy[i];
                            sum_gx[ci] += gy[i] * xhat[i];
                        }
                    }
                }
                if tracked(*x) {
                    let m = S::from_usize(outer * inner);
                    let g = slot(grads, *x, gy.len());
                    for o in 0..outer {
                        for ci in 0..c {
                            let off = (o * c + ci) * inner;
                            let k = sc[ci] * inv_std[ci];
                            if *batch {
                                let (mg, mgx) = (sum_g[ci] / m, sum_gx[ci] / m);
                                for i in off..off + inner {
                                    g[i] += k * (gy[i] - mg - xhat[i] * mgx);
                                }
                            } else {
                                for i in off..off + inner {
                                    g[i] += k * gy[i];
                                }
                            }
                        }
                    }
                }
                if tracked(*scale) {
                    let g = slot(grads, *scale, c);
                    g.iter_mut().zip(&sum_gx).for_each(|(g, &d)| *g += d);
                }
                if tracked(*shift) {
                    let g = slot(grads, *shift, c);
                    g.iter_mut().zip(&sum_g).for_each(|(g, &d)| *g += d);
                }
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, len) in parts {
                    if tracked(p) {
                        let g = slot(grads, p, outer * len * inner);
                        for o in 0..*outer {
                            let src = &gy[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            let dst = &mut g[o * len * inner..(o + 1) * len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += len;
                }
            }
            Op::PadLast { x, before, after, len } => {
                let new_len = before + len + after;
                let g = slot(grads, *x, numel(*x));
                for (dst, src) in g.chunks_mut(*len).zip(gy.chunks(new_len)) {
                    dst.iter_mut().zip(&src[*before..before + len]).for_each(|(d, &s)| *d += s);
                }
            }
            Op::SliceLast { x, start, len, src_len } => {
                let g = slot(grads, *x, numel(*x));
                for (dst, src) in g.chunks_mut(*src_len).zip(gy.chunks(*len)) {
                    dst[*start..start + len].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                }
            }
            Op::SwapLast2 { x, outer, a, b } => {
                let back = transpose_blocks(gy, *outer, *b, *a);
                let g = slot(grads, *x, back.len());
                g.iter_mut().zip(&back).for_each(|(g, &d)| *g += d);
            }
            Op::Reshape(x) => {
                let g = slot(grads, *x, gy.len());
                g.iter_mut().zip(gy).for_each(|(g, &d)| *g += d);
            }
            Op::Gather { table, rows, width } => {
                let g = slot(grads, *table, numel(*table));
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..*width {
                        g[r * width + j] += gy[i * width + j];
                    }
                }
            }
            Op::MatmulNt { a, b, m, n, k } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if tracked(*a) {
                    let g = slot(grads, *a, m * k);
                    for i in 0..*m {
                        for j in 0..*n {
                            let d = gy[i * n + j];
                            for t in 0..*k {
                                g[i * k + t] += d * bv[j * k + t];
                            }
                        }
                    }
                }
                if tracked(*b) {
                    let g = slot(grads, *b, n * k);
                    for i in 0..*m {
                        for j in 0..*n {
                            let d = gy[i * n + j];
                            for t in 0..*k {
                                g[j * k + t] += d * av[i * k + t];
                            }
                        }
                    }
                }
            }
            Op::LatentMix { w, v, dims: (n, m, l, d) } => {
                let (n, m, l, d) = (*n, *m, *l, *d);
                let (wv, vv) = (self.value(*w).data(), self.value(*v).data());
                if tracked(*w) {
                    let g = slot(grads, *w, n * l);
                    for ni in 0..n {
                        for mi in 0..m {
                            let go = &gy[(ni * m + mi) * d..(ni * m + mi + 1) * d];
                            let base = (ni * m + mi) * l * d;
                            for li in 0..l {
                                let src = &vv[base + li * d..base + (li + 1) * d];
                                g[ni * l + li] += go.iter().zip(src).map(|(&a, &b)| a * b).sum::<S>();
                            }
                        }
                    }
                }
                if tracked(*v) {
                    let g = slot(grads, *v, n * m * l * d);
                    for ni in 0..n {
                        for mi in 0..m {
                            let go = &gy[(ni * m + mi) * d..(ni * m + mi + 1) * d];
                            let base = (ni * m + mi) * l * d;
                            for li in 0..l {
                                let wl = wv[ni * l + li];
                                let dst = &mut g[base + li * d..base + (li + 1) * d];
                                dst.iter_mut().zip(go).for_each(|(o, &s)| *o += wl * s);
                            }
                        }
                    }
                }
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let k = gy[0] * S::lit(2.0) / S::from_usize(av.len());
                if tracked(*a) {
                    let g = slot(grads, *a, av.len());
                    for i in 0..av.len() {
                        g[i] += k * (av[i] - bv[i]);
                    }
                }
                if tracked(*b) {
                    let g = slot(grads, *b, av.len());
                    for i in 0..av.len() {
                        g[i] -= k * (av[i] - bv[i]);
                    }
                }
            }
            Op::Sum(x) => {
                let g = slot(grads, *x, numel(*x));
                g.iter_mut().for_each(|g| *g += gy[0]);
            }
        }
    }
}

fn transpose_blocks<S: Real>(src: &[S], outer: usize, a: usize, b: usize) -> Vec<S> {
    let mut out = vec![S::zero(); src.len()];
    for o in 0..outer {
        let (s, d) = (&src[o * a * b..(o + 1) * a * b], &mut out[o * a * b..(o + 1) * a * b]);
        for i in 0..a {
            for j in 0..b {
                d[j * a + i] = s[i * b + j];
            }
        }
    }
    out
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Real> Gradients<S> {
    /// Gradient of the root with respect to `v`, or `None` when `v` does not
    /// influence the root through tracked nodes.
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::get`], with zeros for unreached nodes.
    pub fn get_or_zeros(&self, graph: &Graph<S>, v: Var) -> Tensor<S> {
        let shape = graph.shape(v);
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).unwrap(),
            None => Tensor::zeros(shape),
        }
    }
}
