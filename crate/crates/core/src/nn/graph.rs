//! Tape-based reverse-mode autodiff over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so reverse creation order is a
//! valid topological order for the backward sweep. Ops are coarse (a whole
//! convolution or normalization layer per node) to keep the tape short.

use super::linalg::gemm;
use super::params::{ParamId, ParamStore};
use super::tensor::{log_softmax_rows, softmax_rows, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Which statistics a normalization node uses.
#[derive(Clone, Debug)]
pub enum NormKind {
    /// Per-channel statistics over (N, H, W) of the current batch.
    BatchStats,
    /// Per-channel frozen statistics.
    Running { mean: Vec<f64>, var: Vec<f64> },
    /// Per-sample statistics over channel groups.
    Group(usize),
    /// Per-row statistics over the last axis.
    Layer,
}

/// Batch statistics produced by a batch-stats normalization, for running
/// average updates.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

enum Op {
    Input,
    Param,
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Norm { x: Var, gamma: Var, beta: Var, layout: NormLayout, xhat: Vec<f64>, inv_std: Vec<f64>, frozen: bool },
    Relu(Var),
    Add(Var, Var),
    AddBroadcast { x: Var, bias: Var },
    Scale(Var, f64),
    GlobalAvgPool(Var),
    MeanTokens(Var),
    ToTokens(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    LogSoftmax(Var),
    SoftCrossEntropy { logits: Var, targets: Tensor, probs: Vec<f64> },
    Entropy { logits: Var, probs: Vec<f64> },
    FrobeniusNorm { logits: Var, probs: Vec<f64>, through_softmax: bool, norm: f64 },
    Nll { logp: Var, labels: Vec<usize>, weights: Vec<f64> },
    WeightedSum(Vec<(Var, f64)>),
    DotConst { x: Var, weights: Tensor },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    param: Option<ParamId>,
    op: Op,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Element layout of a normalization: `groups` statistic groups, each
/// spanning `blocks` contiguous runs of `run` elements.
#[derive(Clone, Copy, Debug)]
struct NormLayout {
    kind: NormLayoutKind,
    n: usize,
    c: usize,
    inner: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum NormLayoutKind {
    Batch,
    Group(usize),
    Layer,
}

impl NormLayout {
    fn num_groups(&self) -> usize {
        match self.kind {
            NormLayoutKind::Batch => self.c,
            NormLayoutKind::Group(g) => self.n * g,
            NormLayoutKind::Layer => self.n,
        }
    }

    /// Calls `f(element_index, channel)` for every element of group `gi`.
    fn for_each(&self, gi: usize, mut f: impl FnMut(usize, usize)) {
        match self.kind {
            NormLayoutKind::Batch => {
                let c = gi;
                for n in 0..self.n {
                    let base = (n * self.c + c) * self.inner;
                    for j in 0..self.inner {
                        f(base + j, c);
                    }
                }
            }
            NormLayoutKind::Group(g) => {
                let cpg = self.c / g;
                let (n, gg) = (gi / g, gi % g);
                let base = (n * self.c + gg * cpg) * self.inner;
                for j in 0..cpg * self.inner {
                    f(base + j, gg * cpg + j / self.inner);
                }
            }
            NormLayoutKind::Layer => {
                let base = gi * self.c;
                for j in 0..self.c {
                    f(base + j, j);
                }
            }
        }
    }

    fn group_size(&self) -> usize {
        match self.kind {
            NormLayoutKind::Batch => self.n * self.inner,
            NormLayoutKind::Group(g) => self.c / g * self.inner,
            NormLayoutKind::Layer => self.c,
        }
    }
}

pub const NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, grad: None, needs_grad, param: None, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, grad: None, needs_grad: false, param: None, op: Op::Input });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter. Only `trainable` parameters receive gradients.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            grad: None,
            needs_grad: trainable,
            param: Some(id),
            op: Op::Param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradients of every bound trainable parameter after [`Graph::backward`].
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor)> {
        self.nodes
            .iter()
            .filter_map(|n| match (n.param, &n.grad) {
                (Some(id), Some(g)) if n.needs_grad => Some((id, g)),
                _ => None,
            })
            .collect()
    }

    /// `x[.., in] * w[out, in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (out_f, in_f) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.cols(), in_f, "linear input width");
        let rows = xv.rows();
        let mut out = vec![0.0; rows * out_f];
        gemm(rows, in_f, out_f, xv.data(), false, wv.data(), true, &mut out, 0.0);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(out_f) {
                for (o, bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out_f;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b }, &parents)
    }

    /// 2-D convolution of `x[N, C, H, W]` with `w[O, C, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let k = ws[2];
        let ho = (xs[2] + 2 * pad - k) / stride + 1;
        let wo = (xs[3] + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { n: xs[0], c: xs[1], h: xs[2], w: xs[3], o: ws[0], k, stride, pad, ho, wo };
        let cols = im2col(self.value(x).data(), &geom);
        let ckk = geom.c * k * k;
        let spatial = geom.n * ho * wo;
        let mut y = vec![0.0; geom.o * spatial];
        gemm(geom.o, ckk, spatial, self.value(w).data(), false, &cols, false, &mut y, 0.0);
        // [O, N, HoWo] -> [N, O, HoWo]
        let hw = ho * wo;
        let mut out = vec![0.0; y.len()];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for o in 0..geom.o {
            let bo = bias.as_ref().map_or(0.0, |bv| bv[o]);
            for n in 0..geom.n {
                let src = &y[(o * geom.n + n) * hw..(o * geom.n + n + 1) * hw];
                let dst = &mut out[(n * geom.o + o) * hw..(n * geom.o + o + 1) * hw];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bo;
                }
            }
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(Tensor::new(vec![geom.n, geom.o, ho, wo], out), Op::Conv2d { x, w, b, geom }, &parents)
    }

    /// Normalization followed by a per-channel affine transform. Returns the
    /// output and, for [`NormKind::BatchStats`], the batch statistics used.
    ///
    /// Channel axis is 1 for batch/group norm on `[N, C, ...]` and the last
    /// axis for layer norm.
    pub fn norm(&mut self, x: Var, gamma: Var, beta: Var, kind: NormKind) -> (Var, Option<BatchStats>) {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let layout = match kind {
            NormKind::Layer => NormLayout { kind: NormLayoutKind::Layer, n: xv.rows(), c: xv.cols(), inner: 1 },
            _ => {
                let inner = shape[2..].iter().product::<usize>();
                let lk = match kind {
                    NormKind::Group(g) => {
                        assert_eq!(shape[1] % g, 0, "channels not divisible by groups");
                        NormLayoutKind::Group(g)
                    }
                    _ => NormLayoutKind::Batch,
                };
                NormLayout { kind: lk, n: shape[0], c: shape[1], inner }
            }
        };
        let data = xv.data();
        let groups = layout.num_groups();
        let m = layout.group_size() as f64;
        let mut xhat = vec![0.0; data.len()];
        let mut inv_std = vec![0.0; groups];
        let mut stats = None;
        let frozen = matches!(kind, NormKind::Running { .. });
        match &kind {
            NormKind::Running { mean, var } => {
                for gi in 0..groups {
                    let is = 1.0 / (var[gi] + NORM_EPS).sqrt();
                    inv_std[gi] = is;
                    layout.for_each(gi, |i, _| xhat[i] = (data[i] - mean[gi]) * is);
                }
            }
            _ => {
                let mut means = vec![0.0; groups];
                let mut vars = vec![0.0; groups];
                for gi in 0..groups {
                    // Shifted accumulation keeps constant groups exactly centred.
                    let mut first = None;
                    let mut sum = 0.0;
                    layout.for_each(gi, |i, _| {
                        let f = *first.get_or_insert(data[i]);
                        sum += data[i] - f;
                    });
                    let mean = first.unwrap_or(0.0) + sum / m;
                    let mut sq = 0.0;
                    layout.for_each(gi, |i, _| {
                        let d = data[i] - mean;
                        sq += d * d;
                    });
                    let var = sq / m;
                    let is = 1.0 / (var + NORM_EPS).sqrt();
                    layout.for_each(gi, |i, _| xhat[i] = (data[i] - mean) * is);
                    means[gi] = mean;
                    vars[gi] = var;
                    inv_std[gi] = is;
                }
                if matches!(kind, NormKind::BatchStats) {
                    stats = Some(BatchStats { mean: means, var: vars, count: layout.group_size() });
                }
            }
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; data.len()];
        for gi in 0..groups {
            layout.for_each(gi, |i, ch| out[i] = xhat[i] * gv[ch] + bv[ch]);
        }
        let var = self.push(
            Tensor::new(shape, out),
            Op::Norm { x, gamma, beta, layout, xhat, inv_std, frozen },
            &[x, gamma, beta],
        );
        (var, stats)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        assert_eq!(v.shape(), self.value(b).shape(), "add shape mismatch");
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// Adds `bias` (shape equal to the trailing axes of `x`) to every leading slice.
    pub fn add_broadcast(&mut self, x: Var, bias: Var) -> Var {
        let mut v = self.value(x).clone();
        let bv = self.value(bias).data();
        assert_eq!(v.len() % bv.len(), 0, "broadcast shape mismatch");
        for chunk in v.data_mut().chunks_mut(bv.len()) {
            for (a, b) in chunk.iter_mut().zip(bv) {
                *a += b;
            }
        }
        self.push(v, Op::AddBroadcast { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|a| a * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let out = xv.data().chunks(inner).map(|ch| ch.iter().sum::<f64>() / inner as f64).collect();
        self.push(Tensor::new(vec![n, c], out), Op::GlobalAvgPool(x), &[x])
    }

    /// `[B, T, D] -> [B, D]`.
    pub fn mean_tokens(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for ti in 0..t {
                let row = &xv.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for (o, r) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                    *o += r / t as f64;
                }
            }
        }
        self.push(Tensor::new(vec![b, d], out), Op::MeanTokens(x), &[x])
    }

    /// `[N, C, H, W] -> [N, H*W, C]`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut out = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                for p in 0..hw {
                    out[(ni * hw + p) * c + ci] = xv.data()[(ni * c + ci) * hw + p];
                }
            }
        }
        self.push(Tensor::new(vec![n, hw, c], out), Op::ToTokens(x), &[x])
    }

    /// Multi-head scaled dot-product self-attention on `[B, T, D]` projections.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let s = self.value(q).shape().to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        assert_eq!(d % heads, 0, "model width not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; b * t * d];
        let mut probs = vec![0.0; b * heads * t * t];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut qh = vec![0.0; t * dh];
        let mut kh = vec![0.0; t * dh];
        let mut vh = vec![0.0; t * dh];
        let mut oh = vec![0.0; t * dh];
        for bi in 0..b {
            for h in 0..heads {
                gather_head(qd, bi, h, t, d, dh, &mut qh);
                gather_head(kd, bi, h, t, d, dh, &mut kh);
                gather_head(vd, bi, h, t, d, dh, &mut vh);
                let pslice = &mut probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                gemm(t, dh, t, &qh, false, &kh, true, pslice, 0.0);
                pslice.iter_mut().for_each(|x| *x *= scale);
                let sm = softmax_rows(pslice, t);
                pslice.copy_from_slice(&sm);
                gemm(t, t, dh, pslice, false, &vh, false, &mut oh, 0.0);
                scatter_head(&oh, bi, h, t, d, dh, &mut out, false);
            }
        }
        self.push(Tensor::new(vec![b, t, d], out), Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    pub fn log_softmax(&mut self, logits: Var) -> Var {
        let lv = self.value(logits);
        let out = Tensor::new(lv.shape().to_vec(), log_softmax_rows(lv.data(), lv.cols()));
        self.push(out, Op::LogSoftmax(logits), &[logits])
    }

    /// `-mean_b sum_k t[b,k] log softmax(z)[b,k]` for a fixed target distribution.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Tensor) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape(), "target shape mismatch");
        let c = lv.cols();
        let rows = lv.rows();
        let logp = log_softmax_rows(lv.data(), c);
        let loss = -logp.iter().zip(targets.data()).map(|(l, t)| if *t == 0.0 { 0.0 } else { l * t }).sum::<f64>()
            / rows as f64;
        let probs = softmax_rows(lv.data(), c);
        self.push(Tensor::scalar(loss), Op::SoftCrossEntropy { logits, targets, probs }, &[logits])
    }

    /// Shannon entropy of the softmax predictions, summed over the batch.
    pub fn entropy_sum(&mut self, logits: Var) -> Var {
        let lv = self.value(logits);
        let c = lv.cols();
        let probs = softmax_rows(lv.data(), c);
        let logp = log_softmax_rows(lv.data(), c);
        let h = -probs.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
        self.push(Tensor::scalar(h), Op::Entropy { logits, probs }, &[logits])
    }

    /// Frobenius norm of the prediction matrix, `sqrt(sum_ij P_ij^2)`, where
    /// `P` is the row softmax of `logits` or the logits themselves.
    pub fn frobenius_norm(&mut self, logits: Var, through_softmax: bool) -> Var {
        let lv = self.value(logits);
        let probs = if through_softmax { softmax_rows(lv.data(), lv.cols()) } else { lv.data().to_vec() };
        let norm = probs.iter().map(|p| p * p).sum::<f64>().sqrt();
        self.push(
            Tensor::scalar(norm),
            Op::FrobeniusNorm { logits, probs, through_softmax, norm },
            &[logits],
        )
    }

    /// Weighted negative log-likelihood of log-probabilities `logp[B, c]`:
    /// per sample `-w[y] logp[y] / sum(w)`, mean over the batch.
    pub fn nll(&mut self, logp: Var, labels: &[usize], weights: &[f64]) -> Var {
        let lv = self.value(logp);
        let c = lv.cols();
        assert_eq!(weights.len(), c);
        assert_eq!(labels.len(), lv.rows());
        let wsum: f64 = weights.iter().sum();
        let total: f64 = labels.iter().enumerate().map(|(i, &y)| -weights[y] * lv.data()[i * c + y] / wsum).sum();
        let loss = total / labels.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::Nll { logp, labels: labels.to_vec(), weights: weights.to_vec() },
            &[logp],
        )
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|(v, w)| w * self.value(*v).item()).sum();
        let parents: Vec<Var> = terms.iter().map(|(v, _)| *v).collect();
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), &parents)
    }

    /// `sum(x * weights)` for a constant `weights` of the same size.
    pub fn dot_const(&mut self, x: Var, weights: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), weights.len(), "dot_const size mismatch");
        let total = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        self.push(Tensor::scalar(total), Op::DotConst { x, weights }, &[x])
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        self.nodes[root.0].grad = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (p, dg) in contributions {
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                match &mut self.nodes[p.0].grad {
                    Some(existing) => existing.add_assign(&dg),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (out_f, in_f) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.rows();
                if self.wants(*x) {
                    let mut dx = vec![0.0; rows * in_f];
                    gemm(rows, out_f, in_f, gd, false, wv.data(), false, &mut dx, 0.0);
                    out.push((*x, Tensor::new(xv.shape().to_vec(), dx)));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; out_f * in_f];
                    gemm(out_f, rows, in_f, gd, true, xv.data(), false, &mut dw, 0.0);
                    out.push((*w, Tensor::new(vec![out_f, in_f], dw)));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![0.0; out_f];
                        for row in gd.chunks(out_f) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                        out.push((*b, Tensor::new(vec![out_f], db)));
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let hw = geom.ho * geom.wo;
                let spatial = geom.n * hw;
                let ckk = geom.c * geom.k * geom.k;
                // [N, O, HoWo] -> [O, N*HoWo]
                let mut gy = vec![0.0; gd.len()];
                for n in 0..geom.n {
                    for o in 0..geom.o {
                        gy[(o * geom.n + n) * hw..(o * geom.n + n + 1) * hw]
                            .copy_from_slice(&gd[(n * geom.o + o) * hw..(n * geom.o + o + 1) * hw]);
                    }
                }
                if self.wants(*w) {
                    let cols = im2col(self.value(*x).data(), geom);
                    let mut dw = vec![0.0; geom.o * ckk];
                    gemm(geom.o, spatial, ckk, &gy, false, &cols, true, &mut dw, 0.0);
                    out.push((*w, Tensor::new(self.value(*w).shape().to_vec(), dw)));
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; ckk * spatial];
                    gemm(ckk, geom.o, spatial, self.value(*w).data(), true, &gy, false, &mut dcols, 0.0);
                    let dx = col2im(&dcols, geom);
                    out.push((*x, Tensor::new(vec![geom.n, geom.c, geom.h, geom.w], dx)));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let db = gy.chunks(spatial).map(|ch| ch.iter().sum()).collect();
                        out.push((*b, Tensor::new(vec![geom.o], db)));
                    }
                }
            }
            Op::Norm { x, gamma, beta, layout, xhat, inv_std, frozen } => {
                let gv = self.value(*gamma).data();
                let channels = gv.len();
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                let mut dx = vec![0.0; gd.len()];
                let m = layout.group_size() as f64;
                for gi in 0..layout.num_groups() {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    layout.for_each(gi, |e, ch| {
                        dgamma[ch] += gd[e] * xhat[e];
                        dbeta[ch] += gd[e];
                        let dxh = gd[e] * gv[ch];
                        sum_d += dxh;
                        sum_dx += dxh * xhat[e];
                    });
                    let is = inv_std[gi];
                    if *frozen {
                        layout.for_each(gi, |e, ch| dx[e] = gd[e] * gv[ch] * is);
                    } else {
                        layout.for_each(gi, |e, ch| {
                            let dxh = gd[e] * gv[ch];
                            dx[e] = is / m * (m * dxh - sum_d - xhat[e] * sum_dx);
                        });
                    }
                }
                if self.wants(*x) {
                    out.push((*x, Tensor::new(node.value.shape().to_vec(), dx)));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, Tensor::new(vec![channels], dgamma)));
                }
                if self.wants(*beta) {
                    out.push((*beta, Tensor::new(vec![channels], dbeta)));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(g, &a)| if a > 0.0 { *g } else { 0.0 }).collect();
                out.push((*x, Tensor::new(node.value.shape().to_vec(), d)));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::AddBroadcast { x, bias } => {
                out.push((*x, g.clone()));
                if self.wants(*bias) {
                    let bv = self.value(*bias);
                    let mut db = vec![0.0; bv.len()];
                    for chunk in gd.chunks(bv.len()) {
                        for (d, c) in db.iter_mut().zip(chunk) {
                            *d += c;
                        }
                    }
                    out.push((*bias, Tensor::new(bv.shape().to_vec(), db)));
                }
            }
            Op::Scale(x, s) => out.push((*x, g.map(|v| v * s))),
            Op::GlobalAvgPool(x) => {
                let xs = self.value(*x).shape().to_vec();
                let inner: usize = xs[2..].iter().product();
                let mut d = Vec::with_capacity(inner * gd.len());
                for &gv in gd {
                    d.extend(std::iter::repeat_n(gv / inner as f64, inner));
                }
                out.push((*x, Tensor::new(xs, d)));
            }
            Op::MeanTokens(x) => {
                let xs = self.value(*x).shape().to_vec();
                let (b, t, dd) = (xs[0], xs[1], xs[2]);
                let mut d = vec![0.0; b * t * dd];
                for bi in 0..b {
                    for ti in 0..t {
                        for j in 0..dd {
                            d[(bi * t + ti) * dd + j] = gd[bi * dd + j] / t as f64;
                        }
                    }
                }
                out.push((*x, Tensor::new(xs, d)));
            }
            Op::ToTokens(x) => {
                let xs = self.value(*x).shape().to_vec();
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let mut d = vec![0.0; gd.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        for p in 0..hw {
                            d[(ni * c + ci) * hw + p] = gd[(ni * hw + p) * c + ci];
                        }
                    }
                }
                out.push((*x, Tensor::new(xs, d)));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let s = self.value(*q).shape().to_vec();
                let (b, t, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; b * t * d];
                let mut dk = vec![0.0; b * t * d];
                let mut dv = vec![0.0; b * t * d];
                let mut qh = vec![0.0; t * dh];
                let mut kh = vec![0.0; t * dh];
                let mut vh = vec![0.0; t * dh];
                let mut goh = vec![0.0; t * dh];
                let mut da = vec![0.0; t * t];
                let mut tmp = vec![0.0; t * dh];
                for bi in 0..b {
                    for h in 0..*heads {
                        gather_head(qd, bi, h, t, d, dh, &mut qh);
                        gather_head(kd, bi, h, t, d, dh, &mut kh);
                        gather_head(vd, bi, h, t, d, dh, &mut vh);
                        gather_head(gd, bi, h, t, d, dh, &mut goh);
                        let a = &probs[(bi * heads + h) * t * t..(bi * heads + h + 1) * t * t];
                        // dV = A^T dO
                        gemm(t, t, dh, a, true, &goh, false, &mut tmp, 0.0);
                        scatter_head(&tmp, bi, h, t, d, dh, &mut dv, true);
                        // dA = dO V^T, then softmax backward
                        gemm(t, dh, t, &goh, false, &vh, true, &mut da, 0.0);
                        for r in 0..t {
                            let arow = &a[r * t..(r + 1) * t];
                            let drow = &mut da[r * t..(r + 1) * t];
                            let dot: f64 = arow.iter().zip(drow.iter()).map(|(x, y)| x * y).sum();
                            for (dd, aa) in drow.iter_mut().zip(arow) {
                                *dd = aa * (*dd - dot) * scale;
                            }
                        }
                        gemm(t, t, dh, &da, false, &kh, false, &mut tmp, 0.0);
                        scatter_head(&tmp, bi, h, t, d, dh, &mut dq, true);
                        gemm(t, t, dh, &da, true, &qh, false, &mut tmp, 0.0);
                        scatter_head(&tmp, bi, h, t, d, dh, &mut dk, true);
                    }
                }
                out.push((*q, Tensor::new(s.clone(), dq)));
                out.push((*k, Tensor::new(s.clone(), dk)));
                out.push((*v, Tensor::new(s, dv)));
            }
            Op::LogSoftmax(x) => {
                let c = node.value.cols();
                let mut d = vec![0.0; gd.len()];
                for ((drow, grow), lrow) in d.chunks_mut(c).zip(gd.chunks(c)).zip(node.value.data().chunks(c)) {
                    let gsum: f64 = grow.iter().sum();
                    for ((dd, gg), l) in drow.iter_mut().zip(grow).zip(lrow) {
                        *dd = gg - l.exp() * gsum;
                    }
                }
                out.push((*x, Tensor::new(node.value.shape().to_vec(), d)));
            }
            Op::SoftCrossEntropy { logits, targets, probs } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let rows = lv.rows() as f64;
                let g0 = gd[0];
                let mut d = vec![0.0; probs.len()];
                for ((drow, prow), trow) in d.chunks_mut(c).zip(probs.chunks(c)).zip(targets.data().chunks(c)) {
                    let tsum: f64 = trow.iter().sum();
                    for ((dd, p), t) in drow.iter_mut().zip(prow).zip(trow) {
                        *dd = g0 * (p * tsum - t) / rows;
                    }
                }
                out.push((*logits, Tensor::new(lv.shape().to_vec(), d)));
            }
            Op::Entropy { logits, probs } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let g0 = gd[0];
                let mut d = vec![0.0; probs.len()];
                for (drow, prow) in d.chunks_mut(c).zip(probs.chunks(c)) {
                    let logp: Vec<f64> = prow.iter().map(|p| if *p > 0.0 { p.ln() } else { 0.0 }).collect();
                    let h: f64 = -prow.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
                    for ((dd, p), l) in drow.iter_mut().zip(prow).zip(&logp) {
                        *dd = -g0 * p * (l + h);
                    }
                }
                out.push((*logits, Tensor::new(lv.shape().to_vec(), d)));
            }
            Op::FrobeniusNorm { logits, probs, through_softmax, norm } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let g0 = gd[0];
                let dp: Vec<f64> = probs.iter().map(|p| if *norm > 0.0 { g0 * p / norm } else { 0.0 }).collect();
                let d = if *through_softmax {
                    let mut d = vec![0.0; dp.len()];
                    for ((drow, gpr), prow) in d.chunks_mut(c).zip(dp.chunks(c)).zip(probs.chunks(c)) {
                        let dot: f64 = gpr.iter().zip(prow).map(|(a, b)| a * b).sum();
                        for ((dd, gg), p) in drow.iter_mut().zip(gpr).zip(prow) {
                            *dd = p * (gg - dot);
                        }
                    }
                    d
                } else {
                    dp
                };
                out.push((*logits, Tensor::new(lv.shape().to_vec(), d)));
            }
            Op::Nll { logp, labels, weights } => {
                let lv = self.value(*logp);
                let c = lv.cols();
                let wsum: f64 = weights.iter().sum();
                let scale = gd[0] / labels.len() as f64;
                let mut d = vec![0.0; lv.len()];
                for (i, &y) in labels.iter().enumerate() {
                    d[i * c + y] = -scale * weights[y] / wsum;
                }
                out.push((*logp, Tensor::new(lv.shape().to_vec(), d)));
            }
            Op::DotConst { x, weights } => {
                let xs = self.value(*x).shape().to_vec();
                out.push((*x, Tensor::new(xs, weights.data().iter().map(|w| w * gd[0]).collect())));
            }
            Op::WeightedSum(terms) => {
                for (v, w) in terms {
                    out.push((*v, Tensor::scalar(gd[0] * w)));
                }
            }
        }
        out
    }
}

fn gather_head(src: &[f64], b: usize, h: usize, t: usize, d: usize, dh: usize, dst: &mut [f64]) {
    for ti in 0..t {
        let off = (b * t + ti) * d + h * dh;
        dst[ti * dh..(ti + 1) * dh].copy_from_slice(&src[off..off + dh]);
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter_head(src: &[f64], b: usize, h: usize, t: usize, d: usize, dh: usize, dst: &mut [f64], accumulate: bool) {
    for ti in 0..t {
        let off = (b * t + ti) * d + h * dh;
        let target = &mut dst[off..off + dh];
        if accumulate {
            for (a, s) in target.iter_mut().zip(&src[ti * dh..(ti + 1) * dh]) {
                *a += s;
            }
        } else {
            target.copy_from_slice(&src[ti * dh..(ti + 1) * dh]);
        }
    }
}

/// `[N, C, H, W] -> [C*K*K, N*Ho*Wo]`.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let spatial = g.n * g.ho * g.wo;
    let mut cols = vec![0.0; g.c * g.k * g.k * spatial];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let base = (n * g.ho + oy) * g.wo;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let prow = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = prow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let spatial = g.n * g.ho * g.wo;
    let mut x = vec![0.0; g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for n in 0..g.n {
                    let plane = (n * g.c + c) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (n * g.ho + oy) * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                x[plane + iy as usize * g.w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
#[path = "graph_tests.rs"]
mod tests;
