//! Tape-based reverse-mode differentiation over 2-D `f64` matrices.
//!
//! Sequences of several samples are stacked along rows; a [`SeqLayout`] records
//! where each sample starts so that attention, convolution, and per-sample
//! broadcasts stay within their own segment.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Row segmentation of a stacked batch: `(start_row, len)` per sample.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    segments: Vec<(usize, usize)>,
    rows: usize,
}

impl SeqLayout {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut segments = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            segments.push((start, len));
            start += len;
        }
        SeqLayout {
            segments,
            rows: start,
        }
    }

    pub fn single(len: usize) -> Self {
        Self::from_lengths(&[len])
    }

    pub fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Precomputed rotary angles for every stacked row.
#[derive(Debug)]
struct RopeTable {
    cos: Mat,
    sin: Mat,
    heads: usize,
}

impl RopeTable {
    fn new(layout: &SeqLayout, dim: usize, heads: usize, base: f64, offset: usize) -> Self {
        let head_dim = dim / heads;
        let pairs = head_dim / 2;
        let mut cos = Mat::zeros((layout.rows(), pairs));
        let mut sin = Mat::zeros((layout.rows(), pairs));
        for &(start, len) in layout.segments() {
            for p in 0..len {
                let pos = (p + offset) as f64;
                for i in 0..pairs {
                    let freq = base.powf(-(2.0 * i as f64) / head_dim as f64);
                    let ang = pos * freq;
                    cos[[start + p, i]] = ang.cos();
                    sin[[start + p, i]] = ang.sin();
                }
            }
        }
        RopeTable { cos, sin, heads }
    }

    /// Rotate each `(2i, 2i+1)` column pair inside every head. `inverse` applies the transpose.
    fn apply(&self, x: &Mat, inverse: bool) -> Mat {
        let (rows, dim) = x.dim();
        let head_dim = dim / self.heads;
        let pairs = head_dim / 2;
        let mut out = x.clone();
        let sign = if inverse { -1.0 } else { 1.0 };
        for r in 0..rows {
            for h in 0..self.heads {
                let base = h * head_dim;
                for i in 0..pairs {
                    let c = self.cos[[r, i]];
                    let sn = sign * self.sin[[r, i]];
                    let a = x[[r, base + 2 * i]];
                    let b = x[[r, base + 2 * i + 1]];
                    out[[r, base + 2 * i]] = a * c - b * sn;
                    out[[r, base + 2 * i + 1]] = a * sn + b * c;
                }
            }
        }
        out
    }
}

/// Rotary position settings for one attention call.
#[derive(Clone, Copy, Debug)]
pub struct Rotary {
    pub base: f64,
    /// Added to every in-segment position; used to test shift invariance.
    pub offset: usize,
}

impl Default for Rotary {
    fn default() -> Self {
        Rotary {
            base: 10_000.0,
            offset: 0,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    Rope {
        x: Var,
        table: Rc<RopeTable>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<SeqLayout>,
        probs: Vec<Mat>,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        b: Var,
        layout: Rc<SeqLayout>,
    },
    Rows {
        x: Var,
        idx: Vec<usize>,
    },
    RepeatSegments {
        x: Var,
        layout: Rc<SeqLayout>,
    },
    WeightedSqErr {
        pred: Var,
        target: Mat,
        weights: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Records a computation so it can be differentiated with [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let th = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub(crate) const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable input.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// `a (n×d) + row (1×d)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// `x·W + b` with `b` a `1×out` row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, dim) = xv.dim();
        let mut xhat = Mat::zeros((rows, dim));
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.sum() / dim as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for c in 0..dim {
                xhat[[r, c]] = (row[c] - mean) * rs;
            }
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn rope(&mut self, x: Var, heads: usize, layout: &SeqLayout, rotary: Rotary) -> Var {
        let dim = self.value(x).ncols();
        let table = Rc::new(RopeTable::new(layout, dim, heads, rotary.base, rotary.offset));
        let value = table.apply(self.value(x), false);
        let ng = self.ng(x);
        self.push(value, Op::Rope { x, table }, ng)
    }

    /// Scaled dot-product multi-head attention within each segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: Rc<SeqLayout>,
        causal: bool,
    ) -> Var {
        let (rows, dim) = self.value(q).dim();
        let head_dim = dim / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut out = Mat::zeros((rows, dim));
        let mut probs = Vec::with_capacity(layout.len() * heads);
        {
            let qv = self.value(q);
            let kv = self.value(k);
            let vv = self.value(v);
            for &(start, len) in layout.segments() {
                for h in 0..heads {
                    let cols = h * head_dim..(h + 1) * head_dim;
                    let qs = qv.slice(s![start..start + len, cols.clone()]);
                    let ks = kv.slice(s![start..start + len, cols.clone()]);
                    let vs = vv.slice(s![start..start + len, cols.clone()]);
                    let mut p = qs.dot(&ks.t());
                    for i in 0..len {
                        let mut row = p.row_mut(i);
                        let lim = if causal { i + 1 } else { len };
                        let mut mx = f64::NEG_INFINITY;
                        for j in 0..lim {
                            row[j] *= scale;
                            mx = mx.max(row[j]);
                        }
                        let mut sum = 0.0;
                        for j in 0..lim {
                            row[j] = (row[j] - mx).exp();
                            sum += row[j];
                        }
                        for j in 0..len {
                            if j < lim {
                                row[j] /= sum;
                            } else {
                                row[j] = 0.0;
                            }
                        }
                    }
                    let o = p.dot(&vs);
                    out.slice_mut(s![start..start + len, cols]).assign(&o);
                    probs.push(p);
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
            ng,
        )
    }

    /// Depthwise 1-D convolution with zero "same" padding; `w` is `kernel×channels`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, b: Var, layout: Rc<SeqLayout>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (rows, ch) = xv.dim();
        let kernel = wv.nrows();
        let pad = kernel / 2;
        let mut out = Mat::zeros((rows, ch));
        for &(start, len) in layout.segments() {
            for t in 0..len {
                let mut orow = out.row_mut(start + t);
                orow.assign(&bv.row(0));
                for j in 0..kernel {
                    let src = t as isize + j as isize - pad as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let xr = xv.row(start + src as usize);
                    let wr = wv.row(j);
                    Zip::from(&mut orow)
                        .and(&xr)
                        .and(&wr)
                        .for_each(|o, &a, &c| *o += a * c);
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out, Op::DepthwiseConv { x, w, b, layout }, ng)
    }

    /// Gathers rows by index (also serves as an embedding lookup).
    pub fn rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros((idx.len(), xv.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&xv.row(i));
        }
        let ng = self.ng(x);
        self.push(
            out,
            Op::Rows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// Broadcasts row `s` of `x` to every row of segment `s`.
    pub fn repeat_segments(&mut self, x: Var, layout: Rc<SeqLayout>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), layout.len(), "repeat_segments: one row per segment");
        let mut out = Mat::zeros((layout.rows(), xv.ncols()));
        for (si, &(start, len)) in layout.segments().iter().enumerate() {
            for t in 0..len {
                out.row_mut(start + t).assign(&xv.row(si));
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::RepeatSegments { x, layout }, ng)
    }

    /// `Σ_i w_i Σ_j (pred_ij − target_ij)²` as a `1×1` node.
    pub fn weighted_sq_err(&mut self, pred: Var, target: Mat, weights: Vec<f64>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), target.dim(), "weighted_sq_err shape");
        assert_eq!(weights.len(), pv.nrows());
        let mut total = 0.0;
        for (r, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let mut acc = 0.0;
            for (a, b) in pv.row(r).iter().zip(target.row(r).iter()) {
                acc += (a - b) * (a - b);
            }
            total += w * acc;
        }
        let ng = self.ng(pred);
        self.push(
            Mat::from_elem((1, 1), total),
            Op::WeightedSqErr {
                pred,
                target,
                weights,
            },
            ng,
        )
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[target_i])` as a `1×1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Vec<f64>) -> Var {
        let lv = self.value(logits);
        let (rows, classes) = lv.dim();
        assert_eq!(targets.len(), rows);
        assert_eq!(weights.len(), rows);
        let mut probs = Mat::zeros((rows, classes));
        let mut total = 0.0;
        for r in 0..rows {
            let row = lv.row(r);
            let mx = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for c in 0..classes {
                let e = (row[c] - mx).exp();
                probs[[r, c]] = e;
                sum += e;
            }
            for c in 0..classes {
                probs[[r, c]] /= sum;
            }
            if weights[r] != 0.0 {
                let logp = row[targets[r]] - mx - sum.ln();
                total -= weights[r] * logp;
            }
        }
        let ng = self.ng(logits);
        self.push(
            Mat::from_elem((1, 1), total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            ng,
        )
    }

    /// Runs reverse accumulation from the scalar node `out`; returns one optional
    /// gradient per node (indexed by [`Var`]).
    pub fn backward(&self, out: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(Mat::from_elem(self.nodes[out.0].value.dim(), 1.0));
        for i in (0..=out.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        acc(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *row, gr);
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, c) => {
                    acc(&mut grads, *a, g * *c);
                }
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|d, &x| *d *= gelu_grad(x));
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    if self.ng(*gamma) {
                        let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *gamma, gg);
                    }
                    if self.ng(*beta) {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *beta, gb);
                    }
                    if self.ng(*x) {
                        let gam = self.value(*gamma);
                        let (rows, dim) = g.dim();
                        let mut gx = Mat::zeros((rows, dim));
                        for r in 0..rows {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for c in 0..dim {
                                let d = g[[r, c]] * gam[[0, c]];
                                m1 += d;
                                m2 += d * xhat[[r, c]];
                            }
                            m1 /= dim as f64;
                            m2 /= dim as f64;
                            for c in 0..dim {
                                let d = g[[r, c]] * gam[[0, c]];
                                gx[[r, c]] = rstd[r] * (d - m1 - xhat[[r, c]] * m2);
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.ng(*p) {
                            acc(&mut grads, *p, g.slice(s![.., col..col + w]).to_owned());
                        }
                        col += w;
                    }
                }
                Op::Rope { x, table } => {
                    acc(&mut grads, *x, table.apply(&g, true));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    layout,
                    probs,
                } => {
                    let qv = self.value(*q);
                    let kv = self.value(*k);
                    let vv = self.value(*v);
                    let (rows, dim) = qv.dim();
                    let head_dim = dim / heads;
                    let scale = 1.0 / (head_dim as f64).sqrt();
                    let mut gq = Mat::zeros((rows, dim));
                    let mut gk = Mat::zeros((rows, dim));
                    let mut gv = Mat::zeros((rows, dim));
                    let mut pi = 0;
                    for &(start, len) in layout.segments() {
                        for h in 0..*heads {
                            let cols = h * head_dim..(h + 1) * head_dim;
                            let rs = start..start + len;
                            let p = &probs[pi];
                            pi += 1;
                            let go = g.slice(s![rs.clone(), cols.clone()]);
                            let vs = vv.slice(s![rs.clone(), cols.clone()]);
                            gv.slice_mut(s![rs.clone(), cols.clone()])
                                .assign(&p.t().dot(&go));
                            let gp = go.dot(&vs.t());
                            let mut gs = Mat::zeros((len, len));
                            for i in 0..len {
                                let mut dot = 0.0;
                                for j in 0..len {
                                    dot += gp[[i, j]] * p[[i, j]];
                                }
                                for j in 0..len {
                                    gs[[i, j]] = p[[i, j]] * (gp[[i, j]] - dot) * scale;
                                }
                            }
                            let qs = qv.slice(s![rs.clone(), cols.clone()]);
                            let ks = kv.slice(s![rs.clone(), cols.clone()]);
                            gq.slice_mut(s![rs.clone(), cols.clone()])
                                .assign(&gs.dot(&ks));
                            gk.slice_mut(s![rs, cols]).assign(&gs.t().dot(&qs));
                        }
                    }
                    if self.ng(*q) {
                        acc(&mut grads, *q, gq);
                    }
                    if self.ng(*k) {
                        acc(&mut grads, *k, gk);
                    }
                    if self.ng(*v) {
                        acc(&mut grads, *v, gv);
                    }
                }
                Op::DepthwiseConv { x, w, b, layout } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (rows, ch) = xv.dim();
                    let kernel = wv.nrows();
                    let pad = kernel / 2;
                    let mut gx = Mat::zeros((rows, ch));
                    let mut gw = Mat::zeros((kernel, ch));
                    for &(start, len) in layout.segments() {
                        for t in 0..len {
                            let grow = g.row(start + t);
                            for j in 0..kernel {
                                let src = t as isize + j as isize - pad as isize;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                let sr = start + src as usize;
                                for c in 0..ch {
                                    gx[[sr, c]] += wv[[j, c]] * grow[c];
                                    gw[[j, c]] += xv[[sr, c]] * grow[c];
                                }
                            }
                        }
                    }
                    if self.ng(*b) {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *b, gb);
                    }
                    if self.ng(*w) {
                        acc(&mut grads, *w, gw);
                    }
                    if self.ng(*x) {
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::Rows { x, idx } => {
                    let mut gx = Mat::zeros(self.value(*x).dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut dst = gx.row_mut(src);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::RepeatSegments { x, layout } => {
                    let mut gx = Mat::zeros(self.value(*x).dim());
                    for (si, &(start, len)) in layout.segments().iter().enumerate() {
                        let part = g.slice(s![start..start + len, ..]).sum_axis(Axis(0));
                        gx.row_mut(si).assign(&part);
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::WeightedSqErr {
                    pred,
                    target,
                    weights,
                } => {
                    let up = g[[0, 0]];
                    let pv = self.value(*pred);
                    let mut gp = Mat::zeros(pv.dim());
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..pv.ncols() {
                            gp[[r, c]] = up * 2.0 * w * (pv[[r, c]] - target[[r, c]]);
                        }
                    }
                    acc(&mut grads, *pred, gp);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let up = g[[0, 0]];
                    let mut gl = Mat::zeros(probs.dim());
                    for (r, &w) in weights.iter().enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for c in 0..probs.ncols() {
                            gl[[r, c]] = up * w * probs[[r, c]];
                        }
                        gl[[r, targets[r]]] -= up * w;
                    }
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        Grads { grads }
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of a backward pass; only leaves keep theirs.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}
