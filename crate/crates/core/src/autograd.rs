//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation in evaluation order; [`Graph::backward`]
//! walks the tape in reverse. Attention, layer norm and the focal loss are
//! fused ops with hand-derived adjoints so the tape stays small.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `a + b` with `b` of shape `1 x c` or `1 x 1`.
    AddBroadcast(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    Sum(Var),
    Focal {
        logits: Var,
        targets: Rc<Array2<f64>>,
        alpha: f64,
        gamma: f64,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradient tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-entry binary focal loss on a logit and its target.
pub fn focal_term(x: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    let log_p = -softplus(-x);
    let log_1mp = -softplus(x);
    -alpha * y * (1.0 - p).powf(gamma) * log_p - (1.0 - alpha) * (1.0 - y) * p.powf(gamma) * log_1mp
}

/// Derivative of [`focal_term`] with respect to the logit.
pub fn focal_term_grad(x: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p = sigmoid(x);
    let log_p = -softplus(-x);
    let log_1mp = -softplus(x);
    let g1 = alpha * (1.0 - p).powf(gamma) * (gamma * p * log_p - (1.0 - p));
    let g0 = (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log_1mp);
    y * g1 + (1.0 - y) * g0
}

/// Row-wise masked softmax attention probabilities for one head. Rows with
/// no permitted column come out all-zero.
pub fn attention_probs(q: ArrayView2<f64>, k: ArrayView2<f64>, scale: f64, mask: Option<&Array2<bool>>) -> Array2<f64> {
    let mut scores = q.dot(&k.t());
    scores.mapv_inplace(|v| v * scale);
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for (j, v) in row.iter().enumerate() {
            if mask.is_none_or(|m| m[[i, j]]) && *v > max {
                max = *v;
            }
        }
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut total = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if mask.is_none_or(|m| m[[i, j]]) {
                *v = (*v - max).exp();
                total += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / total);
    }
    scores
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulNT(a, b), ng)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "add");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "sub");
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "mul");
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "div");
        let value = self.value(a) / self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Div(a, b), ng)
    }

    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (_, c) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert!(br == 1 && (bc == c || bc == 1), "add_broadcast: bad bias shape");
        let value = if bc == c {
            self.value(a) + self.value(b)
        } else {
            let s = self.value(b)[[0, 0]];
            self.value(a).mapv(|v| v + s)
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::AddBroadcast(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        let ng = self.ng(a);
        self.push(value, Op::Abs(a), ng)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "minimum");
        let value = Zip::from(self.value(a)).and(self.value(b)).map_collect(|x, y| x.min(*y));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Minimum(a, b), ng)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "maximum");
        let value = Zip::from(self.value(a)).and(self.value(b)).map_collect(|x, y| x.max(*y));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Maximum(a, b), ng)
    }

    /// Row-wise layer normalization with affine `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng)
    }

    /// Multi-head scaled dot-product attention. `mask[i][j] == false` forbids
    /// query `i` from attending key `j`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<Rc<Array2<bool>>>) -> Var {
        let (n, d) = self.shape(q);
        let (m, dk) = self.shape(k);
        assert_eq!(d, dk, "attention: q/k width mismatch");
        assert_eq!(self.shape(v), (m, d), "attention: value shape mismatch");
        assert!(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
        if let Some(mk) = &mask {
            assert_eq!(mk.dim(), (n, m), "attention: mask shape mismatch");
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let mut out = Array2::zeros((n, d));
        let mut probs = Vec::new();
        {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let p = attention_probs(
                    qv.slice(s![.., cols.clone()]),
                    kv.slice(s![.., cols.clone()]),
                    scale,
                    mask.as_deref(),
                );
                out.slice_mut(s![.., cols.clone()]).assign(&p.dot(&vv.slice(s![.., cols])));
                if ng {
                    probs.push(p);
                }
            }
        }
        self.push(out, Op::Attention { q, k, v, heads, probs }, ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), idx);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, idx.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start, end), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean binary focal loss over all entries of `logits` against `targets`.
    pub fn focal_loss(&mut self, logits: Var, targets: Rc<Array2<f64>>, alpha: f64, gamma: f64) -> Var {
        assert_eq!(self.shape(logits), targets.dim(), "focal_loss: shape mismatch");
        let lv = self.value(logits);
        let n = lv.len().max(1) as f64;
        let total: f64 = Zip::from(lv).and(&*targets).fold(0.0, |acc, x, y| acc + focal_term(*x, *y, alpha, gamma));
        let value = Array2::from_elem((1, 1), total / n);
        let ng = self.ng(logits);
        self.push(value, Op::Focal { logits, targets, alpha, gamma }, ng)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.ng(*a) {
                    self.accumulate(grads, *a, g / bv);
                }
                if self.ng(*b) {
                    let gb = Zip::from(g).and(&node.value).and(bv).map_collect(|g, out, b| -g * out / b);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*b) {
                    let gb = if self.shape(*b).1 == 1 {
                        Array2::from_elem((1, 1), g.sum())
                    } else {
                        g.sum_axis(Axis(0)).insert_axis(Axis(0))
                    };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g * *s),
            Op::Relu(a) => {
                let ga = Zip::from(g).and(self.value(*a)).map_collect(|g, x| if *x > 0.0 { *g } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = Zip::from(g).and(&node.value).map_collect(|g, y| g * y * (1.0 - y));
                self.accumulate(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = Zip::from(g).and(self.value(*a)).map_collect(|g, x| {
                    if *x > 0.0 {
                        *g
                    } else if *x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(node.op, Op::Minimum(..));
                let (av, bv) = (self.value(*a), self.value(*b));
                // ties route the gradient to the first operand
                let pick_a = Zip::from(av).and(bv).map_collect(|x, y| if is_min { x <= y } else { x >= y });
                if self.ng(*a) {
                    let ga = Zip::from(g).and(&pick_a).map_collect(|g, p| if *p { *g } else { 0.0 });
                    self.accumulate(grads, *a, ga);
                }
                if self.ng(*b) {
                    let gb = Zip::from(g).and(&pick_a).map_collect(|g, p| if *p { 0.0 } else { *g });
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gv = self.value(*gamma);
                if self.ng(*gamma) {
                    let gg = (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *gamma, gg);
                }
                if self.ng(*beta) {
                    self.accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let c = xhat.ncols() as f64;
                    let dxhat = g * gv;
                    let mut dx = Array2::zeros(xhat.dim());
                    for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let is = inv_std[r];
                        for ((o, d), x) in out.iter_mut().zip(dh.iter()).zip(xh.iter()) {
                            *o = is / c * (c * d - sum_dh - x * sum_dh_xh);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.ncols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Array2::zeros(qv.dim());
                let mut gk = Array2::zeros(kv.dim());
                let mut gvv = Array2::zeros(vv.dim());
                for (h, p) in probs.iter().enumerate() {
                    let cols = h * dh..(h + 1) * dh;
                    let go = g.slice(s![.., cols.clone()]);
                    let vh = vv.slice(s![.., cols.clone()]);
                    gvv.slice_mut(s![.., cols.clone()]).assign(&p.t().dot(&go));
                    let dp = go.dot(&vh.t());
                    let mut ds = &dp * p;
                    for (r, mut row) in ds.rows_mut().into_iter().enumerate() {
                        let dot: f64 = row.sum();
                        let prow = p.row(r);
                        Zip::from(&mut row).and(&prow).for_each(|d, pp| *d -= pp * dot);
                    }
                    ds.mapv_inplace(|x| x * scale);
                    gq.slice_mut(s![.., cols.clone()]).assign(&ds.dot(&kv.slice(s![.., cols.clone()])));
                    gk.slice_mut(s![.., cols.clone()]).assign(&ds.t().dot(&qv.slice(s![.., cols])));
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gvv);
            }
            Op::GatherRows(a, idx) => {
                if self.ng(*a) {
                    let mut ga = Array2::zeros(self.shape(*a));
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(src);
                        row += &g.row(r);
                    }
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.ng(*p) {
                        self.accumulate(grads, *p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    if self.ng(*p) {
                        self.accumulate(grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::SliceCols(a, start, end) => {
                if self.ng(*a) {
                    let mut ga = Array2::zeros(self.shape(*a));
                    ga.slice_mut(s![.., *start..*end]).assign(g);
                    self.accumulate(grads, *a, ga);
                }
            }
            Op::Sum(a) => {
                let s = g[[0, 0]];
                self.accumulate(grads, *a, Array2::from_elem(self.shape(*a), s));
            }
            Op::Focal { logits, targets, alpha, gamma } => {
                let lv = self.value(*logits);
                let n = lv.len().max(1) as f64;
                let s = g[[0, 0]] / n;
                let ga = Zip::from(lv)
                    .and(&**targets)
                    .map_collect(|x, y| s * focal_term_grad(*x, *y, *alpha, *gamma));
                self.accumulate(grads, *logits, ga);
            }
        }
    }
}
