//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Every value is a 2-D matrix (vectors are `1×n` rows or `n×1` columns).
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for the backward pass.

use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Arc<Mat>),
    Shift(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Relu(Var),
    Transpose(Var),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    PickPerRow(Var, Vec<usize>, usize),
    BlockDot(Var, Var, usize),
    BlockMix(Var, Var, usize),
    GatherCols(Var, Vec<usize>),
    ScaleRows(Var, Var),
    L2NormalizeRows(Var, Vec<f64>),
    MeanRows(Var, Vec<usize>),
    StraightThrough(Var),
    Sum(Var),
    LogSigmoid(Var, f64),
    RowDot(Var, Var),
}

struct Node {
    value: Arc<Mat>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads(Vec<Option<Mat>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.0[v.0].take()
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Mat>, op: Op, needs_grad: bool) -> Var {
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Arc<Mat>) -> Var {
        self.push_arc(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: impl Into<Arc<Mat>>) -> Var {
        self.push_arc(value.into(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Mat> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulBt(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Arc<Mat>) -> Var {
        let value = self.value(a) * &*c;
        let ng = self.ng(a);
        self.push(value, Op::MulConst(a, c), ng)
    }

    /// `a + c` for a constant `c` of the same shape.
    pub fn shift(&mut self, a: Var, c: &Mat) -> Var {
        let value = self.value(a) + c;
        let ng = self.ng(a);
        self.push(value, Op::Shift(a), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_masked(a, None)
    }

    /// Row-wise softmax restricted to entries where `allowed` is true; the
    /// remaining entries are exactly zero. A row with nothing allowed is zero.
    pub fn softmax_masked(&mut self, a: Var, allowed: Option<&Array2<bool>>) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.dim());
        if allowed.is_none() {
            out.assign(x);
            for mut yr in out.outer_iter_mut() {
                let max = yr.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut total = 0.0;
                yr.mapv_inplace(|v| {
                    let e = (v - max).exp();
                    total += e;
                    e
                });
                yr.mapv_inplace(|v| v / total);
            }
            let ng = self.ng(a);
            return self.push(out, Op::Softmax(a), ng);
        }
        for (r, (xr, mut yr)) in x.outer_iter().zip(out.outer_iter_mut()).enumerate() {
            let ok = |c: usize| allowed.is_none_or(|m| m[[r, c]]);
            let mut max = f64::NEG_INFINITY;
            for (c, &v) in xr.iter().enumerate() {
                if ok(c) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for (c, &v) in xr.iter().enumerate() {
                if ok(c) {
                    let e = (v - max).exp();
                    yr[c] = e;
                    total += e;
                }
            }
            yr.mapv_inplace(|v| v / total);
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Row-wise layer normalization with `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.outer_iter_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start, end), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, start, end), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select(Axis(0), idx);
        let ng = self.ng(a);
        self.push(value, Op::GatherRows(a, idx.to_vec()), ng)
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).select(Axis(1), idx);
        let ng = self.ng(a);
        self.push(value, Op::GatherCols(a, idx.to_vec()), ng)
    }

    /// Column of `a[n / k, idx[n]]` for every `n`: `k` picks per row of `a`.
    pub fn pick_per_row(&mut self, a: Var, idx: &[usize], k: usize) -> Var {
        let src = self.value(a);
        assert_eq!(idx.len(), src.nrows() * k, "one block of picks per row");
        let value = Mat::from_shape_fn((idx.len(), 1), |(n, _)| src[[n / k, idx[n]]]);
        let ng = self.ng(a);
        self.push(value, Op::PickPerRow(a, idx.to_vec(), k), ng)
    }

    /// `out[t, j] = q[t] · k[t·kb + j]`: each row of `q` against its own
    /// block of `kb` rows of `k`.
    pub fn block_dot(&mut self, q: Var, k: Var, kb: usize) -> Var {
        let (qv, kv) = (self.value(q), self.value(k));
        assert!(kb > 0 && kv.nrows() == qv.nrows() * kb && kv.ncols() == qv.ncols(), "block shapes");
        let value = Mat::from_shape_fn((qv.nrows(), kb), |(t, j)| qv.row(t).dot(&kv.row(t * kb + j)));
        let ng = self.ng(q) || self.ng(k);
        self.push(value, Op::BlockDot(q, k, kb), ng)
    }

    /// `out[t] = Σ_j w[t, j] · v[t·kb + j]`.
    pub fn block_mix(&mut self, w: Var, v: Var, kb: usize) -> Var {
        let (wv, vv) = (self.value(w), self.value(v));
        assert!(wv.ncols() == kb && vv.nrows() == wv.nrows() * kb, "block shapes");
        let mut value = Mat::zeros((wv.nrows(), vv.ncols()));
        for t in 0..wv.nrows() {
            let mut row = value.row_mut(t);
            for j in 0..kb {
                row.scaled_add(wv[[t, j]], &vv.row(t * kb + j));
            }
        }
        let ng = self.ng(w) || self.ng(v);
        self.push(value, Op::BlockMix(w, v, kb), ng)
    }

    /// Multiplies row `i` of `a` by `col[i, 0]`.
    pub fn scale_rows(&mut self, a: Var, col: Var) -> Var {
        let mut value = self.value(a).clone();
        for (mut row, &c) in value.outer_iter_mut().zip(self.value(col).iter()) {
            row *= c;
        }
        let ng = self.ng(a) || self.ng(col);
        self.push(value, Op::ScaleRows(a, col), ng)
    }

    /// Scales each row to unit L2 norm; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.outer_iter_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row.mapv_inplace(|v| v / n);
            }
            norms.push(n);
        }
        let ng = self.ng(a);
        self.push(value, Op::L2NormalizeRows(a, norms), ng)
    }

    /// `1×n` mean of the listed rows.
    pub fn mean_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        assert!(!rows.is_empty(), "mean over an empty row set");
        let x = self.value(a);
        let mut value = Mat::zeros((1, x.ncols()));
        for &r in rows {
            value.row_mut(0).scaled_add(1.0, &x.row(r));
        }
        value /= rows.len() as f64;
        let ng = self.ng(a);
        self.push(value, Op::MeanRows(a, rows.to_vec()), ng)
    }

    /// Straight-through node: the forward value is `value`, the backward pass
    /// hands the incoming gradient unchanged to `soft`.
    pub fn straight_through(&mut self, soft: Var, value: Mat) -> Var {
        assert_eq!(value.dim(), self.shape(soft));
        let ng = self.ng(soft);
        self.push(value, Op::StraightThrough(soft), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::Sum(a), ng)
    }

    /// Elementwise `log σ(clamp(x, -c, c))`.
    pub fn log_sigmoid(&mut self, a: Var, clamp: f64) -> Var {
        let value = self.value(a).mapv(|x| log_sigmoid(x.clamp(-clamp, clamp)));
        let ng = self.ng(a);
        self.push(value, Op::LogSigmoid(a, clamp), ng)
    }

    /// Per-row dot product, `m×n, m×n → m×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let prod = self.value(a) * self.value(b);
        let value = prod.sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::RowDot(a, b), ng)
    }

    /// Backward pass from a `1×1` root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        self.backward_from(&[(root, Mat::from_elem((1, 1), 1.0))])
    }

    /// Backward pass seeded with explicit output gradients.
    pub fn backward_from(&self, seeds: &[(Var, Mat)]) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(g.dim(), self.shape(*v), "seed gradient shape mismatch");
            if self.ng(*v) {
                accumulate(&mut grads[v.0], g.clone());
                top = top.max(v.0 + 1);
            }
        }
        for i in (0..top).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, g, &mut grads);
        }
        Grads(grads)
    }

    /// Gradient buffer of `v`, created on first use; `None` if `v` needs none.
    fn slot<'g>(&self, grads: &'g mut [Option<Mat>], v: Var) -> Option<&'g mut Mat> {
        if !self.ng(v) {
            return None;
        }
        let shape = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| Mat::zeros(shape)))
    }

    fn propagate(&self, node: &Node, g: Mat, grads: &mut [Option<Mat>]) {
        macro_rules! send {
            ($v:expr, $g:expr) => {{
                let v: Var = $v;
                let grad: Mat = $g;
                if self.nodes[v.0].needs_grad {
                    accumulate(&mut grads[v.0], grad);
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    send!(*a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    send!(*b, self.value(*a).t().dot(&g));
                }
            }
            Op::MatMulBt(a, b) => {
                if self.ng(*a) {
                    send!(*a, g.dot(self.value(*b)));
                }
                if self.ng(*b) {
                    send!(*b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.ng(*b) {
                    send!(*b, g.clone());
                }
                send!(*a, g);
            }
            Op::AddRow(a, row) => {
                if self.ng(*row) {
                    send!(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                send!(*a, g);
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    send!(*b, -&g);
                }
                send!(*a, g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    send!(*a, &g * self.value(*b));
                }
                if self.ng(*b) {
                    send!(*b, &g * self.value(*a));
                }
            }
            Op::Scale(a, c) => send!(*a, g * *c),
            Op::MulConst(a, c) => send!(*a, g * &**c),
            Op::Shift(a) => send!(*a, g),
            Op::Softmax(a) => {
                let y = &*node.value;
                let mut dx = Mat::zeros(y.dim());
                Zip::from(dx.rows_mut())
                    .and(y.rows())
                    .and(g.rows())
                    .for_each(|mut dxr, yr, gr| {
                        let inner = yr.dot(&gr);
                        Zip::from(&mut dxr)
                            .and(&yr)
                            .and(&gr)
                            .for_each(|d, &yv, &gv| *d = yv * (gv - inner));
                    });
                send!(*a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.ng(*bias) {
                    send!(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*gain) {
                    send!(*gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let dxhat = &g * self.value(*gain);
                    let n = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let is = inv_std[r];
                        for c in 0..xhat.ncols() {
                            dx[[r, c]] = is / n * (n * dh[c] - sum_dh - xh[c] * sum_dh_xh);
                        }
                    }
                    send!(*x, dx);
                }
            }
            Op::Relu(a) => {
                let mut dx = g;
                Zip::from(&mut dx)
                    .and(&*node.value)
                    .for_each(|d, &y| {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    });
                send!(*a, dx);
            }
            Op::Transpose(a) => send!(*a, g.t().to_owned()),
            Op::SliceCols(a, start, end) => {
                if let Some(dx) = self.slot(grads, *a) {
                    dx.slice_mut(s![.., *start..*end]).scaled_add(1.0, &g);
                }
            }
            Op::SliceRows(a, start, end) => {
                if let Some(dx) = self.slot(grads, *a) {
                    dx.slice_mut(s![*start..*end, ..]).scaled_add(1.0, &g);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.ng(p) {
                        send!(p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.ng(p) {
                        send!(p, g.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::GatherRows(a, idx) => {
                if let Some(dx) = self.slot(grads, *a) {
                    for (k, &r) in idx.iter().enumerate() {
                        dx.row_mut(r).scaled_add(1.0, &g.row(k));
                    }
                }
            }
            Op::PickPerRow(a, idx, k) => {
                if let Some(dx) = self.slot(grads, *a) {
                    for (n, &c) in idx.iter().enumerate() {
                        dx[[n / k, c]] += g[[n, 0]];
                    }
                }
            }
            Op::BlockDot(q, k, kb) => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                if self.ng(*q) {
                    let mut dq = Mat::zeros(qv.dim());
                    for t in 0..qv.nrows() {
                        let mut row = dq.row_mut(t);
                        for j in 0..*kb {
                            row.scaled_add(g[[t, j]], &kv.row(t * kb + j));
                        }
                    }
                    send!(*q, dq);
                }
                if self.ng(*k) {
                    let mut dk = Mat::zeros(kv.dim());
                    for t in 0..qv.nrows() {
                        for j in 0..*kb {
                            dk.row_mut(t * kb + j).scaled_add(g[[t, j]], &qv.row(t));
                        }
                    }
                    send!(*k, dk);
                }
            }
            Op::BlockMix(w, v, kb) => {
                let (wv, vv) = (self.value(*w), self.value(*v));
                if self.ng(*w) {
                    let dw = Mat::from_shape_fn(wv.dim(), |(t, j)| g.row(t).dot(&vv.row(t * kb + j)));
                    send!(*w, dw);
                }
                if self.ng(*v) {
                    let mut dv = Mat::zeros(vv.dim());
                    for t in 0..wv.nrows() {
                        for j in 0..*kb {
                            dv.row_mut(t * kb + j).scaled_add(wv[[t, j]], &g.row(t));
                        }
                    }
                    send!(*v, dv);
                }
            }
            Op::GatherCols(a, idx) => {
                if let Some(dx) = self.slot(grads, *a) {
                    for (k, &c) in idx.iter().enumerate() {
                        dx.column_mut(c).scaled_add(1.0, &g.column(k));
                    }
                }
            }
            Op::ScaleRows(a, col) => {
                if self.ng(*col) {
                    let av = self.value(*a);
                    let dc = Mat::from_shape_fn((av.nrows(), 1), |(r, _)| g.row(r).dot(&av.row(r)));
                    send!(*col, dc);
                }
                if self.ng(*a) {
                    let mut da = g;
                    for (mut row, &c) in da.outer_iter_mut().zip(self.value(*col).iter()) {
                        row *= c;
                    }
                    send!(*a, da);
                }
            }
            Op::L2NormalizeRows(a, norms) => {
                let y = &*node.value;
                let mut dx = Mat::zeros(y.dim());
                for r in 0..y.nrows() {
                    if norms[r] > 0.0 {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = yr.dot(&gr);
                        let mut dr = dx.row_mut(r);
                        Zip::from(&mut dr)
                            .and(&yr)
                            .and(&gr)
                            .for_each(|d, &yv, &gv| *d = (gv - yv * proj) / norms[r]);
                    }
                }
                send!(*a, dx);
            }
            Op::MeanRows(a, rows) => {
                if let Some(dx) = self.slot(grads, *a) {
                    let w = 1.0 / rows.len() as f64;
                    for &r in rows {
                        dx.row_mut(r).scaled_add(w, &g.row(0));
                    }
                }
            }
            Op::StraightThrough(soft) => send!(*soft, g),
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                send!(*a, Mat::from_elem((r, c), g[[0, 0]]));
            }
            Op::LogSigmoid(a, clamp) => {
                let x = self.value(*a);
                let mut dx = g;
                Zip::from(&mut dx).and(x).for_each(|d, &xv| {
                    if xv.abs() > *clamp {
                        *d = 0.0;
                    } else {
                        *d *= sigmoid(-xv);
                    }
                });
                send!(*a, dx);
            }
            Op::RowDot(a, b) => {
                if self.ng(*a) {
                    send!(*a, &g * self.value(*b));
                }
                if self.ng(*b) {
                    send!(*b, &g * self.value(*a));
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
