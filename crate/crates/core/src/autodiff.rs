//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records every primitive operation eagerly (values are computed
//! at build time); [`Tape::backward`] then walks the record in reverse and
//! accumulates gradients. Everything is a 2-D matrix: scalars are `1x1`,
//! row vectors are `1xd`. This keeps the op set small and the backward
//! formulas auditable.

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    /// Tracked input (parameter or differentiable input).
    Leaf,
    /// Untracked input; gradients are accumulated but never read.
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a (n x d) + broadcast rows of b (1 x d)`.
    AddRow(Var, Var),
    /// `a (n x d) * broadcast rows of b (1 x d)` elementwise.
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    /// `s (1x1) * a`, with gradient flowing to both.
    MulScalar(Var, Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    /// Row lookup: output row i = input row `idx[i]`. Backward scatter-adds.
    GatherRows(Var, Vec<usize>),
    Sigmoid(Var),
    Gelu(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, f64, f64),
    /// Row-wise softmax over entries where `mask > 0`; masked entries get
    /// probability zero. A fully masked row yields all zeros. The mask is
    /// not stored: masked probabilities are zero, which already silences
    /// their gradients.
    SoftmaxRows(Var),
    /// Row-wise `(x - mean) / sqrt(var + eps)`, without affine.
    LayerNormRows(Var, f64),
    /// Row-wise `x / sqrt(|x|^2 + eps^2)`.
    NormalizeRows(Var, f64),
    /// Per-row minimum -> `n x 1`; gradient routed to the first argmin.
    RowMin(Var),
    /// Global maximum -> `1 x 1`; gradient routed to the first argmax.
    MaxAll(Var),
    SumAll(Var),
    /// `sum_i w[i] * (-log softmax(row_i)[t[i]])` -> `1 x 1`.
    NllRows(Var, Vec<usize>, Vec<f64>),
    /// `sum_i KL(r_i || softmax(row_i))` with the `0 ln 0 = 0` convention.
    KlRows(Var, Array2<f64>),
    /// Squared Euclidean distances between rows: `(n x d, m x d) -> n x m`.
    PairwiseSqDist(Var, Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Records a computation for later differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0].take()
    }
}

fn row_softmax_masked(x: &Array2<f64>, mask: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (i, row) in x.outer_iter().enumerate() {
        let mut mx = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if mask[[i, j]] > 0.0 && v > mx {
                mx = v;
            }
        }
        if mx == f64::NEG_INFINITY {
            continue; // fully masked row stays zero
        }
        let mut denom = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if mask[[i, j]] > 0.0 {
                let e = (v - mx).exp();
                out[[i, j]] = e;
                denom += e;
            }
        }
        if denom > 0.0 {
            for j in 0..row.len() {
                out[[i, j]] /= denom;
            }
        }
    }
    out
}

fn row_softmax(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-1x1 node");
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf: a parameter or differentiable input.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Untracked leaf (masks, targets, fixed data).
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, br, "matmul shape mismatch {}x{} . {}x{}", ar, ac, br, bc);
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (_, ac) = self.shape(a);
        assert_eq!(self.shape(b), (1, ac), "add_row: b must be 1x{}", ac);
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value.row(0);
        self.push(v, Op::AddRow(a, b))
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (_, ac) = self.shape(a);
        assert_eq!(self.shape(b), (1, ac), "mul_row: b must be 1x{}", ac);
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value.row(0);
        self.push(v, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = &self.nodes[a.0].value * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let v = &self.nodes[a.0].value + k;
        self.push(v, Op::AddConst(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "mul_scalar: s must be 1x1");
        let k = self.nodes[s.0].value[[0, 0]];
        let v = &self.nodes[a.0].value * k;
        self.push(v, Op::MulScalar(a, s))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let rows: usize = parts.iter().map(|p| self.shape(*p).0).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            let (r, c) = self.shape(*p);
            assert_eq!(c, cols, "concat_rows: column mismatch");
            v.slice_mut(s![at..at + r, ..]).assign(&self.nodes[p.0].value);
            at += r;
        }
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut v = Array2::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            let (r, c) = self.shape(*p);
            assert_eq!(r, rows, "concat_cols: row mismatch");
            v.slice_mut(s![.., at..at + c]).assign(&self.nodes[p.0].value);
            at += c;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (r, _) = self.shape(a);
        assert!(start < end && end <= r, "slice_rows out of range");
        let v = self.nodes[a.0].value.slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start, end))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (_, c) = self.shape(a);
        assert!(start < end && end <= c, "slice_cols out of range");
        let v = self.nodes[a.0].value.slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (r, c) = self.shape(a);
        let mut v = Array2::zeros((idx.len(), c));
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < r, "gather_rows index {} out of range {}", j, r);
            v.row_mut(i).assign(&self.nodes[a.0].value.row(j));
        }
        self.push(v, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Softmax per row restricted to entries where `mask > 0`.
    pub fn softmax_rows(&mut self, a: Var, mask: Array2<f64>) -> Var {
        assert_eq!(self.shape(a), mask.dim(), "softmax mask shape mismatch");
        let v = row_softmax_masked(&self.nodes[a.0].value, &mask);
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = &self.nodes[a.0].value;
        let n = x.ncols() as f64;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        self.push(v, Op::LayerNormRows(a, eps))
    }

    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let norm_sq: f64 = row.iter().map(|&x| x * x).sum();
            let inv = 1.0 / (norm_sq + eps * eps).sqrt();
            row.mapv_inplace(|x| x * inv);
        }
        self.push(v, Op::NormalizeRows(a, eps))
    }

    pub fn row_min(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = Array2::zeros((x.nrows(), 1));
        for (i, row) in x.outer_iter().enumerate() {
            v[[i, 0]] = row.iter().cloned().fold(f64::INFINITY, f64::min);
        }
        self.push(v, Op::RowMin(a))
    }

    pub fn max_all(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        self.push(Array2::from_elem((1, 1), mx), Op::MaxAll(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.sum();
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(a))
    }

    /// Weighted negative log-likelihood over rows of logits.
    pub fn nll_rows(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let x = &self.nodes[logits.0].value;
        assert_eq!(targets.len(), x.nrows(), "nll targets/rows mismatch");
        assert_eq!(weights.len(), x.nrows(), "nll weights/rows mismatch");
        let p = row_softmax(x);
        let mut total = 0.0;
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            assert!(t < x.ncols(), "nll target out of vocabulary");
            total += w * -(p[[i, t]].max(f64::MIN_POSITIVE)).ln();
        }
        self.push(
            Array2::from_elem((1, 1), total),
            Op::NllRows(logits, targets.to_vec(), weights.to_vec()),
        )
    }

    /// `sum_i KL(r_i || softmax(logit row i))` with `0 ln 0 = 0`.
    pub fn kl_rows(&mut self, logits: Var, target_probs: Array2<f64>) -> Var {
        let x = &self.nodes[logits.0].value;
        assert_eq!(x.dim(), target_probs.dim(), "kl shape mismatch");
        let p = row_softmax(x);
        let mut total = 0.0;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let r = target_probs[[i, j]];
                if r > 0.0 {
                    total += r * (r.ln() - p[[i, j]].max(f64::MIN_POSITIVE).ln());
                }
            }
        }
        self.push(
            Array2::from_elem((1, 1), total),
            Op::KlRows(logits, target_probs),
        )
    }

    /// All-pairs squared distances between rows of `a` and rows of `b`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Var {
        let xa = &self.nodes[a.0].value;
        let xb = &self.nodes[b.0].value;
        assert_eq!(xa.ncols(), xb.ncols(), "pairwise dim mismatch");
        let mut v = Array2::zeros((xa.nrows(), xb.nrows()));
        for i in 0..xa.nrows() {
            for j in 0..xb.nrows() {
                let mut acc = 0.0;
                for c in 0..xa.ncols() {
                    let d = xa[[i, c]] - xb[[j, c]];
                    acc += d * d;
                }
                v[[i, j]] = acc;
            }
        }
        self.push(v, Op::PairwiseSqDist(a, b))
    }

    /// Backpropagate from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        fn add_to(grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
            match &mut grads[v.0] {
                Some(acc) => *acc += &delta,
                slot => *slot = Some(delta),
            }
        }
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let da = g.dot(&self.nodes[b.0].value.t());
                let db = self.nodes[a.0].value.t().dot(g);
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, -g.clone());
            }
            Op::Mul(a, b) => {
                add_to(grads, *a, g * &self.nodes[b.0].value);
                add_to(grads, *b, g * &self.nodes[a.0].value);
            }
            Op::AddRow(a, b) => {
                add_to(grads, *a, g.clone());
                let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                add_to(grads, *b, db);
            }
            Op::MulRow(a, b) => {
                let brow = self.nodes[b.0].value.row(0).to_owned();
                add_to(grads, *a, g * &brow);
                let db = (g * &self.nodes[a.0].value)
                    .sum_axis(Axis(0))
                    .insert_axis(Axis(0));
                add_to(grads, *b, db);
            }
            Op::Scale(a, k) => add_to(grads, *a, g * *k),
            Op::AddConst(a) => add_to(grads, *a, g.clone()),
            Op::MulScalar(a, sv) => {
                let k = self.nodes[sv.0].value[[0, 0]];
                add_to(grads, *a, g * k);
                let ds = (g * &self.nodes[a.0].value).sum();
                add_to(grads, *sv, Array2::from_elem((1, 1), ds));
            }
            Op::Transpose(a) => add_to(grads, *a, g.t().to_owned()),
            Op::ConcatRows(parts) => {
                let mut at = 0;
                for p in parts {
                    let r = self.shape(*p).0;
                    add_to(grads, *p, g.slice(s![at..at + r, ..]).to_owned());
                    at += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let c = self.shape(*p).1;
                    add_to(grads, *p, g.slice(s![.., at..at + c]).to_owned());
                    at += c;
                }
            }
            Op::SliceRows(a, start, end) => {
                let mut da = Array2::zeros(self.nodes[a.0].value.raw_dim());
                da.slice_mut(s![*start..*end, ..]).assign(g);
                add_to(grads, *a, da);
            }
            Op::SliceCols(a, start, end) => {
                let mut da = Array2::zeros(self.nodes[a.0].value.raw_dim());
                da.slice_mut(s![.., *start..*end]).assign(g);
                add_to(grads, *a, da);
            }
            Op::GatherRows(a, idx) => {
                let mut da = Array2::zeros(self.nodes[a.0].value.raw_dim());
                for (i, &j) in idx.iter().enumerate() {
                    let mut row = da.row_mut(j);
                    row += &g.row(i);
                }
                add_to(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let sv = &self.nodes[i].value;
                add_to(grads, *a, g * sv * &sv.mapv(|x| 1.0 - x));
            }
            Op::Gelu(a) => {
                let dx = self.nodes[a.0].value.mapv(gelu_grad);
                add_to(grads, *a, g * &dx);
            }
            Op::Exp(a) => add_to(grads, *a, g * &self.nodes[i].value),
            Op::Ln(a) => add_to(grads, *a, g / &self.nodes[a.0].value),
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[a.0].value;
                let mut da = g.clone();
                da.zip_mut_with(x, |gv, &xv| {
                    if xv <= *lo || xv >= *hi {
                        *gv = 0.0;
                    }
                });
                add_to(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                // p is zero at masked entries, so the standard Jacobian
                // applied to p alone keeps masked gradients at zero.
                let p = &self.nodes[i].value;
                let mut da = Array2::zeros(p.raw_dim());
                for r in 0..p.nrows() {
                    let dot: f64 = (0..p.ncols()).map(|c| g[[r, c]] * p[[r, c]]).sum();
                    for c in 0..p.ncols() {
                        da[[r, c]] = p[[r, c]] * (g[[r, c]] - dot);
                    }
                }
                add_to(grads, *a, da);
            }
            Op::LayerNormRows(a, eps) => {
                let x = &self.nodes[a.0].value;
                let y = &self.nodes[i].value;
                let n = x.ncols() as f64;
                let mut da = Array2::zeros(x.raw_dim());
                for r in 0..x.nrows() {
                    let mean = x.row(r).sum() / n;
                    let var =
                        x.row(r).iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let g_mean: f64 = g.row(r).sum() / n;
                    let gy_mean: f64 =
                        (0..x.ncols()).map(|c| g[[r, c]] * y[[r, c]]).sum::<f64>() / n;
                    for c in 0..x.ncols() {
                        da[[r, c]] = inv * (g[[r, c]] - g_mean - y[[r, c]] * gy_mean);
                    }
                }
                add_to(grads, *a, da);
            }
            Op::NormalizeRows(a, eps) => {
                let x = &self.nodes[a.0].value;
                let mut da = Array2::zeros(x.raw_dim());
                for r in 0..x.nrows() {
                    let norm_sq: f64 = x.row(r).iter().map(|&v| v * v).sum();
                    let d = (norm_sq + eps * eps).sqrt();
                    let xg: f64 = (0..x.ncols()).map(|c| x[[r, c]] * g[[r, c]]).sum();
                    for c in 0..x.ncols() {
                        da[[r, c]] = g[[r, c]] / d - x[[r, c]] * xg / (d * d * d);
                    }
                }
                add_to(grads, *a, da);
            }
            Op::RowMin(a) => {
                let x = &self.nodes[a.0].value;
                let mut da = Array2::zeros(x.raw_dim());
                for (r, row) in x.outer_iter().enumerate() {
                    let mut best = 0;
                    for (c, &v) in row.iter().enumerate() {
                        if v < row[best] {
                            best = c;
                        }
                    }
                    da[[r, best]] = g[[r, 0]];
                }
                add_to(grads, *a, da);
            }
            Op::MaxAll(a) => {
                let x = &self.nodes[a.0].value;
                let mut da = Array2::zeros(x.raw_dim());
                let mut best = (0, 0);
                for r in 0..x.nrows() {
                    for c in 0..x.ncols() {
                        if x[[r, c]] > x[[best.0, best.1]] {
                            best = (r, c);
                        }
                    }
                }
                da[[best.0, best.1]] = g[[0, 0]];
                add_to(grads, *a, da);
            }
            Op::SumAll(a) => {
                let da = Array2::from_elem(self.nodes[a.0].value.raw_dim(), g[[0, 0]]);
                add_to(grads, *a, da);
            }
            Op::NllRows(a, targets, weights) => {
                let p = row_softmax(&self.nodes[a.0].value);
                let mut da = Array2::zeros(p.raw_dim());
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    for c in 0..p.ncols() {
                        let indicator = if c == t { 1.0 } else { 0.0 };
                        da[[r, c]] = g[[0, 0]] * w * (p[[r, c]] - indicator);
                    }
                }
                add_to(grads, *a, da);
            }
            Op::KlRows(a, target_probs) => {
                let p = row_softmax(&self.nodes[a.0].value);
                let mut da = Array2::zeros(p.raw_dim());
                for r in 0..p.nrows() {
                    let rsum: f64 = target_probs.row(r).sum();
                    for c in 0..p.ncols() {
                        da[[r, c]] = g[[0, 0]] * (p[[r, c]] * rsum - target_probs[[r, c]]);
                    }
                }
                add_to(grads, *a, da);
            }
            Op::PairwiseSqDist(a, b) => {
                let xa = &self.nodes[a.0].value;
                let xb = &self.nodes[b.0].value;
                let mut da = Array2::zeros(xa.raw_dim());
                let mut db = Array2::zeros(xb.raw_dim());
                for i in 0..xa.nrows() {
                    for j in 0..xb.nrows() {
                        let gij = 2.0 * g[[i, j]];
                        for c in 0..xa.ncols() {
                            let d = xa[[i, c]] - xb[[j, c]];
                            da[[i, c]] += gij * d;
                            db[[j, c]] -= gij * d;
                        }
                    }
                }
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcheck::{finite_diff, max_grad_mismatch};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Build the expression once for analytic gradients, then rebuild it
    /// repeatedly inside central finite differences.
    fn check_op<F>(build: F, inputs: Vec<Array2<f64>>)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root);

        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or_else(|| Array2::zeros(x.raw_dim()));
            let mut probe = inputs.clone();
            let numeric = finite_diff(
                &mut |xs: &[Array2<f64>]| {
                    let mut t = Tape::new();
                    let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
                    let r = build(&mut t, &vs);
                    t.scalar(r)
                },
                &mut probe,
                k,
                1e-6,
            );
            let err = max_grad_mismatch(&analytic, &numeric);
            assert!(
                err < 1e-6,
                "gradient mismatch {} for input {} (analytic vs FD)",
                err,
                k
            );
        }
    }

    #[test]
    fn matmul_add_chain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 4, 2);
        let c = randn(&mut rng, 3, 2);
        check_op(
            |t, v| {
                let m = t.matmul(v[0], v[1]);
                let s = t.add(m, v[2]);
                let sq = t.mul(s, s);
                t.sum_all(sq)
            },
            vec![a, b, c],
        );
    }

    #[test]
    fn broadcast_and_activation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = randn(&mut rng, 3, 5);
        let b = randn(&mut rng, 1, 5);
        check_op(
            |t, v| {
                let x = t.add_row(v[0], v[1]);
                let x = t.gelu(x);
                let x = t.sigmoid(x);
                let y = t.mul_row(x, v[1]);
                t.sum_all(y)
            },
            vec![a, b],
        );
    }

    #[test]
    fn softmax_masked_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut rng, 3, 4);
        let mask = array![
            [1.0, 1.0, 0.0, 1.0],
            [1.0, 1.0, 1.0, 1.0],
            [0.0, 1.0, 1.0, 0.0]
        ];
        let w = randn(&mut rng, 3, 4);
        check_op(
            move |t, v| {
                let p = t.softmax_rows(v[0], mask.clone());
                let y = t.mul(p, v[1]);
                t.sum_all(y)
            },
            vec![a, w],
        );
    }

    #[test]
    fn softmax_masked_zeroes_invalid_entries() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[5.0, 1.0, 3.0]]);
        let p = tape.softmax_rows(x, array![[1.0, 0.0, 1.0]]);
        let v = tape.value(p);
        assert_eq!(v[[0, 1]], 0.0);
        let total: f64 = v.sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_and_normalize_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn(&mut rng, 3, 6);
        let g = randn(&mut rng, 1, 6);
        check_op(
            |t, v| {
                let ln = t.layer_norm_rows(v[0], 1e-5);
                let ln = t.mul_row(ln, v[1]);
                let nz = t.normalize_rows(ln, 1e-12);
                let sq = t.mul(nz, nz);
                t.sum_all(sq)
            },
            vec![a, g],
        );
    }

    #[test]
    fn slicing_concat_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = randn(&mut rng, 4, 6);
        let b = randn(&mut rng, 2, 3);
        check_op(
            |t, v| {
                let left = t.slice_cols(v[0], 0, 3);
                let rows = t.gather_rows(left, &[0, 2, 2, 3]);
                let top = t.slice_rows(rows, 0, 2);
                let cat = t.concat_cols(&[top, v[1]]);
                let catr = t.concat_rows(&[cat, cat]);
                let sq = t.mul(catr, catr);
                t.sum_all(sq)
            },
            vec![a, b],
        );
    }

    #[test]
    fn minmax_routing_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = randn(&mut rng, 4, 5);
        check_op(
            |t, v| {
                let m = t.row_min(v[0]);
                let sq = t.mul(m, m);
                let mt = t.max_all(sq);
                t.sum_all(mt)
            },
            vec![a],
        );
    }

    #[test]
    fn nll_and_kl_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = randn(&mut rng, 3, 5);
        let kl_logits = randn(&mut rng, 2, 4);
        let targets = array![[0.2, 0.3, 0.5, 0.0], [0.25, 0.25, 0.25, 0.25]];
        check_op(
            move |t, v| {
                let nll = t.nll_rows(v[0], &[1, 0, 4], &[1.0, 0.5, 1.0]);
                let kl = t.kl_rows(v[1], targets.clone());
                t.add(nll, kl)
            },
            vec![logits, kl_logits],
        );
    }

    #[test]
    fn scalar_and_misc_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = randn(&mut rng, 3, 3);
        let s = randn(&mut rng, 1, 1);
        check_op(
            |t, v| {
                let e = t.exp(v[1]);
                let x = t.mul_scalar(v[0], e);
                let x = t.scale(x, 0.7);
                let x = t.add_const(x, 4.0);
                let x = t.ln(x); // argument stays well above zero
                let tr = t.transpose(x);
                let cl = t.clamp(tr, 0.2, 1.9);
                let sq = t.mul(cl, cl);
                t.sum_all(sq)
            },
            vec![a, s],
        );
    }

    #[test]
    fn pairwise_sq_dist_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 2, 4);
        check_op(
            |t, v| {
                let d = t.pairwise_sq_dist(v[0], v[1]);
                let m = t.row_min(d);
                t.max_all(m)
            },
            vec![a, b],
        );
    }

    #[test]
    fn gradient_accumulates_over_shared_subexpression() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[3.0]]);
        let y = tape.mul(x, x); // x^2
        let z = tape.add(y, x); // x^2 + x
        let grads = tape.backward(z);
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 7.0); // 2x + 1
    }
}
