//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and the indices of its inputs. [`Graph::backward`] walks the tape in
//! reverse, and parameter leaves add their gradient into the owning
//! [`ParamStore`]. Values are computed in `f64` even though parameters are
//! stored as `f32`; this keeps central differences meaningful at the
//! tolerances the gradient checker uses.
//!
//! Operations are deliberately coarse (a whole layer norm, a whole masked
//! multi-head attention) so that a transformer step records a few dozen
//! nodes instead of millions of scalars.

use crate::error::{Error, Result};
use crate::numeric::functions::{sigmoid, softplus_scalar};
use crate::numeric::linalg::{dot, matmul, matmul_acc, matmul_at_acc, matmul_bt, matmul_bt_acc};
use crate::numeric::param::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Layout of a batch of padded sequences for [`Graph::causal_attention`].
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    /// Real (unpadded) length of each sequence; padding sits at the end.
    pub lengths: Vec<usize>,
}

#[derive(Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    ScaleByCol(Var, Var, usize),
    GatherRows(Var, Vec<Option<usize>>),
    GatherCols(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    L2NormalizeRows(Var, Vec<f64>),
    RowDot(Var, Var),
    LogSumExpRows(Var),
    Sum(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Const | Op::Param(_) => vec![],
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::SubRow(a, b)
            | Op::Mul(a, b)
            | Op::ScaleByCol(a, b, _)
            | Op::RowDot(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::Relu(a)
            | Op::Softplus(a)
            | Op::SoftmaxRows(a)
            | Op::GatherRows(a, _)
            | Op::GatherCols(a, _)
            | Op::L2NormalizeRows(a, _)
            | Op::LogSumExpRows(a)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::SubRow(..) => "sub_row",
            Op::Scale(..) => "scale",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::ScaleByCol(..) => "scale_by_col",
            Op::GatherRows(..) => "gather_rows",
            Op::GatherCols(..) => "gather_cols",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "causal_attention",
            Op::L2NormalizeRows(..) => "l2_normalize_rows",
            Op::RowDot(..) => "row_dot",
            Op::LogSumExpRows(..) => "log_sum_exp_rows",
            Op::Sum(..) => "sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const NORM_FLOOR: f64 = 1e-12;

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

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { op, rows, cols, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        assert_eq!((n.rows, n.cols), (1, 1), "scalar() on a non-scalar node");
        n.value[0]
    }

    pub fn node_name(&self, v: Var) -> String {
        format!("{}#{}", self.nodes[v.0].op.kind(), v.0)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(
            value.len(),
            rows * cols,
            "constant: {rows}×{cols} with {} values",
            value.len()
        );
        self.push(Op::Const, rows, cols, value)
    }

    pub fn constant_f32(&mut self, rows: usize, cols: usize, value: &[f32]) -> Var {
        self.constant(rows, cols, value.iter().map(|&x| f64::from(x)).collect())
    }

    /// Trainable leaf; its gradient lands in `store` on backward.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let (r, c) = t.matrix_shape();
        let value = t.values.iter().map(|&x| f64::from(x)).collect();
        self.push(Op::Param(id), r, c, value)
    }

    /// Frozen leaf: same value as [`Graph::param`], no gradient.
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let (r, c) = t.matrix_shape();
        self.constant_f32(r, c, &t.values)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul: {m}×{k} · {k2}×{n}");
        let value = matmul(self.value(a), self.value(b), m, k, n);
        self.push(Op::MatMul(a, b), m, n, value)
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_bt: {m}×{k} · ({n}×{k2})ᵀ");
        let value = matmul_bt(self.value(a), self.value(b), m, k, n);
        self.push(Op::MatMulBt(a, b), m, n, value)
    }

    fn zip_same(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let sa = self.shape(a);
        assert_eq!(sa, self.shape(b), "{}: shape mismatch", op.kind());
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(op, sa.0, sa.1, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_same(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(&mut self, a: Var, row: Var, sign: f64, op: Op) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(row), (1, n), "{}: row must be 1×{n}", op.kind());
        let r = self.value(row);
        let value = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(move |(&x, &b)| x + sign * b))
            .collect();
        self.push(op, m, n, value)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, 1.0, Op::AddRow(a, row))
    }

    /// Subtracts a `1×n` row from every row of `a`.
    pub fn sub_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, -1.0, Op::SubRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let (m, n) = self.shape(a);
        let value = self.value(a).iter().map(|&x| x * c).collect();
        self.push(Op::Scale(a, c), m, n, value)
    }

    /// Elementwise product with a constant mask (dropout, sampled noise).
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(c.len(), m * n, "mul_const: length mismatch");
        let value = self.value(a).iter().zip(&c).map(|(&x, &y)| x * y).collect();
        self.push(Op::MulConst(a, c), m, n, value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let value = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.push(Op::Relu(a), m, n, value)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let value = self.value(a).iter().map(|&x| softplus_scalar(x)).collect();
        self.push(Op::Softplus(a), m, n, value)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut value = self.value(a).to_vec();
        for row in value.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        self.push(Op::SoftmaxRows(a), m, n, value)
    }

    /// Row `i` of `a` multiplied by `weights[i, col]`.
    pub fn scale_by_col(&mut self, a: Var, weights: Var, col: usize) -> Var {
        let (m, n) = self.shape(a);
        let (wm, wn) = self.shape(weights);
        assert!(
            wm == m && col < wn,
            "scale_by_col: {m}×{n} by column {col} of {wm}×{wn}"
        );
        let w = self.value(weights);
        let value = self
            .value(a)
            .chunks(n)
            .enumerate()
            .flat_map(|(i, row)| {
                let s = w[i * wn + col];
                row.iter().map(move |&x| x * s)
            })
            .collect();
        self.push(Op::ScaleByCol(a, weights, col), m, n, value)
    }

    /// Selects rows of `a`; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, index: Vec<Option<usize>>) -> Var {
        let (m, n) = self.shape(a);
        let src = self.value(a);
        let mut value = vec![0.0; index.len() * n];
        for (r, idx) in index.iter().enumerate() {
            if let Some(i) = *idx {
                assert!(i < m, "gather_rows: row {i} of {m}");
                value[r * n..(r + 1) * n].copy_from_slice(&src[i * n..(i + 1) * n]);
            }
        }
        let rows = index.len();
        self.push(Op::GatherRows(a, index), rows, n, value)
    }

    /// For each row `b` of `a`, picks columns `index[b*k..(b+1)*k]`.
    pub fn gather_cols(&mut self, a: Var, index: Vec<usize>, per_row: usize) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(index.len(), m * per_row, "gather_cols: index length");
        let src = self.value(a);
        let value = index
            .iter()
            .enumerate()
            .map(|(pos, &c)| {
                assert!(c < n, "gather_cols: column {c} of {n}");
                src[(pos / per_row) * n + c]
            })
            .collect();
        self.push(Op::GatherCols(a, index), m, per_row, value)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1×n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, n));
        assert_eq!(self.shape(beta), (1, n));
        let xs = self.value(x);
        let gs = self.value(gamma);
        let bs = self.value(beta);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[i * n + j] = h;
                value[i * n + j] = h * gs[j] + bs[j];
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            m,
            n,
            value,
        )
    }

    /// Multi-head scaled dot-product attention with a causal mask over
    /// padded sequences. Inputs are `(batch·seq_len)×d`; query `i` of
    /// sequence `b` attends to keys `j ≤ i` with `j < lengths[b]`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Var {
        let (rows, d) = self.shape(q);
        assert_eq!(self.shape(k), (rows, d));
        assert_eq!(self.shape(v), (rows, d));
        let AttentionLayout {
            batch,
            seq_len: n,
            heads,
            ref lengths,
        } = layout;
        assert_eq!(rows, batch * n, "attention: rows != batch·seq_len");
        assert_eq!(d % heads, 0, "attention: width not divisible by heads");
        assert_eq!(lengths.len(), batch);
        assert!(lengths.iter().all(|&l| l >= 1 && l <= n), "attention: bad lengths");
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * n * n];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; n];
        for b in 0..batch {
            let len = lengths[b];
            for h in 0..heads {
                let off = h * dk;
                for i in 0..n {
                    let last = i.min(len - 1);
                    let qi = &qs[(b * n + i) * d + off..(b * n + i) * d + off + dk];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=last {
                        let kj = &ks[(b * n + j) * d + off..(b * n + j) * d + off + dk];
                        scores[j] = dot(qi, kj) * scale;
                        max = max.max(scores[j]);
                    }
                    let mut z = 0.0;
                    for s in scores[..=last].iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let p_row = &mut probs[((b * heads + h) * n + i) * n..((b * heads + h) * n + i + 1) * n];
                    let o = &mut out[(b * n + i) * d + off..(b * n + i) * d + off + dk];
                    for j in 0..=last {
                        let p = scores[j] / z;
                        p_row[j] = p;
                        let vj = &vs[(b * n + j) * d + off..(b * n + j) * d + off + dk];
                        for (ov, &vv) in o.iter_mut().zip(vj) {
                            *ov += p * vv;
                        }
                    }
                }
            }
        }
        self.push(Op::Attention { q, k, v, layout, probs }, rows, d, out)
    }

    /// Divides each row by its Euclidean norm (floored at 1e-12).
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let mut value = self.value(a).to_vec();
        let mut norms = vec![0.0; m];
        for (i, row) in value.chunks_mut(n).enumerate() {
            let norm = dot(row, row).sqrt().max(NORM_FLOOR);
            norms[i] = norm;
            row.iter_mut().for_each(|x| *x /= norm);
        }
        self.push(Op::L2NormalizeRows(a, norms), m, n, value)
    }

    /// Row-wise inner products, `m×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(b), (m, n), "row_dot: shape mismatch");
        let (av, bv) = (self.value(a), self.value(b));
        let value = (0..m)
            .map(|i| dot(&av[i * n..(i + 1) * n], &bv[i * n..(i + 1) * n]))
            .collect();
        self.push(Op::RowDot(a, b), m, 1, value)
    }

    /// Row-wise `log Σ exp`, `m×1`.
    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.shape(a);
        let value = self
            .value(a)
            .chunks(n)
            .map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
            })
            .collect();
        self.push(Op::LogSumExpRows(a), m, 1, value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().sum();
        self.push(Op::Sum(a), 1, 1, vec![total])
    }

    /// Propagates d(loss)/d(node) back through the tape and adds the
    /// parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be a scalar");
        // A node needs a gradient only if some parameter feeds into it.
        let mut needs = vec![false; loss.0 + 1];
        for idx in 0..=loss.0 {
            let op = &self.nodes[idx].op;
            needs[idx] = matches!(op, Op::Param(_)) || op.inputs().iter().any(|i| needs[i.0]);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !needs[idx] {
                continue;
            }
            let node = &self.nodes[idx];
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericFailure {
                    node: self.node_name(Var(idx)),
                });
            }
            self.backprop_node(node, &g, &mut grads, &needs, store);
            // Name the node whose local derivative introduced the non-finite value.
            let produced_bad = node.op.inputs().into_iter().any(|input| {
                grads[input.0]
                    .as_ref()
                    .is_some_and(|gi| gi.iter().any(|x| !x.is_finite()))
            });
            if produced_bad {
                return Err(Error::NumericFailure {
                    node: self.node_name(Var(idx)),
                });
            }
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        needs: &[bool],
        store: &mut ParamStore,
    ) {
        let (m, n) = (node.rows, node.cols);
        match &node.op {
            Op::Const => {}
            Op::Param(id) => {
                let t = store.get_mut(*id);
                for (acc, &d) in t.grad.iter_mut().zip(g) {
                    *acc += d as f32;
                }
            }
            Op::MatMul(a, b) => {
                let k = self.shape(*a).1;
                if needs[a.0] {
                    let ga = slot(grads, *a, m * k);
                    matmul_bt_acc(g, self.value(*b), ga, m, n, k);
                }
                if needs[b.0] {
                    let gb = slot(grads, *b, k * n);
                    matmul_at_acc(self.value(*a), g, gb, m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let k = self.shape(*a).1;
                if needs[a.0] {
                    let ga = slot(grads, *a, m * k);
                    matmul_acc(g, self.value(*b), ga, m, n, k);
                }
                if needs[b.0] {
                    let gb = slot(grads, *b, n * k);
                    matmul_at_acc(g, self.value(*a), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                axpy(slot(grads, *a, m * n), g, 1.0);
                axpy(slot(grads, *b, m * n), g, 1.0);
            }
            Op::Sub(a, b) => {
                axpy(slot(grads, *a, m * n), g, 1.0);
                axpy(slot(grads, *b, m * n), g, -1.0);
            }
            Op::AddRow(a, row) | Op::SubRow(a, row) => {
                let sign = if matches!(node.op, Op::AddRow(..)) { 1.0 } else { -1.0 };
                axpy(slot(grads, *a, m * n), g, 1.0);
                let gr = slot(grads, *row, n);
                for chunk in g.chunks(n) {
                    axpy(gr, chunk, sign);
                }
            }
            Op::Scale(a, c) => axpy(slot(grads, *a, m * n), g, *c),
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = slot(grads, *a, m * n);
                for i in 0..m * n {
                    ga[i] += g[i] * bv[i];
                }
                let gb = slot(grads, *b, m * n);
                for i in 0..m * n {
                    gb[i] += g[i] * av[i];
                }
            }
            Op::MulConst(a, c) => {
                let ga = slot(grads, *a, m * n);
                for i in 0..m * n {
                    ga[i] += g[i] * c[i];
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let ga = slot(grads, *a, m * n);
                for i in 0..m * n {
                    if av[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Softplus(a) => {
                let av = self.value(*a);
                let ga = slot(grads, *a, m * n);
                for i in 0..m * n {
                    ga[i] += g[i] * sigmoid(av[i]);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let ga = slot(grads, *a, m * n);
                for i in 0..m {
                    let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                    let s = dot(yr, gr);
                    for j in 0..n {
                        ga[i * n + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::ScaleByCol(a, w, col) => {
                let (av, wv) = (self.value(*a), self.value(*w));
                let wn = self.shape(*w).1;
                let ga = slot(grads, *a, m * n);
                for i in 0..m {
                    let s = wv[i * wn + col];
                    for j in 0..n {
                        ga[i * n + j] += g[i * n + j] * s;
                    }
                }
                let gw = slot(grads, *w, m * wn);
                for i in 0..m {
                    gw[i * wn + col] += dot(&g[i * n..(i + 1) * n], &av[i * n..(i + 1) * n]);
                }
            }
            Op::GatherRows(a, index) => {
                let src_rows = self.shape(*a).0;
                let ga = slot(grads, *a, src_rows * n);
                for (r, idx) in index.iter().enumerate() {
                    if let Some(i) = *idx {
                        axpy(&mut ga[i * n..(i + 1) * n], &g[r * n..(r + 1) * n], 1.0);
                    }
                }
            }
            Op::GatherCols(a, index) => {
                let src_cols = self.shape(*a).1;
                let ga = slot(grads, *a, m * src_cols);
                for (pos, &c) in index.iter().enumerate() {
                    ga[(pos / n) * src_cols + c] += g[pos];
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gs = self.value(*gamma).to_vec();
                {
                    let gg = slot(grads, *gamma, n);
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                {
                    let gb = slot(grads, *beta, n);
                    for chunk in g.chunks(n) {
                        axpy(gb, chunk, 1.0);
                    }
                }
                let gx = slot(grads, *x, m * n);
                let mut dxhat = vec![0.0; n];
                for i in 0..m {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..n {
                        dxhat[j] = g[i * n + j] * gs[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat[i * n + j];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for j in 0..n {
                        gx[i * n + j] += inv_std[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
                    }
                }
            }
            Op::Attention { q, k, v, layout, probs } => self.backprop_attention(*q, *k, *v, layout, probs, g, grads),
            Op::L2NormalizeRows(a, norms) => {
                let y = &node.value;
                let ga = slot(grads, *a, m * n);
                for i in 0..m {
                    let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                    let s = dot(yr, gr);
                    for j in 0..n {
                        ga[i * n + j] += (gr[j] - yr[j] * s) / norms[i];
                    }
                }
            }
            Op::RowDot(a, b) => {
                let k = self.shape(*a).1;
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = slot(grads, *a, m * k);
                for i in 0..m {
                    axpy(&mut ga[i * k..(i + 1) * k], &bv[i * k..(i + 1) * k], g[i]);
                }
                let gb = slot(grads, *b, m * k);
                for i in 0..m {
                    axpy(&mut gb[i * k..(i + 1) * k], &av[i * k..(i + 1) * k], g[i]);
                }
            }
            Op::LogSumExpRows(a) => {
                let k = self.shape(*a).1;
                let av = self.value(*a);
                let ga = slot(grads, *a, m * k);
                for i in 0..m {
                    let lse = node.value[i];
                    for j in 0..k {
                        ga[i * k + j] += g[i] * (av[i * k + j] - lse).exp();
                    }
                }
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                let ga = slot(grads, *a, len);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (rows, d) = self.shape(q);
        let n = layout.seq_len;
        let heads = layout.heads;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![0.0; rows * d];
        let mut gk = vec![0.0; rows * d];
        let mut gv = vec![0.0; rows * d];
        let mut dp = vec![0.0; n];
        for b in 0..layout.batch {
            let len = layout.lengths[b];
            for h in 0..heads {
                let off = h * dk;
                for i in 0..n {
                    let last = i.min(len - 1);
                    let p_row = &probs[((b * heads + h) * n + i) * n..((b * heads + h) * n + i + 1) * n];
                    let go = &g[(b * n + i) * d + off..(b * n + i) * d + off + dk];
                    let mut weighted = 0.0;
                    for j in 0..=last {
                        let vj = &vs[(b * n + j) * d + off..(b * n + j) * d + off + dk];
                        dp[j] = dot(go, vj);
                        weighted += p_row[j] * dp[j];
                        let gvj = &mut gv[(b * n + j) * d + off..(b * n + j) * d + off + dk];
                        axpy(gvj, go, p_row[j]);
                    }
                    let qi_start = (b * n + i) * d + off;
                    for j in 0..=last {
                        let ds = p_row[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj_start = (b * n + j) * d + off;
                        for t in 0..dk {
                            gq[qi_start + t] += ds * ks[kj_start + t];
                            gk[kj_start + t] += ds * qs[qi_start + t];
                        }
                    }
                }
            }
        }
        axpy(slot(grads, q, rows * d), &gq, 1.0);
        axpy(slot(grads, k, rows * d), &gk, 1.0);
        axpy(slot(grads, v, rows * d), &gv, 1.0);
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
