//! Reverse-mode differentiation over a small fixed set of matrix primitives.
//!
//! Every primitive appends a node holding its forward value; node indices are
//! therefore already in topological order and [`Tape::backward`] is a single
//! reverse sweep. A tape is meant to live for one training step on one thread.

use crate::error::{Error, Result};
use crate::math::tensor::Tensor2;
use crate::math::LOG_FLOOR;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// a (n×k) · b (m×k)ᵀ
    MatMulNt(Var, Var),
    /// a (n×m) + broadcast row b (1×m)
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleRows(Var, Vec<f64>),
    Relu(Var),
    SoftmaxRows(Var),
    PairSoftmax(Var),
    Ln(Var),
    Gather(Var, Vec<Vec<usize>>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SumRows(Var),
    SumAll(Var),
    L2NormalizeRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor2,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    /// Gradient for `v`. Parameters that did not influence the root get zeros.
    ///
    /// Panics if `v` is a constant (constants carry no gradient slot).
    pub fn get(&self, v: Var) -> &Tensor2 {
        self.grads[v.0]
            .as_ref()
            .expect("gradient requested for a node without a gradient slot")
    }

    pub fn try_get(&self, v: Var) -> Option<&Tensor2> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{op}: {a:?} vs {b:?}"))
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

    fn push(&mut self, value: Tensor2, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf; it always receives a gradient slot.
    pub fn param(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor2) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A constant copy of `v`; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.shape(), (1, 1));
        t.data()[0]
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulNt(a, b), ng))
    }

    /// `x · wᵀ + b` for a weight of shape (out × in) and a bias of shape (1 × out).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul_nt(x, w)?;
        self.add_row(h, b)
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(shape_err("add_row", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::AddRow(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.needs(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Multiplies row `i` by `coeffs[i]`.
    pub fn scale_rows(&mut self, a: Var, coeffs: Vec<f64>) -> Result<Var> {
        let av = self.value(a);
        if coeffs.len() != av.rows() {
            return Err(shape_err("scale_rows", av.shape(), (coeffs.len(), 1)));
        }
        let mut out = av.clone();
        for (r, c) in coeffs.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|x| *x *= c);
        }
        let ng = self.needs(a);
        Ok(self.push(out, Op::ScaleRows(a, coeffs), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = Tensor2::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let p = super::softmax(av.row(r))?;
            out.row_mut(r).copy_from_slice(&p);
        }
        let ng = self.needs(a);
        Ok(self.push(out, Op::SoftmaxRows(a), ng))
    }

    /// Two-logit softmax per head: input columns `(2k, 2k+1)` hold the
    /// (out-lier, in-lier) logits of head `k`; output column `k` is the
    /// in-lier probability.
    pub fn pair_softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if !av.cols().is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "pair_softmax needs an even column count, got {}",
                av.cols()
            )));
        }
        let k = av.cols() / 2;
        let mut out = Tensor2::zeros(av.rows(), k);
        for r in 0..av.rows() {
            let row = av.row(r);
            for h in 0..k {
                out.set(r, h, super::sigmoid(row[2 * h + 1] - row[2 * h]));
            }
        }
        let ng = self.needs(a);
        Ok(self.push(out, Op::PairSoftmax(a), ng))
    }

    /// Natural log with the argument floored at [`LOG_FLOOR`]; the gradient is
    /// zero where the floor is active.
    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(LOG_FLOOR).ln());
        let ng = self.needs(a);
        self.push(out, Op::Ln(a), ng)
    }

    /// Picks `idx[r]` columns from row `r`; every row must pick the same count.
    pub fn gather(&mut self, a: Var, idx: Vec<Vec<usize>>) -> Result<Var> {
        let av = self.value(a);
        if idx.len() != av.rows() {
            return Err(shape_err("gather", av.shape(), (idx.len(), 0)));
        }
        let width = idx.first().map_or(0, Vec::len);
        let mut out = Tensor2::zeros(av.rows(), width);
        for (r, cols) in idx.iter().enumerate() {
            if cols.len() != width {
                return Err(Error::Shape(format!(
                    "gather: row {r} selects {} columns, expected {width}",
                    cols.len()
                )));
            }
            for (o, &c) in cols.iter().enumerate() {
                if c >= av.cols() {
                    return Err(Error::Shape(format!(
                        "gather: column {c} out of range for {:?}",
                        av.shape()
                    )));
                }
                out.set(r, o, av.get(r, c));
            }
        }
        let ng = self.needs(a);
        Ok(self.push(out, Op::Gather(a, idx), ng))
    }

    /// One column per row; result is n × 1.
    pub fn gather_one(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        self.gather(a, idx.iter().map(|&c| vec![c]).collect())
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.rows()) {
            return Err(Error::Shape(format!(
                "gather_rows: row {bad} out of range for {:?}",
                av.shape()
            )));
        }
        let out = av.select_rows(&idx);
        let ng = self.needs(a);
        Ok(self.push(out, Op::GatherRows(a, idx), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor2> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor2::vstack(&values)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows());
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", (rows, cols), v.shape()));
            }
            cols += v.cols();
        }
        let mut out = Tensor2::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// n × m → n × 1.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let sums: Vec<f64> = av.iter_rows().map(|r| r.iter().sum()).collect();
        let out = Tensor2::raw(av.rows(), 1, sums);
        let ng = self.needs(a);
        self.push(out, Op::SumRows(a), ng)
    }

    /// Sum of every entry, as a 1 × 1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor2::scalar(self.value(a).sum());
        let ng = self.needs(a);
        self.push(out, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let mut out = av.clone();
        for r in 0..out.rows() {
            let unit = super::l2_normalize(av.row(r))?;
            out.row_mut(r).copy_from_slice(&unit);
        }
        let ng = self.needs(a);
        Ok(self.push(out, Op::L2NormalizeRows(a), ng))
    }

    /// Reverse sweep from a 1 × 1 root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward root must be 1x1, got {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor2>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor2::scalar(1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.needs_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor2::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor2>], v: Var, delta: Tensor2) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.axpy(1.0, &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor2, grads: &mut [Option<Tensor2>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMulNt(a, b) => {
                if self.needs(*a) {
                    let ga = g.matmul(self.value(*b)).expect("shape checked at forward");
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = g
                        .matmul_tn(self.value(*a))
                        .expect("shape checked at forward");
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    let mut gb = Tensor2::zeros(1, g.cols());
                    for row in g.iter_rows() {
                        for (o, x) in gb.data_mut().iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y).unwrap();
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb = g.zip_map(self.value(*a), |x, y| x * y).unwrap();
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| c * x)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::ScaleRows(a, coeffs) => {
                let mut ga = g.clone();
                for (r, c) in coeffs.iter().enumerate() {
                    ga.row_mut(r).iter_mut().for_each(|x| *x *= c);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = g
                    .zip_map(self.value(*a), |x, v| if v > 0.0 { x } else { 0.0 })
                    .unwrap();
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor2::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, p), q) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - inner);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::PairSoftmax(a) => {
                let mut ga = Tensor2::zeros(y.rows(), 2 * y.cols());
                for r in 0..y.rows() {
                    for h in 0..y.cols() {
                        let p = y.get(r, h);
                        let d = g.get(r, h) * p * (1.0 - p);
                        ga.set(r, 2 * h, -d);
                        ga.set(r, 2 * h + 1, d);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Ln(a) => {
                let ga = g
                    .zip_map(
                        self.value(*a),
                        |x, v| if v > LOG_FLOOR { x / v } else { 0.0 },
                    )
                    .unwrap();
                self.accumulate(grads, *a, ga);
            }
            Op::Gather(a, idx) => {
                let av = self.value(*a);
                let mut ga = Tensor2::zeros(av.rows(), av.cols());
                for (r, cols) in idx.iter().enumerate() {
                    for (o, &c) in cols.iter().enumerate() {
                        let cur = ga.get(r, c);
                        ga.set(r, c, cur + g.get(r, o));
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let mut ga = Tensor2::zeros(av.rows(), av.cols());
                for (o, &r) in idx.iter().enumerate() {
                    for (dst, src) in ga.row_mut(r).iter_mut().zip(g.row(o)) {
                        *dst += src;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    let idx: Vec<usize> = (offset..offset + rows).collect();
                    if self.needs(p) {
                        self.accumulate(grads, p, g.select_rows(&idx));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    if self.needs(p) {
                        let mut gp = Tensor2::zeros(pv.rows(), pv.cols());
                        for r in 0..pv.rows() {
                            gp.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + pv.cols()]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += pv.cols();
                }
            }
            Op::SumRows(a) => {
                let av = self.value(*a);
                let mut ga = Tensor2::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let gr = g.get(r, 0);
                    ga.row_mut(r).iter_mut().for_each(|x| *x = gr);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                let ga = Tensor2::filled(av.rows(), av.cols(), g.data()[0]);
                self.accumulate(grads, *a, ga);
            }
            Op::L2NormalizeRows(a) => {
                let av = self.value(*a);
                let mut ga = Tensor2::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let norm = av.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let (yr, gr) = (y.row(r), g.row(r));
                    let proj: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, p), q) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (q - p * proj) / norm;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
        }
    }
}
