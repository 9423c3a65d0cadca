//! Tape-based reverse-mode automatic differentiation.
//!
//! Operations append nodes to a [`Tape`]; node indices double as topological
//! order, so the backward sweep is a single reverse pass over the node list.
//! Forward values are retained on the tape (no recomputation — the models
//! here are tiny). Tensors placed on a tape are never mutated in place.

use crate::error::{Result, SsmtError};
use crate::tensor::{sigmoid, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// (n×c) + (1×c), the 1×c row added to every row.
    AddBroadcastRow(usize, usize),
    /// (n×c) ⊙ (1×c)
    MulBroadcastRow(usize, usize),
    /// (n×c) ⊙ (n×1)
    MulBroadcastCol(usize, usize),
    /// (n×c) / (n×1)
    DivBroadcastCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Abs(usize),
    Relu(usize),
    SoftmaxRows(usize),
    SumAll(usize),
    MeanAll(usize),
    SumCols(usize),
    Transpose(usize),
    ConcatCols(usize, usize),
    SliceCol(usize, usize),
    /// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
    Clamp(usize, f64, f64),
    /// x ↦ x^{-1/2} with value 0 when x ≤ guard (zero-degree nodes).
    RsqrtGuard(usize, f64),
    /// (u: n×k, w: n×(k·h)) ↦ n×h with out[n,j] = Σ_k u[n,k]·w[n, k·h+j].
    /// Per-row weight application for node-adaptive parameters.
    RowwiseBilinear(usize, usize, usize),
    /// Select rows of the input by index; backward scatter-adds.
    GatherRows(usize, Vec<usize>),
    /// Forward: indicator(x > 0.5). Backward: straight-through identity.
    HardThreshold(usize),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Records forward primitives and replays adjoints in reverse order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, a: usize) -> bool {
        self.nodes[a].needs_grad
    }

    /// Place a tensor on the tape. `requires_grad` marks it as a parameter
    /// whose gradient is wanted from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Op::MatMul(a.0, b.0), v, ng))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        self.value(a).check_same_shape(self.value(b), op)?;
        let v = self.value(a).zip(self.value(b), f);
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(make(a.0, b.0), v, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    fn broadcast_row_check(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        let _ = ar;
        if br != 1 || bc != ac {
            return Err(SsmtError::ShapeMismatch { op, lhs: (ar, ac), rhs: (br, bc) });
        }
        Ok(())
    }

    /// a (n×c) + b (1×c) broadcast over rows.
    pub fn add_broadcast_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_row_check(a, b, "add_broadcast_row")?;
        let av = self.value(a);
        let bv = self.value(b);
        let (n, c) = av.shape();
        let mut out = av.clone();
        for r in 0..n {
            for j in 0..c {
                let v = out.at(r, j) + bv.at(0, j);
                out.set(r, j, v);
            }
        }
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Op::AddBroadcastRow(a.0, b.0), out, ng))
    }

    pub fn mul_broadcast_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_row_check(a, b, "mul_broadcast_row")?;
        let av = self.value(a);
        let bv = self.value(b);
        let (n, c) = av.shape();
        let mut out = av.clone();
        for r in 0..n {
            for j in 0..c {
                let v = out.at(r, j) * bv.at(0, j);
                out.set(r, j, v);
            }
        }
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Op::MulBroadcastRow(a.0, b.0), out, ng))
    }

    fn broadcast_col_check(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if bc != 1 || br != ar {
            return Err(SsmtError::ShapeMismatch { op, lhs: (ar, ac), rhs: (br, bc) });
        }
        Ok(())
    }

    pub fn mul_broadcast_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_col_check(a, b, "mul_broadcast_col")?;
        let av = self.value(a);
        let bv = self.value(b);
        let (n, c) = av.shape();
        let mut out = av.clone();
        for r in 0..n {
            for j in 0..c {
                let v = out.at(r, j) * bv.at(r, 0);
                out.set(r, j, v);
            }
        }
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Op::MulBroadcastCol(a.0, b.0), out, ng))
    }

    pub fn div_broadcast_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_col_check(a, b, "div_broadcast_col")?;
        let av = self.value(a);
        let bv = self.value(b);
        let (n, c) = av.shape();
        let mut out = av.clone();
        for r in 0..n {
            for j in 0..c {
                let v = out.at(r, j) / bv.at(r, 0);
                out.set(r, j, v);
            }
        }
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Op::DivBroadcastCol(a.0, b.0), out, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let ng = self.needs(a.0);
        self.push(Op::Scale(a.0, c), v, ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let ng = self.needs(a.0);
        self.push(Op::AddScalar(a.0), v, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let ng = self.needs(a.0);
        self.push(Op::Sigmoid(a.0), v, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let ng = self.needs(a.0);
        self.push(Op::Tanh(a.0), v, ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let ng = self.needs(a.0);
        self.push(Op::Exp(a.0), v, ng)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(SsmtError::Domain {
                op: "ln",
                detail: "non-positive input".into(),
            });
        }
        let v = self.value(a).map(f64::ln);
        let ng = self.needs(a.0);
        Ok(self.push(Op::Ln(a.0), v, ng))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(SsmtError::Domain {
                op: "sqrt",
                detail: "negative input".into(),
            });
        }
        let v = self.value(a).map(f64::sqrt);
        let ng = self.needs(a.0);
        Ok(self.push(Op::Sqrt(a.0), v, ng))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let ng = self.needs(a.0);
        self.push(Op::Abs(a.0), v, ng)
    }

    /// Hinge [x]_+ = max(x, 0); subgradient 0 at the kink.
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.needs(a.0);
        self.push(Op::Relu(a.0), v, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).softmax_rows();
        let ng = self.needs(a.0);
        self.push(Op::SoftmaxRows(a.0), v, ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(a.0);
        self.push(Op::SumAll(a.0), v, ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let ng = self.needs(a.0);
        self.push(Op::MeanAll(a.0), v, ng)
    }

    /// Row sums, n×c → n×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_cols();
        let ng = self.needs(a.0);
        self.push(Op::SumCols(a.0), v, ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let ng = self.needs(a.0);
        self.push(Op::Transpose(a.0), v, ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).concat_cols(self.value(b))?;
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Op::ConcatCols(a.0, b.0), v, ng))
    }

    pub fn slice_col(&mut self, a: Var, j: usize) -> Var {
        let v = self.value(a).column(j);
        let ng = self.needs(a.0);
        self.push(Op::SliceCol(a.0, j), v, ng)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.needs(a.0);
        self.push(Op::Clamp(a.0, lo, hi), v, ng)
    }

    /// x ↦ x^{-1/2}, 0 where x ≤ guard.
    pub fn rsqrt_guard(&mut self, a: Var, guard: f64) -> Var {
        let v = self.value(a).map(|x| if x > guard { 1.0 / x.sqrt() } else { 0.0 });
        let ng = self.needs(a.0);
        self.push(Op::RsqrtGuard(a.0, guard), v, ng)
    }

    /// Per-row weight application: u is n×k, w is n×(k·h) holding a k×h
    /// matrix per row; out[r, j] = Σ_p u[r,p]·w[r, p·h + j].
    pub fn rowwise_bilinear(&mut self, u: Var, w: Var, h: usize) -> Result<Var> {
        let (n, k) = self.value(u).shape();
        let (wn, wc) = self.value(w).shape();
        if wn != n || wc != k * h {
            return Err(SsmtError::ShapeMismatch {
                op: "rowwise_bilinear",
                lhs: (n, k),
                rhs: (wn, wc),
            });
        }
        let uv = self.value(u);
        let wv = self.value(w);
        let mut out = Tensor::zeros(n, h);
        for r in 0..n {
            for p in 0..k {
                let x = uv.at(r, p);
                for j in 0..h {
                    let v = out.at(r, j) + x * wv.at(r, p * h + j);
                    out.set(r, j, v);
                }
            }
        }
        let ng = self.needs(u.0) || self.needs(w.0);
        Ok(self.push(Op::RowwiseBilinear(u.0, w.0, h), out, ng))
    }

    /// Row gather; indices need not be distinct.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let c = av.cols();
        let mut out = Tensor::zeros(idx.len(), c);
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..c {
                out.set(r, j, av.at(i, j));
            }
        }
        let ng = self.needs(a.0);
        self.push(Op::GatherRows(a.0, idx.to_vec()), out, ng)
    }

    /// Straight-through binarization at 0.5.
    pub fn hard_threshold(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.5 { 1.0 } else { 0.0 });
        let ng = self.needs(a.0);
        self.push(Op::HardThreshold(a.0), v, ng)
    }

    /// Reverse sweep from a scalar loss. Returns one gradient slot per tape
    /// node; leaves created with `requires_grad` have `Some` gradients (zero
    /// tensors when off the path), everything else is left `None` unless it
    /// was needed to carry adjoints.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(SsmtError::Domain {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(i, &g, &mut grads);
            // Leaf gradients are kept; interior ones can be dropped, but we
            // keep leaves only to bound memory on long tapes.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        // Parameters never touched by the loss get explicit zeros.
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[i].is_none() {
                let (r, c) = node.value.shape();
                grads[i] = Some(Tensor::zeros(r, c));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate_inputs(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let add_to = |grads: &mut [Option<Tensor>], idx: usize, delta: Tensor, tape: &Tape| {
            if !tape.nodes[idx].needs_grad {
                return;
            }
            match &mut grads[idx] {
                Some(acc) => {
                    let sum = acc.zip(&delta, |a, b| a + b);
                    *acc = sum;
                }
                None => grads[idx] = Some(delta),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                if self.nodes[*a].needs_grad {
                    let da = g.matmul(&bv.transpose()).expect("backward matmul");
                    add_to(grads, *a, da, self);
                }
                if self.nodes[*b].needs_grad {
                    let db = av.transpose().matmul(g).expect("backward matmul");
                    add_to(grads, *b, db, self);
                }
            }
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone(), self);
                add_to(grads, *b, g.clone(), self);
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone(), self);
                add_to(grads, *b, g.map(|x| -x), self);
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                add_to(grads, *a, g.zip(bv, |gg, y| gg * y), self);
                add_to(grads, *b, g.zip(av, |gg, x| gg * x), self);
            }
            Op::Div(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                add_to(grads, *a, g.zip(bv, |gg, y| gg / y), self);
                if self.nodes[*b].needs_grad {
                    let mut db = g.clone();
                    for k in 0..db.len() {
                        let x = av.data()[k];
                        let y = bv.data()[k];
                        db.data_mut()[k] = -g.data()[k] * x / (y * y);
                    }
                    add_to(grads, *b, db, self);
                }
            }
            Op::AddBroadcastRow(a, b) => {
                add_to(grads, *a, g.clone(), self);
                if self.nodes[*b].needs_grad {
                    let (n, c) = g.shape();
                    let mut db = Tensor::zeros(1, c);
                    for r in 0..n {
                        for j in 0..c {
                            let v = db.at(0, j) + g.at(r, j);
                            db.set(0, j, v);
                        }
                    }
                    add_to(grads, *b, db, self);
                }
            }
            Op::MulBroadcastRow(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (n, c) = g.shape();
                if self.nodes[*a].needs_grad {
                    let mut da = g.clone();
                    for r in 0..n {
                        for j in 0..c {
                            let v = g.at(r, j) * bv.at(0, j);
                            da.set(r, j, v);
                        }
                    }
                    add_to(grads, *a, da, self);
                }
                if self.nodes[*b].needs_grad {
                    let mut db = Tensor::zeros(1, c);
                    for r in 0..n {
                        for j in 0..c {
                            let v = db.at(0, j) + g.at(r, j) * av.at(r, j);
                            db.set(0, j, v);
                        }
                    }
                    add_to(grads, *b, db, self);
                }
            }
            Op::MulBroadcastCol(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (n, c) = g.shape();
                if self.nodes[*a].needs_grad {
                    let mut da = g.clone();
                    for r in 0..n {
                        for j in 0..c {
                            let v = g.at(r, j) * bv.at(r, 0);
                            da.set(r, j, v);
                        }
                    }
                    add_to(grads, *a, da, self);
                }
                if self.nodes[*b].needs_grad {
                    let mut db = Tensor::zeros(n, 1);
                    for r in 0..n {
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += g.at(r, j) * av.at(r, j);
                        }
                        db.set(r, 0, acc);
                    }
                    add_to(grads, *b, db, self);
                }
            }
            Op::DivBroadcastCol(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (n, c) = g.shape();
                if self.nodes[*a].needs_grad {
                    let mut da = g.clone();
                    for r in 0..n {
                        for j in 0..c {
                            let v = g.at(r, j) / bv.at(r, 0);
                            da.set(r, j, v);
                        }
                    }
                    add_to(grads, *a, da, self);
                }
                if self.nodes[*b].needs_grad {
                    let mut db = Tensor::zeros(n, 1);
                    for r in 0..n {
                        let y = bv.at(r, 0);
                        let mut acc = 0.0;
                        for j in 0..c {
                            acc += -g.at(r, j) * av.at(r, j) / (y * y);
                        }
                        db.set(r, 0, acc);
                    }
                    add_to(grads, *b, db, self);
                }
            }
            Op::Scale(a, c) => add_to(grads, *a, g.map(|x| x * c), self),
            Op::AddScalar(a) => add_to(grads, *a, g.clone(), self),
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                add_to(grads, *a, g.zip(y, |gg, s| gg * s * (1.0 - s)), self);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                add_to(grads, *a, g.zip(y, |gg, t| gg * (1.0 - t * t)), self);
            }
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                add_to(grads, *a, g.zip(y, |gg, e| gg * e), self);
            }
            Op::Ln(a) => {
                let x = &self.nodes[*a].value;
                add_to(grads, *a, g.zip(x, |gg, v| gg / v), self);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                // subgradient 0 at x = 0
                add_to(
                    grads,
                    *a,
                    g.zip(y, |gg, s| if s > 1e-12 { gg * 0.5 / s } else { 0.0 }),
                    self,
                );
            }
            Op::Abs(a) => {
                let x = &self.nodes[*a].value;
                add_to(
                    grads,
                    *a,
                    g.zip(x, |gg, v| {
                        if v > 0.0 {
                            gg
                        } else if v < 0.0 {
                            -gg
                        } else {
                            0.0
                        }
                    }),
                    self,
                );
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                add_to(grads, *a, g.zip(x, |gg, v| if v > 0.0 { gg } else { 0.0 }), self);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let (n, c) = y.shape();
                let mut da = Tensor::zeros(n, c);
                for r in 0..n {
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g.at(r, j) * y.at(r, j);
                    }
                    for j in 0..c {
                        da.set(r, j, y.at(r, j) * (g.at(r, j) - dot));
                    }
                }
                add_to(grads, *a, da, self);
            }
            Op::SumAll(a) => {
                let (n, c) = self.nodes[*a].value.shape();
                add_to(grads, *a, Tensor::full(n, c, g.scalar_value()), self);
            }
            Op::MeanAll(a) => {
                let (n, c) = self.nodes[*a].value.shape();
                let v = g.scalar_value() / (n * c) as f64;
                add_to(grads, *a, Tensor::full(n, c, v), self);
            }
            Op::SumCols(a) => {
                let (n, c) = self.nodes[*a].value.shape();
                let mut da = Tensor::zeros(n, c);
                for r in 0..n {
                    for j in 0..c {
                        da.set(r, j, g.at(r, 0));
                    }
                }
                add_to(grads, *a, da, self);
            }
            Op::Transpose(a) => add_to(grads, *a, g.transpose(), self),
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[*a].value.cols();
                let (n, c) = g.shape();
                if self.nodes[*a].needs_grad {
                    let mut da = Tensor::zeros(n, ca);
                    for r in 0..n {
                        for j in 0..ca {
                            da.set(r, j, g.at(r, j));
                        }
                    }
                    add_to(grads, *a, da, self);
                }
                if self.nodes[*b].needs_grad {
                    let mut db = Tensor::zeros(n, c - ca);
                    for r in 0..n {
                        for j in ca..c {
                            db.set(r, j - ca, g.at(r, j));
                        }
                    }
                    add_to(grads, *b, db, self);
                }
            }
            Op::SliceCol(a, j) => {
                let (n, c) = self.nodes[*a].value.shape();
                let mut da = Tensor::zeros(n, c);
                for r in 0..n {
                    da.set(r, *j, g.at(r, 0));
                }
                add_to(grads, *a, da, self);
            }
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[*a].value;
                add_to(
                    grads,
                    *a,
                    g.zip(x, |gg, v| if v > *lo && v < *hi { gg } else { 0.0 }),
                    self,
                );
            }
            Op::RsqrtGuard(a, guard) => {
                let x = &self.nodes[*a].value;
                add_to(
                    grads,
                    *a,
                    g.zip(x, |gg, v| {
                        if v > *guard {
                            gg * (-0.5) * v.powf(-1.5)
                        } else {
                            0.0
                        }
                    }),
                    self,
                );
            }
            Op::RowwiseBilinear(u, w, h) => {
                let uv = &self.nodes[*u].value;
                let wv = &self.nodes[*w].value;
                let (n, k) = uv.shape();
                if self.nodes[*u].needs_grad {
                    let mut du = Tensor::zeros(n, k);
                    for r in 0..n {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..*h {
                                acc += g.at(r, j) * wv.at(r, p * h + j);
                            }
                            du.set(r, p, acc);
                        }
                    }
                    add_to(grads, *u, du, self);
                }
                if self.nodes[*w].needs_grad {
                    let mut dw = Tensor::zeros(n, k * h);
                    for r in 0..n {
                        for p in 0..k {
                            let x = uv.at(r, p);
                            for j in 0..*h {
                                dw.set(r, p * h + j, x * g.at(r, j));
                            }
                        }
                    }
                    add_to(grads, *w, dw, self);
                }
            }
            Op::GatherRows(a, idx) => {
                let (n, c) = self.nodes[*a].value.shape();
                let mut da = Tensor::zeros(n, c);
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        let v = da.at(src, j) + g.at(r, j);
                        da.set(src, j, v);
                    }
                }
                add_to(grads, *a, da, self);
            }
            Op::HardThreshold(a) => add_to(grads, *a, g.clone(), self),
        }
    }
}

/// Per-node gradient slots returned by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a leaf created with `requires_grad`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
