//! Reverse-mode differentiation over a linear tape.
//!
//! Every forward operation appends a node holding its value and the inputs
//! needed for its pullback. `backward` walks the nodes in exact reverse
//! recording order and deposits parameter gradients into a [`ParamStore`].

use std::collections::HashMap;
use std::ops::Range;

use super::matrix::{gelu, gelu_grad, sigmoid};
use super::{Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
    RowSoftmax(Var),
    MaskedRowSoftmax(Var),
    Transpose(Var),
    MeanRows(Var, Range<usize>),
    SliceRows(Var, Range<usize>),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    ColMax(Var, Vec<usize>),
    SumAll(Var),
    DivScalar(Var, Var),
    RowScale(Var, Var),
    /// Mean token negative log-likelihood; caches softmax probabilities and
    /// the counted target positions.
    Nll {
        logits: Var,
        probs: Matrix,
        targets: Vec<Option<usize>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Leaf(None), false)
    }

    /// Leaf bound to a stored parameter. Repeated calls for the same id
    /// return the same node, so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf(Some(id)), !p.frozen);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Adds a `1×cols` bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row(self.value(bias))?;
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(value, Op::AddRow(a, bias), ng))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Hadamard(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = self.value(a).row_softmax();
        let ng = self.ng(a);
        self.push(value, Op::RowSoftmax(a), ng)
    }

    /// Row softmax with hidden entries pinned to zero weight.
    pub fn row_softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let m = self.value(a);
        if mask.len() != m.rows() * m.cols() {
            return Err(Error::dim(
                "row_softmax_masked",
                format!("mask of {} for {:?}", mask.len(), m.shape()),
            ));
        }
        for r in 0..m.rows() {
            if !mask[r * m.cols()..(r + 1) * m.cols()].iter().any(|&b| b) {
                return Err(Error::Domain(format!("mask hides every entry of row {r}")));
            }
        }
        let value = m.row_softmax_masked(Some(mask));
        let ng = self.ng(a);
        Ok(self.push(value, Op::MaskedRowSoftmax(a), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        self.push(value, Op::Transpose(a), ng)
    }

    pub fn mean_rows(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let value = self.value(a).mean_rows(range.clone())?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::MeanRows(a, range), ng))
    }

    pub fn slice_rows(&mut self, a: Var, range: Range<usize>) -> Result<Var> {
        let value = self.value(a).slice_rows(range.clone())?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SliceRows(a, range), ng))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).gather_rows(indices)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec()), ng))
    }

    pub fn gather_cols(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let m = self.value(a);
        let mut out = Matrix::zeros(m.rows(), indices.len());
        for (j, &c) in indices.iter().enumerate() {
            if c >= m.cols() {
                return Err(Error::dim("gather_cols", format!("index {c} of {} cols", m.cols())));
            }
            for r in 0..m.rows() {
                out.set(r, j, m.get(r, c));
            }
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::GatherCols(a, indices.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::concat_rows(&mats)?;
        let ng = parts.iter().any(|&v| self.ng(v));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::concat_cols(&mats)?;
        let ng = parts.iter().any(|&v| self.ng(v));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Per-column maximum as a `1×cols` row. The gradient flows to the
    /// first row attaining the maximum.
    pub fn col_max(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if m.rows() == 0 {
            return Err(Error::Domain("column max of an empty matrix".into()));
        }
        let mut out = Matrix::zeros(1, m.cols());
        let mut arg = vec![0; m.cols()];
        for (c, arg_c) in arg.iter_mut().enumerate() {
            let mut best = m.get(0, c);
            for r in 1..m.rows() {
                let v = m.get(r, c);
                if v > best {
                    best = v;
                    *arg_c = r;
                }
            }
            out.set(0, c, best);
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::ColMax(a, arg), ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    /// `a / s` for a `1×1` node `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(Error::dim("div_scalar", format!("divisor {:?}", sv.shape())));
        }
        let d = sv.data()[0];
        let value = self.value(a).map(|x| x / d);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(value, Op::DivScalar(a, s), ng))
    }

    /// Multiplies row `i` of `a` by `w[i]`, with `w` an `n×1` column.
    pub fn row_scale(&mut self, a: Var, w: Var) -> Result<Var> {
        let (am, wm) = (self.value(a), self.value(w));
        if wm.cols() != 1 || wm.rows() != am.rows() {
            return Err(Error::dim(
                "row_scale",
                format!("{:?} by weights {:?}", am.shape(), wm.shape()),
            ));
        }
        let mut out = am.clone();
        for r in 0..out.rows() {
            let s = wm.get(r, 0);
            for v in out.row_mut(r) {
                *v *= s;
            }
        }
        let ng = self.ng(a) || self.ng(w);
        Ok(self.push(out, Op::RowScale(a, w), ng))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits`. `None` targets (padding) are excluded from the mean.
    pub fn nll(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lm = self.value(logits);
        if targets.len() != lm.rows() {
            return Err(Error::dim(
                "nll",
                format!("{} targets for {} logit rows", targets.len(), lm.rows()),
            ));
        }
        let counted = targets.iter().filter(|t| t.is_some()).count();
        if counted == 0 {
            return Err(Error::Domain("every target position is padding".into()));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= lm.cols()) {
            return Err(Error::Domain(format!(
                "target id {bad} outside vocabulary of {}",
                lm.cols()
            )));
        }
        let probs = lm.row_softmax();
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = lm.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[t];
            }
        }
        let value = Matrix::scalar(loss / counted as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            value,
            Op::Nll {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            ng,
        ))
    }

    /// Runs the reverse sweep from a `1×1` loss and accumulates gradients
    /// into unfrozen parameters of `store`. A tape can be swept once.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        if self.consumed {
            return Err(Error::State(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("loss does not belong to this tape".into()));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::dim(
                "backward",
                format!("loss must be 1x1, got {:?}", self.value(loss).shape()),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let node = &self.nodes[idx];
            let nodes = &self.nodes;
            let val = |v: Var| &nodes[v.0].value;
            let mut send = |v: Var, contrib: Matrix| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&contrib).expect("gradient shapes agree"),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf(Some(id)) => store.accumulate_grad(*id, &g),
                Op::Leaf(None) => {}
                Op::MatMul(a, b) => {
                    if nodes[a.0].needs_grad {
                        send(*a, g.matmul_nt(val(*b))?);
                    }
                    if nodes[b.0].needs_grad {
                        send(*b, val(*a).matmul_tn(&g)?);
                    }
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone());
                    send(*b, g.scale(-1.0));
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    send(*bias, gb);
                    send(*a, g);
                }
                Op::Hadamard(a, b) => {
                    send(*a, g.hadamard(val(*b))?);
                    send(*b, g.hadamard(val(*a))?);
                }
                Op::Scale(a, c) => send(*a, g.scale(*c)),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = Matrix::new(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(y.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    )?;
                    send(*a, ga);
                }
                Op::Gelu(a) => {
                    let x = val(*a);
                    let ga = Matrix::new(
                        g.rows(),
                        g.cols(),
                        g.data().iter().zip(x.data()).map(|(g, &x)| g * gelu_grad(x)).collect(),
                    )?;
                    send(*a, ga);
                }
                Op::RowSoftmax(a) | Op::MaskedRowSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for (o, (y, g)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = y * (g - dot);
                        }
                    }
                    send(*a, ga);
                }
                Op::Transpose(a) => send(*a, g.transpose()),
                Op::MeanRows(a, range) => {
                    let src = val(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    let n = range.len() as f64;
                    for r in range.clone() {
                        for (o, v) in ga.row_mut(r).iter_mut().zip(g.row(0)) {
                            *o = v / n;
                        }
                    }
                    send(*a, ga);
                }
                Op::SliceRows(a, range) => {
                    let src = val(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for (i, r) in range.clone().enumerate() {
                        ga.row_mut(r).copy_from_slice(g.row(i));
                    }
                    send(*a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let src = val(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for (i, &r) in idx.iter().enumerate() {
                        for (o, v) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                    send(*a, ga);
                }
                Op::GatherCols(a, idx) => {
                    let src = val(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for (j, &c) in idx.iter().enumerate() {
                        for r in 0..src.rows() {
                            let cur = ga.get(r, c);
                            ga.set(r, c, cur + g.get(r, j));
                        }
                    }
                    send(*a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = val(p).rows();
                        send(p, g.slice_rows(start..start + n)?);
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let pm = val(p);
                        let mut gp = Matrix::zeros(pm.rows(), pm.cols());
                        for r in 0..pm.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[start..start + pm.cols()]);
                        }
                        start += pm.cols();
                        send(p, gp);
                    }
                }
                Op::ColMax(a, arg) => {
                    let src = val(*a);
                    let mut ga = Matrix::zeros(src.rows(), src.cols());
                    for (c, &r) in arg.iter().enumerate() {
                        ga.set(r, c, g.get(0, c));
                    }
                    send(*a, ga);
                }
                Op::SumAll(a) => {
                    let src = val(*a);
                    send(*a, Matrix::filled(src.rows(), src.cols(), g.data()[0]));
                }
                Op::DivScalar(a, s) => {
                    let d = val(*s).data()[0];
                    if nodes[s.0].needs_grad {
                        let dot: f64 = g.data().iter().zip(val(*a).data()).map(|(g, x)| g * x).sum();
                        send(*s, Matrix::scalar(-dot / (d * d)));
                    }
                    send(*a, g.scale(1.0 / d));
                }
                Op::RowScale(a, w) => {
                    let (am, wm) = (val(*a), val(*w));
                    if nodes[w.0].needs_grad {
                        let mut gw = Matrix::zeros(wm.rows(), 1);
                        for r in 0..am.rows() {
                            let dot: f64 = g.row(r).iter().zip(am.row(r)).map(|(g, x)| g * x).sum();
                            gw.set(r, 0, dot);
                        }
                        send(*w, gw);
                    }
                    let mut ga = g;
                    for r in 0..ga.rows() {
                        let s = wm.get(r, 0);
                        for v in ga.row_mut(r) {
                            *v *= s;
                        }
                    }
                    send(*a, ga);
                }
                Op::Nll { logits, probs, targets } => {
                    let counted = targets.iter().filter(|t| t.is_some()).count() as f64;
                    let scale = g.data()[0] / counted;
                    let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for (o, p) in gl.row_mut(r).iter_mut().zip(probs.row(r)) {
                                *o = p * scale;
                            }
                            let cur = gl.get(r, t);
                            gl.set(r, t, cur - scale);
                        }
                    }
                    send(*logits, gl);
                }
            }
        }
        Ok(())
    }
}
