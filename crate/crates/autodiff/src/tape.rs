//! Define-by-run gradient tape.
//!
//! Every operation appends a node holding its forward value and parent
//! ids, so node order is already a topological order. [`Tape::backward`]
//! walks that order in reverse once. It never mutates the tape: calling it
//! twice returns two identical, freshly zeroed gradient sets, so a repeated
//! backward can neither double-count nor observe stale accumulators.

use std::cell::{Ref, RefCell};
use std::fmt;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGradient,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddScalar(usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Pow(usize, f64),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    L2Norm(usize),
    RowNormalize(usize),
    GatherRows(usize, Vec<usize>),
    IndexAdd(usize, Vec<usize>),
    BroadcastRows(usize),
    ConcatCols(usize, usize),
    StraightThrough(usize),
    SoftmaxCrossEntropy(usize, Vec<usize>),
    BceWithLogits(usize, Tensor),
    Mse(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss through a differentiable path.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn wrt_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::Shape(format!(
            "{} shapes disagree: {:?} vs {:?}",
            what,
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Broadcast rule for binary elementwise ops: equal shapes, or one side is
/// a rank-0 scalar.
fn broadcast(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    if a.is_scalar() {
        let x = a.item();
        return Ok(b.map(|y| f(x, y)));
    }
    if b.is_scalar() {
        let y = b.item();
        return Ok(a.map(|x| f(x, y)));
    }
    Err(AutodiffError::Shape(format!(
        "{} cannot broadcast {:?} with {:?}",
        what,
        a.shape(),
        b.shape()
    )))
}

/// Reduces an elementwise gradient back onto an operand that may have been
/// broadcast from a scalar.
fn unbroadcast(grad: Tensor, operand: &Tensor) -> Tensor {
    if operand.is_scalar() && !grad.is_scalar() {
        Tensor::scalar(grad.sum())
    } else {
        grad
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

fn softmax_rows(logits: &Tensor) -> Tensor {
    let (m, c) = (logits.rows(), logits.cols());
    let mut out = logits.clone();
    for r in 0..m {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
        debug_assert_eq!(row.len(), c);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn unary(&self, a: Var<'_>, f: impl FnOnce(&Tensor) -> Result<Tensor>, op: Op) -> Result<Var<'_>> {
        let out = f(&self.value_ref(a.id))?;
        let rg = self.requires(&[a.id]);
        Ok(self.push(out, op, rg))
    }

    fn binary(
        &self,
        a: Var<'_>,
        b: Var<'_>,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: Op,
    ) -> Result<Var<'_>> {
        let out = {
            let av = self.value_ref(a.id);
            let bv = self.value_ref(b.id);
            f(&av, &bv)?
        };
        let rg = self.requires(&[a.id, b.id]);
        Ok(self.push(out, op, rg))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    debug_assert_eq!(g.shape(), nodes[id].value.shape(), "gradient shape for node {id}");
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let want = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf | Op::StopGradient => {}
        Op::MatMul(a, b) => {
            if want(*a) {
                let da = g.matmul(&val(*b).transpose().unwrap()).unwrap();
                accumulate(nodes, grads, *a, da);
            }
            if want(*b) {
                let db = val(*a).transpose().unwrap().matmul(g).unwrap();
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Add(a, b) => {
            if want(*a) {
                accumulate(nodes, grads, *a, unbroadcast(g.clone(), val(*a)));
            }
            if want(*b) {
                accumulate(nodes, grads, *b, unbroadcast(g.clone(), val(*b)));
            }
        }
        Op::Sub(a, b) => {
            if want(*a) {
                accumulate(nodes, grads, *a, unbroadcast(g.clone(), val(*a)));
            }
            if want(*b) {
                accumulate(nodes, grads, *b, unbroadcast(g.scale(-1.0), val(*b)));
            }
        }
        Op::Mul(a, b) => {
            if want(*a) {
                let da = broadcast(g, val(*b), "mul", |x, y| x * y).unwrap();
                accumulate(nodes, grads, *a, unbroadcast(da, val(*a)));
            }
            if want(*b) {
                let db = broadcast(g, val(*a), "mul", |x, y| x * y).unwrap();
                accumulate(nodes, grads, *b, unbroadcast(db, val(*b)));
            }
        }
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.scale(*c)),
        Op::Relu(a) => {
            let da = g.zip_map(val(*a), |gi, x| if x > 0.0 { gi } else { 0.0 }).unwrap();
            accumulate(nodes, grads, *a, da);
        }
        Op::Sigmoid(a) => {
            let da = g.zip_map(&node.value, |gi, s| gi * s * (1.0 - s)).unwrap();
            accumulate(nodes, grads, *a, da);
        }
        Op::Exp(a) => {
            let da = g.zip_map(&node.value, |gi, e| gi * e).unwrap();
            accumulate(nodes, grads, *a, da);
        }
        Op::Log(a) => {
            let da = g.zip_map(val(*a), |gi, x| gi / x).unwrap();
            accumulate(nodes, grads, *a, da);
        }
        Op::Pow(a, p) => {
            let p = *p;
            let da = g.zip_map(val(*a), |gi, x| gi * p * x.powf(p - 1.0)).unwrap();
            accumulate(nodes, grads, *a, da);
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose().unwrap()),
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.reshape(val(*a).shape()).unwrap()),
        Op::Sum(a) => accumulate(nodes, grads, *a, Tensor::full(val(*a).shape(), g.item())),
        Op::Mean(a) => {
            let n = val(*a).numel().max(1) as f64;
            accumulate(nodes, grads, *a, Tensor::full(val(*a).shape(), g.item() / n));
        }
        Op::SumAxis(a, axis) => {
            let x = val(*a);
            let (m, n) = (x.rows(), x.cols());
            let da = Tensor::from_fn(m, n, |r, c| if *axis == 0 { g.get(0, c) } else { g.get(r, 0) });
            accumulate(nodes, grads, *a, da);
        }
        Op::L2Norm(a) => {
            let norm = node.value.item();
            let gi = g.item();
            let da = if norm > 0.0 {
                val(*a).scale(gi / norm)
            } else {
                Tensor::zeros(val(*a).shape())
            };
            accumulate(nodes, grads, *a, da);
        }
        Op::RowNormalize(a) => {
            let x = val(*a);
            let y = &node.value;
            let mut da = Tensor::zeros(x.shape());
            for r in 0..x.rows() {
                let norm = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                let yr = y.row(r);
                let gr = g.row(r);
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((d, &yi), &gi) in da.row_mut(r).iter_mut().zip(yr).zip(gr) {
                    *d = (gi - yi * dot) / norm;
                }
            }
            accumulate(nodes, grads, *a, da);
        }
        Op::GatherRows(a, index) => {
            let mut da = Tensor::zeros(val(*a).shape());
            for (i, &src) in index.iter().enumerate() {
                for (d, &gi) in da.row_mut(src).iter_mut().zip(g.row(i)) {
                    *d += gi;
                }
            }
            accumulate(nodes, grads, *a, da);
        }
        Op::IndexAdd(a, index) => {
            let da = g.gather_rows(index).unwrap();
            accumulate(nodes, grads, *a, da);
        }
        Op::BroadcastRows(a) => {
            let summed = Tensor::from_fn(1, g.cols(), |_, c| (0..g.rows()).map(|r| g.get(r, c)).sum());
            accumulate(nodes, grads, *a, summed.reshape(val(*a).shape()).unwrap());
        }
        Op::ConcatCols(a, b) => {
            let p = val(*a).cols();
            let q = val(*b).cols();
            if want(*a) {
                accumulate(nodes, grads, *a, Tensor::from_fn(g.rows(), p, |r, c| g.get(r, c)));
            }
            if want(*b) {
                accumulate(nodes, grads, *b, Tensor::from_fn(g.rows(), q, |r, c| g.get(r, p + c)));
            }
        }
        Op::StraightThrough(original) => accumulate(nodes, grads, *original, g.clone()),
        Op::SoftmaxCrossEntropy(a, targets) => {
            let mut probs = softmax_rows(val(*a));
            let m = probs.rows() as f64;
            for (r, &t) in targets.iter().enumerate() {
                let row = probs.row_mut(r);
                row[t] -= 1.0;
            }
            accumulate(nodes, grads, *a, probs.scale(g.item() / m));
        }
        Op::BceWithLogits(a, targets) => {
            let n = targets.numel() as f64;
            let gi = g.item();
            let da = val(*a).zip_map(targets, |x, t| gi * (sigmoid(x) - t) / n).unwrap();
            accumulate(nodes, grads, *a, da);
        }
        Op::Mse(a, b) => {
            let n = val(*a).numel() as f64;
            let diff = val(*a).zip_map(val(*b), |x, y| x - y).unwrap();
            let gi = g.item();
            if want(*a) {
                accumulate(nodes, grads, *a, diff.scale(2.0 * gi / n));
            }
            if want(*b) {
                accumulate(nodes, grads, *b, diff.scale(-2.0 * gi / n));
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    /// Value of a single-element var.
    pub fn item(&self) -> f64 {
        self.tape.value_ref(self.id).item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape
            .binary(self, other, |a, b| a.matmul(b), Op::MatMul(self.id, other.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(
            self,
            other,
            |a, b| broadcast(a, b, "add", |x, y| x + y),
            Op::Add(self.id, other.id),
        )
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(
            self,
            other,
            |a, b| broadcast(a, b, "sub", |x, y| x - y),
            Op::Sub(self.id, other.id),
        )
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(
            self,
            other,
            |a, b| broadcast(a, b, "mul", |x, y| x * y),
            Op::Mul(self.id, other.id),
        )
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.tape
            .unary(self, |a| Ok(a.map(|x| x + c)), Op::AddScalar(self.id))
            .expect("add_scalar is total")
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape
            .unary(self, |a| Ok(a.scale(c)), Op::Scale(self.id, c))
            .expect("scale is total")
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn relu(self) -> Var<'t> {
        self.tape
            .unary(self, |a| Ok(a.map(|x| x.max(0.0))), Op::Relu(self.id))
            .expect("relu is total")
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape
            .unary(self, |a| Ok(a.map(sigmoid)), Op::Sigmoid(self.id))
            .expect("sigmoid is total")
    }

    pub fn exp(self) -> Var<'t> {
        self.tape
            .unary(self, |a| Ok(a.map(f64::exp)), Op::Exp(self.id))
            .expect("exp is total")
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.tape.unary(
            self,
            |a| {
                if let Some(x) = a.data().iter().find(|&&x| !(x > 0.0)) {
                    return Err(AutodiffError::Domain(format!("log of non-positive value {x}")));
                }
                Ok(a.map(f64::ln))
            },
            Op::Log(self.id),
        )
    }

    /// Elementwise `x^p`. Negative bases are rejected unless `p` is an integer.
    pub fn powf(self, p: f64) -> Result<Var<'t>> {
        self.tape.unary(
            self,
            |a| {
                if p.fract() != 0.0 {
                    if let Some(x) = a.data().iter().find(|&&x| x < 0.0) {
                        return Err(AutodiffError::Domain(format!(
                            "non-integer power {p} of negative value {x}"
                        )));
                    }
                }
                Ok(a.map(|x| x.powf(p)))
            },
            Op::Pow(self.id, p),
        )
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.tape.unary(self, |a| a.transpose(), Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.unary(self, |a| a.reshape(shape), Op::Reshape(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        self.tape
            .unary(self, |a| Ok(Tensor::scalar(a.sum())), Op::Sum(self.id))
            .expect("sum is total")
    }

    pub fn mean(self) -> Var<'t> {
        self.tape
            .unary(
                self,
                |a| Ok(Tensor::scalar(a.sum() / a.numel().max(1) as f64)),
                Op::Mean(self.id),
            )
            .expect("mean is total")
    }

    /// Sum of a matrix along `axis`, keeping the reduced dimension:
    /// axis 0 gives `[1, n]`, axis 1 gives `[m, 1]`.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.tape.unary(
            self,
            |a| {
                if a.rank() != 2 || axis > 1 {
                    return Err(AutodiffError::Axis {
                        axis,
                        shape: a.shape().to_vec(),
                    });
                }
                let (m, n) = (a.rows(), a.cols());
                Ok(if axis == 0 {
                    Tensor::from_fn(1, n, |_, c| (0..m).map(|r| a.get(r, c)).sum())
                } else {
                    Tensor::from_fn(m, 1, |r, _| a.row(r).iter().sum())
                })
            },
            Op::SumAxis(self.id, axis),
        )
    }

    /// Mean along `axis` with the same shape convention as [`Var::sum_axis`].
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let n = match (shape.len(), axis) {
            (2, 0) => shape[0],
            (2, 1) => shape[1],
            _ => return Err(AutodiffError::Axis { axis, shape }),
        };
        Ok(self.sum_axis(axis)?.scale(1.0 / n.max(1) as f64))
    }

    /// Mean of each row: `[m, n] -> [m, 1]`.
    pub fn rowwise_mean(self) -> Result<Var<'t>> {
        self.mean_axis(1)
    }

    /// Euclidean norm of all elements.
    pub fn l2_norm(self) -> Var<'t> {
        self.tape
            .unary(self, |a| Ok(Tensor::scalar(a.norm())), Op::L2Norm(self.id))
            .expect("l2_norm is total")
    }

    /// Scales every row of a matrix to unit Euclidean norm.
    pub fn row_normalize(self) -> Result<Var<'t>> {
        self.tape.unary(
            self,
            |a| {
                a.require_matrix("row_normalize")?;
                let mut out = a.clone();
                for r in 0..a.rows() {
                    let norm = a.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm <= crate::NORM_EPS {
                        return Err(AutodiffError::Domain(format!("row {r} has zero norm")));
                    }
                    for x in out.row_mut(r) {
                        *x /= norm;
                    }
                }
                Ok(out)
            },
            Op::RowNormalize(self.id),
        )
    }

    /// Row-wise cosine similarity of two `[m, d]` matrices, returned as `[m]`.
    pub fn row_cosine(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.row_normalize()?;
        let b = other.row_normalize()?;
        let m = a.shape()[0];
        a.mul(b)?.sum_axis(1)?.reshape(&[m])
    }

    /// Cosine similarity of two vectors as a scalar.
    pub fn cosine_similarity(self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 1 || sa != sb {
            return Err(AutodiffError::Shape(format!(
                "cosine_similarity expects equal-length vectors, got {sa:?} and {sb:?}"
            )));
        }
        let d = sa[0];
        let a = self.reshape(&[1, d])?;
        let b = other.reshape(&[1, d])?;
        a.row_cosine(b)?.reshape(&[])
    }

    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t>> {
        let idx = index.to_vec();
        self.tape
            .unary(self, |a| a.gather_rows(index), Op::GatherRows(self.id, idx))
    }

    /// Scatter-add of rows: `out[index[i]] += self[i]`, with `rows` output rows.
    pub fn index_add(self, index: &[usize], rows: usize) -> Result<Var<'t>> {
        let idx = index.to_vec();
        self.tape.unary(
            self,
            |a| {
                let (k, n) = a.require_matrix("index_add")?;
                if k != index.len() {
                    return Err(AutodiffError::Shape(format!(
                        "index_add has {} rows but {} indices",
                        k,
                        index.len()
                    )));
                }
                let mut out = Tensor::zeros(&[rows, n]);
                for (i, &dst) in index.iter().enumerate() {
                    if dst >= rows {
                        return Err(AutodiffError::Shape(format!(
                            "index_add target {dst} out of range for {rows} rows"
                        )));
                    }
                    for (o, &x) in out.row_mut(dst).iter_mut().zip(a.row(i)) {
                        *o += x;
                    }
                }
                Ok(out)
            },
            Op::IndexAdd(self.id, idx),
        )
    }

    /// Repeats a `[n]` or `[1, n]` row `m` times into `[m, n]`.
    pub fn broadcast_rows(self, m: usize) -> Result<Var<'t>> {
        self.tape.unary(
            self,
            |a| {
                let ok = a.rank() == 1 || (a.rank() == 2 && a.shape()[0] == 1);
                if !ok {
                    return Err(AutodiffError::Shape(format!(
                        "broadcast_rows expects a single row, got {:?}",
                        a.shape()
                    )));
                }
                let n = a.numel();
                Ok(Tensor::from_fn(m, n, |_, c| a.data()[c]))
            },
            Op::BroadcastRows(self.id),
        )
    }

    /// `self + bias` with `bias` repeated over every row.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let m = self.shape().first().copied().unwrap_or(1);
        self.add(bias.broadcast_rows(m)?)
    }

    /// `self * scale` with `scale` repeated over every row.
    pub fn mul_row(self, scale: Var<'t>) -> Result<Var<'t>> {
        let m = self.shape().first().copied().unwrap_or(1);
        self.mul(scale.broadcast_rows(m)?)
    }

    pub fn concat_cols(self, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(
            self,
            other,
            |a, b| {
                let (m, p) = a.require_matrix("concat_cols")?;
                let (m2, q) = b.require_matrix("concat_cols")?;
                if m != m2 {
                    return Err(AutodiffError::Shape(format!(
                        "concat_cols row counts disagree: {:?} vs {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                Ok(Tensor::from_fn(m, p + q, |r, c| {
                    if c < p {
                        a.get(r, c)
                    } else {
                        b.get(r, c - p)
                    }
                }))
            },
            Op::ConcatCols(self.id, other.id),
        )
    }

    /// Same value, no gradient flows back through it.
    pub fn stop_gradient(self) -> Var<'t> {
        let v = self.value();
        self.tape.push(v, Op::StopGradient, false)
    }

    /// Straight-through estimator: forward value is `self` (the quantized
    /// tensor); backward passes the incoming gradient unchanged to
    /// `original` and nothing to `self`.
    pub fn straight_through(self, original: Var<'t>) -> Result<Var<'t>> {
        let (q, z) = (self.value(), original.value());
        same_shape(&q, &z, "straight_through")?;
        let rg = original.requires_grad();
        Ok(self.tape.push(q, Op::StraightThrough(original.id), rg))
    }

    /// Mean softmax cross-entropy of `[m, C]` logits against class indices.
    pub fn softmax_cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let t = targets.to_vec();
        self.tape.unary(
            self,
            |a| {
                let (m, c) = a.require_matrix("softmax_cross_entropy")?;
                if m != targets.len() {
                    return Err(AutodiffError::Shape(format!(
                        "{} logit rows but {} targets",
                        m,
                        targets.len()
                    )));
                }
                let mut total = 0.0;
                for (r, &y) in targets.iter().enumerate() {
                    if y >= c {
                        return Err(AutodiffError::ClassIndex { index: y, classes: c });
                    }
                    let row = a.row(r);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                    total += lse - row[y];
                }
                Ok(Tensor::scalar(total / m.max(1) as f64))
            },
            Op::SoftmaxCrossEntropy(self.id, t),
        )
    }

    /// Mean binary cross-entropy on logits; `targets` has the same shape.
    pub fn bce_with_logits(self, targets: &Tensor) -> Result<Var<'t>> {
        let t = targets.clone();
        self.tape.unary(
            self,
            |a| {
                same_shape(a, targets, "bce_with_logits")?;
                if let Some(y) = targets.data().iter().find(|y| !(0.0..=1.0).contains(*y)) {
                    return Err(AutodiffError::Domain(format!("bce target {y} outside [0, 1]")));
                }
                let total: f64 = a
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
                    .sum();
                Ok(Tensor::scalar(total / a.numel().max(1) as f64))
            },
            Op::BceWithLogits(self.id, t),
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>> {
        self.tape.binary(
            self,
            target,
            |a, b| {
                same_shape(a, b, "mse")?;
                let total: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
                Ok(Tensor::scalar(total / a.numel().max(1) as f64))
            },
            Op::Mse(self.id, target.id),
        )
    }
}
