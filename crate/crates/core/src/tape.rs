//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its inputs. [`Tape::backward`] seeds the scalar loss with `1.0` and walks
//! the nodes in reverse execution order, accumulating gradients into every
//! node that depends on a trainable leaf.
//!
//! The tape is rebuilt for every optimisation step, so the graph can change
//! from batch to batch.
//!
//! ```
//! use bait::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let a = tape.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
//! let sq = tape.mul(a, a).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(a).unwrap(), &[2.0, -4.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to the argument of every logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowVector(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    L2NormalizeRows(Var),
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`backward`](Self::backward), if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0)?.grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = self.nodes.get(v.0)?;
        let g = node.grad.clone()?;
        Tensor::new(node.value.shape().to_vec(), g).ok()
    }

    /// Clears all gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownVar(v.0))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- forward operations ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        let (m, k) = av.dims2("matmul")?;
        let (k2, n) = bv.dims2("matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.check(a)?;
        let (m, n) = av.dims2("transpose")?;
        let value = Tensor::matrix(n, m, transpose_raw(av.data(), m, n))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Transpose(a)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op,
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, rec: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, rec))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m×n]` matrix (layer bias).
    pub fn add_row_vector(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.check(a)?, self.check(bias)?);
        let (m, n) = av.dims2("add_row_vector")?;
        if bv.len() != n {
            return Err(Error::Shape {
                op: "add_row_vector",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut data = av.data().to_vec();
        for r in 0..m {
            for (x, &b) in data[r * n..(r + 1) * n].iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(value, rg, Op::AddRowVector(a, bias)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.nodes[a.0].value.map(|v| v * factor);
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        let value = self.nodes[a.0].value.map(|v| v + offset);
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::AddScalar(a))
    }

    /// Elementwise `max(0, v)`. The gradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|v| v.max(0.0));
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Relu(a))
    }

    /// Natural log of `max(v, LOG_EPS)`.
    pub fn log(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|v| v.max(LOG_EPS).ln());
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Log(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Mean(a))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.check(a)?;
        let (m, n) = av.dims2("softmax_rows")?;
        let mut data = av.data().to_vec();
        for r in 0..m {
            softmax_in_place(&mut data[r * n..(r + 1) * n]);
        }
        let value = Tensor::matrix(m, n, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::SoftmaxRows(a)))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.check(a)?;
        let (m, n) = av.dims2("l2_normalize_rows")?;
        let mut data = av.data().to_vec();
        for r in 0..m {
            let row = &mut data[r * n..(r + 1) * n];
            let norm = row_norm(row);
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::DegenerateWeight { row: r });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let value = Tensor::matrix(m, n, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::L2NormalizeRows(a)))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat_rows of zero tensors".into()))?;
        let (_, n) = self.check(*first)?.dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.check(p)?;
            let (m, c) = pv.dims2("concat_rows")?;
            if c != n {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.nodes[first.0].value.shape().to_vec(),
                    right: pv.shape().to_vec(),
                });
            }
            rows += m;
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::matrix(rows, n, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// Copy of `a` that is cut off from the graph.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.push(value, false, Op::Leaf)
    }

    // ---- reverse pass ----

    /// Back-propagates from a scalar loss.
    ///
    /// Afterwards every trainable leaf holds a gradient buffer (zeros if the
    /// loss does not reach it).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = self.check(loss)?;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::DetachedLoss);
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[id].grad.take() else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            self.propagate(id, &op, &g);
            self.nodes[id].grad = Some(g);
        }

        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a += b),
            None => node.grad = Some(contrib),
        }
    }

    fn propagate(&mut self, id: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2("matmul").unwrap();
                let n = self.nodes[b.0].value.cols();
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let bt = transpose_raw(self.nodes[b.0].value.data(), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.accumulate(a, da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let at = transpose_raw(self.nodes[a.0].value.data(), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.accumulate(b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.nodes[a.0].value.dims2("transpose").unwrap();
                // g has shape [n×m]
                let da = transpose_raw(g, n, m);
                self.accumulate(a, da);
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[b.0].value.data())
                    .map(|(g, y)| g * y)
                    .collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(g, x)| g * x)
                    .collect();
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::AddRowVector(a, bias) => {
                self.accumulate(a, g.to_vec());
                let n = self.nodes[bias.0].value.len();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                self.accumulate(bias, db);
            }
            Op::Scale(a, factor) => {
                self.accumulate(a, g.iter().map(|v| v * factor).collect());
            }
            Op::AddScalar(a) => self.accumulate(a, g.to_vec()),
            Op::Relu(a) => {
                let da = g
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(a, da);
            }
            Op::Log(a) => {
                let da = g
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(g, &x)| if x > LOG_EPS { g / x } else { 0.0 })
                    .collect();
                self.accumulate(a, da);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                self.accumulate(a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                self.accumulate(a, vec![g[0] / n as f64; n]);
            }
            Op::SoftmaxRows(a) => {
                // dx = s ⊙ (g − ⟨g, s⟩) per row
                let s = &self.nodes[id].value;
                let n = s.cols();
                let mut da = vec![0.0; s.len()];
                for ((srow, grow), drow) in s.data().chunks(n).zip(g.chunks(n)).zip(da.chunks_mut(n)) {
                    let dot: f64 = srow.iter().zip(grow).map(|(s, g)| s * g).sum();
                    for ((d, &s), &g) in drow.iter_mut().zip(srow).zip(grow) {
                        *d = s * (g - dot);
                    }
                }
                self.accumulate(a, da);
            }
            Op::L2NormalizeRows(a) => {
                // dv = (g − y⟨y, g⟩) / ‖v‖ per row
                let y = &self.nodes[id].value;
                let x = &self.nodes[a.0].value;
                let n = y.cols();
                let mut da = vec![0.0; y.len()];
                for (((yrow, xrow), grow), drow) in y
                    .data()
                    .chunks(n)
                    .zip(x.data().chunks(n))
                    .zip(g.chunks(n))
                    .zip(da.chunks_mut(n))
                {
                    let norm = row_norm(xrow);
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for ((d, &y), &g) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = (g - y * dot) / norm;
                    }
                }
                self.accumulate(a, da);
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    self.accumulate(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
        }
    }
}

/// Euclidean norm, rescaled so that large finite entries do not overflow.
fn row_norm(row: &[f64]) -> f64 {
    let scale = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    scale * row.iter().map(|v| (v / scale) * (v / scale)).sum::<f64>().sqrt()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
