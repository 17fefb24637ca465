use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis for [`OpKind::Stack`] and [`OpKind::Slice`] on the `[rows, last_dim]` view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// The op kinds reachable through [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Softmax,
    Log,
    Exp,
    Sum,
    Mean,
    Stack(Axis),
    Slice { axis: Axis, start: usize, end: usize },
    LogSumExp,
}

/// How the right operand of a binary op is expanded to the left operand.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Same,
    /// one row repeated down every row
    Row,
    /// one column repeated across every column
    Col,
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Log(Var),
    Exp(Var),
    Softmax(Var),
    LogSumExp(Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Concat(Vec<Var>, Axis),
    Slice(Var, Axis, usize, usize),
    Gather(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Tape of recorded operations.
///
/// Nodes are appended in evaluation order, so every input id is smaller than
/// the id of its consumer and a single reverse sweep visits each node once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.last_dim())
}

fn row_shape(t: &Tensor, m: usize) -> Vec<usize> {
    if t.shape().len() == 1 {
        vec![m]
    } else {
        vec![t.rows(), m]
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_sum_exp_row(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Numerically stable softmax of a plain slice.
pub fn softmax_slice(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    softmax_row(row, &mut out);
    out
}

/// `C = A B` for row-major `A: m x k`, `B: k x n`. Set `ta`/`tb` to read the
/// stored matrix transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are m*k, k*n and m*n as checked by the callers;
    // the strides above address exactly those elements.
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a leaf. Its gradient is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let mut value = t;
        value.clear_grad();
        self.push(Op::Leaf, value, rg)
    }

    /// Copy a tensor into the graph as a leaf, trainable or frozen.
    pub fn param(&mut self, t: &Tensor, trainable: bool) -> Var {
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())
            .expect("existing tensor has a valid shape");
        self.push(Op::Leaf, value, trainable)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut value = t;
        value.clear_grad();
        value.set_requires_grad(false);
        self.push(Op::Leaf, value, false)
    }

    /// Same value, cut from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn any_rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    /// Dispatch one of the listed op kinds.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let unary = |name: &'static str| -> Result<Var> {
            match inputs {
                [a] => Ok(*a),
                _ => Err(Error::contract(format!(
                    "{name} takes 1 input, got {}",
                    inputs.len()
                ))),
            }
        };
        let binary = |name: &'static str| -> Result<(Var, Var)> {
            match inputs {
                [a, b] => Ok((*a, *b)),
                _ => Err(Error::contract(format!(
                    "{name} takes 2 inputs, got {}",
                    inputs.len()
                ))),
            }
        };
        match kind {
            OpKind::MatMul => {
                let (a, b) = binary("matmul")?;
                self.matmul(a, b)
            }
            OpKind::Add => {
                let (a, b) = binary("add")?;
                self.add(a, b)
            }
            OpKind::Mul => {
                let (a, b) = binary("mul")?;
                self.mul(a, b)
            }
            OpKind::LeakyRelu(slope) => Ok(self.leaky_relu(unary("leaky_relu")?, slope)),
            OpKind::Tanh => Ok(self.tanh(unary("tanh")?)),
            OpKind::Sigmoid => Ok(self.sigmoid(unary("sigmoid")?)),
            OpKind::Softmax => Ok(self.softmax(unary("softmax")?)),
            OpKind::Log => self.log(unary("log")?),
            OpKind::Exp => self.exp(unary("exp")?),
            OpKind::Sum => Ok(self.sum(unary("sum")?)),
            OpKind::Mean => Ok(self.mean(unary("mean")?)),
            OpKind::Stack(axis) => self.concat(inputs, axis),
            OpKind::Slice { axis, start, end } => self.slice(unary("slice")?, axis, start, end),
            OpKind::LogSumExp => Ok(self.log_sum_exp(unary("log_sum_exp")?)),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let rg = self.any_rg(&[a, b]);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok(Bcast::Same);
        }
        let (ra, ma) = shape2(ta);
        let (rb, mb) = shape2(tb);
        if tb.numel() == 1 {
            Ok(Bcast::Scalar)
        } else if rb == 1 && mb == ma {
            Ok(Bcast::Row)
        } else if mb == 1 && rb == ra && ta.shape().len() >= 2 {
            Ok(Bcast::Col)
        } else {
            Err(Error::dim(op, format!("{:?} vs {:?}", ta.shape(), tb.shape())))
        }
    }

    fn expand(&self, b: Var, mode: Bcast, rows: usize, m: usize) -> Vec<f64> {
        let tb = self.value(b).data();
        match mode {
            Bcast::Same => tb.to_vec(),
            Bcast::Scalar => vec![tb[0]; rows * m],
            Bcast::Row => {
                let mut out = Vec::with_capacity(rows * m);
                for _ in 0..rows {
                    out.extend_from_slice(tb);
                }
                out
            }
            Bcast::Col => {
                let mut out = Vec::with_capacity(rows * m);
                for &v in tb.iter().take(rows) {
                    out.extend(std::iter::repeat_n(v, m));
                }
                out
            }
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let mode = self.bcast(name, a, b)?;
        let ta = self.value(a);
        let (rows, m) = shape2(ta);
        let eb = self.expand(b, mode, rows, m);
        let out: Vec<f64> = ta.data().iter().zip(&eb).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.any_rg(&[a, b]);
        Ok(self.push(mk(a, b, mode), value, rg))
    }

    /// Elementwise sum; `b` may also be a row vector, a column vector or a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let rg = self.any_rg(&[a]);
        self.push(op, value, rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, stable_sigmoid, Op::Sigmoid(a))
    }

    /// `ln(1 + e^x)` without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::domain("log", format!("non-positive input {bad}")));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x > 709.0) {
            return Err(Error::domain("exp", format!("input {bad} overflows f64")));
        }
        Ok(self.unary(a, f64::exp, Op::Exp(a)))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let m = ta.last_dim();
        let mut out = vec![0.0; ta.numel()];
        for (row, o) in ta.data().chunks(m).zip(out.chunks_mut(m)) {
            softmax_row(row, o);
        }
        let value = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let rg = self.any_rg(&[a]);
        self.push(Op::Softmax(a), value, rg)
    }

    /// `log Σ exp` over the last dimension, max-shifted. Output keeps a
    /// trailing unit dimension (`[rows, 1]`, or `[1]` for a vector).
    pub fn log_sum_exp(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let m = ta.last_dim();
        let out: Vec<f64> = ta.data().chunks(m).map(log_sum_exp_row).collect();
        let value = Tensor::new(row_shape(ta, 1), out).expect("row shape");
        let rg = self.any_rg(&[a]);
        self.push(Op::LogSumExp(a), value, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.any_rg(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.any_rg(&[a]);
        self.push(Op::Mean(a), Tensor::scalar(s), rg)
    }

    /// Sum over the last dimension, keeping it as a unit dimension.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let m = ta.last_dim();
        let out: Vec<f64> = ta.data().chunks(m).map(|r| r.iter().sum()).collect();
        let value = Tensor::new(row_shape(ta, 1), out).expect("row shape");
        let rg = self.any_rg(&[a]);
        self.push(Op::SumLast(a), value, rg)
    }

    /// Concatenate 2-D values along rows or columns.
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("stack of zero tensors"))?;
        let (r0, m0) = shape2(self.value(first));
        let mut data = Vec::new();
        let value = match axis {
            Axis::Rows => {
                let mut rows = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.last_dim() != m0 {
                        return Err(Error::dim(
                            "stack",
                            format!("row width {} vs {}", t.last_dim(), m0),
                        ));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::new(vec![rows, m0], data)?
            }
            Axis::Cols => {
                let mut width = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.rows() != r0 {
                        return Err(Error::dim(
                            "stack",
                            format!("row count {} vs {}", t.rows(), r0),
                        ));
                    }
                    width += t.last_dim();
                }
                data.reserve(r0 * width);
                for i in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                Tensor::new(vec![r0, width], data)?
            }
        };
        let rg = self.any_rg(parts);
        Ok(self.push(Op::Concat(parts.to_vec(), axis), value, rg))
    }

    /// Half-open slice `[start, end)` along rows or columns.
    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, m) = shape2(ta);
        let limit = match axis {
            Axis::Rows => r,
            Axis::Cols => m,
        };
        if start >= end || end > limit {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{end} of {:?} along {axis:?}", ta.shape()),
            ));
        }
        let value = match axis {
            Axis::Rows => Tensor::new(vec![end - start, m], ta.data()[start * m..end * m].to_vec())?,
            Axis::Cols => {
                let mut data = Vec::with_capacity(r * (end - start));
                for i in 0..r {
                    data.extend_from_slice(&ta.row(i)[start..end]);
                }
                Tensor::new(vec![r, end - start], data)?
            }
        };
        let rg = self.any_rg(&[a]);
        Ok(self.push(Op::Slice(a, axis, start, end), value, rg))
    }

    /// Pick column `idx[r]` of every row `r`; the result has shape `[rows, 1]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (r, m) = shape2(ta);
        if idx.len() != r {
            return Err(Error::dim(
                "gather",
                format!("{} indices for {} rows", idx.len(), r),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::domain(
                "gather",
                format!("index {bad} out of range for width {m}"),
            ));
        }
        let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| ta.get2(i, j)).collect();
        let value = Tensor::new(vec![r, 1], out)?;
        let rg = self.any_rg(&[a]);
        Ok(self.push(Op::Gather(a, idx.to_vec()), value, rg))
    }

    /// Populate gradients of the scalar `root` with respect to every node
    /// that requires one. Gradients from repeated uses add up.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rt = self.value(root);
        if rt.numel() != 1 {
            return Err(Error::contract(format!(
                "backward from non-scalar root of shape {:?}",
                rt.shape()
            )));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last [`backward`](Self::backward) root w.r.t. `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut send = |v: Var, g: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, gy, false, val(*b), true, &mut ga, false);
                    send(*a, ga);
                }
                if rg(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, val(*a), true, gy, false, &mut gb, false);
                    send(*b, gb);
                }
            }
            Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if rg(*a) {
                    send(*a, gy.to_vec());
                }
                if rg(*b) {
                    let g: Vec<f64> = gy.iter().map(|v| sign * v).collect();
                    send(*b, self.reduce(*a, *b, *mode, &g));
                }
            }
            Op::Mul(a, b, mode) => {
                let (rows, m) = shape2(self.value(*a));
                if rg(*a) {
                    let eb = self.expand(*b, *mode, rows, m);
                    send(*a, gy.iter().zip(&eb).map(|(g, v)| g * v).collect());
                }
                if rg(*b) {
                    let g: Vec<f64> = gy.iter().zip(val(*a)).map(|(g, v)| g * v).collect();
                    send(*b, self.reduce(*a, *b, *mode, &g));
                }
            }
            Op::Scale(a, k) => send(*a, gy.iter().map(|g| g * k).collect()),
            Op::AddScalar(a) => send(*a, gy.to_vec()),
            Op::LeakyRelu(a, slope) => send(
                *a,
                gy.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                    .collect(),
            ),
            Op::Relu(a) => send(
                *a,
                gy.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Tanh(a) => send(*a, gy.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect()),
            Op::Sigmoid(a) => send(*a, gy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()),
            Op::Softplus(a) => send(
                *a,
                gy.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| g * stable_sigmoid(x))
                    .collect(),
            ),
            Op::Log(a) => send(*a, gy.iter().zip(val(*a)).map(|(g, x)| g / x).collect()),
            Op::Exp(a) => send(*a, gy.iter().zip(y).map(|(g, e)| g * e).collect()),
            Op::Softmax(a) => {
                let m = node.value.last_dim();
                let mut g = vec![0.0; y.len()];
                for ((yr, gr), out) in y.chunks(m).zip(gy.chunks(m)).zip(g.chunks_mut(m)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                send(*a, g);
            }
            Op::LogSumExp(a) => {
                let x = val(*a);
                let m = self.value(*a).last_dim();
                let mut g = vec![0.0; x.len()];
                for (r, (xr, out)) in x.chunks(m).zip(g.chunks_mut(m)).enumerate() {
                    softmax_row(xr, out);
                    out.iter_mut().for_each(|o| *o *= gy[r]);
                }
                send(*a, g);
            }
            Op::Sum(a) => send(*a, vec![gy[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                send(*a, vec![gy[0] / n as f64; n]);
            }
            Op::SumLast(a) => {
                let m = self.value(*a).last_dim();
                let g: Vec<f64> = gy.iter().flat_map(|&v| std::iter::repeat_n(v, m)).collect();
                send(*a, g);
            }
            Op::Concat(parts, axis) => match axis {
                Axis::Rows => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        if rg(p) {
                            send(p, gy[offset..offset + len].to_vec());
                        }
                        offset += len;
                    }
                }
                Axis::Cols => {
                    let width = node.value.last_dim();
                    let mut col = 0;
                    for &p in parts {
                        let (r, m) = shape2(self.value(p));
                        if rg(p) {
                            let mut g = Vec::with_capacity(r * m);
                            for i in 0..r {
                                g.extend_from_slice(&gy[i * width + col..i * width + col + m]);
                            }
                            send(p, g);
                        }
                        col += m;
                    }
                }
            },
            Op::Slice(a, axis, start, end) => {
                let ta = self.value(*a);
                let (r, m) = shape2(ta);
                let mut g = vec![0.0; ta.numel()];
                match axis {
                    Axis::Rows => g[start * m..end * m].copy_from_slice(gy),
                    Axis::Cols => {
                        let w = end - start;
                        for i in 0..r {
                            g[i * m + start..i * m + end].copy_from_slice(&gy[i * w..(i + 1) * w]);
                        }
                    }
                }
                send(*a, g);
            }
            Op::Gather(a, idx) => {
                let ta = self.value(*a);
                let m = ta.last_dim();
                let mut g = vec![0.0; ta.numel()];
                for (i, &j) in idx.iter().enumerate() {
                    g[i * m + j] = gy[i];
                }
                send(*a, g);
            }
        }
    }

    /// Sum a full-size gradient back down to the broadcast operand's shape.
    fn reduce(&self, a: Var, b: Var, mode: Bcast, g: &[f64]) -> Vec<f64> {
        let (rows, m) = shape2(self.value(a));
        match mode {
            Bcast::Same => g.to_vec(),
            Bcast::Scalar => vec![g.iter().sum()],
            Bcast::Row => {
                let mut out = vec![0.0; self.value(b).numel()];
                for row in g.chunks(m) {
                    out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                }
                out
            }
            Bcast::Col => g.chunks(m).take(rows).map(|r| r.iter().sum()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn vec_leaf(g: &mut Graph, v: &[f64], rg: bool) -> Var {
        g.leaf(Tensor::vector(v.to_vec()).unwrap().with_requires_grad(rg))
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[0.0, 0.0], false);
        let y = g.apply(OpKind::Softmax, &[x]).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[0.0], false);
        let y = g.apply(OpKind::Sigmoid, &[x]).unwrap();
        assert_eq!(g.value(y).data(), &[0.5]);
    }

    #[test]
    fn log_sum_exp_does_not_overflow() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1000.0, 1000.0], false);
        let y = g.apply(OpKind::LogSumExp, &[x]).unwrap();
        // max-shift by hand: 1000 + ln(e^0 + e^0)
        let expected = 1000.0 + (1.0f64 + 1.0).ln();
        assert_abs_diff_eq!(g.value(y).data()[0], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(y).data()[0], 1_000.693_147_180_56, epsilon = 1e-9);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0, 3.0], true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let w = vec_leaf(&mut g, &[0.0], true);
        let y = g.sigmoid(w);
        g.backward(y).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[0.25]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0], true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, 0.0], false);
        assert!(matches!(g.log(x), Err(Error::Domain { op: "log", .. })));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::full(&[2, 2], 1.0), false);
        let x = g.param(&Tensor::full(&[1, 2], 2.0), true);
        let y = g.matmul(x, a).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn slice_and_stack_round_trip() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap());
        let l = g.slice(x, Axis::Cols, 0, 1).unwrap();
        let r = g.slice(x, Axis::Cols, 1, 3).unwrap();
        let back = g.concat(&[l, r], Axis::Cols).unwrap();
        assert_eq!(g.value(back), g.value(x));
        let top = g.slice(x, Axis::Rows, 0, 1).unwrap();
        let bottom = g.slice(x, Axis::Rows, 1, 2).unwrap();
        let back = g.apply(OpKind::Stack(Axis::Rows), &[top, bottom]).unwrap();
        assert_eq!(g.value(back).data(), g.value(x).data());
    }

    #[test]
    fn gather_gradient_is_one_hot() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::from_rows(&[vec![0.1, 0.9]])
                .unwrap()
                .with_requires_grad(true),
        );
        let sel = g.gather(x, &[1]).unwrap();
        assert_eq!(g.value(sel).data(), &[0.9]);
        let s = g.sum(sel);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_rows(&[vec![3.0, -1.0, 0.5], vec![700.0, 0.0, -700.0]]).unwrap());
        let y = g.softmax(x);
        for r in 0..2 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-12);
        }
    }
}
