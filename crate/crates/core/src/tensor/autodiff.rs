use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    LogSoftmax(Var),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
    Gather(Var, Vec<usize>),
    StackCols(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Append-only computation record. Nodes are created in evaluation order, so
/// reverse creation order is a valid topological order for backward.
///
/// `backward` clears every gradient before filling, so calling it twice from
/// different roots never mixes contributions.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `[m×n] + [n]`, the bias added to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(row))?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_with(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).relu();
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).log_softmax_rows()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::LogSoftmax(a), rg))
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).sum_rows()?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SumRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Picks `a[i, idx[i]]` for each row `i` of an `[m×n]` matrix.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let (m, n) = match v.shape() {
            &[m, n] => (m, n),
            s => return Err(Error::Dimension(format!("gather: expected a matrix, got {s:?}"))),
        };
        if idx.len() != m {
            return Err(Error::Dimension(format!("gather: {} indices for {m} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(Error::Dimension(format!("gather: index {bad} out of range for {n} columns")));
        }
        let out = Tensor::vector(idx.iter().enumerate().map(|(i, &j)| v.at(i, j)).collect());
        let rg = self.rg(a);
        Ok(self.push(out, Op::Gather(a, idx.to_vec()), rg))
    }

    /// Stacks equal-length vectors as the columns of a `[len×k]` matrix.
    pub fn stack_cols(&mut self, cols: &[Var]) -> Result<Var> {
        let first = *cols
            .first()
            .ok_or_else(|| Error::Dimension("stack_cols: no columns".into()))?;
        let m = self.value(first).len();
        for &c in cols {
            let s = self.value(c).shape();
            if s != [m] {
                return Err(Error::Dimension(format!("stack_cols: column of shape {s:?}, expected [{m}]")));
            }
        }
        let k = cols.len();
        let mut data = vec![0.0; m * k];
        for (j, &c) in cols.iter().enumerate() {
            for (i, &v) in self.value(c).data().iter().enumerate() {
                data[i * k + j] = v;
            }
        }
        let rg = cols.iter().any(|&c| self.rg(c));
        Ok(self.push(Tensor::matrix(m, k, data)?, Op::StackCols(cols.to_vec()), rg))
    }

    /// Fills `grad` for every node reachable from `loss` that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let shape = self.value(loss).shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::full(&shape, 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &g)?;
            self.nodes[idx].grad = Some(g);
            for (v, cg) in contributions {
                self.accumulate(v, cg)?;
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(existing) => {
                *existing = existing.zip_with(&g, "grad accumulate", |a, b| a + b)?;
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let node = &self.nodes[idx];
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.matmul(&self.value(*b).transpose()?)?));
                }
                if self.rg(*b) {
                    out.push((*b, self.value(*a).transpose()?.matmul(g)?));
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*a) {
                    out.push((*a, g.clone()));
                }
                if self.rg(*row) {
                    let n = g.cols();
                    let mut col = vec![0.0; n];
                    for r in g.data().chunks_exact(n) {
                        for (c, &v) in col.iter_mut().zip(r) {
                            *c += v;
                        }
                    }
                    out.push((*row, Tensor::vector(col)));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.clone()));
                }
                if self.rg(*b) {
                    out.push((*b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.clone()));
                }
                if self.rg(*b) {
                    out.push((*b, g.scale(-1.0)));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    out.push((*a, g.zip_with(self.value(*b), "mul grad", |x, y| x * y)?));
                }
                if self.rg(*b) {
                    out.push((*b, g.zip_with(self.value(*a), "mul grad", |x, y| x * y)?));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.scale(*s))),
            Op::Relu(a) => {
                let ga = g.zip_with(self.value(*a), "relu grad", |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                out.push((*a, ga));
            }
            Op::Exp(a) => out.push((*a, g.zip_with(&node.value, "exp grad", |gv, y| gv * y)?)),
            Op::LogSoftmax(a) => {
                let n = g.cols();
                let mut ga = g.data().to_vec();
                for (grow, lrow) in ga.chunks_exact_mut(n).zip(node.value.data().chunks_exact(n)) {
                    let total: f64 = grow.iter().sum();
                    for (gv, &l) in grow.iter_mut().zip(lrow) {
                        *gv -= l.exp() * total;
                    }
                }
                out.push((*a, Tensor::new(g.shape().to_vec(), ga)?));
            }
            Op::SumRows(a) => {
                let shape = self.value(*a).shape().to_vec();
                let n = shape[1];
                let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
                out.push((*a, Tensor::new(shape, data)?));
            }
            Op::Sum(a) => out.push((*a, Tensor::full(self.value(*a).shape(), g.data()[0]))),
            Op::Mean(a) => {
                let v = self.value(*a);
                out.push((*a, Tensor::full(v.shape(), g.data()[0] / v.len() as f64)));
            }
            Op::Gather(a, idx) => {
                let mut ga = Tensor::zeros(self.value(*a).shape());
                let n = ga.cols();
                for (i, (&j, &gv)) in idx.iter().zip(g.data()).enumerate() {
                    ga.data_mut()[i * n + j] = gv;
                }
                out.push((*a, ga));
            }
            Op::StackCols(cols) => {
                let k = cols.len();
                for (j, &c) in cols.iter().enumerate() {
                    if self.rg(c) {
                        let col = g.data().iter().skip(j).step_by(k).copied().collect();
                        out.push((c, Tensor::vector(col)));
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Max relative error between the autodiff gradient of `f` at `theta` and a
/// central finite difference with the given step:
/// `max_j |analytic_j − numeric_j| / max(|analytic_j|, |numeric_j|, 1e-6)`,
/// i.e. an absolute error for entries below `1e-6`.
///
/// `f` receives a fresh tape and the leaf holding `theta`, and returns the
/// scalar loss node.
pub fn finite_diff_check<F>(f: F, theta: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Parameter(format!("finite-difference step must be > 0, got {step}")));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.constant(t.clone());
        let loss = f(&mut tape, leaf)?;
        let v = tape.value(loss).item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Numeric(format!("objective is not finite: {v}")))
        }
    };

    let mut tape = Tape::new();
    let leaf = tape.param(theta.clone());
    let loss = f(&mut tape, leaf)?;
    let v0 = tape.value(loss).item()?;
    if !v0.is_finite() {
        return Err(Error::Numeric(format!("objective is not finite: {v0}")));
    }
    tape.backward(loss)?;
    let analytic = tape
        .grad(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(theta.shape()));

    let mut worst: f64 = 0.0;
    let mut probe = theta.clone();
    for j in 0..theta.len() {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[j] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[j];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    Ok(worst)
}
