//! Reverse-mode autodiff over a recorded tape.
//!
//! Building a [`Graph`] only records operations. [`Graph::forward`] evaluates
//! them in order against a [`ParamStore`], and [`Graph::backward`] walks the
//! tape in reverse. Node ids are assigned in creation order, which is already
//! a topological order.

use super::tensor::{self, Tensor2D};
use super::{ParamId, ParamStore, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Param(ParamId),
    Input(Tensor2D),
    Embedding { table: Var, ids: Vec<u32> },
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    MeanPool { x: Var, len: usize },
    /// Mean over rows of `-log softmax(row)[target]`.
    SoftmaxCe { logits: Var, targets: Vec<usize> },
    /// Mean over entries of binary cross-entropy on sigmoid(logits).
    SigmoidBce { logits: Var, targets: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input(_) => "input",
            Op::Embedding { .. } => "embedding_lookup",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::Relu(_) => "relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::MeanPool { .. } => "mean_pool",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::SigmoidBce { .. } => "sigmoid_bce",
        }
    }
}

/// Gradient per parameter; `None` when no path reaches the parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub grads: Vec<Option<Tensor2D>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor2D> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Elementwise sum; used to accumulate over micro-batches.
    pub fn accumulate(&mut self, other: Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(&t),
                (None, Some(t)) => *mine = Some(t),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data.iter_mut().for_each(|v| *v *= c);
        }
    }
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    ops: Vec<Op>,
    values: Vec<Option<Tensor2D>>,
    param_vars: Vec<Option<Var>>,
    evaluated: bool,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            ops: Vec::new(),
            values: Vec::new(),
            param_vars: vec![None; store.len()],
            evaluated: false,
        }
    }

    fn push(&mut self, op: Op) -> Var {
        self.ops.push(op);
        self.values.push(None);
        self.evaluated = false;
        Var(self.ops.len() - 1)
    }

    /// Node for a stored parameter. Repeated calls share one node so that
    /// gradients accumulate in a single buffer.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor2D) -> Var {
        self.push(Op::Input(t))
    }

    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Var {
        self.push(Op::Embedding {
            table,
            ids: ids.to_vec(),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        self.push(Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.push(Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.push(Op::Sum(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.push(Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.push(Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.push(Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        self.push(Op::Softmax(x))
    }

    pub fn mean_pool(&mut self, x: Var, len: usize) -> Var {
        self.push(Op::MeanPool { x, len })
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        self.push(Op::SoftmaxCe {
            logits,
            targets: targets.to_vec(),
        })
    }

    pub fn sigmoid_bce(&mut self, logits: Var, targets: &[f64]) -> Var {
        self.push(Op::SigmoidBce {
            logits,
            targets: targets.to_vec(),
        })
    }

    /// Sum of several nodes of equal shape, folded left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Var {
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    fn val(&self, v: Var) -> &Tensor2D {
        match &self.ops[v.0] {
            Op::Param(id) => self.store.get(*id),
            Op::Input(t) => t,
            _ => self.values[v.0].as_ref().expect("operand evaluated first"),
        }
    }

    /// Value of a node after [`Graph::forward`].
    pub fn value(&self, v: Var) -> Result<&Tensor2D, TensorError> {
        if !self.evaluated {
            return Err(TensorError::GraphNotEvaluated);
        }
        Ok(self.val(v))
    }

    pub fn forward(&mut self) -> Result<(), TensorError> {
        for i in 0..self.ops.len() {
            if self.values[i].is_some() {
                continue;
            }
            let out = match &self.ops[i] {
                Op::Param(id) => {
                    self.store.get(*id).check_finite("param")?;
                    continue;
                }
                Op::Input(t) => {
                    t.check_finite("input")?;
                    continue;
                }
                Op::Embedding { table, ids } => tensor::embedding_lookup(self.val(*table), ids)?,
                Op::MatMul(a, b) => tensor::matmul(self.val(*a), self.val(*b))?,
                Op::AddBias(x, b) => tensor::add_bias(self.val(*x), self.val(*b))?,
                Op::Add(a, b) => tensor::add(self.val(*a), self.val(*b))?,
                Op::Mul(a, b) => {
                    let (a, b) = (self.val(*a), self.val(*b));
                    if a.shape() != b.shape() {
                        return Err(TensorError::ShapeMismatch {
                            op: "mul",
                            left: a.shape(),
                            right: b.shape(),
                        });
                    }
                    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
                    Tensor2D::from_vec(a.rows, a.cols, data)?
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    self.val(*x).map(|v| v * c)
                }
                Op::Sum(x) => Tensor2D::scalar(self.val(*x).data.iter().sum()),
                Op::Relu(x) => tensor::relu(self.val(*x)),
                Op::Tanh(x) => self.val(*x).map(f64::tanh),
                Op::Sigmoid(x) => tensor::sigmoid(self.val(*x)),
                Op::Softmax(x) => tensor::softmax(self.val(*x)),
                Op::MeanPool { x, len } => tensor::mean_pool(self.val(*x), *len)?,
                Op::SoftmaxCe { logits, targets } => {
                    let z = self.val(*logits);
                    check_targets(z, targets)?;
                    let total: f64 = targets
                        .iter()
                        .enumerate()
                        .map(|(r, &t)| tensor::log_sum_exp(z.row(r)) - z.get(r, t))
                        .sum();
                    Tensor2D::scalar(total / targets.len() as f64)
                }
                Op::SigmoidBce { logits, targets } => {
                    let z = self.val(*logits);
                    if z.data.len() != targets.len() || targets.is_empty() {
                        return Err(TensorError::ShapeMismatch {
                            op: "sigmoid_bce",
                            left: z.shape(),
                            right: (1, targets.len()),
                        });
                    }
                    let total: f64 = z
                        .data
                        .iter()
                        .zip(targets)
                        .map(|(&z, &y)| bce_with_logit(z, y))
                        .sum();
                    Tensor2D::scalar(total / targets.len() as f64)
                }
            };
            out.check_finite(self.ops[i].name())?;
            self.values[i] = Some(out);
        }
        self.evaluated = true;
        Ok(())
    }

    /// Gradients of the 1×1 node `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if !self.evaluated {
            return Err(TensorError::GraphNotEvaluated);
        }
        let shape = self.val(loss).shape();
        if shape != (1, 1) {
            return Err(TensorError::NotScalar(shape));
        }
        let mut grads: Vec<Option<Tensor2D>> = vec![None; self.ops.len()];
        grads[loss.0] = Some(Tensor2D::scalar(1.0));
        let mut out = Gradients {
            grads: vec![None; self.store.len()],
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            match &self.ops[i] {
                Op::Param(id) => out.grads[id.0] = Some(g),
                Op::Input(_) => {}
                Op::Embedding { table, ids } => {
                    let t = self.val(*table);
                    let slot = grads[table.0].get_or_insert_with(|| Tensor2D::zeros(t.rows, t.cols));
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, s) in slot.row_mut(id as usize).iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let da = tensor::matmul_nt(&g, self.val(*b))?;
                    let db = tensor::matmul_tn(self.val(*a), &g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddBias(x, b) => {
                    let mut db = Tensor2D::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, s) in db.data.iter_mut().zip(g.row(r)) {
                            *d += s;
                        }
                    }
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.val(*a), self.val(*b));
                    let da = zip_map(&g, vb, |g, y| g * y);
                    let db = zip_map(&g, va, |g, x| g * x);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(&mut grads, *x, g.map(|v| v * c));
                }
                Op::Sum(x) => {
                    let v = self.val(*x);
                    let s = g.data[0];
                    accumulate(&mut grads, *x, Tensor2D::from_vec(v.rows, v.cols, vec![s; v.data.len()])?);
                }
                Op::Relu(x) => {
                    let dx = zip_map(&g, self.val(*x), |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let y = self.val(Var(i));
                    accumulate(&mut grads, *x, zip_map(&g, y, |g, y| g * (1.0 - y * y)));
                }
                Op::Sigmoid(x) => {
                    let y = self.val(Var(i));
                    accumulate(&mut grads, *x, zip_map(&g, y, |g, y| g * y * (1.0 - y)));
                }
                Op::Softmax(x) => {
                    let y = self.val(Var(i));
                    let mut dx = Tensor2D::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for ((d, &gv), &yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *d = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanPool { x, len } => {
                    let v = self.val(*x);
                    let mut dx = Tensor2D::zeros(v.rows, v.cols);
                    if *len > 0 {
                        let n = *len as f64;
                        for r in 0..*len {
                            for (d, s) in dx.row_mut(r).iter_mut().zip(&g.data) {
                                *d = s / n;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SoftmaxCe { logits, targets } => {
                    let upstream = g.data[0] / targets.len() as f64;
                    let mut dz = tensor::softmax(self.val(*logits));
                    for (r, &t) in targets.iter().enumerate() {
                        let row = dz.row_mut(r);
                        row[t] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= upstream);
                    }
                    accumulate(&mut grads, *logits, dz);
                }
                Op::SigmoidBce { logits, targets } => {
                    let upstream = g.data[0] / targets.len() as f64;
                    let z = self.val(*logits);
                    let mut dz = z.clone();
                    for (d, &y) in dz.data.iter_mut().zip(targets) {
                        *d = (tensor::sigmoid_scalar(*d) - y) * upstream;
                    }
                    accumulate(&mut grads, *logits, dz);
                }
            }
        }
        Ok(out)
    }
}

fn check_targets(z: &Tensor2D, targets: &[usize]) -> Result<(), TensorError> {
    if targets.len() != z.rows || targets.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: z.shape(),
            right: (targets.len(), 1),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= z.cols) {
        return Err(TensorError::IndexOutOfRange {
            index: bad,
            rows: z.cols,
        });
    }
    Ok(())
}

/// `-(y log σ(z) + (1-y) log(1-σ(z)))` in a form that is finite for any `z`.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn zip_map(a: &Tensor2D, b: &Tensor2D, f: impl Fn(f64, f64) -> f64) -> Tensor2D {
    Tensor2D {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn accumulate(grads: &mut [Option<Tensor2D>], v: Var, g: Tensor2D) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}
