use std::str::FromStr;

use super::{shape_err, DiffError, Tensor};
use crate::geometry::{kernels, BOUNDARY_MARGIN};

type Result<T> = std::result::Result<T, DiffError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Square,
    Sqrt,
    Exp,
    Ln,
    Tanh,
    Atanh,
    Asinh,
    Relu,
}

impl FromStr for UnaryOp {
    type Err = DiffError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "neg" => Self::Neg,
            "square" => Self::Square,
            "sqrt" => Self::Sqrt,
            "exp" => Self::Exp,
            "ln" => Self::Ln,
            "tanh" => Self::Tanh,
            "atanh" => Self::Atanh,
            "asinh" => Self::Asinh,
            "relu" => Self::Relu,
            other => return Err(DiffError::UnknownPrimitive(other.to_string())),
        })
    }
}

impl UnaryOp {
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Neg => -x,
            Self::Square => x * x,
            Self::Sqrt => x.sqrt(),
            Self::Exp => x.exp(),
            Self::Ln => x.ln(),
            Self::Tanh => x.tanh(),
            Self::Atanh => x.atanh(),
            Self::Asinh => x.asinh(),
            Self::Relu => x.max(0.0),
        }
    }

    /// d out / d in, given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Self::Neg => -1.0,
            Self::Square => 2.0 * x,
            Self::Sqrt => 0.5 / y,
            Self::Exp => y,
            Self::Ln => 1.0 / x,
            Self::Tanh => 1.0 - y * y,
            Self::Atanh => 1.0 / (1.0 - x * x),
            Self::Asinh => 1.0 / (1.0 + x * x).sqrt(),
            Self::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGradient,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Unary(Var, UnaryOp),
    Linear { x: Var, w: Var, b: Option<Var> },
    ClipRows { x: Var, r: f64 },
    ExpMap0Rows { x: Var, c: f64 },
    MobiusAddRows { x: Var, y: Var, c: f64 },
    DistRows { x: Var, y: Var, c: f64 },
    HypMlr { z: Var, p: Var, a: Var, c: f64 },
    SoftmaxRows { x: Var, t: f64 },
    LogSoftmaxRows { x: Var, t: f64 },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    KlConsistency { student: Var, teacher: Var, t: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// The gradient for `v`, or zeros of its shape when nothing flowed into it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(shape_err(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn softmax_row(x: &[f64], t: f64, out: &mut [f64]) {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)) / t;
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v / t - max).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

fn log_softmax_row(x: &[f64], t: f64, out: &mut [f64]) {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v)) / t;
    let s: f64 = x.iter().map(|v| (v / t - max).exp()).sum();
    let lse = max + s.ln();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v / t - lse;
    }
}

/// Scalar pieces of one hyperbolic MLR logit, kept for the reverse pass.
struct MlrTerms {
    lambda_p: f64,
    norm_a: f64,
    gamma: f64,
    s: f64,
    logit: f64,
}

/// logit = λ_p ‖a‖ / √c · asinh( 2√c ⟨m, a⟩ / ((1 − c‖m‖²) ‖a‖) ),
/// m = (−p) ⊕_c z.
fn mlr_terms(z: &[f64], p: &[f64], a: &[f64], c: f64, neg_p: &mut [f64], m: &mut [f64]) -> MlrTerms {
    let sc = c.sqrt();
    for (n, v) in neg_p.iter_mut().zip(p) {
        *n = -v;
    }
    kernels::mobius_add(neg_p, z, c, m);
    let lambda_p = 2.0 / (1.0 - c * kernels::norm_sq(p));
    let norm_a = kernels::norm(a).max(f64::MIN_POSITIVE);
    let gamma = 1.0 - c * kernels::norm_sq(m);
    let s = 2.0 * sc * kernels::dot(m, a) / (gamma * norm_a);
    MlrTerms {
        lambda_p,
        norm_a,
        gamma,
        s,
        logit: lambda_p * norm_a / sc * s.asinh(),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(DiffError::ForeignVar(v.0))
        }
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Identity in the forward pass; blocks gradient flow into `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let value = self.value(x).clone();
        self.nodes.push(Node {
            op: Op::StopGradient,
            value,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), v, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), v, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), v, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let v = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect());
        Ok(self.push(Op::Scale(a, s), v, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        Ok(self.push(Op::Sum(a), v, &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        if t.is_empty() {
            return Err(shape_err("mean", "empty tensor"));
        }
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        Ok(self.push(Op::Mean(a), v, &[a]))
    }

    pub fn unary(&mut self, a: Var, op: UnaryOp) -> Result<Var> {
        self.check(a)?;
        let t = self.value(a);
        let v = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|x| op.apply(*x)).collect());
        Ok(self.push(Op::Unary(a, op), v, &[a]))
    }

    /// Elementwise primitive looked up by name (`tanh`, `atanh`, `asinh`,
    /// `relu`, `square`, `sqrt`, `exp`, `ln`, `neg`).
    pub fn apply(&mut self, name: &str, a: Var) -> Result<Var> {
        let op = name.parse()?;
        self.unary(a, op)
    }

    /// `x · wᵀ + b` for `x: [B, n]`, `w: [o, n]`, `b: [o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let (bs, n) = require_matrix("linear", self.value(x))?;
        let (o, wn) = require_matrix("linear", self.value(w))?;
        if wn != n {
            return Err(shape_err("linear", format!("input width {n} vs weight width {wn}")));
        }
        if let Some(b) = b {
            self.check(b)?;
            if self.value(b).shape() != [o] {
                return Err(shape_err("linear", format!("bias shape {:?}, expected [{o}]", self.value(b).shape())));
            }
        }
        let (xt, wt) = (self.value(x), self.value(w));
        let mut out = vec![0.0; bs * o];
        for i in 0..bs {
            let xr = xt.row(i);
            for j in 0..o {
                out[i * o + j] = kernels::dot(xr, wt.row(j));
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (v, bj) in row.iter_mut().zip(bd) {
                    *v += bj;
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Op::Linear { x, w, b }, Tensor::from_parts(vec![bs, o], out), &inputs))
    }

    /// Rescales each row to norm at most `r`.
    pub fn clip_rows(&mut self, x: Var, r: f64) -> Result<Var> {
        self.check(x)?;
        require_matrix("clip_rows", self.value(x))?;
        let mut v = self.value(x).clone();
        let cols = v.cols();
        for row in v.data_mut().chunks_mut(cols) {
            kernels::clip(row, r);
        }
        Ok(self.push(Op::ClipRows { x, r }, v, &[x]))
    }

    /// Row-wise exponential map at the origin.
    pub fn expmap0_rows(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check(x)?;
        require_matrix("expmap0_rows", self.value(x))?;
        let t = self.value(x);
        let cols = t.cols();
        let mut out = vec![0.0; t.len()];
        for (o, row) in out.chunks_mut(cols).zip(t.data().chunks(cols)) {
            kernels::expmap0(row, c, o);
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(Op::ExpMap0Rows { x, c }, v, &[x]))
    }

    /// Row-wise Möbius addition `x_i ⊕_c y_i`.
    pub fn mobius_add_rows(&mut self, x: Var, y: Var, c: f64) -> Result<Var> {
        self.same_shape("mobius_add_rows", x, y)?;
        require_matrix("mobius_add_rows", self.value(x))?;
        let (tx, ty) = (self.value(x), self.value(y));
        let cols = tx.cols();
        let mut out = vec![0.0; tx.len()];
        for ((o, a), b) in out.chunks_mut(cols).zip(tx.data().chunks(cols)).zip(ty.data().chunks(cols)) {
            kernels::mobius_add(a, b, c, o);
        }
        let v = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(Op::MobiusAddRows { x, y, c }, v, &[x, y]))
    }

    /// Row-wise geodesic distance, shape `[B]`.
    pub fn dist_rows(&mut self, x: Var, y: Var, c: f64) -> Result<Var> {
        self.same_shape("dist_rows", x, y)?;
        let (b, _) = require_matrix("dist_rows", self.value(x))?;
        let (tx, ty) = (self.value(x), self.value(y));
        let out = (0..b).map(|i| kernels::dist(tx.row(i), ty.row(i), c)).collect();
        Ok(self.push(Op::DistRows { x, y, c }, Tensor::from_parts(vec![b], out), &[x, y]))
    }

    /// Hyperbolic multiclass logistic regression: `z: [B, d]`, offsets
    /// `p: [K, d]`, normals `a: [K, d]`, output `[B, K]`.
    pub fn hyp_mlr(&mut self, z: Var, p: Var, a: Var, c: f64) -> Result<Var> {
        self.check(z)?;
        self.same_shape("hyp_mlr", p, a)?;
        let (bs, d) = require_matrix("hyp_mlr", self.value(z))?;
        let (k, pd) = require_matrix("hyp_mlr", self.value(p))?;
        if pd != d {
            return Err(shape_err("hyp_mlr", format!("embedding width {d} vs class parameter width {pd}")));
        }
        let (tz, tp, ta) = (self.value(z), self.value(p), self.value(a));
        let mut neg_p = vec![0.0; d];
        let mut m = vec![0.0; d];
        let mut out = vec![0.0; bs * k];
        for i in 0..bs {
            for j in 0..k {
                out[i * k + j] = mlr_terms(tz.row(i), tp.row(j), ta.row(j), c, &mut neg_p, &mut m).logit;
            }
        }
        Ok(self.push(Op::HypMlr { z, p, a, c }, Tensor::from_parts(vec![bs, k], out), &[z, p, a]))
    }

    /// Row-wise `softmax(x / t)`.
    pub fn softmax_rows(&mut self, x: Var, t: f64) -> Result<Var> {
        self.check(x)?;
        require_matrix("softmax_rows", self.value(x))?;
        let tx = self.value(x);
        let cols = tx.cols();
        let mut out = vec![0.0; tx.len()];
        for (o, row) in out.chunks_mut(cols).zip(tx.data().chunks(cols)) {
            softmax_row(row, t, o);
        }
        let v = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(Op::SoftmaxRows { x, t }, v, &[x]))
    }

    /// Row-wise `log softmax(x / t)`.
    pub fn log_softmax_rows(&mut self, x: Var, t: f64) -> Result<Var> {
        self.check(x)?;
        require_matrix("log_softmax_rows", self.value(x))?;
        let tx = self.value(x);
        let cols = tx.cols();
        let mut out = vec![0.0; tx.len()];
        for (o, row) in out.chunks_mut(cols).zip(tx.data().chunks(cols)) {
            log_softmax_row(row, t, o);
        }
        let v = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(Op::LogSoftmaxRows { x, t }, v, &[x]))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let (bs, k) = require_matrix("cross_entropy", self.value(logits))?;
        if labels.len() != bs {
            return Err(shape_err("cross_entropy", format!("{} labels for {bs} rows", labels.len())));
        }
        if bs == 0 {
            return Err(shape_err("cross_entropy", "empty batch"));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(DiffError::Label { label, classes: k });
        }
        let t = self.value(logits);
        let mut ls = vec![0.0; k];
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            log_softmax_row(t.row(i), 1.0, &mut ls);
            total -= ls[l];
        }
        let v = Tensor::scalar(total / bs as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            v,
            &[logits],
        ))
    }

    /// `t² · KL(σ(teacher; t) ‖ σ(student; t))`, averaged over the batch.
    /// Gradient flows into the teacher unless it was passed through
    /// [`Tape::stop_gradient`].
    pub fn kl_consistency(&mut self, student: Var, teacher: Var, t: f64) -> Result<Var> {
        self.same_shape("kl_consistency", student, teacher)?;
        let (bs, k) = require_matrix("kl_consistency", self.value(student))?;
        if bs == 0 {
            return Err(shape_err("kl_consistency", "empty batch"));
        }
        let (ts, tt) = (self.value(student), self.value(teacher));
        let mut lp = vec![0.0; k];
        let mut lq = vec![0.0; k];
        let mut total = 0.0;
        for i in 0..bs {
            log_softmax_row(ts.row(i), t, &mut lp);
            log_softmax_row(tt.row(i), t, &mut lq);
            total += lq.iter().zip(&lp).map(|(q, p)| q.exp() * (q - p)).sum::<f64>();
        }
        let v = Tensor::scalar(t * t * total / bs as f64);
        Ok(self.push(Op::KlConsistency { student, teacher, t }, v, &[student, teacher]))
    }

    /// Reverse pass from `output` seeded with `seed` (same shape as the
    /// output). Each recorded node is visited once, in reverse order.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        self.check(output)?;
        if seed.shape() != self.value(output).shape() {
            return Err(shape_err(
                "backward",
                format!("seed shape {:?} vs output shape {:?}", seed.shape(), self.value(output).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed.clone());
        }
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match *op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                let neg = g.data().iter().map(|v| -v).collect();
                self.accumulate(grads, b, Tensor::from_parts(g.shape().to_vec(), neg));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let ga = g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let gb = g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                self.accumulate(grads, a, Tensor::from_parts(g.shape().to_vec(), ga));
                self.accumulate(grads, b, Tensor::from_parts(g.shape().to_vec(), gb));
            }
            Op::Scale(a, s) => {
                let ga = g.data().iter().map(|v| v * s).collect();
                self.accumulate(grads, a, Tensor::from_parts(g.shape().to_vec(), ga));
            }
            Op::Sum(a) => {
                let shape = self.value(a).shape();
                self.accumulate(grads, a, Tensor::filled(shape, g.item()));
            }
            Op::Mean(a) => {
                let t = self.value(a);
                self.accumulate(grads, a, Tensor::filled(t.shape(), g.item() / t.len() as f64));
            }
            Op::Unary(a, u) => {
                let t = self.value(a);
                let ga = g
                    .data()
                    .iter()
                    .zip(t.data())
                    .zip(out.data())
                    .map(|((g, x), y)| g * u.derivative(*x, *y))
                    .collect();
                self.accumulate(grads, a, Tensor::from_parts(t.shape().to_vec(), ga));
            }
            Op::Linear { x, w, b } => self.linear_backward(x, w, b, g, grads),
            Op::ClipRows { x, r } => {
                let t = self.value(x);
                let cols = t.cols();
                let mut gx = g.clone();
                for (gr, row) in gx.data_mut().chunks_mut(cols).zip(t.data().chunks(cols)) {
                    let n = kernels::norm(row);
                    if n > r {
                        radial_rescale_backward(row, n, r / n, gr);
                    }
                }
                self.accumulate(grads, x, gx);
            }
            Op::ExpMap0Rows { x, c } => {
                let t = self.value(x);
                let cols = t.cols();
                let sc = c.sqrt();
                let mut gx = g.clone();
                for (gr, row) in gx.data_mut().chunks_mut(cols).zip(t.data().chunks(cols)) {
                    expmap0_backward(row, sc, gr);
                }
                self.accumulate(grads, x, gx);
            }
            Op::MobiusAddRows { x, y, c } => {
                let (tx, ty) = (self.value(x), self.value(y));
                let cols = tx.cols();
                let mut gx = vec![0.0; tx.len()];
                let mut gy = vec![0.0; ty.len()];
                for i in 0..tx.rows() {
                    let s = i * cols..(i + 1) * cols;
                    kernels::mobius_add_backward(
                        tx.row(i),
                        ty.row(i),
                        c,
                        out.row(i),
                        g.row(i),
                        &mut gx[s.clone()],
                        &mut gy[s],
                    );
                }
                self.accumulate(grads, x, Tensor::from_parts(tx.shape().to_vec(), gx));
                self.accumulate(grads, y, Tensor::from_parts(ty.shape().to_vec(), gy));
            }
            Op::DistRows { x, y, c } => {
                let (tx, ty) = (self.value(x), self.value(y));
                let cols = tx.cols();
                let sc = c.sqrt();
                let mut gx = vec![0.0; tx.len()];
                let mut gy = vec![0.0; ty.len()];
                let mut neg = vec![0.0; cols];
                let mut m = vec![0.0; cols];
                let mut gm = vec![0.0; cols];
                let mut gneg = vec![0.0; cols];
                for i in 0..tx.rows() {
                    for (n, v) in neg.iter_mut().zip(tx.row(i)) {
                        *n = -v;
                    }
                    kernels::mobius_add(&neg, ty.row(i), c, &mut m);
                    let mn = kernels::norm(&m);
                    if mn == 0.0 || sc * mn >= BOUNDARY_MARGIN {
                        continue;
                    }
                    let coef = g.data()[i] * 2.0 / (1.0 - c * mn * mn) / mn;
                    for (gmj, mj) in gm.iter_mut().zip(&m) {
                        *gmj = coef * mj;
                    }
                    gneg.iter_mut().for_each(|v| *v = 0.0);
                    let s = i * cols..(i + 1) * cols;
                    kernels::mobius_add_backward(&neg, ty.row(i), c, &m, &gm, &mut gneg, &mut gy[s.clone()]);
                    for (gxj, gn) in gx[s].iter_mut().zip(&gneg) {
                        *gxj -= gn;
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(tx.shape().to_vec(), gx));
                self.accumulate(grads, y, Tensor::from_parts(ty.shape().to_vec(), gy));
            }
            Op::HypMlr { z, p, a, c } => self.mlr_backward(z, p, a, c, g, grads),
            Op::SoftmaxRows { x, t } => {
                let cols = out.cols();
                let mut gx = vec![0.0; out.len()];
                for i in 0..out.rows() {
                    let (y, gr) = (out.row(i), g.row(i));
                    let inner = kernels::dot(y, gr);
                    for j in 0..cols {
                        gx[i * cols + j] = y[j] * (gr[j] - inner) / t;
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::LogSoftmaxRows { x, t } => {
                let cols = out.cols();
                let mut gx = vec![0.0; out.len()];
                for i in 0..out.rows() {
                    let (y, gr) = (out.row(i), g.row(i));
                    let total: f64 = gr.iter().sum();
                    for j in 0..cols {
                        gx[i * cols + j] = (gr[j] - y[j].exp() * total) / t;
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(out.shape().to_vec(), gx));
            }
            Op::CrossEntropy { logits, ref labels } => {
                let t = self.value(logits);
                let (bs, k) = (t.rows(), t.cols());
                let scale = g.item() / bs as f64;
                let mut gx = vec![0.0; t.len()];
                for (i, &l) in labels.iter().enumerate() {
                    let row = &mut gx[i * k..(i + 1) * k];
                    softmax_row(t.row(i), 1.0, row);
                    row[l] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, logits, Tensor::from_parts(t.shape().to_vec(), gx));
            }
            Op::KlConsistency { student, teacher, t } => {
                let (ts, tt) = (self.value(student), self.value(teacher));
                let (bs, k) = (ts.rows(), ts.cols());
                let scale = g.item() * t / bs as f64;
                let mut gs = vec![0.0; ts.len()];
                let mut gt = vec![0.0; tt.len()];
                let mut lp = vec![0.0; k];
                let mut lq = vec![0.0; k];
                for i in 0..bs {
                    log_softmax_row(ts.row(i), t, &mut lp);
                    log_softmax_row(tt.row(i), t, &mut lq);
                    let kl: f64 = lq.iter().zip(&lp).map(|(q, p)| q.exp() * (q - p)).sum();
                    for j in 0..k {
                        let (p, q) = (lp[j].exp(), lq[j].exp());
                        gs[i * k + j] = scale * (p - q);
                        gt[i * k + j] = scale * q * (lq[j] - lp[j] - kl);
                    }
                }
                self.accumulate(grads, student, Tensor::from_parts(ts.shape().to_vec(), gs));
                self.accumulate(grads, teacher, Tensor::from_parts(tt.shape().to_vec(), gt));
            }
        }
    }

    fn linear_backward(&self, x: Var, w: Var, b: Option<Var>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let (bs, n) = (tx.rows(), tx.cols());
        let o = tw.rows();
        if self.nodes[x.0].requires_grad {
            let mut gx = vec![0.0; bs * n];
            for i in 0..bs {
                let gr = g.row(i);
                let dst = &mut gx[i * n..(i + 1) * n];
                for (j, gij) in gr.iter().enumerate() {
                    for (d, wv) in dst.iter_mut().zip(tw.row(j)) {
                        *d += gij * wv;
                    }
                }
            }
            self.accumulate(grads, x, Tensor::from_parts(vec![bs, n], gx));
        }
        if self.nodes[w.0].requires_grad {
            let mut gw = vec![0.0; o * n];
            for i in 0..bs {
                let xr = tx.row(i);
                for (j, gij) in g.row(i).iter().enumerate() {
                    for (d, xv) in gw[j * n..(j + 1) * n].iter_mut().zip(xr) {
                        *d += gij * xv;
                    }
                }
            }
            self.accumulate(grads, w, Tensor::from_parts(vec![o, n], gw));
        }
        if let Some(b) = b {
            let mut gb = vec![0.0; o];
            for i in 0..bs {
                for (d, gij) in gb.iter_mut().zip(g.row(i)) {
                    *d += gij;
                }
            }
            self.accumulate(grads, b, Tensor::from_parts(vec![o], gb));
        }
    }

    fn mlr_backward(&self, z: Var, p: Var, a: Var, c: f64, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (tz, tp, ta) = (self.value(z), self.value(p), self.value(a));
        let (bs, d) = (tz.rows(), tz.cols());
        let k = tp.rows();
        let sc = c.sqrt();
        let mut gz = vec![0.0; bs * d];
        let mut gp = vec![0.0; k * d];
        let mut ga = vec![0.0; k * d];
        let mut neg_p = vec![0.0; d];
        let mut m = vec![0.0; d];
        let mut gm = vec![0.0; d];
        let mut gu = vec![0.0; d];
        for i in 0..bs {
            let zr = tz.row(i);
            for j in 0..k {
                let gij = g.data()[i * k + j];
                if gij == 0.0 {
                    continue;
                }
                let (pr, ar) = (tp.row(j), ta.row(j));
                let t = mlr_terms(zr, pr, ar, c, &mut neg_p, &mut m);
                let asinh_s = t.s.asinh();
                let gs = gij * t.lambda_p * t.norm_a / sc / (1.0 + t.s * t.s).sqrt();
                let g_ma = gs * 2.0 * sc / (t.gamma * t.norm_a);
                let g_mm = gs * t.s * c / t.gamma;
                let g_na = gij * t.lambda_p / sc * asinh_s - gs * t.s / t.norm_a;
                let g_lambda = gij * t.norm_a / sc * asinh_s;
                for q in 0..d {
                    gm[q] = g_ma * ar[q] + 2.0 * g_mm * m[q];
                    ga[j * d + q] += g_ma * m[q] + g_na * ar[q] / t.norm_a;
                }
                // λ_p = 2 / (1 − c‖p‖²)
                let dl = g_lambda * c * t.lambda_p * t.lambda_p;
                gu.iter_mut().for_each(|v| *v = 0.0);
                kernels::mobius_add_backward(&neg_p, zr, c, &m, &gm, &mut gu, &mut gz[i * d..(i + 1) * d]);
                for q in 0..d {
                    gp[j * d + q] += dl * pr[q] - gu[q];
                }
            }
        }
        self.accumulate(grads, z, Tensor::from_parts(tz.shape().to_vec(), gz));
        self.accumulate(grads, p, Tensor::from_parts(tp.shape().to_vec(), gp));
        self.accumulate(grads, a, Tensor::from_parts(ta.shape().to_vec(), ga));
    }
}

/// Backward of `y = s · x` with `s = k / ‖x‖`: replaces `g` with
/// `s (g − ⟨g, x̂⟩ x̂)`.
fn radial_rescale_backward(x: &[f64], n: f64, s: f64, g: &mut [f64]) {
    let proj = kernels::dot(g, x) / (n * n);
    for (gi, xi) in g.iter_mut().zip(x) {
        *gi = s * (*gi - proj * xi);
    }
}

/// Backward of `y = f(‖x‖) x`, `f(n) = tanh(√c n) / (√c n)`.
fn expmap0_backward(x: &[f64], sc: f64, g: &mut [f64]) {
    let n = kernels::norm(x);
    let t = sc * n;
    if t.tanh() > BOUNDARY_MARGIN {
        radial_rescale_backward(x, n, BOUNDARY_MARGIN / t, g);
        return;
    }
    // f and f'(n)/n, with a series expansion near the origin.
    let (f, fp_over_n) = if t < 1e-3 {
        let t2 = t * t;
        (1.0 - t2 / 3.0 + 2.0 * t2 * t2 / 15.0, sc * sc * (-2.0 / 3.0 + 8.0 * t2 / 15.0))
    } else {
        let th = t.tanh();
        let sech2 = 1.0 - th * th;
        (th / t, (sech2 * t - th) / (sc * n * n * n))
    };
    let inner = kernels::dot(g, x);
    for (gi, xi) in g.iter_mut().zip(x) {
        *gi = f * *gi + fp_over_n * inner * xi;
    }
}

/// Result of [`forward`]: the tape, the input handles and the output.
#[derive(Debug, Clone)]
pub struct Recording {
    pub tape: Tape,
    pub inputs: Vec<Var>,
    pub output: Var,
}

impl Recording {
    pub fn value(&self) -> &Tensor {
        self.tape.value(self.output)
    }

    /// Gradients with respect to each input, in input order.
    pub fn backward(&self, seed: &Tensor) -> Result<Vec<Tensor>> {
        let grads = self.tape.backward(self.output, seed)?;
        Ok(self.inputs.iter().map(|v| grads.wrt(*v)).collect())
    }
}

/// Records `graph` applied to `inputs` (all marked trainable).
pub fn forward<F>(inputs: &[Tensor], graph: F) -> Result<Recording>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let output = graph(&mut tape, &vars)?;
    Ok(Recording {
        tape,
        inputs: vars,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_square() {
        let x = Tensor::scalar(3.0);
        let rec = forward(std::slice::from_ref(&x), |_, v| Ok(v[0])).unwrap();
        assert_eq!(rec.value(), &x);
        assert_eq!(rec.backward(&Tensor::scalar(1.0)).unwrap()[0].item(), 1.0);

        let rec = forward(&[x], |t, v| t.unary(v[0], UnaryOp::Square)).unwrap();
        assert_eq!(rec.value().item(), 9.0);
        assert_eq!(rec.backward(&Tensor::scalar(1.0)).unwrap()[0].item(), 6.0);
    }

    #[test]
    fn unknown_primitive_is_rejected() {
        let err = forward(&[Tensor::scalar(1.0)], |t, v| t.apply("softplus", v[0])).unwrap_err();
        assert_eq!(err, DiffError::UnknownPrimitive("softplus".into()));
    }

    #[test]
    fn seed_shape_is_checked() {
        let rec = forward(&[Tensor::vector(vec![1.0, 2.0]).unwrap()], |_, v| Ok(v[0])).unwrap();
        assert!(rec.backward(&Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn stop_gradient_yields_zero() {
        let rec = forward(&[Tensor::scalar(2.0), Tensor::scalar(5.0)], |t, v| {
            let d = t.stop_gradient(v[1])?;
            t.mul(v[0], d)
        })
        .unwrap();
        let g = rec.backward(&Tensor::scalar(1.0)).unwrap();
        assert_eq!(g[0].item(), 5.0);
        assert_eq!(g[1].item(), 0.0);
    }

    #[test]
    fn shared_input_accumulates() {
        // f(x) = x·x + x at 3 → 2x + 1 = 7
        let rec = forward(&[Tensor::scalar(3.0)], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.add(sq, v[0])
        })
        .unwrap();
        assert_eq!(rec.backward(&Tensor::scalar(1.0)).unwrap()[0].item(), 7.0);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::matrix(1, 2, vec![0.0, 1.0]).unwrap());
        assert_eq!(
            t.cross_entropy(l, &[2]).unwrap_err(),
            DiffError::Label { label: 2, classes: 2 }
        );
    }

    #[test]
    fn linear_checks_widths() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 3]));
        let w = t.param(Tensor::zeros(&[4, 2]));
        assert!(matches!(t.linear(x, w, None), Err(DiffError::Shape { .. })));
    }
}
