use std::collections::HashMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Negative-side slope of the leaky rectifier.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise single-input functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Identity,
    Sigmoid,
    Tanh,
    Relu,
    LeakyRelu,
    Exp,
    Square,
    Neg,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Identity => x,
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
            Unary::Neg => -x,
        }
    }

    /// Derivative given the input `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Identity => 1.0,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Unary::Exp => y,
            Unary::Square => 2.0 * x,
            Unary::Neg => -1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Identity => "identity",
            Unary::Sigmoid => "sigmoid",
            Unary::Tanh => "tanh",
            Unary::Relu => "relu",
            Unary::LeakyRelu => "leaky_relu",
            Unary::Exp => "exp",
            Unary::Square => "square",
            Unary::Neg => "neg",
        }
    }
}

/// Numerically stable logistic function.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
    },
    Unary {
        kind: Unary,
        a: Var,
    },
    Affine {
        a: Var,
        scale: f64,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
    },
    TransposeLast2 {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    MeanAxis1 {
        a: Var,
    },
    SelectTime {
        a: Var,
        t: usize,
    },
    StackTime {
        parts: Vec<Var>,
    },
    SelectLast {
        a: Var,
        index: usize,
    },
    ConcatLast {
        parts: Vec<Var>,
    },
    SoftmaxLast {
        a: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad_left: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    AdditiveScores {
        q: Var,
        k: Var,
        bias: Option<Var>,
        w: Var,
    },
    RowNormalize {
        a: Var,
        norms: Vec<f64>,
    },
    StraightThrough {
        a: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind: Binary::Add, .. } => "add",
            Op::Binary { kind: Binary::Sub, .. } => "sub",
            Op::Binary { kind: Binary::Mul, .. } => "mul",
            Op::Unary { kind, .. } => kind.name(),
            Op::Affine { .. } => "affine",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::TransposeLast2 { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MeanAxis1 { .. } => "mean_time",
            Op::SelectTime { .. } => "select_time",
            Op::StackTime { .. } => "stack_time",
            Op::SelectLast { .. } => "select_last",
            Op::ConcatLast { .. } => "concat_last",
            Op::SoftmaxLast { .. } => "softmax",
            Op::Conv1d { .. } => "conv1d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::AdditiveScores { .. } => "additive_scores",
            Op::RowNormalize { .. } => "row_normalize",
            Op::StraightThrough { .. } => "straight_through",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a computation.
///
/// Nodes are stored in execution order, so every node's inputs precede it
/// and one reverse sweep visits each node exactly once. A tape serves one
/// forward/backward pass; build a fresh one per step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient of the last [`Tape::backward`] call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t.with_requires_grad(true), Op::Leaf, true)
    }

    /// Records a trainable parameter. Repeated calls for the same id return
    /// the same node so that all uses accumulate into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let mut t = store.get(id).clone();
        t.zero_grad();
        let v = self.leaf(t);
        self.params.insert(id, v);
        v
    }

    /// Makes later `param(store, id)` calls return `v` instead of a fresh
    /// leaf. Lets a caller substitute its own leaf for a stored parameter.
    pub fn bind_param(&mut self, id: ParamId, v: Var) -> Result<()> {
        self.check_var(v)?;
        if self.params.contains_key(&id) {
            return Err(Error::State(format!("parameter {} is already on the tape", id.index())));
        }
        self.params.insert(id, v);
        Ok(())
    }

    /// Node recorded for `id`, if the forward pass used it.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    /// Adds the gradients of every recorded parameter into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        let mut ids: Vec<_> = self.params.iter().collect();
        ids.sort();
        for (&id, &v) in ids {
            if let Some(g) = self.grad(v) {
                store.get_mut(id).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if let Some(pos) = value.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value at element {pos} (node {})",
                op.name(),
                self.nodes.len()
            )));
        }
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::MatMul { a, b } | Op::BatchMatMul { a, b } => {
                vec![*a, *b]
            }
            Op::Unary { a, .. }
            | Op::Affine { a, .. }
            | Op::TransposeLast2 { a }
            | Op::Reshape { a }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::MeanAxis1 { a }
            | Op::SelectTime { a, .. }
            | Op::SelectLast { a, .. }
            | Op::SoftmaxLast { a }
            | Op::RowNormalize { a, .. }
            | Op::StraightThrough { a } => vec![*a],
            Op::StackTime { parts } | Op::ConcatLast { parts } => parts.clone(),
            Op::Conv1d { x, w, b, .. } => vec![*x, *w, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::AdditiveScores { q, k, bias, w } => {
                let mut v = vec![*q, *k, *w];
                v.extend(bias.iter().copied());
                v
            }
        }
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("variable {} is not on this tape", v.0)));
        }
        Ok(())
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sb, sa) && sb != [1] {
            return Err(Error::dim(format!(
                "{kind:?}: shapes {sa:?} and {sb:?} are not equal and the second is not broadcastable along leading axes"
            )));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let m = db.len();
        let out: Vec<f64> = da
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = db[i % m];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                }
            })
            .collect();
        let t = Tensor::new(sa.to_vec(), out)?;
        self.push(t, Op::Binary { kind, a, b })
    }

    /// `a + b`; `b` may omit leading axes of `a`, or be a one-element
    /// tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let x = self.value(a);
        let out = x.data().iter().map(|&v| kind.apply(v)).collect();
        let t = Tensor::new(x.shape().to_vec(), out)?;
        self.push(t, Op::Unary { kind, a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::LeakyRelu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Square, a)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.check_var(a)?;
        let x = self.value(a);
        let out = x.data().iter().map(|&v| scale * v + shift).collect();
        let t = Tensor::new(x.shape().to_vec(), out)?;
        self.push(t, Op::Affine { a, scale })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.affine(a, c, 0.0)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -1.0, 1.0)
    }

    // ---- linear algebra ----------------------------------------------

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: cannot multiply {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        self.push(t, Op::MatMul { a, b })
    }

    /// `[B×m×k] · [B×k×n] → [B×m×n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim(format!("batch_matmul: cannot multiply {sa:?} by {sb:?}")));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            mm(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let t = Tensor::new(vec![bs, m, n], out)?;
        self.push(t, Op::BatchMatMul { a, b })
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::dim(format!("transpose needs rank ≥ 2, got {s:?}")));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let data = transpose_last2(self.value(a).data(), m, n);
        let mut shape = s;
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let t = Tensor::new(shape, data)?;
        self.push(t, Op::TransposeLast2 { a })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_var(a)?;
        let t = self.value(a).reshape(shape)?;
        self.push(t, Op::Reshape { a })
    }

    // ---- reductions and restructuring ----------------------------------

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let x = self.value(a);
        let s = x.sum() / x.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean { a })
    }

    /// Mean over axis 1 of a `[B×T×F]` tensor.
    pub fn mean_time(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let (b, t, f) = dims3(self.shape(a), "mean_time")?;
        let x = self.value(a).data();
        let mut out = vec![0.0; b * f];
        for i in 0..b {
            for s in 0..t {
                let row = &x[(i * t + s) * f..(i * t + s + 1) * f];
                for (o, v) in out[i * f..(i + 1) * f].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= t as f64);
        self.push(Tensor::new(vec![b, f], out)?, Op::MeanAxis1 { a })
    }

    /// Timestep `t` of a `[B×T×F]` tensor as `[B×F]`.
    pub fn select_time(&mut self, a: Var, t: usize) -> Result<Var> {
        self.check_var(a)?;
        let (b, len, f) = dims3(self.shape(a), "select_time")?;
        if t >= len {
            return Err(Error::dim(format!("timestep {t} out of range for length {len}")));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(b * f);
        for i in 0..b {
            out.extend_from_slice(&x[(i * len + t) * f..(i * len + t + 1) * f]);
        }
        self.push(Tensor::new(vec![b, f], out)?, Op::SelectTime { a, t })
    }

    /// Stacks `[B×F]` steps into `[B×T×F]`.
    pub fn stack_time(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("stack_time of zero steps".into()))?;
        for &p in parts {
            self.check_var(p)?;
        }
        let s0 = self.shape(first).to_vec();
        if s0.len() != 2 || parts.iter().any(|&p| self.shape(p) != s0.as_slice()) {
            return Err(Error::dim("stack_time needs equal [B×F] steps"));
        }
        let (b, f, t) = (s0[0], s0[1], parts.len());
        let mut out = vec![0.0; b * t * f];
        for (s, &p) in parts.iter().enumerate() {
            let x = self.value(p).data();
            for i in 0..b {
                out[(i * t + s) * f..(i * t + s + 1) * f].copy_from_slice(&x[i * f..(i + 1) * f]);
            }
        }
        self.push(
            Tensor::new(vec![b, t, f], out)?,
            Op::StackTime { parts: parts.to_vec() },
        )
    }

    /// Column `index` of the last axis, kept as an axis of extent 1.
    pub fn select_last(&mut self, a: Var, index: usize) -> Result<Var> {
        self.check_var(a)?;
        let s = self.shape(a).to_vec();
        let f = *s.last().expect("rank ≥ 1");
        if index >= f {
            return Err(Error::dim(format!("column {index} out of range for {s:?}")));
        }
        let out: Vec<f64> = self.value(a).data().chunks(f).map(|row| row[index]).collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = 1;
        self.push(Tensor::new(shape, out)?, Op::SelectLast { a, index })
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        for &p in parts {
            self.check_var(p)?;
        }
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::dim(format!(
                    "concat: leading axes {:?} and {:?} differ",
                    lead,
                    &s[..s.len().saturating_sub(1)]
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(Tensor::new(shape, out)?, Op::ConcatLast { parts: parts.to_vec() })
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let x = self.value(a);
        let f = *x.shape().last().unwrap();
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(f) {
            out.extend(softmax_row(row));
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        self.push(t, Op::SoftmaxLast { a })
    }

    /// Divides each last-axis row by its Euclidean norm.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let x = self.value(a);
        let f = *x.shape().last().unwrap();
        let mut out = Vec::with_capacity(x.numel());
        let mut norms = Vec::with_capacity(x.numel() / f);
        for row in x.data().chunks(f) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Numeric("cannot normalize a zero-norm vector".into()));
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        self.push(t, Op::RowNormalize { a, norms })
    }

    /// One-hot argmax over the last axis in the forward pass; the backward
    /// pass treats the op as identity, so gradients reach the soft input.
    pub fn straight_through_argmax(&mut self, a: Var) -> Result<Var> {
        self.check_var(a)?;
        let x = self.value(a);
        let f = *x.shape().last().unwrap();
        let mut out = vec![0.0; x.numel()];
        for (r, row) in x.data().chunks(f).enumerate() {
            out[r * f + argmax(row)] = 1.0;
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        self.push(t, Op::StraightThrough { a })
    }

    // ---- fused layers -------------------------------------------------

    /// Channels-last 1-D cross-correlation.
    ///
    /// `x: [B×L×C_in]`, `w: [C_out×C_in×K]`, `b: [C_out]`. `pad_left` zeros
    /// are virtually prepended; `out_len` fixes the output length (the
    /// caller derives it from the padding mode).
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad_left: usize, out_len: usize) -> Result<Var> {
        for v in [x, w, b] {
            self.check_var(v)?;
        }
        let (bs, len, cin) = dims3(self.shape(x), "conv1d input")?;
        let (cout, wcin, k) = dims3(self.shape(w), "conv1d kernel")?;
        if wcin != cin {
            return Err(Error::dim(format!(
                "conv1d: kernel expects {wcin} input channels, input has {cin}"
            )));
        }
        if self.shape(b) != [cout] {
            return Err(Error::dim(format!(
                "conv1d: bias shape {:?}, expected [{cout}]",
                self.shape(b)
            )));
        }
        if stride == 0 || out_len == 0 {
            return Err(Error::dim("conv1d: stride and output length must be positive"));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; bs * out_len * cout];
        for n in 0..bs {
            for o in 0..out_len {
                let dst = &mut out[(n * out_len + o) * cout..(n * out_len + o + 1) * cout];
                dst.copy_from_slice(bd);
                for kk in 0..k {
                    let pos = (o * stride + kk) as isize - pad_left as isize;
                    if pos < 0 || pos as usize >= len {
                        continue;
                    }
                    let src = &xd[(n * len + pos as usize) * cin..(n * len + pos as usize + 1) * cin];
                    for (co, d) in dst.iter_mut().enumerate() {
                        let wrow = &wd[co * cin * k..(co + 1) * cin * k];
                        let mut acc = 0.0;
                        for (ci, &s) in src.iter().enumerate() {
                            acc += wrow[ci * k + kk] * s;
                        }
                        *d += acc;
                    }
                }
            }
        }
        let t = Tensor::new(vec![bs, out_len, cout], out)?;
        self.push(
            t,
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
            },
        )
    }

    /// Batch normalization over every axis except the last, using the
    /// current batch statistics. Returns the output plus the per-feature
    /// batch mean and (biased) variance.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        for v in [x, gamma, beta] {
            self.check_var(v)?;
        }
        let s = self.shape(x).to_vec();
        let f = *s.last().unwrap();
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(Error::dim(format!(
                "batch_norm: gamma/beta must be [{f}] for input {s:?}"
            )));
        }
        let xd = self.value(x).data();
        let rows = xd.len() / f;
        if rows < 2 {
            return Err(Error::Contract(
                "batch normalization in training mode needs at least 2 rows".into(),
            ));
        }
        let mut mean = vec![0.0; f];
        for row in xd.chunks(f) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; f];
        for row in xd.chunks(f) {
            for j in 0..f {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(f) {
            for j in 0..f {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(gd[j] * h + bd[j]);
            }
        }
        let t = Tensor::new(s, out)?;
        let y = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )?;
        Ok((y, mean, var))
    }

    /// Pairwise additive scores
    /// `s[b,t,u] = Σ_d w_d · tanh(q[b,t,d] + k[b,u,d] + bias_d)`.
    ///
    /// `q: [B×T×D]`, `k: [B×U×D]`, `w: [D×1]`, `bias: [D]`. The `[B×T×U×D]`
    /// hidden tensor is never stored; the backward pass recomputes it.
    pub fn additive_scores(&mut self, q: Var, k: Var, bias: Option<Var>, w: Var) -> Result<Var> {
        for v in [q, k, w].into_iter().chain(bias) {
            self.check_var(v)?;
        }
        let (b, t, d) = dims3(self.shape(q), "additive_scores query")?;
        let (bk, u, dk) = dims3(self.shape(k), "additive_scores key")?;
        if bk != b || dk != d {
            return Err(Error::dim(format!(
                "additive_scores: query {:?} and key {:?} disagree",
                self.shape(q),
                self.shape(k)
            )));
        }
        if self.value(w).numel() != d || bias.is_some_and(|bv| self.value(bv).numel() != d) {
            return Err(Error::dim(format!(
                "additive_scores: score vector and bias must have {d} entries"
            )));
        }
        let zero = vec![0.0; d];
        let bd = bias.map_or(&zero[..], |bv| self.value(bv).data());
        let (qd, kd, wd) = (self.value(q).data(), self.value(k).data(), self.value(w).data());
        let mut out = vec![0.0; b * t * u];
        for n in 0..b {
            for i in 0..t {
                let qr = &qd[(n * t + i) * d..(n * t + i + 1) * d];
                for j in 0..u {
                    let kr = &kd[(n * u + j) * d..(n * u + j + 1) * d];
                    let mut acc = 0.0;
                    for c in 0..d {
                        acc += wd[c] * (qr[c] + kr[c] + bd[c]).tanh();
                    }
                    out[(n * t + i) * u + j] = acc;
                }
            }
        }
        let tsr = Tensor::new(vec![b, t, u], out)?;
        self.push(tsr, Op::AdditiveScores { q, k, bias, w })
    }

    // ---- reverse sweep -------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`.
    ///
    /// Afterwards [`Tape::grad`] returns the gradient for every node on the
    /// path, and leaf tensors carry it in their `grad` buffer. Gradients from
    /// several uses of one node add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check_var(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            node.value.zero_grad();
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                if let Some(g) = g {
                    node.value.accumulate_grad(g)?;
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let m = db.len();
                if self.wants(*a) {
                    let ga: Vec<f64> = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().enumerate().map(|(j, gv)| gv * db[j % m]).collect(),
                    };
                    accumulate(grads, *a, &ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; m];
                    for (j, gv) in g.iter().enumerate() {
                        gb[j % m] += match kind {
                            Binary::Add => *gv,
                            Binary::Sub => -gv,
                            Binary::Mul => gv * da[j],
                        };
                    }
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Unary { kind, a } => {
                let x = self.value(*a).data();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(gv, (&xv, &yv))| gv * kind.derivative(xv, yv))
                    .collect();
                accumulate(grads, *a, &ga);
            }
            Op::Affine { a, scale } => {
                let ga: Vec<f64> = g.iter().map(|gv| gv * scale).collect();
                accumulate(grads, *a, &ga);
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    mm_bt(g, self.value(*b).data(), m, n, k, &mut ga);
                    accumulate(grads, *a, &ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    mm_at(self.value(*a).data(), g, m, k, n, &mut gb);
                    accumulate(grads, *b, &gb);
                }
            }
            Op::BatchMatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut ga = vec![0.0; bs * m * k];
                    for s in 0..bs {
                        mm_bt(
                            &g[s * m * n..(s + 1) * m * n],
                            &db[s * k * n..(s + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut ga[s * m * k..(s + 1) * m * k],
                        );
                    }
                    accumulate(grads, *a, &ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; bs * k * n];
                    for s in 0..bs {
                        mm_at(
                            &da[s * m * k..(s + 1) * m * k],
                            &g[s * m * n..(s + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut gb[s * k * n..(s + 1) * k * n],
                        );
                    }
                    accumulate(grads, *b, &gb);
                }
            }
            Op::TransposeLast2 { a } => {
                let s = self.shape(*a);
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                // g has the transposed layout [.., n, m]
                let ga = transpose_last2(g, n, m);
                accumulate(grads, *a, &ga);
            }
            Op::Reshape { a } => accumulate(grads, *a, g),
            Op::Sum { a } => {
                let ga = vec![g[0]; self.value(*a).numel()];
                accumulate(grads, *a, &ga);
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel();
                let ga = vec![g[0] / n as f64; n];
                accumulate(grads, *a, &ga);
            }
            Op::MeanAxis1 { a } => {
                let s = self.shape(*a);
                let (b, t, f) = (s[0], s[1], s[2]);
                let mut ga = vec![0.0; b * t * f];
                for n in 0..b {
                    for s in 0..t {
                        for j in 0..f {
                            ga[(n * t + s) * f + j] = g[n * f + j] / t as f64;
                        }
                    }
                }
                accumulate(grads, *a, &ga);
            }
            Op::SelectTime { a, t } => {
                let s = self.shape(*a);
                let (b, len, f) = (s[0], s[1], s[2]);
                let mut ga = vec![0.0; b * len * f];
                for n in 0..b {
                    ga[(n * len + t) * f..(n * len + t + 1) * f].copy_from_slice(&g[n * f..(n + 1) * f]);
                }
                accumulate(grads, *a, &ga);
            }
            Op::StackTime { parts } => {
                let s = node.value.shape();
                let (b, t, f) = (s[0], s[1], s[2]);
                for (step, &p) in parts.iter().enumerate() {
                    if !self.wants(p) {
                        continue;
                    }
                    let mut gp = Vec::with_capacity(b * f);
                    for n in 0..b {
                        gp.extend_from_slice(&g[(n * t + step) * f..(n * t + step + 1) * f]);
                    }
                    accumulate(grads, p, &gp);
                }
            }
            Op::SelectLast { a, index } => {
                let f = *self.shape(*a).last().unwrap();
                let mut ga = vec![0.0; self.value(*a).numel()];
                for (r, gv) in g.iter().enumerate() {
                    ga[r * f + index] = *gv;
                }
                accumulate(grads, *a, &ga);
            }
            Op::ConcatLast { parts } => {
                let total = *node.value.shape().last().unwrap();
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = *self.shape(p).last().unwrap();
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, p, &gp);
                    }
                    offset += w;
                }
            }
            Op::SoftmaxLast { a } => {
                let f = *node.value.shape().last().unwrap();
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(f).zip(y.chunks(f)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    ga.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dot)));
                }
                accumulate(grads, *a, &ga);
            }
            Op::RowNormalize { a, norms } => {
                let f = *node.value.shape().last().unwrap();
                let mut ga = Vec::with_capacity(g.len());
                for ((gr, yr), n) in g.chunks(f).zip(y.chunks(f)).zip(norms) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    ga.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - yv * dot) / n));
                }
                accumulate(grads, *a, &ga);
            }
            Op::StraightThrough { a } => accumulate(grads, *a, g),
            Op::Conv1d {
                x,
                w,
                b,
                stride,
                pad_left,
            } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (bs, len, cin) = (sx[0], sx[1], sx[2]);
                let (cout, k) = (sw[0], sw[2]);
                let out_len = node.value.shape()[1];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; wd.len()];
                let mut gb = vec![0.0; cout];
                for n in 0..bs {
                    for o in 0..out_len {
                        let gr = &g[(n * out_len + o) * cout..(n * out_len + o + 1) * cout];
                        gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                        for kk in 0..k {
                            let pos = (o * stride + kk) as isize - *pad_left as isize;
                            if pos < 0 || pos as usize >= len {
                                continue;
                            }
                            let base = (n * len + pos as usize) * cin;
                            for (co, &gv) in gr.iter().enumerate() {
                                for ci in 0..cin {
                                    let widx = (co * cin + ci) * k + kk;
                                    gw[widx] += gv * xd[base + ci];
                                    gx[base + ci] += gv * wd[widx];
                                }
                            }
                        }
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, &gx);
                }
                if self.wants(*w) {
                    accumulate(grads, *w, &gw);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, &gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let f = inv_std.len();
                let rows = g.len() / f;
                let gd = self.value(*gamma).data();
                let mut sum_g = vec![0.0; f];
                let mut sum_gx = vec![0.0; f];
                for (gr, hr) in g.chunks(f).zip(xhat.chunks(f)) {
                    for j in 0..f {
                        sum_g[j] += gr[j];
                        sum_gx[j] += gr[j] * hr[j];
                    }
                }
                if self.wants(*x) {
                    let nf = rows as f64;
                    let mut gx = Vec::with_capacity(g.len());
                    for (gr, hr) in g.chunks(f).zip(xhat.chunks(f)) {
                        for j in 0..f {
                            gx.push(gd[j] * inv_std[j] / nf * (nf * gr[j] - sum_g[j] - hr[j] * sum_gx[j]));
                        }
                    }
                    accumulate(grads, *x, &gx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, &sum_gx);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, &sum_g);
                }
            }
            Op::AdditiveScores { q, k, bias, w } => {
                let (sq, sk) = (self.shape(*q), self.shape(*k));
                let (b, t, d) = (sq[0], sq[1], sq[2]);
                let u = sk[1];
                let zero = vec![0.0; d];
                let bd = bias.map_or(&zero[..], |bv| self.value(bv).data());
                let (qd, kd, wd) = (self.value(*q).data(), self.value(*k).data(), self.value(*w).data());
                let mut gq = vec![0.0; qd.len()];
                let mut gk = vec![0.0; kd.len()];
                let mut gbias = vec![0.0; d];
                let mut gw = vec![0.0; d];
                for n in 0..b {
                    for i in 0..t {
                        let qo = (n * t + i) * d;
                        for j in 0..u {
                            let gv = g[(n * t + i) * u + j];
                            if gv == 0.0 {
                                continue;
                            }
                            let ko = (n * u + j) * d;
                            for c in 0..d {
                                let h = (qd[qo + c] + kd[ko + c] + bd[c]).tanh();
                                gw[c] += gv * h;
                                let dh = gv * wd[c] * (1.0 - h * h);
                                gq[qo + c] += dh;
                                gk[ko + c] += dh;
                                gbias[c] += dh;
                            }
                        }
                    }
                }
                if self.wants(*q) {
                    accumulate(grads, *q, &gq);
                }
                if self.wants(*k) {
                    accumulate(grads, *k, &gk);
                }
                if self.wants(*w) {
                    accumulate(grads, *w, &gw);
                }
                if let Some(bv) = bias {
                    if self.wants(*bv) {
                        accumulate(grads, *bv, &gbias);
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn dims3(s: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match s {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(Error::dim(format!("{what}: expected rank-3 tensor, got {s:?}"))),
    }
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `out[m×n] = a[m×k] · b[k×n]`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += g[m×n] · b[k×n]ᵀ`
fn mm_bt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`
fn mm_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Transposes every trailing `[m×n]` block.
fn transpose_last2(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (blk, src) in x.chunks(m * n).enumerate() {
        let dst = &mut out[blk * m * n..(blk + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}
