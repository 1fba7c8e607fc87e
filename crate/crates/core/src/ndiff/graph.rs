//! Tape of executed tensor operations and its reverse pass.
//!
//! Every op evaluates eagerly and appends one node; `backward` walks the
//! nodes in exact reverse order. Ops whose backward is written by hand
//! elsewhere in the crate plug in through [`Function`].

use crate::error::{Error, Result};
use crate::ndiff::kernels::{
    axpy_shifted, broadcast_shape, dot_shifted, for_each_broadcast, unbroadcast, Padding,
    ReducePlan,
};
use crate::ndiff::params::{ParamId, ParamStore};
use crate::ndiff::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation with a hand-written backward pass.
pub trait Function<T: Scalar>: Send {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order. `None` marks
    /// an input that receives no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &[T],
    ) -> Result<Vec<Option<Vec<T>>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Expm1,
    Abs,
    Reciprocal,
    Softplus,
    Sigmoid,
    Silu,
    Sqrt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

enum Op<T: Scalar> {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        pad_left: usize,
    },
    DepthwiseConv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        pad_left: usize,
    },
    Reduce {
        a: Var,
        kind: ReduceKind,
        plan: ReducePlan,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    TransposeLast(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Custom {
        inputs: Vec<Var>,
        func: Box<dyn Function<T>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Recorded computation. Single writer: ops are appended through `&mut`.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    track: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    // e^{-|x|} never overflows
    let e = (-x.abs()).exp_fast();
    let s = T::one() / (T::one() + e);
    if x >= T::zero() {
        s
    } else {
        e * s
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    let thirty = T::of(30.0);
    if x > thirty {
        x
    } else if x < -thirty {
        x.exp()
    } else {
        // log1p(exp(x)) is accurate over the whole middle range
        x.exp().ln_1p()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            track: true,
        }
    }

    /// A graph that tracks no gradients: parameters and leaves enter as
    /// constants, so ops skip saving state for a reverse pass.
    pub fn inference() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    /// Whether `v` will receive a gradient from `backward`.
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Leaf node. It is tracked iff `value.requires_grad()`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let needs = value.requires_grad() && self.track;
        self.push(value.detached(), Op::Leaf, needs)
    }

    /// Constant input that never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value.detached(), Op::Leaf, false)
    }

    /// Leaf bound to a registered parameter; `accumulate_into` routes its
    /// gradient back to the store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.get(id);
        let v = self.push(t.detached(), Op::Leaf, self.track);
        self.nodes[v.0].param = Some(id);
        v
    }

    // ---- elementwise -------------------------------------------------

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let n: usize = out_shape.iter().product();
        let mut out = vec![T::zero(); n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            let f: fn(T, T) -> T = match kind {
                Binary::Add => |x, y| x + y,
                Binary::Sub => |x, y| x - y,
                Binary::Mul => |x, y| x * y,
            };
            for_each_broadcast(name, &sa, &sb, &out_shape, |o, i, j| {
                out[o] = f(av[i], bv[j]);
            })?;
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Binary(kind, a, b),
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = match kind {
            Unary::Neg => x.map(|v| -v),
            Unary::Exp => x.map(|v| v.exp()),
            Unary::Expm1 => x.map(|v| v.exp_m1()),
            Unary::Abs => x.map(|v| v.abs()),
            Unary::Reciprocal => x.map(|v| v.recip()),
            Unary::Softplus => x.map(softplus),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Silu => x.map(|v| v * sigmoid(v)),
            Unary::Sqrt => {
                if x.data().iter().any(|&v| v < T::zero()) {
                    return Err(Error::invalid("sqrt of a negative value"));
                }
                x.map(|v| v.sqrt())
            }
        };
        match kind {
            Unary::Exp | Unary::Expm1 if !out.all_finite() => {
                return Err(Error::Overflow(if kind == Unary::Exp {
                    "exp"
                } else {
                    "expm1"
                }))
            }
            Unary::Reciprocal if !out.all_finite() => return Err(Error::Overflow("reciprocal")),
            _ => {}
        }
        let needs = self.needs(&[a]);
        Ok(self.push(out, Op::Unary(kind, a), needs))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }
    pub fn expm1(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Expm1, a)
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Abs, a)
    }
    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Reciprocal, a)
    }
    /// `log(1 + exp(a))`, linear above 30 and exponential below -30.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Softplus, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }
    /// `a * sigmoid(a)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Silu, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }

    // ---- linear algebra and layout -----------------------------------

    /// `[..., M, K] × [K, P] -> [..., M, P]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = sb[0];
        let p = sb[1];
        let rows = self.value(a).len() / k;
        let mut out = vec![T::zero(); rows * p];
        T::gemm(
            rows,
            k,
            p,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = p;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), needs))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::InvalidShape {
                op: "transpose_last",
                shape: s,
                reason: "needs rank >= 2".into(),
            });
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_blocks(self.value(a).data(), m, n);
        let mut shape = s;
        let r = shape.len();
        shape.swap(r - 2, r - 1);
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::TransposeLast(a), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let needs = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape(a), needs))
    }

    // ---- convolution -------------------------------------------------

    /// Cross-correlation of `x: [B, C_in, L]` with `w: [C_out, C_in, K]`,
    /// zero padded so the output keeps length `L`.
    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, padding: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (b, cin, l) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if k > l {
            return Err(Error::invalid(format!("conv1d kernel width {k} exceeds length {l}")));
        }
        let pad_left = padding.left(k)?;
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::ShapeMismatch {
                    op: "conv1d bias",
                    lhs: self.shape(bv).to_vec(),
                    rhs: vec![cout],
                });
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); b * cout * l];
        for bi in 0..b {
            for co in 0..cout {
                let y = &mut out[(bi * cout + co) * l..][..l];
                if let Some(bv) = bias {
                    y.fill(self.nodes[bv.0].value.data()[co]);
                }
                for ci in 0..cin {
                    let xr = &xv[(bi * cin + ci) * l..][..l];
                    for j in 0..k {
                        let wt = wv[(co * cin + ci) * k + j];
                        axpy_shifted(y, xr, wt, j as isize - pad_left as isize);
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let needs = self.needs(&inputs);
        Ok(self.push(
            Tensor::new(vec![b, cout, l], out)?,
            Op::Conv1d {
                x,
                w,
                bias,
                pad_left,
            },
            needs,
        ))
    }

    /// Per-channel convolution of `x: [B, C, L]` with `w: [C, K]`.
    pub fn depthwise_conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        padding: Padding,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 2 || sx[1] != sw[0] {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (b, c, l) = (sx[0], sx[1], sx[2]);
        let k = sw[1];
        if k > l {
            return Err(Error::invalid(format!("conv1d kernel width {k} exceeds length {l}")));
        }
        let pad_left = padding.left(k)?;
        if let Some(bv) = bias {
            if self.shape(bv) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "depthwise_conv1d bias",
                    lhs: self.shape(bv).to_vec(),
                    rhs: vec![c],
                });
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); b * c * l];
        for bi in 0..b {
            for ch in 0..c {
                let y = &mut out[(bi * c + ch) * l..][..l];
                if let Some(bv) = bias {
                    y.fill(self.nodes[bv.0].value.data()[ch]);
                }
                let xr = &xv[(bi * c + ch) * l..][..l];
                for j in 0..k {
                    axpy_shifted(y, xr, wv[ch * k + j], j as isize - pad_left as isize);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let needs = self.needs(&inputs);
        Ok(self.push(
            Tensor::new(vec![b, c, l], out)?,
            Op::DepthwiseConv1d {
                x,
                w,
                bias,
                pad_left,
            },
            needs,
        ))
    }

    // ---- reductions and loss -----------------------------------------

    /// Sum, mean or max over `axes`; the reduced axes are removed.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axes: &[usize]) -> Result<Var> {
        let plan = ReducePlan::new(self.shape(a), axes)?;
        let x = self.value(a).data();
        let n_out = plan.out_len();
        let mut out = vec![T::zero(); n_out];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                plan.visit(|i, o| out[o] += x[i]);
                if kind == ReduceKind::Mean {
                    let inv = T::one() / T::of(plan.group_size() as f64);
                    out.iter_mut().for_each(|v| *v *= inv);
                }
            }
            ReduceKind::Max => {
                out.fill(T::neg_infinity());
                argmax = vec![usize::MAX; n_out];
                plan.visit(|i, o| {
                    if argmax[o] == usize::MAX || x[i] > out[o] {
                        out[o] = x[i];
                        argmax[o] = i;
                    }
                });
            }
        }
        let shape = plan.out_shape.clone();
        let needs = self.needs(&[a]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Reduce {
                a,
                kind,
                plan,
                argmax,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Sum, a, axes)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, axes)
    }

    pub fn max(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Max, a, axes)
    }

    /// Sum over every axis, giving a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        if axes.is_empty() {
            return Ok(a);
        }
        self.sum(a, &axes)
    }

    /// Batch mean of `-log softmax(logits)[label]` for `logits: [B, K]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for i in 0..b {
            let row = &z[i * k..(i + 1) * k];
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut denom = T::zero();
            for j in 0..k {
                let e = (row[j] - m).exp();
                probs[i * k + j] = e;
                denom += e;
            }
            for j in 0..k {
                probs[i * k + j] /= denom;
            }
            loss += denom.ln() + m - row[labels[i]];
        }
        loss /= T::of(b as f64);
        if !loss.is_finite() {
            return Err(Error::NonFinite("softmax_cross_entropy".into()));
        }
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn apply(
        &mut self,
        func: Box<dyn Function<T>>,
        inputs: &[Var],
        output: Tensor<T>,
    ) -> Var {
        let needs = self.needs(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                func,
            },
            needs,
        )
    }

    // ---- reverse pass ------------------------------------------------

    /// Reverse accumulation from a one-element `loss`.
    ///
    /// Afterwards [`Graph::grad`] is populated for every tracked node that
    /// the loss depends on. Calling it again starts from fresh gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_t = self.value(loss);
        if loss_t.len() != 1 {
            return Err(Error::NonScalarLoss(loss_t.shape().to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].needs_grad {
                self.backward_node(i, &gout)?;
            }
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (g, d) in g.iter_mut().zip(&delta) {
                    *g += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn backward_node(&mut self, i: usize, g: &[T]) -> Result<()> {
        // Detach the op so input values can be borrowed while gradients
        // are written into other slots.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let res = self.backward_op(i, &op, g);
        self.nodes[i].op = op;
        res
    }

    fn backward_op(&mut self, i: usize, op: &Op<T>, g: &[T]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let sa = self.shape(*a).to_vec();
                let sb = self.shape(*b).to_vec();
                let (ga, gb) = match kind {
                    Binary::Add => (g.to_vec(), g.to_vec()),
                    Binary::Sub => (g.to_vec(), g.iter().map(|&v| -v).collect()),
                    Binary::Mul => {
                        let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                        let n = g.len();
                        let mut ga = vec![T::zero(); n];
                        let mut gb = vec![T::zero(); n];
                        for_each_broadcast("mul", &sa, &sb, &out_shape, |o, ia, ib| {
                            ga[o] = g[o] * bv[ib];
                            gb[o] = g[o] * av[ia];
                        })?;
                        (ga, gb)
                    }
                };
                let ga = unbroadcast(&ga, &sa, &out_shape);
                let gb = unbroadcast(&gb, &sb, &out_shape);
                self.acc(*a, ga);
                self.acc(*b, gb);
            }
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let y = self.nodes[i].value.data();
                let ga: Vec<T> = match kind {
                    Unary::Neg => g.iter().map(|&v| -v).collect(),
                    Unary::Exp => g.iter().zip(y).map(|(&g, &y)| g * y).collect(),
                    Unary::Expm1 => g.iter().zip(y).map(|(&g, &y)| g * (y + T::one())).collect(),
                    Unary::Abs => g
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| {
                            if x > T::zero() {
                                g
                            } else if x < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                    Unary::Reciprocal => g.iter().zip(y).map(|(&g, &y)| -g * y * y).collect(),
                    Unary::Softplus => g.iter().zip(x).map(|(&g, &x)| g * sigmoid(x)).collect(),
                    Unary::Sigmoid => g
                        .iter()
                        .zip(y)
                        .map(|(&g, &y)| g * y * (T::one() - y))
                        .collect(),
                    Unary::Silu => g
                        .iter()
                        .zip(x)
                        .map(|(&g, &x)| {
                            let s = sigmoid(x);
                            g * (s + x * s * (T::one() - s))
                        })
                        .collect(),
                    Unary::Sqrt => g
                        .iter()
                        .zip(y)
                        .map(|(&g, &y)| g / (T::of(2.0) * y))
                        .collect(),
                };
                self.acc(*a, ga);
            }
            Op::MatMul(a, b) => {
                let sb = self.shape(*b).to_vec();
                let (k, p) = (sb[0], sb[1]);
                let rows = self.value(*a).len() / k;
                let mut ga = Vec::new();
                let mut gb = Vec::new();
                if self.nodes[a.0].needs_grad {
                    ga = vec![T::zero(); rows * k];
                    T::gemm(rows, p, k, g, false, self.value(*b).data(), true, &mut ga, false);
                }
                if self.nodes[b.0].needs_grad {
                    gb = vec![T::zero(); k * p];
                    T::gemm(k, rows, p, self.value(*a).data(), true, g, false, &mut gb, false);
                }
                if !ga.is_empty() {
                    self.acc(*a, ga);
                }
                if !gb.is_empty() {
                    self.acc(*b, gb);
                }
            }
            Op::TransposeLast(a) => {
                let s = self.shape(*a).to_vec();
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                // output blocks are n×m
                let ga = transpose_blocks(g, n, m);
                self.acc(*a, ga);
            }
            Op::Reshape(a) => {
                self.acc(*a, g.to_vec());
            }
            Op::Conv1d {
                x,
                w,
                bias,
                pad_left,
            } => {
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let (b, cin, l) = (sx[0], sx[1], sx[2]);
                let (cout, k) = (sw[0], sw[2]);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let want_x = self.nodes[x.0].needs_grad;
                let want_w = self.nodes[w.0].needs_grad;
                let mut gx = vec![T::zero(); if want_x { xv.len() } else { 0 }];
                let mut gw = vec![T::zero(); if want_w { wv.len() } else { 0 }];
                let mut gbias = vec![T::zero(); cout];
                for bi in 0..b {
                    for co in 0..cout {
                        let gy = &g[(bi * cout + co) * l..][..l];
                        gbias[co] += gy.iter().copied().sum::<T>();
                        for ci in 0..cin {
                            let xr = &xv[(bi * cin + ci) * l..][..l];
                            for j in 0..k {
                                let shift = j as isize - *pad_left as isize;
                                let widx = (co * cin + ci) * k + j;
                                if want_w {
                                    gw[widx] += dot_shifted(gy, xr, shift);
                                }
                                if want_x {
                                    let gxr = &mut gx[(bi * cin + ci) * l..][..l];
                                    // x[t + shift] feeds y[t]
                                    axpy_shifted(gxr, gy, wv[widx], -shift);
                                }
                            }
                        }
                    }
                }
                if want_x {
                    self.acc(*x, gx);
                }
                if want_w {
                    self.acc(*w, gw);
                }
                if let Some(bv) = bias {
                    self.acc(*bv, gbias);
                }
            }
            Op::DepthwiseConv1d {
                x,
                w,
                bias,
                pad_left,
            } => {
                let sx = self.shape(*x).to_vec();
                let (b, c, l) = (sx[0], sx[1], sx[2]);
                let k = self.shape(*w)[1];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut gx = vec![T::zero(); xv.len()];
                let mut gw = vec![T::zero(); wv.len()];
                let mut gbias = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let gy = &g[(bi * c + ch) * l..][..l];
                        gbias[ch] += gy.iter().copied().sum::<T>();
                        let xr = &xv[(bi * c + ch) * l..][..l];
                        let gxr = &mut gx[(bi * c + ch) * l..][..l];
                        for j in 0..k {
                            let shift = j as isize - *pad_left as isize;
                            gw[ch * k + j] += dot_shifted(gy, xr, shift);
                            axpy_shifted(gxr, gy, wv[ch * k + j], -shift);
                        }
                    }
                }
                self.acc(*x, gx);
                self.acc(*w, gw);
                if let Some(bv) = bias {
                    self.acc(*bv, gbias);
                }
            }
            Op::Reduce {
                a,
                kind,
                plan,
                argmax,
            } => {
                let n = self.value(*a).len();
                let mut ga = vec![T::zero(); n];
                match kind {
                    ReduceKind::Sum => plan.visit(|i, o| ga[i] = g[o]),
                    ReduceKind::Mean => {
                        let inv = T::one() / T::of(plan.group_size() as f64);
                        plan.visit(|i, o| ga[i] = g[o] * inv);
                    }
                    ReduceKind::Max => {
                        for (o, &i) in argmax.iter().enumerate() {
                            ga[i] += g[o];
                        }
                    }
                }
                self.acc(*a, ga);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = g[0] / T::of(b as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    gl[i * k + y] -= scale;
                }
                self.acc(*logits, gl);
            }
            Op::Custom { inputs, func } => {
                let grads = {
                    let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                    func.backward(&ins, &self.nodes[i].value, g)?
                };
                if grads.len() != inputs.len() {
                    return Err(Error::invalid(format!(
                        "{} returned {} gradients for {} inputs",
                        func.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                for (v, gv) in inputs.iter().zip(grads) {
                    if let Some(gv) = gv {
                        self.acc(*v, gv);
                    }
                }
            }
        }
        Ok(())
    }

    /// Adds the gradients of parameter-bound leaves into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }
}

/// Transposes each trailing `m×n` block of `x` into `n×m`.
fn transpose_blocks<T: Scalar>(x: &[T], m: usize, n: usize) -> Vec<T> {
    let block = m * n;
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        for r in 0..m {
            for c in 0..n {
                dst[c * m + r] = src[r * n + c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[1], &[0.0]));
        let e = g.exp(a).unwrap();
        assert_eq!(g.value(e).data(), &[1.0]);

        let tiny = g.input(t(&[1], &[1e-12]));
        let m = g.expm1(tiny).unwrap();
        assert!(((g.value(m).data()[0] - 1e-12) / 1e-12).abs() < 1e-6);

        let x = g.input(t(&[3], &[-2.0, 0.0, 3.0]));
        let ab = g.abs(x).unwrap();
        assert_eq!(g.value(ab).data(), &[2.0, 0.0, 3.0]);
    }

    #[test]
    fn exp_overflow_is_an_error() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2], &[1.0, 1000.0]));
        assert!(matches!(g.exp(a), Err(Error::Overflow("exp"))));
    }

    #[test]
    fn broadcast_mismatch_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn softplus_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(t(&[3], &[0.0, 100.0, -100.0]).with_grad());
        let s = g.softplus(p).unwrap();
        let v = g.value(s).data().to_vec();
        assert!((v[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((v[1] - 100.0).abs() < 1e-12);
        assert!(v[2] > 0.0);
        let l = g.sum_all(s).unwrap();
        g.backward(l).unwrap();
        assert!((g.grad(p).unwrap()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[3], &[0.0, 50.0, -50.0]));
        let s = g.sigmoid(a).unwrap();
        let v = g.value(s).data();
        assert_eq!(v[0], 0.5);
        assert!(1.0 - v[1] < 1e-20);
        assert!((v[1] + v[2] - 1.0).abs() <= f64::EPSILON);
        for x in [-3.7, -0.2, 0.9, 12.0] {
            let a = g.input(t(&[2], &[x, -x]));
            let s = g.sigmoid(a).unwrap();
            let v = g.value(s).data();
            assert!((v[0] + v[1] - 1.0).abs() <= 2.0 * f64::EPSILON);
            assert!(v[0] > 0.0 && v[0] < 1.0);
        }
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let i = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.input(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[5.0, 6.0, 7.0, 8.0]);
        let a = g.input(t(&[1, 2], &[1.0, 2.0]));
        let b = g.input(t(&[2, 1], &[3.0, 4.0]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[11.0]);
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn conv1d_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 1, 3], &[1.0, 2.0, 3.0]));
        let id1 = g.input(t(&[1, 1, 1], &[1.0]));
        let y = g.conv1d(x, id1, None, Padding::Same).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
        let id3 = g.input(t(&[1, 1, 3], &[0.0, 1.0, 0.0]));
        let y = g.conv1d(x, id3, None, Padding::Same).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
        let ones = g.input(t(&[1, 1, 3], &[1.0, 1.0, 1.0]));
        let y = g.conv1d(x, ones, None, Padding::Same).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 6.0, 5.0]);

        let wide = g.input(Tensor::zeros(vec![1, 1, 5]));
        assert!(g.conv1d(x, wide, None, Padding::Same).is_err());
        let even = g.input(Tensor::zeros(vec![1, 1, 2]));
        assert!(g.conv1d(x, even, None, Padding::Same).is_err());
        // causal: y[t] = x[t-1] + x[t]
        let pair = g.input(t(&[1, 1, 2], &[1.0, 1.0]));
        let y = g.conv1d(x, pair, None, Padding::Causal).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[3], &[1.0, 2.0, 3.0]));
        let m = g.mean(a, &[0]).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
        let c = g.input(Tensor::full(vec![2, 5], 4.25));
        let m = g.mean(c, &[1]).unwrap();
        assert_eq!(g.value(m).data(), &[4.25, 4.25]);
        let n = g.input(t(&[2], &[-5.0, -1.0]));
        let mx = g.max(n, &[0]).unwrap();
        assert_eq!(g.value(mx).item(), -1.0);
        assert!(g.sum(n, &[]).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::<f64>::new();
        let z = g.input(Tensor::zeros(vec![1, 4]));
        let l = g.softmax_cross_entropy(z, &[2]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
        let z = g.input(t(&[1, 2], &[10.0, -10.0]));
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        let want = (-20f64).exp().ln_1p();
        assert!((g.value(l).item() - want).abs() / want < 1e-6);
        assert!(matches!(
            g.softmax_cross_entropy(z, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(t(&[3], &[0.3, -1.0, 2.0]).with_grad());
        let l = g.sum_all(p).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let p = g.leaf(t(&[2], &[1.0, 2.0]).with_grad());
        let sq = g.mul(p, p).unwrap();
        let l = g.sum_all(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[2.0, 4.0]);
        assert!(matches!(g.backward(sq), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn grads_accumulate_into_store_until_zeroed() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", t(&[2], &[1.0, -1.0])).unwrap();
        for _ in 0..2 {
            let mut g = Graph::new();
            let w = g.param(&store, id);
            let l = g.sum_all(w).unwrap();
            g.backward(l).unwrap();
            g.accumulate_into(&mut store);
        }
        assert_eq!(store.get(id).grad().unwrap(), &[2.0, 2.0]);
        store.zero_grad();
        assert_eq!(store.get(id).grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn broadcast_add_equals_explicit_tiling() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2, 1, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = g.input(t(&[2, 1], &[10.0, 20.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 3]);
        assert_eq!(
            g.value(c).data(),
            &[11.0, 12.0, 13.0, 21.0, 22.0, 23.0, 14.0, 15.0, 16.0, 24.0, 25.0, 26.0]
        );
    }
}
