use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::mem;

use super::kernels::{self, ConvGeom};
use super::{sigmoid, Shape, TensorError};
use crate::Scalar;

/// Handle to a [`DiffValue`] stored in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

/// A dense array taking part in a differentiable computation.
///
/// `grad` always has the same length as `data`. It only ever changes for
/// values with `requires_grad` set.
#[derive(Clone, Debug)]
pub struct DiffValue<T> {
    pub shape: Shape,
    pub data: Vec<T>,
    pub grad: Vec<T>,
    pub requires_grad: bool,
}

/// Operation tags, also used to target the backward fault hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Minimum,
    Maximum,
    AddBias,
    Neg,
    Scale,
    AddScalar,
    Relu,
    Silu,
    Sigmoid,
    Exp,
    Log,
    Sum,
    Mean,
    LogSumExp,
    Reshape,
    Concat,
    Narrow,
    Gather,
    Conv2d,
    Linear,
    GlobalAvgPool,
    CosineSim,
    BceWithLogits,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Binary(OpKind, Var, Var),
    Unary(OpKind, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Narrow { x: Var, offset: usize },
    Gather { x: Var, idx: Vec<usize> },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Var },
    CosineSim(Var, Var),
    BceWithLogits(Var, Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Binary(k, ..) | Op::Unary(k, _) => *k,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Scale(..) => OpKind::Scale,
            Op::Concat(_) => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Gather { .. } => OpKind::Gather,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Linear { .. } => OpKind::Linear,
            Op::CosineSim(..) => OpKind::CosineSim,
            Op::BceWithLogits(..) => OpKind::BceWithLogits,
        }
    }
}

/// Tape of values recorded in creation order. Reverse-mode gradients are
/// obtained with [`Graph::backward`].
///
/// A graph is confined to one thread while in use; independent graphs share
/// nothing.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<DiffValue<T>>,
    ops: Vec<Op<T>>,
    fault: Option<(OpKind, T)>,
}

type Result<V> = core::result::Result<V, TensorError>;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), ops: Vec::new(), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, v: Var) -> &DiffValue<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn grad(&self, v: Var) -> &[T] {
        &self.nodes[v.0].grad
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.ops[v.0].kind()
    }

    /// First element; intended for scalar results.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].data[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Test hook: multiplies the parameter-side gradient of every op of `kind`
    /// (weights and biases of conv/linear/bias-add) by `factor`.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind, factor: T) {
        self.fault = Some((kind, factor));
    }

    fn fault_factor(&self, kind: OpKind) -> T {
        match self.fault {
            Some((k, f)) if k == kind => f,
            _ => T::one(),
        }
    }

    fn push(&mut self, shape: Shape, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.numel(), data.len());
        let grad = vec![T::zero(); data.len()];
        self.nodes.push(DiffValue { shape, data, grad, requires_grad });
        self.ops.push(op);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, shape: Shape, data: Vec<T>, requires_grad: bool) -> Result<Var> {
        if shape.numel() != data.len() {
            return Err(TensorError::DataLength { shape, len: data.len() });
        }
        Ok(self.push(shape, data, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, shape: Shape, data: Vec<T>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.push(Shape::scalar(), vec![v], Op::Leaf, false)
    }

    /// Resets every accumulated gradient to zero.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    // ---- elementwise ---------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op, left: sa, right: sb });
        }
        Ok(sa)
    }

    fn binary(&mut self, kind: OpKind, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(name, a, b)?;
        let (xa, xb) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let f: fn(T, T) -> T = match kind {
            OpKind::Add => |x, y| x + y,
            OpKind::Sub => |x, y| x - y,
            OpKind::Mul => |x, y| x * y,
            OpKind::Div => |x, y| x / y,
            OpKind::Minimum => |x, y| if y < x { y } else { x },
            OpKind::Maximum => |x, y| if y > x { y } else { x },
            _ => unreachable!("not a binary op"),
        };
        let data = xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, data, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Div, "div", a, b)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Minimum, "minimum", a, b)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Maximum, "maximum", a, b)
    }

    /// Adds a per-channel bias `b[C]` to `x[C, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.rank() != 1 || sb.numel() != sx.leading() {
            return Err(TensorError::ShapeMismatch { op: "add_bias", left: sx, right: sb });
        }
        let inner = sx.inner();
        let bias = &self.nodes[b.0].data;
        let mut data = self.nodes[x.0].data.clone();
        for (row, &bv) in data.chunks_exact_mut(inner).zip(bias) {
            row.iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(sx, data, Op::AddBias(x, b), rg))
    }

    fn unary(&mut self, kind: OpKind, x: Var, shape: Shape, data: Vec<T>) -> Var {
        let rg = self.any_grad(&[x]);
        self.push(shape, data, Op::Unary(kind, x), rg)
    }

    fn map(&mut self, kind: OpKind, x: Var, f: impl Fn(T) -> T) -> Var {
        let shape = self.shape(x);
        let data = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        self.unary(kind, x, shape, data)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.map(OpKind::Neg, x, |v| -v)
    }

    pub fn scale(&mut self, x: Var, alpha: T) -> Var {
        let shape = self.shape(x);
        let data = self.nodes[x.0].data.iter().map(|&v| v * alpha).collect();
        let rg = self.any_grad(&[x]);
        self.push(shape, data, Op::Scale(x, alpha), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.map(OpKind::AddScalar, x, |v| v + c)
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.map(OpKind::Relu, x, |v| if v > T::zero() { v } else { T::zero() })
    }

    /// `x · sigmoid(x)`
    pub fn silu(&mut self, x: Var) -> Var {
        self.map(OpKind::Silu, x, |v| v * sigmoid(v))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(OpKind::Sigmoid, x, sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(OpKind::Exp, x, |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some((index, &value)) =
            self.nodes[x.0].data.iter().enumerate().find(|(_, &v)| !(v > T::zero()))
        {
            return Err(TensorError::NonPositiveLog { index, value: value.as_f64() });
        }
        Ok(self.map(OpKind::Log, x, |v| v.ln()))
    }

    /// Numerically stable binary cross-entropy against `target` (same shape),
    /// elementwise: `max(x,0) − x·t + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, x: Var, target: Var) -> Result<Var> {
        let shape = self.same_shape("bce_with_logits", x, target)?;
        let (xs, ts) = (&self.nodes[x.0].data, &self.nodes[target.0].data);
        let data = xs
            .iter()
            .zip(ts)
            .map(|(&v, &t)| v.max(T::zero()) - v * t + (-v.abs()).exp().ln_1p())
            .collect();
        let rg = self.any_grad(&[x, target]);
        Ok(self.push(shape, data, Op::BceWithLogits(x, target), rg))
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].data.iter().fold(T::zero(), |a, &b| a + b);
        self.unary(OpKind::Sum, x, Shape::scalar(), vec![s])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::of(self.shape(x).numel() as f64);
        let s = self.nodes[x.0].data.iter().fold(T::zero(), |a, &b| a + b);
        self.unary(OpKind::Mean, x, Shape::scalar(), vec![s / n])
    }

    /// `ln Σ exp(x_i)` over every element, computed with the max shift.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let xs = &self.nodes[x.0].data;
        let m = xs.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let s = xs.iter().fold(T::zero(), |a, &b| a + (b - m).exp());
        let v = m + s.ln();
        self.unary(OpKind::LogSumExp, x, Shape::scalar(), vec![v])
    }

    /// Per-channel spatial mean of a `C×H×W` map.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.rank() != 3 {
            return Err(TensorError::InvalidArgument {
                op: "global_avg_pool",
                reason: alloc::format!("expected a C×H×W map, got {sx}"),
            });
        }
        let inner = sx.inner();
        let n = T::of(inner as f64);
        let data = self.nodes[x.0]
            .data
            .chunks_exact(inner)
            .map(|c| c.iter().fold(T::zero(), |a, &b| a + b) / n)
            .collect();
        let shape = Shape::vector(sx.leading())?;
        Ok(self.unary(OpKind::GlobalAvgPool, x, shape, data))
    }

    // ---- structural ----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let sx = self.shape(x);
        if sx.numel() != shape.numel() {
            return Err(TensorError::ShapeMismatch { op: "reshape", left: sx, right: shape });
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.unary(OpKind::Reshape, x, shape, data))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: String::from("no inputs"),
        })?;
        let s0 = self.shape(first);
        let mut lead = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.rank() != s0.rank() || sp.dims()[1..] != s0.dims()[1..] {
                return Err(TensorError::ShapeMismatch { op: "concat", left: s0, right: sp });
            }
            lead += sp.leading();
        }
        let mut data = Vec::with_capacity(lead * s0.inner());
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let shape = s0.with_leading(lead)?;
        let rg = self.any_grad(parts);
        Ok(self.push(shape, data, Op::Concat(parts.to_vec()), rg))
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x);
        if len == 0 || start + len > sx.leading() {
            return Err(TensorError::InvalidArgument {
                op: "narrow",
                reason: alloc::format!("rows {start}..{} out of range for {sx}", start + len),
            });
        }
        let inner = sx.inner();
        let offset = start * inner;
        let data = self.nodes[x.0].data[offset..offset + len * inner].to_vec();
        let shape = sx.with_leading(len)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(shape, data, Op::Narrow { x, offset }, rg))
    }

    /// Picks flat elements of `x` into a vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let n = self.shape(x).numel();
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(TensorError::InvalidArgument {
                op: "gather",
                reason: alloc::format!("indices must be non-empty and below {n}"),
            });
        }
        let xs = &self.nodes[x.0].data;
        let data = idx.iter().map(|&i| xs[i]).collect();
        let shape = Shape::vector(idx.len())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(shape, data, Op::Gather { x, idx: idx.to_vec() }, rg))
    }

    // ---- layers --------------------------------------------------------

    /// Cross-correlation of `input[C_in×H×W]` with `kernel[C_out×C_in×k×k]`
    /// (odd `k`), zero padding `pad`, output `⌊(H + 2·pad − k)/stride⌋ + 1`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(input), self.shape(kernel));
        let mismatch = TensorError::ShapeMismatch { op: "conv2d", left: sx, right: sw };
        if sx.rank() != 3 || sw.rank() != 4 {
            return Err(mismatch);
        }
        let (c_in, h, w) = (sx.dims()[0], sx.dims()[1], sx.dims()[2]);
        let (c_out, kc, k, k2) = (sw.dims()[0], sw.dims()[1], sw.dims()[2], sw.dims()[3]);
        if kc != c_in || k != k2 || k % 2 == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(mismatch);
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        };
        let p = geom.positions();
        let mut out = vec![T::zero(); c_out * p];
        let x = &self.nodes[input.0].data;
        let wd = &self.nodes[kernel.0].data;
        if geom.is_pointwise() {
            kernels::gemm_acc(&mut out, wd, x, c_out, geom.patch(), p);
        } else {
            let col = kernels::im2col(x, &geom);
            kernels::gemm_acc(&mut out, wd, &col, c_out, geom.patch(), p);
        }
        let shape = Shape::new(&[c_out, geom.h_out, geom.w_out])?;
        let rg = self.any_grad(&[input, kernel]);
        Ok(self.push(shape, out, Op::Conv2d { x: input, w: kernel, geom }, rg))
    }

    /// `weight[d_out×d_in] · input[d_in] + bias[d_out]`
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if sx.rank() != 1 || sw.rank() != 2 || sw.dims()[1] != sx.numel() {
            return Err(TensorError::ShapeMismatch { op: "linear", left: sx, right: sw });
        }
        let d_out = sw.dims()[0];
        if sb.rank() != 1 || sb.numel() != d_out {
            return Err(TensorError::ShapeMismatch { op: "linear", left: sw, right: sb });
        }
        let x = &self.nodes[input.0].data;
        let wd = &self.nodes[weight.0].data;
        let bd = &self.nodes[bias.0].data;
        let data = wd
            .chunks_exact(sx.numel())
            .zip(bd)
            .map(|(row, &b)| kernels::dot(row, x) + b)
            .collect();
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(Shape::vector(d_out)?, data, Op::Linear { x: input, w: weight, b: bias }, rg))
    }

    /// `a·b / (‖a‖‖b‖)`; zero-norm inputs are rejected.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_sim", a, b)?;
        let (xa, xb) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let na = kernels::dot(xa, xa).sqrt();
        let nb = kernels::dot(xb, xb).sqrt();
        if !(na > T::zero()) || !(nb > T::zero()) {
            return Err(TensorError::ZeroEmbedding);
        }
        let c = kernels::dot(xa, xb) / (na * nb);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Shape::scalar(), vec![c], Op::CosineSim(a, b), rg))
    }

    // ---- reverse sweep -------------------------------------------------

    /// Accumulates `d loss / d value` into the `grad` of every reachable value
    /// that requires a gradient. Calling it again without
    /// [`zero_grads`](Self::zero_grads) adds a second copy.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(TensorError::NotScalar(shape));
        }
        let mut grads: Vec<Vec<T>> = vec![Vec::new(); loss.0 + 1];
        grads[loss.0] = vec![T::one()];
        for i in (0..=loss.0).rev() {
            if grads[i].is_empty() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = mem::take(&mut grads[i]);
            self.propagate(i, &g, &mut grads);
            for (acc, d) in self.nodes[i].grad.iter_mut().zip(&g) {
                *acc += *d;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Vec<T>]) {
        let nodes = &self.nodes;
        let slot = |grads: &mut [Vec<T>], v: Var| -> bool {
            if !nodes[v.0].requires_grad {
                return false;
            }
            if grads[v.0].is_empty() {
                grads[v.0] = vec![T::zero(); nodes[v.0].data.len()];
            }
            true
        };
        let out = &nodes[i].data;
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (xa, xb) = (&nodes[a.0].data, &nodes[b.0].data);
                if slot(grads, *a) {
                    let ga = &mut grads[a.0];
                    for k in 0..g.len() {
                        ga[k] += match kind {
                            OpKind::Add | OpKind::Sub => g[k],
                            OpKind::Mul => g[k] * xb[k],
                            OpKind::Div => g[k] / xb[k],
                            OpKind::Minimum => {
                                if xb[k] < xa[k] { T::zero() } else { g[k] }
                            }
                            OpKind::Maximum => {
                                if xb[k] > xa[k] { T::zero() } else { g[k] }
                            }
                            _ => unreachable!(),
                        };
                    }
                }
                if slot(grads, *b) {
                    let gb = &mut grads[b.0];
                    for k in 0..g.len() {
                        gb[k] += match kind {
                            OpKind::Add => g[k],
                            OpKind::Sub => -g[k],
                            OpKind::Mul => g[k] * xa[k],
                            OpKind::Div => -g[k] * xa[k] / (xb[k] * xb[k]),
                            OpKind::Minimum => {
                                if xb[k] < xa[k] { g[k] } else { T::zero() }
                            }
                            OpKind::Maximum => {
                                if xb[k] > xa[k] { g[k] } else { T::zero() }
                            }
                            _ => unreachable!(),
                        };
                    }
                }
            }
            Op::AddBias(x, b) => {
                if slot(grads, *x) {
                    kernels::axpy(&mut grads[x.0], T::one(), g);
                }
                if slot(grads, *b) {
                    let f = self.fault_factor(OpKind::AddBias);
                    let inner = nodes[x.0].shape.inner();
                    for (gb, row) in grads[b.0].iter_mut().zip(g.chunks_exact(inner)) {
                        *gb += f * row.iter().fold(T::zero(), |s, &v| s + v);
                    }
                }
            }
            Op::Scale(x, alpha) => {
                if slot(grads, *x) {
                    kernels::axpy(&mut grads[x.0], *alpha, g);
                }
            }
            Op::Unary(kind, x) => {
                if !slot(grads, *x) {
                    return;
                }
                let xs = &nodes[x.0].data;
                let gx = &mut grads[x.0];
                match kind {
                    OpKind::Neg => gx.iter_mut().zip(g).for_each(|(a, &d)| *a -= d),
                    OpKind::AddScalar | OpKind::Reshape => kernels::axpy(gx, T::one(), g),
                    OpKind::Relu => {
                        for k in 0..g.len() {
                            if xs[k] > T::zero() {
                                gx[k] += g[k];
                            }
                        }
                    }
                    OpKind::Silu => {
                        for k in 0..g.len() {
                            let s = sigmoid(xs[k]);
                            gx[k] += g[k] * (s + xs[k] * s * (T::one() - s));
                        }
                    }
                    OpKind::Sigmoid => {
                        for k in 0..g.len() {
                            gx[k] += g[k] * out[k] * (T::one() - out[k]);
                        }
                    }
                    OpKind::Exp => {
                        for k in 0..g.len() {
                            gx[k] += g[k] * out[k];
                        }
                    }
                    OpKind::Log => {
                        for k in 0..g.len() {
                            gx[k] += g[k] / xs[k];
                        }
                    }
                    OpKind::Sum => gx.iter_mut().for_each(|a| *a += g[0]),
                    OpKind::Mean => {
                        let d = g[0] / T::of(xs.len() as f64);
                        gx.iter_mut().for_each(|a| *a += d);
                    }
                    OpKind::LogSumExp => {
                        let lse = out[0];
                        for k in 0..xs.len() {
                            gx[k] += g[0] * (xs[k] - lse).exp();
                        }
                    }
                    OpKind::GlobalAvgPool => {
                        let inner = nodes[x.0].shape.inner();
                        let n = T::of(inner as f64);
                        for (row, &d) in gx.chunks_exact_mut(inner).zip(g) {
                            let v = d / n;
                            row.iter_mut().for_each(|a| *a += v);
                        }
                    }
                    _ => unreachable!("not a unary op"),
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].data.len();
                    if slot(grads, *p) {
                        kernels::axpy(&mut grads[p.0], T::one(), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Narrow { x, offset } => {
                if slot(grads, *x) {
                    kernels::axpy(&mut grads[x.0][*offset..*offset + g.len()], T::one(), g);
                }
            }
            Op::Gather { x, idx } => {
                if slot(grads, *x) {
                    let gx = &mut grads[x.0];
                    for (&j, &d) in idx.iter().zip(g) {
                        gx[j] += d;
                    }
                }
            }
            Op::Conv2d { x, w, geom } => {
                let xs = &nodes[x.0].data;
                let ws = &nodes[w.0].data;
                let c_out = nodes[i].shape.leading();
                let (kp, p) = (geom.patch(), geom.positions());
                let col;
                let col_ref: &[T] = if geom.is_pointwise() {
                    xs
                } else {
                    col = kernels::im2col(xs, geom);
                    &col
                };
                if slot(grads, *w) {
                    let f = self.fault_factor(OpKind::Conv2d);
                    if f == T::one() {
                        kernels::gemm_bt_acc(&mut grads[w.0], g, col_ref, c_out, kp, p);
                    } else {
                        let mut dw = vec![T::zero(); c_out * kp];
                        kernels::gemm_bt_acc(&mut dw, g, col_ref, c_out, kp, p);
                        kernels::axpy(&mut grads[w.0], f, &dw);
                    }
                }
                if slot(grads, *x) {
                    if geom.is_pointwise() {
                        kernels::gemm_at_acc(&mut grads[x.0], ws, g, c_out, kp, p);
                    } else {
                        let mut dcol = vec![T::zero(); kp * p];
                        kernels::gemm_at_acc(&mut dcol, ws, g, c_out, kp, p);
                        kernels::col2im_acc(&dcol, geom, &mut grads[x.0]);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = &nodes[x.0].data;
                let ws = &nodes[w.0].data;
                let d_in = xs.len();
                let f = self.fault_factor(OpKind::Linear);
                if slot(grads, *x) {
                    kernels::gemm_at_acc(&mut grads[x.0], ws, g, g.len(), d_in, 1);
                }
                if slot(grads, *w) {
                    let gw = &mut grads[w.0];
                    for (row, &d) in gw.chunks_exact_mut(d_in).zip(g) {
                        kernels::axpy(row, f * d, xs);
                    }
                }
                if slot(grads, *b) {
                    kernels::axpy(&mut grads[b.0], f, g);
                }
            }
            Op::CosineSim(a, b) => {
                let (xa, xb) = (&nodes[a.0].data, &nodes[b.0].data);
                let na = kernels::dot(xa, xa).sqrt();
                let nb = kernels::dot(xb, xb).sqrt();
                let c = out[0];
                let inv = T::one() / (na * nb);
                if slot(grads, *a) {
                    let ca = c / (na * na);
                    let ga = &mut grads[a.0];
                    for k in 0..xa.len() {
                        ga[k] += g[0] * (xb[k] * inv - ca * xa[k]);
                    }
                }
                if slot(grads, *b) {
                    let cb = c / (nb * nb);
                    let gb = &mut grads[b.0];
                    for k in 0..xb.len() {
                        gb[k] += g[0] * (xa[k] * inv - cb * xb[k]);
                    }
                }
            }
            Op::BceWithLogits(x, t) => {
                let (xs, ts) = (&nodes[x.0].data, &nodes[t.0].data);
                if slot(grads, *x) {
                    let gx = &mut grads[x.0];
                    for k in 0..g.len() {
                        gx[k] += g[k] * (sigmoid(xs[k]) - ts[k]);
                    }
                }
                if slot(grads, *t) {
                    let gt = &mut grads[t.0];
                    for k in 0..g.len() {
                        gt[k] -= g[k] * xs[k];
                    }
                }
            }
        }
    }
}
