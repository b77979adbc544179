//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every operation evaluates eagerly and records its
//! inputs, so node indices are already a topological order. [`Graph::backward`]
//! walks the tape in reverse and accumulates vector-Jacobian products.
//!
//! Only the operations the view-synthesis towers need are provided: valid
//! stride-1 convolution, relu, tanh, softmax along an axis, broadcasting
//! multiply, axis sums, concatenation, nearest-neighbor upsampling, spatial
//! cropping, reshape and the L1 loss.

mod gradcheck;
mod tensor;

use std::collections::BTreeMap;

use thiserror::Error;

pub use gradcheck::{grad_check, op_suite, relative_error, GradCheckReport, SUITE_OPS};
pub use tensor::{Element, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParameter(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Conv2d { input: Var, weight: Var, bias: Var },
    Relu(Var),
    Tanh(Var),
    Softmax { input: Var, axis: usize },
    Mul(Var, Var),
    SumAxis { input: Var, axis: usize },
    SumAll(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Upsample { input: Var, factor: usize },
    Crop { input: Var, top: usize, left: usize },
    Reshape(Var),
    L1 { pred: Var, target: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    kink_margin: f64,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), kink_margin: f64::INFINITY }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Named parameter leaves in registration order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// Smallest distance to a non-differentiable point seen so far
    /// (relu inputs at 0, L1 residuals at 0).
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    fn push(&mut self, value: Tensor<T>, op: Op, op_name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Input => false,
            Op::Param => true,
            Op::Conv2d { input, weight, bias } => [input, weight, bias].iter().any(|v| self.requires(**v)),
            Op::Relu(a) | Op::Tanh(a) | Op::SumAll(a) | Op::Reshape(a) => self.requires(*a),
            Op::Softmax { input, .. }
            | Op::SumAxis { input, .. }
            | Op::Upsample { input, .. }
            | Op::Crop { input, .. } => self.requires(*input),
            Op::Mul(a, b) => self.requires(*a) || self.requires(*b),
            Op::Concat { parts, .. } => parts.iter().any(|v| self.requires(*v)),
            Op::L1 { pred, target } => self.requires(*pred) || self.requires(*target),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf; receives no gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Input, "input")
    }

    /// Named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<Var> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(TensorError::DuplicateParameter(name.to_string()));
        }
        let v = self.push(value, Op::Param, "param")?;
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    /// Valid, stride-1 cross-correlation plus per-channel bias.
    ///
    /// `input` is `[C_in, H, W]` or `[N, C_in, H, W]`, `weight` is
    /// `[C_out, C_in, kh, kw]` and `bias` is `[C_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (n, c, h, wd, batched) = match *x.shape() {
            [c, h, w] => (1, c, h, w, false),
            [n, c, h, w] => (n, c, h, w, true),
            ref s => return Err(TensorError::ShapeMismatch(format!("conv2d input must be rank 3 or 4, got {s:?}"))),
        };
        let [co, ci, kh, kw] = *w.shape() else {
            return Err(TensorError::ShapeMismatch(format!("conv2d weight must be rank 4, got {:?}", w.shape())));
        };
        if ci != c {
            return Err(TensorError::ShapeMismatch(format!("conv2d weight expects {ci} input channels, input has {c}")));
        }
        if b.shape() != [co] {
            return Err(TensorError::ShapeMismatch(format!("conv2d bias must be [{co}], got {:?}", b.shape())));
        }
        if kh == 0 || kw == 0 || kh > h || kw > wd {
            return Err(TensorError::InvalidArgument(format!("kernel {kh}x{kw} does not fit input {h}x{wd}")));
        }
        let (ho, wo) = (h - kh + 1, wd - kw + 1);
        let out = conv_forward(x.data(), w.data(), b.data(), n, c, h, wd, co, kh, kw);
        let shape = if batched { vec![n, co, ho, wo] } else { vec![co, ho, wo] };
        self.push(Tensor::new(shape, out)?, Op::Conv2d { input, weight, bias }, "conv2d")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let margin = v.data().iter().fold(f64::INFINITY, |m, a| m.min(a.as_f64().abs()));
        let out = v.map(|a| a.max(T::zero()));
        self.kink_margin = self.kink_margin.min(margin);
        self.push(out, Op::Relu(x), "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|a| a.tanh());
        self.push(out, Op::Tanh(x), "tanh")
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, n, inner) = split_axis(v.shape(), axis)?;
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).fold(T::neg_infinity(), |m, k| m.max(src[at(k)]));
                let mut s = T::zero();
                for k in 0..n {
                    let e = (src[at(k)] - m).exp();
                    out[at(k)] = e;
                    s = s + e;
                }
                for k in 0..n {
                    out[at(k)] = out[at(k)] / s;
                }
            }
        }
        let shape = v.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Softmax { input: x, axis }, "softmax")
    }

    /// Elementwise product. Operands must share rank; any axis may have
    /// extent 1 on one side and is then broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(va.shape(), vb.shape())?;
        let ia = broadcast_index(&shape, va.shape());
        let ib = broadcast_index(&shape, vb.shape());
        let (da, db) = (va.data(), vb.data());
        let out = ia.iter().zip(&ib).map(|(&i, &j)| da[i] * db[j]).collect();
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b), "mul")
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        let (outer, n, inner) = split_axis(v.shape(), axis)?;
        let src = v.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + s;
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        self.push(Tensor::new(shape, out)?, Op::SumAxis { input: x, axis }, "sum_axis")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), "sum")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of an empty list".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let conforms = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !conforms {
                return Err(TensorError::ShapeMismatch(format!("cannot concat {s:?} with {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let n = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(Tensor::new(shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, "concat")
    }

    /// Nearest-neighbor upsampling of the last two axes by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let v = self.value(x);
        let r = v.rank();
        if r < 2 || factor == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "upsample needs rank >= 2 and factor >= 1 (shape {:?}, factor {factor})",
                v.shape()
            )));
        }
        let (h, w) = (v.shape()[r - 2], v.shape()[r - 1]);
        let outer = v.len() / (h * w).max(1);
        let (ho, wo) = (h * factor, w * factor);
        let src = v.data();
        let mut out = Vec::with_capacity(outer * ho * wo);
        for o in 0..outer {
            for y in 0..ho {
                let row = &src[(o * h + y / factor) * w..(o * h + y / factor + 1) * w];
                for x in 0..wo {
                    out.push(row[x / factor]);
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        self.push(Tensor::new(shape, out)?, Op::Upsample { input: x, factor }, "upsample_nearest")
    }

    /// Spatial crop of the last two axes.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let v = self.value(x);
        let r = v.rank();
        if r < 2 {
            return Err(TensorError::InvalidArgument("crop needs rank >= 2".into()));
        }
        let (h, w) = (v.shape()[r - 2], v.shape()[r - 1]);
        if top + height > h || left + width > w {
            return Err(TensorError::InvalidArgument(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds {h}x{w}"
            )));
        }
        let outer = v.len() / (h * w).max(1);
        let src = v.data();
        let mut out = Vec::with_capacity(outer * height * width);
        for o in 0..outer {
            for y in 0..height {
                let start = (o * h + top + y) * w + left;
                out.extend_from_slice(&src[start..start + width]);
            }
        }
        let mut shape = v.shape().to_vec();
        shape[r - 2] = height;
        shape[r - 1] = width;
        self.push(Tensor::new(shape, out)?, Op::Crop { input: x, top, left }, "crop")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.push(out, Op::Reshape(x), "reshape")
    }

    /// `sum |pred - target|` over all elements.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "l1 loss between {:?} and {:?}",
                p.shape(),
                t.shape()
            )));
        }
        let mut margin = f64::INFINITY;
        let mut s = T::zero();
        for (&a, &b) in p.data().iter().zip(t.data()) {
            let d = a - b;
            margin = margin.min(d.as_f64().abs());
            s = s + d.abs();
        }
        self.kink_margin = self.kink_margin.min(margin);
        self.push(Tensor::scalar(s), Op::L1 { pred, target }, "l1_loss")
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        let mut param_grads: BTreeMap<usize, Tensor<T>> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    param_grads.insert(idx, g);
                }
                Op::Conv2d { input, weight, bias } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let (n, c, h, wd) = match *x.shape() {
                        [c, h, w] => (1, c, h, w),
                        [n, c, h, w] => (n, c, h, w),
                        _ => unreachable!("validated in forward"),
                    };
                    let [co, _, kh, kw] = *w.shape() else { unreachable!() };
                    let geo = ConvGeometry { n, c, h, w: wd, co, kh, kw };
                    let need_x = self.requires(*input);
                    let need_w = self.requires(*weight) || self.requires(*bias);
                    let (gx, gw, gb) = conv_backward(x.data(), w.data(), g.data(), geo, need_x, need_w);
                    if let Some(gx) = gx {
                        self.accumulate(&mut grads, *input, Tensor::new(x.shape().to_vec(), gx)?)?;
                    }
                    if let Some((gw, gb)) = gw.zip(gb) {
                        self.accumulate(&mut grads, *weight, Tensor::new(w.shape().to_vec(), gw)?)?;
                        self.accumulate(&mut grads, *bias, Tensor::new(vec![co], gb)?)?;
                    }
                }
                Op::Relu(a) => {
                    let y = &node.value;
                    let gx = Tensor::from_fn(y.shape(), |i| if y.data()[i] > T::zero() { g.data()[i] } else { T::zero() });
                    self.accumulate(&mut grads, *a, gx)?;
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let gx = Tensor::from_fn(y.shape(), |i| {
                        let t = y.data()[i];
                        g.data()[i] * (T::one() - t * t)
                    });
                    self.accumulate(&mut grads, *a, gx)?;
                }
                Op::Softmax { input, axis } => {
                    let y = &node.value;
                    let (outer, n, inner) = split_axis(y.shape(), *axis)?;
                    let (yd, gd) = (y.data(), g.data());
                    let mut gx = vec![T::zero(); yd.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot = (0..n).fold(T::zero(), |s, k| s + gd[at(k)] * yd[at(k)]);
                            for k in 0..n {
                                gx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                            }
                        }
                    }
                    self.accumulate(&mut grads, *input, Tensor::new(y.shape().to_vec(), gx)?)?;
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let shape = node.value.shape();
                    let ia = broadcast_index(shape, va.shape());
                    let ib = broadcast_index(shape, vb.shape());
                    if self.requires(*a) {
                        let mut ga = vec![T::zero(); va.len()];
                        for (o, (&i, &j)) in ia.iter().zip(&ib).enumerate() {
                            ga[i] = ga[i] + g.data()[o] * vb.data()[j];
                        }
                        self.accumulate(&mut grads, *a, Tensor::new(va.shape().to_vec(), ga)?)?;
                    }
                    if self.requires(*b) {
                        let mut gb = vec![T::zero(); vb.len()];
                        for (o, (&i, &j)) in ia.iter().zip(&ib).enumerate() {
                            gb[j] = gb[j] + g.data()[o] * va.data()[i];
                        }
                        self.accumulate(&mut grads, *b, Tensor::new(vb.shape().to_vec(), gb)?)?;
                    }
                }
                Op::SumAxis { input, axis } => {
                    let x = self.value(*input);
                    let (outer, n, inner) = split_axis(x.shape(), *axis)?;
                    let gd = g.data();
                    let mut gx = Vec::with_capacity(x.len());
                    for o in 0..outer {
                        for _ in 0..n {
                            gx.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                        }
                    }
                    self.accumulate(&mut grads, *input, Tensor::new(x.shape().to_vec(), gx)?)?;
                }
                Op::SumAll(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    self.accumulate(&mut grads, *a, Tensor::full(&shape, g.item()))?;
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).shape()[*axis];
                        if self.requires(*p) {
                            let gp = g.slice_axis(*axis, offset, len)?;
                            self.accumulate(&mut grads, *p, gp)?;
                        }
                        offset += len;
                    }
                }
                Op::Upsample { input, factor } => {
                    let x = self.value(*input);
                    let r = x.rank();
                    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
                    let (ho, wo) = (h * factor, w * factor);
                    let outer = x.len() / (h * w).max(1);
                    let gd = g.data();
                    let mut gx = vec![T::zero(); x.len()];
                    for o in 0..outer {
                        for y in 0..ho {
                            for xx in 0..wo {
                                let t = &mut gx[(o * h + y / factor) * w + xx / factor];
                                *t = *t + gd[(o * ho + y) * wo + xx];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *input, Tensor::new(x.shape().to_vec(), gx)?)?;
                }
                Op::Crop { input, top, left } => {
                    let x = self.value(*input);
                    let r = x.rank();
                    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
                    let (ch, cw) = (node.value.shape()[r - 2], node.value.shape()[r - 1]);
                    let outer = x.len() / (h * w).max(1);
                    let mut gx = vec![T::zero(); x.len()];
                    for o in 0..outer {
                        for y in 0..ch {
                            let dst = (o * h + top + y) * w + left;
                            gx[dst..dst + cw].copy_from_slice(&g.data()[(o * ch + y) * cw..(o * ch + y + 1) * cw]);
                        }
                    }
                    self.accumulate(&mut grads, *input, Tensor::new(x.shape().to_vec(), gx)?)?;
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    self.accumulate(&mut grads, *a, g.reshaped(&shape)?)?;
                }
                Op::L1 { pred, target } => {
                    let (p, t) = (self.value(*pred), self.value(*target));
                    let scale = g.item();
                    let sign = |i: usize| {
                        let d = p.data()[i] - t.data()[i];
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    };
                    if self.requires(*pred) {
                        self.accumulate(&mut grads, *pred, Tensor::from_fn(p.shape(), sign))?;
                    }
                    if self.requires(*target) {
                        self.accumulate(&mut grads, *target, Tensor::from_fn(t.shape(), |i| -sign(i)))?;
                    }
                }
            }
        }

        let params = self
            .params
            .iter()
            .map(|(name, v)| {
                let g = param_grads.remove(&v.0).unwrap_or_else(|| Tensor::zeros(self.value(*v).shape()));
                (name.clone(), g)
            })
            .collect();
        Ok(Gradients { params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], target: Var, g: Tensor<T>) -> Result<()> {
        if !self.requires(target) {
            return Ok(());
        }
        match &mut grads[target.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }
}

/// Gradients of every registered parameter, keyed by name.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidArgument(format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product()))
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch(format!("mul operands {a:?} and {b:?} differ in rank")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(TensorError::ShapeMismatch(format!("mul operands {a:?} and {b:?} do not broadcast"))),
        })
        .collect()
}

/// For every element of `out_shape`, the linear index into a tensor of `shape`
/// broadcast against it.
fn broadcast_index(out_shape: &[usize], shape: &[usize]) -> Vec<usize> {
    if out_shape == shape {
        return (0..shape.iter().product()).collect();
    }
    let r = shape.len();
    let mut strides = vec![0; r];
    let mut s = 1;
    for d in (0..r).rev() {
        strides[d] = if shape[d] == 1 { 0 } else { s };
        s *= shape[d];
    }
    let n: usize = out_shape.iter().product();
    let mut idx = vec![0usize; r];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..r).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeometry {
    fn out_hw(&self) -> (usize, usize) {
        (self.h - self.kh + 1, self.w - self.kw + 1)
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1
    }
}

/// Unfolds every `[C, H, W]` image of the batch into one
/// `(C*kh*kw) x (N*Ho*Wo)` matrix; image `i` occupies columns `[i*P, (i+1)*P)`.
fn im2col<T: Element>(x: &[T], g: ConvGeometry, cols: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let np = g.n * p;
    let img = g.c * g.h * g.w;
    for i in 0..g.n {
        let xi = &x[i * img..(i + 1) * img];
        for ci in 0..g.c {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (ci * g.kh + ky) * g.kw + kx;
                    let dst = &mut cols[row * np + i * p..row * np + (i + 1) * p];
                    for oy in 0..ho {
                        let src = (ci * g.h + oy + ky) * g.w + kx;
                        dst[oy * wo..(oy + 1) * wo].copy_from_slice(&xi[src..src + wo]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `dx`.
fn col2im_add<T: Element>(cols: &[T], g: ConvGeometry, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let np = g.n * p;
    let img = g.c * g.h * g.w;
    for i in 0..g.n {
        let dxi = &mut dx[i * img..(i + 1) * img];
        for ci in 0..g.c {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let row = (ci * g.kh + ky) * g.kw + kx;
                    let src = &cols[row * np + i * p..row * np + (i + 1) * p];
                    for oy in 0..ho {
                        let dst = (ci * g.h + oy + ky) * g.w + kx;
                        for (d, &s) in dxi[dst..dst + wo].iter_mut().zip(&src[oy * wo..(oy + 1) * wo]) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}

/// `[N, R, P]` -> `[R, N*P]`.
fn batch_to_rows<T: Element>(x: &[T], n: usize, r: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for row in 0..r {
            out[row * n * p + i * p..row * n * p + (i + 1) * p].copy_from_slice(&x[(i * r + row) * p..(i * r + row + 1) * p]);
        }
    }
    out
}

/// `[R, N*P]` -> `[N, R, P]`.
fn rows_to_batch<T: Element>(x: &[T], n: usize, r: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..n {
        for row in 0..r {
            out[(i * r + row) * p..(i * r + row + 1) * p].copy_from_slice(&x[row * n * p + i * p..row * n * p + (i + 1) * p]);
        }
    }
    out
}

/// Input of the batched GEMM: `[K, N*P]` patch matrix (or the channel rows for 1x1 kernels).
fn patch_matrix<T: Element>(x: &[T], g: ConvGeometry) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    if g.is_pointwise() {
        if g.n == 1 {
            return x.to_vec();
        }
        return batch_to_rows(x, g.n, g.c, p);
    }
    let mut cols = vec![T::zero(); g.patch_len() * g.n * p];
    im2col(x, g, &mut cols);
    cols
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Element>(
    x: &[T],
    w: &[T],
    b: &[T],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    co: usize,
    kh: usize,
    kw: usize,
) -> Vec<T> {
    let g = ConvGeometry { n, c, h, w: wd, co, kh, kw };
    let (ho, wo) = g.out_hw();
    let (k, np) = (g.patch_len(), n * ho * wo);
    let cols = patch_matrix(x, g);
    let mut out = vec![T::zero(); co * np];
    for (o, &bias) in b.iter().enumerate() {
        out[o * np..(o + 1) * np].fill(bias);
    }
    T::gemm(co, k, np, T::one(), w, k as isize, 1, &cols, np as isize, 1, T::one(), &mut out, np as isize, 1);
    if n == 1 {
        out
    } else {
        rows_to_batch(&out, n, co, ho * wo)
    }
}

type ConvGrads<T> = (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>);

fn conv_backward<T: Element>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: ConvGeometry,
    need_x: bool,
    need_w: bool,
) -> ConvGrads<T> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let (k, np) = (g.patch_len(), g.n * p);
    let grows = if g.n == 1 { gout.to_vec() } else { batch_to_rows(gout, g.n, g.co, p) };
    let (mut gw, mut gb) = (None, None);
    if need_w {
        let cols = patch_matrix(x, g);
        let mut dw = vec![T::zero(); g.co * k];
        // dW = dOut * cols^T
        T::gemm(g.co, np, k, T::one(), &grows, np as isize, 1, &cols, 1, np as isize, T::zero(), &mut dw, k as isize, 1);
        gb = Some((0..g.co).map(|o| grows[o * np..(o + 1) * np].iter().copied().sum()).collect());
        gw = Some(dw);
    }
    let gx = need_x.then(|| {
        let mut dcols = vec![T::zero(); k * np];
        T::gemm(k, g.co, np, T::one(), w, 1, k as isize, &grows, np as isize, 1, T::zero(), &mut dcols, np as isize, 1);
        if g.is_pointwise() {
            if g.n == 1 {
                dcols
            } else {
                rows_to_batch(&dcols, g.n, g.c, p)
            }
        } else {
            let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
            col2im_add(&dcols, g, &mut dx);
            dx
        }
    });
    (gx, gw, gb)
}

#[cfg(test)]
mod tests;
