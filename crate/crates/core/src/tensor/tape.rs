use super::kernels as k;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An op application together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf,
    /// `x (n,in) · wᵀ (out,in) + b (out)`
    Dense,
    /// Stride-1 convolution with symmetric zero padding. Inputs: x, w (o,c,kh,kw), b.
    Conv2d { padding: usize },
    /// Inputs: x, w (c,o,k,k), b.
    TransposedConv2d { stride: usize, padding: usize },
    /// Stride-1 volumetric convolution. Inputs: x (n,c,d,h,w), w (o,c,kd,kh,kw), b.
    Conv3d { padding: usize },
    Relu,
    LeakyRelu { slope: f64 },
    MaxPool2x2,
    /// Non-overlapping window over the last two axes.
    AvgPool { window: (usize, usize) },
    BilinearUpsample2x,
    TrilinearUpsample2x,
    ConcatChannels,
    Add,
    Mul,
    Sub,
    ScalarMul(f64),
    Sum,
    Mean,
    Abs,
    /// `ln(x + 1e-12)`
    Log,
    Exp,
    /// Over the last axis.
    Softmax,
    Sigmoid,
    Softplus,
    Reshape(Vec<usize>),
    /// Picks `x[n, cols[n]]` from an (n,k) input.
    SelectColumns(Vec<usize>),
    /// Mean cross-entropy of (n,k) logits against integer labels.
    SoftmaxCrossEntropy(Vec<usize>),
}

/// Parameter-free discriminant of [`Op`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Dense,
    Conv2d,
    TransposedConv2d,
    Conv3d,
    Relu,
    LeakyRelu,
    MaxPool2x2,
    AvgPool,
    BilinearUpsample2x,
    TrilinearUpsample2x,
    ConcatChannels,
    Add,
    Mul,
    Sub,
    ScalarMul,
    Sum,
    Mean,
    Abs,
    Log,
    Exp,
    Softmax,
    Sigmoid,
    Softplus,
    Reshape,
    SelectColumns,
    SoftmaxCrossEntropy,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Dense => OpKind::Dense,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::TransposedConv2d { .. } => OpKind::TransposedConv2d,
            Op::Conv3d { .. } => OpKind::Conv3d,
            Op::Relu => OpKind::Relu,
            Op::LeakyRelu { .. } => OpKind::LeakyRelu,
            Op::MaxPool2x2 => OpKind::MaxPool2x2,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::BilinearUpsample2x => OpKind::BilinearUpsample2x,
            Op::TrilinearUpsample2x => OpKind::TrilinearUpsample2x,
            Op::ConcatChannels => OpKind::ConcatChannels,
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::Sub => OpKind::Sub,
            Op::ScalarMul(_) => OpKind::ScalarMul,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::Abs => OpKind::Abs,
            Op::Log => OpKind::Log,
            Op::Exp => OpKind::Exp,
            Op::Softmax => OpKind::Softmax,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::Softplus => OpKind::Softplus,
            Op::Reshape(_) => OpKind::Reshape,
            Op::SelectColumns(_) => OpKind::SelectColumns,
            Op::SoftmaxCrossEntropy(_) => OpKind::SoftmaxCrossEntropy,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind() {
            OpKind::Leaf => "leaf",
            OpKind::Dense => "dense",
            OpKind::Conv2d => "conv2d",
            OpKind::TransposedConv2d => "transposed_conv2d",
            OpKind::Conv3d => "conv3d",
            OpKind::Relu => "relu",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::MaxPool2x2 => "maxpool2x2",
            OpKind::AvgPool => "avgpool",
            OpKind::BilinearUpsample2x => "bilinear_upsample2x",
            OpKind::TrilinearUpsample2x => "trilinear_upsample2x",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Sub => "sub",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Abs => "abs",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Softmax => "softmax",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::Reshape => "reshape",
            OpKind::SelectColumns => "select_columns",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Leaf => Some(0),
            Op::Dense | Op::Conv2d { .. } | Op::TransposedConv2d { .. } | Op::Conv3d { .. } => {
                Some(3)
            }
            Op::Add | Op::Mul | Op::Sub => Some(2),
            Op::ConcatChannels => None,
            _ => Some(1),
        }
    }

    fn is_elementwise_unary(&self) -> bool {
        matches!(
            self,
            Op::Relu
                | Op::LeakyRelu { .. }
                | Op::Abs
                | Op::Log
                | Op::Exp
                | Op::Sigmoid
                | Op::Softplus
        )
    }
}

const LOG_EPS: f64 = 1e-12;
/// Below this input difference the rescale rule falls back to the local gradient.
const RESCALE_EPS: f64 = 1e-7;

/// How gradients propagate through nonlinear ops.
#[derive(Clone, Copy)]
pub enum BackwardMode<'a, T: Scalar = f32> {
    Standard,
    /// Relu gates additionally discard negative upstream gradient.
    Guided,
    /// DeepLift rescale multipliers against a reference tape of identical structure.
    Rescale(&'a Tape<T>),
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    op: Op,
    parents: Vec<Var>,
    value: Tensor<T>,
    needs_grad: bool,
    argmax: Vec<usize>,
}

/// Ordered record of op applications; parents always precede consumers.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like `like` when the value was unreachable.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape().to_vec()))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn op(&self, var: Var) -> &Op {
        &self.nodes[var.0].op
    }

    /// Trainable (gradient-tracked) input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, Vec::new(), value, true, Vec::new())
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, Vec::new(), value, false, Vec::new())
    }

    /// True when an op of `kind` lies on a gradient-tracked path.
    pub fn contains_tracked(&self, kind: OpKind) -> bool {
        self.nodes
            .iter()
            .any(|n| n.needs_grad && n.op.kind() == kind)
    }

    fn push(&mut self, op: Op, parents: Vec<Var>, value: Tensor<T>, needs_grad: bool, argmax: Vec<usize>) -> Var {
        self.nodes.push(Node {
            op,
            parents,
            value,
            needs_grad,
            argmax,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `op` applied to `inputs` and returns the new value's handle.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(Error::shape(
                    op.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ));
            }
        } else if inputs.is_empty() {
            return Err(Error::shape(op.name(), "no inputs"));
        }
        if matches!(op, Op::Leaf) {
            return Err(Error::invalid("leaves are created with leaf()/constant()"));
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::invalid(format!("unknown value id {}", bad.0)));
        }
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let (value, argmax) = forward(&op, &values)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(op, inputs.to_vec(), value, needs_grad, argmax))
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(Op::Dense, &[x, w, b])
    }
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: usize) -> Result<Var> {
        self.apply(Op::Conv2d { padding }, &[x, w, b])
    }
    pub fn transposed_conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Op::TransposedConv2d { stride, padding }, &[x, w, b])
    }
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, padding: usize) -> Result<Var> {
        self.apply(Op::Conv3d { padding }, &[x, w, b])
    }
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.apply(Op::LeakyRelu { slope }, &[x])
    }
    pub fn maxpool2x2(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::MaxPool2x2, &[x])
    }
    pub fn avg_pool(&mut self, x: Var, window: usize) -> Result<Var> {
        self.apply(Op::AvgPool { window: (window, window) }, &[x])
    }
    /// Average over the two trailing axes, keeping them as extent 1.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() < 2 {
            return Err(Error::shape("avgpool", format!("rank {} input", s.len())));
        }
        let window = (s[s.len() - 2], s[s.len() - 1]);
        self.apply(Op::AvgPool { window }, &[x])
    }
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::BilinearUpsample2x, &[x])
    }
    pub fn upsample3d_2x(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::TrilinearUpsample2x, &[x])
    }
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(Op::ConcatChannels, xs)
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.apply(Op::ScalarMul(s), &[x])
    }
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sum, &[x])
    }
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Mean, &[x])
    }
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Abs, &[x])
    }
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Log, &[x])
    }
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Exp, &[x])
    }
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[x])
    }
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[x])
    }
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Softplus, &[x])
    }
    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(Op::Reshape(shape.into()), &[x])
    }
    pub fn select_columns(&mut self, x: Var, cols: Vec<usize>) -> Result<Var> {
        self.apply(Op::SelectColumns(cols), &[x])
    }
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        self.apply(Op::SoftmaxCrossEntropy(labels), &[logits])
    }

    /// Gradients of a scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let v = self.value(loss);
        if v.len() != 1 {
            return Err(Error::NotScalar(v.shape().to_vec()));
        }
        let seed = Tensor::full(v.shape().to_vec(), T::one());
        self.backward_from(loss, seed, BackwardMode::Standard)
    }

    /// Vector-Jacobian product seeded with `seed` at `output`.
    pub fn backward_from(&self, output: Var, seed: Tensor<T>, mode: BackwardMode<'_, T>) -> Result<Gradients<T>> {
        if output.0 >= self.nodes.len() {
            return Err(Error::invalid(format!("unknown value id {}", output.0)));
        }
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed {:?} vs output {:?}",
                    seed.shape(),
                    self.value(output).shape()
                ),
            ));
        }
        if let BackwardMode::Rescale(reference) = mode {
            self.check_same_structure(reference)?;
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || node.parents.is_empty() {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let parent_grads = self.backward_node(i, &gy, mode)?;
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                match &mut grads[p.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn check_same_structure(&self, other: &Tape<T>) -> Result<()> {
        if other.nodes.len() != self.nodes.len() {
            return Err(Error::invalid(format!(
                "reference tape has {} values, expected {}",
                other.nodes.len(),
                self.nodes.len()
            )));
        }
        for (i, (a, b)) in self.nodes.iter().zip(&other.nodes).enumerate() {
            if a.op != b.op || a.parents != b.parents || a.value.shape() != b.value.shape() {
                return Err(Error::invalid(format!(
                    "reference tape diverges at value {i} ({} vs {})",
                    a.op.name(),
                    b.op.name()
                )));
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, gy: &Tensor<T>, mode: BackwardMode<'_, T>) -> Result<Vec<Option<Tensor<T>>>> {
        let node = &self.nodes[i];
        let want = |j: usize| self.nodes[node.parents[j].0].needs_grad;
        let pv = |j: usize| &self.nodes[node.parents[j].0].value;
        let y = &node.value;
        let g = gy.data();

        if node.op.is_elementwise_unary() {
            let x = pv(0);
            let local: Vec<T> = match mode {
                BackwardMode::Rescale(reference) => {
                    let xr = reference.value(node.parents[0]);
                    let yr = &reference.nodes[i].value;
                    x.data()
                        .iter()
                        .zip(xr.data())
                        .zip(y.data().iter().zip(yr.data()))
                        .map(|((&a, &ar), (&b, &br))| {
                            let dx = a - ar;
                            if dx.abs().as_f64() < RESCALE_EPS {
                                unary_derivative(&node.op, a, b)
                            } else {
                                (b - br) / dx
                            }
                        })
                        .collect()
                }
                _ => x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&a, &b)| unary_derivative(&node.op, a, b))
                    .collect(),
            };
            let guided = matches!(mode, BackwardMode::Guided) && matches!(node.op, Op::Relu);
            let data = g
                .iter()
                .zip(&local)
                .map(|(&gi, &li)| {
                    if guided && gi < T::zero() {
                        T::zero()
                    } else {
                        gi * li
                    }
                })
                .collect();
            return Ok(vec![Some(Tensor::from_parts(x.shape().to_vec(), data))]);
        }

        if let BackwardMode::Rescale(_) = mode {
            match node.op {
                Op::MaxPool2x2 | Op::Softmax | Op::SoftmaxCrossEntropy(_) => {
                    return Err(Error::Unsupported {
                        method: "deeplift",
                        reason: format!("op {} has no rescale rule", node.op.name()),
                    })
                }
                Op::Mul if want(0) && want(1) => {
                    return Err(Error::Unsupported {
                        method: "deeplift",
                        reason: "op mul between two input-dependent values has no rescale rule"
                            .into(),
                    })
                }
                _ => {}
            }
        }

        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Dense => {
                let (x, w) = (pv(0), pv(1));
                let (n, inp, out) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                let (gx, gw, gb) = k::dense_backward(x.data(), n, inp, w.data(), out, g);
                vec![
                    want(0).then(|| Tensor::from_parts(x.shape().to_vec(), gx)),
                    want(1).then(|| Tensor::from_parts(w.shape().to_vec(), gw)),
                    want(2).then(|| Tensor::from_parts(vec![out], gb)),
                ]
            }
            Op::Conv2d { padding } => {
                let (x, w) = (pv(0), pv(1));
                let (gx, gw, gb) = k::conv2d_backward(
                    x.data(),
                    dims4(x),
                    w.data(),
                    dims4(w),
                    *padding,
                    g,
                    want(0),
                );
                vec![
                    gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                    want(1).then(|| Tensor::from_parts(w.shape().to_vec(), gw)),
                    want(2).then(|| Tensor::from_parts(vec![w.shape()[0]], gb)),
                ]
            }
            Op::TransposedConv2d { stride, padding } => {
                let (x, w) = (pv(0), pv(1));
                let (gx, gw, gb) =
                    k::tconv2d_backward(x.data(), dims4(x), w.data(), dims4(w), *stride, *padding, g);
                vec![
                    want(0).then(|| Tensor::from_parts(x.shape().to_vec(), gx)),
                    want(1).then(|| Tensor::from_parts(w.shape().to_vec(), gw)),
                    want(2).then(|| Tensor::from_parts(vec![w.shape()[1]], gb)),
                ]
            }
            Op::Conv3d { padding } => {
                let (x, w) = (pv(0), pv(1));
                let (gx, gw, gb) =
                    k::conv3d_backward(x.data(), dims5(x), w.data(), dims5(w), *padding, g);
                vec![
                    want(0).then(|| Tensor::from_parts(x.shape().to_vec(), gx)),
                    want(1).then(|| Tensor::from_parts(w.shape().to_vec(), gw)),
                    want(2).then(|| Tensor::from_parts(vec![w.shape()[0]], gb)),
                ]
            }
            Op::MaxPool2x2 => {
                let x = pv(0);
                let mut gx = vec![T::zero(); x.len()];
                for (&idx, &gi) in node.argmax.iter().zip(g) {
                    gx[idx] += gi;
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
            }
            Op::AvgPool { window } => {
                let x = pv(0);
                let (planes, h, w) = planes_hw(x.shape());
                let gx = k::avgpool_backward(g, planes, h, w, window.0, window.1);
                vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
            }
            Op::BilinearUpsample2x | Op::TrilinearUpsample2x => {
                let x = pv(0);
                let axes = if matches!(node.op, Op::BilinearUpsample2x) { 2 } else { 3 };
                let s = x.shape();
                let target: Vec<usize> = s[s.len() - axes..].iter().map(|&e| 2 * e).collect();
                let gx = k::resample_backward(g, s, &target);
                vec![Some(Tensor::from_parts(s.to_vec(), gx))]
            }
            Op::ConcatChannels => {
                let outer = y.shape()[0];
                let inner: usize = y.shape()[2..].iter().product();
                let total_c = y.shape()[1];
                let mut offset = 0;
                let mut res = Vec::with_capacity(node.parents.len());
                for j in 0..node.parents.len() {
                    let x = pv(j);
                    let c = x.shape()[1];
                    if want(j) {
                        let mut gx = Vec::with_capacity(x.len());
                        for o in 0..outer {
                            let start = (o * total_c + offset) * inner;
                            gx.extend_from_slice(&g[start..start + c * inner]);
                        }
                        res.push(Some(Tensor::from_parts(x.shape().to_vec(), gx)));
                    } else {
                        res.push(None);
                    }
                    offset += c;
                }
                res
            }
            Op::Add => vec![
                want(0).then(|| gy.clone()),
                want(1).then(|| gy.clone()),
            ],
            Op::Sub => vec![want(0).then(|| gy.clone()), want(1).then(|| gy.map(|v| -v))],
            Op::Mul => {
                let (a, b) = (pv(0), pv(1));
                vec![
                    want(0).then(|| gy.zip_map(b, |gi, bi| gi * bi).expect("same shape")),
                    want(1).then(|| gy.zip_map(a, |gi, ai| gi * ai).expect("same shape")),
                ]
            }
            Op::ScalarMul(s) => {
                let s = T::of(*s);
                vec![Some(gy.map(|v| v * s))]
            }
            Op::Sum | Op::Mean => {
                let x = pv(0);
                let mut v = g[0];
                if matches!(node.op, Op::Mean) {
                    v = v / T::of(x.len() as f64);
                }
                vec![Some(Tensor::full(x.shape().to_vec(), v))]
            }
            Op::Softmax => {
                let cols = *y.shape().last().expect("rank >= 1");
                let rows = y.len() / cols;
                let mut gx = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let yr = &y.data()[r * cols..][..cols];
                    let gr = &g[r * cols..][..cols];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                vec![Some(Tensor::from_parts(y.shape().to_vec(), gx))]
            }
            Op::Reshape(_) => {
                let x = pv(0);
                vec![Some(Tensor::from_parts(x.shape().to_vec(), g.to_vec()))]
            }
            Op::SelectColumns(cols) => {
                let x = pv(0);
                let kk = x.shape()[1];
                let mut gx = vec![T::zero(); x.len()];
                for (n, &c) in cols.iter().enumerate() {
                    gx[n * kk + c] = g[n];
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
            }
            Op::SoftmaxCrossEntropy(labels) => {
                let x = pv(0);
                let (n, kk) = (x.shape()[0], x.shape()[1]);
                let mut p = k::softmax_rows(x.data(), n, kk);
                let scale = g[0] / T::of(n as f64);
                for (r, &l) in labels.iter().enumerate() {
                    p[r * kk + l] -= T::one();
                }
                p.iter_mut().for_each(|v| *v *= scale);
                vec![Some(Tensor::from_parts(x.shape().to_vec(), p))]
            }
            Op::Relu
            | Op::LeakyRelu { .. }
            | Op::Abs
            | Op::Log
            | Op::Exp
            | Op::Sigmoid
            | Op::Softplus => unreachable!("handled above"),
        };
        Ok(out)
    }
}

fn unary_derivative<T: Scalar>(op: &Op, x: T, y: T) -> T {
    match op {
        Op::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Op::LeakyRelu { slope } => {
            if x > T::zero() {
                T::one()
            } else {
                T::of(*slope)
            }
        }
        Op::Abs => {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        }
        Op::Log => T::one() / (x + T::of(LOG_EPS)),
        Op::Exp => y,
        Op::Sigmoid => y * (T::one() - y),
        Op::Softplus => sigmoid(x),
        _ => unreachable!("not an elementwise unary op"),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow for large |x|.
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn dims4<T: Scalar>(t: &Tensor<T>) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

fn dims5<T: Scalar>(t: &Tensor<T>) -> [usize; 5] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3], s[4]]
}

fn planes_hw(s: &[usize]) -> (usize, usize, usize) {
    let r = s.len();
    (s[..r - 2].iter().product(), s[r - 2], s[r - 1])
}

fn expect_rank<T: Scalar>(op: &Op, t: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::shape(
            op.name(),
            format!("{what} must be rank {rank}, got {:?}", t.shape()),
        ));
    }
    Ok(())
}

fn forward<T: Scalar>(op: &Op, xs: &[&Tensor<T>]) -> Result<(Tensor<T>, Vec<usize>)> {
    let name = op.name();
    let unary = |f: &dyn Fn(T) -> T| Tensor::from_parts(xs[0].shape().to_vec(), xs[0].data().iter().map(|&v| f(v)).collect());
    let out = match op {
        Op::Leaf => unreachable!("leaves are not applied"),
        Op::Dense => {
            let (x, w, b) = (xs[0], xs[1], xs[2]);
            expect_rank(op, x, 2, "input")?;
            expect_rank(op, w, 2, "weight")?;
            expect_rank(op, b, 1, "bias")?;
            if w.shape()[1] != x.shape()[1] || b.shape()[0] != w.shape()[0] {
                return Err(Error::shape(
                    name,
                    format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
                ));
            }
            let (n, inp, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
            Tensor::from_parts(vec![n, o], k::dense_forward(x.data(), n, inp, w.data(), b.data(), o))
        }
        Op::Conv2d { padding } => {
            let (x, w, b) = (xs[0], xs[1], xs[2]);
            expect_rank(op, x, 4, "input")?;
            expect_rank(op, w, 4, "weight")?;
            let [n, c, h, wd] = dims4(x);
            let [o, wc, kh, kw] = dims4(w);
            if wc != c || b.shape() != [o] {
                return Err(Error::shape(
                    name,
                    format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
                ));
            }
            let (oh, ow) = k::conv2d_out(h, wd, kh, kw, *padding).ok_or_else(|| {
                Error::shape(name, format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"))
            })?;
            let data = k::conv2d_forward(x.data(), dims4(x), w.data(), dims4(w), b.data(), *padding);
            Tensor::from_parts(vec![n, o, oh, ow], data)
        }
        Op::TransposedConv2d { stride, padding } => {
            let (x, w, b) = (xs[0], xs[1], xs[2]);
            expect_rank(op, x, 4, "input")?;
            expect_rank(op, w, 4, "weight")?;
            let [n, c, h, wd] = dims4(x);
            let [wc, o, kh, kw] = dims4(w);
            if wc != c || kh != kw || b.shape() != [o] || *stride == 0 {
                return Err(Error::shape(
                    name,
                    format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
                ));
            }
            let oh = k::tconv2d_out(h, kh, *stride, *padding);
            let ow = k::tconv2d_out(wd, kh, *stride, *padding);
            let (Some(oh), Some(ow)) = (oh, ow) else {
                return Err(Error::shape(name, format!("padding {padding} too large for kernel {kh}")));
            };
            let data = k::tconv2d_forward(x.data(), dims4(x), w.data(), dims4(w), b.data(), *stride, *padding);
            Tensor::from_parts(vec![n, o, oh, ow], data)
        }
        Op::Conv3d { padding } => {
            let (x, w, b) = (xs[0], xs[1], xs[2]);
            expect_rank(op, x, 5, "input")?;
            expect_rank(op, w, 5, "weight")?;
            let [n, c, d, h, wd] = dims5(x);
            let [o, wc, kd, kh, kw] = dims5(w);
            let p2 = 2 * padding + 1;
            if wc != c || b.shape() != [o] || kd > d + p2 - 1 || kh > h + p2 - 1 || kw > wd + p2 - 1 {
                return Err(Error::shape(
                    name,
                    format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
                ));
            }
            let data = k::conv3d_forward(x.data(), dims5(x), w.data(), dims5(w), b.data(), *padding);
            Tensor::from_parts(vec![n, o, d + p2 - kd, h + p2 - kh, wd + p2 - kw], data)
        }
        Op::Relu => unary(&|v| v.max(T::zero())),
        Op::LeakyRelu { slope } => {
            let s = T::of(*slope);
            unary(&|v| if v > T::zero() { v } else { s * v })
        }
        Op::MaxPool2x2 => {
            let x = xs[0];
            if x.rank() < 2 || x.shape()[x.rank() - 1] < 2 || x.shape()[x.rank() - 2] < 2 {
                return Err(Error::shape(name, format!("input {:?} smaller than 2x2", x.shape())));
            }
            let (planes, h, w) = planes_hw(x.shape());
            let (data, arg) = k::maxpool2_forward(x.data(), planes, h, w);
            let mut shape = x.shape().to_vec();
            let r = shape.len();
            shape[r - 2] = h / 2;
            shape[r - 1] = w / 2;
            return Ok((Tensor::from_parts(shape, data), arg));
        }
        Op::AvgPool { window } => {
            let x = xs[0];
            if x.rank() < 2 {
                return Err(Error::shape(name, format!("rank {} input", x.rank())));
            }
            let (planes, h, w) = planes_hw(x.shape());
            if window.0 == 0 || window.1 == 0 || h % window.0 != 0 || w % window.1 != 0 {
                return Err(Error::shape(
                    name,
                    format!("window {window:?} does not tile {h}x{w}"),
                ));
            }
            let data = k::avgpool_forward(x.data(), planes, h, w, window.0, window.1);
            let mut shape = x.shape().to_vec();
            let r = shape.len();
            shape[r - 2] = h / window.0;
            shape[r - 1] = w / window.1;
            Tensor::from_parts(shape, data)
        }
        Op::BilinearUpsample2x | Op::TrilinearUpsample2x => {
            let x = xs[0];
            let axes = if matches!(op, Op::BilinearUpsample2x) { 2 } else { 3 };
            if x.rank() < axes {
                return Err(Error::shape(name, format!("rank {} input", x.rank())));
            }
            let s = x.shape();
            let target: Vec<usize> = s[s.len() - axes..].iter().map(|&e| 2 * e).collect();
            let data = k::resample_forward(x.data(), s, &target);
            let mut shape = s.to_vec();
            let r = shape.len();
            shape[r - axes..].copy_from_slice(&target);
            Tensor::from_parts(shape, data)
        }
        Op::ConcatChannels => {
            let first = xs[0];
            if first.rank() < 2 {
                return Err(Error::shape(name, format!("rank {} input", first.rank())));
            }
            for x in xs {
                let ok = x.rank() == first.rank()
                    && x.shape()[0] == first.shape()[0]
                    && x.shape()[2..] == first.shape()[2..];
                if !ok {
                    return Err(Error::shape(
                        name,
                        format!("{:?} vs {:?} outside the channel axis", x.shape(), first.shape()),
                    ));
                }
            }
            let outer = first.shape()[0];
            let inner: usize = first.shape()[2..].iter().product();
            let total_c: usize = xs.iter().map(|x| x.shape()[1]).sum();
            let mut data = Vec::with_capacity(outer * total_c * inner);
            for o in 0..outer {
                for x in xs {
                    let c = x.shape()[1];
                    data.extend_from_slice(&x.data()[o * c * inner..(o + 1) * c * inner]);
                }
            }
            let mut shape = first.shape().to_vec();
            shape[1] = total_c;
            Tensor::from_parts(shape, data)
        }
        Op::Add | Op::Mul | Op::Sub => {
            let (a, b) = (xs[0], xs[1]);
            if a.shape() != b.shape() {
                return Err(Error::shape(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            match op {
                Op::Add => a.zip_map(b, |x, y| x + y)?,
                Op::Mul => a.zip_map(b, |x, y| x * y)?,
                _ => a.zip_map(b, |x, y| x - y)?,
            }
        }
        Op::ScalarMul(s) => {
            let s = T::of(*s);
            unary(&|v| v * s)
        }
        Op::Sum => Tensor::scalar(xs[0].sum()),
        Op::Mean => Tensor::scalar(xs[0].sum() / T::of(xs[0].len() as f64)),
        Op::Abs => unary(&|v| v.abs()),
        Op::Log => {
            if let Some(bad) = xs[0].data().iter().find(|v| **v < T::zero()) {
                return Err(Error::NonFinite(format!("log of negative value {bad:?}")));
            }
            unary(&|v| (v + T::of(LOG_EPS)).ln())
        }
        Op::Exp => unary(&|v| v.exp()),
        Op::Softmax => {
            let x = xs[0];
            if x.rank() == 0 {
                return Err(Error::shape(name, "rank-0 input"));
            }
            let cols = *x.shape().last().expect("rank >= 1");
            Tensor::from_parts(x.shape().to_vec(), k::softmax_rows(x.data(), x.len() / cols, cols))
        }
        Op::Sigmoid => unary(&sigmoid),
        Op::Softplus => unary(&softplus),
        Op::Reshape(shape) => {
            let n: usize = shape.iter().product();
            if n != xs[0].len() || shape.iter().any(|&e| e == 0) {
                return Err(Error::shape(
                    name,
                    format!("cannot view {:?} as {shape:?}", xs[0].shape()),
                ));
            }
            Tensor::from_parts(shape.clone(), xs[0].data().to_vec())
        }
        Op::SelectColumns(cols) => {
            let x = xs[0];
            expect_rank(op, x, 2, "input")?;
            let (n, kk) = (x.shape()[0], x.shape()[1]);
            if cols.len() != n || cols.iter().any(|&c| c >= kk) {
                return Err(Error::shape(
                    name,
                    format!("{} column indices for input {:?}", cols.len(), x.shape()),
                ));
            }
            Tensor::from_parts(vec![n], cols.iter().enumerate().map(|(r, &c)| x.data()[r * kk + c]).collect())
        }
        Op::SoftmaxCrossEntropy(labels) => {
            let x = xs[0];
            expect_rank(op, x, 2, "logits")?;
            let (n, kk) = (x.shape()[0], x.shape()[1]);
            if labels.len() != n || labels.iter().any(|&l| l >= kk) {
                return Err(Error::shape(
                    name,
                    format!("{} labels for logits {:?}", labels.len(), x.shape()),
                ));
            }
            let mut total = T::zero();
            for (r, &l) in labels.iter().enumerate() {
                let row = &x.data()[r * kk..][..kk];
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
                total += lse - row[l];
            }
            Tensor::scalar(total / T::of(n as f64))
        }
    };
    Ok((out, Vec::new()))
}
