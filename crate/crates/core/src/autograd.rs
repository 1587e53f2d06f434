//! Reverse-mode differentiation over the tensor kernels.
//!
//! The [`Tape`] evaluates forward eagerly and records one node per op in
//! topological order; [`Tape::backward`] walks the nodes once in reverse,
//! applying the chain rule and summing gradients over broadcast axes. A tape
//! belongs to a single training step and a single thread; distinct tapes may
//! run concurrently.

use crate::error::{Error, Result};
use crate::tensor::{self, BinaryKind, Tensor};

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
    },
    AddScalar {
        x: NodeId,
    },
    MulScalar {
        x: NodeId,
        c: f32,
    },
    Powi {
        x: NodeId,
        n: u32,
    },
    Sqrt {
        x: NodeId,
    },
    Exp {
        x: NodeId,
    },
    Ln {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Clamp {
        x: NodeId,
        lo: f32,
        hi: f32,
    },
    MaxScalar {
        x: NodeId,
        c: f32,
    },
    Conv1x1 {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    Conv3x3 {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
    },
    DwConv3x3 {
        x: NodeId,
        depth: NodeId,
    },
    ChannelNorm {
        x: NodeId,
        eps: f32,
    },
    SoftmaxRows {
        x: NodeId,
    },
    SoftmaxChannels {
        x: NodeId,
    },
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose2 {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    PoolAvg {
        x: NodeId,
    },
    PoolMax {
        x: NodeId,
        argmax: Vec<u32>,
    },
    AvgPool2x2 {
        x: NodeId,
    },
    MaxPool2x2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Upsample2x {
        x: NodeId,
    },
    ReflectPad {
        x: NodeId,
        p: usize,
    },
    SumChw {
        x: NodeId,
    },
    SumAll {
        x: NodeId,
    },
    BatchSlice {
        x: NodeId,
        index: usize,
    },
    BatchConcat {
        parts: Vec<NodeId>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by node id; absent entries mean zero.
#[derive(Debug, Default)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.index()).and_then(|g| g.take())
    }
}

/// Append-only record of an eager forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id.index()].requires_grad
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; backward produces a gradient for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf, true);
        self.params.push(id);
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.index()].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.index()].value.shape()
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // -- recorded ops -------------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn binary(&mut self, kind: BinaryKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::broadcast_binary(self.value(a), self.value(b), kind)?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Binary { kind, a, b }, rg))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f32) -> NodeId {
        let value = tensor::add_scalar(self.value(x), c);
        let rg = self.req(x);
        self.push(value, Op::AddScalar { x }, rg)
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f32) -> NodeId {
        let value = tensor::mul_scalar(self.value(x), c);
        let rg = self.req(x);
        self.push(value, Op::MulScalar { x, c }, rg)
    }

    pub fn powi(&mut self, x: NodeId, n: u32) -> NodeId {
        let value = tensor::powi(self.value(x), n);
        let rg = self.req(x);
        self.push(value, Op::Powi { x, n }, rg)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let value = tensor::sqrt(self.value(x));
        let rg = self.req(x);
        self.push(value, Op::Sqrt { x }, rg)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let value = tensor::exp(self.value(x));
        let rg = self.req(x);
        self.push(value, Op::Exp { x }, rg)
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let value = tensor::ln(self.value(x));
        let rg = self.req(x);
        self.push(value, Op::Ln { x }, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = tensor::sigmoid(self.value(x));
        let rg = self.req(x);
        self.push(value, Op::Sigmoid { x }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = tensor::relu(self.value(x));
        let rg = self.req(x);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f32, hi: f32) -> NodeId {
        let value = tensor::clamp(self.value(x), lo, hi);
        let rg = self.req(x);
        self.push(value, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn max_scalar(&mut self, x: NodeId, c: f32) -> NodeId {
        let value = tensor::max_scalar(self.value(x), c);
        let rg = self.req(x);
        self.push(value, Op::MaxScalar { x, c }, rg)
    }

    pub fn conv1x1(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = tensor::conv1x1(self.value(x), self.value(kernel), self.value(bias))?;
        let rg = self.req(x) || self.req(kernel) || self.req(bias);
        Ok(self.push(value, Op::Conv1x1 { x, kernel, bias }, rg))
    }

    pub fn conv3x3(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        let value = tensor::conv3x3_valid(
            self.value(x),
            self.value(kernel),
            self.value(bias),
            stride,
        )?;
        let rg = self.req(x) || self.req(kernel) || self.req(bias);
        Ok(self.push(
            value,
            Op::Conv3x3 {
                x,
                kernel,
                bias,
                stride,
            },
            rg,
        ))
    }

    pub fn dwconv3x3(&mut self, x: NodeId, depth: NodeId) -> Result<NodeId> {
        let value = tensor::dwconv3x3_valid(self.value(x), self.value(depth))?;
        let rg = self.req(x) || self.req(depth);
        Ok(self.push(value, Op::DwConv3x3 { x, depth }, rg))
    }

    pub fn channel_norm(&mut self, x: NodeId, eps: f32) -> Result<NodeId> {
        let value = tensor::channel_norm(self.value(x), eps)?;
        let rg = self.req(x);
        Ok(self.push(value, Op::ChannelNorm { x, eps }, rg))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let value = tensor::softmax_rows(self.value(x))?;
        let rg = self.req(x);
        Ok(self.push(value, Op::SoftmaxRows { x }, rg))
    }

    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let value = tensor::softmax_channels(self.value(x))?;
        let rg = self.req(x);
        Ok(self.push(value, Op::SoftmaxChannels { x }, rg))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Matmul { a, b }, rg))
    }

    pub fn transpose2(&mut self, x: NodeId) -> Result<NodeId> {
        let value = tensor::transpose2(self.value(x))?;
        let rg = self.req(x);
        Ok(self.push(value, Op::Transpose2 { x }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshaped(shape)?;
        let rg = self.req(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn pool_avg(&mut self, x: NodeId) -> Result<NodeId> {
        let value = tensor::pool_global_avg(self.value(x))?;
        let rg = self.req(x);
        Ok(self.push(value, Op::PoolAvg { x }, rg))
    }

    pub fn pool_max(&mut self, x: NodeId) -> Result<NodeId> {
        let (value, argmax) = tensor::pool_global_max_with_idx(self.value(x))?;
        let rg = self.req(x);
        Ok(self.push(value, Op::PoolMax { x, argmax }, rg))
    }

    pub fn avgpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let value = tensor::avgpool2x2(self.value(x))?;
        let rg = self.req(x);
        Ok(self.push(value, Op::AvgPool2x2 { x }, rg))
    }

    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let (value, argmax) = tensor::maxpool2x2_with_idx(self.value(x))?;
        let rg = self.req(x);
        Ok(self.push(value, Op::MaxPool2x2 { x, argmax }, rg))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let value = tensor::upsample_nearest2x(self.value(x))?;
        let rg = self.req(x);
        Ok(self.push(value, Op::Upsample2x { x }, rg))
    }

    pub fn reflect_pad(&mut self, x: NodeId, p: usize) -> Result<NodeId> {
        let value = tensor::reflect_pad(self.value(x), p)?;
        let rg = self.req(x);
        Ok(self.push(value, Op::ReflectPad { x, p }, rg))
    }

    pub fn sum_chw(&mut self, x: NodeId) -> Result<NodeId> {
        let value = tensor::sum_chw(self.value(x))?;
        let rg = self.req(x);
        Ok(self.push(value, Op::SumChw { x }, rg))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = tensor::sum_all(self.value(x));
        let rg = self.req(x);
        self.push(value, Op::SumAll { x }, rg)
    }

    pub fn batch_slice(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let value = tensor::batch_slice(self.value(x), index)?;
        let rg = self.req(x);
        Ok(self.push(value, Op::BatchSlice { x, index }, rg))
    }

    pub fn batch_concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = tensor::batch_concat(&tensors)?;
        let rg = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            value,
            Op::BatchConcat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Record an op by registry name. Ops that normally take extra scalar
    /// arguments use their defaults (`channel_norm` eps 1e-5, `reflect_pad`
    /// p=1, `conv3x3` stride 1). Unknown names are rejected.
    pub fn record(&mut self, name: &str, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = |expected: usize| -> Result<()> {
            if inputs.len() != expected {
                Err(Error::WrongArity {
                    op: name.to_string(),
                    expected,
                    got: inputs.len(),
                })
            } else {
                Ok(())
            }
        };
        match name {
            "add" => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            "sub" => {
                arity(2)?;
                self.sub(inputs[0], inputs[1])
            }
            "mul" => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            "div" => {
                arity(2)?;
                self.div(inputs[0], inputs[1])
            }
            "matmul" => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            "softmax_rows" => {
                arity(1)?;
                self.softmax_rows(inputs[0])
            }
            "softmax_channels" => {
                arity(1)?;
                self.softmax_channels(inputs[0])
            }
            "relu" => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            "sqrt" => {
                arity(1)?;
                Ok(self.sqrt(inputs[0]))
            }
            "exp" => {
                arity(1)?;
                Ok(self.exp(inputs[0]))
            }
            "ln" => {
                arity(1)?;
                Ok(self.ln(inputs[0]))
            }
            "sigmoid" => {
                arity(1)?;
                Ok(self.sigmoid(inputs[0]))
            }
            "channel_norm" => {
                arity(1)?;
                self.channel_norm(inputs[0], 1e-5)
            }
            "pool_avg" => {
                arity(1)?;
                self.pool_avg(inputs[0])
            }
            "pool_max" => {
                arity(1)?;
                self.pool_max(inputs[0])
            }
            "avgpool2x2" => {
                arity(1)?;
                self.avgpool2x2(inputs[0])
            }
            "maxpool2x2" => {
                arity(1)?;
                self.maxpool2x2(inputs[0])
            }
            "upsample2x" => {
                arity(1)?;
                self.upsample2x(inputs[0])
            }
            "reflect_pad" => {
                arity(1)?;
                self.reflect_pad(inputs[0], 1)
            }
            "sum_chw" => {
                arity(1)?;
                self.sum_chw(inputs[0])
            }
            "sum_all" => {
                arity(1)?;
                Ok(self.sum_all(inputs[0]))
            }
            "transpose2" => {
                arity(1)?;
                self.transpose2(inputs[0])
            }
            "conv1x1" => {
                arity(3)?;
                self.conv1x1(inputs[0], inputs[1], inputs[2])
            }
            "conv3x3" => {
                arity(3)?;
                self.conv3x3(inputs[0], inputs[1], inputs[2], 1)
            }
            "dwconv3x3" => {
                arity(2)?;
                self.dwconv3x3(inputs[0], inputs[1])
            }
            _ => Err(Error::UnknownOp {
                name: name.to_string(),
            }),
        }
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients are produced for every
    /// node that influences the loss and requires gradient; broadcast ops
    /// sum gradients over their broadcast axes.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index()] = Some(Tensor::ones(loss_value.shape())?);

        for idx in (0..=loss.index()).rev() {
            if grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let grad = grads[idx].take().expect("checked above");
            self.backprop_node(idx, &grad, &mut grads)?;
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(grad);
            }
        }
        Ok(GradientMap { grads })
    }

    fn backprop_node(&self, idx: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                match kind {
                    BinaryKind::Add => {
                        self.accum(grads, *a, tensor::reduce_to_shape(grad, av.shape())?)?;
                        self.accum(grads, *b, tensor::reduce_to_shape(grad, bv.shape())?)?;
                    }
                    BinaryKind::Sub => {
                        self.accum(grads, *a, tensor::reduce_to_shape(grad, av.shape())?)?;
                        let neg = tensor::mul_scalar(grad, -1.0);
                        self.accum(grads, *b, tensor::reduce_to_shape(&neg, bv.shape())?)?;
                    }
                    BinaryKind::Mul => {
                        if self.req(*a) {
                            let ga = tensor::broadcast_binary(grad, bv, BinaryKind::Mul)?;
                            self.accum(grads, *a, tensor::reduce_to_shape(&ga, av.shape())?)?;
                        }
                        if self.req(*b) {
                            let gb = tensor::broadcast_binary(grad, av, BinaryKind::Mul)?;
                            self.accum(grads, *b, tensor::reduce_to_shape(&gb, bv.shape())?)?;
                        }
                    }
                    BinaryKind::Div => {
                        if self.req(*a) {
                            let ga = tensor::broadcast_binary(grad, bv, BinaryKind::Div)?;
                            self.accum(grads, *a, tensor::reduce_to_shape(&ga, av.shape())?)?;
                        }
                        if self.req(*b) {
                            // d(a/b)/db = -out/b
                            let t = tensor::broadcast_binary(grad, out, BinaryKind::Mul)?;
                            let t = tensor::broadcast_binary(&t, bv, BinaryKind::Div)?;
                            let t = tensor::mul_scalar(&t, -1.0);
                            self.accum(grads, *b, tensor::reduce_to_shape(&t, bv.shape())?)?;
                        }
                    }
                }
            }
            Op::AddScalar { x } => self.accum(grads, *x, grad.clone())?,
            Op::MulScalar { x, c } => self.accum(grads, *x, tensor::mul_scalar(grad, *c))?,
            Op::Powi { x, n } => {
                let xv = self.value(*x);
                let pow = tensor::powi(xv, n - 1);
                let t = tensor::broadcast_binary(grad, &pow, BinaryKind::Mul)?;
                self.accum(grads, *x, tensor::mul_scalar(&t, *n as f32))?;
            }
            Op::Sqrt { x } => {
                // d sqrt / dx = 1 / (2 sqrt(x)); defined as 0 at x == 0 so
                // exact-zero norms do not produce NaN
                let od = out.data();
                let gd = grad.data();
                let data = gd
                    .iter()
                    .zip(od)
                    .map(|(&g, &y)| if y == 0.0 { 0.0 } else { g / (2.0 * y) })
                    .collect();
                self.accum(grads, *x, Tensor::new(out.shape(), data)?)?;
            }
            Op::Exp { x } => {
                let t = tensor::broadcast_binary(grad, out, BinaryKind::Mul)?;
                self.accum(grads, *x, t)?;
            }
            Op::Ln { x } => {
                let t = tensor::broadcast_binary(grad, self.value(*x), BinaryKind::Div)?;
                self.accum(grads, *x, t)?;
            }
            Op::Sigmoid { x } => {
                let od = out.data();
                let gd = grad.data();
                let data = gd
                    .iter()
                    .zip(od)
                    .map(|(&g, &y)| g * y * (1.0 - y))
                    .collect();
                self.accum(grads, *x, Tensor::new(out.shape(), data)?)?;
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                let gd = grad.data();
                let data = gd
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accum(grads, *x, Tensor::new(out.shape(), data)?)?;
            }
            Op::Clamp { x, lo, hi } => {
                let xd = self.value(*x).data();
                let gd = grad.data();
                let data = gd
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| if v >= *lo && v <= *hi { g } else { 0.0 })
                    .collect();
                self.accum(grads, *x, Tensor::new(out.shape(), data)?)?;
            }
            Op::MaxScalar { x, c } => {
                let xd = self.value(*x).data();
                let gd = grad.data();
                let data = gd
                    .iter()
                    .zip(xd)
                    .map(|(&g, &v)| if v > *c { g } else { 0.0 })
                    .collect();
                self.accum(grads, *x, Tensor::new(out.shape(), data)?)?;
            }
            Op::Conv1x1 { x, kernel, bias } => {
                let (gx, gk, gb) =
                    tensor::conv1x1_backward(self.value(*x), self.value(*kernel), grad)?;
                if self.req(*x) {
                    self.accum(grads, *x, gx)?;
                }
                if self.req(*kernel) {
                    self.accum(grads, *kernel, gk)?;
                }
                if self.req(*bias) {
                    self.accum(grads, *bias, gb)?;
                }
            }
            Op::Conv3x3 {
                x,
                kernel,
                bias,
                stride,
            } => {
                let (gx, gk, gb) =
                    tensor::conv3x3_backward(self.value(*x), self.value(*kernel), grad, *stride)?;
                if self.req(*x) {
                    self.accum(grads, *x, gx)?;
                }
                if self.req(*kernel) {
                    self.accum(grads, *kernel, gk)?;
                }
                if self.req(*bias) {
                    self.accum(grads, *bias, gb)?;
                }
            }
            Op::DwConv3x3 { x, depth } => {
                let (gx, gk) =
                    tensor::dwconv3x3_backward(self.value(*x), self.value(*depth), grad)?;
                if self.req(*x) {
                    self.accum(grads, *x, gx)?;
                }
                if self.req(*depth) {
                    self.accum(grads, *depth, gk)?;
                }
            }
            Op::ChannelNorm { x, eps } => {
                self.accum(grads, *x, channel_norm_backward(self.value(*x), out, grad, *eps)?)?;
            }
            Op::SoftmaxRows { x } => {
                self.accum(grads, *x, softmax_backward_rows(out, grad)?)?;
            }
            Op::SoftmaxChannels { x } => {
                self.accum(grads, *x, softmax_backward_channels(out, grad)?)?;
            }
            Op::Matmul { a, b } => {
                if self.req(*a) {
                    let bt = tensor::transpose2(self.value(*b))?;
                    self.accum(grads, *a, tensor::matmul(grad, &bt)?)?;
                }
                if self.req(*b) {
                    let at = tensor::transpose2(self.value(*a))?;
                    self.accum(grads, *b, tensor::matmul(&at, grad)?)?;
                }
            }
            Op::Transpose2 { x } => {
                self.accum(grads, *x, tensor::transpose2(grad)?)?;
            }
            Op::Reshape { x } => {
                self.accum(grads, *x, grad.reshaped(self.value(*x).shape())?)?;
            }
            Op::PoolAvg { x } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let scale = 1.0 / (h * w) as f32;
                let gd = grad.data();
                let mut data = vec![0.0f32; n * c * h * w];
                for nc in 0..n * c {
                    let gv = gd[nc] * scale;
                    for v in &mut data[nc * h * w..(nc + 1) * h * w] {
                        *v = gv;
                    }
                }
                self.accum(grads, *x, Tensor::new(&[n, c, h, w], data)?)?;
            }
            Op::PoolMax { x, argmax } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let gd = grad.data();
                let mut data = vec![0.0f32; n * c * h * w];
                for nc in 0..n * c {
                    data[nc * h * w + argmax[nc] as usize] = gd[nc];
                }
                self.accum(grads, *x, Tensor::new(&[n, c, h, w], data)?)?;
            }
            Op::AvgPool2x2 { x } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (h2, w2) = (h / 2, w / 2);
                let gd = grad.data();
                let mut data = vec![0.0f32; n * c * h * w];
                for nc in 0..n * c {
                    for y in 0..h2 {
                        for xq in 0..w2 {
                            let g = gd[nc * h2 * w2 + y * w2 + xq] * 0.25;
                            let s = nc * h * w + 2 * y * w + 2 * xq;
                            data[s] += g;
                            data[s + 1] += g;
                            data[s + w] += g;
                            data[s + w + 1] += g;
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(&[n, c, h, w], data)?)?;
            }
            Op::MaxPool2x2 { x, argmax } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let gd = grad.data();
                let mut data = vec![0.0f32; n * c * h * w];
                let (h2, w2) = (h / 2, w / 2);
                for nc in 0..n * c {
                    for i in 0..h2 * w2 {
                        data[nc * h * w + argmax[nc * h2 * w2 + i] as usize] += gd[nc * h2 * w2 + i];
                    }
                }
                self.accum(grads, *x, Tensor::new(&[n, c, h, w], data)?)?;
            }
            Op::Upsample2x { x } => {
                self.accum(grads, *x, tensor::upsample2x_backward(grad)?)?;
            }
            Op::ReflectPad { x, p } => {
                let gx = tensor::reflect_pad_backward(grad, *p, self.value(*x).shape())?;
                self.accum(grads, *x, gx)?;
            }
            Op::SumChw { x } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let gd = grad.data();
                let mut data = vec![0.0f32; n * c * h * w];
                for ni in 0..n {
                    for v in &mut data[ni * c * h * w..(ni + 1) * c * h * w] {
                        *v = gd[ni];
                    }
                }
                self.accum(grads, *x, Tensor::new(&[n, c, h, w], data)?)?;
            }
            Op::SumAll { x } => {
                let g = grad.data()[0];
                let xv = self.value(*x);
                self.accum(grads, *x, Tensor::full(xv.shape(), g)?)?;
            }
            Op::BatchSlice { x, index } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let chw = c * h * w;
                let mut data = vec![0.0f32; n * chw];
                data[index * chw..(index + 1) * chw].copy_from_slice(grad.data());
                self.accum(grads, *x, Tensor::new(&[n, c, h, w], data)?)?;
            }
            Op::BatchConcat { parts } => {
                for (i, &p) in parts.iter().enumerate() {
                    if self.req(p) {
                        self.accum(grads, p, tensor::batch_slice(grad, i)?)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) -> Result<()> {
        if !self.req(id) {
            return Ok(());
        }
        let slot = &mut grads[id.index()];
        match slot.take() {
            None => *slot = Some(delta),
            Some(prev) => {
                *slot = Some(tensor::broadcast_binary(&prev, &delta, BinaryKind::Add)?)
            }
        }
        Ok(())
    }
}

fn channel_norm_backward(x: &Tensor, y: &Tensor, grad: &Tensor, eps: f32) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let xd = x.data();
    let yd = y.data();
    let gd = grad.data();
    let mut out = vec![0.0f32; xd.len()];
    for nc in 0..n * c {
        let xs = &xd[nc * hw..(nc + 1) * hw];
        let ys = &yd[nc * hw..(nc + 1) * hw];
        let gs = &gd[nc * hw..(nc + 1) * hw];
        let mut mean = 0.0f64;
        for &v in xs {
            mean += f64::from(v);
        }
        mean /= hw as f64;
        let mut var = 0.0f64;
        for &v in xs {
            let d = f64::from(v) - mean;
            var += d * d;
        }
        var /= hw as f64;
        let inv = (1.0 / (var + f64::from(eps)).sqrt()) as f32;
        let mut gmean = 0.0f64;
        let mut gymean = 0.0f64;
        for (&g, &yv) in gs.iter().zip(ys) {
            gmean += f64::from(g);
            gymean += f64::from(g) * f64::from(yv);
        }
        let gmean = (gmean / hw as f64) as f32;
        let gymean = (gymean / hw as f64) as f32;
        for ((o, &g), &yv) in out[nc * hw..(nc + 1) * hw].iter_mut().zip(gs).zip(ys) {
            *o = inv * (g - gmean - yv * gymean);
        }
    }
    Tensor::new(x.shape(), out)
}

fn softmax_backward_rows(y: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let (r, s) = y.dims2()?;
    let yd = y.data();
    let gd = grad.data();
    let mut out = vec![0.0f32; yd.len()];
    for i in 0..r {
        let ys = &yd[i * s..(i + 1) * s];
        let gs = &gd[i * s..(i + 1) * s];
        let mut dot = 0.0f64;
        for (&g, &yv) in gs.iter().zip(ys) {
            dot += f64::from(g) * f64::from(yv);
        }
        let dot = dot as f32;
        for ((o, &g), &yv) in out[i * s..(i + 1) * s].iter_mut().zip(gs).zip(ys) {
            *o = yv * (g - dot);
        }
    }
    Tensor::new(y.shape(), out)
}

fn softmax_backward_channels(y: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = y.dims4()?;
    let hw = h * w;
    let yd = y.data();
    let gd = grad.data();
    let mut out = vec![0.0f32; yd.len()];
    for ni in 0..n {
        for p in 0..hw {
            let mut dot = 0.0f64;
            for ci in 0..c {
                let i = (ni * c + ci) * hw + p;
                dot += f64::from(gd[i]) * f64::from(yd[i]);
            }
            let dot = dot as f32;
            for ci in 0..c {
                let i = (ni * c + ci) * hw + p;
                out[i] = yd[i] * (gd[i] - dot);
            }
        }
    }
    Tensor::new(y.shape(), out)
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Compare the tape's analytic gradient of `f` at `x` against central
/// differences with step `h`, coordinate by coordinate. The relative error
/// denominator is max(|analytic|, |numeric|, 1e-8).
pub fn finite_diff_check(
    f: &dyn Fn(&mut Tape, NodeId) -> Result<NodeId>,
    x: &Tensor,
    h: f32,
    tol: f64,
) -> Result<FdReport> {
    let mut tape = Tape::new();
    let xid = tape.param(x.clone());
    let loss = f(&mut tape, xid)?;
    let mut grads = tape.backward(loss)?;
    let analytic = grads
        .take(xid)
        .unwrap_or(Tensor::zeros(x.shape())?);

    let eval = |pt: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let id = t.constant(pt.clone());
        let out = f(&mut t, id)?;
        Ok(f64::from(out.value().item()?))
    };

    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * f64::from(h));
        let a = f64::from(analytic.data()[i]);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        let rel = (a - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(FdReport {
        max_rel_err: max_rel,
        pass: max_rel < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn record_add_and_node_count() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[1, 1, 1, 2], &[3.0, 4.0]));
        let before = tape.len();
        let c = tape.record("add", &[a, b]).unwrap();
        let d = tape.record("mul", &[a, b]).unwrap();
        let _ = tape.record("sub", &[c, d]).unwrap();
        assert_eq!(tape.len(), before + 3);
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn record_unknown_op_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1.0));
        assert!(matches!(
            tape.record("不存在", &[a]),
            Err(Error::UnknownOp { .. })
        ));
        assert!(matches!(
            tape.record("definitely_not_an_op", &[a]),
            Err(Error::UnknownOp { .. })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 2, 1, 2], &[1.0, -2.0, 3.0, 0.5]));
        let loss = tape.sum_all(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_of_square_sum_is_2x() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 1, 2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0, 1.0]);
    }

    #[test]
    fn broadcast_backward_sums_over_space() {
        let mut tape = Tape::new();
        let a_val = t(&[1, 2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let a = tape.constant(a_val.clone());
        let b = tape.param(t(&[1, 2, 1, 1], &[1.0, 1.0]));
        let prod = tape.mul(a, b).unwrap();
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss).unwrap();
        // grad_b[c] = sum over the spatial extent of a's channel c
        assert_eq!(grads.get(b).unwrap().data(), &[10.0, 26.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let base = t(&[1, 1, 2, 2], &[0.5, -1.0, 2.0, 0.25]);
        // combined loss
        let mut tape = Tape::new();
        let x = tape.param(base.clone());
        let sq = tape.mul(x, x).unwrap();
        let l1 = tape.sum_all(sq);
        let r = tape.relu(x);
        let l2 = tape.sum_all(r);
        let both = tape.add(l1, l2).unwrap();
        let g_both = tape.backward(both).unwrap();

        // separate losses on an identical graph
        let mut tape2 = Tape::new();
        let x2 = tape2.param(base.clone());
        let sq2 = tape2.mul(x2, x2).unwrap();
        let l1b = tape2.sum_all(sq2);
        let r2 = tape2.relu(x2);
        let l2b = tape2.sum_all(r2);
        let g1 = tape2.backward(l1b).unwrap();
        let g2 = tape2.backward(l2b).unwrap();

        let sum: Vec<f32> = g1
            .get(x2)
            .unwrap()
            .data()
            .iter()
            .zip(g2.get(x2).unwrap().data())
            .map(|(a, b)| a + b)
            .collect();
        for (a, b) in g_both.get(x).unwrap().data().iter().zip(&sum) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fd_check_sum_is_exact() {
        let x = t(&[1, 1, 2, 3], &[0.1, -0.4, 0.9, 2.0, -1.5, 0.3]);
        let report = finite_diff_check(
            &|tape, x| Ok(tape.sum_all(x)),
            &x,
            1e-3,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn fd_check_softmax_projection() {
        let x = t(
            &[3, 3],
            &[0.3, -0.7, 1.2, 0.05, 0.9, -1.1, 0.6, 0.2, -0.4],
        );
        let proj = t(
            &[3, 3],
            &[0.9, -0.3, 0.4, 1.2, 0.7, -0.8, 0.1, -1.0, 0.5],
        );
        let report = finite_diff_check(
            &move |tape, x| {
                let sm = tape.softmax_rows(x)?;
                let p = tape.constant(proj.clone());
                let prod = tape.mul(sm, p)?;
                Ok(tape.sum_all(prod))
            },
            &x,
            1e-3,
            1e-3,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }
}
