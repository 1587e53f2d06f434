//! Dense NCHW tensor kernel.
//!
//! A [`Tensor`] is a contiguous row-major `f32` array of rank 1..=4 with
//! (batch, channels, height, width) semantics at rank 4 and (rows, cols) at
//! rank 2. Every operation is a pure function of immutable inputs; data
//! parallelism inside a kernel writes disjoint output regions only, so
//! results are bit-deterministic. Kernels charge their closed-form cost to
//! the thread-local counters in [`crate::metrics`], and buffer bytes are
//! tracked on construction and drop.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::{self, cost};

/// Dense rank-<=4 tensor, row-major, width fastest.
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        validate_shape(shape)?;
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::DataLength {
                expected: numel,
                got: data.len(),
            });
        }
        metrics::on_alloc((data.len() * 4) as u64);
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        validate_shape(shape)?;
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Result<Self> {
        validate_shape(shape)?;
        let numel: usize = shape.iter().product();
        Self::new(shape, vec![value; numel])
    }

    /// Single value with shape (1,1,1,1).
    pub fn scalar(value: f32) -> Self {
        Self::new(&[1, 1, 1, 1], vec![value]).expect("scalar shape is valid")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        validate_shape(shape)?;
        let numel: usize = shape.iter().product();
        Self::new(shape, (0..numel).map(|i| f(i)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Logical buffer size in bytes.
    pub fn bytes(&self) -> u64 {
        (self.data.len() * 4) as u64
    }

    /// Interpret as (N, C, H, W).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::RankMismatch {
                op: "dims4",
                expected: 4,
                got: self.shape.clone(),
            }),
        }
    }

    /// Interpret as a (rows, cols) matrix.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, s] => Ok((r, s)),
            _ => Err(Error::RankMismatch {
                op: "dims2",
                expected: 2,
                got: self.shape.clone(),
            }),
        }
    }

    pub fn get4(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let (_, ch, h, w) = self.dims4().expect("get4 on rank-4 tensor");
        self.data[((n * ch + c) * h + y) * w + x]
    }

    /// Copy into a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        validate_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::DataLength {
                expected: numel,
                got: self.data.len(),
            });
        }
        Tensor::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extract the single value of a one-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::NonScalarLoss {
                shape: self.shape.clone(),
            })
        }
    }
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor::new(&self.shape, self.data.clone()).expect("clone of valid tensor")
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        metrics::on_free((self.data.len() * 4) as u64);
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(shape={:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, ", data={:?}", self.data)?;
        }
        write!(f, ")")
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 4 || shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

/// Elementwise binary op kind. `Mul` and `Add` are the primary pair; `Sub`
/// and `Div` round out what the composed modules need.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Mul,
    Add,
    Sub,
    Div,
}

/// Global pooling kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Learnable convolution parameters.
///
/// `Pointwise1x1` is a per-pixel linear map over channels; the depthwise
/// separable kind is a reflection-padded depthwise 3x3 followed by a
/// pointwise 1x1, with the bias applied after the pointwise step.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvKind {
    /// kernel shape (C_out, C_in, 1, 1)
    Pointwise1x1 { kernel: Tensor },
    /// depth shape (C_in, 1, 3, 3); point shape (C_out, C_in, 1, 1)
    DepthwiseSeparable3x3 { depth: Tensor, point: Tensor },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub kind: ConvKind,
    /// shape (C_out)
    pub bias: Tensor,
}

impl ConvWeights {
    pub fn pointwise(kernel: Tensor, bias: Tensor) -> Result<Self> {
        let (cout, _cin, kh, kw) = kernel.dims4()?;
        if kh != 1 || kw != 1 {
            return Err(Error::InvalidConfig {
                message: format!("pointwise kernel must be 1x1, got {kh}x{kw}"),
            });
        }
        if bias.shape() != [cout] {
            return Err(Error::InvalidConfig {
                message: format!("bias shape {:?} must be [{cout}]", bias.shape()),
            });
        }
        Ok(ConvWeights {
            kind: ConvKind::Pointwise1x1 { kernel },
            bias,
        })
    }

    pub fn depthwise_separable(depth: Tensor, point: Tensor, bias: Tensor) -> Result<Self> {
        let (dc, d1, dh, dw) = depth.dims4()?;
        let (cout, cin, ph, pw) = point.dims4()?;
        if d1 != 1 || dh != 3 || dw != 3 {
            return Err(Error::InvalidConfig {
                message: format!("depth kernel must be (C,1,3,3), got {:?}", depth.shape()),
            });
        }
        if ph != 1 || pw != 1 || cin != dc {
            return Err(Error::InvalidConfig {
                message: format!(
                    "point kernel must be (C_out,{dc},1,1), got {:?}",
                    point.shape()
                ),
            });
        }
        if bias.shape() != [cout] {
            return Err(Error::InvalidConfig {
                message: format!("bias shape {:?} must be [{cout}]", bias.shape()),
            });
        }
        Ok(ConvWeights {
            kind: ConvKind::DepthwiseSeparable3x3 { depth, point },
            bias,
        })
    }

    pub fn in_channels(&self) -> usize {
        match &self.kind {
            ConvKind::Pointwise1x1 { kernel } => kernel.shape()[1],
            ConvKind::DepthwiseSeparable3x3 { depth, .. } => depth.shape()[0],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.bias.shape()[0]
    }
}

// ---------------------------------------------------------------------------
// broadcast elementwise
// ---------------------------------------------------------------------------

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || x == 1 || y == 1 {
                Ok(x.max(y))
            } else {
                Err(Error::ShapeMismatch {
                    op,
                    left: a.to_vec(),
                    right: b.to_vec(),
                })
            }
        })
        .collect()
}

fn strides_for(shape: &[usize]) -> [usize; 4] {
    // padded to rank 4 on the left with extent 1
    let mut ext = [1usize; 4];
    let off = 4 - shape.len();
    for (i, &d) in shape.iter().enumerate() {
        ext[off + i] = d;
    }
    let mut st = [0usize; 4];
    let mut acc = 1;
    for i in (0..4).rev() {
        st[i] = if ext[i] == 1 { 0 } else { acc };
        acc *= ext[i];
    }
    st
}

/// Elementwise binary op with NumPy-style broadcasting over equal-rank
/// shapes: each dimension pair must be equal or have a 1 on one side.
pub fn broadcast_binary(a: &Tensor, b: &Tensor, kind: BinaryKind) -> Result<Tensor> {
    let out_shape = broadcast_shape("broadcast_binary", a.shape(), b.shape())?;
    let mut ext = [1usize; 4];
    let off = 4 - out_shape.len();
    for (i, &d) in out_shape.iter().enumerate() {
        ext[off + i] = d;
    }
    let sa = strides_for(a.shape());
    let sb = strides_for(b.shape());
    let ad = a.data();
    let bd = b.data();
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    for i0 in 0..ext[0] {
        for i1 in 0..ext[1] {
            for i2 in 0..ext[2] {
                let base_a = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let base_b = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..ext[3] {
                    let x = ad[base_a + i3 * sa[3]];
                    let y = bd[base_b + i3 * sb[3]];
                    out.push(match kind {
                        BinaryKind::Mul => x * y,
                        BinaryKind::Add => x + y,
                        BinaryKind::Sub => x - y,
                        BinaryKind::Div => x / y,
                    });
                }
            }
        }
    }
    match kind {
        BinaryKind::Mul | BinaryKind::Div => metrics::add_macs(cost::elementwise_macs(numel as u64)),
        BinaryKind::Add | BinaryKind::Sub => {
            metrics::add_half_adds(cost::elementwise_adds(numel as u64))
        }
    }
    Tensor::new(&out_shape, out)
}

/// Sum `grad` down to `target` shape by adding over broadcast axes.
/// Used by the tape to reverse a broadcast.
pub(crate) fn reduce_to_shape(grad: &Tensor, target: &[usize]) -> Result<Tensor> {
    if grad.shape() == target {
        return Ok(grad.clone());
    }
    broadcast_shape("reduce_to_shape", grad.shape(), target)?;
    let mut ext = [1usize; 4];
    let off = 4 - grad.shape().len();
    for (i, &d) in grad.shape().iter().enumerate() {
        ext[off + i] = d;
    }
    let st = strides_for(target);
    let numel: usize = target.iter().product();
    let mut out = vec![0.0f32; numel];
    let gd = grad.data();
    let mut gi = 0;
    for i0 in 0..ext[0] {
        for i1 in 0..ext[1] {
            for i2 in 0..ext[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..ext[3] {
                    out[base + i3 * st[3]] += gd[gi];
                    gi += 1;
                }
            }
        }
    }
    Tensor::new(target, out)
}

// ---------------------------------------------------------------------------
// scalar and unary maps
// ---------------------------------------------------------------------------

fn map_unary(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect())
        .expect("same shape as valid input")
}

pub fn add_scalar(x: &Tensor, c: f32) -> Tensor {
    metrics::add_half_adds(cost::elementwise_adds(x.numel() as u64));
    map_unary(x, |v| v + c)
}

pub fn mul_scalar(x: &Tensor, c: f32) -> Tensor {
    metrics::add_macs(cost::elementwise_macs(x.numel() as u64));
    map_unary(x, |v| v * c)
}

/// Integer power, exponent >= 1, by repeated multiplication.
pub fn powi(x: &Tensor, exponent: u32) -> Tensor {
    metrics::add_macs(cost::powi_macs(x.numel() as u64, exponent));
    map_unary(x, |v| v.powi(exponent as i32))
}

pub fn sqrt(x: &Tensor) -> Tensor {
    metrics::add_macs(cost::unary_macs(x.numel() as u64));
    map_unary(x, f32::sqrt)
}

pub fn exp(x: &Tensor) -> Tensor {
    metrics::add_macs(cost::unary_macs(x.numel() as u64));
    map_unary(x, f32::exp)
}

pub fn ln(x: &Tensor) -> Tensor {
    metrics::add_macs(cost::unary_macs(x.numel() as u64));
    map_unary(x, f32::ln)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    metrics::add_macs(2 * cost::unary_macs(x.numel() as u64));
    metrics::add_half_adds(cost::elementwise_adds(x.numel() as u64));
    map_unary(x, |v| 1.0 / (1.0 + (-v).exp()))
}

pub fn relu(x: &Tensor) -> Tensor {
    map_unary(x, |v| v.max(0.0))
}

pub fn clamp(x: &Tensor, lo: f32, hi: f32) -> Tensor {
    map_unary(x, |v| v.clamp(lo, hi))
}

pub fn max_scalar(x: &Tensor, c: f32) -> Tensor {
    map_unary(x, |v| v.max(c))
}

// ---------------------------------------------------------------------------
// matrix ops
// ---------------------------------------------------------------------------

/// Standard matrix product (R x K) times (K x S).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (r, k) = a.dims2()?;
    let (k2, s) = b.dims2()?;
    if k != k2 {
        return Err(Error::InnerDimMismatch {
            left: (r, k),
            right: (k2, s),
        });
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0f32; r * s];
    out.par_chunks_mut(s).enumerate().for_each(|(i, row)| {
        for kk in 0..k {
            let av = ad[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[kk * s..(kk + 1) * s];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    metrics::add_macs(cost::matmul_macs(r as u64, k as u64, s as u64));
    Tensor::new(&[r, s], out)
}

pub fn transpose2(m: &Tensor) -> Result<Tensor> {
    let (r, s) = m.dims2()?;
    let md = m.data();
    let mut out = vec![0.0f32; r * s];
    for i in 0..r {
        for j in 0..s {
            out[j * r + i] = md[i * s + j];
        }
    }
    Tensor::new(&[s, r], out)
}

/// Row-wise softmax with row-max subtraction for stability.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let (r, s) = m.dims2()?;
    let md = m.data();
    let mut out = vec![0.0f32; r * s];
    for i in 0..r {
        let row = &md[i * s..(i + 1) * s];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[i * s + j] = e;
            sum += f64::from(e);
        }
        let inv = (1.0 / sum) as f32;
        for o in &mut out[i * s..(i + 1) * s] {
            *o *= inv;
        }
    }
    metrics::add_macs(cost::softmax_macs((r * s) as u64));
    metrics::add_half_adds(cost::softmax_adds((r * s) as u64));
    Tensor::new(&[r, s], out)
}

/// Softmax over the channel axis, independently at each (n, y, x) position.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let xd = x.data();
    let mut out = vec![0.0f32; xd.len()];
    let hw = h * w;
    for ni in 0..n {
        for p in 0..hw {
            let mut max = f32::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(xd[(ni * c + ci) * hw + p]);
            }
            let mut sum = 0.0f64;
            for ci in 0..c {
                let e = (xd[(ni * c + ci) * hw + p] - max).exp();
                out[(ni * c + ci) * hw + p] = e;
                sum += f64::from(e);
            }
            let inv = (1.0 / sum) as f32;
            for ci in 0..c {
                out[(ni * c + ci) * hw + p] *= inv;
            }
        }
    }
    metrics::add_macs(cost::softmax_macs(x.numel() as u64));
    metrics::add_half_adds(cost::softmax_adds(x.numel() as u64));
    Tensor::new(x.shape(), out)
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

fn check_channels(op: &'static str, x: &Tensor, expected: usize) -> Result<(usize, usize, usize, usize)> {
    let dims = x.dims4()?;
    if dims.1 != expected {
        return Err(Error::ChannelMismatch {
            op,
            expected,
            got: dims.1,
        });
    }
    Ok(dims)
}

/// Pointwise 1x1 convolution: a per-pixel linear map over channels.
pub fn conv1x1(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (cout, cin, _, _) = kernel.dims4()?;
    let (n, _, h, w) = check_channels("conv1x1", x, cin)?;
    let xd = x.data();
    let kd = kernel.data();
    let bd = bias.data();
    let hw = h * w;
    let mut out = vec![0.0f32; n * cout * hw];
    out.par_chunks_mut(hw).enumerate().for_each(|(chunk, orow)| {
        let ni = chunk / cout;
        let co = chunk % cout;
        let b = bd[co];
        for o in orow.iter_mut() {
            *o = b;
        }
        for ci in 0..cin {
            let kv = kd[co * cin + ci];
            if kv == 0.0 {
                continue;
            }
            let xrow = &xd[(ni * cin + ci) * hw..(ni * cin + ci + 1) * hw];
            for (o, &xv) in orow.iter_mut().zip(xrow) {
                *o += kv * xv;
            }
        }
    });
    metrics::add_macs(cost::conv1x1_macs(
        n as u64, h as u64, w as u64, cin as u64, cout as u64,
    ));
    metrics::add_half_adds(cost::conv_bias_adds(n as u64, h as u64, w as u64, cout as u64));
    Tensor::new(&[n, cout, h, w], out)
}

/// Dense 3x3 convolution, valid (no padding), stride 1 or 2.
pub fn conv3x3_valid(x: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (cout, cin, kh, kw) = kernel.dims4()?;
    if kh != 3 || kw != 3 {
        return Err(Error::InvalidConfig {
            message: format!("conv3x3 kernel must be 3x3, got {kh}x{kw}"),
        });
    }
    let (n, _, h, w) = check_channels("conv3x3", x, cin)?;
    if h < 3 || w < 3 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
        });
    }
    let hout = (h - 3) / stride + 1;
    let wout = (w - 3) / stride + 1;
    let xd = x.data();
    let kd = kernel.data();
    let bd = bias.data();
    let mut out = vec![0.0f32; n * cout * hout * wout];
    out.par_chunks_mut(hout * wout)
        .enumerate()
        .for_each(|(chunk, oplane)| {
            let ni = chunk / cout;
            let co = chunk % cout;
            let b = bd[co];
            for (oy, orow) in oplane.chunks_mut(wout).enumerate() {
                let iy = oy * stride;
                for (ox, o) in orow.iter_mut().enumerate() {
                    let ix = ox * stride;
                    let mut acc = b;
                    for ci in 0..cin {
                        let xbase = (ni * cin + ci) * h * w;
                        let kbase = (co * cin + ci) * 9;
                        for ky in 0..3 {
                            let xrow = xbase + (iy + ky) * w + ix;
                            let krow = kbase + ky * 3;
                            acc += xd[xrow] * kd[krow]
                                + xd[xrow + 1] * kd[krow + 1]
                                + xd[xrow + 2] * kd[krow + 2];
                        }
                    }
                    *o = acc;
                }
            }
        });
    metrics::add_macs(cost::conv3x3_macs(
        n as u64,
        hout as u64,
        wout as u64,
        cin as u64,
        cout as u64,
    ));
    metrics::add_half_adds(cost::conv_bias_adds(
        n as u64,
        hout as u64,
        wout as u64,
        cout as u64,
    ));
    Tensor::new(&[n, cout, hout, wout], out)
}

/// Depthwise 3x3 convolution, valid, stride 1, no bias.
pub fn dwconv3x3_valid(x: &Tensor, depth: &Tensor) -> Result<Tensor> {
    let (dc, _, _, _) = depth.dims4()?;
    let (n, _, h, w) = check_channels("dwconv3x3", x, dc)?;
    if h < 3 || w < 3 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
        });
    }
    let hout = h - 2;
    let wout = w - 2;
    let xd = x.data();
    let kd = depth.data();
    let mut out = vec![0.0f32; n * dc * hout * wout];
    for ni in 0..n {
        for ci in 0..dc {
            let xbase = (ni * dc + ci) * h * w;
            let obase = (ni * dc + ci) * hout * wout;
            let kbase = ci * 9;
            for oy in 0..hout {
                for ox in 0..wout {
                    let mut acc = 0.0f32;
                    for ky in 0..3 {
                        let xrow = xbase + (oy + ky) * w + ox;
                        let krow = kbase + ky * 3;
                        acc += xd[xrow] * kd[krow]
                            + xd[xrow + 1] * kd[krow + 1]
                            + xd[xrow + 2] * kd[krow + 2];
                    }
                    out[obase + oy * wout + ox] = acc;
                }
            }
        }
    }
    metrics::add_macs(cost::dwconv3x3_macs(
        n as u64, hout as u64, wout as u64, dc as u64,
    ));
    Tensor::new(&[n, dc, hout, wout], out)
}

/// Convolution with the two [`ConvWeights`] kinds. The pointwise kind is a
/// per-pixel channel map; the depthwise-separable kind reflection-pads by 1
/// so the spatial extent is preserved.
pub fn conv2d(x: &Tensor, w: &ConvWeights) -> Result<Tensor> {
    match &w.kind {
        ConvKind::Pointwise1x1 { kernel } => conv1x1(x, kernel, &w.bias),
        ConvKind::DepthwiseSeparable3x3 { depth, point } => {
            let padded = reflect_pad(x, 1)?;
            let mid = dwconv3x3_valid(&padded, depth)?;
            conv1x1(&mid, point, &w.bias)
        }
    }
}

// ---------------------------------------------------------------------------
// pooling, normalization, resampling
// ---------------------------------------------------------------------------

/// Global pooling over the spatial extent, output shape (N, C, 1, 1).
pub fn pool_global(x: &Tensor, kind: PoolKind) -> Result<Tensor> {
    match kind {
        PoolKind::Avg => pool_global_avg(x),
        PoolKind::Max => Ok(pool_global_max_with_idx(x)?.0),
    }
}

pub fn pool_global_avg(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c);
    for nc in 0..n * c {
        let mut acc = 0.0f64;
        for &v in &xd[nc * hw..(nc + 1) * hw] {
            acc += f64::from(v);
        }
        out.push((acc / hw as f64) as f32);
    }
    metrics::add_half_adds(cost::pool_avg_adds(n as u64, c as u64, h as u64, w as u64));
    metrics::add_macs(cost::pool_avg_macs(n as u64, c as u64));
    Tensor::new(&[n, c, 1, 1], out)
}

/// Global max pool plus flat argmax per (n, c) slice, first maximum in scan
/// order. The indices drive the deterministic backward routing.
pub(crate) fn pool_global_max_with_idx(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c);
    let mut idx = Vec::with_capacity(n * c);
    for nc in 0..n * c {
        let slice = &xd[nc * hw..(nc + 1) * hw];
        let mut best = slice[0];
        let mut best_i = 0u32;
        for (i, &v) in slice.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                best_i = i as u32;
            }
        }
        out.push(best);
        idx.push(best_i);
    }
    Ok((Tensor::new(&[n, c, 1, 1], out)?, idx))
}

/// Channel-wise mean/variance normalization: per (n, c) slice,
/// (x - mean) / sqrt(var + eps).
pub fn channel_norm(x: &Tensor, eps: f32) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let xd = x.data();
    let mut out = vec![0.0f32; xd.len()];
    for nc in 0..n * c {
        let slice = &xd[nc * hw..(nc + 1) * hw];
        let mut sum = 0.0f64;
        for &v in slice {
            sum += f64::from(v);
        }
        let mean = sum / hw as f64;
        let mut var = 0.0f64;
        for &v in slice {
            let d = f64::from(v) - mean;
            var += d * d;
        }
        var /= hw as f64;
        let inv = 1.0 / (var + f64::from(eps)).sqrt();
        let (mean, inv) = (mean as f32, inv as f32);
        for (o, &v) in out[nc * hw..(nc + 1) * hw].iter_mut().zip(slice) {
            *o = (v - mean) * inv;
        }
    }
    metrics::add_macs(cost::channel_norm_macs(n as u64, c as u64, h as u64, w as u64));
    metrics::add_half_adds(cost::channel_norm_adds(n as u64, c as u64, h as u64, w as u64));
    Tensor::new(x.shape(), out)
}

/// Nearest-neighbor 2x upsampling: each pixel becomes a 2x2 block.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let xd = x.data();
    let (h2, w2) = (h * 2, w * 2);
    let mut out = vec![0.0f32; n * c * h2 * w2];
    for nc in 0..n * c {
        let src = &xd[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * h2 * w2..(nc + 1) * h2 * w2];
        for y in 0..h2 {
            let srow = (y / 2) * w;
            let drow = y * w2;
            for xq in 0..w2 {
                dst[drow + xq] = src[srow + xq / 2];
            }
        }
    }
    Tensor::new(&[n, c, h2, w2], out)
}

/// 2x2 average pool, stride 2 (floor semantics on odd extents).
pub fn avgpool2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (h2, w2) = (h / 2, w / 2);
    if h2 == 0 || w2 == 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
        });
    }
    let xd = x.data();
    let mut out = vec![0.0f32; n * c * h2 * w2];
    for nc in 0..n * c {
        let src = &xd[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * h2 * w2..(nc + 1) * h2 * w2];
        for y in 0..h2 {
            for xq in 0..w2 {
                let s = 2 * y * w + 2 * xq;
                dst[y * w2 + xq] = (src[s] + src[s + 1] + src[s + w] + src[s + w + 1]) * 0.25;
            }
        }
    }
    metrics::add_macs(cost::avgpool2x2_macs((n * c * h2 * w2) as u64));
    metrics::add_half_adds(cost::avgpool2x2_adds((n * c * h * w) as u64));
    Tensor::new(&[n, c, h2, w2], out)
}

/// 2x2 max pool, stride 2, plus flat argmax (into the input slice) per
/// output element.
pub(crate) fn maxpool2x2_with_idx(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (n, c, h, w) = x.dims4()?;
    let (h2, w2) = (h / 2, w / 2);
    if h2 == 0 || w2 == 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
        });
    }
    let xd = x.data();
    let mut out = vec![0.0f32; n * c * h2 * w2];
    let mut idx = vec![0u32; n * c * h2 * w2];
    for nc in 0..n * c {
        let src = &xd[nc * h * w..(nc + 1) * h * w];
        for y in 0..h2 {
            for xq in 0..w2 {
                let s = 2 * y * w + 2 * xq;
                let cand = [s, s + 1, s + w, s + w + 1];
                let mut best = src[cand[0]];
                let mut best_i = cand[0];
                for &ci in &cand[1..] {
                    if src[ci] > best {
                        best = src[ci];
                        best_i = ci;
                    }
                }
                out[nc * h2 * w2 + y * w2 + xq] = best;
                idx[nc * h2 * w2 + y * w2 + xq] = best_i as u32;
            }
        }
    }
    Ok((Tensor::new(&[n, c, h2, w2], out)?, idx))
}

pub fn maxpool2x2(x: &Tensor) -> Result<Tensor> {
    Ok(maxpool2x2_with_idx(x)?.0)
}

/// Reflection padding: the border mirrors the interior, excluding the edge
/// pixel itself. Requires p < min(H, W).
pub fn reflect_pad(x: &Tensor, p: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if p == 0 {
        return Ok(x.clone());
    }
    if p >= h.min(w) {
        return Err(Error::PadTooLarge {
            pad: p,
            height: h,
            width: w,
        });
    }
    let (h2, w2) = (h + 2 * p, w + 2 * p);
    let xd = x.data();
    let mut out = vec![0.0f32; n * c * h2 * w2];
    let reflect = |i: isize, len: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= len {
            2 * len - 2 - i as usize
        } else {
            i as usize
        }
    };
    for nc in 0..n * c {
        let src = &xd[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * h2 * w2..(nc + 1) * h2 * w2];
        for y in 0..h2 {
            let sy = reflect(y as isize - p as isize, h);
            for xq in 0..w2 {
                let sx = reflect(xq as isize - p as isize, w);
                dst[y * w2 + xq] = src[sy * w + sx];
            }
        }
    }
    Tensor::new(&[n, c, h2, w2], out)
}

// ---------------------------------------------------------------------------
// reductions and batch manipulation
// ---------------------------------------------------------------------------

/// Sum over channels and space per sample: (N, C, H, W) -> (N, 1, 1, 1).
pub fn sum_chw(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let chw = c * h * w;
    let xd = x.data();
    let mut out = Vec::with_capacity(n);
    for ni in 0..n {
        let mut acc = 0.0f64;
        for &v in &xd[ni * chw..(ni + 1) * chw] {
            acc += f64::from(v);
        }
        out.push(acc as f32);
    }
    metrics::add_half_adds(cost::sum_adds(x.numel() as u64));
    Tensor::new(&[n, 1, 1, 1], out)
}

/// Sum of every element, shape (1, 1, 1, 1).
pub fn sum_all(x: &Tensor) -> Tensor {
    let mut acc = 0.0f64;
    for &v in x.data() {
        acc += f64::from(v);
    }
    metrics::add_half_adds(cost::sum_adds(x.numel() as u64));
    Tensor::scalar(acc as f32)
}

/// Copy of sample `index`: (N, C, H, W) -> (1, C, H, W).
pub fn batch_slice(x: &Tensor, index: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if index >= n {
        return Err(Error::InvalidConfig {
            message: format!("batch index {index} out of range for N={n}"),
        });
    }
    let chw = c * h * w;
    Tensor::new(&[1, c, h, w], x.data()[index * chw..(index + 1) * chw].to_vec())
}

/// Stack (1, C, H, W) samples into (N, C, H, W).
pub fn batch_concat(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::InvalidConfig {
        message: "batch_concat needs at least one part".into(),
    })?;
    let (_, c, h, w) = first.dims4()?;
    let mut data = Vec::with_capacity(parts.len() * c * h * w);
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if pn != 1 || pc != c || ph != h || pw != w {
            return Err(Error::ShapeMismatch {
                op: "batch_concat",
                left: first.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[parts.len(), c, h, w], data)
}

// ---------------------------------------------------------------------------
// backward kernels (used by the tape)
// ---------------------------------------------------------------------------

/// Gradient of conv1x1 w.r.t. input, kernel, and bias.
pub(crate) fn conv1x1_backward(
    x: &Tensor,
    kernel: &Tensor,
    grad: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (cout, cin, _, _) = kernel.dims4()?;
    let (n, _, h, w) = x.dims4()?;
    let hw = h * w;
    let xd = x.data();
    let kd = kernel.data();
    let gd = grad.data();

    let mut gx = vec![0.0f32; xd.len()];
    gx.par_chunks_mut(hw).enumerate().for_each(|(chunk, gxrow)| {
        let ni = chunk / cin;
        let ci = chunk % cin;
        for co in 0..cout {
            let kv = kd[co * cin + ci];
            if kv == 0.0 {
                continue;
            }
            let grow = &gd[(ni * cout + co) * hw..(ni * cout + co + 1) * hw];
            for (o, &gv) in gxrow.iter_mut().zip(grow) {
                *o += kv * gv;
            }
        }
    });

    let mut gk = vec![0.0f32; kd.len()];
    for ni in 0..n {
        for co in 0..cout {
            let grow = &gd[(ni * cout + co) * hw..(ni * cout + co + 1) * hw];
            for ci in 0..cin {
                let xrow = &xd[(ni * cin + ci) * hw..(ni * cin + ci + 1) * hw];
                let mut acc = 0.0f32;
                for (&gv, &xv) in grow.iter().zip(xrow) {
                    acc += gv * xv;
                }
                gk[co * cin + ci] += acc;
            }
        }
    }

    let mut gb = vec![0.0f32; cout];
    for ni in 0..n {
        for co in 0..cout {
            let grow = &gd[(ni * cout + co) * hw..(ni * cout + co + 1) * hw];
            gb[co] += grow.iter().sum::<f32>();
        }
    }

    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(kernel.shape(), gk)?,
        Tensor::new(&[cout], gb)?,
    ))
}

/// Gradient of the valid 3x3 convolution w.r.t. input, kernel, and bias.
pub(crate) fn conv3x3_backward(
    x: &Tensor,
    kernel: &Tensor,
    grad: &Tensor,
    stride: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (cout, cin, _, _) = kernel.dims4()?;
    let (n, _, h, w) = x.dims4()?;
    let (_, _, hout, wout) = grad.dims4()?;
    let xd = x.data();
    let kd = kernel.data();
    let gd = grad.data();

    let mut gx = vec![0.0f32; xd.len()];
    gx.par_chunks_mut(h * w).enumerate().for_each(|(chunk, gplane)| {
        let ni = chunk / cin;
        let ci = chunk % cin;
        for co in 0..cout {
            let kbase = (co * cin + ci) * 9;
            let gbase = (ni * cout + co) * hout * wout;
            for oy in 0..hout {
                for ox in 0..wout {
                    let gv = gd[gbase + oy * wout + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    let (iy, ix) = (oy * stride, ox * stride);
                    for ky in 0..3 {
                        let row = (iy + ky) * w + ix;
                        let krow = kbase + ky * 3;
                        gplane[row] += gv * kd[krow];
                        gplane[row + 1] += gv * kd[krow + 1];
                        gplane[row + 2] += gv * kd[krow + 2];
                    }
                }
            }
        }
    });

    let mut gk = vec![0.0f32; kd.len()];
    gk.par_chunks_mut(cin * 9).enumerate().for_each(|(co, gkslab)| {
        for ni in 0..n {
            let gbase = (ni * cout + co) * hout * wout;
            for ci in 0..cin {
                let xbase = (ni * cin + ci) * h * w;
                let kslab = &mut gkslab[ci * 9..(ci + 1) * 9];
                for oy in 0..hout {
                    for ox in 0..wout {
                        let gv = gd[gbase + oy * wout + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        let (iy, ix) = (oy * stride, ox * stride);
                        for ky in 0..3 {
                            let row = xbase + (iy + ky) * w + ix;
                            kslab[ky * 3] += gv * xd[row];
                            kslab[ky * 3 + 1] += gv * xd[row + 1];
                            kslab[ky * 3 + 2] += gv * xd[row + 2];
                        }
                    }
                }
            }
        }
    });

    let mut gb = vec![0.0f32; cout];
    for ni in 0..n {
        for co in 0..cout {
            let gbase = (ni * cout + co) * hout * wout;
            gb[co] += gd[gbase..gbase + hout * wout].iter().sum::<f32>();
        }
    }

    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(kernel.shape(), gk)?,
        Tensor::new(&[cout], gb)?,
    ))
}

/// Gradient of the valid depthwise 3x3 convolution w.r.t. input and kernel.
pub(crate) fn dwconv3x3_backward(
    x: &Tensor,
    depth: &Tensor,
    grad: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (n, c, h, w) = x.dims4()?;
    let (_, _, hout, wout) = grad.dims4()?;
    let xd = x.data();
    let kd = depth.data();
    let gd = grad.data();

    let mut gx = vec![0.0f32; xd.len()];
    let mut gk = vec![0.0f32; kd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let xbase = (ni * c + ci) * h * w;
            let gbase = (ni * c + ci) * hout * wout;
            let kbase = ci * 9;
            for oy in 0..hout {
                for ox in 0..wout {
                    let gv = gd[gbase + oy * wout + ox];
                    if gv == 0.0 {
                        continue;
                    }
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let xi = xbase + (oy + ky) * w + ox + kx;
                            gx[xi] += gv * kd[kbase + ky * 3 + kx];
                            gk[kbase + ky * 3 + kx] += gv * xd[xi];
                        }
                    }
                }
            }
        }
    }

    Ok((Tensor::new(x.shape(), gx)?, Tensor::new(depth.shape(), gk)?))
}

/// Gradient of reflect_pad: fold border gradients back onto their sources.
pub(crate) fn reflect_pad_backward(grad: &Tensor, p: usize, in_shape: &[usize]) -> Result<Tensor> {
    let (n, c, h2, w2) = grad.dims4()?;
    let (h, w) = (in_shape[2], in_shape[3]);
    let gd = grad.data();
    let mut out = vec![0.0f32; n * c * h * w];
    let reflect = |i: isize, len: usize| -> usize {
        if i < 0 {
            (-i) as usize
        } else if i as usize >= len {
            2 * len - 2 - i as usize
        } else {
            i as usize
        }
    };
    for nc in 0..n * c {
        let src = &gd[nc * h2 * w2..(nc + 1) * h2 * w2];
        let dst = &mut out[nc * h * w..(nc + 1) * h * w];
        for y in 0..h2 {
            let sy = reflect(y as isize - p as isize, h);
            for xq in 0..w2 {
                let sx = reflect(xq as isize - p as isize, w);
                dst[sy * w + sx] += src[y * w2 + xq];
            }
        }
    }
    Tensor::new(in_shape, out)
}

/// Gradient of nearest 2x upsampling: sum each 2x2 block.
pub(crate) fn upsample2x_backward(grad: &Tensor) -> Result<Tensor> {
    let (n, c, h2, w2) = grad.dims4()?;
    let (h, w) = (h2 / 2, w2 / 2);
    let gd = grad.data();
    let mut out = vec![0.0f32; n * c * h * w];
    for nc in 0..n * c {
        let src = &gd[nc * h2 * w2..(nc + 1) * h2 * w2];
        let dst = &mut out[nc * h * w..(nc + 1) * h * w];
        for y in 0..h2 {
            for xq in 0..w2 {
                dst[(y / 2) * w + xq / 2] += src[y * w2 + xq];
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t4(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn broadcast_mul_channel_scale() {
        let a = Tensor::ones(&[1, 2, 2, 2]).unwrap();
        let b = t4(&[1, 2, 1, 1], &[2.0, 3.0]);
        let out = broadcast_binary(&a, &b, BinaryKind::Mul).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2, 2]);
        assert_eq!(&out.data()[..4], &[2.0; 4]);
        assert_eq!(&out.data()[4..], &[3.0; 4]);
    }

    #[test]
    fn broadcast_add_identity_is_bitwise() {
        let x = t4(&[1, 2, 2, 1], &[1.5, -0.25, 3.0, 7.125]);
        let z = Tensor::zeros(&[1, 2, 2, 1]).unwrap();
        let out = broadcast_binary(&x, &z, BinaryKind::Add).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn broadcast_channel_mismatch_errors_with_shapes() {
        let a = Tensor::ones(&[1, 3, 4, 4]).unwrap();
        let b = Tensor::ones(&[1, 2, 1, 1]).unwrap();
        let err = broadcast_binary(&a, &b, BinaryKind::Mul).unwrap_err();
        match err {
            Error::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, vec![1, 3, 4, 4]);
                assert_eq!(right, vec![1, 2, 1, 1]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let eye = Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let m = Tensor::new(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);

        let a = Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new(&[2, 1], vec![1., 1.]).unwrap();
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out.data(), &[3., 7.]);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let a = Tensor::ones(&[2, 3]).unwrap();
        let b = Tensor::ones(&[2, 3]).unwrap();
        assert!(matches!(
            matmul(&a, &b),
            Err(Error::InnerDimMismatch { .. })
        ));
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let z = Tensor::zeros(&[1, 4]).unwrap();
        let out = softmax_rows(&z).unwrap();
        for &v in out.data() {
            assert!((v - 0.25).abs() < 1e-7);
        }

        let m = Tensor::new(&[2, 3], vec![0.3, -1.2, 2.0, 5.0, 5.5, 4.5]).unwrap();
        let shifted = add_scalar(&m, 13.75);
        let a = softmax_rows(&m).unwrap();
        let b = softmax_rows(&shifted).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_closed_form_quarter() {
        let m = Tensor::new(&[1, 2], vec![0.0, 3f32.ln()]).unwrap();
        let out = softmax_rows(&m).unwrap();
        assert!((out.data()[0] - 0.25).abs() < 1e-6);
        assert!((out.data()[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn conv1x1_identity_kernel() {
        let x = t4(&[1, 2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let k = t4(&[2, 2, 1, 1], &[1., 0., 0., 1.]);
        let b = Tensor::zeros(&[2]).unwrap();
        assert_eq!(conv1x1(&x, &k, &b).unwrap(), x);
    }

    #[test]
    fn conv1x1_hand_case() {
        // kernel rows [1,1] and [1,-1] on the pixel value (3,4)
        let x = t4(&[1, 2, 1, 1], &[3., 4.]);
        let k = t4(&[2, 2, 1, 1], &[1., 1., 1., -1.]);
        let b = Tensor::zeros(&[2]).unwrap();
        let out = conv1x1(&x, &k, &b).unwrap();
        assert_eq!(out.data(), &[7., -1.]);
    }

    #[test]
    fn conv1x1_channel_mismatch() {
        let x = Tensor::ones(&[1, 3, 2, 2]).unwrap();
        let k = Tensor::ones(&[2, 2, 1, 1]).unwrap();
        let b = Tensor::zeros(&[2]).unwrap();
        assert!(matches!(
            conv1x1(&x, &k, &b),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    #[test]
    fn depthwise_separable_constant_field() {
        // all-ones depth kernel on a constant channel, identity pointwise:
        // reflection padding keeps the field constant, so every tap sees c
        let x = Tensor::full(&[1, 1, 4, 4], 2.5).unwrap();
        let depth = Tensor::ones(&[1, 1, 3, 3]).unwrap();
        let point = Tensor::ones(&[1, 1, 1, 1]).unwrap();
        let w = ConvWeights::depthwise_separable(depth, point, Tensor::zeros(&[1]).unwrap())
            .unwrap();
        let out = conv2d(&x, &w).unwrap();
        assert_eq!(out.shape(), &[1, 1, 4, 4]);
        for &v in out.data() {
            assert!((v - 9.0 * 2.5).abs() < 1e-5);
        }
    }

    #[test]
    fn pool_global_hand_cases() {
        let x = t4(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(pool_global(&x, PoolKind::Avg).unwrap().data(), &[2.5]);
        assert_eq!(pool_global(&x, PoolKind::Max).unwrap().data(), &[4.0]);
        let c = Tensor::full(&[1, 1, 3, 3], 1.25).unwrap();
        assert_eq!(pool_global(&c, PoolKind::Avg).unwrap().data(), &[1.25]);
        assert_eq!(pool_global(&c, PoolKind::Max).unwrap().data(), &[1.25]);
    }

    #[test]
    fn channel_norm_constant_is_zero() {
        let x = Tensor::full(&[1, 2, 3, 3], 5.0).unwrap();
        let out = channel_norm(&x, 1e-5).unwrap();
        for &v in out.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn channel_norm_standardizes() {
        let x = t4(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let out = channel_norm(&x, 1e-12).unwrap();
        let mean: f32 = out.data().iter().sum::<f32>() / 4.0;
        let var: f32 = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn channel_norm_affine_invariance() {
        let x = t4(&[1, 1, 2, 3], &[0.3, -1.0, 2.5, 0.9, -0.2, 1.1]);
        let scaled = add_scalar(&mul_scalar(&x, 3.0), -2.0);
        let a = channel_norm(&x, 1e-5).unwrap();
        let b = channel_norm(&scaled, 1e-5).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-4);
        }
    }

    #[test]
    fn upsample_shapes_and_values() {
        let x = t4(&[1, 1, 1, 1], &[7.0]);
        let up = upsample_nearest2x(&x).unwrap();
        assert_eq!(up.shape(), &[1, 1, 2, 2]);
        assert_eq!(up.data(), &[7.0; 4]);

        let m = t4(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let up = upsample_nearest2x(&m).unwrap();
        assert_eq!(
            up.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );

        let s = Tensor::ones(&[1, 3, 5, 7]).unwrap();
        assert_eq!(upsample_nearest2x(&s).unwrap().shape(), &[1, 3, 10, 14]);
    }

    #[test]
    fn upsample_then_avgpool_is_identity() {
        let x = t4(&[1, 2, 2, 2], &[1., -2., 3.5, 0.25, 9., 8., -7., 0.125]);
        let round = avgpool2x2(&upsample_nearest2x(&x).unwrap()).unwrap();
        assert_eq!(round, x);
    }

    #[test]
    fn reflect_pad_row() {
        let x = t4(&[1, 1, 1, 3], &[1., 2., 3.]);
        // pad only makes sense with p < min(H, W) = 1, so use a 3x3 to check
        // the row pattern
        let sq = t4(&[1, 1, 3, 3], &[1., 2., 3., 1., 2., 3., 1., 2., 3.]);
        let out = reflect_pad(&sq, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 5, 5]);
        // middle row mirrors [1,2,3] to [2,1,2,3,2]
        assert_eq!(&out.data()[10..15], &[2., 1., 2., 3., 2.]);
        assert_eq!(reflect_pad(&x, 0).unwrap(), x);
    }

    #[test]
    fn reflect_pad_too_large() {
        let x = Tensor::ones(&[1, 1, 2, 2]).unwrap();
        assert!(matches!(
            reflect_pad(&x, 2),
            Err(Error::PadTooLarge { .. })
        ));
    }

    #[test]
    fn relu_cases() {
        let x = t4(&[1, 1, 1, 3], &[-1., 0., 2.]);
        let out = relu(&x);
        assert_eq!(out.data(), &[0., 0., 2.]);
        let y = t4(&[1, 1, 1, 3], &[0.5, 0., 2.]);
        assert_eq!(relu(&y), y);
        assert_eq!(relu(&relu(&x)), relu(&x));
    }

    #[test]
    fn conv3x3_stride2_halves_even_inputs_after_pad() {
        let x = Tensor::ones(&[1, 1, 8, 8]).unwrap();
        let k = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let padded = reflect_pad(&x, 1).unwrap();
        let out = conv3x3_valid(&padded, &k, &b, 2).unwrap();
        assert_eq!(out.shape(), &[1, 1, 4, 4]);
    }

    #[test]
    fn batch_slice_concat_roundtrip() {
        let x = Tensor::from_fn(&[3, 2, 2, 2], |i| i as f32).unwrap();
        let parts: Vec<Tensor> = (0..3).map(|i| batch_slice(&x, i).unwrap()).collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        assert_eq!(batch_concat(&refs).unwrap(), x);
    }
}
