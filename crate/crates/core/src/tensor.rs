//! Dense row-major `f64` tensors and the forward/backward kernels every
//! network in the crate is assembled from.
//!
//! Kernels are plain functions over [`Tensor`] values. The autodiff tape in
//! [`crate::graph`] records which kernel produced a value and calls the
//! matching `*_backward` function during reverse accumulation.
//!
//! Convolutions are cross-correlations (no kernel flip). Every output element
//! is reduced in a fixed order, so results do not depend on scheduling.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!(
                "tensor shape must have positive dimensions, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        assert!(numel > 0, "tensor shape must have positive dimensions");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "tensor needs at least one value");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Uniform values in `[-bound, bound)`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Adds `other` elementwise in place; shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("add", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn chw(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(op, &self.shape, &[0, 0, 0])),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMode {
    Standard,
    Depthwise,
    Pointwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub mode: ConvMode,
}

impl ConvSpec {
    pub fn standard(in_channels: usize, out_channels: usize, kernel_size: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            stride: 1,
            padding: kernel_size / 2,
            mode: ConvMode::Standard,
        }
    }

    pub fn depthwise(channels: usize, kernel_size: usize, stride: usize) -> Self {
        Self {
            in_channels: channels,
            out_channels: channels,
            kernel_size,
            stride,
            padding: kernel_size / 2,
            mode: ConvMode::Depthwise,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size: 1,
            stride: 1,
            padding: 0,
            mode: ConvMode::Pointwise,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel_size == 0 {
            return Err(Error::Config(format!("degenerate conv spec {self:?}")));
        }
        if self.stride == 0 {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        match self.mode {
            ConvMode::Depthwise if self.out_channels % self.in_channels != 0 => {
                Err(Error::Config(format!(
                    "depthwise conv needs out_channels ({}) to be a multiple of in_channels ({})",
                    self.out_channels, self.in_channels
                )))
            }
            ConvMode::Pointwise if self.kernel_size != 1 => Err(Error::Config(format!(
                "pointwise conv needs kernel_size 1, got {}",
                self.kernel_size
            ))),
            _ => Ok(()),
        }
    }

    pub fn groups(&self) -> usize {
        match self.mode {
            ConvMode::Depthwise => self.in_channels,
            ConvMode::Standard | ConvMode::Pointwise => 1,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups(),
            self.kernel_size,
            self.kernel_size,
        ]
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    /// Output extent along one spatial axis, or `None` when the kernel does
    /// not fit.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel_size {
            return None;
        }
        Some((padded - self.kernel_size) / self.stride + 1)
    }

    /// Fan-in of one output unit, used for weight initialization.
    pub fn fan_in(&self) -> usize {
        (self.in_channels / self.groups()) * self.kernel_size * self.kernel_size
    }
}

/// Parameter count of a depthwise-separable block without bias: `C·K² + C·O`.
pub fn separable_param_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
    in_channels * kernel * kernel + in_channels * out_channels
}

/// Parameter count of a standard convolution without bias: `C·O·K²`.
pub fn standard_param_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
    in_channels * out_channels * kernel * kernel
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    oh: usize,
    ow: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cin_per_group: usize,
    cout_per_group: usize,
}

impl ConvGeom {
    fn new(input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        let (c, h, w) = input.chw("conv2d")?;
        if c != spec.in_channels {
            return Err(Error::shape(
                "conv2d input channels",
                input.shape(),
                &[spec.in_channels, h, w],
            ));
        }
        let expected = spec.weight_shape();
        if weights.shape() != expected {
            return Err(Error::shape("conv2d weights", weights.shape(), &expected));
        }
        let (Some(oh), Some(ow)) = (spec.output_extent(h), spec.output_extent(w)) else {
            return Err(Error::shape(
                "conv2d kernel larger than padded input",
                input.shape(),
                &expected,
            ));
        };
        let groups = spec.groups();
        Ok(Self {
            c,
            h,
            w,
            o: spec.out_channels,
            oh,
            ow,
            k: spec.kernel_size,
            stride: spec.stride,
            pad: spec.padding,
            cin_per_group: c / groups,
            cout_per_group: spec.out_channels / groups,
        })
    }

    /// Range of output indices whose input coordinate `o*stride + k - pad`
    /// lands inside `[0, extent)`.
    fn valid(&self, k: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k { (self.pad - k).div_ceil(s) } else { 0 };
        // need o*s + k - pad <= extent - 1
        let limit = extent + self.pad;
        let hi = if limit > k { (limit - k - 1) / s + 1 } else { 0 };
        (lo.min(out_extent), hi.min(out_extent))
    }

    /// Visits every (output channel, input channel, weight index, ky, kx)
    /// tap together with the valid output row/column ranges.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        for o in 0..self.o {
            let g = o / self.cout_per_group;
            for ci in 0..self.cin_per_group {
                let c = g * self.cin_per_group + ci;
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let widx = ((o * self.cin_per_group + ci) * self.k + ky) * self.k + kx;
                        f(o, c, widx, ky, kx);
                    }
                }
            }
        }
    }
}

pub fn conv2d(input: &Tensor, weights: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let g = ConvGeom::new(input, weights, spec)?;
    let mut out = vec![0.0; g.o * g.oh * g.ow];
    let x = input.data();
    let wt = weights.data();
    g.for_each_tap(|o, c, widx, ky, kx| {
        let wv = wt[widx];
        let (y0, y1) = g.valid(ky, g.h, g.oh);
        let (x0, x1) = g.valid(kx, g.w, g.ow);
        for oy in y0..y1 {
            let iy = oy * g.stride + ky - g.pad;
            let orow = &mut out[(o * g.oh + oy) * g.ow..][..g.ow];
            let irow = &x[(c * g.h + iy) * g.w..][..g.w];
            for ox in x0..x1 {
                orow[ox] += wv * irow[ox * g.stride + kx - g.pad];
            }
        }
    });
    Tensor::new(vec![g.o, g.oh, g.ow], out)
}

/// Returns `(grad_input, grad_weights)`.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeom::new(input, weights, spec)?;
    if grad_out.shape() != [g.o, g.oh, g.ow] {
        return Err(Error::shape(
            "conv2d_backward",
            grad_out.shape(),
            &[g.o, g.oh, g.ow],
        ));
    }
    let mut gin = vec![0.0; g.c * g.h * g.w];
    let mut gw = vec![0.0; weights.len()];
    let x = input.data();
    let wt = weights.data();
    let go = grad_out.data();
    g.for_each_tap(|o, c, widx, ky, kx| {
        let wv = wt[widx];
        let (y0, y1) = g.valid(ky, g.h, g.oh);
        let (x0, x1) = g.valid(kx, g.w, g.ow);
        let mut acc = 0.0;
        for oy in y0..y1 {
            let iy = oy * g.stride + ky - g.pad;
            let grow = &go[(o * g.oh + oy) * g.ow..][..g.ow];
            let ibase = (c * g.h + iy) * g.w;
            for ox in x0..x1 {
                let ix = ox * g.stride + kx - g.pad;
                acc += x[ibase + ix] * grow[ox];
                gin[ibase + ix] += wv * grow[ox];
            }
        }
        gw[widx] += acc;
    });
    Ok((
        Tensor::new(vec![g.c, g.h, g.w], gin)?,
        Tensor::new(weights.shape().to_vec(), gw)?,
    ))
}

/// Depthwise `K×K` filtering of every channel followed by a `1×1` channel mix.
pub fn depthwise_separable(
    input: &Tensor,
    dw_weights: &Tensor,
    pw_weights: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (dw, pw) = separable_specs(input, dw_weights, pw_weights, stride, padding)?;
    let mid = conv2d(input, dw_weights, &dw)?;
    conv2d(&mid, pw_weights, &pw)
}

pub(crate) fn separable_specs(
    input: &Tensor,
    dw_weights: &Tensor,
    pw_weights: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(ConvSpec, ConvSpec)> {
    let (c, _, _) = input.chw("depthwise_separable")?;
    let (&[dc, 1, k, k2], &[o, pc, 1, 1]) = (dw_weights.shape(), pw_weights.shape()) else {
        return Err(Error::shape(
            "depthwise_separable weights",
            dw_weights.shape(),
            pw_weights.shape(),
        ));
    };
    if k != k2 || dc != c || pc != c {
        return Err(Error::shape(
            "depthwise_separable channels",
            dw_weights.shape(),
            pw_weights.shape(),
        ));
    }
    let dw = ConvSpec::depthwise(c, k, stride).with_padding(padding);
    Ok((dw, ConvSpec::pointwise(c, o)))
}

/// Adds `bias[c]` to every element of channel `c` (rank-3 input) or to
/// element `c` (rank-1 input).
pub fn add_channel_bias(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let channels = input.shape()[0];
    if bias.shape() != [channels] {
        return Err(Error::shape("add_channel_bias", input.shape(), bias.shape()));
    }
    let per = input.len() / channels;
    let mut out = input.clone();
    for (c, chunk) in out.data_mut().chunks_mut(per).enumerate() {
        let b = bias.data()[c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(out)
}

pub fn add_channel_bias_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let channels = input_shape[0];
    let per = grad_out.len() / channels;
    Tensor::from_vec(grad_out.data().chunks(per).map(|c| c.iter().sum()).collect())
}

pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw("global_avg_pool")?;
    let n = (h * w) as f64;
    let data = input
        .data()
        .chunks(h * w)
        .map(|ch| ch.iter().sum::<f64>() / n)
        .collect();
    Tensor::new(vec![c], data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = input_shape else {
        return Err(Error::shape("global_avg_pool_backward", input_shape, &[0, 0, 0]));
    };
    let n = (h * w) as f64;
    let mut data = Vec::with_capacity(c * h * w);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g / n, h * w));
    }
    Tensor::new(vec![c, h, w], data)
}

pub fn linear(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = input.len();
    let (&[m, wn], &[bm]) = (weights.shape(), bias.shape()) else {
        return Err(Error::shape("linear", weights.shape(), bias.shape()));
    };
    if input.rank() != 1 || wn != n || bm != m {
        return Err(Error::shape("linear", input.shape(), weights.shape()));
    }
    let x = input.data();
    let out = weights
        .data()
        .chunks(n)
        .zip(bias.data())
        .map(|(row, b)| row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b)
        .collect();
    Tensor::new(vec![m], out)
}

/// Returns `(grad_input, grad_weights, grad_bias)`.
pub fn linear_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let n = input.len();
    let mut gin = vec![0.0; n];
    let mut gw = Vec::with_capacity(weights.len());
    for (row, &g) in weights.data().chunks(n).zip(grad_out.data()) {
        for ((gi, w), x) in gin.iter_mut().zip(row).zip(input.data()) {
            *gi += w * g;
            gw.push(x * g);
        }
    }
    (
        Tensor::from_vec(gin),
        Tensor {
            shape: weights.shape().to_vec(),
            data: gw,
        },
        grad_out.clone(),
    )
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    zip_map(input, grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(sigmoid_scalar)
}

pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    zip_map(output, grad_out, |y, g| g * y * (1.0 - y))
}

/// Shift-stable softmax over a rank-1 tensor.
pub fn softmax(input: &Tensor) -> Tensor {
    Tensor::from_vec(softmax_slice(input.data()))
}

pub fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&o| (o - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax_slice(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&o| (o - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&o| o - lse).collect()
}

pub fn softmax_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let dot: f64 = output.data().iter().zip(grad_out.data()).map(|(p, g)| p * g).sum();
    zip_map(output, grad_out, |p, g| p * (g - dot))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

/// Inverted-dropout keep mask: each entry is `0` or `1/(1-p)`.
pub fn dropout_mask(len: usize, p: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability must be in [0, 1), got {p}")));
    }
    let scale = 1.0 / (1.0 - p);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
        .collect())
}

pub fn dropout(input: &Tensor, p: f64, mode: DropoutMode, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability must be in [0, 1), got {p}")));
    }
    match mode {
        DropoutMode::Eval => Ok(input.clone()),
        DropoutMode::Train if p == 0.0 => Ok(input.clone()),
        DropoutMode::Train => {
            let mask = dropout_mask(input.len(), p, rng)?;
            Ok(apply_mask(input, &mask))
        }
    }
}

pub(crate) fn apply_mask(input: &Tensor, mask: &[f64]) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().zip(mask).map(|(x, m)| x * m).collect(),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// Lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
