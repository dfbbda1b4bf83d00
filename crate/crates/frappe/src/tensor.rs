//! Dense tensor storage and the forward/backward math kernels.
//!
//! A [`SignalTensor`] is a row-major `f32` array whose first extent is the
//! channel count and whose remaining extents are spatio-temporal dimensions.
//! It carries images, latent grids, residuals, and weights.
//!
//! All dot products accumulate in `f64` and store `f32`, which keeps the
//! finite-difference gradient checks in the test suite meaningful without
//! giving up single-precision storage.

use crate::error::{Error, Result};

/// Channels-first dense tensor of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl SignalTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {expect} values, got {}",
                data.len()
            )));
        }
        Ok(SignalTensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        SignalTensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn scalar(value: f32) -> Self {
        SignalTensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Channel extent (first axis).
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Spatial extents (everything after the channel axis).
    pub fn spatial(&self) -> &[usize] {
        &self.shape[1..]
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> SignalTensor {
        SignalTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &SignalTensor) -> bool {
        self.shape == other.shape
    }
}

fn check_same_shape(a: &SignalTensor, b: &SignalTensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Elementwise kernels
// ---------------------------------------------------------------------------

pub fn add(a: &SignalTensor, b: &SignalTensor) -> Result<SignalTensor> {
    check_same_shape(a, b, "add")?;
    Ok(SignalTensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

pub fn sub(a: &SignalTensor, b: &SignalTensor) -> Result<SignalTensor> {
    check_same_shape(a, b, "sub")?;
    Ok(SignalTensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect(),
    })
}

pub fn scale(a: &SignalTensor, c: f32) -> SignalTensor {
    a.map(|v| v * c)
}

pub fn exp(a: &SignalTensor) -> SignalTensor {
    a.map(f32::exp)
}

/// Tanh-approximated GELU; the approximation constant is
/// sqrt(2/pi) = 0.7978845608028654.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

pub fn gelu(a: &SignalTensor) -> SignalTensor {
    a.map(|v| {
        let x = v as f64;
        let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
        (0.5 * x * (1.0 + u.tanh())) as f32
    })
}

pub fn gelu_vjp(input: &SignalTensor, gy: &SignalTensor) -> SignalTensor {
    let data = input
        .data
        .iter()
        .zip(&gy.data)
        .map(|(&v, &g)| {
            let x = v as f64;
            let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
            let t = u.tanh();
            let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
            let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
            (d * g as f64) as f32
        })
        .collect();
    SignalTensor {
        shape: input.shape.clone(),
        data,
    }
}

pub fn hardtanh(a: &SignalTensor) -> SignalTensor {
    a.map(|v| v.clamp(-1.0, 1.0))
}

pub fn hardtanh_vjp(input: &SignalTensor, gy: &SignalTensor) -> SignalTensor {
    let data = input
        .data
        .iter()
        .zip(&gy.data)
        .map(|(&v, &g)| if v > -1.0 && v < 1.0 { g } else { 0.0 })
        .collect();
    SignalTensor {
        shape: input.shape.clone(),
        data,
    }
}

// ---------------------------------------------------------------------------
// Per-channel affine kernels
// ---------------------------------------------------------------------------

fn check_channel_vec(input: &SignalTensor, v: &SignalTensor, op: &str) -> Result<()> {
    if v.shape.len() != 1 || v.shape[0] != input.channels() {
        return Err(Error::shape(format!(
            "{op}: channel vector {:?} vs input {:?}",
            v.shape, input.shape
        )));
    }
    Ok(())
}

/// y[c, s] = x[c, s] * m[c]
pub fn mul_channels(input: &SignalTensor, m: &SignalTensor) -> Result<SignalTensor> {
    check_channel_vec(input, m, "mul_channels")?;
    let sp = input.spatial_len();
    let mut data = Vec::with_capacity(input.len());
    for c in 0..input.channels() {
        let k = m.data[c];
        data.extend(input.data[c * sp..(c + 1) * sp].iter().map(|&v| v * k));
    }
    Ok(SignalTensor {
        shape: input.shape.clone(),
        data,
    })
}

pub fn mul_channels_vjp(
    input: &SignalTensor,
    m: &SignalTensor,
    gy: &SignalTensor,
) -> (SignalTensor, SignalTensor) {
    let sp = input.spatial_len();
    let mut d_in = vec![0.0f32; input.len()];
    let mut d_m = vec![0.0f32; m.len()];
    for c in 0..input.channels() {
        let k = m.data[c];
        let mut acc = 0.0f64;
        for s in 0..sp {
            let i = c * sp + s;
            d_in[i] = gy.data[i] * k;
            acc += (gy.data[i] as f64) * (input.data[i] as f64);
        }
        d_m[c] = acc as f32;
    }
    (
        SignalTensor {
            shape: input.shape.clone(),
            data: d_in,
        },
        SignalTensor {
            shape: m.shape.clone(),
            data: d_m,
        },
    )
}

/// y[c, s] = x[c, s] + b[c]
pub fn add_channels(input: &SignalTensor, b: &SignalTensor) -> Result<SignalTensor> {
    check_channel_vec(input, b, "add_channels")?;
    let sp = input.spatial_len();
    let mut data = Vec::with_capacity(input.len());
    for c in 0..input.channels() {
        let k = b.data[c];
        data.extend(input.data[c * sp..(c + 1) * sp].iter().map(|&v| v + k));
    }
    Ok(SignalTensor {
        shape: input.shape.clone(),
        data,
    })
}

pub fn add_channels_vjp_bias(input: &SignalTensor, gy: &SignalTensor) -> SignalTensor {
    let sp = input.spatial_len();
    let mut d_b = vec![0.0f32; input.channels()];
    for c in 0..input.channels() {
        let mut acc = 0.0f64;
        for s in 0..sp {
            acc += gy.data[c * sp + s] as f64;
        }
        d_b[c] = acc as f32;
    }
    SignalTensor {
        shape: vec![input.channels()],
        data: d_b,
    }
}

// ---------------------------------------------------------------------------
// Softsign compander
// ---------------------------------------------------------------------------

/// Signed 8-bit companding range r = 127.
pub const COMPAND_RANGE: f32 = 127.0;

/// Softsign compander r*u / (sigma_c + |u|), one sigma per channel.
///
/// Output is strictly inside (-127, 127), odd, and monotone in u.
pub fn compand(input: &SignalTensor, sigma: &SignalTensor) -> Result<SignalTensor> {
    check_channel_vec(input, sigma, "compand")?;
    if sigma.data.iter().any(|&s| s <= 0.0) {
        return Err(Error::parameter("compander sigma must be positive"));
    }
    let sp = input.spatial_len();
    let mut data = Vec::with_capacity(input.len());
    for c in 0..input.channels() {
        let s = sigma.data[c];
        data.extend(
            input.data[c * sp..(c + 1) * sp]
                .iter()
                .map(|&u| COMPAND_RANGE * u / (s + u.abs())),
        );
    }
    Ok(SignalTensor {
        shape: input.shape.clone(),
        data,
    })
}

pub fn compand_vjp(
    input: &SignalTensor,
    sigma: &SignalTensor,
    gy: &SignalTensor,
) -> (SignalTensor, SignalTensor) {
    let sp = input.spatial_len();
    let mut d_in = vec![0.0f32; input.len()];
    let mut d_sigma = vec![0.0f32; sigma.len()];
    for c in 0..input.channels() {
        let s = sigma.data[c] as f64;
        let mut acc = 0.0f64;
        for i in c * sp..(c + 1) * sp {
            let u = input.data[i] as f64;
            let denom = s + u.abs();
            let g = gy.data[i] as f64;
            d_in[i] = (g * COMPAND_RANGE as f64 * s / (denom * denom)) as f32;
            acc += -g * COMPAND_RANGE as f64 * u / (denom * denom);
        }
        d_sigma[c] = acc as f32;
    }
    (
        SignalTensor {
            shape: input.shape.clone(),
            data: d_in,
        },
        SignalTensor {
            shape: sigma.shape.clone(),
            data: d_sigma,
        },
    )
}

// ---------------------------------------------------------------------------
// Non-overlapping strided convolution and its transpose (any rank 1..=3)
// ---------------------------------------------------------------------------

fn patch_offsets(spatial: &[usize], stride: usize) -> Vec<usize> {
    // Flat input offsets of one stride^D patch, nested last-dim fastest.
    let rank = spatial.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * spatial[d + 1];
    }
    let count = stride.pow(rank as u32);
    let mut offsets = Vec::with_capacity(count);
    for k in 0..count {
        let mut rem = k;
        let mut off = 0usize;
        for d in (0..rank).rev() {
            off += (rem % stride) * strides[d];
            rem /= stride;
        }
        offsets.push(off);
    }
    offsets
}

fn patch_bases(spatial: &[usize], stride: usize) -> Vec<usize> {
    // Flat input offset of each patch's corner, in output row-major order.
    let rank = spatial.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * spatial[d + 1];
    }
    let out_extents: Vec<usize> = spatial.iter().map(|&t| t / stride).collect();
    let sites: usize = out_extents.iter().product();
    let mut bases = Vec::with_capacity(sites);
    for s in 0..sites {
        let mut rem = s;
        let mut base = 0usize;
        for d in (0..rank).rev() {
            base += (rem % out_extents[d]) * stride * strides[d];
            rem /= out_extents[d];
        }
        bases.push(base);
    }
    bases
}

fn check_strided_shapes(
    input: &SignalTensor,
    kernel: &SignalTensor,
    bias: &[f32],
    stride: usize,
    transposed: bool,
) -> Result<()> {
    let rank = input.shape.len() - 1;
    if stride == 0 {
        return Err(Error::parameter("stride must be positive"));
    }
    if kernel.shape.len() != rank + 2 {
        return Err(Error::shape(format!(
            "kernel rank {} does not match input rank {}",
            kernel.shape.len(),
            input.shape.len()
        )));
    }
    if kernel.shape[2..].iter().any(|&k| k != stride) {
        return Err(Error::shape(format!(
            "kernel spatial extents {:?} must equal stride {stride}",
            &kernel.shape[2..]
        )));
    }
    let (in_axis, out_axis) = if transposed { (0, 1) } else { (1, 0) };
    if kernel.shape[in_axis] != input.channels() {
        return Err(Error::shape(format!(
            "kernel input channels {} vs tensor channels {} (axis {in_axis})",
            kernel.shape[in_axis],
            input.channels()
        )));
    }
    if bias.len() != kernel.shape[out_axis] {
        return Err(Error::shape(format!(
            "bias length {} vs output channels {}",
            bias.len(),
            kernel.shape[out_axis]
        )));
    }
    if !transposed {
        for (d, &t) in input.spatial().iter().enumerate() {
            if t % stride != 0 {
                return Err(Error::shape(format!(
                    "spatial axis {d} extent {t} not divisible by stride {stride}"
                )));
            }
        }
    }
    Ok(())
}

/// Strided convolution with non-overlapping patches: kernel spatial size
/// equals the stride, so each output site is one patch dot product.
///
/// input [C_in, T...], kernel [C_out, C_in, p, .., p] -> [C_out, T/p ...].
pub fn conv_strided(
    input: &SignalTensor,
    kernel: &SignalTensor,
    bias: &[f32],
    stride: usize,
) -> Result<SignalTensor> {
    check_strided_shapes(input, kernel, bias, stride, false)?;
    let c_in = input.channels();
    let c_out = kernel.shape[0];
    let offs = patch_offsets(input.spatial(), stride);
    let bases = patch_bases(input.spatial(), stride);
    let sp_in = input.spatial_len();
    let pk = offs.len();
    let mut out_shape = vec![c_out];
    out_shape.extend(input.spatial().iter().map(|&t| t / stride));
    let mut out = vec![0.0f32; c_out * bases.len()];
    for m in 0..c_out {
        let kbase = m * c_in * pk;
        for (s, &base) in bases.iter().enumerate() {
            let mut acc = bias[m] as f64;
            for c in 0..c_in {
                let krow = &kernel.data[kbase + c * pk..kbase + (c + 1) * pk];
                let ibase = c * sp_in + base;
                for (k, &off) in offs.iter().enumerate() {
                    acc += krow[k] as f64 * input.data[ibase + off] as f64;
                }
            }
            out[m * bases.len() + s] = acc as f32;
        }
    }
    SignalTensor::new(out_shape, out)
}

/// Gradients of `conv_strided` w.r.t. (input, kernel, bias).
pub fn conv_strided_vjp(
    input: &SignalTensor,
    kernel: &SignalTensor,
    gy: &SignalTensor,
) -> (SignalTensor, SignalTensor, SignalTensor) {
    let stride = kernel.shape[2];
    let c_in = input.channels();
    let c_out = kernel.shape[0];
    let offs = patch_offsets(input.spatial(), stride);
    let bases = patch_bases(input.spatial(), stride);
    let sp_in = input.spatial_len();
    let sp_out = bases.len();
    let pk = offs.len();

    let mut d_in = vec![0.0f64; input.len()];
    let mut d_k = vec![0.0f64; kernel.len()];
    let mut d_b = vec![0.0f64; c_out];
    for m in 0..c_out {
        let kbase = m * c_in * pk;
        for (s, &base) in bases.iter().enumerate() {
            let g = gy.data[m * sp_out + s] as f64;
            d_b[m] += g;
            for c in 0..c_in {
                let ibase = c * sp_in + base;
                for (k, &off) in offs.iter().enumerate() {
                    d_in[ibase + off] += g * kernel.data[kbase + c * pk + k] as f64;
                    d_k[kbase + c * pk + k] += g * input.data[ibase + off] as f64;
                }
            }
        }
    }
    (
        SignalTensor {
            shape: input.shape.clone(),
            data: d_in.into_iter().map(|v| v as f32).collect(),
        },
        SignalTensor {
            shape: kernel.shape.clone(),
            data: d_k.into_iter().map(|v| v as f32).collect(),
        },
        SignalTensor {
            shape: vec![c_out],
            data: d_b.into_iter().map(|v| v as f32).collect(),
        },
    )
}

/// Transposed strided convolution: each input site scatters kernel * value
/// into a disjoint stride-sized output block.
///
/// input [C_in, T...], kernel [C_in, C_out, p, .., p] -> [C_out, T*p ...].
pub fn conv_transposed(
    input: &SignalTensor,
    kernel: &SignalTensor,
    bias: &[f32],
    stride: usize,
) -> Result<SignalTensor> {
    check_strided_shapes(input, kernel, bias, stride, true)?;
    let c_in = input.channels();
    let c_out = kernel.shape[1];
    let mut out_shape = vec![c_out];
    out_shape.extend(input.spatial().iter().map(|&t| t * stride));
    let out_spatial: Vec<usize> = out_shape[1..].to_vec();
    let offs = patch_offsets(&out_spatial, stride);
    let bases = patch_bases(&out_spatial, stride);
    let sp_in = input.spatial_len();
    let sp_out: usize = out_spatial.iter().product();
    let pk = offs.len();

    let mut out = vec![0.0f64; c_out * sp_out];
    for co in 0..c_out {
        let obase = co * sp_out;
        for v in &mut out[obase..obase + sp_out] {
            *v = bias[co] as f64;
        }
    }
    for ci in 0..c_in {
        let kbase = ci * c_out * pk;
        for (s, &base) in bases.iter().enumerate() {
            let v = input.data[ci * sp_in + s] as f64;
            for co in 0..c_out {
                let krow = &kernel.data[kbase + co * pk..kbase + (co + 1) * pk];
                let obase = co * sp_out + base;
                for (k, &off) in offs.iter().enumerate() {
                    out[obase + off] += v * krow[k] as f64;
                }
            }
        }
    }
    SignalTensor::new(out_shape, out.into_iter().map(|v| v as f32).collect())
}

/// Gradients of `conv_transposed` w.r.t. (input, kernel, bias).
pub fn conv_transposed_vjp(
    input: &SignalTensor,
    kernel: &SignalTensor,
    gy: &SignalTensor,
) -> (SignalTensor, SignalTensor, SignalTensor) {
    let stride = kernel.shape[2];
    let c_in = input.channels();
    let c_out = kernel.shape[1];
    let out_spatial: Vec<usize> = gy.spatial().to_vec();
    let offs = patch_offsets(&out_spatial, stride);
    let bases = patch_bases(&out_spatial, stride);
    let sp_in = input.spatial_len();
    let sp_out = gy.spatial_len();
    let pk = offs.len();

    let mut d_in = vec![0.0f64; input.len()];
    let mut d_k = vec![0.0f64; kernel.len()];
    let mut d_b = vec![0.0f64; c_out];
    for co in 0..c_out {
        let mut acc = 0.0f64;
        for s in 0..sp_out {
            acc += gy.data[co * sp_out + s] as f64;
        }
        d_b[co] = acc;
    }
    for ci in 0..c_in {
        let kbase = ci * c_out * pk;
        for (s, &base) in bases.iter().enumerate() {
            let x = input.data[ci * sp_in + s] as f64;
            let mut acc = 0.0f64;
            for co in 0..c_out {
                let krow = kbase + co * pk;
                let obase = co * sp_out + base;
                for (k, &off) in offs.iter().enumerate() {
                    let g = gy.data[obase + off] as f64;
                    acc += g * kernel.data[krow + k] as f64;
                    d_k[krow + k] += g * x;
                }
            }
            d_in[ci * sp_in + s] = acc;
        }
    }
    (
        SignalTensor {
            shape: input.shape.clone(),
            data: d_in.into_iter().map(|v| v as f32).collect(),
        },
        SignalTensor {
            shape: kernel.shape.clone(),
            data: d_k.into_iter().map(|v| v as f32).collect(),
        },
        SignalTensor {
            shape: vec![c_out],
            data: d_b.into_iter().map(|v| v as f32).collect(),
        },
    )
}

// ---------------------------------------------------------------------------
// Same-padded 2D convolution (stride 1, odd kernel, optional grouping)
// ---------------------------------------------------------------------------

fn check_conv2d(input: &SignalTensor, kernel: &SignalTensor, bias: &[f32], groups: usize) -> Result<()> {
    if input.shape.len() != 3 {
        return Err(Error::shape(format!(
            "conv2d expects a rank-2 image tensor, got shape {:?}",
            input.shape
        )));
    }
    if kernel.shape.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d kernel must be [out, in/groups, kh, kw], got {:?}",
            kernel.shape
        )));
    }
    let (o, ig, kh, kw) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape("conv2d kernel extents must be odd".to_string()));
    }
    if groups == 0 || o % groups != 0 || input.channels() % groups != 0 {
        return Err(Error::shape(format!(
            "groups {groups} must divide in {} and out {o}",
            input.channels()
        )));
    }
    if ig != input.channels() / groups {
        return Err(Error::shape(format!(
            "kernel in-channels {} vs input {} / groups {groups}",
            ig,
            input.channels()
        )));
    }
    if bias.len() != o {
        return Err(Error::shape(format!(
            "bias length {} vs output channels {o}",
            bias.len()
        )));
    }
    Ok(())
}

/// Stride-1, zero-padded 2D convolution. `groups == 1` is a dense conv,
/// `groups == channels` is depthwise; a 1x1 kernel gives a pointwise conv.
pub fn conv2d(
    input: &SignalTensor,
    kernel: &SignalTensor,
    bias: &[f32],
    groups: usize,
) -> Result<SignalTensor> {
    check_conv2d(input, kernel, bias, groups)?;
    let (h, w) = (input.shape[1], input.shape[2]);
    let (c_out, ig, kh, kw) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    let og = c_out / groups;
    let (cy, cx) = (kh as isize / 2, kw as isize / 2);
    let sp = h * w;
    let mut out = vec![0.0f32; c_out * sp];
    for o in 0..c_out {
        let g = o / og;
        let kbase = o * ig * kh * kw;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = bias[o] as f64;
                for icl in 0..ig {
                    let c = g * ig + icl;
                    let ibase = c * sp;
                    let kk = kbase + icl * kh * kw;
                    for dy in 0..kh as isize {
                        let yy = y + dy - cy;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in 0..kw as isize {
                            let xx = x + dx - cx;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            acc += kernel.data[kk + (dy * kw as isize + dx) as usize] as f64
                                * input.data[ibase + (yy * w as isize + xx) as usize] as f64;
                        }
                    }
                }
                out[o * sp + (y * w as isize + x) as usize] = acc as f32;
            }
        }
    }
    SignalTensor::new(vec![c_out, h, w], out)
}

/// Gradients of `conv2d` w.r.t. (input, kernel, bias).
pub fn conv2d_vjp(
    input: &SignalTensor,
    kernel: &SignalTensor,
    groups: usize,
    gy: &SignalTensor,
) -> (SignalTensor, SignalTensor, SignalTensor) {
    let (h, w) = (input.shape[1], input.shape[2]);
    let (c_out, ig, kh, kw) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    let og = c_out / groups;
    let (cy, cx) = (kh as isize / 2, kw as isize / 2);
    let sp = h * w;
    let mut d_in = vec![0.0f64; input.len()];
    let mut d_k = vec![0.0f64; kernel.len()];
    let mut d_b = vec![0.0f64; c_out];
    for o in 0..c_out {
        let g = o / og;
        let kbase = o * ig * kh * kw;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let gv = gy.data[o * sp + (y * w as isize + x) as usize] as f64;
                if gv == 0.0 {
                    continue;
                }
                d_b[o] += gv;
                for icl in 0..ig {
                    let c = g * ig + icl;
                    let ibase = c * sp;
                    let kk = kbase + icl * kh * kw;
                    for dy in 0..kh as isize {
                        let yy = y + dy - cy;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for dx in 0..kw as isize {
                            let xx = x + dx - cx;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let ii = ibase + (yy * w as isize + xx) as usize;
                            let ki = kk + (dy * kw as isize + dx) as usize;
                            d_in[ii] += gv * kernel.data[ki] as f64;
                            d_k[ki] += gv * input.data[ii] as f64;
                        }
                    }
                }
            }
        }
    }
    (
        SignalTensor {
            shape: input.shape.clone(),
            data: d_in.into_iter().map(|v| v as f32).collect(),
        },
        SignalTensor {
            shape: kernel.shape.clone(),
            data: d_k.into_iter().map(|v| v as f32).collect(),
        },
        SignalTensor {
            shape: vec![c_out],
            data: d_b.into_iter().map(|v| v as f32).collect(),
        },
    )
}

// ---------------------------------------------------------------------------
// LayerNorm over the channel axis, one normalization per spatial site
// ---------------------------------------------------------------------------

pub fn layer_norm(
    input: &SignalTensor,
    gamma: &SignalTensor,
    beta: &SignalTensor,
    epsilon: f32,
) -> Result<SignalTensor> {
    check_channel_vec(input, gamma, "layer_norm gamma")?;
    check_channel_vec(input, beta, "layer_norm beta")?;
    let c = input.channels();
    let sp = input.spatial_len();
    let mut out = vec![0.0f32; input.len()];
    for s in 0..sp {
        let mut mean = 0.0f64;
        for ch in 0..c {
            mean += input.data[ch * sp + s] as f64;
        }
        mean /= c as f64;
        let mut var = 0.0f64;
        for ch in 0..c {
            let d = input.data[ch * sp + s] as f64 - mean;
            var += d * d;
        }
        var /= c as f64;
        let istd = 1.0 / (var + epsilon as f64).sqrt();
        for ch in 0..c {
            let xhat = (input.data[ch * sp + s] as f64 - mean) * istd;
            out[ch * sp + s] = (xhat * gamma.data[ch] as f64 + beta.data[ch] as f64) as f32;
        }
    }
    SignalTensor::new(input.shape.clone(), out)
}

pub fn layer_norm_vjp(
    input: &SignalTensor,
    gamma: &SignalTensor,
    epsilon: f32,
    gy: &SignalTensor,
) -> (SignalTensor, SignalTensor, SignalTensor) {
    let c = input.channels();
    let sp = input.spatial_len();
    let mut d_in = vec![0.0f32; input.len()];
    let mut d_gamma = vec![0.0f64; c];
    let mut d_beta = vec![0.0f64; c];
    for s in 0..sp {
        let mut mean = 0.0f64;
        for ch in 0..c {
            mean += input.data[ch * sp + s] as f64;
        }
        mean /= c as f64;
        let mut var = 0.0f64;
        for ch in 0..c {
            let d = input.data[ch * sp + s] as f64 - mean;
            var += d * d;
        }
        var /= c as f64;
        let istd = 1.0 / (var + epsilon as f64).sqrt();

        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for ch in 0..c {
            let xhat = (input.data[ch * sp + s] as f64 - mean) * istd;
            let g = gy.data[ch * sp + s] as f64;
            d_gamma[ch] += g * xhat;
            d_beta[ch] += g;
            let gg = g * gamma.data[ch] as f64;
            sum_g += gg;
            sum_gx += gg * xhat;
        }
        for ch in 0..c {
            let xhat = (input.data[ch * sp + s] as f64 - mean) * istd;
            let gg = gy.data[ch * sp + s] as f64 * gamma.data[ch] as f64;
            d_in[ch * sp + s] =
                (istd * (gg - sum_g / c as f64 - xhat * sum_gx / c as f64)) as f32;
        }
    }
    (
        SignalTensor {
            shape: input.shape.clone(),
            data: d_in,
        },
        SignalTensor {
            shape: vec![c],
            data: d_gamma.into_iter().map(|v| v as f32).collect(),
        },
        SignalTensor {
            shape: vec![c],
            data: d_beta.into_iter().map(|v| v as f32).collect(),
        },
    )
}

// ---------------------------------------------------------------------------
// Space-to-depth folding, nearest-neighbor upsampling, channel concat (2D)
// ---------------------------------------------------------------------------

fn check_rank2(t: &SignalTensor, op: &str) -> Result<()> {
    if t.shape.len() != 3 {
        return Err(Error::shape(format!(
            "{op} expects [C, H, W], got {:?}",
            t.shape
        )));
    }
    Ok(())
}

/// Folds f x f sample blocks into channels: [C, H, W] -> [C*f^2, H/f, W/f].
/// Block samples land at channel c*f^2 + dy*f + dx; this layout is a fixed
/// format constant shared with decoder weights.
pub fn space_to_depth(input: &SignalTensor, f: usize) -> Result<SignalTensor> {
    check_rank2(input, "space_to_depth")?;
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::shape(format!(
            "space_to_depth: {h}x{w} not divisible by fold factor {f}"
        )));
    }
    let (oh, ow) = (h / f, w / f);
    let mut out = vec![0.0f32; input.len()];
    for ch in 0..c {
        for dy in 0..f {
            for dx in 0..f {
                let oc = ch * f * f + dy * f + dx;
                for y in 0..oh {
                    for x in 0..ow {
                        out[(oc * oh + y) * ow + x] =
                            input.data[(ch * h + y * f + dy) * w + x * f + dx];
                    }
                }
            }
        }
    }
    SignalTensor::new(vec![c * f * f, oh, ow], out)
}

/// Inverse of `space_to_depth`.
pub fn depth_to_space(input: &SignalTensor, f: usize) -> Result<SignalTensor> {
    check_rank2(input, "depth_to_space")?;
    let (cf, oh, ow) = (input.shape[0], input.shape[1], input.shape[2]);
    if f == 0 || cf % (f * f) != 0 {
        return Err(Error::shape(format!(
            "depth_to_space: {cf} channels not divisible by {f}^2"
        )));
    }
    let c = cf / (f * f);
    let (h, w) = (oh * f, ow * f);
    let mut out = vec![0.0f32; input.len()];
    for ch in 0..c {
        for dy in 0..f {
            for dx in 0..f {
                let ic = ch * f * f + dy * f + dx;
                for y in 0..oh {
                    for x in 0..ow {
                        out[(ch * h + y * f + dy) * w + x * f + dx] =
                            input.data[(ic * oh + y) * ow + x];
                    }
                }
            }
        }
    }
    SignalTensor::new(vec![c, h, w], out)
}

/// Nearest-neighbor upsampling by factor f, replicating the top-left sample
/// of each block.
pub fn nn_upsample(input: &SignalTensor, f: usize) -> Result<SignalTensor> {
    check_rank2(input, "nn_upsample")?;
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (oh, ow) = (h * f, w * f);
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch * oh + y) * ow + x] = input.data[(ch * h + y / f) * w + x / f];
            }
        }
    }
    SignalTensor::new(vec![c, oh, ow], out)
}

/// Gradient of `nn_upsample`: sums over each replicated block.
pub fn nn_upsample_vjp(input: &SignalTensor, f: usize, gy: &SignalTensor) -> SignalTensor {
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (oh, ow) = (h * f, w * f);
    let mut d_in = vec![0.0f64; input.len()];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                d_in[(ch * h + y / f) * w + x / f] += gy.data[(ch * oh + y) * ow + x] as f64;
            }
        }
    }
    SignalTensor {
        shape: input.shape.clone(),
        data: d_in.into_iter().map(|v| v as f32).collect(),
    }
}

/// Concatenates tensors along the channel axis; spatial extents must agree.
pub fn concat_channels(parts: &[&SignalTensor]) -> Result<SignalTensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat of zero tensors".to_string()));
    }
    let spatial = parts[0].spatial().to_vec();
    for p in parts {
        if p.spatial() != spatial.as_slice() {
            return Err(Error::shape(format!(
                "concat spatial mismatch: {:?} vs {:?}",
                p.spatial(),
                spatial
            )));
        }
    }
    let c: usize = parts.iter().map(|p| p.channels()).sum();
    let mut shape = vec![c];
    shape.extend_from_slice(&spatial);
    let mut data = Vec::with_capacity(shape.iter().product());
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    SignalTensor::new(shape, data)
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

pub fn sum_squares(t: &SignalTensor) -> f64 {
    t.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
}

pub fn mean(t: &SignalTensor) -> f64 {
    t.data.iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64
}

pub fn mean_square(t: &SignalTensor) -> f64 {
    sum_squares(t) / t.len() as f64
}

/// Population standard deviation over all elements.
pub fn std_dev(t: &SignalTensor) -> f64 {
    let mu = mean(t);
    let var = t
        .data
        .iter()
        .map(|&v| {
            let d = v as f64 - mu;
            d * d
        })
        .sum::<f64>()
        / t.len() as f64;
    var.sqrt()
}
