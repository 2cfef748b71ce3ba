//! Elementary differentiable operators: softmax, activations and the two
//! mobile convolutions. Each forward has a matching `*_backward` that maps an
//! output gradient to input/weight gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Softmax along `axis`, with max-subtraction.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("softmax axis {axis} out of range"),
        });
    }
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..len {
                let e = (src[idx(k)] - max).exp();
                out[idx(k)] = e;
                sum += e;
            }
            for k in 0..len {
                out[idx(k)] /= sum;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Softmax over the last axis of a rank-1 or rank-2 tensor.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    softmax(x, x.rank() - 1)
}

/// Gradient of [`softmax_rows`]: `dx = y ⊙ (dy − Σ(dy ⊙ y))` per row.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if y.shape() != dy.shape() {
        return Err(Error::shape("softmax_backward", y.shape(), dy.shape()));
    }
    let cols = y.shape()[y.rank() - 1];
    let rows = y.len() / cols;
    let mut dx = Tensor::zeros(y.shape());
    for r in 0..rows {
        let ys = &y.data()[r * cols..(r + 1) * cols];
        let gs = &dy.data()[r * cols..(r + 1) * cols];
        let s: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
        for (k, d) in dx.data_mut()[r * cols..(r + 1) * cols].iter_mut().enumerate() {
            *d = ys[k] * (gs[k] - s);
        }
    }
    Ok(dx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    #[default]
    Silu,
    /// `x · relu6(x + 3) / 6`
    Hardswish,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Silu => "silu",
            Activation::Hardswish => "hardswish",
            Activation::Relu => "relu",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Silu => x * sigmoid(x),
            Activation::Hardswish => x * (x + 3.0).clamp(0.0, 6.0) / 6.0,
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Hardswish => {
                if x <= -3.0 {
                    0.0
                } else if x >= 3.0 {
                    1.0
                } else {
                    (2.0 * x + 3.0) / 6.0
                }
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn forward(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Identity => x.clone(),
            _ => x.map(|v| self.eval(v)),
        }
    }

    /// `dy ⊙ act'(pre)`.
    pub fn backward(self, pre: &Tensor, dy: &Tensor) -> Result<Tensor> {
        if self == Activation::Identity {
            return Ok(dy.clone());
        }
        dy.hadamard(&pre.map(|v| self.derivative(v)))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn conv_out_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if kernel > padded || stride == 0 {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

fn depthwise_dims(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (c, h, w) = x.dims3()?;
    let (kc, kh, kw) = kernel.dims3()?;
    if kc != c || kh != kw {
        return Err(Error::shape("depthwise_conv2d", x.shape(), kernel.shape()));
    }
    if kh % 2 == 0 || stride == 0 {
        return Err(Error::InvalidShape {
            shape: kernel.shape().to_vec(),
            reason: format!("depthwise kernel must be odd and stride ≥ 1 (stride {stride})"),
        });
    }
    let (Some(ho), Some(wo)) = (
        conv_out_size(h, kh, stride, padding),
        conv_out_size(w, kh, stride, padding),
    ) else {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("kernel {kh} larger than padded input (padding {padding})"),
        });
    };
    Ok((c, h, w, kh, ho, wo))
}

/// Per-channel 2-D convolution with zero padding.
pub fn depthwise_conv2d(x: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (c, h, w, k, ho, wo) = depthwise_dims(x, kernel, stride, padding)?;
    let xs = x.data();
    let ks = kernel.data();
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let plane = &xs[ch * h * w..(ch + 1) * h * w];
        let kern = &ks[ch * k * k..(ch + 1) * k * k];
        let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += row[ix as usize] * kern[ky * k + kx];
                    }
                }
                dst[oy * wo + ox] = acc;
            }
        }
    }
    Tensor::new(vec![c, ho, wo], out)
}

/// Returns `(dx, dkernel)`.
pub fn depthwise_conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    dy: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c, h, w, k, ho, wo) = depthwise_dims(x, kernel, stride, padding)?;
    if dy.shape() != [c, ho, wo] {
        return Err(Error::shape("depthwise_conv2d_backward", &[c, ho, wo], dy.shape()));
    }
    let xs = x.data();
    let ks = kernel.data();
    let gs = dy.data();
    let mut dx = vec![0.0; xs.len()];
    let mut dk = vec![0.0; ks.len()];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = gs[(ch * ho + oy) * wo + ox];
                if g == 0.0 {
                    continue;
                }
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let xi = (ch * h + iy as usize) * w + ix as usize;
                        let ki = (ch * k + ky) * k + kx;
                        dx[xi] += g * ks[ki];
                        dk[ki] += g * xs[xi];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
    ))
}

/// 1×1 convolution: `out[o, p] = Σ_c kernel[o, c] · x[c, p]` for every pixel `p`.
pub fn pointwise_conv2d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    let (co, ci) = kernel.dims2()?;
    if ci != c {
        return Err(Error::shape("pointwise_conv2d", x.shape(), kernel.shape()));
    }
    let hw = h * w;
    let xs = x.data();
    let mut out = vec![0.0; co * hw];
    for o in 0..co {
        let dst = &mut out[o * hw..(o + 1) * hw];
        for i in 0..c {
            let k = kernel.at(o, i);
            if k == 0.0 {
                continue;
            }
            for (d, &v) in dst.iter_mut().zip(&xs[i * hw..(i + 1) * hw]) {
                *d += k * v;
            }
        }
    }
    Tensor::new(vec![co, h, w], out)
}

/// Returns `(dx, dkernel)`.
pub fn pointwise_conv2d_backward(x: &Tensor, kernel: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    let (c, h, w) = x.dims3()?;
    let (co, _) = kernel.dims2()?;
    if dy.shape() != [co, h, w] {
        return Err(Error::shape("pointwise_conv2d_backward", &[co, h, w], dy.shape()));
    }
    let hw = h * w;
    let xm = x.clone().reshape(&[c, hw])?;
    let gm = dy.clone().reshape(&[co, hw])?;
    let dk = gm.matmul_t(&xm)?;
    let dx = kernel.t_matmul(&gm)?.reshape(&[c, h, w])?;
    Ok((dx, dk))
}

/// `C × H × W` → `(H·W) × C`, one row per pixel.
pub fn chw_to_pixels(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    x.clone().reshape(&[c, h * w])?.transpose()
}

/// Inverse of [`chw_to_pixels`].
pub fn pixels_to_chw(p: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (_, c) = p.dims2()?;
    p.transpose()?.reshape(&[c, h, w])
}
