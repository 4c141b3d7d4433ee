use candle_core::{DType, Result, Tensor, D};
use rand::Rng;

use super::Ctx;

/// `x · wᵀ + b` over the last axis, for inputs of any rank.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims();
    let in_dim = dims[dims.len() - 1];
    let out_dim = w.dim(0)?;
    let rows = x.elem_count() / in_dim;
    let y = x.reshape((rows, in_dim))?.matmul(&w.t()?)?;
    let y = match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    let mut out_dims = dims.to_vec();
    *out_dims.last_mut().unwrap() = out_dim;
    y.reshape(out_dims)
}

/// Layer normalization over the last axis.
pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    normed.broadcast_mul(weight)?.broadcast_add(bias)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

/// Logistic function written through `tanh` so both passes stay finite for any input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)
}

/// Exact (erf-based) GELU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    x.gelu_erf()
}

/// Inverted dropout. Identity in eval mode or when `p == 0`.
pub fn dropout(x: &Tensor, p: f64, ctx: &Ctx) -> Result<Tensor> {
    if !ctx.is_train() || p == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let n = x.elem_count();
    let mask: Vec<f64> = ctx.with_rng(|rng| {
        (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect()
    });
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    x.mul(&mask)
}

/// Per-sample stochastic depth on the leading (batch) axis.
pub fn drop_path(x: &Tensor, p: f64, ctx: &Ctx) -> Result<Tensor> {
    if !ctx.is_train() || p == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let b = x.dim(0)?;
    let mask: Vec<f64> = ctx.with_rng(|rng| {
        (0..b)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect()
    });
    let mut shape = vec![1; x.rank()];
    shape[0] = b;
    let mask = Tensor::from_vec(mask, shape, x.device())?.to_dtype(x.dtype())?;
    x.broadcast_mul(&mask)
}

/// `[B, C, R, R]` feature map to `[B, R*R, C]` tokens (row-major positions).
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()
}

/// Inverse of [`to_tokens`] for a square grid of side `side`.
pub fn from_tokens(t: &Tensor, side: usize) -> Result<Tensor> {
    let (b, n, c) = t.dims3()?;
    if n != side * side {
        candle_core::bail!("{n} tokens do not form a {side}x{side} grid");
    }
    t.transpose(1, 2)?.contiguous()?.reshape((b, c, side, side))
}

/// Row-major `[out_len, in_len]` bilinear interpolation weights with half-pixel
/// centers (no corner alignment).
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[o * in_len + i0] += 1.0 - frac;
        m[o * in_len + i1] += frac;
    }
    m
}

fn interp_t(in_len: usize, out_len: usize, dtype: DType, x: &Tensor) -> Result<Tensor> {
    // Stored transposed, [in_len, out_len], so it can right-multiply.
    let m = bilinear_matrix(in_len, out_len);
    let mut t = vec![0.0; in_len * out_len];
    for o in 0..out_len {
        for i in 0..in_len {
            t[i * out_len + o] = m[o * in_len + i];
        }
    }
    Tensor::from_vec(t, (in_len, out_len), x.device())?.to_dtype(dtype)
}

/// Bilinear resize of a `[B, C, H, W]` map, expressed as two matrix products so
/// that it is differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let rx = interp_t(w, out_w, x.dtype(), x)?;
    let ry = interp_t(h, out_h, x.dtype(), x)?;
    let y = x.contiguous()?.reshape((b * c * h, w))?.matmul(&rx)?;
    let y = y
        .reshape((b * c, h, out_w))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b * c * out_w, h))?
        .matmul(&ry)?;
    y.reshape((b * c, out_w, out_h))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((b, c, out_h, out_w))
}

/// Stride-1 "same" convolution with an odd square kernel, via explicit im2col.
///
/// `weight` is `[out, in * k * k]`, laid out like a `[out, in, k, k]` kernel.
pub fn conv2d_same(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, k: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let cols = if k == 1 {
        x.reshape((b, c, h * w))?
    } else {
        let p = k / 2;
        let padded = x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?;
        let mut taps = Vec::with_capacity(k * k);
        for dy in 0..k {
            for dx in 0..k {
                taps.push(padded.narrow(2, dy, h)?.narrow(3, dx, w)?);
            }
        }
        Tensor::stack(&taps, 2)?.reshape((b, c * k * k, h * w))?
    };
    let out_c = weight.dim(0)?;
    let y = weight.broadcast_matmul(&cols)?;
    let y = match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((out_c, 1))?)?,
        None => y,
    };
    y.reshape((b, out_c, h, w))
}
