use candle_core::{Result, Tensor};

use super::ops::{conv2d_same, dropout, gelu, layer_norm, linear};
use super::{Ctx, Scope};

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    /// Transformer-style init: truncated normal(0.02) weights, zero bias.
    pub fn transformer(sc: &mut Scope, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let weight = sc.trunc_normal("weight", (out_dim, in_dim), 0.02)?;
        let bias = if bias { Some(sc.zeros("bias", out_dim)?) } else { None };
        Ok(Self { weight, bias })
    }

    /// Fan-in uniform init for weight and bias.
    pub fn fan_in(sc: &mut Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = sc.uniform("weight", (out_dim, in_dim), bound)?;
        let bias = Some(sc.uniform("bias", out_dim, bound)?);
        Ok(Self { weight, bias })
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight, self.bias.as_ref())
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

/// Stride-1 "same" convolution with a square odd kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl Conv2d {
    pub fn new(sc: &mut Scope, in_c: usize, out_c: usize, kernel: usize) -> Result<Self> {
        let fan_in = in_c * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = sc.uniform("weight", (out_c, fan_in), bound)?;
        let bias = sc.uniform("bias", out_c, bound)?;
        Ok(Self { weight, bias, kernel })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_same(x, &self.weight, Some(&self.bias), self.kernel)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1] / (self.kernel * self.kernel)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(sc: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: sc.ones("weight", dim)?,
            bias: sc.zeros("bias", dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.weight, &self.bias, Self::EPS)
    }
}

/// Two-layer feed-forward block with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
    drop: f64,
}

impl Mlp {
    pub fn new(sc: &mut Scope, dim: usize, hidden: usize, drop: f64) -> Result<Self> {
        Ok(Self {
            fc1: Linear::transformer(&mut sc.pp("fc1"), dim, hidden, true)?,
            fc2: Linear::transformer(&mut sc.pp("fc2"), hidden, dim, true)?,
            drop,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let h = dropout(&gelu(&self.fc1.forward(x)?)?, self.drop, ctx)?;
        dropout(&self.fc2.forward(&h)?, self.drop, ctx)
    }
}
