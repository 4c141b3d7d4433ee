//! Per-stage feature enhancement and the ways two modality features are merged:
//! early fusion, gated fusion, channel attention and the skip pathway.

use candle_core::{Result, Tensor};

use crate::nn::{dropout, gelu, resize_bilinear, sigmoid, Conv2d, Ctx, Linear, Scope};

/// Squeeze ratio of [`ChannelAttention`].
pub const CHANNEL_REDUCTION: usize = 4;

/// Per-sample scalar gate in (0,1), shape `[B,1]`.
#[derive(Debug, Clone)]
pub struct GateSignal {
    pub g: Tensor,
}

/// Fused features for every stage plus the skip feature.
#[derive(Debug, Clone)]
pub struct CrossModalSet {
    /// Stage 1..=5 fused features, each with the stage's own geometry.
    pub f_cm: Vec<Tensor>,
    /// `[B, decoder_width, R_1, R_1]`.
    pub f_skip: Tensor,
}

/// Global average pool, C -> C/4 -> C with ReLU, sigmoid, per-channel scaling.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    fc1: Linear,
    fc2: Linear,
}

impl ChannelAttention {
    pub fn new(sc: &mut Scope, channels: usize) -> Result<Self> {
        if channels < CHANNEL_REDUCTION {
            candle_core::bail!("channel attention needs at least {CHANNEL_REDUCTION} channels, got {channels}");
        }
        let hidden = channels / CHANNEL_REDUCTION;
        Ok(Self {
            fc1: Linear::fan_in(&mut sc.pp("fc1"), channels, hidden)?,
            fc2: Linear::fan_in(&mut sc.pp("fc2"), hidden, channels)?,
        })
    }

    /// Channel weights `[B,C]`, each in (0,1).
    pub fn weights(&self, x: &Tensor) -> Result<Tensor> {
        let pooled = x.mean(3)?.mean(2)?;
        sigmoid(&self.fc2.forward(&self.fc1.forward(&pooled)?.relu()?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weights(x)?;
        x.broadcast_mul(&w.unsqueeze(2)?.unsqueeze(3)?)
    }
}

/// Spatial gate from the channel-wise max map, followed by channel attention.
#[derive(Debug, Clone)]
pub struct Afe {
    spatial: Conv2d,
    channel: ChannelAttention,
}

impl Afe {
    pub fn new(sc: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            spatial: Conv2d::new(&mut sc.pp("spatial"), 1, 1, 3)?,
            channel: ChannelAttention::new(&mut sc.pp("channel"), channels)?,
        })
    }

    /// Spatial gate `[B,1,H,W]`, each value in (0,1).
    pub fn spatial_gate(&self, x: &Tensor) -> Result<Tensor> {
        sigmoid(&self.spatial.forward(&x.max_keepdim(1)?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let gated = x.broadcast_mul(&self.spatial_gate(x)?)?;
        self.channel.forward(&gated)
    }
}

/// `fr + fd + fr ⊙ fd`.
pub fn early_fuse(fr: &Tensor, fd: &Tensor) -> Result<Tensor> {
    if fr.dims() != fd.dims() {
        candle_core::bail!("early fusion of mismatched shapes {:?} and {:?}", fr.dims(), fd.dims());
    }
    (fr + fd)? + (fr * fd)?
}

/// Modality gate: mean-pool both branches, concatenate, two linear layers, sigmoid.
#[derive(Debug, Clone)]
pub struct Gma {
    fc1: Linear,
    fc2: Linear,
    drop: f64,
}

impl Gma {
    pub fn new(sc: &mut Scope, channels: usize, drop: f64) -> Result<Self> {
        Ok(Self {
            fc1: Linear::fan_in(&mut sc.pp("fc1"), 2 * channels, 2 * channels)?,
            fc2: Linear::fan_in(&mut sc.pp("fc2"), 2 * channels, 1)?,
            drop,
        })
    }

    pub fn gate(&self, f_rd: &Tensor, f_dr: &Tensor, ctx: &Ctx) -> Result<GateSignal> {
        if f_rd.dims() != f_dr.dims() {
            candle_core::bail!("gate inputs differ in shape: {:?} vs {:?}", f_rd.dims(), f_dr.dims());
        }
        let pooled = Tensor::cat(&[f_rd.mean(3)?.mean(2)?, f_dr.mean(3)?.mean(2)?], 1)?;
        let h = dropout(&gelu(&self.fc1.forward(&pooled)?)?, self.drop, ctx)?;
        let logit = dropout(&self.fc2.forward(&h)?, self.drop, ctx)?;
        Ok(GateSignal { g: sigmoid(&logit)? })
    }
}

/// `g ⊙ f_rd + (1 − g) ⊙ f_dr`, written as `f_dr + g ⊙ (f_rd − f_dr)`.
pub fn gma_fuse(f_rd: &Tensor, f_dr: &Tensor, gate: &GateSignal) -> Result<Tensor> {
    if f_rd.dims() != f_dr.dims() {
        candle_core::bail!(
            "gated fusion of mismatched shapes {:?} and {:?}",
            f_rd.dims(),
            f_dr.dims()
        );
    }
    let g = gate.g.unsqueeze(2)?.unsqueeze(3)?;
    f_dr + (f_rd - f_dr)?.broadcast_mul(&g)?
}

/// Early-stage features of one branch projected, resized to stage-1 resolution,
/// concatenated, fused by a 3×3 convolution and re-weighted by channel attention.
#[derive(Debug, Clone)]
pub struct SkipConv {
    proj: Vec<Conv2d>,
    fuse: Conv2d,
    channel: ChannelAttention,
}

impl SkipConv {
    pub fn new(sc: &mut Scope, in_channels: [usize; 3], width: usize) -> Result<Self> {
        let proj = in_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(&mut sc.pp(format!("proj{}", i + 1)), c, width, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            proj,
            fuse: Conv2d::new(&mut sc.pp("fuse"), 3 * width, width, 3)?,
            channel: ChannelAttention::new(&mut sc.pp("channel"), width)?,
        })
    }

    /// `stages` holds the stage 1, 2 and 3 features of one branch.
    pub fn forward(&self, stages: &[&Tensor]) -> Result<Tensor> {
        if stages.len() != 3 {
            candle_core::bail!("skip pathway needs stages 1-3, got {} maps", stages.len());
        }
        let (_, _, h, w) = stages[0].dims4()?;
        let maps = stages
            .iter()
            .zip(&self.proj)
            .map(|(x, p)| resize_bilinear(&p.forward(x)?, h, w))
            .collect::<Result<Vec<_>>>()?;
        self.channel.forward(&self.fuse.forward(&Tensor::cat(&maps, 1)?)?)
    }
}
