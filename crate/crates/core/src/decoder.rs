//! Dense saliency decoder and the saliency/edge prediction heads.

use std::collections::BTreeMap;

use candle_core::{Result, Tensor};

use crate::config::{StageGeometry, NUM_STAGES};
use crate::fusion::{ChannelAttention, CrossModalSet};
use crate::nn::{resize_bilinear, sigmoid, Conv2d, Scope};

/// Decoder wiring selected by the model variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    /// Residual/common fusion with dense connections to all earlier decoding outputs.
    Dense,
    /// Residual/common fusion without the dense decoding history: each stage sees only
    /// the output of the stage directly below it.
    DenseNoHistory,
    /// Plain top-down cascade: concatenate the upsampled previous output with the stage feature.
    Plain,
}

/// Saliency and (optional) edge maps at input resolution, values in (0,1).
#[derive(Debug, Clone)]
pub struct PredictionPair {
    pub s: Tensor,
    pub e: Option<Tensor>,
}

/// Intermediate decoder tensors, keyed by 1-based stage.
#[derive(Debug, Clone, Default)]
pub struct DecoderTrace {
    pub projected: Vec<Tensor>,
    pub f_res: BTreeMap<usize, Tensor>,
    pub f_com: BTreeMap<usize, Tensor>,
    pub f_ca_channels: BTreeMap<usize, usize>,
    pub f_dec: BTreeMap<usize, Tensor>,
}

/// `f_cm ⊙ f_res + f_cm`.
pub fn com_fuse(f_cm: &Tensor, f_res: &Tensor) -> Result<Tensor> {
    if f_cm.dims() != f_res.dims() {
        candle_core::bail!("common-feature fusion of {:?} and {:?}", f_cm.dims(), f_res.dims());
    }
    (f_cm * f_res)? + f_cm
}

fn upsample_to(x: &Tensor, like: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = like.dims4()?;
    resize_bilinear(x, h, w)
}

/// Two 3×3 convolutions with a ReLU between, producing one logit channel.
#[derive(Debug, Clone)]
pub struct PredictionHead {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl PredictionHead {
    pub fn new(sc: &mut Scope, in_channels: usize, width: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut sc.pp("conv1"), in_channels, width / 2, 3)?,
            conv2: Conv2d::new(&mut sc.pp("conv2"), width / 2, 1, 3)?,
        })
    }

    /// Logits upsampled to `size`, then squashed to (0,1).
    pub fn forward(&self, x: &Tensor, size: usize) -> Result<Tensor> {
        let logits = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        sigmoid(&resize_bilinear(&logits, size, size)?)
    }
}

#[derive(Debug, Clone)]
struct DenseStage {
    res: Conv2d,
    channel: ChannelAttention,
    reduce: Conv2d,
}

#[derive(Debug, Clone)]
enum Stages {
    Dense(BTreeMap<usize, DenseStage>),
    Plain(BTreeMap<usize, Conv2d>),
}

/// Decoder over the fused pyramid.
#[derive(Debug, Clone)]
pub struct Decoder {
    kind: DecoderKind,
    proj: Vec<Conv2d>,
    stages: Stages,
    saliency: PredictionHead,
    edge: Option<PredictionHead>,
    width: usize,
}

impl Decoder {
    pub fn new(
        sc: &mut Scope,
        geometry: &StageGeometry,
        width: usize,
        kind: DecoderKind,
        edge_head: bool,
    ) -> Result<Self> {
        let proj = (1..=NUM_STAGES)
            .map(|i| Conv2d::new(&mut sc.pp(format!("proj{i}")), geometry.channels(i), width, 1))
            .collect::<Result<Vec<_>>>()?;
        let stages = match kind {
            DecoderKind::Dense | DecoderKind::DenseNoHistory => {
                let mut map = BTreeMap::new();
                // Deepest first, so stage 4 parameters do not depend on the history option.
                for i in (1..NUM_STAGES).rev() {
                    let mut ssc = sc.pp(format!("stage{i}"));
                    let deeper = NUM_STAGES - i;
                    let history = match kind {
                        DecoderKind::Dense => NUM_STAGES - 1 - i,
                        _ => (NUM_STAGES - 1 - i).min(1),
                    };
                    let ca_channels = (2 + history) * width;
                    map.insert(
                        i,
                        DenseStage {
                            res: Conv2d::new(&mut ssc.pp("res"), deeper * width, width, 3)?,
                            channel: ChannelAttention::new(&mut ssc.pp("channel"), ca_channels)?,
                            reduce: Conv2d::new(&mut ssc.pp("reduce"), ca_channels, width, 3)?,
                        },
                    );
                }
                Stages::Dense(map)
            }
            DecoderKind::Plain => {
                let mut map = BTreeMap::new();
                for i in (1..NUM_STAGES).rev() {
                    map.insert(i, Conv2d::new(&mut sc.pp(format!("stage{i}")), 2 * width, width, 3)?);
                }
                Stages::Plain(map)
            }
        };
        let saliency = PredictionHead::new(&mut sc.pp("saliency_head"), 2 * width, width)?;
        let edge = if edge_head {
            Some(PredictionHead::new(&mut sc.pp("edge_head"), width, width)?)
        } else {
            None
        };
        Ok(Self {
            kind,
            proj,
            stages,
            saliency,
            edge,
            width,
        })
    }

    pub fn kind(&self) -> DecoderKind {
        self.kind
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Upsampled `f_cm^{i+1..5}` concatenated and convolved to the decoder width.
    fn res_fuse(&self, stage: &DenseStage, i: usize, projected: &[Tensor]) -> Result<Tensor> {
        let target = &projected[i - 1];
        let deeper = projected[i..]
            .iter()
            .map(|f| upsample_to(f, target))
            .collect::<Result<Vec<_>>>()?;
        stage.res.forward(&Tensor::cat(&deeper, 1)?)
    }

    /// Decode `set` to predictions at `size`×`size`.
    pub fn forward(&self, set: &CrossModalSet, size: usize) -> Result<(PredictionPair, DecoderTrace)> {
        if set.f_cm.len() != NUM_STAGES {
            candle_core::bail!("decoder needs {NUM_STAGES} fused stages, got {}", set.f_cm.len());
        }
        let projected = set
            .f_cm
            .iter()
            .zip(&self.proj)
            .map(|(f, p)| p.forward(f))
            .collect::<Result<Vec<_>>>()?;
        let mut trace = DecoderTrace::default();
        match &self.stages {
            Stages::Dense(stages) => {
                for i in (1..NUM_STAGES).rev() {
                    let stage = &stages[&i];
                    let f_cm = &projected[i - 1];
                    let f_res = self.res_fuse(stage, i, &projected)?;
                    let f_com = com_fuse(f_cm, &f_res)?;
                    let mut parts = vec![f_com.clone(), f_cm.clone()];
                    let last = match self.kind {
                        DecoderKind::Dense => NUM_STAGES,
                        _ => (i + 2).min(NUM_STAGES),
                    };
                    for j in i + 1..last {
                        parts.push(upsample_to(&trace.f_dec[&j], f_cm)?);
                    }
                    let f_ca = Tensor::cat(&parts, 1)?;
                    trace.f_ca_channels.insert(i, f_ca.dim(1)?);
                    let f_dec = stage.reduce.forward(&stage.channel.forward(&f_ca)?)?;
                    trace.f_res.insert(i, f_res);
                    trace.f_com.insert(i, f_com);
                    trace.f_dec.insert(i, f_dec);
                }
            }
            Stages::Plain(stages) => {
                let mut prev = projected[NUM_STAGES - 1].clone();
                for i in (1..NUM_STAGES).rev() {
                    let f_cm = &projected[i - 1];
                    let cat = Tensor::cat(&[upsample_to(&prev, f_cm)?, f_cm.clone()], 1)?;
                    trace.f_ca_channels.insert(i, cat.dim(1)?);
                    prev = stages[&i].forward(&cat)?;
                    trace.f_dec.insert(i, prev.clone());
                }
            }
        }
        let f_dec1 = &trace.f_dec[&1];
        if f_dec1.dims() != set.f_skip.dims() {
            candle_core::bail!(
                "skip feature {:?} does not match the stage-1 decoding {:?}",
                set.f_skip.dims(),
                f_dec1.dims()
            );
        }
        let s = self.saliency.forward(&Tensor::cat(&[f_dec1, &set.f_skip], 1)?, size)?;
        let e = match &self.edge {
            Some(head) => Some(head.forward(f_dec1, size)?),
            None => None,
        };
        trace.projected = projected;
        Ok((PredictionPair { s, e }, trace))
    }
}
