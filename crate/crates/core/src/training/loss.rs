use candle_core::{Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::Variant;
use crate::decoder::PredictionPair;

/// Probabilities are clamped to `[EPS, 1 − EPS]` before the logarithm.
pub const BCE_EPS: f64 = 1e-7;

/// Loss terms of one batch. `l` is exactly `l_s + l_e`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_e")]
    pub l_e: f64,
    #[serde(rename = "L")]
    pub l: f64,
}

impl LossBreakdown {
    pub fn new(l_s: f64, l_e: f64) -> Self {
        Self { l_s, l_e, l: l_s + l_e }
    }

    pub fn is_finite(&self) -> bool {
        self.l_s.is_finite() && self.l_e.is_finite() && self.l.is_finite()
    }
}

/// Mean binary cross-entropy of probabilities `pred` against soft labels `target`.
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        candle_core::bail!("loss shapes differ: {:?} vs {:?}", pred.dims(), target.dims());
    }
    let lo = target
        .min_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?;
    let hi = target
        .max_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?;
    if lo < 0.0 || hi > 1.0 {
        candle_core::bail!("targets must lie in [0,1], found [{lo}, {hi}]");
    }
    let p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)?;
    let pos = (target * p.log()?)?;
    let neg = (target.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    // A 32-bit running sum over a full batch drifts by about 1e-4; reduce in 64-bit.
    (pos + neg)?
        .to_dtype(candle_core::DType::F64)?
        .mean_all()?
        .neg()?
        .to_dtype(pred.dtype())
}

fn scalar(t: &Tensor) -> Result<f64> {
    t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()
}

/// Saliency loss plus edge loss (zero when the variant has no edge head).
/// Returns the differentiable total and the breakdown.
pub fn total_loss(
    pred: &PredictionPair,
    gt: &Tensor,
    edge: &Tensor,
    variant: Variant,
) -> Result<(Tensor, LossBreakdown)> {
    let l_s = bce_loss(&pred.s, gt)?;
    match (&pred.e, variant.has_edge_head()) {
        (Some(e), true) => {
            let l_e = bce_loss(e, edge)?;
            let breakdown = LossBreakdown::new(scalar(&l_s)?, scalar(&l_e)?);
            Ok(((l_s + l_e)?, breakdown))
        }
        (None, false) => {
            let breakdown = LossBreakdown::new(scalar(&l_s)?, 0.0);
            Ok((l_s, breakdown))
        }
        _ => candle_core::bail!("edge prediction presence does not match variant {variant}"),
    }
}
