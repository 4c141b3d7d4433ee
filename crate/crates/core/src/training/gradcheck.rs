//! Finite-difference verification of the analytic gradients of the training loss.

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::total_loss;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::DtmiNet;
use crate::nn::Ctx;

/// One checked scalar parameter.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckRecord {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Training loss of `net` on `batch` in eval mode (no dropout), as a scalar tensor.
pub fn eval_loss(net: &DtmiNet, batch: &Batch) -> Result<Tensor> {
    let pred = net.forward(&batch.rgb, &batch.depth, &Ctx::eval())?;
    Ok(total_loss(&pred, &batch.gt, &batch.edge, net.variant())?.0)
}

/// Analytic gradients of [`eval_loss`].
pub fn eval_gradients(net: &DtmiNet, batch: &Batch) -> Result<GradStore> {
    Ok(eval_loss(net, batch)?.backward()?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn flat(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Pick up to `per_group` scalar parameters for every name prefix in `groups`, among
/// elements whose analytic gradient magnitude is at least `min_grad`.
///
/// Parameters are chosen uniformly among the tensors of the group, then one
/// qualifying element is drawn from the chosen tensor.
pub fn sample_parameters(
    net: &DtmiNet,
    grads: &GradStore,
    groups: &[&str],
    per_group: usize,
    min_grad: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(String, usize)>> {
    let mut picked = Vec::new();
    for group in groups {
        let mut candidates = Vec::new();
        for (name, var) in net.params().iter().filter(|(n, _)| n.starts_with(group)) {
            if let Some(g) = grads.get(var.as_tensor()) {
                let qualifying: Vec<usize> = flat(g)?
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| v.abs() >= min_grad)
                    .map(|(i, _)| i)
                    .collect();
                if !qualifying.is_empty() {
                    candidates.push((name.to_string(), qualifying));
                }
            }
        }
        if candidates.is_empty() {
            return Err(Error::GradCheck(format!(
                "no parameter under `{group}` has a gradient of at least {min_grad}"
            )));
        }
        for _ in 0..per_group {
            let (name, elems) = &candidates[rng.random_range(0..candidates.len())];
            let index = *elems.choose(rng).expect("non-empty");
            if !picked.iter().any(|(n, i)| n == name && *i == index) {
                picked.push((name.clone(), index));
            }
        }
    }
    Ok(picked)
}

/// Compare analytic gradients against central differences with step `h`.
///
/// The relative error is `|a - n| / max(|a|, |n|)`. Parameters are restored after
/// each probe.
pub fn check_gradients(
    net: &DtmiNet,
    batch: &Batch,
    targets: &[(String, usize)],
    h: f64,
) -> Result<Vec<GradCheckRecord>> {
    let grads = eval_gradients(net, batch)?;
    let mut out = Vec::with_capacity(targets.len());
    for (name, index) in targets {
        let var = net
            .params()
            .get(name)
            .ok_or_else(|| Error::GradCheck(format!("unknown parameter `{name}`")))?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => flat(g)?[*index],
            None => 0.0,
        };
        let original = var.as_tensor().copy()?;
        let shape = original.shape().clone();
        let base = flat(&original)?;
        let probe = |delta: f64| -> Result<f64> {
            let mut values = base.clone();
            values[*index] += delta;
            let t = Tensor::from_vec(values, shape.clone(), original.device())?.to_dtype(original.dtype())?;
            var.set(&t)?;
            scalar(&eval_loss(net, batch)?)
        };
        let plus = probe(h)?;
        let minus = probe(-h)?;
        var.set(&original)?;
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs());
        let rel_error = if denom == 0.0 {
            0.0
        } else {
            (analytic - numeric).abs() / denom
        };
        out.push(GradCheckRecord {
            param: name.clone(),
            index: *index,
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(out)
}

/// Names of parameters whose gradient is missing or identically zero.
pub fn dead_parameters(net: &DtmiNet, grads: &GradStore) -> Result<Vec<String>> {
    let mut dead = Vec::new();
    for (name, var) in net.params().iter() {
        let alive = match grads.get(var.as_tensor()) {
            Some(g) => flat(g)?.iter().any(|v| *v != 0.0),
            None => false,
        };
        if !alive {
            dead.push(name.to_string());
        }
    }
    Ok(dead)
}
