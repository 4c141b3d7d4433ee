//! Shared fixtures for the benchmarks.

use candle_core::{DType, Device};
use dtmi_core::data::{make_batch, synthetic_inputs, Batch};
use dtmi_core::{DtmiNet, RunConfig, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Toy-scale network of the given variant, in 32-bit on the CPU.
pub fn toy_net(variant: Variant) -> DtmiNet {
    let cfg = RunConfig {
        variant,
        ..RunConfig::default()
    };
    DtmiNet::new(&cfg, DType::F32, &Device::Cpu).expect("toy config builds")
}

/// `n` synthetic scenes at toy input size as one batch.
pub fn toy_batch(n: usize) -> Batch {
    let inputs = synthetic_inputs(7, 0, n, 64, 64);
    let refs: Vec<_> = inputs.iter().collect();
    make_batch(&refs, DType::F32, &Device::Cpu).expect("batch builds")
}

/// Random saliency map with a blob-shaped ground truth, `side × side`.
pub fn random_pair(seed: u64, side: usize) -> (Vec<f64>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = side as f64 / 2.0;
    let gt: Vec<bool> = (0..side * side)
        .map(|i| {
            let (y, x) = ((i / side) as f64, (i % side) as f64);
            (y - c).powi(2) + (x - 0.8 * c).powi(2) < (0.3 * side as f64).powi(2)
        })
        .collect();
    let s = gt
        .iter()
        .map(|&g| (if g { 0.7 } else { 0.2 } + rng.random_range(-0.2..0.2f64)).clamp(0.0, 1.0))
        .collect();
    (s, gt)
}

/// 8-bit version of a saliency map, rounded to nearest.
pub fn quantize(s: &[f64]) -> Vec<u8> {
    s.iter().map(|v| (v * 255.0).round() as u8).collect()
}
