//! Small neural-network toolkit on top of `candle_core` tensors.
//!
//! Only primitives with a working reverse pass on CPU are used, so every layer
//! here is differentiable in both `f32` and `f64`.

mod layers;
mod ops;
mod params;

pub use layers::{Conv2d, LayerNorm, Linear, Mlp};
pub use ops::{
    bilinear_matrix, conv2d_same, drop_path, dropout, from_tokens, gelu, layer_norm, linear, resize_bilinear, sigmoid,
    softmax_last, to_tokens,
};
pub use params::{ParamBuilder, ParamStore, Scope};

use std::cell::RefCell;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Forward-pass context: train/eval switch plus the RNG that drives dropout.
pub struct Ctx {
    train: bool,
    rng: RefCell<ChaCha8Rng>,
    probe: Option<RefCell<Vec<Tensor>>>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
            probe: None,
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self {
            train: true,
            rng: RefCell::new(rng),
            probe: None,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub(crate) fn with_rng<T>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> T) -> T {
        f(&mut self.rng.borrow_mut())
    }

    /// Keep every attention-probability tensor computed under this context.
    pub fn with_probe(mut self) -> Self {
        self.probe = Some(RefCell::new(Vec::new()));
        self
    }

    pub(crate) fn record_attention(&self, probs: &Tensor) {
        if let Some(probe) = &self.probe {
            probe.borrow_mut().push(probs.detach());
        }
    }

    /// Attention maps recorded so far, `[batch, heads, queries, keys]` each.
    pub fn take_attention(&self) -> Vec<Tensor> {
        self.probe
            .as_ref()
            .map(|p| std::mem::take(&mut *p.borrow_mut()))
            .unwrap_or_default()
    }

    pub fn into_rng(self) -> ChaCha8Rng {
        self.rng.into_inner()
    }
}
