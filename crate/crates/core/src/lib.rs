//! Core algorithms for RGB-D salient object detection with dual windowed-attention
//! encoders, cross-modality interaction, gated fusion and a dense saliency decoder.

pub mod backbone;
pub mod cmi;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod training;

pub use config::{derive_stage_geometry, load_config, validate_config, RunConfig, StageGeometry, Variant, NUM_STAGES};
pub use data::{ImageArray, ModelInput, SampleTriplet};
pub use decoder::PredictionPair;
pub use error::{Error, Result};
pub use fusion::{CrossModalSet, GateSignal};
pub use metrics::EvalReport;
pub use model::{build_variant, DtmiNet, ForwardTrace};
pub use training::{Checkpoint, LossBreakdown};

/// Environment variable that switches on deterministic mode.
pub const DETERMINISTIC_ENV: &str = "DTMI_DETERMINISTIC";

/// True when deterministic mode is requested through [`DETERMINISTIC_ENV`].
pub fn deterministic_requested() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}
