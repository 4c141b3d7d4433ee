//! Experiment configuration: loading, validation and the derived per-stage geometry.
//!
//! Configs are flat JSON documents. Every key is optional; absent keys take the
//! toy defaults below, which keep a CPU forward pass in the sub-second range.
//! Unknown keys are rejected.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};

/// Number of encoder stages, counting the patch embedding as stage 1.
pub const NUM_STAGES: usize = 5;

/// Model variant selector. Names follow the ablation table rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoEdge,
    RgbOnly,
    DepthOnly,
    NoFdec,
    NoDsd,
    CmiV2,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoEdge,
        Variant::RgbOnly,
        Variant::DepthOnly,
        Variant::NoFdec,
        Variant::NoDsd,
        Variant::CmiV2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoEdge => "no_edge",
            Variant::RgbOnly => "rgb_only",
            Variant::DepthOnly => "depth_only",
            Variant::NoFdec => "no_fdec",
            Variant::NoDsd => "no_dsd",
            Variant::CmiV2 => "cmi_v2",
        }
    }

    pub fn has_edge_head(self) -> bool {
        self != Variant::NoEdge
    }

    pub fn uses_rgb(self) -> bool {
        self != Variant::DepthOnly
    }

    pub fn uses_depth(self) -> bool {
        self != Variant::RgbOnly
    }

    pub fn is_single_modality(self) -> bool {
        matches!(self, Variant::RgbOnly | Variant::DepthOnly)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant `{s}`"))
    }
}

/// Full description of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub patch_size: usize,
    /// Channels of the stage-1 embedding.
    pub embed_dim: usize,
    /// Window-attention blocks per transformer stage (stages 2..=5).
    pub depths: Vec<usize>,
    /// Attention heads per transformer stage (stages 2..=5).
    pub num_heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: usize,
    /// Encoder stages (2..=5) that get a CMI + GMA pair.
    pub cmi_stages: BTreeSet<usize>,
    /// (cross-attention, self-attention) block pairs per CMI instance.
    pub cmi_blocks: usize,
    /// Common channel width of the decoder.
    pub decoder_width: usize,
    pub variant: Variant,

    pub backbone_drop: f64,
    pub drop_path: f64,
    pub cmi_drop: f64,
    pub gma_drop: f64,

    pub lr: f64,
    pub lr_decay_gamma: f64,
    pub lr_decay_every_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on the total number of optimization steps.
    pub max_steps: Option<usize>,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,

    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub test_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            patch_size: 4,
            embed_dim: 32,
            depths: vec![2, 2, 2, 2],
            num_heads: vec![1, 2, 4, 8],
            window_size: 4,
            mlp_ratio: 4,
            cmi_stages: BTreeSet::from([4, 5]),
            cmi_blocks: 1,
            decoder_width: 32,
            variant: Variant::Full,
            backbone_drop: 0.0,
            drop_path: 0.0,
            cmi_drop: 0.1,
            gma_drop: 0.1,
            lr: 1e-3,
            lr_decay_gamma: 0.1,
            lr_decay_every_epochs: 100,
            batch_size: 4,
            epochs: 20,
            max_steps: None,
            weight_decay: 0.0,
            grad_clip: 0.0,
            seed: 7,
            train_dir: None,
            val_dir: None,
            test_dir: None,
        }
    }
}

impl RunConfig {
    /// Large geometry: 384px input, embed 128, window 12, depths 2/2/18/2.
    pub fn large() -> Self {
        Self {
            input_size: 384,
            patch_size: 4,
            embed_dim: 128,
            depths: vec![2, 2, 18, 2],
            num_heads: vec![4, 8, 16, 32],
            window_size: 12,
            decoder_width: 64,
            lr: 5e-5,
            lr_decay_gamma: 0.1,
            lr_decay_every_epochs: 100,
            batch_size: 3,
            epochs: 200,
            ..Self::default()
        }
    }

    /// Parse a JSON document, filling absent keys from the defaults.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|err| {
            let path = err.path().to_string();
            let inner = err.into_inner();
            let message = inner.to_string();
            let key = match unknown_field_name(&message) {
                Some(field) if path == "." => field,
                _ => path,
            };
            Error::ConfigKey { key, message }
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string() + "\n").map_err(|e| Error::io(path, e))
    }

    /// Channel count of the window-attention heads for encoder stage `stage` (2..=5).
    pub fn heads_for_stage(&self, stage: usize) -> usize {
        self.num_heads[stage - 2]
    }

    pub fn depth_for_stage(&self, stage: usize) -> usize {
        self.depths[stage - 2]
    }

    /// CMI stages actually instantiated for the variant.
    pub fn active_cmi_stages(&self) -> BTreeSet<usize> {
        if self.variant.is_single_modality() {
            BTreeSet::new()
        } else {
            self.cmi_stages.clone()
        }
    }
}

fn unknown_field_name(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest.split('`').next()?.to_string())
}

/// Read and parse a config file. Validation is a separate step.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::ConfigIo {
        path: path.to_path_buf(),
        source,
    })?;
    RunConfig::from_json_str(&text)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error("input_size {input_size} is not divisible by patch_size x 8 = {required}")]
    Divisibility { input_size: usize, required: usize },
    #[error("`{key}` must have exactly 4 entries, got {len}")]
    StageListLength { key: &'static str, len: usize },
    #[error("`{key}` must be strictly positive")]
    NonPositive { key: String },
    #[error("`{key}` = {value} is negative")]
    NegativeRate { key: &'static str, value: f64 },
    #[error("`{key}` = {value} must lie in [0, 1)")]
    RateRange { key: &'static str, value: f64 },
    #[error("cmi_stages contains {stage}; allowed stages are 2..=5")]
    CmiStage { stage: usize },
    #[error("variant `{variant}` requires a non-empty cmi_stages")]
    MissingCmiStages { variant: Variant },
    #[error("stage {stage}: {channels} channels are not divisible by {heads} heads")]
    HeadDivisibility {
        stage: usize,
        channels: usize,
        heads: usize,
    },
    #[error("`{key}` = {value} is too small for channel attention (needs >= 4)")]
    TooNarrow { key: &'static str, value: usize },
    #[error("decoder_width must be even, got {0}")]
    OddDecoderWidth(usize),
}

/// Check every invariant; returns the config unchanged on success.
pub fn validate_config(cfg: RunConfig) -> Result<RunConfig, ValidationError> {
    use ValidationError as V;

    for (key, list) in [("depths", &cfg.depths), ("num_heads", &cfg.num_heads)] {
        if list.len() != 4 {
            return Err(V::StageListLength { key, len: list.len() });
        }
        if let Some(i) = list.iter().position(|&v| v == 0) {
            return Err(V::NonPositive {
                key: format!("{key}[{i}]"),
            });
        }
    }
    let counts = [
        ("input_size", cfg.input_size),
        ("patch_size", cfg.patch_size),
        ("embed_dim", cfg.embed_dim),
        ("window_size", cfg.window_size),
        ("mlp_ratio", cfg.mlp_ratio),
        ("decoder_width", cfg.decoder_width),
        ("lr_decay_every_epochs", cfg.lr_decay_every_epochs),
        ("batch_size", cfg.batch_size),
        ("epochs", cfg.epochs),
    ];
    for (key, value) in counts {
        if value == 0 {
            return Err(V::NonPositive { key: key.into() });
        }
    }
    if cfg.max_steps == Some(0) {
        return Err(V::NonPositive {
            key: "max_steps".into(),
        });
    }
    for (key, value) in [
        ("lr", cfg.lr),
        ("lr_decay_gamma", cfg.lr_decay_gamma),
        ("weight_decay", cfg.weight_decay),
        ("grad_clip", cfg.grad_clip),
    ] {
        if value < 0.0 || !value.is_finite() {
            return Err(V::NegativeRate { key, value });
        }
    }
    for (key, value) in [("lr", cfg.lr), ("lr_decay_gamma", cfg.lr_decay_gamma)] {
        if value == 0.0 {
            return Err(V::NonPositive { key: key.into() });
        }
    }
    for (key, value) in [
        ("backbone_drop", cfg.backbone_drop),
        ("drop_path", cfg.drop_path),
        ("cmi_drop", cfg.cmi_drop),
        ("gma_drop", cfg.gma_drop),
    ] {
        if !(0.0..1.0).contains(&value) {
            return Err(V::RateRange { key, value });
        }
    }

    let required = cfg.patch_size * 8;
    if !cfg.input_size.is_multiple_of(required) {
        return Err(V::Divisibility {
            input_size: cfg.input_size,
            required,
        });
    }
    if let Some(&stage) = cfg.cmi_stages.iter().find(|s| !(2..=5).contains(*s)) {
        return Err(V::CmiStage { stage });
    }
    if cfg.variant == Variant::CmiV2 && cfg.cmi_stages.is_empty() {
        return Err(V::MissingCmiStages { variant: cfg.variant });
    }
    if cfg.embed_dim < 4 {
        return Err(V::TooNarrow {
            key: "embed_dim",
            value: cfg.embed_dim,
        });
    }
    if cfg.decoder_width < 4 {
        return Err(V::TooNarrow {
            key: "decoder_width",
            value: cfg.decoder_width,
        });
    }
    if !cfg.decoder_width.is_multiple_of(2) {
        return Err(V::OddDecoderWidth(cfg.decoder_width));
    }
    let geometry = StageGeometry::from_validated_parts(cfg.input_size, cfg.patch_size, cfg.embed_dim);
    for stage in 2..=NUM_STAGES {
        let channels = geometry.channels(stage);
        let heads = cfg.heads_for_stage(stage);
        if !channels.is_multiple_of(heads) {
            return Err(V::HeadDivisibility { stage, channels, heads });
        }
    }
    Ok(cfg)
}

/// Spatial side and channel count of every encoder stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageGeometry {
    pub resolutions: [usize; NUM_STAGES],
    pub channels: [usize; NUM_STAGES],
}

impl StageGeometry {
    fn from_validated_parts(input_size: usize, patch_size: usize, embed_dim: usize) -> Self {
        let mut resolutions = [input_size / patch_size; NUM_STAGES];
        let mut channels = [embed_dim; NUM_STAGES];
        for i in 2..NUM_STAGES {
            resolutions[i] = resolutions[i - 1] / 2;
            channels[i] = channels[i - 1] * 2;
        }
        Self { resolutions, channels }
    }

    /// Resolution of 1-based stage `stage`.
    pub fn resolution(&self, stage: usize) -> usize {
        self.resolutions[stage - 1]
    }

    /// Channels of 1-based stage `stage`.
    pub fn channels(&self, stage: usize) -> usize {
        self.channels[stage - 1]
    }
}

pub fn derive_stage_geometry(cfg: &RunConfig) -> StageGeometry {
    StageGeometry::from_validated_parts(cfg.input_size, cfg.patch_size, cfg.embed_dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_document_gives_toy_defaults() {
        let cfg = RunConfig::from_json_str("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.input_size, 64);
        assert_eq!(cfg.patch_size, 4);
        assert_eq!(cfg.embed_dim, 32);
        assert_eq!(cfg.depths, vec![2, 2, 2, 2]);
        assert_eq!(cfg.num_heads, vec![1, 2, 4, 8]);
        assert_eq!(cfg.window_size, 4);
        assert_eq!(cfg.cmi_stages, BTreeSet::from([4, 5]));
    }

    #[test]
    fn partial_document_overrides_keys() {
        let cfg = RunConfig::from_json_str(r#"{"input_size":384,"embed_dim":128,"window_size":12,"lr":5e-5}"#).unwrap();
        assert_eq!(cfg.input_size, 384);
        assert_eq!(cfg.embed_dim, 128);
        assert_eq!(cfg.window_size, 12);
        assert_eq!(cfg.lr, 5e-5);
        assert_eq!(cfg.patch_size, 4);
    }

    #[test]
    fn bad_variant_names_the_key() {
        let err = RunConfig::from_json_str(r#"{"variant":"banana"}"#).unwrap_err();
        match err {
            Error::ConfigKey { key, .. } => assert_eq!(key, "variant"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_key_and_type_mismatch_are_reported_with_key() {
        match RunConfig::from_json_str(r#"{"windw_size":4}"#).unwrap_err() {
            Error::ConfigKey { key, .. } => assert_eq!(key, "windw_size"),
            other => panic!("unexpected {other:?}"),
        }
        match RunConfig::from_json_str(r#"{"depths":[2,"x",2,2]}"#).unwrap_err() {
            Error::ConfigKey { key, .. } => assert_eq!(key, "depths[1]"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            RunConfig::from_json_str("{not json"),
            Err(Error::ConfigKey { .. })
        ));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            load_config(Path::new("/nonexistent/cfg.json")),
            Err(Error::ConfigIo { .. })
        ));
    }

    #[test]
    fn validation_diagnostics() {
        assert_eq!(validate_config(RunConfig::default()).unwrap(), RunConfig::default());
        assert!(validate_config(RunConfig::large()).is_ok());

        let cfg = RunConfig {
            input_size: 100,
            ..RunConfig::default()
        };
        assert_eq!(
            validate_config(cfg).unwrap_err(),
            ValidationError::Divisibility {
                input_size: 100,
                required: 32
            }
        );

        let cfg = RunConfig {
            depths: vec![2, 2, 2],
            ..RunConfig::default()
        };
        assert!(matches!(
            validate_config(cfg),
            Err(ValidationError::StageListLength { key: "depths", len: 3 })
        ));

        let cfg = RunConfig {
            lr: -1.0,
            ..RunConfig::default()
        };
        assert!(matches!(
            validate_config(cfg),
            Err(ValidationError::NegativeRate { key: "lr", .. })
        ));

        let cfg = RunConfig {
            variant: Variant::CmiV2,
            cmi_stages: BTreeSet::new(),
            ..RunConfig::default()
        };
        assert!(matches!(
            validate_config(cfg),
            Err(ValidationError::MissingCmiStages { .. })
        ));

        let cfg = RunConfig {
            cmi_stages: BTreeSet::from([1, 5]),
            ..RunConfig::default()
        };
        assert!(matches!(
            validate_config(cfg),
            Err(ValidationError::CmiStage { stage: 1 })
        ));

        let cfg = RunConfig {
            num_heads: vec![3, 2, 4, 8],
            ..RunConfig::default()
        };
        assert!(matches!(
            validate_config(cfg),
            Err(ValidationError::HeadDivisibility { stage: 2, .. })
        ));
    }

    #[test]
    fn geometry_examples() {
        let cfg = RunConfig {
            input_size: 384,
            embed_dim: 128,
            ..RunConfig::default()
        };
        let g = derive_stage_geometry(&cfg);
        assert_eq!(g.resolutions, [96, 96, 48, 24, 12]);
        assert_eq!(g.channels, [128, 128, 256, 512, 1024]);

        let g = derive_stage_geometry(&RunConfig::default());
        assert_eq!(g.resolutions, [16, 16, 8, 4, 2]);
        assert_eq!(g.channels, [32, 32, 64, 128, 256]);

        let cfg = RunConfig {
            input_size: 32,
            embed_dim: 8,
            ..RunConfig::default()
        };
        let g = derive_stage_geometry(&cfg);
        assert_eq!(g.resolutions, [8, 8, 4, 2, 1]);
        assert_eq!(g.channels, [8, 8, 16, 32, 64]);
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        (
            1usize..4,
            prop::sample::select(vec![1usize, 2, 4, 8]),
            1usize..5,
            prop::collection::vec(1usize..4, 4),
            prop::sample::subsequence(vec![2usize, 3, 4, 5], 0..=4),
            prop::sample::select(Variant::ALL.to_vec()),
            (1e-6f64..1.0, 0u64..1000, prop::option::of(1usize..100)),
        )
            .prop_map(
                |(k, patch, embed_mult, depths, stages, variant, (lr, seed, max_steps))| {
                    let mut cfg = RunConfig {
                        input_size: patch * 8 * k,
                        patch_size: patch,
                        embed_dim: 8 * embed_mult,
                        depths,
                        num_heads: vec![1, 2, 4, 8],
                        cmi_stages: stages.into_iter().collect(),
                        variant,
                        lr,
                        seed,
                        max_steps,
                        ..RunConfig::default()
                    };
                    if cfg.variant == Variant::CmiV2 && cfg.cmi_stages.is_empty() {
                        cfg.cmi_stages.insert(5);
                    }
                    cfg
                },
            )
    }

    proptest! {
        #[test]
        fn save_then_load_is_identity(cfg in arb_config()) {
            let text = cfg.to_json_string();
            let back = RunConfig::from_json_str(&text).unwrap();
            prop_assert_eq!(back, cfg);
        }

        #[test]
        fn valid_configs_have_consistent_geometry(cfg in arb_config()) {
            let cfg = validate_config(cfg).unwrap();
            let g = derive_stage_geometry(&cfg);
            prop_assert_eq!(g, derive_stage_geometry(&cfg));
            prop_assert!(g.resolution(5) >= 1);
            prop_assert_eq!(g.channels(5), 8 * cfg.embed_dim);
            prop_assert_eq!(g.resolution(1), g.resolution(2));
            prop_assert_eq!(g.resolution(1), cfg.input_size / cfg.patch_size);
        }
    }
}
