//! The full network: dual encoders interleaved with per-stage fusion, the skip
//! pathway and the dense decoder, assembled according to the configured variant.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{EncoderPyramid, ModalityEncoder};
use crate::cmi::{AttentionConfig, Cmi, CmiV2, Interaction};
use crate::config::{derive_stage_geometry, RunConfig, StageGeometry, Variant, NUM_STAGES};
use crate::decoder::{Decoder, DecoderKind, DecoderTrace, PredictionPair};
use crate::fusion::{early_fuse, gma_fuse, Afe, CrossModalSet, GateSignal, Gma, SkipConv};
use crate::nn::{Ctx, ParamBuilder, ParamStore, Scope};

#[derive(Debug, Clone)]
struct Branch {
    encoder: ModalityEncoder,
    afe: Vec<Afe>,
}

impl Branch {
    fn new(sc: &mut Scope, cfg: &RunConfig, geometry: &StageGeometry) -> Result<Self> {
        let encoder = ModalityEncoder::new(&mut sc.pp("encoder"), cfg, geometry)?;
        let afe = (1..=NUM_STAGES)
            .map(|i| Afe::new(&mut sc.pp(format!("afe{i}")), geometry.channels(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { encoder, afe })
    }
}

#[derive(Debug, Clone)]
struct GatedStage {
    interaction: Interaction,
    gma: Gma,
}

/// Everything computed by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Encoder outputs per branch before any fusion (`None` for an absent modality).
    pub rgb: Option<EncoderPyramid>,
    pub depth: Option<EncoderPyramid>,
    pub fused: CrossModalSet,
    /// Gate per interaction stage.
    pub gates: BTreeMap<usize, GateSignal>,
    pub decoder: DecoderTrace,
    pub prediction: PredictionPair,
}

/// Assembled network with its parameter store.
pub struct DtmiNet {
    cfg: RunConfig,
    geometry: StageGeometry,
    rgb: Option<Branch>,
    depth: Option<Branch>,
    gated: BTreeMap<usize, GatedStage>,
    skip: SkipConv,
    decoder: Decoder,
    params: ParamStore,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for DtmiNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DtmiNet")
            .field("variant", &self.cfg.variant)
            .field("cmi_stages", &self.gated.keys().collect::<Vec<_>>())
            .field("params", &self.num_parameters())
            .finish()
    }
}

/// Build the network for `cfg.variant`, with parameters drawn from `cfg.seed`.
pub fn build_variant(cfg: &RunConfig, dtype: DType, device: &Device) -> Result<DtmiNet> {
    DtmiNet::new(cfg, dtype, device)
}

impl DtmiNet {
    pub fn new(cfg: &RunConfig, dtype: DType, device: &Device) -> Result<Self> {
        let geometry = derive_stage_geometry(cfg);
        let variant = cfg.variant;
        if variant.is_single_modality() && !cfg.cmi_stages.is_empty() {
            log::warn!(
                "variant {variant} has a single encoder; interaction stages {:?} are disabled",
                cfg.cmi_stages
            );
        }
        let mut builder = ParamBuilder::new(ChaCha8Rng::seed_from_u64(cfg.seed), dtype, device.clone());
        let mut root = builder.root();
        let rgb = if variant.uses_rgb() {
            Some(Branch::new(&mut root.pp("rgb"), cfg, &geometry)?)
        } else {
            None
        };
        let depth = if variant.uses_depth() {
            Some(Branch::new(&mut root.pp("depth"), cfg, &geometry)?)
        } else {
            None
        };
        let mut gated = BTreeMap::new();
        for stage in cfg.active_cmi_stages() {
            let attn = AttentionConfig::new(geometry.channels(stage), cfg.heads_for_stage(stage), cfg.cmi_drop)?;
            let side = geometry.resolution(stage);
            let mut ssc = root.pp(format!("cmi{stage}"));
            let interaction = if variant == Variant::CmiV2 {
                Interaction::Joint(CmiV2::new(&mut ssc, attn, side, cfg.cmi_blocks, cfg.mlp_ratio)?)
            } else {
                Interaction::Cross(Cmi::new(&mut ssc, attn, side, cfg.cmi_blocks, cfg.mlp_ratio)?)
            };
            let gma = Gma::new(
                &mut root.pp(format!("gma{stage}")),
                geometry.channels(stage),
                cfg.gma_drop,
            )?;
            gated.insert(stage, GatedStage { interaction, gma });
        }
        let skip = SkipConv::new(
            &mut root.pp("skip"),
            [geometry.channels(1), geometry.channels(2), geometry.channels(3)],
            cfg.decoder_width,
        )?;
        let kind = match variant {
            Variant::NoFdec => DecoderKind::DenseNoHistory,
            Variant::NoDsd => DecoderKind::Plain,
            _ => DecoderKind::Dense,
        };
        let decoder = Decoder::new(
            &mut root.pp("decoder"),
            &geometry,
            cfg.decoder_width,
            kind,
            variant.has_edge_head(),
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            geometry,
            rgb,
            depth,
            gated,
            skip,
            decoder,
            params: builder.finish(),
            dtype,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn geometry(&self) -> &StageGeometry {
        &self.geometry
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Stages that carry an interaction + gate pair.
    pub fn interaction_stages(&self) -> Vec<usize> {
        self.gated.keys().copied().collect()
    }

    pub fn forward(&self, rgb: &Tensor, depth: &Tensor, ctx: &Ctx) -> Result<PredictionPair> {
        Ok(self.forward_trace(rgb, depth, ctx)?.prediction)
    }

    /// Forward pass keeping every intermediate. Inputs are `[B,3,S,S]`; the input of an
    /// unused modality is ignored.
    pub fn forward_trace(&self, rgb: &Tensor, depth: &Tensor, ctx: &Ctx) -> Result<ForwardTrace> {
        let size = self.cfg.input_size;
        for (name, x) in [("rgb", rgb), ("depth", depth)] {
            let (_, c, h, w) = x.dims4()?;
            if (c, h, w) != (3, size, size) {
                candle_core::bail!("{name} input must be [B,3,{size},{size}], got {:?}", x.dims());
            }
        }
        let (rgb_pyr, depth_pyr, f_cm, gates) = match (&self.rgb, &self.depth) {
            (Some(r), Some(d)) => self.encode_pair(r, d, rgb, depth, ctx)?,
            (Some(r), None) => {
                let (p, f) = Self::encode_single(r, rgb, ctx)?;
                (Some(p), None, f, BTreeMap::new())
            }
            (None, Some(d)) => {
                let (p, f) = Self::encode_single(d, depth, ctx)?;
                (None, Some(p), f, BTreeMap::new())
            }
            (None, None) => unreachable!("every variant has at least one encoder"),
        };
        let skip_src = rgb_pyr.as_ref().or(depth_pyr.as_ref()).expect("one pyramid");
        let f_skip = self
            .skip
            .forward(&[skip_src.stage(1), skip_src.stage(2), skip_src.stage(3)])?;
        let fused = CrossModalSet { f_cm, f_skip };
        let (prediction, decoder) = self.decoder.forward(&fused, size)?;
        Ok(ForwardTrace {
            rgb: rgb_pyr,
            depth: depth_pyr,
            fused,
            gates,
            decoder,
            prediction,
        })
    }

    fn encode_single(branch: &Branch, image: &Tensor, ctx: &Ctx) -> Result<(EncoderPyramid, Vec<Tensor>)> {
        let pyramid = branch.encoder.encode(image, ctx)?;
        let f_cm = pyramid
            .features
            .iter()
            .zip(&branch.afe)
            .map(|(f, afe)| afe.forward(f))
            .collect::<Result<Vec<_>>>()?;
        Ok((pyramid, f_cm))
    }

    #[allow(clippy::type_complexity)]
    fn encode_pair(
        &self,
        r: &Branch,
        d: &Branch,
        rgb: &Tensor,
        depth: &Tensor,
        ctx: &Ctx,
    ) -> Result<(
        Option<EncoderPyramid>,
        Option<EncoderPyramid>,
        Vec<Tensor>,
        BTreeMap<usize, GateSignal>,
    )> {
        let mut raw_r = Vec::with_capacity(NUM_STAGES);
        let mut raw_d = Vec::with_capacity(NUM_STAGES);
        let mut f_cm = Vec::with_capacity(NUM_STAGES);
        let mut gates = BTreeMap::new();
        let mut next_r = r.encoder.embed(rgb)?;
        let mut next_d = d.encoder.embed(depth)?;
        for stage in 1..=NUM_STAGES {
            let (fr, fd) = if stage == 1 {
                (next_r.clone(), next_d.clone())
            } else {
                (
                    r.encoder.stage(stage, &next_r, ctx)?,
                    d.encoder.stage(stage, &next_d, ctx)?,
                )
            };
            let ar = r.afe[stage - 1].forward(&fr)?;
            let ad = d.afe[stage - 1].forward(&fd)?;
            match self.gated.get(&stage) {
                Some(g) => {
                    let (f_rd, f_dr) = g.interaction.forward(&ar, &ad, ctx)?;
                    let gate = g.gma.gate(&f_rd, &f_dr, ctx)?;
                    f_cm.push(gma_fuse(&f_rd, &f_dr, &gate)?);
                    gates.insert(stage, gate);
                    next_r = f_rd;
                    next_d = f_dr;
                }
                None => {
                    f_cm.push(early_fuse(&ar, &ad)?);
                    next_r = fr.clone();
                    next_d = fd.clone();
                }
            }
            raw_r.push(fr);
            raw_d.push(fd);
        }
        Ok((
            Some(EncoderPyramid { features: raw_r }),
            Some(EncoderPyramid { features: raw_d }),
            f_cm,
            gates,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small_cfg(variant: Variant) -> RunConfig {
        RunConfig {
            input_size: 32,
            embed_dim: 8,
            depths: vec![1, 1, 1, 1],
            num_heads: vec![1, 1, 2, 2],
            decoder_width: 8,
            variant,
            ..RunConfig::default()
        }
    }

    fn count(variant: Variant) -> usize {
        DtmiNet::new(&small_cfg(variant), DType::F32, &Device::Cpu)
            .unwrap()
            .num_parameters()
    }

    fn param_names(cfg: &RunConfig) -> BTreeSet<String> {
        let net = DtmiNet::new(cfg, DType::F32, &Device::Cpu).unwrap();
        net.params().names().map(String::from).collect()
    }

    #[test]
    fn variant_parameter_counts_are_ordered() {
        let full = count(Variant::Full);
        assert!(count(Variant::RgbOnly) < full);
        assert!(count(Variant::DepthOnly) < full);
        assert!(count(Variant::NoFdec) < full);
        assert!(count(Variant::NoEdge) < full);
    }

    #[test]
    fn no_edge_differs_only_by_edge_head() {
        let full = param_names(&small_cfg(Variant::Full));
        let no_edge = param_names(&small_cfg(Variant::NoEdge));
        let diff: Vec<_> = full.difference(&no_edge).collect();
        assert!(!diff.is_empty());
        assert!(diff.iter().all(|n| n.starts_with("decoder.edge_head.")));
        assert!(no_edge.is_subset(&full));
    }

    #[test]
    fn placements_build_the_requested_pairs() {
        for stages in [vec![5], vec![3, 4, 5], vec![2, 3, 4, 5], vec![]] {
            let cfg = RunConfig {
                cmi_stages: stages.iter().copied().collect(),
                ..small_cfg(Variant::Full)
            };
            let net = DtmiNet::new(&cfg, DType::F32, &Device::Cpu).unwrap();
            assert_eq!(net.interaction_stages(), stages);
            let names = param_names(&cfg);
            let gma_stages: BTreeSet<_> = names
                .iter()
                .filter_map(|n| n.strip_prefix("gma").and_then(|r| r[..1].parse::<usize>().ok()))
                .collect();
            assert_eq!(gma_stages, stages.iter().copied().collect());
        }
    }

    #[test]
    fn single_modality_disables_interaction() {
        let net = DtmiNet::new(&small_cfg(Variant::DepthOnly), DType::F32, &Device::Cpu).unwrap();
        assert!(net.interaction_stages().is_empty());
        assert!(net.params().names().all(|n| !n.starts_with("rgb.")));
    }

    #[test]
    fn encoders_do_not_share_parameters() {
        let net = DtmiNet::new(&small_cfg(Variant::Full), DType::F32, &Device::Cpu).unwrap();
        let rgb: Vec<_> = net
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with("rgb.encoder."))
            .collect();
        let depth: Vec<_> = net
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with("depth.encoder."))
            .collect();
        assert_eq!(rgb.len(), depth.len());
        for ((_, a), (_, b)) in rgb.iter().zip(&depth) {
            assert_ne!(a.as_tensor().id(), b.as_tensor().id());
        }
    }
}
