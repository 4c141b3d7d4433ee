//! Hierarchical windowed-attention encoder: patch embedding followed by four
//! transformer stages with patch merging between them. One instance encodes one
//! modality and produces a five-level feature pyramid.

use candle_core::{DType, Device, Result, Tensor, D};

use crate::config::{RunConfig, StageGeometry, NUM_STAGES};
use crate::nn::{drop_path, dropout, from_tokens, softmax_last, to_tokens, Ctx, LayerNorm, Linear, Mlp, Scope};

/// Additive logit used to exclude a key from attention.
const MASKED: f64 = -1e9;

/// The five stage outputs of one encoder, each `[B, C_i, R_i, R_i]`.
#[derive(Debug, Clone)]
pub struct EncoderPyramid {
    pub features: Vec<Tensor>,
}

impl EncoderPyramid {
    /// Feature of 1-based stage `stage`.
    pub fn stage(&self, stage: usize) -> &Tensor {
        &self.features[stage - 1]
    }
}

/// Non-overlapping patch partition, linear projection and layer norm (stage 1).
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    proj: Linear,
    norm: LayerNorm,
    patch: usize,
}

impl PatchEmbed {
    pub fn new(sc: &mut Scope, patch: usize, in_chans: usize, embed_dim: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::transformer(&mut sc.pp("proj"), in_chans * patch * patch, embed_dim, true)?,
            norm: LayerNorm::new(&mut sc.pp("norm"), embed_dim)?,
            patch,
        })
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = image.dims4()?;
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            candle_core::bail!("image {h}x{w} is not divisible by patch size {p}");
        }
        let (gh, gw) = (h / p, w / p);
        let patches = image
            .reshape((b, c, gh, p, gw, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, gh * gw, c * p * p))?;
        let tokens = self.norm.forward(&self.proj.forward(&patches)?)?;
        from_tokens(&tokens, gh)
    }
}

/// 2x2 neighbourhood concatenation, layer norm and linear reduction 4C -> 2C.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    norm: LayerNorm,
    reduction: Linear,
}

impl PatchMerge {
    pub fn new(sc: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut sc.pp("norm"), 4 * dim)?,
            reduction: Linear::transformer(&mut sc.pp("reduction"), 4 * dim, 2 * dim, false)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            candle_core::bail!("patch merging needs an even grid, got {h}x{w}");
        }
        let (h2, w2) = (h / 2, w / 2);
        // Channel order (dw, dh, c) matches the usual x0,x1,x2,x3 concatenation.
        let merged = x
            .permute((0, 2, 3, 1))?
            .reshape((b, h2, 2, w2, 2, c))?
            .permute((0, 1, 3, 4, 2, 5))?
            .contiguous()?
            .reshape((b, h2 * w2, 4 * c))?;
        let y = self.reduction.forward(&self.norm.forward(&merged)?)?;
        from_tokens(&y, h2)
    }
}

/// Window layout of one block: effective window, cyclic shift and bottom/right padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub resolution: usize,
    pub window: usize,
    pub shift: usize,
    pub padded: usize,
}

impl WindowLayout {
    /// Windows never exceed the grid, and a grid that fits in one window is not shifted.
    pub fn new(resolution: usize, window: usize, shifted: bool) -> Self {
        let window = window.min(resolution);
        let shift = if shifted && resolution > window { window / 2 } else { 0 };
        let padded = resolution.div_ceil(window) * window;
        Self {
            resolution,
            window,
            shift,
            padded,
        }
    }

    pub fn num_windows(&self) -> usize {
        (self.padded / self.window).pow(2)
    }

    /// Additive attention mask `[num_windows, w², w²]`, or `None` if nothing is masked.
    ///
    /// Keys are masked when they come from a different pre-shift region than the
    /// query, or when they are padding.
    fn mask(&self, dtype: DType, device: &Device) -> Result<Option<Tensor>> {
        if self.shift == 0 && self.padded == self.resolution {
            return Ok(None);
        }
        let (n, w, s) = (self.padded, self.window, self.shift);
        let band = |i: usize| -> usize {
            if s == 0 || i < n - w {
                0
            } else if i < n - s {
                1
            } else {
                2
            }
        };
        // Region id and validity in the shifted frame: position i holds source (i + s) mod n.
        let mut region = vec![0usize; n * n];
        let mut valid = vec![false; n * n];
        for r in 0..n {
            for c in 0..n {
                let (sr, sc) = ((r + s) % n, (c + s) % n);
                region[r * n + c] = band(r) * 3 + band(c);
                valid[r * n + c] = sr < self.resolution && sc < self.resolution;
            }
        }
        let per_side = n / w;
        let ww = w * w;
        let mut mask = vec![0.0f64; self.num_windows() * ww * ww];
        for wr in 0..per_side {
            for wc in 0..per_side {
                let win = wr * per_side + wc;
                let pos = |t: usize| (wr * w + t / w) * n + wc * w + t % w;
                for q in 0..ww {
                    for k in 0..ww {
                        let (pq, pk) = (pos(q), pos(k));
                        if region[pq] != region[pk] || !valid[pk] {
                            mask[(win * ww + q) * ww + k] = MASKED;
                        }
                    }
                }
            }
        }
        Ok(Some(
            Tensor::from_vec(mask, (self.num_windows(), ww, ww), device)?.to_dtype(dtype)?,
        ))
    }
}

/// Multi-head self-attention inside windows with a learned relative position bias.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    bias_table: Tensor,
    bias_index: Tensor,
    heads: usize,
    window: usize,
    drop: f64,
}

impl WindowAttention {
    pub fn new(sc: &mut Scope, dim: usize, heads: usize, window: usize, drop: f64) -> Result<Self> {
        if !dim.is_multiple_of(heads) {
            candle_core::bail!("{dim} channels are not divisible by {heads} heads");
        }
        let span = 2 * window - 1;
        let bias_table = sc.trunc_normal("relative_position_bias_table", (span * span, heads), 0.02)?;
        let ww = window * window;
        let mut index = Vec::with_capacity(ww * ww);
        for q in 0..ww {
            for k in 0..ww {
                let dr = (q / window) as i64 - (k / window) as i64 + window as i64 - 1;
                let dc = (q % window) as i64 - (k % window) as i64 + window as i64 - 1;
                index.push((dr * span as i64 + dc) as u32);
            }
        }
        let bias_index = Tensor::from_vec(index, ww * ww, sc.device())?;
        Ok(Self {
            qkv: Linear::transformer(&mut sc.pp("qkv"), dim, 3 * dim, true)?,
            proj: Linear::transformer(&mut sc.pp("proj"), dim, dim, true)?,
            bias_table,
            bias_index,
            heads,
            window,
            drop,
        })
    }

    fn relative_bias(&self) -> Result<Tensor> {
        let ww = self.window * self.window;
        self.bias_table
            .index_select(&self.bias_index, 0)?
            .reshape((ww, ww, self.heads))?
            .permute((2, 0, 1))?
            .contiguous()
    }

    /// Attention over windows `x: [B*nW, w², C]`; returns the output and the
    /// attention probabilities `[B*nW, heads, w², w²]`.
    pub fn forward_with_probs(&self, x: &Tensor, mask: Option<&Tensor>, ctx: &Ctx) -> Result<(Tensor, Tensor)> {
        let (bw, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((bw, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scale = 1.0 / (hd as f64).sqrt();
        let logits = q.affine(scale, 0.0)?.matmul(&k.t()?)?;
        let logits = logits.broadcast_add(&self.relative_bias()?.unsqueeze(0)?)?;
        let logits = match mask {
            Some(mask) => {
                let nw = mask.dim(0)?;
                logits
                    .reshape((bw / nw, nw, self.heads, n, n))?
                    .broadcast_add(&mask.unsqueeze(1)?.unsqueeze(0)?)?
                    .reshape((bw, self.heads, n, n))?
            }
            None => logits,
        };
        let probs = softmax_last(&logits)?;
        ctx.record_attention(&probs);
        let out = dropout(&probs, self.drop, ctx)?
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((bw, n, c))?;
        let out = dropout(&self.proj.forward(&out)?, self.drop, ctx)?;
        Ok((out, probs))
    }
}

/// Pre-norm window (or shifted-window) transformer block on an R×R token grid.
#[derive(Debug, Clone)]
pub struct WindowBlock {
    norm1: LayerNorm,
    attn: WindowAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    layout: WindowLayout,
    mask: Option<Tensor>,
    drop_path: f64,
}

impl WindowBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sc: &mut Scope,
        dim: usize,
        heads: usize,
        resolution: usize,
        window: usize,
        shifted: bool,
        mlp_ratio: usize,
        drop: f64,
        drop_path: f64,
    ) -> Result<Self> {
        let layout = WindowLayout::new(resolution, window, shifted);
        let mask = layout.mask(sc.dtype(), sc.device())?;
        Ok(Self {
            norm1: LayerNorm::new(&mut sc.pp("norm1"), dim)?,
            attn: WindowAttention::new(&mut sc.pp("attn"), dim, heads, layout.window, drop)?,
            norm2: LayerNorm::new(&mut sc.pp("norm2"), dim)?,
            mlp: Mlp::new(&mut sc.pp("mlp"), dim, mlp_ratio * dim, drop)?,
            layout,
            mask,
            drop_path,
        })
    }

    pub fn layout(&self) -> WindowLayout {
        self.layout
    }

    fn roll(x: &Tensor, shift: usize, forward: bool) -> Result<Tensor> {
        let mut x = x.clone();
        for dim in [1, 2] {
            let n = x.dim(dim)?;
            let s = if forward { shift } else { n - shift };
            x = Tensor::cat(&[x.narrow(dim, s, n - s)?, x.narrow(dim, 0, s)?], dim)?;
        }
        Ok(x)
    }

    /// Token-mixing branch; returns the branch output and the attention probabilities.
    fn attention_branch(&self, x: &Tensor, ctx: &Ctx) -> Result<(Tensor, Tensor)> {
        let WindowLayout {
            resolution: r,
            window: w,
            shift,
            padded,
        } = self.layout;
        let (b, _, c) = x.dims3()?;
        let mut grid = self.norm1.forward(x)?.reshape((b, r, r, c))?;
        if padded > r {
            grid = grid
                .pad_with_zeros(1, 0, padded - r)?
                .pad_with_zeros(2, 0, padded - r)?;
        }
        if shift > 0 {
            grid = Self::roll(&grid, shift, true)?;
        }
        let per_side = padded / w;
        let windows = grid
            .reshape((b, per_side, w, per_side, w, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b * per_side * per_side, w * w, c))?;
        let (out, probs) = self.attn.forward_with_probs(&windows, self.mask.as_ref(), ctx)?;
        let mut grid = out
            .reshape((b, per_side, per_side, w, w, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, padded, padded, c))?;
        if shift > 0 {
            grid = Self::roll(&grid, shift, false)?;
        }
        if padded > r {
            grid = grid.narrow(1, 0, r)?.narrow(2, 0, r)?;
        }
        Ok((grid.contiguous()?.reshape((b, r * r, c))?, probs))
    }

    /// `x: [B, R², C]` tokens.
    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        Ok(self.forward_with_probs(x, ctx)?.0)
    }

    pub fn forward_with_probs(&self, x: &Tensor, ctx: &Ctx) -> Result<(Tensor, Tensor)> {
        let (attn, probs) = self.attention_branch(x, ctx)?;
        let x = (x + drop_path(&attn, self.drop_path, ctx)?)?;
        let mlp = self.mlp.forward(&self.norm2.forward(&x)?, ctx)?;
        let x = (&x + drop_path(&mlp, self.drop_path, ctx)?)?;
        Ok((x, probs))
    }
}

#[derive(Debug, Clone)]
struct EncoderStage {
    merge: Option<PatchMerge>,
    blocks: Vec<WindowBlock>,
    resolution: usize,
}

/// One modality's encoder.
#[derive(Debug, Clone)]
pub struct ModalityEncoder {
    embed: PatchEmbed,
    stages: Vec<EncoderStage>,
}

impl ModalityEncoder {
    pub fn new(sc: &mut Scope, cfg: &RunConfig, geometry: &StageGeometry) -> Result<Self> {
        let embed = PatchEmbed::new(&mut sc.pp("patch_embed"), cfg.patch_size, 3, cfg.embed_dim)?;
        let mut stages = Vec::with_capacity(NUM_STAGES - 1);
        for stage in 2..=NUM_STAGES {
            let mut ssc = sc.pp(format!("stage{stage}"));
            let merge = if stage > 2 {
                Some(PatchMerge::new(&mut ssc.pp("merge"), geometry.channels(stage - 1))?)
            } else {
                None
            };
            let dim = geometry.channels(stage);
            let resolution = geometry.resolution(stage);
            let blocks = (0..cfg.depth_for_stage(stage))
                .map(|i| {
                    WindowBlock::new(
                        &mut ssc.pp(format!("block{i}")),
                        dim,
                        cfg.heads_for_stage(stage),
                        resolution,
                        cfg.window_size,
                        i % 2 == 1,
                        cfg.mlp_ratio,
                        cfg.backbone_drop,
                        cfg.drop_path,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(EncoderStage {
                merge,
                blocks,
                resolution,
            });
        }
        Ok(Self { embed, stages })
    }

    /// Stage-1 output: the patch embedding of a `[B, 3, S, S]` image.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        self.embed.forward(image)
    }

    /// Output of stage `stage` (2..=5) given the (possibly interacted) output of the previous stage.
    pub fn stage(&self, stage: usize, prev: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let st = &self.stages[stage - 2];
        let x = match &st.merge {
            Some(merge) => merge.forward(prev)?,
            None => prev.clone(),
        };
        let mut tokens = to_tokens(&x)?;
        for block in &st.blocks {
            tokens = block.forward(&tokens, ctx)?;
        }
        from_tokens(&tokens, st.resolution)
    }

    /// Run all five stages without cross-modal interaction.
    pub fn encode(&self, image: &Tensor, ctx: &Ctx) -> Result<EncoderPyramid> {
        let mut features = vec![self.embed(image)?];
        for stage in 2..=NUM_STAGES {
            let next = self.stage(stage, features.last().unwrap(), ctx)?;
            features.push(next);
        }
        Ok(EncoderPyramid { features })
    }

    pub fn blocks(&self, stage: usize) -> &[WindowBlock] {
        &self.stages[stage - 2].blocks
    }
}

/// Mean of the last axis; handy for sanity checks on attention rows.
pub fn row_sums(probs: &Tensor) -> Result<Tensor> {
    probs.sum(D::Minus1)
}
