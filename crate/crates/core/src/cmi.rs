//! Cross-modality interaction: global multi-head attention, post-norm attention
//! units, exchanged-query cross attention and the joint-stream alternative.

use candle_core::{Result, Tensor};

use crate::nn::{dropout, from_tokens, softmax_last, to_tokens, Ctx, LayerNorm, Linear, Mlp, Scope};

/// Width, head count and dropout of one attention unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
    pub drop: f64,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize, drop: f64) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            candle_core::bail!("attention width {dim} is not divisible by {heads} heads");
        }
        Ok(Self { dim, heads, drop })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Learned per-token additive embedding `[tokens, dim]`, zero-initialized.
#[derive(Debug, Clone)]
pub struct PositionTable {
    table: Tensor,
}

impl PositionTable {
    pub fn new(sc: &mut Scope, tokens: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: sc.zeros("pos", (tokens, dim))?,
        })
    }

    pub fn from_tensor(table: Tensor) -> Self {
        Self { table }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.table
    }
}

/// Row-major flattening `[B,C,R,R] -> [B,R²,C]` plus the position table.
pub fn tokenize(x: &Tensor, pos: &PositionTable) -> Result<Tensor> {
    let tokens = to_tokens(x)?;
    let (n, d) = pos.table.dims2()?;
    let (_, tn, td) = tokens.dims3()?;
    if (n, d) != (tn, td) {
        candle_core::bail!("position table is {n}x{d} but the feature map gives {tn}x{td} tokens");
    }
    tokens.broadcast_add(&pos.table)
}

/// Inverse of [`tokenize`] without the position term.
pub fn detokenize(tokens: &Tensor, side: usize) -> Result<Tensor> {
    from_tokens(tokens, side)
}

/// Multi-head scaled dot-product attention with separate q/k/v and output projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    cfg: AttentionConfig,
}

impl MultiHeadAttention {
    pub fn new(sc: &mut Scope, cfg: AttentionConfig) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            q: Linear::transformer(&mut sc.pp("q"), d, d, true)?,
            k: Linear::transformer(&mut sc.pp("k"), d, d, true)?,
            v: Linear::transformer(&mut sc.pp("v"), d, d, true)?,
            proj: Linear::transformer(&mut sc.pp("proj"), d, d, true)?,
            cfg,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, _) = x.dims3()?;
        x.reshape((b, n, self.cfg.heads, self.cfg.head_dim()))?
            .transpose(1, 2)?
            .contiguous()
    }

    /// `query: [B,Nq,D]`, `context: [B,Nk,D]`; returns `[B,Nq,D]` and the
    /// probabilities `[B,heads,Nq,Nk]`.
    pub fn forward_with_probs(&self, query: &Tensor, context: &Tensor, ctx: &Ctx) -> Result<(Tensor, Tensor)> {
        let (b, nq, d) = query.dims3()?;
        let (_, _, dk) = context.dims3()?;
        if d != self.cfg.dim || dk != self.cfg.dim {
            candle_core::bail!(
                "attention expects width {}, got query {d} and context {dk}",
                self.cfg.dim
            );
        }
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(context)?)?;
        let v = self.split_heads(&self.v.forward(context)?)?;
        let scale = 1.0 / (self.cfg.head_dim() as f64).sqrt();
        let probs = softmax_last(&q.affine(scale, 0.0)?.matmul(&k.t()?)?)?;
        ctx.record_attention(&probs);
        let out = dropout(&probs, self.cfg.drop, ctx)?
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((b, nq, d))?;
        Ok((self.proj.forward(&out)?, probs))
    }

    pub fn forward(&self, query: &Tensor, context: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        Ok(self.forward_with_probs(query, context, ctx)?.0)
    }

    pub fn config(&self) -> AttentionConfig {
        self.cfg
    }
}

/// Attention + MLP unit with residuals on the query side and layer norm after each sum.
#[derive(Debug, Clone)]
pub struct PostNormBlock {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    mlp: Mlp,
    norm2: LayerNorm,
    drop: f64,
}

impl PostNormBlock {
    pub fn new(sc: &mut Scope, cfg: AttentionConfig, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&mut sc.pp("attn"), cfg)?,
            norm1: LayerNorm::new(&mut sc.pp("norm1"), cfg.dim)?,
            mlp: Mlp::new(&mut sc.pp("mlp"), cfg.dim, mlp_ratio * cfg.dim, cfg.drop)?,
            norm2: LayerNorm::new(&mut sc.pp("norm2"), cfg.dim)?,
            drop: cfg.drop,
        })
    }

    /// Queries attend to `context`; the output has the query's token count.
    pub fn forward(&self, query: &Tensor, context: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let attn = self.attn.forward(query, context, ctx)?;
        let y = self.norm1.forward(&(dropout(&attn, self.drop, ctx)? + query)?)?;
        let mlp = self.mlp.forward(&y, ctx)?;
        self.norm2.forward(&(mlp + &y)?)
    }

    /// Self-attention form.
    pub fn forward_self(&self, y: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        self.forward(y, y, ctx)
    }
}

/// Exchanged-query cross attention between the two modalities.
#[derive(Debug, Clone)]
pub struct CrossAttentionBlock {
    rd: PostNormBlock,
    dr: PostNormBlock,
}

impl CrossAttentionBlock {
    pub fn new(sc: &mut Scope, cfg: AttentionConfig, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            rd: PostNormBlock::new(&mut sc.pp("rd"), cfg, mlp_ratio)?,
            dr: PostNormBlock::new(&mut sc.pp("dr"), cfg, mlp_ratio)?,
        })
    }

    /// Returns `(y_rd, y_dr)`: RGB values read with depth queries, and depth values
    /// read with RGB queries.
    pub fn forward(&self, y_r: &Tensor, y_d: &Tensor, ctx: &Ctx) -> Result<(Tensor, Tensor)> {
        let y_rd = self.rd.forward(y_d, y_r, ctx)?;
        let y_dr = self.dr.forward(y_r, y_d, ctx)?;
        Ok((y_rd, y_dr))
    }
}

#[derive(Debug, Clone)]
struct CmiLayer {
    cross: CrossAttentionBlock,
    self_r: PostNormBlock,
    self_d: PostNormBlock,
}

/// Cross-modality interaction at one encoder stage.
#[derive(Debug, Clone)]
pub struct Cmi {
    pos_r: PositionTable,
    pos_d: PositionTable,
    layers: Vec<CmiLayer>,
    side: usize,
}

impl Cmi {
    pub fn new(sc: &mut Scope, cfg: AttentionConfig, side: usize, blocks: usize, mlp_ratio: usize) -> Result<Self> {
        let tokens = side * side;
        let pos_r = PositionTable::new(&mut sc.pp("pos_r"), tokens, cfg.dim)?;
        let pos_d = PositionTable::new(&mut sc.pp("pos_d"), tokens, cfg.dim)?;
        let layers = (0..blocks)
            .map(|i| {
                let mut lsc = sc.pp(format!("layer{i}"));
                Ok(CmiLayer {
                    cross: CrossAttentionBlock::new(&mut lsc.pp("cross"), cfg, mlp_ratio)?,
                    self_r: PostNormBlock::new(&mut lsc.pp("self_r"), cfg, mlp_ratio)?,
                    self_d: PostNormBlock::new(&mut lsc.pp("self_d"), cfg, mlp_ratio)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pos_r,
            pos_d,
            layers,
            side,
        })
    }

    /// `(f_r, f_d) -> (f_rd, f_dr)`, both `[B,C,R,R]`.
    pub fn forward(&self, f_r: &Tensor, f_d: &Tensor, ctx: &Ctx) -> Result<(Tensor, Tensor)> {
        let mut y_r = tokenize(f_r, &self.pos_r)?;
        let mut y_d = tokenize(f_d, &self.pos_d)?;
        for layer in &self.layers {
            let (rd, dr) = layer.cross.forward(&y_r, &y_d, ctx)?;
            y_r = layer.self_r.forward_self(&rd, ctx)?;
            y_d = layer.self_d.forward_self(&dr, ctx)?;
        }
        Ok((detokenize(&y_r, self.side)?, detokenize(&y_d, self.side)?))
    }
}

/// Joint-stream interaction: both token sequences are concatenated and passed
/// through one self-attention stack, then split back.
#[derive(Debug, Clone)]
pub struct CmiV2 {
    pos_r: PositionTable,
    pos_d: PositionTable,
    layers: Vec<PostNormBlock>,
    side: usize,
}

impl CmiV2 {
    /// Uses `2 * blocks` self-attention units so the depth matches [`Cmi`].
    pub fn new(sc: &mut Scope, cfg: AttentionConfig, side: usize, blocks: usize, mlp_ratio: usize) -> Result<Self> {
        let tokens = side * side;
        let pos_r = PositionTable::new(&mut sc.pp("pos_r"), tokens, cfg.dim)?;
        let pos_d = PositionTable::new(&mut sc.pp("pos_d"), tokens, cfg.dim)?;
        let layers = (0..2 * blocks)
            .map(|i| PostNormBlock::new(&mut sc.pp(format!("layer{i}")), cfg, mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pos_r,
            pos_d,
            layers,
            side,
        })
    }

    pub fn forward(&self, f_r: &Tensor, f_d: &Tensor, ctx: &Ctx) -> Result<(Tensor, Tensor)> {
        let y_r = tokenize(f_r, &self.pos_r)?;
        let y_d = tokenize(f_d, &self.pos_d)?;
        let n = y_r.dim(1)?;
        let mut joint = Tensor::cat(&[&y_r, &y_d], 1)?;
        for layer in &self.layers {
            joint = layer.forward_self(&joint, ctx)?;
        }
        let r = joint.narrow(1, 0, n)?;
        let d = joint.narrow(1, n, n)?;
        Ok((
            detokenize(&r.contiguous()?, self.side)?,
            detokenize(&d.contiguous()?, self.side)?,
        ))
    }
}

/// Either interaction flavour, selected by the model variant.
#[derive(Debug, Clone)]
pub enum Interaction {
    Cross(Cmi),
    Joint(CmiV2),
}

impl Interaction {
    pub fn forward(&self, f_r: &Tensor, f_d: &Tensor, ctx: &Ctx) -> Result<(Tensor, Tensor)> {
        match self {
            Interaction::Cross(m) => m.forward(f_r, f_d, ctx),
            Interaction::Joint(m) => m.forward(f_r, f_d, ctx),
        }
    }
}
