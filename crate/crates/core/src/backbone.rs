//! Pyramid vision transformer used as the visual encoder.
//!
//! Four stages, each a non-overlapping patch embedding (stride 4, then 2)
//! followed by transformer blocks whose attention computes keys and values
//! from a spatially reduced copy of the token grid.

use serde::{Deserialize, Serialize};

use crate::attention::MultiHeadAttention;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, LayerNorm, Linear, Mlp, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub sr_ratio: usize,
    pub patch_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stages: [StageConfig; 4],
}

fn stages(dims: [usize; 4], heads: [usize; 4], mlp: [usize; 4], depths: [usize; 4], sr: [usize; 4]) -> [StageConfig; 4] {
    std::array::from_fn(|i| StageConfig {
        depth: depths[i],
        hidden_dim: dims[i],
        heads: heads[i],
        mlp_dim: mlp[i],
        sr_ratio: sr[i],
        patch_stride: if i == 0 { 4 } else { 2 },
    })
}

impl BackboneConfig {
    /// PVT-Tiny at 384 x 384 pixels.
    pub fn paper() -> Self {
        Self {
            height: 384,
            width: 384,
            channels: 3,
            stages: stages([64, 128, 320, 512], [1, 2, 5, 8], [512, 1024, 1280, 2048], [2, 2, 2, 2], [8, 4, 2, 1]),
        }
    }

    pub fn tiny64() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 3,
            stages: stages([16, 32, 64, 128], [1, 2, 4, 8], [128, 256, 256, 512], [1, 1, 1, 1], [4, 2, 1, 1]),
        }
    }

    pub fn nano64() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 3,
            stages: stages([8, 16, 32, 64], [1, 1, 2, 4], [32, 64, 128, 256], [1, 1, 1, 1], [4, 2, 1, 1]),
        }
    }

    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.patch_stride).product()
    }

    pub fn out_dim(&self) -> usize {
        self.stages[3].hidden_dim
    }

    /// Token-grid side lengths after each stage's patch embedding.
    pub fn stage_grids(&self) -> [(usize, usize); 4] {
        let mut acc = 1;
        std::array::from_fn(|i| {
            acc *= self.stages[i].patch_stride;
            (self.height / acc, self.width / acc)
        })
    }

    /// Number of output tokens per image.
    pub fn num_tokens(&self) -> usize {
        let (h, w) = self.stage_grids()[3];
        h * w
    }

    pub fn validate(&self, model_dim: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("backbone: {msg}")));
        if self.channels == 0 {
            return bad("zero channels".into());
        }
        let stride = self.total_stride();
        if self.height == 0 || self.width == 0 || self.height % stride != 0 || self.width % stride != 0 {
            return bad(format!("{}x{} not divisible by total stride {stride}", self.height, self.width));
        }
        if self.num_tokens() < 4 {
            return bad(format!("{} output tokens, at least 4 required", self.num_tokens()));
        }
        if self.out_dim() != model_dim {
            return bad(format!("final stage dim {} differs from model dim {model_dim}", self.out_dim()));
        }
        for (i, (s, (h, w))) in self.stages.iter().zip(self.stage_grids()).enumerate() {
            if s.depth == 0 || s.hidden_dim == 0 || s.mlp_dim == 0 {
                return bad(format!("stage {i} has a zero size"));
            }
            if s.heads == 0 || s.hidden_dim % s.heads != 0 {
                return bad(format!("stage {i} dim {} not divisible by {} heads", s.hidden_dim, s.heads));
            }
            if s.patch_stride != if i == 0 { 4 } else { 2 } {
                return bad(format!("stage {i} patch stride {}", s.patch_stride));
            }
            if s.sr_ratio == 0 || h % s.sr_ratio != 0 || w % s.sr_ratio != 0 {
                return bad(format!("stage {i} sr ratio {} does not divide its {h}x{w} grid", s.sr_ratio));
            }
        }
        Ok(())
    }
}

/// Non-overlapping `stride x stride` patches flattened row-major over
/// (patch row, patch col, channel): `[B, H, W, C] -> [B, (H/s)(W/s), s*s*C]`.
pub fn patchify(tape: &mut Tape, x: Var, stride: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || stride == 0 || s[1] % stride != 0 || s[2] % stride != 0 {
        return Err(Error::invalid(
            "patch_embed",
            format!("extents {s:?} not divisible by stride {stride}"),
        ));
    }
    let (b, h, w, c) = (s[0], s[1] / stride, s[2] / stride, s[3]);
    let r = tape.reshape(x, vec![b, h, stride, w, stride, c])?;
    let p = tape.permute(r, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(p, vec![b, h * w, stride * stride * c])
}

/// Side lengths of a square token grid.
pub fn square_grid(tokens: usize) -> Result<(usize, usize)> {
    let side = (tokens as f64).sqrt().round() as usize;
    if side * side != tokens {
        return Err(Error::invalid("sr_attention", format!("{tokens} tokens do not form a square grid")));
    }
    Ok((side, side))
}

/// Linear patch projection plus a learned positional embedding per token.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub pos: ParamId,
    pub stride: usize,
}

impl PatchEmbed {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_dim: usize,
        stride: usize,
        tokens: usize,
    ) -> Self {
        Self {
            proj: Linear::new(store, init, &format!("{name}.proj"), stride * stride * in_ch, out_dim),
            pos: store.add(format!("{name}.pos"), init.normal(&[tokens, out_dim], 0.02)),
            stride,
        }
    }

    /// `[B, H, W, C] -> [B, (H/s)(W/s), out_dim]`
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let patches = patchify(ctx.tape, x, self.stride)?;
        let tokens = self.proj.forward(ctx, patches)?;
        ctx.tape.add(tokens, ctx.p(self.pos))
    }
}

/// Attention whose keys and values come from the token grid downsampled by
/// `sr_ratio` (strided patch merge, linear projection, layer norm).
#[derive(Clone, Debug)]
pub struct SrAttention {
    pub attn: MultiHeadAttention,
    pub reduce: Option<(Linear, LayerNorm)>,
    pub sr_ratio: usize,
}

impl SrAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize, sr_ratio: usize) -> Result<Self> {
        let attn = MultiHeadAttention::new(store, init, &format!("{name}.attn"), dim, dim, dim, heads)?;
        let reduce = (sr_ratio > 1).then(|| {
            (
                Linear::new(store, init, &format!("{name}.sr.proj"), sr_ratio * sr_ratio * dim, dim),
                LayerNorm::new(store, &format!("{name}.sr.norm"), dim),
            )
        });
        Ok(Self { attn, reduce, sr_ratio })
    }

    /// Reduced key/value source: `[B, h*w, dim] -> [B, (h/r)(w/r), dim]`.
    pub fn reduce(&self, ctx: &mut Ctx, x: Var, grid: (usize, usize)) -> Result<Var> {
        let Some((proj, norm)) = &self.reduce else {
            return Ok(x);
        };
        let s = ctx.tape.shape(x).to_vec();
        let (h, w) = grid;
        if h % self.sr_ratio != 0 || w % self.sr_ratio != 0 {
            return Err(Error::invalid(
                "sr_attention",
                format!("sr ratio {} does not divide the {h}x{w} grid", self.sr_ratio),
            ));
        }
        let g = ctx.tape.reshape(x, vec![s[0], h, w, s[2]])?;
        let merged = patchify(ctx.tape, g, self.sr_ratio)?;
        let r = proj.forward(ctx, merged)?;
        norm.forward(ctx, r)
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, grid: (usize, usize)) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        if s.len() != 3 || s[1] != grid.0 * grid.1 {
            return Err(Error::invalid(
                "sr_attention",
                format!("tokens {s:?} do not match a {}x{} grid", grid.0, grid.1),
            ));
        }
        let context = self.reduce(ctx, x, grid)?;
        self.attn.forward(ctx, x, context, None)
    }
}

#[derive(Clone, Debug)]
pub struct PvtBlock {
    pub norm1: LayerNorm,
    pub attn: SrAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl PvtBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &StageConfig) -> Result<Self> {
        let dim = cfg.hidden_dim;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: SrAttention::new(store, init, name, dim, cfg.heads, cfg.sr_ratio)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), dim, cfg.mlp_dim),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, grid: (usize, usize)) -> Result<Var> {
        let h = self.norm1.forward(ctx, x)?;
        let a = self.attn.forward(ctx, h, grid)?;
        let a = ctx.dropout(a)?;
        let x = ctx.tape.add(x, a)?;
        let h = self.norm2.forward(ctx, x)?;
        let m = self.mlp.forward(ctx, h)?;
        let m = ctx.dropout(m)?;
        ctx.tape.add(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub embed: PatchEmbed,
    pub blocks: Vec<PvtBlock>,
    pub grid: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stages: Vec<Stage>,
    pub norm: LayerNorm,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, config: &BackboneConfig) -> Result<Self> {
        config.validate(config.out_dim())?;
        let mut in_ch = config.channels;
        let mut stages = Vec::with_capacity(4);
        for (i, (cfg, grid)) in config.stages.iter().zip(config.stage_grids()).enumerate() {
            let prefix = format!("{name}.stages.{i}");
            let embed = PatchEmbed::new(
                store,
                init,
                &format!("{prefix}.embed"),
                in_ch,
                cfg.hidden_dim,
                cfg.patch_stride,
                grid.0 * grid.1,
            );
            let blocks = (0..cfg.depth)
                .map(|j| PvtBlock::new(store, init, &format!("{prefix}.blocks.{j}"), cfg))
                .collect::<Result<_>>()?;
            stages.push(Stage { embed, blocks, grid });
            in_ch = cfg.hidden_dim;
        }
        Ok(Self {
            config: config.clone(),
            stages,
            norm: LayerNorm::new(store, &format!("{name}.norm"), config.out_dim()),
        })
    }

    /// `[B, H, W, C] -> [B, N_p, d]`
    pub fn forward(&self, ctx: &mut Ctx, images: Var) -> Result<Var> {
        let s = ctx.tape.shape(images).to_vec();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.height || s[2] != c.width || s[3] != c.channels {
            return Err(Error::shape("backbone", &s, &[c.height, c.width, c.channels]));
        }
        let b = s[0];
        let mut x = images;
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                let dim = ctx.tape.shape(x)[2];
                let (h, w) = self.stages[i - 1].grid;
                x = ctx.tape.reshape(x, vec![b, h, w, dim])?;
            }
            x = stage.embed.forward(ctx, x)?;
            for block in &stage.blocks {
                x = block.forward(ctx, x, stage.grid)?;
            }
        }
        self.norm.forward(ctx, x)
    }
}
