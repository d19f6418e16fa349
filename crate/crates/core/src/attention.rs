//! Multi-head attention and the three sequence transformers built on it.
//!
//! * [`MultiModalTransformer`]: visual tokens query projected short-term
//!   weather tokens (cross-attention), read out through a cls token.
//! * [`SpatialTransformer`]: self-attention across a county's grid cells
//!   with coordinate-derived positional embeddings.
//! * [`TemporalTransformer`]: self-attention across time steps with an
//!   additive per-head score bias projected from long-term weather.
//!
//! Every attention sublayer sits in a pre-norm residual block followed by an
//! MLP sublayer.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, LayerNorm, Linear, Mlp, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Softmax(Q K^T / sqrt(d_head) + bias) over the key axis.
///
/// `q: [.., h, n_q, d_head]`, `k: [.., h, n_k, d_head]`; `bias` must
/// broadcast (leading axes) to the score shape `[.., h, n_q, n_k]`.
pub fn attention_probs(tape: &mut Tape, q: Var, k: Var, bias: Option<Var>) -> Result<Var> {
    let (qs, ks) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if qs.len() < 2 || qs.len() != ks.len() || qs[..qs.len() - 2] != ks[..ks.len() - 2] || qs.last() != ks.last() {
        return Err(Error::shape("scaled_attention", &qs, &ks));
    }
    let d_head = *qs.last().unwrap();
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / (d_head as f64).sqrt());
    if let Some(b) = bias {
        scores = tape.add(scores, b)?;
    }
    let last = tape.shape(scores).len() - 1;
    tape.softmax(scores, last)
}

/// Scaled dot-product attention with an optional additive score bias.
pub fn scaled_attention(tape: &mut Tape, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<Var> {
    let (ks, vs) = (tape.shape(k), tape.shape(v));
    if ks.len() != vs.len() || ks[..ks.len() - 1] != vs[..vs.len() - 1] {
        return Err(Error::shape("scaled_attention", ks, vs));
    }
    let probs = attention_probs(tape, q, k, bias)?;
    tape.matmul(probs, v)
}

/// `[B, n, h * d_head] -> [B, h, n, d_head]`
fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let r = tape.reshape(x, vec![b, n, heads, d / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// `[B, h, n, d_head] -> [B, n, h * d_head]`
fn merge_heads(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, vec![s[0], s[2], s[1] * s[3]])
}

/// Query/key/value/output projections for one attention sublayer.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    /// Queries come from `query_dim` inputs, keys and values from
    /// `context_dim` inputs; both are projected to `dim`.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        query_dim: usize,
        context_dim: usize,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{name}: dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            w_q: Linear::new(store, init, &format!("{name}.w_q"), query_dim, dim),
            w_k: Linear::new(store, init, &format!("{name}.w_k"), context_dim, dim),
            w_v: Linear::new(store, init, &format!("{name}.w_v"), context_dim, dim),
            w_o: Linear::new(store, init, &format!("{name}.w_o"), dim, dim),
            heads,
            dim,
        })
    }

    /// `queries: [B, n_q, query_dim]`, `context: [B, n_k, context_dim]`,
    /// optional `bias` broadcastable to `[B, h, n_q, n_k]`.
    pub fn forward(&self, ctx: &mut Ctx, queries: Var, context: Var, bias: Option<Var>) -> Result<Var> {
        let (qs, cs) = (ctx.tape.shape(queries).to_vec(), ctx.tape.shape(context).to_vec());
        if qs.len() != 3 || cs.len() != 3 || qs[0] != cs[0] {
            return Err(Error::shape("multi_head_attention", &qs, &cs));
        }
        if cs[1] == 0 {
            return Err(Error::invalid("multi_head_attention", "no key tokens"));
        }
        let q = self.w_q.forward(ctx, queries)?;
        let k = self.w_k.forward(ctx, context)?;
        let v = self.w_v.forward(ctx, context)?;
        let q = split_heads(ctx.tape, q, self.heads)?;
        let k = split_heads(ctx.tape, k, self.heads)?;
        let v = split_heads(ctx.tape, v, self.heads)?;
        let attended = scaled_attention(ctx.tape, q, k, v, bias)?;
        let merged = merge_heads(ctx.tape, attended)?;
        self.w_o.forward(ctx, merged)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockShape {
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
}

/// Pre-norm self-attention block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize, mlp_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: MultiHeadAttention::new(store, init, &format!("{name}.attn"), dim, dim, dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), dim, mlp_dim),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var, bias: Option<Var>) -> Result<Var> {
        let h = self.norm1.forward(ctx, x)?;
        let a = self.attn.forward(ctx, h, h, bias)?;
        let a = ctx.dropout(a)?;
        let x = ctx.tape.add(x, a)?;
        mlp_sublayer(ctx, &self.norm2, &self.mlp, x)
    }
}

fn mlp_sublayer(ctx: &mut Ctx, norm: &LayerNorm, mlp: &Mlp, x: Var) -> Result<Var> {
    let h = norm.forward(ctx, x)?;
    let m = mlp.forward(ctx, h)?;
    let m = ctx.dropout(m)?;
    ctx.tape.add(x, m)
}

/// Multi-modal block: self-attention among the visual tokens, then MM-MHA
/// (visual queries against meteorological keys/values), then the MLP.
///
/// Without a cross-attention sublayer it degenerates to a plain
/// [`TransformerBlock`] layout, which is how short-term weather masking is
/// wired.
#[derive(Clone, Debug)]
pub struct MultiModalBlock {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross: Option<(LayerNorm, MultiHeadAttention)>,
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp,
}

impl MultiModalBlock {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dim: usize,
        shape: BlockShape,
        with_cross: bool,
    ) -> Result<Self> {
        let norm_self = LayerNorm::new(store, &format!("{name}.norm_self"), dim);
        let self_attn = MultiHeadAttention::new(store, init, &format!("{name}.self_attn"), dim, dim, dim, shape.heads)?;
        let cross = if with_cross {
            Some((
                LayerNorm::new(store, &format!("{name}.norm_cross"), dim),
                MultiHeadAttention::new(store, init, &format!("{name}.mm_attn"), dim, dim, dim, shape.heads)?,
            ))
        } else {
            None
        };
        Ok(Self {
            norm_self,
            self_attn,
            cross,
            norm_mlp: LayerNorm::new(store, &format!("{name}.norm_mlp"), dim),
            mlp: Mlp::new(store, init, &format!("{name}.mlp"), dim, shape.mlp_dim),
        })
    }

    /// `x: [B, n, d]`; `context: [B, N1, d]` projected weather tokens.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, context: Option<Var>) -> Result<Var> {
        let h = self.norm_self.forward(ctx, x)?;
        let a = self.self_attn.forward(ctx, h, h, None)?;
        let a = ctx.dropout(a)?;
        let mut x = ctx.tape.add(x, a)?;
        if let Some((norm, attn)) = &self.cross {
            let context = context.ok_or_else(|| Error::invalid("mm_mha", "block needs meteorological context"))?;
            let h = norm.forward(ctx, x)?;
            let a = attn.forward(ctx, h, context, None)?;
            let a = ctx.dropout(a)?;
            x = ctx.tape.add(x, a)?;
        }
        mlp_sublayer(ctx, &self.norm_mlp, &self.mlp, x)
    }
}

/// Learnable vector prepended to a token sequence.
#[derive(Clone, Debug)]
pub struct ClsToken {
    pub token: ParamId,
}

impl ClsToken {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            token: store.add(name, init.normal(&[dim], 0.02)),
        }
    }

    /// `[B, n, d] -> [B, n + 1, d]`
    pub fn prepend(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x).to_vec();
        let t = ctx.tape.broadcast_to(ctx.p(self.token), &[s[0], 1, s[2]])?;
        ctx.tape.concat(&[t, x], 1)
    }
}

/// Positional embeddings for any number of grid cells, projected from
/// normalized (row, col) centers, plus a dedicated embedding for the cls slot.
#[derive(Clone, Debug)]
pub struct FlexPosEmbed {
    pub coord_proj: Linear,
    pub cls_embed: ParamId,
}

impl FlexPosEmbed {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            coord_proj: Linear::new(store, init, &format!("{name}.coord_proj"), 2, dim),
            cls_embed: store.add(format!("{name}.cls_embed"), init.normal(&[dim], 0.02)),
        }
    }

    /// `coords: [G, 2]` in `[0, 1]` -> embeddings `[G + 1, d]`.
    pub fn forward(&self, ctx: &mut Ctx, coords: &Tensor) -> Result<Var> {
        if coords.rank() != 2 || coords.shape()[1] != 2 || coords.shape()[0] == 0 {
            return Err(Error::invalid("flex_pos_embed", format!("coordinates must be [G, 2], got {:?}", coords.shape())));
        }
        if coords.data().iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("flex_pos_embed", "coordinates must lie in [0, 1]"));
        }
        let c = ctx.constant(coords.clone());
        let grid = self.coord_proj.forward(ctx, c)?;
        let d = ctx.tape.shape(grid)[1];
        let cls = ctx.tape.reshape(ctx.p(self.cls_embed), vec![1, d])?;
        ctx.tape.concat(&[cls, grid], 0)
    }
}

/// Learned table of `T_max + 1` temporal embeddings (row 0 is the cls slot).
#[derive(Clone, Debug)]
pub struct TemporalEmbed {
    pub table: ParamId,
    pub t_max: usize,
}

impl TemporalEmbed {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, t_max: usize, dim: usize) -> Self {
        Self {
            table: store.add(name, init.normal(&[t_max + 1, dim], 0.02)),
            t_max,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, steps: usize) -> Result<Var> {
        if steps == 0 || steps > self.t_max {
            return Err(Error::invalid(
                "temporal_embed",
                format!("{steps} time steps exceed the table of {}", self.t_max),
            ));
        }
        ctx.tape.narrow(ctx.p(self.table), 0, 0, steps + 1)
    }
}

/// Long-term weather to per-head score bias: each step's monthly records are
/// averaged, then mapped linearly to one scalar per head. The scalar for
/// step `t` biases every query's score against key `t + 1`; the cls key
/// column stays zero.
#[derive(Clone, Debug)]
pub struct MetBiasProjector {
    pub proj: Linear,
    pub heads: usize,
}

impl MetBiasProjector {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d_y: usize, heads: usize) -> Self {
        Self {
            proj: Linear::new(store, init, &format!("{name}.proj"), d_y, heads),
            heads,
        }
    }

    /// `y_long: [T, N2, d_y]` -> bias `[h, T + 1, T + 1]`.
    pub fn forward(&self, ctx: &mut Ctx, y_long: Var) -> Result<Var> {
        let s = ctx.tape.shape(y_long).to_vec();
        if s.len() != 3 {
            return Err(Error::invalid("met_bias", format!("expected [T, N2, d_y], got {s:?}")));
        }
        if s[1] == 0 {
            return Err(Error::invalid("met_bias", "no long-term records (N2 = 0)"));
        }
        if s[2] != self.proj.in_dim {
            return Err(Error::shape("met_bias", &s, &[self.proj.in_dim]));
        }
        let t = s[0];
        let monthly = ctx.tape.mean_axis(y_long, 1)?;
        let per_step = self.proj.forward(ctx, monthly)?;
        let per_head = ctx.tape.transpose(per_step)?;
        let zeros = ctx.constant(Tensor::zeros(vec![self.heads, 1]));
        let keyed = ctx.tape.concat(&[zeros, per_head], 1)?;
        let row = ctx.tape.reshape(keyed, vec![self.heads, 1, t + 1])?;
        ctx.tape.broadcast_to(row, &[self.heads, t + 1, t + 1])
    }
}

/// Multi-modal transformer over one batch of `(t, g)` cells.
///
/// The wiring depends on which modalities are present:
/// * both: `[cls; visual]` tokens with MM-MHA against projected weather;
/// * visual only: `[cls; visual]` with self-attention only;
/// * weather only: `[cls; projected weather]` with self-attention only.
#[derive(Clone, Debug)]
pub struct MultiModalTransformer {
    pub met_proj: Option<Linear>,
    pub cls: ClsToken,
    pub blocks: Vec<MultiModalBlock>,
    pub norm: LayerNorm,
    pub uses_image: bool,
    pub uses_weather: bool,
    pub d_y: usize,
}

impl MultiModalTransformer {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dim: usize,
        d_y: usize,
        shape: BlockShape,
        uses_image: bool,
        uses_weather: bool,
    ) -> Result<Self> {
        if !uses_image && !uses_weather {
            return Err(Error::Config("multi-modal transformer needs at least one modality".into()));
        }
        let met_proj = uses_weather.then(|| Linear::new(store, init, &format!("{name}.met_proj"), d_y, dim));
        let cls = ClsToken::new(store, init, &format!("{name}.cls"), dim);
        let cross = uses_image && uses_weather;
        let blocks = (0..shape.depth)
            .map(|i| MultiModalBlock::new(store, init, &format!("{name}.blocks.{i}"), dim, shape, cross))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            met_proj,
            cls,
            blocks,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            uses_image,
            uses_weather,
            d_y,
        })
    }

    /// `visual: [B, N_p, d]`, `weather: [B, N1, d_y]` -> cls states `[B, d]`.
    pub fn forward(&self, ctx: &mut Ctx, visual: Option<Var>, weather: Option<Var>) -> Result<Var> {
        let context = match (&self.met_proj, weather) {
            (Some(proj), Some(w)) => {
                let s = ctx.tape.shape(w).to_vec();
                if s.len() != 3 || s[2] != self.d_y {
                    return Err(Error::shape("mm_mha", &s, &[self.d_y]));
                }
                if s[1] == 0 {
                    return Err(Error::invalid("mm_mha", "zero meteorological tokens"));
                }
                Some(proj.forward(ctx, w)?)
            }
            (Some(_), None) => return Err(Error::invalid("mm_mha", "short-term weather input missing")),
            (None, _) => None,
        };
        let tokens = if self.uses_image {
            visual.ok_or_else(|| Error::invalid("mm_mha", "visual tokens missing"))?
        } else {
            context.expect("weather-only wiring always has context")
        };
        let mut x = self.cls.prepend(ctx, tokens)?;
        let cross_context = if self.uses_image { context } else { None };
        for block in &self.blocks {
            x = block.forward(ctx, x, cross_context)?;
        }
        let x = self.norm.forward(ctx, x)?;
        let s = ctx.tape.shape(x).to_vec();
        let head = ctx.tape.narrow(x, 1, 0, 1)?;
        ctx.tape.reshape(head, vec![s[0], s[2]])
    }
}

/// Spatial transformer: `[T, G, d]` grid states to `[T, d]` county states.
#[derive(Clone, Debug)]
pub struct SpatialTransformer {
    pub cls: ClsToken,
    pub pos: FlexPosEmbed,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
}

impl SpatialTransformer {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, shape: BlockShape) -> Result<Self> {
        Ok(Self {
            cls: ClsToken::new(store, init, &format!("{name}.cls"), dim),
            pos: FlexPosEmbed::new(store, init, &format!("{name}.pos"), dim),
            blocks: (0..shape.depth)
                .map(|i| TransformerBlock::new(store, init, &format!("{name}.blocks.{i}"), dim, shape.heads, shape.mlp_dim))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, v_m: Var, coords: &Tensor) -> Result<Var> {
        let s = ctx.tape.shape(v_m).to_vec();
        if s.len() != 3 || s[1] == 0 {
            return Err(Error::invalid("s_mha", format!("expected [T, G >= 1, d], got {s:?}")));
        }
        if coords.shape().first() != Some(&s[1]) {
            return Err(Error::invalid(
                "s_mha",
                format!("{} coordinates for {} grids", coords.shape().first().unwrap_or(&0), s[1]),
            ));
        }
        let x = self.cls.prepend(ctx, v_m)?;
        let pos = self.pos.forward(ctx, coords)?;
        let mut x = ctx.tape.add(x, pos)?;
        for block in &self.blocks {
            x = block.forward(ctx, x, None)?;
        }
        let x = self.norm.forward(ctx, x)?;
        let head = ctx.tape.narrow(x, 1, 0, 1)?;
        ctx.tape.reshape(head, vec![s[0], s[2]])
    }
}

/// Temporal transformer: `[T, d]` states and long-term weather to `[d]`.
#[derive(Clone, Debug)]
pub struct TemporalTransformer {
    pub cls: ClsToken,
    pub embed: TemporalEmbed,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub met_bias: Option<MetBiasProjector>,
}

impl TemporalTransformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        dim: usize,
        t_max: usize,
        d_y: usize,
        shape: BlockShape,
        with_met_bias: bool,
    ) -> Result<Self> {
        Ok(Self {
            cls: ClsToken::new(store, init, &format!("{name}.cls"), dim),
            embed: TemporalEmbed::new(store, init, &format!("{name}.embed"), t_max, dim),
            blocks: (0..shape.depth)
                .map(|i| TransformerBlock::new(store, init, &format!("{name}.blocks.{i}"), dim, shape.heads, shape.mlp_dim))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            met_bias: with_met_bias.then(|| MetBiasProjector::new(store, init, &format!("{name}.met_bias"), d_y, shape.heads)),
        })
    }

    /// `v_s: [T, d]`, `y_long: [T, N2, d_y]`. The long-term input is ignored
    /// when the block was built without a bias projector.
    pub fn forward(&self, ctx: &mut Ctx, v_s: Var, y_long: Option<Var>) -> Result<Var> {
        let s = ctx.tape.shape(v_s).to_vec();
        if s.len() != 2 || s[0] == 0 {
            return Err(Error::invalid("t_mha", format!("expected [T >= 1, d], got {s:?}")));
        }
        let (t, d) = (s[0], s[1]);
        let bias = match (&self.met_bias, y_long) {
            (Some(proj), Some(y)) => {
                if ctx.tape.shape(y).first() != Some(&t) {
                    return Err(Error::shape("t_mha", &s, ctx.tape.shape(y)));
                }
                Some(proj.forward(ctx, y)?)
            }
            (Some(_), None) => return Err(Error::invalid("t_mha", "long-term weather input missing")),
            (None, _) => None,
        };
        let x = ctx.tape.reshape(v_s, vec![1, t, d])?;
        let x = self.cls.prepend(ctx, x)?;
        let emb = self.embed.forward(ctx, t)?;
        let mut x = ctx.tape.add(x, emb)?;
        for block in &self.blocks {
            x = block.forward(ctx, x, bias)?;
        }
        let x = self.norm.forward(ctx, x)?;
        let head = ctx.tape.narrow(x, 1, 0, 1)?;
        ctx.tape.reshape(head, vec![d])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, random_tensor, GradCheckOptions};

    /// Per-element loops-and-exp reference for one head.
    fn reference_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
        let (nq, dh) = (q.shape()[0], q.shape()[1]);
        let (nk, dv) = (k.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; nq * dv];
        for i in 0..nq {
            let scores: Vec<f64> = (0..nk)
                .map(|j| (0..dh).map(|c| q.get(&[i, c]) * k.get(&[j, c])).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let weights: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let total: f64 = weights.iter().sum();
            for j in 0..nk {
                for c in 0..dv {
                    out[i * dv + c] += weights[j] / total * v.get(&[j, c]);
                }
            }
        }
        out
    }

    #[test]
    fn scaled_attention_matches_reference() {
        let q = random_tensor(&[3, 4], 1);
        let k = random_tensor(&[5, 4], 2);
        let v = random_tensor(&[5, 4], 3);
        let expected = reference_attention(&q, &k, &v);
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
        let out = scaled_attention(&mut tape, qv, kv, vv, None).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_average_values_and_single_key_copies() {
        let mut tape = Tape::new();
        let q = tape.constant(random_tensor(&[1, 3, 4], 5));
        let krow = random_tensor(&[1, 1, 4], 6);
        let k = tape.constant(Tensor::from_fn(vec![1, 5, 4], |i| krow.data()[i % 4]));
        let v_val = random_tensor(&[1, 5, 2], 7);
        let v = tape.constant(v_val.clone());
        let out = scaled_attention(&mut tape, q, k, v, None).unwrap();
        for i in 0..3 {
            for c in 0..2 {
                let mean: f64 = (0..5).map(|j| v_val.get(&[0, j, c])).sum::<f64>() / 5.0;
                assert!((tape.value(out).get(&[0, i, c]) - mean).abs() < 1e-12);
            }
        }
        let k1 = tape.constant(random_tensor(&[1, 1, 4], 8));
        let v1_val = random_tensor(&[1, 1, 2], 9);
        let v1 = tape.constant(v1_val.clone());
        let out = scaled_attention(&mut tape, q, k1, v1, None).unwrap();
        for i in 0..3 {
            for c in 0..2 {
                assert_eq!(tape.value(out).get(&[0, i, c]), v1_val.get(&[0, 0, c]));
            }
        }
    }

    #[test]
    fn zero_bias_is_bitwise_equal_to_no_bias() {
        let mut tape = Tape::new();
        let q = tape.constant(random_tensor(&[2, 3, 4], 1));
        let k = tape.constant(random_tensor(&[2, 5, 4], 2));
        let v = tape.constant(random_tensor(&[2, 5, 4], 3));
        let zero = tape.constant(Tensor::zeros(vec![3, 5]));
        let a = scaled_attention(&mut tape, q, k, v, None).unwrap();
        let b = scaled_attention(&mut tape, q, k, v, Some(zero)).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn probability_rows_sum_to_one_and_row_shift_is_invisible() {
        let mut tape = Tape::new();
        let q = tape.constant(random_tensor(&[2, 4, 6, 3], 11).map(|v| v * 5.0));
        let k = tape.constant(random_tensor(&[2, 4, 7, 3], 12).map(|v| v * 5.0));
        let bias_val = random_tensor(&[4, 6, 7], 13);
        let bias = tape.constant(bias_val.clone());
        let p = attention_probs(&mut tape, q, k, Some(bias)).unwrap();
        for row in tape.value(p).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = tape.constant(Tensor::from_fn(vec![4, 6, 7], |i| bias_val.data()[i] + (i / 7) as f64 * 0.37));
        let p2 = attention_probs(&mut tape, q, k, Some(shifted)).unwrap();
        assert!(tape.value(p).max_abs_diff(tape.value(p2)) < 1e-12);
    }

    #[test]
    fn attention_rejects_mismatched_heads() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::ones(vec![2, 3, 4]));
        let k = tape.constant(Tensor::ones(vec![3, 5, 4]));
        assert!(scaled_attention(&mut tape, q, k, k, None).is_err());
        let nan = tape.constant(Tensor::full(vec![2, 3, 4], f64::NAN));
        let k = tape.constant(Tensor::ones(vec![2, 5, 4]));
        assert!(scaled_attention(&mut tape, nan, k, k, None).is_err());
    }

    fn mm_fixture(seed: u64) -> (ParamStore, MultiModalTransformer) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let shape = BlockShape {
            depth: 1,
            heads: 2,
            mlp_dim: 16,
        };
        let mm = MultiModalTransformer::new(&mut store, &mut init, "mm", 8, 3, shape, true, true).unwrap();
        (store, mm)
    }

    #[test]
    fn mm_attention_matches_composition_oracle() {
        // (T, G, N_p, N1, d) = (1, 1, 4, 3, 8): a single MM-MHA sublayer
        // against linear projections and the per-head reference kernel.
        let (store, mm) = mm_fixture(21);
        let (_, attn) = mm.blocks[0].cross.as_ref().unwrap();
        let proj = mm.met_proj.as_ref().unwrap();
        let visual = random_tensor(&[1, 5, 8], 22);
        let weather = random_tensor(&[1, 3, 3], 23);

        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::eval(&mut tape, &vars);
        let vis = ctx.constant(visual.clone());
        let w = ctx.constant(weather.clone());
        let context = proj.forward(&mut ctx, w).unwrap();
        let out = attn.forward(&mut ctx, vis, context, None).unwrap();
        let got = tape.value(out).clone();

        let matmul = |x: &Tensor, name: &str| -> Tensor {
            let w = store.by_name(&format!("{name}.weight")).unwrap();
            let b = store.by_name(&format!("{name}.bias")).unwrap();
            let (rows, inner, cols) = (x.len() / w.shape()[0], w.shape()[0], w.shape()[1]);
            Tensor::from_fn(vec![rows, cols], |i| {
                let (r, c) = (i / cols, i % cols);
                b.data()[c] + (0..inner).map(|p| x.data()[r * inner + p] * w.get(&[p, c])).sum::<f64>()
            })
        };
        let ctx_tokens = matmul(&weather, "mm.met_proj");
        let q = matmul(&visual, "mm.blocks.0.mm_attn.w_q");
        let k = matmul(&ctx_tokens, "mm.blocks.0.mm_attn.w_k");
        let v = matmul(&ctx_tokens, "mm.blocks.0.mm_attn.w_v");
        let mut merged = vec![0.0; 5 * 8];
        for h in 0..2 {
            let cols: Vec<usize> = (h * 4..h * 4 + 4).collect();
            let head = reference_attention(&q.select(1, &cols).unwrap(), &k.select(1, &cols).unwrap(), &v.select(1, &cols).unwrap());
            for i in 0..5 {
                for c in 0..4 {
                    merged[i * 8 + h * 4 + c] = head[i * 4 + c];
                }
            }
        }
        let expected = matmul(&Tensor::new(vec![5, 8], merged).unwrap(), "mm.blocks.0.mm_attn.w_o");
        for (a, b) in got.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn mm_single_weather_token_gives_identical_rows() {
        let (store, mm) = mm_fixture(31);
        let (_, attn) = mm.blocks[0].cross.as_ref().unwrap();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::eval(&mut tape, &vars);
        let vis = ctx.constant(random_tensor(&[1, 5, 8], 32));
        let context = ctx.constant(random_tensor(&[1, 1, 8], 33));
        let out = attn.forward(&mut ctx, vis, context, None).unwrap();
        let rows: Vec<&[f64]> = tape.value(out).data().chunks(8).collect();
        for r in &rows[1..] {
            assert_eq!(*r, rows[0]);
        }
        // Equal weather rows: uniform attention, queries irrelevant.
        let mut ctx = Ctx::eval(&mut tape, &vars);
        let row = random_tensor(&[8], 34);
        let same = ctx.constant(Tensor::from_fn(vec![1, 4, 8], |i| row.data()[i % 8]));
        let vis2 = ctx.constant(random_tensor(&[1, 5, 8], 35));
        let a = attn.forward(&mut ctx, vis, same, None).unwrap();
        let b = attn.forward(&mut ctx, vis2, same, None).unwrap();
        assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-12);
    }

    #[test]
    fn mm_transformer_errors() {
        let (store, mm) = mm_fixture(41);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::eval(&mut tape, &vars);
        let vis = ctx.constant(random_tensor(&[2, 4, 8], 1));
        let bad_dy = ctx.constant(random_tensor(&[2, 3, 5], 2));
        assert!(mm.forward(&mut ctx, Some(vis), Some(bad_dy)).is_err());
        let empty = ctx.constant(Tensor::zeros(vec![2, 0, 3]));
        assert!(mm.forward(&mut ctx, Some(vis), Some(empty)).is_err());
        let ok = ctx.constant(random_tensor(&[2, 3, 3], 3));
        let out = mm.forward(&mut ctx, Some(vis), Some(ok)).unwrap();
        assert_eq!(ctx.tape.shape(out), &[2, 8]);
    }

    fn spatial_fixture() -> (ParamStore, SpatialTransformer) {
        let mut store = ParamStore::new();
        let mut init = Init::new(5);
        let shape = BlockShape {
            depth: 2,
            heads: 2,
            mlp_dim: 16,
        };
        let sp = SpatialTransformer::new(&mut store, &mut init, "spatial", 8, shape).unwrap();
        (store, sp)
    }

    fn run_spatial(store: &ParamStore, sp: &SpatialTransformer, v: &Tensor, coords: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::eval(&mut tape, &vars);
        let x = ctx.constant(v.clone());
        let out = sp.forward(&mut ctx, x, coords).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn spatial_single_grid_and_coordinate_count() {
        let (store, sp) = spatial_fixture();
        let v = random_tensor(&[3, 1, 8], 1);
        let coords = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let out = run_spatial(&store, &sp, &v, &coords);
        assert_eq!(out.shape(), &[3, 8]);
        assert!(out.all_finite());

        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::eval(&mut tape, &vars);
        let x = ctx.constant(random_tensor(&[3, 2, 8], 2));
        assert!(sp.forward(&mut ctx, x, &coords).is_err());
    }

    #[test]
    fn spatial_joint_permutation_is_stable() {
        let (store, sp) = spatial_fixture();
        let v = random_tensor(&[2, 4, 8], 3);
        let coords = Tensor::new(vec![4, 2], vec![0.25, 0.25, 0.25, 0.75, 0.75, 0.25, 0.75, 0.75]).unwrap();
        let perm = [2, 0, 3, 1];
        let out = run_spatial(&store, &sp, &v, &coords);
        let out_p = run_spatial(&store, &sp, &v.select(1, &perm).unwrap(), &coords.select(0, &perm).unwrap());
        assert!(out.max_abs_diff(&out_p) < 1e-9);
        // With coordinates carrying no signal, permuting grids alone is
        // also invisible at the cls readout.
        let mut store = store;
        let w = sp.pos.coord_proj.weight;
        let b = sp.pos.coord_proj.bias.unwrap();
        store.set(w, Tensor::zeros(vec![2, 8])).unwrap();
        store.set(b, Tensor::zeros(vec![8])).unwrap();
        store.set(sp.pos.cls_embed, Tensor::zeros(vec![8])).unwrap();
        let a = run_spatial(&store, &sp, &v, &coords);
        let c = run_spatial(&store, &sp, &v.select(1, &perm).unwrap(), &coords);
        assert!(a.max_abs_diff(&c) < 1e-9);
    }

    fn temporal_fixture(bias: bool) -> (ParamStore, TemporalTransformer) {
        let mut store = ParamStore::new();
        let mut init = Init::new(9);
        let shape = BlockShape {
            depth: 2,
            heads: 2,
            mlp_dim: 16,
        };
        let tt = TemporalTransformer::new(&mut store, &mut init, "temporal", 8, 4, 3, shape, bias).unwrap();
        (store, tt)
    }

    fn run_temporal(store: &ParamStore, tt: &TemporalTransformer, v: &Tensor, y: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::eval(&mut tape, &vars);
        let x = ctx.constant(v.clone());
        let yv = y.map(|y| ctx.constant(y.clone()));
        let out = tt.forward(&mut ctx, x, yv)?;
        Ok(tape.value(out).clone())
    }

    #[test]
    fn temporal_zero_projection_equals_plain_attention() {
        let (mut store, tt) = temporal_fixture(true);
        let proj = &tt.met_bias.as_ref().unwrap().proj;
        store.set(proj.weight, Tensor::zeros(vec![3, 2])).unwrap();
        store.set(proj.bias.unwrap(), Tensor::zeros(vec![2])).unwrap();
        let v = random_tensor(&[3, 8], 1);
        let y = random_tensor(&[3, 5, 3], 2);
        let biased = run_temporal(&store, &tt, &v, Some(&y)).unwrap();
        let plain_tt = TemporalTransformer {
            met_bias: None,
            ..tt.clone()
        };
        let plain = run_temporal(&store, &plain_tt, &v, None).unwrap();
        assert_eq!(biased, plain);
    }

    #[test]
    fn temporal_bias_shape_and_errors() {
        let (store, tt) = temporal_fixture(true);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape);
        let mut ctx = Ctx::eval(&mut tape, &vars);
        let y = ctx.constant(random_tensor(&[3, 5, 3], 4));
        let bias = tt.met_bias.as_ref().unwrap().forward(&mut ctx, y).unwrap();
        assert_eq!(tape.shape(bias), &[2, 4, 4]);
        let b = tape.value(bias);
        for h in 0..2 {
            for i in 0..4 {
                assert_eq!(b.get(&[h, i, 0]), 0.0);
                for j in 1..4 {
                    assert_eq!(b.get(&[h, i, j]), b.get(&[h, 0, j]));
                }
            }
        }
        let v1 = random_tensor(&[1, 8], 5);
        let out = run_temporal(&store, &tt, &v1, Some(&random_tensor(&[1, 5, 3], 6))).unwrap();
        assert_eq!(out.shape(), &[8]);
        assert!(run_temporal(&store, &tt, &random_tensor(&[5, 8], 7), Some(&random_tensor(&[5, 5, 3], 8))).is_err());
        assert!(run_temporal(&store, &tt, &v1, Some(&Tensor::zeros(vec![1, 0, 3]))).is_err());
    }

    #[test]
    fn gradients_of_all_three_mechanisms() {
        let opts = GradCheckOptions::default();
        // MM-MHA transformer, T*G = 2 cells, N_p = 4, N1 = 3, d = 8.
        let (store, mm) = mm_fixture(51);
        let vis = random_tensor(&[2, 4, 8], 52);
        let wea = random_tensor(&[2, 3, 3], 53);
        let names: Vec<String> = store.names().to_vec();
        let report = finite_diff_check(
            |tape, p| {
                let mut ctx = Ctx::eval(tape, p);
                let v = ctx.constant(vis.clone());
                let w = ctx.constant(wea.clone());
                let out = mm.forward(&mut ctx, Some(v), Some(w))?;
                let sq = ctx.tape.mul(out, out)?;
                Ok(ctx.tape.sum(sq))
            },
            store.values(),
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?} {:?}", report.worst.map(|(i, _)| &names[i]));

        let (store, sp) = spatial_fixture();
        let v = random_tensor(&[2, 3, 8], 54);
        let coords = Tensor::new(vec![3, 2], vec![0.1, 0.2, 0.5, 0.5, 0.9, 0.3]).unwrap();
        let report = finite_diff_check(
            |tape, p| {
                let mut ctx = Ctx::eval(tape, p);
                let x = ctx.constant(v.clone());
                let out = sp.forward(&mut ctx, x, &coords)?;
                let sq = ctx.tape.mul(out, out)?;
                Ok(ctx.tape.sum(sq))
            },
            store.values(),
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");

        let (store, tt) = temporal_fixture(true);
        let v = random_tensor(&[4, 8], 55);
        let y = random_tensor(&[4, 4, 3], 56);
        let report = finite_diff_check(
            |tape, p| {
                let mut ctx = Ctx::eval(tape, p);
                let x = ctx.constant(v.clone());
                let yv = ctx.constant(y.clone());
                let out = tt.forward(&mut ctx, x, Some(yv))?;
                let sq = ctx.tape.mul(out, out)?;
                Ok(ctx.tape.sum(sq))
            },
            store.values(),
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
