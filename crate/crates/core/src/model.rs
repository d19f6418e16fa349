//! The full yield model: visual backbone and multi-modal transformer per
//! (time, grid) cell, spatial transformer per time step, temporal
//! transformer per county-year, and a linear head.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{BlockShape, MultiModalTransformer, SpatialTransformer, TemporalTransformer};
use crate::autograd::Var;
use crate::backbone::{Backbone, BackboneConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Linear, ParamStore};
use crate::tensor::Tensor;

/// Component switches mirroring the ablation study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// No long-term weather: temporal attention runs without score bias.
    pub mask_long_term: bool,
    /// No short-term weather: multi-modal blocks attend over image tokens only.
    pub mask_short_term: bool,
    /// No imagery: multi-modal blocks attend over projected weather tokens.
    pub mask_image: bool,
    /// Mean over grids instead of the spatial transformer.
    pub pool_spatial: bool,
    /// Mean over time instead of the temporal transformer.
    pub pool_temporal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MMSTConfig {
    pub preset: String,
    pub t: usize,
    pub g_max: usize,
    pub n1: usize,
    pub n2: usize,
    pub d_y: usize,
    pub d_z: usize,
    pub d: usize,
    pub t_max: usize,
    pub backbone: BackboneConfig,
    pub multimodal: BlockShape,
    pub spatial: BlockShape,
    pub temporal: BlockShape,
    pub dropout: f64,
    #[serde(default)]
    pub ablation: Ablation,
}

impl MMSTConfig {
    pub const PRESETS: [&'static str; 3] = ["paper", "tiny64", "nano64"];

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "tiny64" => Ok(Self::tiny64()),
            "nano64" => Ok(Self::nano64()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of {:?})",
                Self::PRESETS
            ))),
        }
    }

    pub fn paper() -> Self {
        let shape = BlockShape {
            depth: 4,
            heads: 8,
            mlp_dim: 2048,
        };
        Self {
            preset: "paper".into(),
            t: 6,
            g_max: 64,
            n1: 14,
            n2: 36,
            d_y: 9,
            d_z: 1,
            d: 512,
            t_max: 32,
            backbone: BackboneConfig::paper(),
            multimodal: BlockShape { depth: 2, ..shape },
            spatial: shape,
            temporal: shape,
            dropout: 0.1,
            ablation: Ablation::default(),
        }
    }

    pub fn tiny64() -> Self {
        let shape = BlockShape {
            depth: 2,
            heads: 4,
            mlp_dim: 256,
        };
        Self {
            preset: "tiny64".into(),
            t: 6,
            g_max: 16,
            n1: 14,
            n2: 36,
            d_y: 9,
            d_z: 1,
            d: 128,
            t_max: 16,
            backbone: BackboneConfig::tiny64(),
            multimodal: BlockShape { depth: 1, ..shape },
            spatial: shape,
            temporal: shape,
            dropout: 0.1,
            ablation: Ablation::default(),
        }
    }

    pub fn nano64() -> Self {
        let shape = BlockShape {
            depth: 1,
            heads: 4,
            mlp_dim: 128,
        };
        Self {
            preset: "nano64".into(),
            t: 4,
            g_max: 16,
            n1: 7,
            n2: 36,
            d_y: 9,
            d_z: 1,
            d: 64,
            t_max: 16,
            backbone: BackboneConfig::nano64(),
            multimodal: shape,
            spatial: shape,
            temporal: shape,
            dropout: 0.1,
            ablation: Ablation::default(),
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.ablation.mask_short_term && self.ablation.mask_image {
            return bad("mask_short_term and mask_image cannot both be set".into());
        }
        for (name, v) in [("t", self.t), ("g_max", self.g_max), ("n1", self.n1), ("n2", self.n2), ("d_y", self.d_y), ("d_z", self.d_z), ("d", self.d)] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.t > self.t_max {
            return bad(format!("t = {} exceeds t_max = {}", self.t, self.t_max));
        }
        for (name, s) in [("multimodal", self.multimodal), ("spatial", self.spatial), ("temporal", self.temporal)] {
            if s.depth == 0 || s.mlp_dim == 0 || s.heads == 0 || self.d % s.heads != 0 {
                return bad(format!("{name} blocks: {s:?} incompatible with d = {}", self.d));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.backbone.validate(self.d)
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.backbone.height, self.backbone.width, self.backbone.channels]
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Parameter-name prefixes trained during contrastive pre-training.
pub const PRETRAIN_PREFIXES: [&str; 2] = ["backbone.", "mm."];

/// Separate initialization stream per component, so a component's initial
/// weights do not depend on which other components exist.
fn component_init(seed: u64, component: u64) -> Init {
    Init::new(seed ^ component.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Clone, Debug)]
pub struct MMSTModel {
    pub config: MMSTConfig,
    pub params: ParamStore,
    pub backbone: Option<Backbone>,
    pub multimodal: MultiModalTransformer,
    pub spatial: Option<SpatialTransformer>,
    pub temporal: Option<TemporalTransformer>,
    pub head: Linear,
}

impl MMSTModel {
    pub fn new(config: &MMSTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let ab = config.ablation;
        let mut params = ParamStore::new();
        let backbone = if ab.mask_image {
            None
        } else {
            Some(Backbone::new(&mut params, &mut component_init(seed, 1), "backbone", &config.backbone)?)
        };
        let multimodal = MultiModalTransformer::new(
            &mut params,
            &mut component_init(seed, 2),
            "mm",
            config.d,
            config.d_y,
            config.multimodal,
            !ab.mask_image,
            !ab.mask_short_term,
        )?;
        let spatial = if ab.pool_spatial {
            None
        } else {
            Some(SpatialTransformer::new(&mut params, &mut component_init(seed, 3), "spatial", config.d, config.spatial)?)
        };
        let temporal = if ab.pool_temporal {
            None
        } else {
            Some(TemporalTransformer::new(
                &mut params,
                &mut component_init(seed, 4),
                "temporal",
                config.d,
                config.t_max,
                config.d_y,
                config.temporal,
                !ab.mask_long_term,
            )?)
        };
        let head = Linear::new(&mut params, &mut component_init(seed, 5), "head", config.d, config.d_z);
        Ok(Self {
            config: config.clone(),
            params,
            backbone,
            multimodal,
            spatial,
            temporal,
            head,
        })
    }

    /// Per-cell multi-modal states from flattened cells:
    /// `images: [B, H, W, C]`, `short_term: [B, N1, d_y]` -> `[B, d]`.
    pub fn multimodal_cells(&self, ctx: &mut Ctx, images: Option<&Tensor>, short_term: Option<&Tensor>) -> Result<Var> {
        let visual = match &self.backbone {
            Some(bb) => {
                let x = images.ok_or_else(|| Error::invalid("multimodal_forward", "images missing"))?;
                let xv = ctx.constant(x.clone());
                Some(bb.forward(ctx, xv)?)
            }
            None => None,
        };
        let weather = match (self.multimodal.uses_weather, short_term) {
            (true, Some(y)) => {
                let s = y.shape();
                if s.len() != 3 || s[1] != self.config.n1 {
                    return Err(Error::shape("multimodal_forward", s, &[self.config.n1, self.config.d_y]));
                }
                Some(ctx.constant(y.clone()))
            }
            (true, None) => return Err(Error::invalid("multimodal_forward", "short-term weather missing")),
            (false, _) => None,
        };
        self.multimodal.forward(ctx, visual, weather)
    }

    /// `x: [T, G, H, W, C]`, `y_s: [T, G, N1, d_y]` -> `v_m: [T, G, d]`.
    pub fn multimodal_forward(&self, ctx: &mut Ctx, x: &Tensor, y_s: &Tensor) -> Result<Var> {
        let (t, g) = self.check_cells(x, y_s)?;
        let images = x.reshape(flat_cells(x.shape(), t * g))?;
        let weather = y_s.reshape(flat_cells(y_s.shape(), t * g))?;
        let v = self.multimodal_cells(ctx, Some(&images), Some(&weather))?;
        ctx.tape.reshape(v, vec![t, g, self.config.d])
    }

    fn check_cells(&self, x: &Tensor, y_s: &Tensor) -> Result<(usize, usize)> {
        let c = &self.config;
        let [h, w, ch] = c.image_shape();
        let xs = x.shape();
        if xs.len() != 5 || xs[2..] != [h, w, ch] {
            return Err(Error::shape("multimodal_forward", xs, &[h, w, ch]));
        }
        let (t, g) = (xs[0], xs[1]);
        if y_s.shape() != [t, g, c.n1, c.d_y] {
            return Err(Error::shape("multimodal_forward", y_s.shape(), &[t, g, c.n1, c.d_y]));
        }
        if g == 0 || g > c.g_max {
            return Err(Error::invalid("multimodal_forward", format!("G = {g} outside 1..={}", c.g_max)));
        }
        if t == 0 || t > c.t_max {
            return Err(Error::invalid("multimodal_forward", format!("T = {t} outside 1..={}", c.t_max)));
        }
        Ok((t, g))
    }

    /// `v_m: [T, G, d]`, `coords: [G, 2]` -> `v_s: [T, d]`.
    pub fn spatial_forward(&self, ctx: &mut Ctx, v_m: Var, coords: &Tensor) -> Result<Var> {
        match &self.spatial {
            Some(s) => s.forward(ctx, v_m, coords),
            None => ctx.tape.mean_axis(v_m, 1),
        }
    }

    /// `v_s: [T, d]`, `y_l: [T, N2, d_y]` -> `v_t: [d]`.
    pub fn temporal_forward(&self, ctx: &mut Ctx, v_s: Var, y_l: &Tensor) -> Result<Var> {
        let c = &self.config;
        let t = ctx.tape.shape(v_s)[0];
        if y_l.shape() != [t, c.n2, c.d_y] {
            return Err(Error::shape("temporal_forward", y_l.shape(), &[t, c.n2, c.d_y]));
        }
        match &self.temporal {
            Some(tt) => {
                let y = tt.met_bias.is_some().then(|| ctx.constant(y_l.clone()));
                tt.forward(ctx, v_s, y)
            }
            None => ctx.tape.mean_axis(v_s, 0),
        }
    }

    /// Single-sample prediction `[d_z]`.
    pub fn predict(&self, ctx: &mut Ctx, sample: &Sample) -> Result<Var> {
        let out = self.predict_batch(ctx, std::slice::from_ref(sample), &[])?;
        ctx.tape.reshape(out, vec![self.config.d_z])
    }

    /// Predictions `[S, d_z]` for a batch. `masks[i][g]` marks grid `g` of
    /// sample `i` as real; padded grids are dropped before the forward pass,
    /// so a padded sample gives the same output as its unpadded original.
    /// An empty `masks` slice treats every grid as real.
    pub fn predict_batch(&self, ctx: &mut Ctx, samples: &[Sample], masks: &[Vec<bool>]) -> Result<Var> {
        if samples.is_empty() {
            return Err(Error::invalid("predict", "empty batch"));
        }
        if !masks.is_empty() && masks.len() != samples.len() {
            return Err(Error::invalid("predict", "one grid mask per sample required"));
        }
        let c = &self.config;
        let mut images = Vec::new();
        let mut weather = Vec::new();
        let mut layout = Vec::with_capacity(samples.len());
        let mut trimmed = Vec::with_capacity(samples.len());
        for (i, s) in samples.iter().enumerate() {
            let g_total = s.x.shape().get(1).copied().unwrap_or(0);
            let valid: Vec<usize> = match masks.get(i) {
                Some(m) if m.len() != g_total => {
                    return Err(Error::invalid("predict", format!("mask of {} for {g_total} grids", m.len())));
                }
                Some(m) => (0..g_total).filter(|&g| m[g]).collect(),
                None => (0..g_total).collect(),
            };
            let (x, y_s, coords) = if valid.len() == g_total {
                (s.x.clone(), s.y_s.clone(), s.coords.clone())
            } else {
                (s.x.select(1, &valid)?, s.y_s.select(1, &valid)?, s.coords.select(0, &valid)?)
            };
            let (t, g) = self.check_cells(&x, &y_s)?;
            images.extend_from_slice(x.data());
            weather.extend_from_slice(y_s.data());
            layout.push((t, g));
            trimmed.push(coords);
        }
        let cells: usize = layout.iter().map(|(t, g)| t * g).sum();
        let [h, w, ch] = c.image_shape();
        let images = Tensor::new(vec![cells, h, w, ch], images)?;
        let weather = Tensor::new(vec![cells, c.n1, c.d_y], weather)?;
        let v_cells = self.multimodal_cells(ctx, Some(&images), Some(&weather))?;

        let mut offset = 0;
        let mut rows = Vec::with_capacity(samples.len());
        for ((s, &(t, g)), coords) in samples.iter().zip(&layout).zip(&trimmed) {
            let part = ctx.tape.narrow(v_cells, 0, offset, t * g)?;
            offset += t * g;
            let v_m = ctx.tape.reshape(part, vec![t, g, c.d])?;
            let v_s = self.spatial_forward(ctx, v_m, coords)?;
            let v_t = self.temporal_forward(ctx, v_s, &s.y_l)?;
            rows.push(ctx.tape.reshape(v_t, vec![1, c.d])?);
        }
        let stacked = ctx.tape.concat(&rows, 0)?;
        self.head.forward(ctx, stacked)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.names().to_vec()
    }
}

fn flat_cells(shape: &[usize], cells: usize) -> Vec<usize> {
    let mut s = vec![cells];
    s.extend_from_slice(&shape[2..]);
    s
}

/// Parameter names present in `reference` but not `variant`, and the reverse.
pub fn param_name_diff(reference: &MMSTModel, variant: &MMSTModel) -> (Vec<String>, Vec<String>) {
    let a: std::collections::BTreeSet<_> = reference.params.names().iter().cloned().collect();
    let b: std::collections::BTreeSet<_> = variant.params.names().iter().cloned().collect();
    (a.difference(&b).cloned().collect(), b.difference(&a).cloned().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::gradcheck::{finite_diff_check, random_tensor, GradCheckOptions};

    fn sample(cfg: &MMSTConfig, t: usize, g: usize, seed: u64) -> Sample {
        let [h, w, c] = cfg.image_shape();
        let coords = Tensor::from_fn(vec![g, 2], |i| ((i / 2) as f64 + 0.5) / g as f64 * if i % 2 == 0 { 1.0 } else { 0.5 });
        Sample {
            county: "c000".into(),
            year: 2020,
            x: random_tensor(&[t, g, h, w, c], seed).map(|v| 0.5 + 0.5 * v),
            y_s: random_tensor(&[t, g, cfg.n1, cfg.d_y], seed + 1),
            y_l: random_tensor(&[t, cfg.n2, cfg.d_y], seed + 2),
            z: Tensor::new(vec![1], vec![0.0]).unwrap(),
            coords,
        }
    }

    fn eval_predict(model: &MMSTModel, s: &Sample) -> Tensor {
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let mut ctx = Ctx::eval(&mut tape, &vars);
        let out = model.predict(&mut ctx, s).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn shapes_on_desk_preset() {
        let cfg = MMSTConfig::tiny64();
        let model = MMSTModel::new(&cfg, 0).unwrap();
        let s = sample(&cfg, 2, 3, 1);
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let mut ctx = Ctx::eval(&mut tape, &vars);
        let v_m = model.multimodal_forward(&mut ctx, &s.x, &s.y_s).unwrap();
        assert_eq!(ctx.tape.shape(v_m), &[2, 3, 128]);
        let v_s = model.spatial_forward(&mut ctx, v_m, &s.coords).unwrap();
        assert_eq!(ctx.tape.shape(v_s), &[2, 128]);
        let v_t = model.temporal_forward(&mut ctx, v_s, &s.y_l).unwrap();
        assert_eq!(ctx.tape.shape(v_t), &[128]);
        let z = model.predict(&mut ctx, &s).unwrap();
        assert_eq!(ctx.tape.shape(z), &[1]);
    }

    #[test]
    fn ablation_conflict_and_validation() {
        let cfg = MMSTConfig::tiny64().with_ablation(Ablation {
            mask_short_term: true,
            mask_image: true,
            ..Default::default()
        });
        assert!(matches!(MMSTModel::new(&cfg, 0), Err(Error::Config(_))));
        assert!(MMSTConfig::preset("huge").is_err());
        let mut cfg = MMSTConfig::tiny64();
        cfg.d = 96;
        assert!(cfg.validate().is_err());
        MMSTConfig::paper().validate().unwrap();
        MMSTConfig::nano64().validate().unwrap();
    }

    #[test]
    fn zero_head_returns_bias() {
        let cfg = MMSTConfig::nano64();
        let mut model = MMSTModel::new(&cfg, 1).unwrap();
        model.params.set(model.head.weight, Tensor::zeros(vec![64, 1])).unwrap();
        model.params.set(model.head.bias.unwrap(), Tensor::new(vec![1], vec![3.5]).unwrap()).unwrap();
        for seed in [1, 7] {
            assert_eq!(eval_predict(&model, &sample(&cfg, 2, 2, seed)).data(), &[3.5]);
        }
    }

    #[test]
    fn pooling_ablations() {
        let cfg = MMSTConfig::nano64().with_ablation(Ablation {
            pool_spatial: true,
            pool_temporal: true,
            ..Default::default()
        });
        let model = MMSTModel::new(&cfg, 2).unwrap();
        let s = sample(&cfg, 3, 1, 3);
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let mut ctx = Ctx::eval(&mut tape, &vars);
        let v_m = model.multimodal_forward(&mut ctx, &s.x, &s.y_s).unwrap();
        let v_s = model.spatial_forward(&mut ctx, v_m, &s.coords).unwrap();
        let v_t = model.temporal_forward(&mut ctx, v_s, &s.y_l).unwrap();
        let (vm, vs, vt) = (tape.value(v_m).clone(), tape.value(v_s).clone(), tape.value(v_t).clone());
        assert_eq!(vs.data(), vm.data());
        for k in 0..64 {
            let mean = (0..3).map(|t| vs.get(&[t, k])).sum::<f64>() / 3.0;
            assert!((vt.get(&[k]) - mean).abs() < 1e-12);
        }
        let s = sample(&cfg, 2, 3, 4);
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let mut ctx = Ctx::eval(&mut tape, &vars);
        let v_m = model.multimodal_forward(&mut ctx, &s.x, &s.y_s).unwrap();
        let v_s = model.spatial_forward(&mut ctx, v_m, &s.coords).unwrap();
        let (vm, vs) = (tape.value(v_m), tape.value(v_s));
        for t in 0..2 {
            for k in 0..64 {
                let mean = (0..3).map(|g| vm.get(&[t, g, k])).sum::<f64>() / 3.0;
                assert!((vs.get(&[t, k]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn long_term_mask_equals_zero_projection() {
        let cfg = MMSTConfig::nano64();
        let mut full = MMSTModel::new(&cfg, 5).unwrap();
        let masked = MMSTModel::new(
            &cfg.clone().with_ablation(Ablation {
                mask_long_term: true,
                ..Default::default()
            }),
            5,
        )
        .unwrap();
        let proj = full.temporal.as_ref().unwrap().met_bias.as_ref().unwrap().proj.clone();
        full.params.set(proj.weight, Tensor::zeros(vec![9, 4])).unwrap();
        full.params.set(proj.bias.unwrap(), Tensor::zeros(vec![4])).unwrap();
        let s = sample(&cfg, 3, 2, 6);
        assert_eq!(eval_predict(&full, &s), eval_predict(&masked, &s));
    }

    #[test]
    fn structural_diffs() {
        let cfg = MMSTConfig::nano64();
        let full = MMSTModel::new(&cfg, 0).unwrap();
        let variant = |ab: Ablation| MMSTModel::new(&cfg.clone().with_ablation(ab), 0).unwrap();
        let all_start = |names: &[String], prefixes: &[&str]| names.iter().all(|n| prefixes.iter().any(|p| n.starts_with(p)));

        let (removed, added) = param_name_diff(&full, &variant(Ablation { mask_long_term: true, ..Default::default() }));
        assert!(added.is_empty() && !removed.is_empty() && all_start(&removed, &["temporal.met_bias."]));

        let (removed, added) = param_name_diff(&full, &variant(Ablation { pool_spatial: true, ..Default::default() }));
        assert!(added.is_empty() && all_start(&removed, &["spatial."]));
        assert!(removed.iter().any(|n| n == "spatial.cls"));

        let (removed, added) = param_name_diff(&full, &variant(Ablation { pool_temporal: true, ..Default::default() }));
        assert!(added.is_empty() && all_start(&removed, &["temporal."]));

        let (removed, added) = param_name_diff(&full, &variant(Ablation { mask_short_term: true, ..Default::default() }));
        assert!(added.is_empty());
        assert!(removed.iter().any(|n| n == "mm.met_proj.weight"));
        assert!(all_start(&removed, &["mm.met_proj.", "mm.blocks.0.mm_attn.", "mm.blocks.0.norm_cross."]));

        let (removed, added) = param_name_diff(&full, &variant(Ablation { mask_image: true, ..Default::default() }));
        assert!(added.is_empty());
        assert!(all_start(&removed, &["backbone.", "mm.blocks.0.mm_attn.", "mm.blocks.0.norm_cross."]));
        assert!(removed.iter().any(|n| n.starts_with("backbone.")));
    }

    #[test]
    fn weather_only_and_image_only_wirings_run() {
        let cfg = MMSTConfig::nano64();
        for ab in [
            Ablation { mask_image: true, ..Default::default() },
            Ablation { mask_short_term: true, ..Default::default() },
        ] {
            let model = MMSTModel::new(&cfg.clone().with_ablation(ab), 3).unwrap();
            let out = eval_predict(&model, &sample(&cfg, 2, 2, 8));
            assert!(out.all_finite());
        }
        // Without imagery the prediction ignores pixel values.
        let model = MMSTModel::new(&cfg.clone().with_ablation(Ablation { mask_image: true, ..Default::default() }), 3).unwrap();
        let a = sample(&cfg, 2, 2, 8);
        let mut b = a.clone();
        b.x = b.x.map(|v| 1.0 - v);
        assert_eq!(eval_predict(&model, &a), eval_predict(&model, &b));
    }

    #[test]
    fn eval_is_deterministic_and_permutation_stable() {
        let cfg = MMSTConfig::nano64();
        let model = MMSTModel::new(&cfg, 9).unwrap();
        let s = sample(&cfg, 2, 4, 10);
        let a = eval_predict(&model, &s);
        assert_eq!(a, eval_predict(&model, &s));
        let perm = [3, 1, 0, 2];
        let mut p = s.clone();
        p.x = s.x.select(1, &perm).unwrap();
        p.y_s = s.y_s.select(1, &perm).unwrap();
        p.coords = s.coords.select(0, &perm).unwrap();
        assert!(a.max_abs_diff(&eval_predict(&model, &p)) < 1e-9);
    }

    #[test]
    fn padded_batch_matches_unpadded() {
        let cfg = MMSTConfig::nano64();
        let model = MMSTModel::new(&cfg, 11).unwrap();
        let small = sample(&cfg, 2, 2, 12);
        let big = sample(&cfg, 2, 3, 13);
        let mut padded = small.clone();
        let extra = [0usize, 1, 1];
        padded.x = small.x.select(1, &extra).unwrap();
        padded.y_s = small.y_s.select(1, &extra).unwrap();
        padded.coords = small.coords.select(0, &extra).unwrap();

        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let mut ctx = Ctx::eval(&mut tape, &vars);
        let out = model
            .predict_batch(&mut ctx, &[padded, big.clone()], &[vec![true, true, false], vec![true; 3]])
            .unwrap();
        let batch = tape.value(out).clone();
        assert_eq!(batch.shape(), &[2, 1]);
        assert!((batch.data()[0] - eval_predict(&model, &small).item()).abs() < 1e-12);
        assert!((batch.data()[1] - eval_predict(&model, &big).item()).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_gradient_check_desk_preset() {
        let cfg = MMSTConfig::tiny64();
        let model = MMSTModel::new(&cfg, 21).unwrap();
        let s = sample(&cfg, 2, 2, 22);
        let report = finite_diff_check(
            |tape, p| {
                let mut ctx = Ctx::eval(tape, p);
                let z = model.predict(&mut ctx, &s)?;
                let target = ctx.constant(Tensor::new(vec![1], vec![0.7])?);
                let diff = ctx.tape.sub(z, target)?;
                let sq = ctx.tape.mul(diff, diff)?;
                Ok(ctx.tape.sum(sq))
            },
            model.params.values(),
            &GradCheckOptions {
                max_coords_per_param: Some(2),
                seed: 5,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
