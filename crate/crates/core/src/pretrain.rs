//! Multi-modal contrastive pre-training: view augmentation, paired forward
//! passes and the normalized-temperature cross-entropy loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::MMSTModel;
use crate::nn::Ctx;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    /// Crop area as a fraction of the image.
    pub crop_scale: (f64, f64),
    /// Crop width / height.
    pub crop_ratio: (f64, f64),
    pub flip_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            crop_scale: (0.5, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            blur_prob: 0.5,
            blur_sigma: (0.1, 2.0),
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
        }
    }
}

impl AugmentationPolicy {
    /// Every step disabled: `augment` returns its input.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            flip_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma: (0.1, 2.0),
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok_range = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi;
        let ok_prob = |p: f64| (0.0..=1.0).contains(&p);
        let ok_strength = |s: f64| (0.0..1.0).contains(&s);
        if !ok_range(self.crop_scale) || self.crop_scale.1 > 1.0 || !ok_range(self.crop_ratio) || !ok_range(self.blur_sigma) {
            return Err(Error::invalid("augment", "invalid crop or blur range"));
        }
        if !ok_prob(self.flip_prob) || !ok_prob(self.blur_prob) {
            return Err(Error::invalid("augment", "probabilities must lie in [0, 1]"));
        }
        if !ok_strength(self.brightness) || !ok_strength(self.contrast) || !ok_strength(self.saturation) {
            return Err(Error::invalid("augment", "jitter strengths must lie in [0, 1)"));
        }
        Ok(())
    }

    fn jitters(&self) -> bool {
        self.brightness > 0.0 || self.contrast > 0.0 || self.saturation > 0.0
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Bilinear resample of the box `(top, left, height, width)` to `out_h x out_w`.
fn resized_crop(img: &[f64], (h, w, c): (usize, usize, usize), bx: (f64, f64, f64, f64), out: (usize, usize)) -> Vec<f64> {
    let (top, left, bh, bw) = bx;
    let (oh, ow) = out;
    let mut res = vec![0.0; oh * ow * c];
    let sample_axis = |i: usize, start: f64, len: f64, n_out: usize, n_in: usize| {
        let src = (start + (i as f64 + 0.5) * len / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, src - lo as f64)
    };
    for i in 0..oh {
        let (r0, r1, fr) = sample_axis(i, top, bh, oh, h);
        for j in 0..ow {
            let (c0, c1, fc) = sample_axis(j, left, bw, ow, w);
            for k in 0..c {
                let px = |r: usize, col: usize| img[(r * w + col) * c + k];
                let top_row = px(r0, c0) * (1.0 - fc) + px(r0, c1) * fc;
                let bottom_row = px(r1, c0) * (1.0 - fc) + px(r1, c1) * fc;
                res[(i * ow + j) * c + k] = if fr == 0.0 { top_row } else { top_row * (1.0 - fr) + bottom_row * fr };
            }
        }
    }
    res
}

/// Mirrors columns.
pub fn hflip(img: &Tensor) -> Result<Tensor> {
    let [h, w, c]: [usize; 3] = img
        .shape()
        .try_into()
        .map_err(|_| Error::invalid("hflip", format!("expected [H, W, C], got {:?}", img.shape())))?;
    let d = img.data();
    Ok(Tensor::from_fn(vec![h, w, c], |idx| {
        let (i, j, k) = (idx / (w * c), (idx / c) % w, idx % c);
        d[(i * w + (w - 1 - j)) * c + k]
    }))
}

fn gaussian_blur(img: &[f64], (h, w, c): (usize, usize, usize), sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let pass = |src: &[f64], along_rows: bool| {
        let mut out = vec![0.0; src.len()];
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    let mut acc = 0.0;
                    for (t, kv) in kernel.iter().enumerate() {
                        let off = t as isize - radius;
                        let (r, col) = if along_rows {
                            ((i as isize + off).clamp(0, h as isize - 1) as usize, j)
                        } else {
                            (i, (j as isize + off).clamp(0, w as isize - 1) as usize)
                        };
                        acc += kv * src[(r * w + col) * c + k];
                    }
                    out[(i * w + j) * c + k] = acc;
                }
            }
        }
        out
    };
    pass(&pass(img, false), true)
}

fn gray(px: &[f64]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

/// Crop, flip, blur and colour jitter, in that order, driven by `seed`.
pub fn augment(image: &Tensor, policy: &AugmentationPolicy, seed: u64) -> Result<Tensor> {
    policy.validate()?;
    let [h, w, c]: [usize; 3] = image
        .shape()
        .try_into()
        .map_err(|_| Error::invalid("augment", format!("expected [H, W, C], got {:?}", image.shape())))?;
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("augment", "pixel values must lie in [0, 1]"));
    }
    if policy.jitters() && c != 3 {
        return Err(Error::invalid("augment", "colour jitter needs 3 channels"));
    }
    let dims = (h, w, c);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let scale = uniform(&mut rng, policy.crop_scale);
    let log_ratio = uniform(&mut rng, (policy.crop_ratio.0.ln(), policy.crop_ratio.1.ln()));
    let ratio = log_ratio.exp();
    let bh = (h as f64 * (scale / ratio).sqrt()).min(h as f64);
    let bw = (w as f64 * (scale * ratio).sqrt()).min(w as f64);
    let top = uniform(&mut rng, (0.0, h as f64 - bh));
    let left = uniform(&mut rng, (0.0, w as f64 - bw));
    let mut px = resized_crop(image.data(), dims, (top, left, bh, bw), (h, w));

    if rng.gen::<f64>() < policy.flip_prob {
        px = hflip(&Tensor::new(vec![h, w, c], px)?)?.to_vec();
    }
    if rng.gen::<f64>() < policy.blur_prob {
        let sigma = uniform(&mut rng, policy.blur_sigma);
        px = gaussian_blur(&px, dims, sigma);
    }
    if policy.jitters() {
        let factor = |rng: &mut ChaCha8Rng, s: f64| uniform(rng, (1.0 - s, 1.0 + s));
        let b = factor(&mut rng, policy.brightness);
        let k = factor(&mut rng, policy.contrast);
        let s = factor(&mut rng, policy.saturation);
        px.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
        let mean_gray = px.chunks(3).map(gray).sum::<f64>() / (h * w) as f64;
        px.iter_mut().for_each(|v| *v = ((*v - mean_gray) * k + mean_gray).clamp(0.0, 1.0));
        for p in px.chunks_mut(3) {
            let g = gray(p);
            p.iter_mut().for_each(|v| *v = ((*v - g) * s + g).clamp(0.0, 1.0));
        }
    }
    px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(vec![h, w, c], px)
}

/// Contrastive loss over `[2B, d]` vectors where rows `k` and `k + B` are
/// positives and every other row is a negative. Similarity is cosine.
pub fn nt_xent_loss(tape: &mut Tape, vs: Var, tau: f64) -> Result<Var> {
    let s = tape.shape(vs).to_vec();
    if s.len() != 2 || s[0] < 4 || s[0] % 2 != 0 {
        return Err(Error::invalid("nt_xent_loss", format!("expected [2B, d] with B >= 2, got {s:?}")));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("nt_xent_loss", "temperature must be positive"));
    }
    let (n, d) = (s[0], s[1]);
    let b = n / 2;
    let sq = tape.mul(vs, vs)?;
    let norm_sq = tape.sum_axis(sq, 1)?;
    if tape.value(norm_sq).data().iter().any(|&v| v == 0.0) {
        return Err(Error::invalid("nt_xent_loss", "zero-norm vector has no cosine similarity"));
    }
    let norm = tape.sqrt(norm_sq);
    let norm = tape.reshape(norm, vec![n, 1])?;
    let norm = tape.broadcast_to(norm, &[n, d])?;
    let unit = tape.div(vs, norm)?;
    let unit_t = tape.transpose(unit)?;
    let sim = tape.matmul(unit, unit_t)?;
    let logits = tape.scale(sim, 1.0 / tau);

    // Row-wise shift by the (constant) largest off-diagonal logit.
    let lv = tape.value(logits).clone();
    let shift: Vec<f64> = (0..n)
        .map(|i| (0..n).filter(|&k| k != i).map(|k| lv.get(&[i, k])).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shift_t = Tensor::from_fn(vec![n, n], |idx| shift[idx / n]);
    let shift_v = tape.constant(shift_t);
    let shifted = tape.sub(logits, shift_v)?;
    let e = tape.exp(shifted);
    let off_diag = tape.constant(Tensor::from_fn(vec![n, n], |idx| if idx / n == idx % n { 0.0 } else { 1.0 }));
    let masked = tape.mul(e, off_diag)?;
    let denom = tape.sum_axis(masked, 1)?;
    let log_denom = tape.log(denom);

    let positive = tape.constant(Tensor::from_fn(vec![n, n], |idx| {
        let (i, k) = (idx / n, idx % n);
        if k == (i + b) % n {
            1.0
        } else {
            0.0
        }
    }));
    let pos = tape.mul(shifted, positive)?;
    let pos = tape.sum_axis(pos, 1)?;
    let per_row = tape.sub(log_denom, pos)?;
    Ok(tape.mean(per_row))
}

/// Two augmented views per cell, both paired with the cell's short-term
/// weather. `images: [B, H, W, C]`, `short_term: [B, N1, d_y]`, one seed
/// per cell. Returns `[2B, d]`: all first views, then all second views.
pub fn pretrain_forward(
    ctx: &mut Ctx,
    model: &MMSTModel,
    images: &Tensor,
    short_term: &Tensor,
    policy: &AugmentationPolicy,
    seeds: &[u64],
) -> Result<Var> {
    let s = images.shape();
    if s.len() != 4 || seeds.len() != s[0] || short_term.shape().first() != Some(&s[0]) {
        return Err(Error::invalid(
            "pretrain_forward",
            format!("{} seeds for images {s:?} and weather {:?}", seeds.len(), short_term.shape()),
        ));
    }
    let b = s[0];
    let cell = s[1] * s[2] * s[3];
    let mut views = Vec::with_capacity(2 * b * cell);
    for view in 0..2u64 {
        for (i, &seed) in seeds.iter().enumerate() {
            let img = Tensor::new(s[1..].to_vec(), images.data()[i * cell..(i + 1) * cell].to_vec())?;
            let aug = augment(&img, policy, seed.wrapping_mul(2).wrapping_add(view))?;
            views.extend_from_slice(aug.data());
        }
    }
    let mut shape = s.to_vec();
    shape[0] = 2 * b;
    let views = Tensor::new(shape, views)?;
    let weather = Tensor::new(
        [vec![2 * b], short_term.shape()[1..].to_vec()].concat(),
        [short_term.data(), short_term.data()].concat(),
    )?;
    model.multimodal_cells(ctx, Some(&views), Some(&weather))
}
