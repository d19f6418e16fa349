//! Optimizer, learning-rate schedule, metrics and the training loops.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{pad_batch, Sample};
use crate::error::{Error, Result};
use crate::model::{MMSTModel, PRETRAIN_PREFIXES};
use crate::nn::{Ctx, ParamStore};
use crate::pretrain::{nt_xent_loss, pretrain_forward, AugmentationPolicy};
use crate::tensor::Tensor;

/// Decoupled-weight-decay Adam. Decay applies to matrices only (rank >= 2);
/// biases, norm gains and embedding vectors are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: params.values().iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.values().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn moments(&self, index: usize) -> (&[f64], &[f64]) {
        (&self.m[index], &self.v[index])
    }

    /// One update of every parameter with `trainable[i]` set. A missing
    /// gradient counts as zero.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, trainable: &[bool]) -> Result<()> {
        if grads.len() != params.len() || trainable.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::invalid("adamw_step", "gradient, mask and parameter counts differ"));
        }
        if !(lr >= 0.0) {
            return Err(Error::invalid("adamw_step", format!("learning rate {lr}")));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != params.values()[i].shape() {
                    return Err(Error::shape("adamw_step", params.values()[i].shape(), g.shape()));
                }
                if trainable[i] && !g.all_finite() {
                    return Err(Error::NonFiniteGradient(params.names()[i].clone()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if !trainable[i] {
                continue;
            }
            let current = params.get(id);
            let decay = if current.rank() >= 2 { 1.0 - lr * self.weight_decay } else { 1.0 };
            let mut value = current.to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].as_ref().map(Tensor::data);
            for k in 0..value.len() {
                let gk = g.map_or(0.0, |g| g[k]);
                value[k] *= decay;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                value[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
            params.set(id, Tensor::new(current.shape().to_vec(), value)?)?;
        }
        Ok(())
    }
}

/// Linear warmup from 0, then cosine decay to `floor_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub floor_lr: f64,
}

impl LrSchedule {
    pub fn from_epochs(base_lr: f64, warmup_epochs: usize, total_epochs: usize, steps_per_epoch: usize, floor_lr: f64) -> Self {
        let total = total_epochs * steps_per_epoch;
        Self {
            base_lr,
            warmup_steps: (warmup_epochs * steps_per_epoch).min(total),
            total_steps: total,
            floor_lr,
        }
    }
}

pub fn lr_at(step: usize, s: &LrSchedule) -> f64 {
    if step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    let span = s.total_steps.saturating_sub(s.warmup_steps);
    if span == 0 {
        return s.floor_lr;
    }
    let progress = ((step - s.warmup_steps) as f64 / span as f64).min(1.0);
    s.floor_lr + (s.base_lr - s.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub r_squared: f64,
    /// Zero when the predictions are constant.
    pub pearson_corr: f64,
    pub n: usize,
}

/// RMSE, R-squared and Pearson correlation in a single streaming pass.
pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<MetricsReport> {
    if pred.len() != truth.len() || pred.len() < 2 {
        return Err(Error::invalid(
            "metrics",
            format!("need equal lengths >= 2, got {} and {}", pred.len(), truth.len()),
        ));
    }
    let (mut mp, mut mt, mut sp, mut st, mut cpt, mut sse) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for (k, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        if !p.is_finite() || !t.is_finite() {
            return Err(Error::NonFinite { op: "metrics" });
        }
        let n = (k + 1) as f64;
        let (dp, dt) = (p - mp, t - mt);
        mp += dp / n;
        mt += dt / n;
        sp += dp * (p - mp);
        st += dt * (t - mt);
        cpt += dp * (t - mt);
        sse += (p - t) * (p - t);
    }
    if st == 0.0 {
        return Err(Error::UndefinedMetric("truth is constant; R-squared and correlation are undefined".into()));
    }
    let corr = if sp == 0.0 { 0.0 } else { (cpt / (sp * st).sqrt()).clamp(-1.0, 1.0) };
    Ok(MetricsReport {
        rmse: (sse / pred.len() as f64).sqrt(),
        r_squared: 1.0 - sse / st,
        pearson_corr: corr,
        n: pred.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub floor_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Contrastive temperature (pre-training only).
    pub tau: f64,
    /// View augmentation (pre-training only).
    pub augmentation: AugmentationPolicy,
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            base_lr: 1e-4,
            warmup_epochs: 20,
            floor_lr: 0.0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            clip_norm: Some(1.0),
            seed: 0,
            tau: 0.5,
            augmentation: AugmentationPolicy::default(),
        }
    }

    pub fn finetune_default() -> Self {
        Self {
            epochs: 100,
            base_lr: 1e-3,
            warmup_epochs: 5,
            beta2: 0.999,
            ..Self::pretrain_default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.base_lr >= 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config("learning rate must be >= 0 and temperature > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

impl TrainHistory {
    pub fn final_loss(&self) -> Option<f64> {
        self.epoch_losses.last().copied()
    }
}

/// Yield standardization constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    pub fn forward(&self, z: f64) -> f64 {
        (z - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn clip_gradients(grads: &mut [Option<Tensor>], trainable: &[bool], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .zip(trainable)
        .filter(|(_, &t)| t)
        .filter_map(|(g, _)| g.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g = g.map(|v| v * factor);
        }
    }
    norm
}

/// Shared epoch/batch driver: `step_loss` builds the loss for one batch of
/// sample indices on a fresh tape and returns its gradients.
fn run_training<F>(model: &mut MMSTModel, n_samples: usize, cfg: &TrainConfig, trainable: &[bool], label: &'static str, mut step_loss: F) -> Result<TrainHistory>
where
    F: FnMut(&MMSTModel, &[usize], u64) -> Result<(f64, Vec<Option<Tensor>>)>,
{
    cfg.validate()?;
    if n_samples == 0 {
        return Err(Error::invalid(label, "no training samples"));
    }
    let steps_per_epoch = n_samples.div_ceil(cfg.batch_size);
    let schedule = LrSchedule::from_epochs(cfg.base_lr, cfg.warmup_epochs, cfg.epochs, steps_per_epoch, cfg.floor_lr);
    let mut opt = AdamW::new(&model.params, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
    let mut history = TrainHistory::default();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_samples).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64)));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, mut grads) = step_loss(model, batch, mix(cfg.seed ^ 0x5EED, step as u64))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "training loss" });
            }
            if let Some(max_norm) = cfg.clip_norm {
                clip_gradients(&mut grads, trainable, max_norm);
            }
            opt.update(&mut model.params, &grads, lr_at(step, &schedule), trainable)?;
            history.step_losses.push(loss);
            epoch_loss += loss * batch.len() as f64;
            step += 1;
        }
        let mean = epoch_loss / n_samples as f64;
        log::info!("{label} epoch {}/{}: loss {mean:.6}", epoch + 1, cfg.epochs);
        history.epoch_losses.push(mean);
    }
    Ok(history)
}

fn collect_grads(tape: &Tape, vars: &[crate::autograd::Var], loss: crate::autograd::Var) -> Result<Vec<Option<Tensor>>> {
    let grads = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.get(v).cloned()).collect())
}

/// Mean squared error of standardized yields, one optimizer step per batch.
pub fn finetune(model: &mut MMSTModel, samples: &[Sample], norm: Standardizer, cfg: &TrainConfig) -> Result<TrainHistory> {
    let trainable = vec![true; model.params.len()];
    let dropout = model.config.dropout;
    run_training(model, samples.len(), cfg, &trainable, "finetune", |model, idx, seed| {
        let batch = pad_batch(idx.iter().map(|&i| samples[i].clone()).collect());
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let mut ctx = Ctx::train(&mut tape, &vars, dropout, seed);
        let pred = model.predict_batch(&mut ctx, &batch.samples, &batch.masks)?;
        let target = Tensor::from_fn(vec![idx.len(), model.config.d_z], |k| {
            norm.forward(batch.samples[k / model.config.d_z].z.data()[k % model.config.d_z])
        });
        let target = ctx.constant(target);
        let diff = tape.sub(pred, target)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq);
        Ok((tape.value(loss).item(), collect_grads(&tape, &vars, loss)?))
    })
}

/// Mask selecting the parameters updated during pre-training.
pub fn pretrain_mask(params: &ParamStore) -> Vec<bool> {
    params
        .names()
        .iter()
        .map(|n| PRETRAIN_PREFIXES.iter().any(|p| n.starts_with(p)))
        .collect()
}

/// Contrastive pre-training. Each sample's (time, grid) cells form one
/// contrastive set: the two views of a cell are positives, the sample's
/// other cells negatives. The batch loss is the mean over samples.
pub fn pretrain(model: &mut MMSTModel, samples: &[Sample], cfg: &TrainConfig) -> Result<TrainHistory> {
    let trainable = pretrain_mask(&model.params);
    let dropout = model.config.dropout;
    let [h, w, c] = model.config.image_shape();
    let (n1, d_y) = (model.config.n1, model.config.d_y);
    run_training(model, samples.len(), cfg, &trainable, "pretrain", |model, idx, seed| {
        let mut images = Vec::new();
        let mut weather = Vec::new();
        let mut spans = Vec::with_capacity(idx.len());
        let mut cells = 0;
        for &i in idx {
            let s = &samples[i];
            let n = s.x.shape()[0] * s.x.shape()[1];
            if n < 2 {
                return Err(Error::invalid("pretrain", format!("sample {} {} has a single cell", s.county, s.year)));
            }
            images.extend_from_slice(s.x.data());
            weather.extend_from_slice(s.y_s.data());
            spans.push((cells, n));
            cells += n;
        }
        let images = Tensor::new(vec![cells, h, w, c], images)?;
        let weather = Tensor::new(vec![cells, n1, d_y], weather)?;
        let seeds: Vec<u64> = (0..cells as u64).map(|k| mix(seed, k)).collect();
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let mut ctx = Ctx::train(&mut tape, &vars, dropout, seed);
        let vs = pretrain_forward(&mut ctx, model, &images, &weather, &cfg.augmentation, &seeds)?;
        let mut losses = Vec::with_capacity(spans.len());
        for &(start, n) in &spans {
            let first = tape.narrow(vs, 0, start, n)?;
            let second = tape.narrow(vs, 0, cells + start, n)?;
            let pair = tape.concat(&[first, second], 0)?;
            let l = nt_xent_loss(&mut tape, pair, cfg.tau)?;
            losses.push(tape.reshape(l, vec![1])?);
        }
        let all = tape.concat(&losses, 0)?;
        let loss = tape.mean(all);
        Ok((tape.value(loss).item(), collect_grads(&tape, &vars, loss)?))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub county: String,
    pub year: u32,
    pub truth: f64,
    pub predicted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    /// Mean absolute error per county, in yield units.
    pub per_county_abs_error: BTreeMap<String, f64>,
    pub predictions: Vec<Prediction>,
}

/// Worker count: `MMST_THREADS` if set, else the available parallelism.
pub fn thread_count() -> usize {
    std::env::var("MMST_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn predict_chunk(model: &MMSTModel, samples: &[Sample], norm: Standardizer) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(8) {
        let batch = pad_batch(chunk.to_vec());
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let mut ctx = Ctx::eval(&mut tape, &vars);
        let pred = model.predict_batch(&mut ctx, &batch.samples, &batch.masks)?;
        let d_z = model.config.d_z;
        out.extend(tape.value(pred).data().chunks(d_z).map(|r| norm.inverse(r[0])));
    }
    Ok(out)
}

/// Eval-mode predictions in yield units, parallel over samples.
pub fn predict_all(model: &MMSTModel, samples: &[Sample], norm: Standardizer) -> Result<Vec<f64>> {
    let threads = thread_count().min(samples.len().max(1));
    if threads <= 1 {
        return predict_chunk(model, samples, norm);
    }
    let per = samples.len().div_ceil(threads);
    let parts: Vec<Result<Vec<f64>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(per)
            .map(|chunk| scope.spawn(move || predict_chunk(model, chunk, norm)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate(model: &MMSTModel, samples: &[Sample], norm: Standardizer) -> Result<Evaluation> {
    let predicted = predict_all(model, samples, norm)?;
    let truth: Vec<f64> = samples.iter().map(|s| s.z.data()[0]).collect();
    let metrics = metrics(&predicted, &truth)?;
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let predictions = samples
        .iter()
        .zip(predicted.iter().zip(&truth))
        .map(|(s, (&p, &t))| {
            let e = sums.entry(s.county.clone()).or_default();
            e.0 += (p - t).abs();
            e.1 += 1;
            Prediction {
                county: s.county.clone(),
                year: s.year,
                truth: t,
                predicted: p,
            }
        })
        .collect();
    Ok(Evaluation {
        metrics,
        per_county_abs_error: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        predictions,
    })
}

/// Baseline that always predicts the training mean.
pub fn mean_predictor_metrics(train_mean: f64, samples: &[Sample]) -> Result<MetricsReport> {
    let truth: Vec<f64> = samples.iter().map(|s| s.z.data()[0]).collect();
    metrics(&vec![train_mean; truth.len()], &truth)
}
