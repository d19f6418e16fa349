//! Acceptance suite. Every criterion prints one PASS/FAIL line (written
//! straight to stderr so it shows up without `--nocapture`) and then
//! asserts. Criteria run one at a time so their wall-clock limits are
//! measured without contention.

use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mmst_core::attention::{attention_probs, scaled_attention, MultiHeadAttention, TransformerBlock};
use mmst_core::backbone::SrAttention;
use mmst_core::data::{dataset_hash, plan_dataset, write_dataset, Dataset, GenOptions, Sample};
use mmst_core::experiment::{run_scenario, ExperimentPlan, Scenario, SplitData};
use mmst_core::gradcheck::{finite_diff_check, random_tensor, GradCheckOptions, GradCheckReport};
use mmst_core::model::{MMSTConfig, MMSTModel};
use mmst_core::nn::{Ctx, Init, ParamStore};
use mmst_core::pretrain::{nt_xent_loss, pretrain_forward, AugmentationPolicy};
use mmst_core::train::{self, metrics, TrainConfig};
use mmst_core::{Result, Tape, Tensor, Var};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {criterion} [{name}]: {verdict} {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
}

// ---------------------------------------------------------------------------
// Shared experiment settings for the synthetic 24/8 split.

const SPLIT_COUNTIES: usize = 32;
const SPLIT_TEST: usize = 8;
const SPLIT_YEARS: std::ops::Range<u32> = 2016..2020;
const SPLIT_GRIDS: usize = 2;
const FINETUNE_EPOCHS: usize = 32;
const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn split_dataset(seed: u64, root: &Path) -> SplitData {
    let mut opts = GenOptions::new(seed, SPLIT_COUNTIES, SPLIT_YEARS.collect(), "nano64");
    opts.test_counties = SPLIT_TEST;
    opts.max_grids = SPLIT_GRIDS;
    write_dataset(&plan_dataset(&opts).unwrap(), root).unwrap();
    SplitData::load(&Dataset::open(root).unwrap()).unwrap()
}

fn split_plan(seed: u64, finetune_epochs: usize, pretrain: bool) -> ExperimentPlan {
    ExperimentPlan {
        model: MMSTConfig::nano64(),
        pretrain: TrainConfig {
            epochs: 20,
            warmup_epochs: 2,
            ..TrainConfig::pretrain_default()
        },
        finetune: TrainConfig {
            epochs: finetune_epochs,
            warmup_epochs: 2,
            base_lr: 5e-4,
            ..TrainConfig::finetune_default()
        },
        pretrain_reference: pretrain,
        seed,
    }
}

// ---------------------------------------------------------------------------
// 1. Gradient suite.

fn check(name: &str, worst: &mut (f64, String), r: Result<GradCheckReport>) {
    let r = r.unwrap_or_else(|e| panic!("{name}: {e}"));
    if r.max_rel_error >= worst.0 {
        *worst = (r.max_rel_error, name.to_string());
    }
}

fn unary(worst: &mut (f64, String), name: &str, x: Tensor, op: impl Fn(&mut Tape, Var) -> Result<Var>) {
    let r = finite_diff_check(
        |tape, p| {
            let y = op(tape, p[0])?;
            let shape = tape.shape(y).to_vec();
            let wv = tape.constant(random_tensor(&shape, 98));
            let prod = tape.mul(y, wv)?;
            Ok(tape.sum(prod))
        },
        &[x],
        &GradCheckOptions::default(),
    );
    check(name, worst, r);
}

fn binary(worst: &mut (f64, String), name: &str, a: Tensor, b: Tensor, op: impl Fn(&mut Tape, Var, Var) -> Result<Var>) {
    let r = finite_diff_check(
        |tape, p| {
            let y = op(tape, p[0], p[1])?;
            let shape = tape.shape(y).to_vec();
            let w = tape.constant(random_tensor(&shape, 97));
            let prod = tape.mul(y, w)?;
            Ok(tape.sum(prod))
        },
        &[a, b],
        &GradCheckOptions::default(),
    );
    check(name, worst, r);
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    random_tensor(shape, seed).map(|v| 0.5 + v.abs())
}

fn module_check(worst: &mut (f64, String), name: &str, store: &ParamStore, f: impl Fn(&mut Ctx) -> Result<Var>) {
    let r = finite_diff_check(
        |tape, p| {
            let mut ctx = Ctx::eval(tape, p);
            let y = f(&mut ctx)?;
            let shape = ctx.tape.shape(y).to_vec();
            let w = ctx.constant(random_tensor(&shape, 96));
            let prod = ctx.tape.mul(y, w)?;
            Ok(ctx.tape.sum(prod))
        },
        store.values(),
        &GradCheckOptions::default(),
    );
    check(name, worst, r);
}

#[test]
fn criterion_1_gradient_suite() {
    let _g = serial();
    let start = Instant::now();
    let mut worst = (0.0, String::new());
    let w = &mut worst;

    unary(w, "scale", random_tensor(&[3, 4], 1), |t, x| Ok(t.scale(x, -1.7)));
    unary(w, "add_scalar", random_tensor(&[3, 4], 2), |t, x| Ok(t.add_scalar(x, 0.3)));
    unary(w, "exp", random_tensor(&[3, 4], 3), |t, x| Ok(t.exp(x)));
    unary(w, "log", positive(&[3, 4], 4), |t, x| Ok(t.log(x)));
    unary(w, "sqrt", positive(&[3, 4], 5), |t, x| Ok(t.sqrt(x)));
    unary(w, "gelu", random_tensor(&[3, 4], 6).map(|v| 3.0 * v), |t, x| Ok(t.gelu(x)));
    unary(w, "softmax", random_tensor(&[2, 3, 4], 7), |t, x| t.softmax(x, 2));
    unary(w, "softmax_axis0", random_tensor(&[3, 4], 8), |t, x| t.softmax(x, 0));
    unary(w, "reshape", random_tensor(&[2, 6], 9), |t, x| t.reshape(x, vec![3, 4]));
    unary(w, "permute", random_tensor(&[2, 3, 4], 10), |t, x| t.permute(x, &[2, 0, 1]));
    unary(w, "transpose", random_tensor(&[2, 3, 4], 11), |t, x| t.transpose(x));
    unary(w, "narrow", random_tensor(&[4, 5], 12), |t, x| t.narrow(x, 1, 1, 3));
    unary(w, "broadcast_to", random_tensor(&[3, 1], 13), |t, x| t.broadcast_to(x, &[2, 3, 4]));
    unary(w, "sum_axis", random_tensor(&[2, 3, 4], 14), |t, x| t.sum_axis(x, 1));
    unary(w, "mean_axis", random_tensor(&[2, 3, 4], 15), |t, x| t.mean_axis(x, 2));
    unary(w, "sum", random_tensor(&[2, 3], 16), |t, x| Ok(t.sum(x)));
    unary(w, "mean", random_tensor(&[2, 3], 17), |t, x| Ok(t.mean(x)));
    unary(w, "dropout", random_tensor(&[4, 5], 18), |t, x| {
        let mut ctx = Ctx::train(t, &[], 0.3, 7);
        ctx.dropout(x)
    });
    binary(w, "matmul", random_tensor(&[3, 4], 20), random_tensor(&[4, 2], 21), |t, a, b| t.matmul(a, b));
    binary(w, "matmul_batched", random_tensor(&[2, 3, 4], 22), random_tensor(&[4, 5], 23), |t, a, b| t.matmul(a, b));
    binary(w, "add_broadcast", random_tensor(&[2, 3, 4], 24), random_tensor(&[4], 25), |t, a, b| t.add(a, b));
    binary(w, "sub_broadcast", random_tensor(&[2, 3, 4], 26), random_tensor(&[3, 4], 27), |t, a, b| t.sub(a, b));
    binary(w, "mul_broadcast", random_tensor(&[3, 4], 28), random_tensor(&[4], 29), |t, a, b| t.mul(a, b));
    binary(w, "div", random_tensor(&[3, 4], 30), positive(&[3, 4], 31), |t, a, b| t.div(a, b));
    binary(w, "concat", random_tensor(&[2, 3], 32), random_tensor(&[2, 2], 33), |t, a, b| t.concat(&[a, b], 1));
    let (gain, shift) = (random_tensor(&[5], 34), random_tensor(&[5], 35));
    let r = finite_diff_check(
        |tape, p| {
            let y = tape.layer_norm(p[0], p[1], p[2], 1e-6)?;
            let wv = tape.constant(random_tensor(&[3, 5], 36));
            let prod = tape.mul(y, wv)?;
            Ok(tape.sum(prod))
        },
        &[random_tensor(&[3, 5], 37), gain, shift],
        &GradCheckOptions::default(),
    );
    check("layer_norm", w, r);
    let r = finite_diff_check(
        |tape, p| {
            let bias = tape.narrow(p[3], 0, 2, 3)?;
            let bias = tape.reshape(bias, vec![1, 3, 1])?;
            let bias = tape.broadcast_to(bias, &[2, 3, 4])?;
            scaled_attention(tape, p[0], p[1], p[2], Some(bias)).map(|o| tape.sum(o))
        },
        &[random_tensor(&[2, 3, 2], 40), random_tensor(&[2, 4, 2], 41), random_tensor(&[2, 4, 2], 42), random_tensor(&[5], 43)],
        &GradCheckOptions::default(),
    );
    check("scaled_attention", w, r);
    let r = finite_diff_check(
        |tape, p| {
            let l = nt_xent_loss(tape, p[0], 0.5)?;
            Ok(l)
        },
        &[random_tensor(&[6, 4], 44)],
        &GradCheckOptions::default(),
    );
    check("nt_xent_loss", w, r);

    let mut store = ParamStore::new();
    let mut init = Init::new(50);
    let mha = MultiHeadAttention::new(&mut store, &mut init, "mha", 6, 5, 8, 2).unwrap();
    let (q, c, b) = (random_tensor(&[2, 3, 6], 51), random_tensor(&[2, 4, 5], 52), random_tensor(&[2, 3, 4], 53));
    module_check(w, "cross_attention", &store, |ctx| {
        let (q, c, b) = (ctx.constant(q.clone()), ctx.constant(c.clone()), ctx.constant(b.clone()));
        mha.forward(ctx, q, c, Some(b))
    });
    let mut store = ParamStore::new();
    let block = TransformerBlock::new(&mut store, &mut init, "block", 6, 2, 12).unwrap();
    let x = random_tensor(&[2, 3, 6], 54);
    module_check(w, "transformer_block", &store, |ctx| {
        let x = ctx.constant(x.clone());
        block.forward(ctx, x, None)
    });
    let mut store = ParamStore::new();
    let sr = SrAttention::new(&mut store, &mut init, "sr", 4, 2, 2).unwrap();
    let x = random_tensor(&[1, 16, 4], 55);
    module_check(w, "sr_attention", &store, |ctx| {
        let x = ctx.constant(x.clone());
        sr.forward(ctx, x, (4, 4))
    });

    // Contrastive forward through the backbone and multi-modal blocks.
    let cfg = MMSTConfig::nano64();
    let model = MMSTModel::new(&cfg, 60).unwrap();
    let [h, wd, ch] = cfg.image_shape();
    let images = random_tensor(&[2, h, wd, ch], 61).map(|v| 0.5 + 0.4 * v);
    let weather = random_tensor(&[2, cfg.n1, cfg.d_y], 62);
    let policy = AugmentationPolicy::default();
    let r = finite_diff_check(
        |tape, p| {
            let mut ctx = Ctx::eval(tape, p);
            let vs = pretrain_forward(&mut ctx, &model, &images, &weather, &policy, &[3, 4])?;
            nt_xent_loss(ctx.tape, vs, 0.5)
        },
        model.params.values(),
        &GradCheckOptions {
            max_coords_per_param: Some(2),
            seed: 63,
            ..Default::default()
        },
    );
    check("contrastive_pretraining", w, r);

    // Full model, desk preset, T = G = 2.
    let cfg = MMSTConfig::tiny64();
    let model = MMSTModel::new(&cfg, 21).unwrap();
    let s = random_sample(&cfg, 2, 2, 22);
    let r = finite_diff_check(
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
    );
    check("end_to_end_tiny64", w, r);

    let elapsed = start.elapsed();
    let pass = worst.0 < 1e-4 && elapsed < Duration::from_secs(300);
    report(
        1,
        "gradient suite",
        pass,
        &format!("worst rel err {:.2e} ({}), {:.1}s (limits 1e-4, 300s)", worst.0, worst.1, elapsed.as_secs_f64()),
    );
    assert!(pass);
}

fn random_sample(cfg: &MMSTConfig, t: usize, g: usize, seed: u64) -> Sample {
    let [h, w, c] = cfg.image_shape();
    Sample {
        county: "c".into(),
        year: 2020,
        x: random_tensor(&[t, g, h, w, c], seed).map(|v| 0.5 + 0.4 * v),
        y_s: random_tensor(&[t, g, cfg.n1, cfg.d_y], seed + 1),
        y_l: random_tensor(&[t, cfg.n2, cfg.d_y], seed + 2),
        z: Tensor::new(vec![1], vec![0.0]).unwrap(),
        coords: random_tensor(&[g, 2], seed + 3).map(|v| 0.5 + 0.5 * v),
    }
}

// ---------------------------------------------------------------------------
// 2. Analytic loss values.

#[test]
fn criterion_2_analytic_loss_values() {
    let _g = serial();
    let mut worst_identical: f64 = 0.0;
    for b in [2usize, 4, 8] {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::from_fn(vec![2 * b, 5], |i| 0.3 + (i % 5) as f64));
        let l = nt_xent_loss(&mut tape, v, 0.5).unwrap();
        let err = (tape.value(l).item() - ((2 * b - 1) as f64).ln()).abs();
        worst_identical = worst_identical.max(err);
    }
    // B = 2, tau = 0.5, positives identical and every negative opposite.
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(vec![4, 2], vec![1.0, 0.0, -1.0, 0.0, 1.0, 0.0, -1.0, 0.0]).unwrap());
    let l = nt_xent_loss(&mut tape, v, 0.5).unwrap();
    let l = tape.value(l).item();
    let e2 = 2.0f64.exp();
    let hand = -(e2 / (e2 + 2.0 / e2)).ln();
    let pass = worst_identical < 1e-9 && (l - 0.03597).abs() < 1e-5 && (l - hand).abs() < 1e-12;
    report(
        2,
        "analytic loss values",
        pass,
        &format!("max |L - ln(2B-1)| = {worst_identical:.1e} for B in 2,4,8; hand case {l:.6} vs 0.03597"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 3. Attention invariants.

#[test]
fn criterion_3_attention_invariants() {
    let _g = serial();
    // Probability rows.
    let mut tape = Tape::new();
    let q = tape.constant(random_tensor(&[2, 4, 6, 3], 1).map(|v| 5.0 * v));
    let k = tape.constant(random_tensor(&[2, 4, 7, 3], 2).map(|v| 5.0 * v));
    let bias = tape.constant(random_tensor(&[4, 6, 7], 3));
    let p = attention_probs(&mut tape, q, k, Some(bias)).unwrap();
    let row_err = tape.value(p).data().chunks(7).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);

    // Temporal attention with a zero meteorological bias.
    let cfg = MMSTConfig::nano64();
    let mut model = MMSTModel::new(&cfg, 4).unwrap();
    let temporal = model.temporal.clone().unwrap();
    let proj = &temporal.met_bias.as_ref().unwrap().proj;
    let (wid, bid) = (proj.weight, proj.bias.unwrap());
    let wshape = model.params.get(wid).shape().to_vec();
    let bshape = model.params.get(bid).shape().to_vec();
    model.params.set(wid, Tensor::zeros(wshape)).unwrap();
    model.params.set(bid, Tensor::zeros(bshape)).unwrap();
    let v_s = random_tensor(&[cfg.t, cfg.d], 5);
    let y_l = random_tensor(&[cfg.t, cfg.n2, cfg.d_y], 6);
    let run = |with_bias: bool| {
        let tt = if with_bias {
            temporal.clone()
        } else {
            mmst_core::attention::TemporalTransformer {
                met_bias: None,
                ..temporal.clone()
            }
        };
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let mut ctx = Ctx::eval(&mut tape, &vars);
        let v = ctx.constant(v_s.clone());
        let y = with_bias.then(|| ctx.constant(y_l.clone()));
        let out = tt.forward(&mut ctx, v, y).unwrap();
        tape.value(out).clone()
    };
    let bitwise = run(true).data() == run(false).data();

    // Spatial-reduction attention with ratio 1.
    let mut store = ParamStore::new();
    let sr = SrAttention::new(&mut store, &mut Init::new(7), "sr", 8, 2, 1).unwrap();
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape);
    let mut ctx = Ctx::eval(&mut tape, &vars);
    let x = ctx.constant(random_tensor(&[2, 16, 8], 8));
    let a = sr.forward(&mut ctx, x, (4, 4)).unwrap();
    let b = sr.attn.forward(&mut ctx, x, x, None).unwrap();
    let sr_err = tape.value(a).max_abs_diff(tape.value(b));

    // Joint permutation of grids (features and coordinates).
    let model = MMSTModel::new(&MMSTConfig::nano64(), 9).unwrap();
    let (t, g, d) = (3, 5, cfg.d);
    let v_m = random_tensor(&[t, g, d], 10);
    let coords = random_tensor(&[g, 2], 11).map(|v| 0.5 + 0.5 * v);
    let perm = [3, 0, 4, 1, 2];
    let v_perm = Tensor::from_fn(vec![t, g, d], |i| {
        let (ti, gi, di) = (i / (g * d), (i / d) % g, i % d);
        v_m.get(&[ti, perm[gi], di])
    });
    let c_perm = Tensor::from_fn(vec![g, 2], |i| coords.get(&[perm[i / 2], i % 2]));
    let spatial = |v: &Tensor, c: &Tensor| {
        let mut tape = Tape::new();
        let vars = model.params.bind(&mut tape);
        let mut ctx = Ctx::eval(&mut tape, &vars);
        let v = ctx.constant(v.clone());
        let out = model.spatial_forward(&mut ctx, v, c).unwrap();
        tape.value(out).clone()
    };
    let perm_err = spatial(&v_m, &coords).max_abs_diff(&spatial(&v_perm, &c_perm));

    let pass = row_err < 1e-12 && bitwise && sr_err < 1e-12 && perm_err < 1e-9;
    report(
        3,
        "attention invariants",
        pass,
        &format!("row-sum err {row_err:.1e}, zero-bias bitwise {bitwise}, sr=1 err {sr_err:.1e}, grid permutation err {perm_err:.1e}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 4. Overfit check.

#[test]
fn criterion_4_overfit_eight_county_years() {
    let _g = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let mut opts = GenOptions::new(7, 8, vec![2020], "tiny64");
    opts.test_counties = 0;
    opts.max_grids = 1;
    let manifest = write_dataset(&plan_dataset(&opts).unwrap(), dir.path()).unwrap();
    let data = SplitData::load(&Dataset::open(dir.path()).unwrap()).unwrap();
    assert_eq!(data.train.len(), 8);
    let mut cfg = MMSTConfig::tiny64();
    cfg.dropout = 0.0;
    let mut model = MMSTModel::new(&cfg, 0).unwrap();
    let tc = TrainConfig {
        epochs: 200,
        batch_size: 8,
        warmup_epochs: 10,
        weight_decay: 0.0,
        ..TrainConfig::finetune_default()
    };
    let history = train::finetune(&mut model, &data.train, data.norm, &tc).unwrap();
    let eval = train::evaluate(&model, &data.train, data.norm).unwrap();
    let elapsed = start.elapsed();
    let ratio = eval.metrics.rmse / manifest.yield_std;
    let pass = history.step_losses.len() <= 200 && ratio < 0.05 && eval.metrics.pearson_corr > 0.99 && elapsed < Duration::from_secs(600);
    report(
        4,
        "overfit",
        pass,
        &format!(
            "{} steps, train RMSE {:.4} = {:.4} x yield std, Corr {:.6}, {:.1}s (limits 200 steps, 0.05, 0.99, 600s)",
            history.step_losses.len(),
            eval.metrics.rmse,
            ratio,
            eval.metrics.pearson_corr,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 5. Generalization check.

#[test]
fn criterion_5_generalization_24_8() {
    let _g = serial();
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = split_dataset(SEEDS[0], dir.path());
    let plan = split_plan(SEEDS[0], FINETUNE_EPOCHS, false);
    let run = run_scenario(&data, &plan, Scenario::Full).unwrap();
    let baseline = train::mean_predictor_metrics(data.norm.mean, &data.test).unwrap();
    let elapsed = start.elapsed();
    let m = run.test.metrics;
    let reduction = 1.0 - m.rmse / baseline.rmse;
    let pass = reduction >= 0.3 && m.pearson_corr > 0.8 && elapsed < Duration::from_secs(1800);
    report(
        5,
        "generalization",
        pass,
        &format!(
            "held-out RMSE {:.3} vs mean predictor {:.3} ({:.0}% lower), Corr {:.3}, {:.1}s (limits 30%, 0.8, 1800s)",
            m.rmse,
            baseline.rmse,
            100.0 * reduction,
            m.pearson_corr,
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 6. Ablation direction.

#[test]
fn criterion_6_ablation_direction() {
    let _g = serial();
    let start = Instant::now();
    let scenarios = [Scenario::NoShortTerm, Scenario::NoImage, Scenario::NoLongTerm];
    let mut wins = [0usize; 3];
    let mut rows = Vec::new();
    for seed in SEEDS {
        let dir = tempfile::tempdir().unwrap();
        let data = split_dataset(seed, dir.path());
        let plan = split_plan(seed, FINETUNE_EPOCHS, false);
        let full = run_scenario(&data, &plan, Scenario::Full).unwrap().test.metrics.rmse;
        let mut row = format!("seed {seed}: full {full:.2}");
        for (i, sc) in scenarios.iter().enumerate() {
            let rmse = run_scenario(&data, &plan, *sc).unwrap().test.metrics.rmse;
            if rmse > full {
                wins[i] += 1;
            }
            row.push_str(&format!(" {} {rmse:.2}", sc.name()));
        }
        rows.push(row);
    }
    let pass = wins.iter().all(|&w| w >= 4);
    let counts: Vec<String> = scenarios.iter().zip(wins).map(|(s, w)| format!("{} {w}/5", s.name())).collect();
    report(
        6,
        "ablation direction",
        pass,
        &format!("RMSE above full model: {} ({:.0}s) [{}]", counts.join(", "), start.elapsed().as_secs_f64(), rows.join("; ")),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 7. Pre-training benefit.

#[test]
fn criterion_7_pretraining_benefit() {
    let _g = serial();
    let start = Instant::now();
    let truncated = FINETUNE_EPOCHS / 4;
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in SEEDS {
        let dir = tempfile::tempdir().unwrap();
        let data = split_dataset(seed, dir.path());
        let plan = split_plan(seed, truncated, true);
        let with = run_scenario(&data, &plan, Scenario::Full).unwrap().test.metrics.rmse;
        let without = run_scenario(&data, &plan, Scenario::NoPretrain).unwrap().test.metrics.rmse;
        if with <= without {
            wins += 1;
        }
        rows.push(format!("seed {seed}: pre-trained {with:.2} vs none {without:.2}"));
    }
    let pass = wins >= 4;
    report(
        7,
        "pre-training benefit",
        pass,
        &format!(
            "pre-trained RMSE <= no pre-training in {wins}/5 seeds, fine-tuning {truncated} of {FINETUNE_EPOCHS} epochs ({:.0}s) [{}]",
            start.elapsed().as_secs_f64(),
            rows.join("; ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 8. Determinism.

#[test]
fn criterion_8_determinism() {
    let _g = serial();
    let gen = |seed: u64, root: &Path| {
        let mut opts = GenOptions::new(seed, 6, vec![2019, 2020], "nano64");
        opts.max_grids = 2;
        write_dataset(&plan_dataset(&opts).unwrap(), root).unwrap();
        dataset_hash(root).unwrap()
    };
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ha, hb, hc) = (gen(11, a.path()), gen(11, b.path()), gen(12, c.path()));
    let same_hash = ha == hb && ha != hc;

    let data = SplitData::load(&Dataset::open(a.path()).unwrap()).unwrap();
    let train_once = || {
        let cfg = MMSTConfig::nano64();
        let mut model = MMSTModel::new(&cfg, 3).unwrap();
        let pre = train::pretrain(
            &mut model,
            &data.train,
            &TrainConfig {
                epochs: 1,
                warmup_epochs: 0,
                ..TrainConfig::pretrain_default()
            },
        )
        .unwrap();
        let fine = train::finetune(
            &mut model,
            &data.train,
            data.norm,
            &TrainConfig {
                epochs: 3,
                warmup_epochs: 1,
                ..TrainConfig::finetune_default()
            },
        )
        .unwrap();
        (pre.final_loss().unwrap(), fine.final_loss().unwrap())
    };
    let (p1, f1) = train_once();
    let (p2, f2) = train_once();
    let same_loss = p1.to_bits() == p2.to_bits() && f1.to_bits() == f2.to_bits() && format!("{f1:?}") == format!("{f2:?}");
    let pass = same_hash && same_loss;
    report(
        8,
        "determinism",
        pass,
        &format!("dataset hash {}.. repeated {}, final losses {p1:?}/{f1:?} vs {p2:?}/{f2:?}", &ha[..12], ha == hb),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// 9. Metric correctness.

fn two_pass(pred: &[f64], truth: &[f64]) -> (f64, f64, f64) {
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    let sst: f64 = truth.iter().map(|t| (t - mt) * (t - mt)).sum();
    let spp: f64 = pred.iter().map(|p| (p - mp) * (p - mp)).sum();
    let spt: f64 = pred.iter().zip(truth).map(|(p, t)| (p - mp) * (t - mt)).sum();
    ((sse / n).sqrt(), 1.0 - sse / sst, spt / (spp * sst).sqrt())
}

#[test]
fn criterion_9_metric_correctness() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..300);
        let offset = rng.gen_range(-200.0..200.0);
        let spread = rng.gen_range(0.1..30.0);
        let truth: Vec<f64> = (0..n).map(|_| offset + spread * rng.gen_range(-1.0..1.0)).collect();
        let pred: Vec<f64> = truth.iter().map(|t| t + spread * rng.gen_range(-0.8..0.8)).collect();
        let m = metrics(&pred, &truth).unwrap();
        let (rmse, r2, corr) = two_pass(&pred, &truth);
        worst = worst.max((m.rmse - rmse).abs()).max((m.r_squared - r2).abs()).max((m.pearson_corr - corr).abs());
    }
    let pass = worst < 1e-10;
    report(9, "metric correctness", pass, &format!("max deviation from two-pass reference {worst:.2e} over 1000 vectors (limit 1e-10)"));
    assert!(pass);
}
