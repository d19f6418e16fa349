use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use mmst_core::checkpoint;
use mmst_core::data::{dataset_hash, plan_dataset, write_dataset, Dataset, GenOptions, Split, NOMINAL_YIELD_STD};
use mmst_core::experiment::{self, ExperimentPlan, RunConfig, Scenario, SplitData};
use mmst_core::model::{MMSTModel, PRETRAIN_PREFIXES};
use mmst_core::train::{self, TrainConfig};

#[derive(Parser)]
#[command(name = "mmst", version, about = "Multi-modal spatio-temporal yield model on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        counties: usize,
        /// Year range `2016-2019` or list `2016,2018`.
        #[arg(long)]
        years: String,
        #[arg(long, default_value = "tiny64")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        /// Held-out counties (default: a quarter of them).
        #[arg(long)]
        test_counties: Option<usize>,
        #[arg(long, default_value_t = 4)]
        max_grids: usize,
        /// Penalty on the long-term warming level.
        #[arg(long)]
        warming: Option<f64>,
        /// Yield noise as a fraction of the nominal yield spread.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Contrastive pre-training of the backbone and multi-modal blocks.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised fine-tuning on the training split.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        /// Pre-trained checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train the full model and one ablated variant and compare them.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Fine-tuning epochs for both arms.
        #[arg(long)]
        epochs: Option<usize>,
        /// Pre-training epochs; also pre-trains architecture ablations.
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Predict the yield of year Y from the inputs of year Y - offset.
    PredictAhead {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        offset_years: u32,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
}

fn parse_years(spec: &str) -> Result<Vec<u32>> {
    let spec = spec.trim();
    let years = if let Some((a, b)) = spec.split_once('-') {
        let (a, b): (u32, u32) = (a.trim().parse()?, b.trim().parse()?);
        if b < a {
            bail!("empty year range {spec}");
        }
        (a..=b).collect()
    } else {
        spec.split(',').map(|y| y.trim().parse::<u32>()).collect::<Result<Vec<_>, _>>()?
    };
    if years.is_empty() {
        bail!("no years given");
    }
    Ok(years)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn with_overrides(mut cfg: TrainConfig, epochs: Option<usize>, seed: u64) -> TrainConfig {
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg.seed = seed;
    cfg
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    experiment::write_report(path, value)?;
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { seed, counties, years, preset, out, test_counties, max_grids, warming, noise } => {
            let mut opts = GenOptions::new(seed, counties, parse_years(&years)?, &preset);
            if let Some(t) = test_counties {
                opts.test_counties = t;
            }
            opts.max_grids = max_grids;
            if let Some(w) = warming {
                opts.coefficients.warming = w;
            }
            if let Some(n) = noise {
                opts.coefficients.sigma_z = n * NOMINAL_YIELD_STD;
            }
            let manifest = write_dataset(&plan_dataset(&opts)?, &out)?;
            let report = json!({
                "command": "gen-data",
                "seed": seed,
                "preset": manifest.preset,
                "config_hash": mmst_core::model::MMSTConfig::preset(&manifest.preset)?.hash(),
                "dataset_hash": dataset_hash(&out)?,
                "counties": manifest.counties.len(),
                "train_counties": manifest.splits.train.len(),
                "test_counties": manifest.splits.test.len(),
                "years": manifest.years,
                "yield_mean": manifest.yield_mean,
                "yield_std": manifest.yield_std,
                "planted_coefficients": manifest.planted_coefficients,
            });
            write_json(&out.join("gen_report.json"), &report)
        }
        Command::Pretrain { data, config, epochs, seed, out } => {
            let ds = Dataset::open(&data)?;
            let rc = load_config(config.as_deref())?;
            let model_cfg = rc.model_for(&ds)?;
            let cfg = with_overrides(rc.pretrain_config(), epochs, seed);
            let split = SplitData::load(&ds)?;
            let mut model = MMSTModel::new(&model_cfg, seed)?;
            let history = train::pretrain(&mut model, &split.train, &cfg)?;
            checkpoint::save(&model, &out, &PRETRAIN_PREFIXES)?;
            let report = json!({
                "command": "pretrain",
                "seed": seed,
                "config_hash": model_cfg.hash(),
                "dataset_hash": dataset_hash(&data)?,
                "train_config": cfg,
                "final_loss": history.final_loss(),
                "epoch_losses": history.epoch_losses,
                "checkpoint": out,
            });
            write_json(&out.join("report.json"), &report)
        }
        Command::Finetune { data, init, config, epochs, seed, out } => {
            let ds = Dataset::open(&data)?;
            let rc = load_config(config.as_deref())?;
            let model_cfg = rc.model_for(&ds)?;
            let cfg = with_overrides(rc.finetune_config(), epochs, seed);
            let split = SplitData::load(&ds)?;
            let mut model = MMSTModel::new(&model_cfg, seed)?;
            let loaded = match &init {
                Some(dir) => checkpoint::load_into(&mut model, dir)?.len(),
                None => 0,
            };
            let history = train::finetune(&mut model, &split.train, split.norm, &cfg)?;
            checkpoint::save(&model, &out, &[])?;
            let train_eval = train::evaluate(&model, &split.train, split.norm)?;
            let test_eval = train::evaluate(&model, &split.test, split.norm)?;
            let report = json!({
                "command": "finetune",
                "seed": seed,
                "config_hash": model_cfg.hash(),
                "dataset_hash": dataset_hash(&data)?,
                "init": init,
                "initialized_params": loaded,
                "train_config": cfg,
                "final_loss": history.final_loss(),
                "epoch_losses": history.epoch_losses,
                "train_metrics": train_eval.metrics,
                "test_metrics": test_eval.metrics,
                "mean_predictor_test_metrics": train::mean_predictor_metrics(split.norm.mean, &split.test)?,
                "checkpoint": out,
            });
            write_json(&out.join("report.json"), &report)
        }
        Command::Evaluate { data, checkpoint: ckpt, split, report } => {
            let ds = Dataset::open(&data)?;
            let split_kind: Split = split.parse()?;
            let model = checkpoint::load(&ckpt)?;
            let norm = SplitData::load(&ds)?.norm;
            let samples = ds
                .keys(split_kind)
                .iter()
                .map(|(c, y)| ds.load_sample(c, *y))
                .collect::<Result<Vec<_>, _>>()?;
            let eval = train::evaluate(&model, &samples, norm)?;
            let value = json!({
                "command": "evaluate",
                "seed": ds.manifest.seed,
                "config_hash": model.config.hash(),
                "dataset_hash": dataset_hash(&data)?,
                "split": split,
                "metrics": eval.metrics,
                "mean_predictor_metrics": train::mean_predictor_metrics(norm.mean, &samples)?,
                "per_county_abs_error": eval.per_county_abs_error,
                "predictions": eval.predictions,
            });
            write_json(&report, &value)
        }
        Command::Ablate { data, scenario, config, epochs, pretrain_epochs, seed, report } => {
            let scenario: Scenario = scenario.parse()?;
            let ds = Dataset::open(&data)?;
            let rc = load_config(config.as_deref())?;
            let plan = ExperimentPlan {
                model: rc.model_for(&ds)?,
                pretrain: with_overrides(rc.pretrain_config(), pretrain_epochs, seed),
                finetune: with_overrides(rc.finetune_config(), epochs, seed),
                pretrain_reference: pretrain_epochs.is_some_and(|e| e > 0),
                seed,
            };
            let split = SplitData::load(&ds)?;
            let (summary, _, _) = experiment::ablate(&split, &plan, scenario)?;
            let mut value = serde_json::to_value(&summary)?;
            value["dataset_hash"] = json!(dataset_hash(&data)?);
            write_json(&report, &value)
        }
        Command::PredictAhead { data, offset_years, config, epochs, seed, report } => {
            let ds = Dataset::open(&data)?;
            let rc = load_config(config.as_deref())?;
            let plan = ExperimentPlan {
                model: rc.model_for(&ds)?,
                pretrain: rc.pretrain_config(),
                finetune: with_overrides(rc.finetune_config(), epochs, seed),
                pretrain_reference: false,
                seed,
            };
            let split = SplitData::load_offset(&ds, offset_years)?;
            let outcome = experiment::run_scenario(&split, &plan, Scenario::Full)?;
            let value = json!({
                "command": "predict-ahead",
                "seed": seed,
                "offset_years": offset_years,
                "config_hash": outcome.model.config.hash(),
                "dataset_hash": dataset_hash(&data)?,
                "train_pairs": split.train.len(),
                "test_pairs": split.test.len(),
                "train_config": plan.finetune,
                "final_loss": outcome.finetune_history.final_loss(),
                "metrics": outcome.test.metrics,
                "mean_predictor_metrics": train::mean_predictor_metrics(split.norm.mean, &split.test)?,
                "predictions": outcome.test.predictions,
            });
            write_json(&report, &value)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
