//! Ablation scenarios and end-to-end runs: optional pre-training,
//! fine-tuning and held-out evaluation.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::model::{param_name_diff, Ablation, MMSTConfig, MMSTModel, PRETRAIN_PREFIXES};
use crate::train::{self, Evaluation, MetricsReport, Standardizer, TrainConfig, TrainHistory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Full,
    NoLongTerm,
    NoTmha,
    NoSmha,
    NoShortTerm,
    NoImage,
    NoPretrain,
    SimclrPretrain,
}

impl Scenario {
    pub const ALL: [Scenario; 8] = [
        Scenario::Full,
        Scenario::NoLongTerm,
        Scenario::NoTmha,
        Scenario::NoSmha,
        Scenario::NoShortTerm,
        Scenario::NoImage,
        Scenario::NoPretrain,
        Scenario::SimclrPretrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Full => "full",
            Scenario::NoLongTerm => "no-long-term",
            Scenario::NoTmha => "no-tmha",
            Scenario::NoSmha => "no-smha",
            Scenario::NoShortTerm => "no-short-term",
            Scenario::NoImage => "no-image",
            Scenario::NoPretrain => "no-pretrain",
            Scenario::SimclrPretrain => "simclr-pretrain",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Scenario::Full => "complete model",
            Scenario::NoLongTerm => "temporal attention without the long-term weather bias",
            Scenario::NoTmha => "temporal transformer replaced by mean pooling over time",
            Scenario::NoSmha => "spatial transformer replaced by mean pooling over grids",
            Scenario::NoShortTerm => "multi-modal blocks see image tokens only",
            Scenario::NoImage => "multi-modal blocks see short-term weather tokens only",
            Scenario::NoPretrain => "fine-tuning from random initialization",
            Scenario::SimclrPretrain => "image-only contrastive pre-training",
        }
    }

    pub fn ablation(self) -> Ablation {
        let mut a = Ablation::default();
        match self {
            Scenario::NoLongTerm => a.mask_long_term = true,
            Scenario::NoTmha => a.pool_temporal = true,
            Scenario::NoSmha => a.pool_spatial = true,
            Scenario::NoShortTerm => a.mask_short_term = true,
            Scenario::NoImage => a.mask_image = true,
            Scenario::Full | Scenario::NoPretrain | Scenario::SimclrPretrain => {}
        }
        a
    }

    /// Whether this scenario is about pre-training rather than architecture.
    pub fn is_pretraining_scenario(self) -> bool {
        matches!(self, Scenario::NoPretrain | Scenario::SimclrPretrain)
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL.into_iter().find(|sc| sc.name() == s).ok_or_else(|| {
            let names: Vec<_> = Scenario::ALL.iter().map(|s| s.name()).collect();
            Error::Config(format!("unknown scenario `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pretraining {
    None,
    /// Images paired with short-term weather.
    MultiModal,
    /// Images only.
    ImageOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub model: MMSTConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Pre-train the full model (and architecture ablations) before
    /// fine-tuning.
    pub pretrain_reference: bool,
    pub seed: u64,
}

impl ExperimentPlan {
    pub fn pretraining_for(&self, scenario: Scenario) -> Pretraining {
        match scenario {
            Scenario::NoPretrain => Pretraining::None,
            Scenario::SimclrPretrain => Pretraining::ImageOnly,
            Scenario::NoImage => Pretraining::None,
            _ if self.pretrain_reference => Pretraining::MultiModal,
            _ => Pretraining::None,
        }
    }

    fn seeded(&self, cfg: &TrainConfig, salt: u64) -> TrainConfig {
        TrainConfig {
            seed: self.seed.wrapping_mul(1_000_003).wrapping_add(salt),
            ..cfg.clone()
        }
    }
}

/// Run configuration file: model, optimizer and schedule settings. Missing
/// sections fall back to defaults (model preset taken from the dataset).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<MMSTConfig>,
    pub pretrain: Option<TrainConfig>,
    pub finetune: Option<TrainConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// The model for `ds`, checked against the dataset's tensor shapes.
    pub fn model_for(&self, ds: &Dataset) -> Result<MMSTConfig> {
        let cfg = match &self.model {
            Some(m) => m.clone(),
            None => MMSTConfig::preset(&ds.manifest.preset)?,
        };
        cfg.validate()?;
        let dims = crate::data::DataDims::from_config(&cfg);
        if dims != ds.manifest.dims {
            return Err(Error::Config(format!(
                "model expects {dims:?} but the dataset holds {:?}",
                ds.manifest.dims
            )));
        }
        Ok(cfg)
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        self.pretrain.clone().unwrap_or_else(TrainConfig::pretrain_default)
    }

    pub fn finetune_config(&self) -> TrainConfig {
        self.finetune.clone().unwrap_or_else(TrainConfig::finetune_default)
    }
}

/// Training and held-out samples with the standardization constants.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub norm: Standardizer,
}

impl SplitData {
    pub fn load(ds: &Dataset) -> Result<Self> {
        let load = |split| -> Result<Vec<Sample>> {
            ds.keys(split).iter().map(|(c, y)| ds.load_sample(c, *y)).collect()
        };
        Ok(Self {
            train: load(Split::Train)?,
            test: load(Split::Test)?,
            norm: Standardizer {
                mean: ds.manifest.yield_mean,
                std: ds.manifest.yield_std,
            },
        })
    }

    /// Inputs from year `Y - offset` paired with the yield of year `Y`,
    /// for every `Y` whose source year is in the dataset.
    pub fn load_offset(ds: &Dataset, offset: u32) -> Result<Self> {
        if offset == 0 {
            return Self::load(ds);
        }
        let years = &ds.manifest.years;
        let pairs = |split| -> Result<Vec<Sample>> {
            let mut out = Vec::new();
            for county in ds.split_counties(split) {
                for &year in years {
                    let Some(source) = year.checked_sub(offset).filter(|y| years.contains(y)) else {
                        continue;
                    };
                    let input = ds.load_sample(county, source)?;
                    let target = ds.load_sample(county, year)?;
                    out.push(Sample {
                        year,
                        z: target.z,
                        ..input
                    });
                }
            }
            Ok(out)
        };
        let (train, test) = (pairs(Split::Train)?, pairs(Split::Test)?);
        if train.len() < 2 || test.len() < 2 {
            return Err(Error::Config(format!(
                "offset of {offset} years leaves {} training and {} test pairs",
                train.len(),
                test.len()
            )));
        }
        Ok(Self {
            train,
            test,
            norm: Standardizer {
                mean: ds.manifest.yield_mean,
                std: ds.manifest.yield_std,
            },
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub scenario: Scenario,
    pub pretraining: Pretraining,
    pub model: MMSTModel,
    pub pretrain_history: Option<TrainHistory>,
    pub finetune_history: TrainHistory,
    pub test: Evaluation,
}

/// Copies parameters present in both models by name.
pub fn transfer_params(from: &MMSTModel, to: &mut MMSTModel, prefixes: &[&str]) -> Result<usize> {
    let mut copied = 0;
    for (name, value) in from.params.iter() {
        if !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        if let Some(id) = to.params.id(name) {
            to.params.set(id, value.clone())?;
            copied += 1;
        }
    }
    Ok(copied)
}

/// Pre-trains a copy of the scenario's model (image-only wiring for
/// [`Pretraining::ImageOnly`]) and returns it.
pub fn pretrain_model(model_cfg: &MMSTConfig, mode: Pretraining, data: &[Sample], cfg: &TrainConfig, init_seed: u64) -> Result<(MMSTModel, TrainHistory)> {
    let mut pcfg = model_cfg.clone();
    match mode {
        Pretraining::None => return Err(Error::Config("no pre-training requested".into())),
        Pretraining::MultiModal => {}
        Pretraining::ImageOnly => pcfg.ablation.mask_short_term = true,
    }
    if pcfg.ablation.mask_image {
        return Err(Error::Config("contrastive pre-training needs imagery".into()));
    }
    let mut model = MMSTModel::new(&pcfg, init_seed)?;
    let history = train::pretrain(&mut model, data, cfg)?;
    Ok((model, history))
}

pub fn run_scenario(data: &SplitData, plan: &ExperimentPlan, scenario: Scenario) -> Result<RunOutcome> {
    let cfg = plan.model.clone().with_ablation(scenario.ablation());
    let mut model = MMSTModel::new(&cfg, plan.seed)?;
    let pretraining = plan.pretraining_for(scenario);
    let pretrain_history = if pretraining == Pretraining::None {
        None
    } else {
        let (pre, history) = pretrain_model(&cfg, pretraining, &data.train, &plan.seeded(&plan.pretrain, 1), plan.seed)?;
        transfer_params(&pre, &mut model, &PRETRAIN_PREFIXES)?;
        Some(history)
    };
    let finetune_history = train::finetune(&mut model, &data.train, data.norm, &plan.seeded(&plan.finetune, 2))?;
    let test = train::evaluate(&model, &data.test, data.norm)?;
    Ok(RunOutcome {
        scenario,
        pretraining,
        model,
        pretrain_history,
        finetune_history,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDiff {
    pub removed: Vec<String>,
    pub added: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub scenario: String,
    pub pretraining: Pretraining,
    pub config_hash: String,
    pub parameters: usize,
    pub final_finetune_loss: Option<f64>,
    pub final_pretrain_loss: Option<f64>,
    pub test: MetricsReport,
}

impl ArmSummary {
    pub fn of(run: &RunOutcome) -> Self {
        Self {
            scenario: run.scenario.name().into(),
            pretraining: run.pretraining,
            config_hash: run.model.config.hash(),
            parameters: run.model.params.num_scalars(),
            final_finetune_loss: run.finetune_history.final_loss(),
            final_pretrain_loss: run.pretrain_history.as_ref().and_then(TrainHistory::final_loss),
            test: run.test.metrics,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub command: String,
    pub scenario: String,
    pub description: String,
    pub seed: u64,
    pub config_hash: String,
    pub plan: ExperimentPlan,
    pub param_diff: ParamDiff,
    pub reference: ArmSummary,
    pub variant: ArmSummary,
    /// Variant minus reference held-out RMSE.
    pub delta_rmse: f64,
    pub mean_predictor_rmse: f64,
}

/// Trains the reference model and the scenario's variant on the same data
/// and seeds. Pre-training scenarios compare against a pre-trained
/// reference.
pub fn ablate(data: &SplitData, plan: &ExperimentPlan, scenario: Scenario) -> Result<(AblationReport, RunOutcome, RunOutcome)> {
    let mut plan = plan.clone();
    if scenario.is_pretraining_scenario() {
        plan.pretrain_reference = true;
    }
    let reference = run_scenario(data, &plan, Scenario::Full)?;
    let variant = run_scenario(data, &plan, scenario)?;
    let (removed, added) = param_name_diff(&reference.model, &variant.model);
    let baseline = train::mean_predictor_metrics(data.norm.mean, &data.test)?;
    let report = AblationReport {
        command: "ablate".into(),
        scenario: scenario.name().into(),
        description: scenario.description().into(),
        seed: plan.seed,
        config_hash: variant.model.config.hash(),
        param_diff: ParamDiff { removed, added },
        reference: ArmSummary::of(&reference),
        variant: ArmSummary::of(&variant),
        delta_rmse: variant.test.metrics.rmse - reference.test.metrics.rmse,
        mean_predictor_rmse: baseline.rmse,
        plan,
    };
    Ok((report, reference, variant))
}

/// Writes any serializable report as pretty JSON.
pub fn write_report<T: Serialize>(path: &Path, report: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    crate::mmt::write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_names_roundtrip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("no-everything".parse::<Scenario>().is_err());
        assert!(Scenario::NoShortTerm.ablation().mask_short_term);
        assert_eq!(Scenario::NoPretrain.ablation(), Ablation::default());
    }

    #[test]
    fn pretraining_choice() {
        let plan = ExperimentPlan {
            model: MMSTConfig::nano64(),
            pretrain: TrainConfig::pretrain_default(),
            finetune: TrainConfig::finetune_default(),
            pretrain_reference: true,
            seed: 0,
        };
        assert_eq!(plan.pretraining_for(Scenario::Full), Pretraining::MultiModal);
        assert_eq!(plan.pretraining_for(Scenario::NoImage), Pretraining::None);
        assert_eq!(plan.pretraining_for(Scenario::SimclrPretrain), Pretraining::ImageOnly);
        assert_eq!(plan.pretraining_for(Scenario::NoPretrain), Pretraining::None);
    }
}
