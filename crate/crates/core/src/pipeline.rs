//! End-to-end experiment: split, build samples, fit, train, evaluate, compare with
//! the prevalence baseline.

use serde::{Deserialize, Serialize};

use crate::ehr::{
    build_dataset, patient_level_split, validate_corpus, CohortReport, PatientRecord, TargetMode,
    VisitSample,
};
use crate::error::Result;
use crate::metrics::{evaluate, EvalOptions, MetricReport, PredictionSet};
use crate::model::{EncodedSample, Model, ModelConfig};
use crate::text::PrecomputedEmbeddings;
use crate::train::{evaluate_model, prevalence_baseline, EpochLog, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub target: TargetMode,
    pub train_fraction: f64,
    pub k_list: Vec<usize>,
    /// Log held-out metrics after every epoch.
    pub log_eval: bool,
    #[serde(default)]
    pub per_label: bool,
    #[serde(default)]
    pub subset_accuracy: bool,
}

impl ExperimentConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            train: TrainConfig::default(),
            target: TargetMode::Current,
            train_fraction: 0.8,
            k_list: (1..=5).collect(),
            log_eval: true,
            per_label: false,
            subset_accuracy: false,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            k_list: self.k_list.clone(),
            per_label: self.per_label,
            subset_accuracy: self.subset_accuracy,
        }
    }
}

/// Samples for both sides of the patient-level split.
pub struct SplitData {
    pub train: Vec<VisitSample>,
    pub test: Vec<VisitSample>,
    pub train_cohort: CohortReport,
    pub test_cohort: CohortReport,
}

pub fn split_samples(records: &[PatientRecord], cfg: &ExperimentConfig) -> Result<SplitData> {
    let d = validate_corpus(records)?;
    if d != cfg.model.n_labels {
        return Err(crate::Error::LabelMismatch {
            model: cfg.model.n_labels,
            data: d,
        });
    }
    let (train_recs, test_recs) = patient_level_split(records, cfg.train_fraction, cfg.train.seed)?;
    let (train, train_cohort) = build_dataset(&train_recs, cfg.model.task, cfg.target)?;
    let (test, test_cohort) = build_dataset(&test_recs, cfg.model.task, cfg.target)?;
    Ok(SplitData {
        train,
        test,
        train_cohort,
        test_cohort,
    })
}

pub struct Experiment {
    pub model: Model,
    pub trainer: Trainer,
    pub log: Vec<EpochLog>,
    pub report: MetricReport,
    pub baseline: MetricReport,
    pub predictions: PredictionSet,
    pub test: Vec<EncodedSample>,
    pub data: SplitData,
}

pub fn run(
    records: &[PatientRecord],
    cfg: &ExperimentConfig,
    embeddings: Option<&PrecomputedEmbeddings>,
) -> Result<Experiment> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    let data = split_samples(records, cfg)?;
    let mut model = Model::fit_new(cfg.model.clone(), &data.train, cfg.train.seed)?;
    let train = model.encode_samples(&data.train, embeddings)?;
    let test = model.encode_samples(&data.test, embeddings)?;
    let mut trainer = Trainer::new(cfg.train.clone(), &model)?;
    let log = trainer.fit(&mut model, &train, cfg.log_eval.then_some(test.as_slice()))?;
    let opts = cfg.eval_options();
    let (report, predictions) = evaluate_model(&model, &test, &opts, cfg.train.exec)?;
    let train_targets: Vec<Vec<u8>> = data.train.iter().map(|s| s.target.clone()).collect();
    let test_targets: Vec<Vec<u8>> = data.test.iter().map(|s| s.target.clone()).collect();
    let baseline = evaluate(&prevalence_baseline(&train_targets, &test_targets)?, &opts)?;
    Ok(Experiment {
        model,
        trainer,
        log,
        report,
        baseline,
        predictions,
        test,
        data,
    })
}
