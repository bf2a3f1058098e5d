//! Training loop, evaluation and the prevalence baseline.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::linalg::l2_norm;
use crate::loss::{combined_loss, LossConfig};
use crate::metrics::{evaluate, EvalOptions, MetricReport, PredictionSet};
use crate::model::{EncodedSample, Model, SampleOutput};
use crate::optim::{Freeze, Optimizer, OptimizerConfig};
use crate::params::{mix_seed, ParamSet};
use crate::tst::ForwardMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub freeze: Freeze,
    #[serde(skip)]
    pub exec: ExecMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            seed: 0,
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            freeze: Freeze::default(),
            exec: ExecMode::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        self.loss.validate()?;
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    /// Mean per-sample loss.
    pub loss: f64,
    pub f1_macro: f64,
    pub accuracy: f64,
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,split,loss,f1_macro,accuracy")?;
    for r in log {
        writeln!(
            w,
            "{},{},{:?},{:?},{:?}",
            r.epoch, r.split, r.loss, r.f1_macro, r.accuracy
        )?;
    }
    Ok(())
}

/// Owns the optimizer and epoch counter across calls to [`Trainer::fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub optimizer: Optimizer,
    /// Completed epochs.
    pub epoch: usize,
}

fn group_norms(model: &Model) -> String {
    let mut acc: Vec<(&str, f64)> = vec![("text", 0.0), ("tst", 0.0), ("fusion", 0.0)];
    for t in model.tensors() {
        let sq: f64 = t.data.iter().map(|v| v * v).sum();
        if let Some(slot) = acc.iter_mut().find(|(g, _)| t.name.starts_with(g)) {
            slot.1 += sq;
        }
    }
    acc.iter()
        .map(|(g, sq)| format!("{g}={:.6e}", sq.sqrt()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5348_5546 ^ epoch as u64));
    order.shuffle(&mut rng);
    order
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &Model) -> Result<Self> {
        config.validate()?;
        let optimizer = Optimizer::new(config.optimizer, model);
        Ok(Self {
            config,
            optimizer,
            epoch: 0,
        })
    }

    /// One optimizer step on a batch; returns the batch loss and train-mode outputs.
    pub fn step(
        &mut self,
        model: &mut Model,
        batch: &[&EncodedSample],
        batch_index: usize,
    ) -> Result<(f64, Vec<SampleOutput>)> {
        let seed = Model::dropout_seed(self.config.seed, self.epoch, batch_index);
        let res = model.batch_gradients(
            batch,
            &self.config.loss,
            ForwardMode::Train { seed },
            self.config.exec,
        )?;
        if !res.loss.loss.is_finite() || !res.grads.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch + 1,
                batch: batch_index,
                loss: res.loss.loss,
                norms: group_norms(model),
            });
        }
        self.optimizer.step(model, &res.grads, &self.config.freeze);
        if let Some(stats) = res.updated_stats {
            model.tst.stats = stats;
        }
        Ok((res.loss.loss, res.outputs))
    }

    /// Runs the configured number of epochs, logging train and (optionally) held-out rows.
    pub fn fit(
        &mut self,
        model: &mut Model,
        train: &[EncodedSample],
        valid: Option<&[EncodedSample]>,
    ) -> Result<Vec<EpochLog>> {
        if train.is_empty() {
            return Err(Error::Empty("training samples"));
        }
        let mut log = Vec::new();
        for _ in 0..self.config.epochs {
            let order = epoch_order(self.config.seed, self.epoch, train.len());
            let mut total = 0.0;
            let mut targets = Vec::with_capacity(train.len());
            let mut scores = Vec::with_capacity(train.len());
            for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
                let batch: Vec<&EncodedSample> = idx.iter().map(|&i| &train[i]).collect();
                let (loss, outputs) = self.step(model, &batch, b)?;
                total += loss;
                for (s, o) in batch.iter().zip(outputs) {
                    targets.push(s.target.clone());
                    scores.push(o.fusion.probs);
                }
            }
            self.epoch += 1;
            let set = PredictionSet::from_scores(targets, scores)?;
            let report = evaluate(&set, &EvalOptions::default())?;
            log.push(EpochLog {
                epoch: self.epoch,
                split: "train".into(),
                loss: total / train.len() as f64,
                f1_macro: report.f1_macro,
                accuracy: report.accuracy,
            });
            if let Some(valid) = valid.filter(|v| !v.is_empty()) {
                let (report, set) =
                    evaluate_model(model, valid, &EvalOptions::default(), self.config.exec)?;
                let loss = combined_loss(&set.targets, &set.scores, &self.config.loss)?;
                log.push(EpochLog {
                    epoch: self.epoch,
                    split: "eval".into(),
                    loss: loss / valid.len() as f64,
                    f1_macro: report.f1_macro,
                    accuracy: report.accuracy,
                });
            }
        }
        Ok(log)
    }
}

/// Eval-mode predictions as a [`PredictionSet`].
pub fn predict_set(
    model: &Model,
    samples: &[EncodedSample],
    exec: ExecMode,
) -> Result<PredictionSet> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation samples"));
    }
    let out_dim = model.config.output_dim();
    if let Some(s) = samples.iter().find(|s| s.target.len() != out_dim) {
        return Err(Error::LabelMismatch {
            model: out_dim,
            data: s.target.len(),
        });
    }
    let outputs = model.predict(samples, exec)?;
    let targets = samples.iter().map(|s| s.target.clone()).collect();
    let scores = outputs.iter().map(|o| o.fusion.probs.clone()).collect();
    let predicted = outputs.into_iter().map(|o| o.fusion.bits).collect();
    PredictionSet::new(targets, scores, predicted)
}

pub fn evaluate_model(
    model: &Model,
    samples: &[EncodedSample],
    opts: &EvalOptions,
    exec: ExecMode,
) -> Result<(MetricReport, PredictionSet)> {
    let set = predict_set(model, samples, exec)?;
    Ok((evaluate(&set, opts)?, set))
}

/// Per-label prevalence of the training targets.
pub fn label_prevalence(targets: &[Vec<u8>]) -> Result<Vec<f64>> {
    let first = targets
        .first()
        .ok_or(Error::Empty("baseline training targets"))?;
    let mut p = vec![0.0; first.len()];
    for t in targets {
        for (acc, &b) in p.iter_mut().zip(t) {
            *acc += f64::from(b);
        }
    }
    let n = targets.len() as f64;
    p.iter_mut().for_each(|v| *v /= n);
    Ok(p)
}

/// Frequency-prior baseline: every sample is scored with the training prevalence.
pub fn prevalence_baseline(
    train_targets: &[Vec<u8>],
    eval_targets: &[Vec<u8>],
) -> Result<PredictionSet> {
    let prior = label_prevalence(train_targets)?;
    if let Some(t) = eval_targets.iter().find(|t| t.len() != prior.len()) {
        return Err(Error::LabelMismatch {
            model: prior.len(),
            data: t.len(),
        });
    }
    let scores = vec![prior; eval_targets.len()];
    PredictionSet::from_scores(eval_targets.to_vec(), scores)
}

/// L2 norm of every trainable tensor, for diagnostics.
pub fn parameter_norms(model: &Model) -> Vec<(String, f64)> {
    model
        .tensors()
        .into_iter()
        .map(|t| (t.name, l2_norm(t.data)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_scores_are_training_prevalence() {
        let train = vec![vec![1, 0, 1], vec![1, 0, 0], vec![0, 0, 1], vec![1, 1, 0]];
        assert_eq!(label_prevalence(&train).unwrap(), vec![0.75, 0.25, 0.5]);
        let eval = vec![vec![1, 0, 0], vec![0, 1, 1]];
        let set = prevalence_baseline(&train, &eval).unwrap();
        assert_eq!(set.scores, vec![vec![0.75, 0.25, 0.5]; 2]);
        // 0.5 sits on the threshold, so label 2 is predicted present
        assert_eq!(set.predicted, vec![vec![1, 0, 1]; 2]);
        assert!(matches!(
            prevalence_baseline(&train, &[vec![1, 0]]),
            Err(Error::LabelMismatch { model: 3, data: 2 })
        ));
        assert!(label_prevalence(&[]).is_err());
    }

    #[test]
    fn log_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let row = |split: &str| EpochLog {
            epoch: 1,
            split: split.into(),
            loss: 0.5,
            f1_macro: 0.25,
            accuracy: 0.75,
        };
        write_log_csv(&path, &[row("train"), row("eval")]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "epoch,split,loss,f1_macro,accuracy\n1,train,0.5,0.25,0.75\n1,eval,0.5,0.25,0.75\n"
        );
    }
}
