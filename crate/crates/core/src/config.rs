//! Flat `key = value` settings files. Lines starting with `#` are comments.
//!
//! Resolution order is command line, then file, then built-in defaults: callers load
//! the file into [`Settings`] and then [`Settings::set`] each flag given on the CLI.

use std::path::Path;

use serde::Serialize;

use crate::ehr::{TargetMode, Task};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::loss::{HingeSpace, LossConfig, Reduction};
use crate::model::{Ablation, ModelConfig};
use crate::optim::{Freeze, OptimizerConfig, OptimizerKind};
use crate::pipeline::ExperimentConfig;
use crate::synth::GeneratorConfig;
use crate::train::TrainConfig;
use crate::tst::{Activation, NormKind, TstConfig};

/// Label index used for heart-failure mode with the default label set.
pub const HF_LABEL_INDEX: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Settings {
    pub seed: u64,
    pub task: String,
    pub hf_label: usize,
    pub target: String,
    pub ablation: String,
    pub alpha: f64,
    pub reduction: String,
    pub hinge_space: String,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: String,
    pub norm: String,
    pub activation: String,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub max_len: usize,
    pub embed_dim: usize,
    pub min_count: usize,
    pub fusion_depth: usize,
    pub train_fraction: f64,
    pub k: Vec<usize>,
    pub freeze_text: bool,
    pub freeze_tst: bool,
    pub freeze_fusion: bool,
    pub sequential: bool,
    pub per_label: bool,
    pub subset_accuracy: bool,
    pub n_patients: usize,
    pub n_labels: usize,
    pub visits_min: usize,
    pub visits_max: usize,
    pub onset_prob: f64,
    pub note_word_prob: f64,
    pub note_prob: f64,
    pub note_overlap_prob: f64,
    pub lab_prob: f64,
    pub noise_word_prob: f64,
    pub filler_words: usize,
    /// Comma-separated per-label rates; empty keeps the generator defaults.
    pub base_rates: String,
    /// Comma-separated `i-j:weight` entries; empty keeps the generator defaults.
    pub comorbidity: String,
}

impl Default for Settings {
    fn default() -> Self {
        let t = TstConfig::default();
        let g = GeneratorConfig::default();
        let o = OptimizerConfig::default();
        Self {
            seed: 0,
            task: "multilabel".into(),
            hf_label: HF_LABEL_INDEX,
            target: "current".into(),
            ablation: "full".into(),
            alpha: LossConfig::default().alpha,
            reduction: "sum".into(),
            hinge_space: "probability".into(),
            learning_rate: o.learning_rate,
            epochs: 10,
            batch_size: 8,
            optimizer: "adam".into(),
            norm: "layer".into(),
            activation: "gelu".into(),
            d_model: t.d_model,
            n_heads: t.n_heads,
            n_layers: t.n_layers,
            d_ff: t.d_ff,
            dropout: t.dropout,
            max_len: t.max_len,
            embed_dim: 64,
            min_count: 2,
            fusion_depth: 1,
            train_fraction: 0.8,
            k: (1..=5).collect(),
            freeze_text: false,
            freeze_tst: false,
            freeze_fusion: false,
            sequential: false,
            per_label: false,
            subset_accuracy: false,
            n_patients: g.n_patients,
            n_labels: g.n_labels(),
            visits_min: g.visits_min,
            visits_max: g.visits_max,
            onset_prob: g.onset_prob,
            note_word_prob: g.note_word_prob,
            note_prob: g.note_prob,
            note_overlap_prob: g.note_overlap_prob,
            lab_prob: g.lab_prob,
            noise_word_prob: g.noise_word_prob,
            filler_words: g.filler_words,
            base_rates: String::new(),
            comorbidity: String::new(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true/false, got {v:?}"
        ))),
    }
}

/// Parses `1..5`, `3` or `1,3,5`.
pub fn parse_k_list(v: &str) -> Result<Vec<usize>> {
    let v = v.trim();
    let ks: Vec<usize> = if let Some((a, b)) = v.split_once("..") {
        let (a, b): (usize, usize) = (num("k", a)?, num("k", b.trim_start_matches('='))?);
        (a..=b).collect()
    } else {
        v.split(',').map(|s| num("k", s)).collect::<Result<_>>()?
    };
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config(format!("k: need positive values, got {v:?}")));
    }
    Ok(ks)
}

fn choice(key: &str, v: &str, allowed: &[&str]) -> Result<String> {
    let v = v.trim();
    if allowed.contains(&v) {
        Ok(v.to_string())
    } else {
        Err(Error::Config(format!(
            "{key}: {v:?} is not one of {}",
            allowed.join(", ")
        )))
    }
}

impl Settings {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let k = key.as_str();
        match k {
            "seed" => self.seed = num(k, value)?,
            "task" => self.task = choice(k, value, &["multilabel", "heart-failure"])?,
            "hf_label" => self.hf_label = num(k, value)?,
            "target" => self.target = choice(k, value, &["current", "next-visit"])?,
            "ablation" => {
                self.ablation = choice(k, value, &["full", "no_text", "no_labtext", "no_time"])?
            }
            "alpha" => self.alpha = num(k, value)?,
            "reduction" => self.reduction = choice(k, value, &["sum", "mean"])?,
            "hinge_space" => self.hinge_space = choice(k, value, &["probability", "logit"])?,
            "learning_rate" | "lr" => self.learning_rate = num(k, value)?,
            "epochs" => self.epochs = num(k, value)?,
            "batch_size" => self.batch_size = num(k, value)?,
            "optimizer" => self.optimizer = choice(k, value, &["adam", "sgd"])?,
            "norm" => self.norm = choice(k, value, &["layer", "batch"])?,
            "activation" => self.activation = choice(k, value, &["gelu", "relu"])?,
            "d_model" => self.d_model = num(k, value)?,
            "n_heads" => self.n_heads = num(k, value)?,
            "n_layers" => self.n_layers = num(k, value)?,
            "d_ff" => self.d_ff = num(k, value)?,
            "dropout" => self.dropout = num(k, value)?,
            "max_len" => self.max_len = num(k, value)?,
            "embed_dim" => self.embed_dim = num(k, value)?,
            "min_count" => self.min_count = num(k, value)?,
            "fusion_depth" => self.fusion_depth = num(k, value)?,
            "train_fraction" => self.train_fraction = num(k, value)?,
            "k" => self.k = parse_k_list(value)?,
            "freeze_text" => self.freeze_text = flag(k, value)?,
            "freeze_tst" => self.freeze_tst = flag(k, value)?,
            "freeze_fusion" => self.freeze_fusion = flag(k, value)?,
            "sequential" => self.sequential = flag(k, value)?,
            "per_label" => self.per_label = flag(k, value)?,
            "subset_accuracy" => self.subset_accuracy = flag(k, value)?,
            "n_patients" => self.n_patients = num(k, value)?,
            "n_labels" => self.n_labels = num(k, value)?,
            "visits_min" => self.visits_min = num(k, value)?,
            "visits_max" => self.visits_max = num(k, value)?,
            "onset_prob" => self.onset_prob = num(k, value)?,
            "note_word_prob" => self.note_word_prob = num(k, value)?,
            "note_prob" => self.note_prob = num(k, value)?,
            "note_overlap_prob" => self.note_overlap_prob = num(k, value)?,
            "lab_prob" => self.lab_prob = num(k, value)?,
            "noise_word_prob" => self.noise_word_prob = num(k, value)?,
            "filler_words" => self.filler_words = num(k, value)?,
            "base_rates" => self.base_rates = value.trim().to_string(),
            "comorbidity" => self.comorbidity = value.trim().to_string(),
            _ => return Err(Error::Config(format!("unknown setting {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "expected key = value".into(),
            })?;
            self.set(key, value).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut s = Self::default();
        s.apply_text(&std::fs::read_to_string(path)?, path)?;
        Ok(s)
    }

    pub fn exec(&self) -> ExecMode {
        if self.sequential {
            ExecMode::Sequential
        } else {
            ExecMode::Parallel
        }
    }

    pub fn task(&self) -> Task {
        match self.task.as_str() {
            "heart-failure" => Task::HeartFailure {
                label_index: self.hf_label,
            },
            _ => Task::Multilabel,
        }
    }

    pub fn target(&self) -> TargetMode {
        match self.target.as_str() {
            "next-visit" => TargetMode::NextVisit,
            _ => TargetMode::Current,
        }
    }

    pub fn ablation(&self) -> Ablation {
        match self.ablation.as_str() {
            "no_text" => Ablation::NoText,
            "no_labtext" => Ablation::NoLabText,
            "no_time" => Ablation::NoTime,
            _ => Ablation::Full,
        }
    }

    pub fn model_config(&self, n_labels: usize, precomputed_text: bool) -> ModelConfig {
        let mut m = ModelConfig::new(self.task(), n_labels);
        m.text.embed_dim = self.embed_dim;
        m.text.min_count = self.min_count;
        m.tst = TstConfig {
            max_len: self.max_len,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            d_ff: self.d_ff,
            dropout: self.dropout,
            norm: if self.norm == "batch" {
                NormKind::Batch
            } else {
                NormKind::Layer
            },
            activation: if self.activation == "relu" {
                Activation::Relu
            } else {
                Activation::Gelu
            },
            ..TstConfig::default()
        };
        m.fusion_depth = self.fusion_depth;
        m.ablation = self.ablation();
        m.precomputed_text = precomputed_text;
        m
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            loss: LossConfig {
                alpha: self.alpha,
                reduction: if self.reduction == "mean" {
                    Reduction::Mean
                } else {
                    Reduction::Sum
                },
                hinge_space: if self.hinge_space == "logit" {
                    HingeSpace::Logit
                } else {
                    HingeSpace::Probability
                },
                ..LossConfig::default()
            },
            optimizer: OptimizerConfig {
                kind: if self.optimizer == "sgd" {
                    OptimizerKind::Sgd
                } else {
                    OptimizerKind::Adam
                },
                learning_rate: self.learning_rate,
                ..OptimizerConfig::default()
            },
            freeze: Freeze {
                text: self.freeze_text,
                tst: self.freeze_tst,
                fusion: self.freeze_fusion,
            },
            exec: self.exec(),
        }
    }

    pub fn experiment(&self, n_labels: usize, precomputed_text: bool) -> ExperimentConfig {
        let mut e = ExperimentConfig::new(self.model_config(n_labels, precomputed_text));
        e.train = self.train_config();
        e.target = self.target();
        e.train_fraction = self.train_fraction;
        e.k_list = self.k.clone();
        e.per_label = self.per_label;
        e.subset_accuracy = self.subset_accuracy;
        e
    }

    pub fn generator_config(&self) -> Result<GeneratorConfig> {
        let mut g = GeneratorConfig::with_labels(self.n_labels);
        g.n_patients = self.n_patients;
        g.seed = self.seed;
        g.visits_min = self.visits_min;
        g.visits_max = self.visits_max;
        g.onset_prob = self.onset_prob;
        g.note_word_prob = self.note_word_prob;
        g.note_prob = self.note_prob;
        g.note_overlap_prob = self.note_overlap_prob;
        g.lab_prob = self.lab_prob;
        g.noise_word_prob = self.noise_word_prob;
        g.filler_words = self.filler_words;
        if !self.base_rates.is_empty() {
            g.base_rates = self
                .base_rates
                .split(',')
                .map(|v| num("base_rates", v))
                .collect::<Result<_>>()?;
        }
        if !self.comorbidity.is_empty() {
            let d = g.n_labels();
            g.comorbidity = vec![vec![0.0; d]; d];
            for entry in self.comorbidity.split(',') {
                let bad = || {
                    Error::Config(format!(
                        "comorbidity: bad entry {entry:?}, expected i-j:weight"
                    ))
                };
                let (pair, w) = entry.split_once(':').ok_or_else(bad)?;
                let (i, j) = pair.split_once('-').ok_or_else(bad)?;
                let (i, j): (usize, usize) = (num("comorbidity", i)?, num("comorbidity", j)?);
                if i >= d || j >= d {
                    return Err(bad());
                }
                let w: f64 = num("comorbidity", w)?;
                g.comorbidity[i][j] = w;
                g.comorbidity[j][i] = w;
            }
        }
        g.validate()?;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_override() {
        let mut s = Settings::default();
        s.apply_text(
            "# experiment\nseed = 9\nnorm = batch\nk = 1..3\n\nalpha=0.5\n",
            Path::new("x.cfg"),
        )
        .unwrap();
        assert_eq!((s.seed, s.norm.as_str(), s.alpha), (9, "batch", 0.5));
        assert_eq!(s.k, vec![1, 2, 3]);
        s.set("seed", "11").unwrap();
        assert_eq!(s.seed, 11);
        assert_eq!(s.train_config().seed, 11);
        assert_eq!(s.model_config(10, false).tst.norm, NormKind::Batch);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let mut s = Settings::default();
        let err = s
            .apply_text("seed = 1\nbogus = 2\n", Path::new("c.cfg"))
            .unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(s.apply_text("no equals sign", Path::new("c.cfg")).is_err());
        assert!(s.set("task", "regression").is_err());
        assert!(s.set("epochs", "ten").is_err());
    }

    #[test]
    fn k_list_forms() {
        assert_eq!(parse_k_list("3").unwrap(), vec![3]);
        assert_eq!(parse_k_list("1,3,5").unwrap(), vec![1, 3, 5]);
        assert_eq!(parse_k_list("1..=2").unwrap(), vec![1, 2]);
        assert!(parse_k_list("0..2").is_err());
    }

    #[test]
    fn generator_overrides() {
        let mut s = Settings::default();
        s.set("n_patients", "0").unwrap();
        assert!(s.generator_config().is_err());
        s.set("n_patients", "5").unwrap();
        s.set("comorbidity", "0-4:2.0").unwrap();
        let g = s.generator_config().unwrap();
        assert_eq!(g.comorbidity[4][0], 2.0);
        assert_eq!(g.comorbidity[0][9], 0.0);
        s.set("comorbidity", "0-40:2.0").unwrap();
        assert!(s.generator_config().is_err());
    }

    #[test]
    fn heart_failure_task() {
        let mut s = Settings::default();
        s.set("task", "heart-failure").unwrap();
        assert_eq!(s.task(), Task::HeartFailure { label_index: 4 });
        assert_eq!(s.model_config(10, false).output_dim(), 1);
    }
}
