//! The full predictor: text stage, temporal encoder and fusion head wired together,
//! with batched forward/backward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ehr::{join_text, MinMaxScaler, Task, VisitSample};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::fusion::{fuse, FusionOutput, FusionParams};
use crate::loss::{loss_with_grad, LossConfig, LossGrad};
use crate::params::{mix_seed, ParamSet, TensorRef};
use crate::text::{PrecomputedEmbeddings, TextEncoderConfig, TextGrads, TextParams, Vocab};
use crate::tst::{ForwardMode, NormStats, TemporalSequence, TstConfig, TstEncoder, TstParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Ablation {
    #[default]
    Full,
    /// Clinical notes removed; lab text kept.
    NoText,
    /// Lab text removed; notes kept.
    NoLabText,
    /// Temporal embedding replaced by zeros.
    NoTime,
}

impl Ablation {
    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoText => "no_text",
            Ablation::NoLabText => "no_labtext",
            Ablation::NoTime => "no_time",
        }
    }

    /// The text the model sees for a sample under this ablation.
    pub fn text_of(self, s: &VisitSample) -> String {
        match self {
            Ablation::NoText => s.lab_text.clone(),
            Ablation::NoLabText => s.note.clone(),
            Ablation::Full | Ablation::NoTime => join_text(&s.note, &s.lab_text),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    /// Label count of the source records.
    pub n_labels: usize,
    pub text: TextEncoderConfig,
    pub tst: TstConfig,
    pub fusion_depth: usize,
    pub ablation: Ablation,
    /// Text embeddings come from a precomputed file instead of the built-in encoder.
    pub precomputed_text: bool,
}

impl ModelConfig {
    pub fn new(task: Task, n_labels: usize) -> Self {
        Self {
            task,
            n_labels,
            text: TextEncoderConfig::default(),
            tst: TstConfig::default(),
            fusion_depth: 1,
            ablation: Ablation::Full,
            precomputed_text: false,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.task.output_dim(self.n_labels)
    }

    pub fn validate(&self) -> Result<()> {
        self.text.validate()?;
        self.tst.validate()?;
        if self.n_labels == 0 {
            return Err(Error::Config("label count must be positive".into()));
        }
        if self.fusion_depth == 0 {
            return Err(Error::Config("fusion depth must be at least 1".into()));
        }
        if let Task::HeartFailure { label_index } = self.task {
            if label_index >= self.n_labels {
                return Err(Error::Config(format!(
                    "heart-failure label {label_index} out of range for {} labels",
                    self.n_labels
                )));
            }
        }
        if self.precomputed_text && matches!(self.ablation, Ablation::NoText | Ablation::NoLabText)
        {
            return Err(Error::Config(
                "text ablations need the built-in text encoder, not precomputed embeddings".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TextInput {
    Tokens(Vec<usize>),
    Dense(Vec<f64>),
}

/// A sample ready for the network: token ids (or a dense embedding), a scaled
/// sequence truncated to the most recent `max_len` visits, and the target.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub patient_id: String,
    pub visit_index: usize,
    pub text: TextInput,
    pub sequence: TemporalSequence,
    pub target: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub scaler: MinMaxScaler,
    pub text: TextParams,
    pub tst: TstEncoder,
    pub fusion: FusionParams,
}

/// Gradients with the same tensor order as [`Model`]'s trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub text: TextParams,
    pub tst: TstParams,
    pub fusion: FusionParams,
}

impl ParamSet for ModelGrads {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut v = Vec::new();
        self.text.tensors_into(&mut v);
        self.tst.tensors_into(&mut v);
        self.fusion.tensors_into(&mut v);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        self.text.tensors_mut_into(&mut v);
        self.tst.tensors_mut_into(&mut v);
        self.fusion.tensors_mut_into(&mut v);
        v
    }
}

impl ParamSet for Model {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut v = Vec::new();
        self.text.tensors_into(&mut v);
        self.tst.params.tensors_into(&mut v);
        self.fusion.tensors_into(&mut v);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        self.text.tensors_mut_into(&mut v);
        self.tst.params.tensors_mut_into(&mut v);
        self.fusion.tensors_mut_into(&mut v);
        v
    }
}

/// Per-sample forward results.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub z_a: Vec<f64>,
    pub z_b: Vec<f64>,
    pub fusion: FusionOutput,
}

pub struct BatchResult {
    pub loss: LossGrad,
    pub grads: ModelGrads,
    pub outputs: Vec<SampleOutput>,
    pub updated_stats: Option<NormStats>,
}

impl Model {
    /// Builds a model with freshly initialised weights for the given vocabulary and scaler.
    pub fn init(
        config: ModelConfig,
        vocab: Vocab,
        scaler: MinMaxScaler,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.tst.d_model;
        let vocab_rows = if config.precomputed_text {
            0
        } else {
            vocab.len()
        };
        let text = TextParams::init(&mut rng, vocab_rows, config.text.embed_dim, d);
        let tst = TstEncoder::new(&mut rng, config.tst.clone())?;
        let fusion =
            FusionParams::init(&mut rng, 2 * d, d, config.fusion_depth, config.output_dim());
        Ok(Self {
            config,
            vocab,
            scaler,
            text,
            tst,
            fusion,
        })
    }

    /// Fits the vocabulary and scaler on training samples only, then initialises weights.
    pub fn fit_new(config: ModelConfig, train: &[VisitSample], seed: u64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("training samples"));
        }
        let vocab = if config.precomputed_text {
            Vocab::default()
        } else {
            let texts: Vec<String> = train.iter().map(|s| config.ablation.text_of(s)).collect();
            Vocab::fit(texts.iter().map(String::as_str), config.text.min_count)
        };
        let scaler = MinMaxScaler::fit_samples(train)?;
        Self::init(config, vocab, scaler, seed)
    }

    pub fn zero_grads(&self) -> ModelGrads {
        let mut g = ModelGrads {
            text: self.text.clone(),
            tst: self.tst.params.clone(),
            fusion: self.fusion.clone(),
        };
        g.zero();
        g
    }

    pub fn encode_sample(
        &self,
        sample: &VisitSample,
        embeddings: Option<&PrecomputedEmbeddings>,
    ) -> Result<EncodedSample> {
        let out_dim = self.config.output_dim();
        if sample.target.len() != out_dim {
            return Err(Error::LabelMismatch {
                model: out_dim,
                data: sample.target.len(),
            });
        }
        let text = if self.config.precomputed_text {
            let emb = embeddings.ok_or_else(|| {
                Error::Config(
                    "model expects precomputed text embeddings but none were given".into(),
                )
            })?;
            if emb.dim() != self.config.text.embed_dim {
                return Err(Error::Shape {
                    context: "precomputed embedding width",
                    expected: self.config.text.embed_dim,
                    actual: emb.dim(),
                });
            }
            TextInput::Dense(emb.lookup(&sample.patient_id, sample.visit_index)?.to_vec())
        } else {
            TextInput::Tokens(self.vocab.encode(&self.config.ablation.text_of(sample)))
        };
        let hist = &sample.temporal_history;
        let start = hist.len().saturating_sub(self.config.tst.max_len);
        let values = self.scaler.transform(&hist[start..])?;
        Ok(EncodedSample {
            patient_id: sample.patient_id.clone(),
            visit_index: sample.visit_index,
            text,
            sequence: TemporalSequence::new(values),
            target: sample.target.clone(),
        })
    }

    pub fn encode_samples(
        &self,
        samples: &[VisitSample],
        embeddings: Option<&PrecomputedEmbeddings>,
    ) -> Result<Vec<EncodedSample>> {
        samples
            .iter()
            .map(|s| self.encode_sample(s, embeddings))
            .collect()
    }

    fn text_embedding(&self, input: &TextInput) -> Vec<f64> {
        match input {
            TextInput::Tokens(ids) => self.text.encode_ids(ids),
            TextInput::Dense(v) => v.clone(),
        }
    }

    pub(crate) fn run_forward(
        &self,
        batch: &[&EncodedSample],
        mode: ForwardMode,
        exec: ExecMode,
    ) -> Result<(
        Vec<Vec<f64>>,
        Vec<SampleOutput>,
        Option<crate::tst::TstCache>,
    )> {
        let text: Vec<Result<(Vec<f64>, Vec<f64>)>> = exec::map(exec, batch, |_, s| {
            let h = self.text_embedding(&s.text);
            let z = self.text.project(&h)?;
            Ok((h, z))
        });
        let text = text.into_iter().collect::<Result<Vec<_>>>()?;
        let d = self.config.tst.d_model;
        let (z_bs, cache) = if self.config.ablation == Ablation::NoTime {
            (vec![vec![0.0; d]; batch.len()], None)
        } else {
            let seqs: Vec<&TemporalSequence> = batch.iter().map(|s| &s.sequence).collect();
            let (z, c) = self.tst.forward_batch(&seqs, mode, exec)?;
            (z, Some(c))
        };
        let pairs: Vec<(&Vec<f64>, &Vec<f64>)> = text.iter().map(|(_, z)| z).zip(&z_bs).collect();
        let fused: Vec<Result<SampleOutput>> = exec::map(exec, &pairs, |_, (z_a, z_b)| {
            let fusion = self.fusion.forward(&fuse(z_a, z_b))?;
            Ok(SampleOutput {
                z_a: (*z_a).clone(),
                z_b: (*z_b).clone(),
                fusion,
            })
        });
        let outputs = fused.into_iter().collect::<Result<Vec<_>>>()?;
        let hs = text.into_iter().map(|(h, _)| h).collect();
        Ok((hs, outputs, cache))
    }

    /// Eval-mode forward over any number of samples, processed in chunks.
    pub fn predict(&self, samples: &[EncodedSample], exec: ExecMode) -> Result<Vec<SampleOutput>> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(CHUNK) {
            let refs: Vec<&EncodedSample> = chunk.iter().collect();
            out.extend(self.run_forward(&refs, ForwardMode::Eval, exec)?.1);
        }
        Ok(out)
    }

    /// Loss over a batch and gradients of every trainable tensor.
    pub fn batch_gradients(
        &self,
        batch: &[&EncodedSample],
        loss_cfg: &LossConfig,
        mode: ForwardMode,
        exec: ExecMode,
    ) -> Result<BatchResult> {
        let (hs, outputs, cache) = self.run_forward(batch, mode, exec)?;
        let targets: Vec<Vec<u8>> = batch.iter().map(|s| s.target.clone()).collect();
        let probs: Vec<Vec<f64>> = outputs.iter().map(|o| o.fusion.probs.clone()).collect();
        let logits: Vec<Vec<f64>> = outputs.iter().map(|o| o.fusion.logits.clone()).collect();
        let loss = loss_with_grad(&targets, &logits, &probs, loss_cfg)?;
        let d_logits = loss.logit_gradient(&probs);

        let d = self.config.tst.d_model;
        let per_sample: Vec<(Vec<f64>, FusionParams, TextGrads)> =
            exec::map_range(exec, batch.len(), |i| {
                let (dz_in, fg) = self.fusion.backward(&outputs[i].fusion, &d_logits[i]);
                let (dz_a, dz_b) = dz_in.split_at(d);
                let mut tg = TextGrads::zeros(&self.text);
                let ids = match &batch[i].text {
                    TextInput::Tokens(ids) => Some(ids.as_slice()),
                    TextInput::Dense(_) => None,
                };
                self.text.backward(&hs[i], ids, dz_a, &mut tg);
                (dz_b.to_vec(), fg, tg)
            });

        let mut grads = self.zero_grads();
        let mut dz_bs = Vec::with_capacity(batch.len());
        for (dz_b, fg, tg) in per_sample {
            grads.fusion.add_assign(&fg);
            tg.accumulate_into(&mut grads.text);
            dz_bs.push(dz_b);
        }
        let mut updated_stats = None;
        if let Some(cache) = cache {
            grads.tst = self.tst.backward_batch(&cache, &dz_bs, exec);
            updated_stats = cache.updated_stats;
        }
        Ok(BatchResult {
            loss,
            grads,
            outputs,
            updated_stats,
        })
    }

    /// Scalar loss of a batch without gradients (used by finite-difference checks).
    pub fn batch_loss(
        &self,
        batch: &[&EncodedSample],
        loss_cfg: &LossConfig,
        mode: ForwardMode,
        exec: ExecMode,
    ) -> Result<(f64, Vec<SampleOutput>)> {
        let (_, outputs, _) = self.run_forward(batch, mode, exec)?;
        let targets: Vec<Vec<u8>> = batch.iter().map(|s| s.target.clone()).collect();
        let probs: Vec<Vec<f64>> = outputs.iter().map(|o| o.fusion.probs.clone()).collect();
        let logits: Vec<Vec<f64>> = outputs.iter().map(|o| o.fusion.logits.clone()).collect();
        Ok((
            loss_with_grad(&targets, &logits, &probs, loss_cfg)?.loss,
            outputs,
        ))
    }

    /// Derives a per-batch dropout seed from the training seed, epoch and batch index.
    pub fn dropout_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
        mix_seed(mix_seed(seed, epoch as u64), batch as u64)
    }
}
