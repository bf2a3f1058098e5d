//! Finite-difference verification of the hand-written backward passes.

use serde::Serialize;

use crate::error::Result;
use crate::exec::ExecMode;
use crate::loss::{HingeSpace, LossConfig};
use crate::model::{EncodedSample, Model, SampleOutput};
use crate::params::ParamSet;
use crate::tst::{Activation, ForwardMode};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Minimum denominator for the relative error. Raised automatically to
    /// `16 * eps * |L| / (step * tolerance)`, the gradient size below which rounding in
    /// the loss and the difference quotient can reach the tolerance on their own.
    pub floor: f64,
    /// Cap on coordinates checked per tensor (evenly strided); `None` checks all.
    pub max_per_tensor: Option<usize>,
    /// Hinge pairs within this margin of their kink disable the check for the batch.
    pub kink_margin: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_per_tensor: None,
            kink_margin: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Denominator floor actually used.
    pub floor: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

struct Probe {
    loss: f64,
    signature: Vec<bool>,
    near_kink: bool,
}

fn hinge_scores(o: &SampleOutput, space: HingeSpace) -> &[f64] {
    match space {
        HingeSpace::Probability => &o.fusion.probs,
        HingeSpace::Logit => &o.fusion.logits,
    }
}

fn probe(
    model: &Model,
    batch: &[&EncodedSample],
    loss_cfg: &LossConfig,
    cfg: &GradCheckConfig,
) -> Result<Probe> {
    let mode = ForwardMode::Train { seed: 0 };
    let (loss, outputs) = model.batch_loss(batch, loss_cfg, mode, ExecMode::Sequential)?;
    let mut signature = Vec::new();
    let mut near_kink = false;
    if model.config.tst.activation == Activation::Relu {
        let seqs: Vec<_> = batch.iter().map(|s| &s.sequence).collect();
        let (_, cache) = model.tst.forward_batch(&seqs, mode, ExecMode::Sequential)?;
        signature.extend(cache.ffn_signs());
    }
    for (o, s) in outputs.iter().zip(batch) {
        for pre in &o.fusion.pre {
            signature.extend(pre.iter().map(|&x| x > 0.0));
        }
        for &p in &o.fusion.probs {
            signature.push(p < loss_cfg.bce_eps || p > 1.0 - loss_cfg.bce_eps);
        }
        let sc = hinge_scores(o, loss_cfg.hinge_space);
        for (i, &ti) in s.target.iter().enumerate() {
            for (j, &tj) in s.target.iter().enumerate() {
                if ti == 1 && tj == 0 {
                    let m = 1.0 - (sc[i] - sc[j]);
                    signature.push(m > 0.0);
                    near_kink |= m.abs() < cfg.kink_margin;
                }
            }
        }
    }
    Ok(Probe {
        loss,
        signature,
        near_kink,
    })
}

/// Compares analytic gradients with central differences on a batch.
///
/// Runs in training mode with dropout disabled so batch-norm uses batch statistics.
/// Coordinates whose perturbation flips a ReLU, hinge or clamp state are skipped.
pub fn gradient_check(
    model: &Model,
    batch: &[EncodedSample],
    loss_cfg: &LossConfig,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut work = model.clone();
    work.tst.config.dropout = 0.0;
    let refs: Vec<&EncodedSample> = batch.iter().collect();
    let analytic = work
        .batch_gradients(
            &refs,
            loss_cfg,
            ForwardMode::Train { seed: 0 },
            ExecMode::Sequential,
        )?
        .grads;
    let base = probe(&work, &refs, loss_cfg, cfg)?;
    let floor = cfg
        .floor
        .max(16.0 * f64::EPSILON * base.loss.abs().max(1.0) / (cfg.step * cfg.tolerance));

    let names: Vec<(String, usize)> = work
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.data.len()))
        .collect();
    let grad_data: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.data.to_vec()).collect();
    let mut tensors = Vec::with_capacity(names.len());
    for (ti, (name, len)) in names.into_iter().enumerate() {
        let stride = match cfg.max_per_tensor {
            Some(m) if m > 0 && len > m => len.div_ceil(m),
            _ => 1,
        };
        let mut check = TensorCheck {
            name,
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
        };
        for c in (0..len).step_by(stride) {
            if base.near_kink {
                check.skipped += 1;
                continue;
            }
            let orig = work.tensors_mut()[ti][c];
            work.tensors_mut()[ti][c] = orig + cfg.step;
            let plus = probe(&work, &refs, loss_cfg, cfg)?;
            work.tensors_mut()[ti][c] = orig - cfg.step;
            let minus = probe(&work, &refs, loss_cfg, cfg)?;
            work.tensors_mut()[ti][c] = orig;
            if plus.signature != base.signature || minus.signature != base.signature {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * cfg.step);
            let err = relative_error(grad_data[ti][c], numeric, floor);
            check.checked += 1;
            check.max_rel_err = check.max_rel_err.max(err);
        }
        tensors.push(check);
    }
    let checked = tensors.iter().map(|t| t.checked).sum();
    let skipped = tensors.iter().map(|t| t.skipped).sum();
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_err < cfg.tolerance,
        tensors,
        checked,
        skipped,
        max_rel_err,
        tolerance: cfg.tolerance,
        floor,
    })
}

/// The small configuration used for gradient checking: `d = 8`, one layer, one head,
/// `d_ff = 16`, no dropout, a few synthetic patients. Returns the model and one batch.
pub fn tiny_setup(
    seed: u64,
    norm: crate::tst::NormKind,
    batch: usize,
) -> Result<(Model, Vec<EncodedSample>)> {
    use crate::ehr::{build_dataset, TargetMode, Task};
    use crate::model::ModelConfig;
    use crate::synth::{generate, GeneratorConfig};

    let mut gen = GeneratorConfig::with_labels(10);
    gen.n_patients = 4;
    gen.seed = seed;
    let records = generate(&gen, ExecMode::Sequential)?;
    let (samples, _) = build_dataset(&records, Task::Multilabel, TargetMode::Current)?;
    let mut config = ModelConfig::new(Task::Multilabel, 10);
    config.text.embed_dim = 8;
    config.text.min_count = 1;
    config.tst.d_model = 8;
    config.tst.n_heads = 1;
    config.tst.n_layers = 1;
    config.tst.d_ff = 16;
    config.tst.dropout = 0.0;
    config.tst.norm = norm;
    let model = Model::fit_new(config, &samples, seed)?;
    let n = batch.min(samples.len());
    let encoded = model.encode_samples(&samples[..n], None)?;
    Ok((model, encoded))
}
