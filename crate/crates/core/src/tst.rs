//! Encoder-only transformer over per-visit temporal features.
//!
//! Sequences are processed as a batch in lockstep so that batch normalization can
//! pool statistics across samples; every other stage is per-sample and runs through
//! [`crate::exec::map`]. Padded steps are excluded as attention keys, from batch
//! statistics and from the final mean pooling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::linalg::{axpy, dot, Matrix};
use crate::params::{init_bias, init_matrix, mix_seed, push_mat, push_vec, ParamSet, TensorRef};

pub const NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    Layer,
    Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    /// tanh approximation.
    Gelu,
    Relu,
}

impl Activation {
    const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let t = (Self::GELU_C * (x + 0.044715 * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let inner = Self::GELU_C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                0.5 * (1.0 + t)
                    + 0.5 * x * (1.0 - t * t) * Self::GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TstConfig {
    pub input_dim: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub norm: NormKind,
    pub activation: Activation,
    /// Fixed sinusoidal positions; only disabled in tests.
    pub positional: bool,
}

impl Default for TstConfig {
    fn default() -> Self {
        Self {
            input_dim: crate::ehr::TEMPORAL_FEATURES,
            max_len: 16,
            d_model: 64,
            n_heads: 8,
            n_layers: 3,
            d_ff: 256,
            dropout: 0.1,
            norm: NormKind::Layer,
            activation: Activation::Gelu,
            positional: true,
        }
    }
}

impl TstConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.max_len == 0 {
            return bad("max_len must be at least 1".into());
        }
        if self.input_dim == 0 || self.d_ff == 0 {
            return bad("input_dim and d_ff must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Eval,
    /// Dropout active and batch statistics used; masks derive from `seed`.
    Train {
        seed: u64,
    },
}

impl ForwardMode {
    pub fn is_train(self) -> bool {
        matches!(self, ForwardMode::Train { .. })
    }
}

/// Scaled visit features with a validity mask (`true` = real visit, `false` = padding).
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSequence {
    pub values: Matrix,
    pub mask: Vec<bool>,
}

impl TemporalSequence {
    pub fn new(values: Matrix) -> Self {
        let mask = vec![true; values.rows()];
        Self { values, mask }
    }

    /// Appends zero rows marked as padding up to `total_len`.
    pub fn padded(values: Matrix, total_len: usize) -> Self {
        let w = values.rows();
        assert!(total_len >= w, "padding shorter than sequence");
        let mut data = values.into_vec();
        let cols = if w == 0 { 0 } else { data.len() / w };
        data.resize(total_len * cols, 0.0);
        let mut mask = vec![true; w];
        mask.resize(total_len, false);
        Self {
            values: Matrix::from_vec(total_len, cols, data),
            mask,
        }
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Sinusoidal table: even columns sin, odd columns cos, position index from 0.
pub fn positional_encoding(len: usize, d: usize) -> Matrix {
    let mut pe = Matrix::zeros(len, d);
    for t in 0..len {
        for i in (0..d).step_by(2) {
            let freq = (10000f64).powf(i as f64 / d as f64);
            let angle = t as f64 / freq;
            pe.set(t, i, angle.sin());
            if i + 1 < d {
                pe.set(t, i + 1, angle.cos());
            }
        }
    }
    pe
}

/// Single-head scaled dot-product attention with a key mask.
///
/// Masked keys receive zero weight; a query with no valid key yields a zero row.
/// Returns the output and the attention weights.
pub fn attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    key_mask: &[bool],
) -> Result<(Matrix, Matrix)> {
    if q.cols() != k.cols() {
        return Err(Error::Shape {
            context: "attention key width",
            expected: q.cols(),
            actual: k.cols(),
        });
    }
    if k.rows() != v.rows() || key_mask.len() != k.rows() {
        return Err(Error::Shape {
            context: "attention key count",
            expected: k.rows(),
            actual: if k.rows() != v.rows() {
                v.rows()
            } else {
                key_mask.len()
            },
        });
    }
    let scale = 1.0 / (q.cols().max(1) as f64).sqrt();
    let (n_q, n_k) = (q.rows(), k.rows());
    let mut probs = Matrix::zeros(n_q, n_k);
    let mut out = Matrix::zeros(n_q, v.cols());
    for i in 0..n_q {
        let qi = q.row(i);
        let p = probs.row_mut(i);
        let mut max = f64::NEG_INFINITY;
        for j in 0..n_k {
            if key_mask[j] {
                let s = dot(qi, k.row(j)) * scale;
                p[j] = s;
                max = max.max(s);
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for j in 0..n_k {
            if key_mask[j] {
                p[j] = (p[j] - max).exp();
                sum += p[j];
            }
        }
        for j in 0..n_k {
            if key_mask[j] {
                p[j] /= sum;
            }
        }
        let o = out.row_mut(i);
        for j in 0..n_k {
            if key_mask[j] {
                axpy(o, p[j], v.row(j));
            }
        }
    }
    Ok((out, probs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub attn: AttentionParams,
    pub norm1: NormParams,
    pub ff_w1: Matrix,
    pub ff_b1: Vec<f64>,
    pub ff_w2: Matrix,
    pub ff_b2: Vec<f64>,
    pub norm2: NormParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TstParams {
    pub input_weight: Matrix,
    pub input_bias: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub output_weight: Matrix,
    pub output_bias: Vec<f64>,
}

impl TstParams {
    pub fn init<R: Rng>(rng: &mut R, cfg: &TstConfig) -> Self {
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                attn: AttentionParams {
                    wq: init_matrix(rng, d, d),
                    bq: init_bias(rng, d, d),
                    wk: init_matrix(rng, d, d),
                    bk: init_bias(rng, d, d),
                    wv: init_matrix(rng, d, d),
                    bv: init_bias(rng, d, d),
                    wo: init_matrix(rng, d, d),
                    bo: init_bias(rng, d, d),
                },
                norm1: NormParams {
                    gamma: vec![1.0; d],
                    beta: vec![0.0; d],
                },
                ff_w1: init_matrix(rng, cfg.d_ff, d),
                ff_b1: init_bias(rng, cfg.d_ff, d),
                ff_w2: init_matrix(rng, d, cfg.d_ff),
                ff_b2: init_bias(rng, d, cfg.d_ff),
                norm2: NormParams {
                    gamma: vec![1.0; d],
                    beta: vec![0.0; d],
                },
            })
            .collect();
        Self {
            input_weight: init_matrix(rng, d, cfg.input_dim),
            input_bias: init_bias(rng, d, cfg.input_dim),
            layers,
            output_weight: init_matrix(rng, d, d),
            output_bias: init_bias(rng, d, d),
        }
    }

    pub(crate) fn tensors_into<'a>(&'a self, out: &mut Vec<TensorRef<'a>>) {
        push_mat(out, "tst.input.weight".into(), &self.input_weight);
        push_vec(out, "tst.input.bias".into(), &self.input_bias);
        for (l, p) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("tst.layer{l}.{s}");
            push_mat(out, n("attn.wq"), &p.attn.wq);
            push_vec(out, n("attn.bq"), &p.attn.bq);
            push_mat(out, n("attn.wk"), &p.attn.wk);
            push_vec(out, n("attn.bk"), &p.attn.bk);
            push_mat(out, n("attn.wv"), &p.attn.wv);
            push_vec(out, n("attn.bv"), &p.attn.bv);
            push_mat(out, n("attn.wo"), &p.attn.wo);
            push_vec(out, n("attn.bo"), &p.attn.bo);
            push_vec(out, n("norm1.gamma"), &p.norm1.gamma);
            push_vec(out, n("norm1.beta"), &p.norm1.beta);
            push_mat(out, n("ffn.w1"), &p.ff_w1);
            push_vec(out, n("ffn.b1"), &p.ff_b1);
            push_mat(out, n("ffn.w2"), &p.ff_w2);
            push_vec(out, n("ffn.b2"), &p.ff_b2);
            push_vec(out, n("norm2.gamma"), &p.norm2.gamma);
            push_vec(out, n("norm2.beta"), &p.norm2.beta);
        }
        push_mat(out, "tst.output.weight".into(), &self.output_weight);
        push_vec(out, "tst.output.bias".into(), &self.output_bias);
    }

    pub(crate) fn tensors_mut_into<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.input_weight.as_mut_slice());
        out.push(&mut self.input_bias);
        for p in &mut self.layers {
            out.push(p.attn.wq.as_mut_slice());
            out.push(&mut p.attn.bq);
            out.push(p.attn.wk.as_mut_slice());
            out.push(&mut p.attn.bk);
            out.push(p.attn.wv.as_mut_slice());
            out.push(&mut p.attn.bv);
            out.push(p.attn.wo.as_mut_slice());
            out.push(&mut p.attn.bo);
            out.push(&mut p.norm1.gamma);
            out.push(&mut p.norm1.beta);
            out.push(p.ff_w1.as_mut_slice());
            out.push(&mut p.ff_b1);
            out.push(p.ff_w2.as_mut_slice());
            out.push(&mut p.ff_b2);
            out.push(&mut p.norm2.gamma);
            out.push(&mut p.norm2.beta);
        }
        out.push(self.output_weight.as_mut_slice());
        out.push(&mut self.output_bias);
    }
}

impl ParamSet for TstParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        self.tensors_into(&mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.tensors_mut_into(&mut out);
        out
    }
}

impl ParamSet for AttentionParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        push_mat(&mut out, "wq".into(), &self.wq);
        push_vec(&mut out, "bq".into(), &self.bq);
        push_mat(&mut out, "wk".into(), &self.wk);
        push_vec(&mut out, "bk".into(), &self.bk);
        push_mat(&mut out, "wv".into(), &self.wv);
        push_vec(&mut out, "bv".into(), &self.bv);
        push_mat(&mut out, "wo".into(), &self.wo);
        push_vec(&mut out, "bo".into(), &self.bo);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.wq.as_mut_slice(),
            &mut self.bq,
            self.wk.as_mut_slice(),
            &mut self.bk,
            self.wv.as_mut_slice(),
            &mut self.bv,
            self.wo.as_mut_slice(),
            &mut self.bo,
        ]
    }
}

/// Batch-norm running statistics for one normalization site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            var: vec![1.0; d],
        }
    }
}

/// Non-trainable buffers: `[norm1, norm2]` per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub layers: Vec<[RunningStats; 2]>,
}

impl NormStats {
    pub fn new(cfg: &TstConfig) -> Self {
        Self {
            layers: (0..cfg.n_layers)
                .map(|_| {
                    [
                        RunningStats::new(cfg.d_model),
                        RunningStats::new(cfg.d_model),
                    ]
                })
                .collect(),
        }
    }
}

fn zeros_like_attn(p: &AttentionParams) -> AttentionParams {
    let mut g = p.clone();
    g.zero();
    g
}

fn cols(m: &Matrix, start: usize, len: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), len);
    for r in 0..m.rows() {
        out.row_mut(r)
            .copy_from_slice(&m.row(r)[start..start + len]);
    }
    out
}

fn add_cols(dst: &mut Matrix, src: &Matrix, start: usize) {
    for r in 0..src.rows() {
        axpy(
            &mut dst.row_mut(r)[start..start + src.cols()],
            1.0,
            src.row(r),
        );
    }
}

struct AttnCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    concat: Matrix,
}

fn mha_forward(
    p: &AttentionParams,
    x: &Matrix,
    mask: &[bool],
    n_heads: usize,
) -> (Matrix, AttnCache) {
    let q = x.linear(&p.wq, &p.bq);
    let k = x.linear(&p.wk, &p.bk);
    let v = x.linear(&p.wv, &p.bv);
    let dk = q.cols() / n_heads;
    let mut concat = Matrix::zeros(x.rows(), q.cols());
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (o, pr) = attention(
            &cols(&q, h * dk, dk),
            &cols(&k, h * dk, dk),
            &cols(&v, h * dk, dk),
            mask,
        )
        .expect("head shapes are consistent by construction");
        add_cols(&mut concat, &o, h * dk);
        probs.push(pr);
    }
    let out = concat.linear(&p.wo, &p.bo);
    (
        out,
        AttnCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            concat,
        },
    )
}

fn mha_backward(
    p: &AttentionParams,
    c: &AttnCache,
    d_out: &Matrix,
    n_heads: usize,
    g: &mut AttentionParams,
) -> Matrix {
    let d_concat = Matrix::linear_backward(&c.concat, &p.wo, d_out, &mut g.wo, &mut g.bo);
    let dk = c.q.cols() / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let w = c.x.rows();
    let mut dq = Matrix::zeros(w, c.q.cols());
    let mut dkm = Matrix::zeros(w, c.k.cols());
    let mut dv = Matrix::zeros(w, c.v.cols());
    for h in 0..n_heads {
        let off = h * dk;
        let pr = &c.probs[h];
        for i in 0..w {
            let d_o = &d_concat.row(i)[off..off + dk];
            // dP_ij = dO_i · V_j ; dS_ij = P_ij (dP_ij - sum_k P_ik dP_ik)
            let mut dp = vec![0.0; w];
            let mut weighted = 0.0;
            for j in 0..w {
                let pij = pr.get(i, j);
                if pij != 0.0 {
                    dp[j] = dot(d_o, &c.v.row(j)[off..off + dk]);
                    weighted += pij * dp[j];
                    axpy(&mut dv.row_mut(j)[off..off + dk], pij, d_o);
                }
            }
            for j in 0..w {
                let pij = pr.get(i, j);
                if pij == 0.0 {
                    continue;
                }
                let ds = pij * (dp[j] - weighted) * scale;
                axpy(
                    &mut dq.row_mut(i)[off..off + dk],
                    ds,
                    &c.k.row(j)[off..off + dk],
                );
                axpy(
                    &mut dkm.row_mut(j)[off..off + dk],
                    ds,
                    &c.q.row(i)[off..off + dk],
                );
            }
        }
    }
    let mut dx = Matrix::linear_backward(&c.x, &p.wq, &dq, &mut g.wq, &mut g.bq);
    dx.add_assign(&Matrix::linear_backward(
        &c.x, &p.wk, &dkm, &mut g.wk, &mut g.bk,
    ));
    dx.add_assign(&Matrix::linear_backward(
        &c.x, &p.wv, &dv, &mut g.wv, &mut g.bv,
    ));
    dx
}

enum NormInv {
    Rows(Vec<Vec<f64>>),
    Features {
        inv: Vec<f64>,
        count: usize,
        batch_stats: bool,
    },
}

struct NormCache {
    xhat: Vec<Matrix>,
    inv: NormInv,
}

fn norm_forward(
    kind: NormKind,
    p: &NormParams,
    stats: &RunningStats,
    xs: &[Matrix],
    masks: &[&[bool]],
    train: bool,
) -> (Vec<Matrix>, NormCache, Option<RunningStats>) {
    let d = p.gamma.len();
    let mut xhat: Vec<Matrix> = xs.iter().map(|x| Matrix::zeros(x.rows(), d)).collect();
    let mut ys: Vec<Matrix> = xs.iter().map(|x| Matrix::zeros(x.rows(), d)).collect();
    let (inv, updated) = match kind {
        NormKind::Layer => {
            let mut invs = Vec::with_capacity(xs.len());
            for (s, x) in xs.iter().enumerate() {
                let mut row_inv = Vec::with_capacity(x.rows());
                for r in 0..x.rows() {
                    let row = x.row(r);
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + NORM_EPS).sqrt();
                    let xh = xhat[s].row_mut(r);
                    for c in 0..d {
                        xh[c] = (row[c] - mean) * inv;
                    }
                    row_inv.push(inv);
                }
                invs.push(row_inv);
            }
            (NormInv::Rows(invs), None)
        }
        NormKind::Batch => {
            let mut count = 0usize;
            let mut mean = vec![0.0; d];
            for (x, m) in xs.iter().zip(masks) {
                for r in (0..x.rows()).filter(|&r| m[r]) {
                    axpy(&mut mean, 1.0, x.row(r));
                    count += 1;
                }
            }
            let (mu, var, updated) = if train && count > 0 {
                mean.iter_mut().for_each(|v| *v /= count as f64);
                let mut var = vec![0.0; d];
                for (x, m) in xs.iter().zip(masks) {
                    for r in (0..x.rows()).filter(|&r| m[r]) {
                        for (c, v) in x.row(r).iter().enumerate() {
                            var[c] += (v - mean[c]) * (v - mean[c]);
                        }
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                let unbias = if count > 1 {
                    count as f64 / (count - 1) as f64
                } else {
                    1.0
                };
                let updated = RunningStats {
                    mean: stats
                        .mean
                        .iter()
                        .zip(&mean)
                        .map(|(r, m)| (1.0 - BATCH_NORM_MOMENTUM) * r + BATCH_NORM_MOMENTUM * m)
                        .collect(),
                    var: stats
                        .var
                        .iter()
                        .zip(&var)
                        .map(|(r, v)| {
                            (1.0 - BATCH_NORM_MOMENTUM) * r + BATCH_NORM_MOMENTUM * v * unbias
                        })
                        .collect(),
                };
                (mean, var, Some(updated))
            } else {
                (stats.mean.clone(), stats.var.clone(), None)
            };
            let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            for (s, x) in xs.iter().enumerate() {
                for r in 0..x.rows() {
                    let row = x.row(r);
                    let xh = xhat[s].row_mut(r);
                    for c in 0..d {
                        xh[c] = (row[c] - mu[c]) * inv[c];
                    }
                }
            }
            (
                NormInv::Features {
                    inv,
                    count,
                    batch_stats: updated.is_some(),
                },
                updated,
            )
        }
    };
    for (y, xh) in ys.iter_mut().zip(&xhat) {
        for r in 0..xh.rows() {
            let (yr, xr) = (y.row_mut(r), xh.row(r));
            for c in 0..d {
                yr[c] = p.gamma[c] * xr[c] + p.beta[c];
            }
        }
    }
    (ys, NormCache { xhat, inv }, updated)
}

fn norm_backward(
    p: &NormParams,
    c: &NormCache,
    dys: &[Matrix],
    masks: &[&[bool]],
    g: &mut NormParams,
) -> Vec<Matrix> {
    let d = p.gamma.len();
    let mut dxhat: Vec<Matrix> = Vec::with_capacity(dys.len());
    for (dy, xh) in dys.iter().zip(&c.xhat) {
        let mut dxh = Matrix::zeros(dy.rows(), d);
        for r in 0..dy.rows() {
            let (dyr, xr) = (dy.row(r), xh.row(r));
            let o = dxh.row_mut(r);
            for k in 0..d {
                g.gamma[k] += dyr[k] * xr[k];
                g.beta[k] += dyr[k];
                o[k] = dyr[k] * p.gamma[k];
            }
        }
        dxhat.push(dxh);
    }
    match &c.inv {
        NormInv::Rows(invs) => dxhat
            .iter()
            .zip(&c.xhat)
            .zip(invs)
            .map(|((dxh, xh), inv)| {
                let mut dx = Matrix::zeros(dxh.rows(), d);
                for r in 0..dxh.rows() {
                    let (a, xr) = (dxh.row(r), xh.row(r));
                    let mean_a = a.iter().sum::<f64>() / d as f64;
                    let mean_ax = dot(a, xr) / d as f64;
                    let o = dx.row_mut(r);
                    for k in 0..d {
                        o[k] = inv[r] * (a[k] - mean_a - xr[k] * mean_ax);
                    }
                }
                dx
            })
            .collect(),
        NormInv::Features {
            inv,
            count,
            batch_stats,
        } => {
            if !*batch_stats {
                return dxhat
                    .into_iter()
                    .map(|mut dxh| {
                        for r in 0..dxh.rows() {
                            for (o, s) in dxh.row_mut(r).iter_mut().zip(inv) {
                                *o *= s;
                            }
                        }
                        dxh
                    })
                    .collect();
            }
            let n = *count as f64;
            let mut sum_a = vec![0.0; d];
            let mut sum_ax = vec![0.0; d];
            for ((dxh, xh), m) in dxhat.iter().zip(&c.xhat).zip(masks) {
                for r in (0..dxh.rows()).filter(|&r| m[r]) {
                    axpy(&mut sum_a, 1.0, dxh.row(r));
                    for k in 0..d {
                        sum_ax[k] += dxh.get(r, k) * xh.get(r, k);
                    }
                }
            }
            dxhat
                .iter()
                .zip(&c.xhat)
                .zip(masks)
                .map(|((dxh, xh), m)| {
                    let mut dx = Matrix::zeros(dxh.rows(), d);
                    for r in (0..dxh.rows()).filter(|&r| m[r]) {
                        let o = dx.row_mut(r);
                        for k in 0..d {
                            o[k] = inv[k]
                                * (dxh.get(r, k) - sum_a[k] / n - xh.get(r, k) * sum_ax[k] / n);
                        }
                    }
                    dx
                })
                .collect()
        }
    }
}

fn dropout_mask(rng: &mut ChaCha8Rng, len: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

fn apply_mask(m: &mut Matrix, mask: Option<&Vec<f64>>) {
    if let Some(mask) = mask {
        for (v, k) in m.as_mut_slice().iter_mut().zip(mask) {
            *v *= k;
        }
    }
}

struct FfnCache {
    pre: Matrix,
    act: Matrix,
}

struct LayerCache {
    attn: Vec<AttnCache>,
    norm1: NormCache,
    n1: Vec<Matrix>,
    ffn: Vec<FfnCache>,
    norm2: NormCache,
}

/// Everything the backward pass needs from a batch forward.
pub struct TstCache {
    masks: Vec<Vec<bool>>,
    inputs: Vec<Matrix>,
    /// Per sample, per layer, `[attention, ffn]` dropout multipliers.
    dropout: Vec<Vec<[Option<Vec<f64>>; 2]>>,
    layers: Vec<LayerCache>,
    pub pooled: Vec<Vec<f64>>,
    /// Batch-norm running statistics after this (training) batch.
    pub updated_stats: Option<NormStats>,
}

impl TstCache {
    /// Sign pattern of every feed-forward pre-activation, used to detect ReLU kinks.
    pub(crate) fn ffn_signs(&self) -> Vec<bool> {
        self.layers
            .iter()
            .flat_map(|l| l.ffn.iter())
            .flat_map(|f| f.pre.as_slice().iter().map(|&x| x > 0.0))
            .collect()
    }
}

/// The temporal encoder: configuration, trainable parameters and norm buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TstEncoder {
    pub config: TstConfig,
    pub params: TstParams,
    pub stats: NormStats,
}

impl TstEncoder {
    pub fn new<R: Rng>(rng: &mut R, config: TstConfig) -> Result<Self> {
        config.validate()?;
        let params = TstParams::init(rng, &config);
        let stats = NormStats::new(&config);
        Ok(Self {
            config,
            params,
            stats,
        })
    }

    /// Input projection plus positional code: one `d_model` row per time step.
    pub fn embed_inputs(&self, values: &Matrix) -> Result<Matrix> {
        if values.rows() > self.config.max_len {
            return Err(Error::Shape {
                context: "sequence length (max_len)",
                expected: self.config.max_len,
                actual: values.rows(),
            });
        }
        if values.cols() != self.config.input_dim {
            return Err(Error::Shape {
                context: "temporal feature count",
                expected: self.config.input_dim,
                actual: values.cols(),
            });
        }
        let mut u = values.linear(&self.params.input_weight, &self.params.input_bias);
        if self.config.positional {
            u.add_assign(&positional_encoding(values.rows(), self.config.d_model));
        }
        Ok(u)
    }

    /// Runs a batch through the encoder. Returns `z_b` per sample and the cache.
    pub fn forward_batch(
        &self,
        seqs: &[&TemporalSequence],
        mode: ForwardMode,
        exec: ExecMode,
    ) -> Result<(Vec<Vec<f64>>, TstCache)> {
        let cfg = &self.config;
        let d = cfg.d_model;
        for s in seqs {
            if s.mask.len() != s.values.rows() {
                return Err(Error::Shape {
                    context: "sequence mask",
                    expected: s.values.rows(),
                    actual: s.mask.len(),
                });
            }
        }
        let train = mode.is_train();
        let masks: Vec<Vec<bool>> = seqs.iter().map(|s| s.mask.clone()).collect();
        let mask_refs: Vec<&[bool]> = masks.iter().map(Vec::as_slice).collect();
        let dropout: Vec<Vec<[Option<Vec<f64>>; 2]>> = seqs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n = s.values.rows() * d;
                match mode {
                    ForwardMode::Train { seed } if cfg.dropout > 0.0 => {
                        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
                        (0..cfg.n_layers)
                            .map(|_| {
                                [
                                    Some(dropout_mask(&mut rng, n, cfg.dropout)),
                                    Some(dropout_mask(&mut rng, n, cfg.dropout)),
                                ]
                            })
                            .collect()
                    }
                    _ => (0..cfg.n_layers).map(|_| [None, None]).collect(),
                }
            })
            .collect();

        let mut xs = seqs
            .iter()
            .map(|s| self.embed_inputs(&s.values))
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<Matrix> = seqs.iter().map(|s| s.values.clone()).collect();
        let mut layers = Vec::with_capacity(cfg.n_layers);
        let mut new_stats = if train && cfg.norm == NormKind::Batch {
            Some(self.stats.clone())
        } else {
            None
        };

        for (l, lp) in self.params.layers.iter().enumerate() {
            let stage1: Vec<(Matrix, AttnCache)> = exec::map(exec, &xs, |i, x| {
                let (mut a, cache) = mha_forward(&lp.attn, x, &masks[i], cfg.n_heads);
                apply_mask(&mut a, dropout[i][l][0].as_ref());
                a.add_assign(x);
                (a, cache)
            });
            let (r1, attn): (Vec<Matrix>, Vec<AttnCache>) = stage1.into_iter().unzip();
            let (n1, norm1, upd1) = norm_forward(
                cfg.norm,
                &lp.norm1,
                &self.stats.layers[l][0],
                &r1,
                &mask_refs,
                train,
            );

            let stage2: Vec<(Matrix, FfnCache)> = exec::map(exec, &n1, |i, x| {
                let pre = x.linear(&lp.ff_w1, &lp.ff_b1);
                let mut act = pre.clone();
                act.as_mut_slice()
                    .iter_mut()
                    .for_each(|v| *v = cfg.activation.apply(*v));
                let mut f = act.linear(&lp.ff_w2, &lp.ff_b2);
                apply_mask(&mut f, dropout[i][l][1].as_ref());
                f.add_assign(x);
                (f, FfnCache { pre, act })
            });
            let (r2, ffn): (Vec<Matrix>, Vec<FfnCache>) = stage2.into_iter().unzip();
            let (n2, norm2, upd2) = norm_forward(
                cfg.norm,
                &lp.norm2,
                &self.stats.layers[l][1],
                &r2,
                &mask_refs,
                train,
            );
            if let Some(ns) = new_stats.as_mut() {
                if let Some(u) = upd1 {
                    ns.layers[l][0] = u;
                }
                if let Some(u) = upd2 {
                    ns.layers[l][1] = u;
                }
            }
            layers.push(LayerCache {
                attn,
                norm1,
                n1,
                ffn,
                norm2,
            });
            xs = n2;
        }

        let pooled: Vec<Vec<f64>> = xs
            .iter()
            .zip(&masks)
            .map(|(x, m)| masked_mean(x, m))
            .collect();
        let mut outputs = Vec::with_capacity(pooled.len());
        for (i, z) in pooled.iter().enumerate() {
            let zb = self.project_output(z)?;
            if zb.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("tst output (batch item {i})")));
            }
            outputs.push(zb);
        }
        Ok((
            outputs,
            TstCache {
                masks,
                inputs,
                dropout,
                layers,
                pooled,
                updated_stats: new_stats,
            },
        ))
    }

    /// Gradients of all encoder parameters given `dL/dz_b` per sample.
    pub fn backward_batch(
        &self,
        cache: &TstCache,
        d_out: &[Vec<f64>],
        exec: ExecMode,
    ) -> TstParams {
        let cfg = &self.config;
        let mut grads = self.params.clone();
        grads.zero();
        let mask_refs: Vec<&[bool]> = cache.masks.iter().map(Vec::as_slice).collect();

        let mut dxs: Vec<Matrix> = Vec::with_capacity(d_out.len());
        for ((dz, pooled), m) in d_out.iter().zip(&cache.pooled).zip(&cache.masks) {
            grads.output_weight.add_outer(dz, pooled);
            axpy(&mut grads.output_bias, 1.0, dz);
            let dpool = self.params.output_weight.matvec_t(dz);
            let n = m.iter().filter(|&&v| v).count();
            let mut dx = Matrix::zeros(m.len(), cfg.d_model);
            if n > 0 {
                let inv = 1.0 / n as f64;
                for r in (0..m.len()).filter(|&r| m[r]) {
                    axpy(dx.row_mut(r), inv, &dpool);
                }
            }
            dxs.push(dx);
        }

        for l in (0..cfg.n_layers).rev() {
            let lp = &self.params.layers[l];
            let lc = &cache.layers[l];
            let gl = &mut grads.layers[l];
            let dr2 = norm_backward(&lp.norm2, &lc.norm2, &dxs, &mask_refs, &mut gl.norm2);

            let ffn_back: Vec<(Matrix, [Matrix; 2], [Vec<f64>; 2])> =
                exec::map(exec, &dr2, |i, dr| {
                    let c = &lc.ffn[i];
                    let mut df = dr.clone();
                    apply_mask(&mut df, cache.dropout[i][l][1].as_ref());
                    let mut gw2 = Matrix::zeros(lp.ff_w2.rows(), lp.ff_w2.cols());
                    let mut gb2 = vec![0.0; lp.ff_b2.len()];
                    let mut dact =
                        Matrix::linear_backward(&c.act, &lp.ff_w2, &df, &mut gw2, &mut gb2);
                    for (g, pre) in dact.as_mut_slice().iter_mut().zip(c.pre.as_slice()) {
                        *g *= cfg.activation.derivative(*pre);
                    }
                    let mut gw1 = Matrix::zeros(lp.ff_w1.rows(), lp.ff_w1.cols());
                    let mut gb1 = vec![0.0; lp.ff_b1.len()];
                    let mut dn1 =
                        Matrix::linear_backward(&lc.n1[i], &lp.ff_w1, &dact, &mut gw1, &mut gb1);
                    dn1.add_assign(dr);
                    (dn1, [gw1, gw2], [gb1, gb2])
                });
            let mut dn1s = Vec::with_capacity(ffn_back.len());
            for (dn1, [gw1, gw2], [gb1, gb2]) in ffn_back {
                gl.ff_w1.add_assign(&gw1);
                gl.ff_w2.add_assign(&gw2);
                axpy(&mut gl.ff_b1, 1.0, &gb1);
                axpy(&mut gl.ff_b2, 1.0, &gb2);
                dn1s.push(dn1);
            }

            let dr1 = norm_backward(&lp.norm1, &lc.norm1, &dn1s, &mask_refs, &mut gl.norm1);
            let attn_back: Vec<(Matrix, AttentionParams)> = exec::map(exec, &dr1, |i, dr| {
                let mut da = dr.clone();
                apply_mask(&mut da, cache.dropout[i][l][0].as_ref());
                let mut g = zeros_like_attn(&lp.attn);
                let mut dx = mha_backward(&lp.attn, &lc.attn[i], &da, cfg.n_heads, &mut g);
                dx.add_assign(dr);
                (dx, g)
            });
            dxs = Vec::with_capacity(attn_back.len());
            for (dx, g) in attn_back {
                gl.attn.add_assign(&g);
                dxs.push(dx);
            }
        }

        for (dx, x) in dxs.iter().zip(&cache.inputs) {
            let _ = Matrix::linear_backward(
                x,
                &self.params.input_weight,
                dx,
                &mut grads.input_weight,
                &mut grads.input_bias,
            );
        }
        grads
    }

    /// Encoded, pooled representation of one sequence before the output projection.
    pub fn encoder_forward(&self, seq: &TemporalSequence, mode: ForwardMode) -> Result<Vec<f64>> {
        let (_, cache) = self.forward_batch(&[seq], mode, ExecMode::Sequential)?;
        Ok(cache.pooled.into_iter().next().expect("one sequence"))
    }

    pub fn project_output(&self, pooled: &[f64]) -> Result<Vec<f64>> {
        if pooled.len() != self.config.d_model {
            return Err(Error::Shape {
                context: "tst output projection",
                expected: self.config.d_model,
                actual: pooled.len(),
            });
        }
        let mut z = self.params.output_weight.matvec(pooled);
        axpy(&mut z, 1.0, &self.params.output_bias);
        Ok(z)
    }

    pub fn forward(&self, seq: &TemporalSequence, mode: ForwardMode) -> Result<Vec<f64>> {
        let (mut out, _) = self.forward_batch(&[seq], mode, ExecMode::Sequential)?;
        Ok(out.pop().expect("one sequence"))
    }
}

fn masked_mean(x: &Matrix, mask: &[bool]) -> Vec<f64> {
    let mut out = vec![0.0; x.cols()];
    let mut n = 0usize;
    for r in (0..x.rows()).filter(|&r| mask[r]) {
        axpy(&mut out, 1.0, x.row(r));
        n += 1;
    }
    if n > 0 {
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
    }
    out
}
