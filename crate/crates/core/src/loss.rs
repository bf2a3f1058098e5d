//! Hybrid objective: binary cross-entropy mixed with a pairwise multilabel hinge.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Reduction {
    /// Sum over the batch (hinge pairs are still divided by the batch size).
    #[default]
    Sum,
    /// The summed loss divided by the batch size.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum HingeSpace {
    #[default]
    Probability,
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub bce_eps: f64,
    pub reduction: Reduction,
    pub hinge_space: HingeSpace,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.95,
            bce_eps: 1e-7,
            reduction: Reduction::Sum,
            hinge_space: HingeSpace::Probability,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.bce_eps > 0.0 && self.bce_eps < 0.5) {
            return Err(Error::Config(format!(
                "bce eps must lie in (0, 0.5), got {}",
                self.bce_eps
            )));
        }
        Ok(())
    }
}

fn check_shapes<T>(targets: &[Vec<u8>], scores: &[Vec<T>]) -> Result<()> {
    if targets.len() != scores.len() {
        return Err(Error::Shape {
            context: "loss batch size",
            expected: targets.len(),
            actual: scores.len(),
        });
    }
    for (t, s) in targets.iter().zip(scores) {
        if t.len() != s.len() {
            return Err(Error::Shape {
                context: "loss label count",
                expected: t.len(),
                actual: s.len(),
            });
        }
    }
    Ok(())
}

#[inline]
fn bce_term(o: u8, p: f64, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    if o == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[inline]
fn bce_term_grad(o: u8, p: f64, eps: f64) -> f64 {
    if p <= eps || p >= 1.0 - eps {
        return 0.0;
    }
    if o == 1 {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

/// Summed BCE over every sample and label, with probabilities clamped to `[eps, 1-eps]`.
pub fn bce_loss(targets: &[Vec<u8>], probs: &[Vec<f64>], eps: f64) -> Result<f64> {
    check_shapes(targets, probs)?;
    Ok(targets
        .iter()
        .zip(probs)
        .flat_map(|(t, p)| t.iter().zip(p))
        .map(|(&o, &p)| bce_term(o, p, eps))
        .sum())
}

/// Sum over positive/negative label pairs of `max(0, 1 - (s_i - s_j))`, divided by the
/// number of samples. Samples lacking positives or negatives contribute nothing.
pub fn hinge_loss(targets: &[Vec<u8>], scores: &[Vec<f64>]) -> Result<f64> {
    check_shapes(targets, scores)?;
    if targets.is_empty() {
        return Ok(0.0);
    }
    let n = targets.len() as f64;
    let mut total = 0.0;
    for (t, s) in targets.iter().zip(scores) {
        for i in (0..t.len()).filter(|&i| t[i] == 1) {
            for j in (0..t.len()).filter(|&j| t[j] == 0) {
                total += (1.0 - (s[i] - s[j])).max(0.0) / n;
            }
        }
    }
    Ok(total)
}

/// `alpha * bce + (1 - alpha) * hinge`, with the hinge on probabilities or on logits
/// recovered from them, depending on the config.
pub fn combined_loss(targets: &[Vec<u8>], probs: &[Vec<f64>], cfg: &LossConfig) -> Result<f64> {
    let logits: Vec<Vec<f64>> = match cfg.hinge_space {
        HingeSpace::Probability => probs.to_vec(),
        HingeSpace::Logit => probs
            .iter()
            .map(|p| p.iter().map(|&v| (v / (1.0 - v)).ln()).collect())
            .collect(),
    };
    Ok(loss_with_grad(targets, &logits, probs, cfg)?.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub bce: f64,
    pub hinge: f64,
    /// `dL/dprob` per sample.
    pub d_prob: Vec<Vec<f64>>,
    /// `dL/dlogit` contributions that bypass the sigmoid (logit-space hinge).
    pub d_logit: Vec<Vec<f64>>,
}

impl LossGrad {
    /// Total gradient w.r.t. the logits, chaining `d_prob` through the sigmoid.
    pub fn logit_gradient(&self, probs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        self.d_prob
            .iter()
            .zip(&self.d_logit)
            .zip(probs)
            .map(|((dp, dl), p)| {
                dp.iter()
                    .zip(dl)
                    .zip(p)
                    .map(|((a, b), p)| a * p * (1.0 - p) + b)
                    .collect()
            })
            .collect()
    }
}

/// Loss value and (sub)gradients. `logits` is only read for a logit-space hinge.
pub fn loss_with_grad(
    targets: &[Vec<u8>],
    logits: &[Vec<f64>],
    probs: &[Vec<f64>],
    cfg: &LossConfig,
) -> Result<LossGrad> {
    check_shapes(targets, probs)?;
    check_shapes(targets, logits)?;
    let scores = match cfg.hinge_space {
        HingeSpace::Probability => probs,
        HingeSpace::Logit => logits,
    };
    let bce = bce_loss(targets, probs, cfg.bce_eps)?;
    let hinge = hinge_loss(targets, scores)?;
    let batch = targets.len().max(1) as f64;
    let red = match cfg.reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / batch,
    };
    let a = cfg.alpha;
    let mut d_prob: Vec<Vec<f64>> = targets
        .iter()
        .zip(probs)
        .map(|(t, p)| {
            t.iter()
                .zip(p)
                .map(|(&o, &p)| red * a * bce_term_grad(o, p, cfg.bce_eps))
                .collect()
        })
        .collect();
    let mut d_logit: Vec<Vec<f64>> = targets.iter().map(|t| vec![0.0; t.len()]).collect();
    let hinge_grads = match cfg.hinge_space {
        HingeSpace::Probability => &mut d_prob,
        HingeSpace::Logit => &mut d_logit,
    };
    let step = red * (1.0 - a) / batch;
    for ((t, s), g) in targets.iter().zip(scores).zip(hinge_grads.iter_mut()) {
        for i in (0..t.len()).filter(|&i| t[i] == 1) {
            for j in (0..t.len()).filter(|&j| t[j] == 0) {
                if 1.0 - (s[i] - s[j]) > 0.0 {
                    g[i] -= step;
                    g[j] += step;
                }
            }
        }
    }
    Ok(LossGrad {
        loss: red * (a * bce + (1.0 - a) * hinge),
        bce,
        hinge,
        d_prob,
        d_logit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EPS: f64 = 1e-7;

    #[test]
    fn bce_examples() {
        let perfect = bce_loss(&[vec![1, 0]], &[vec![1.0 - EPS, EPS]], EPS).unwrap();
        assert!((perfect - 2.0 * -(1.0 - EPS).ln()).abs() < 1e-15);
        assert!(perfect < 3e-7);
        let half = bce_loss(&[vec![1]], &[vec![0.5]], EPS).unwrap();
        assert!((half - 0.693147).abs() < 1e-6);
        assert!(bce_loss(&[vec![1, 0]], &[vec![0.5]], EPS).is_err());
    }

    #[test]
    fn bce_matches_scalar_loop() {
        let t: Vec<Vec<u8>> = vec![vec![1, 0, 1], vec![0, 0, 1]];
        let p: Vec<Vec<f64>> = vec![vec![0.9, 0.2, 0.4], vec![0.05, 0.6, 0.99]];
        let mut oracle = 0.0;
        for s in 0..2 {
            for k in 0..3 {
                let (o, q) = (t[s][k] as f64, p[s][k]);
                oracle -= o * q.ln() + (1.0 - o) * (1.0 - q).ln();
            }
        }
        assert!((bce_loss(&t, &p, EPS).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn hinge_examples() {
        let h = hinge_loss(&[vec![1, 0]], &[vec![0.9, 0.2]]).unwrap();
        assert!((h - 0.3).abs() < 1e-12);
        assert_eq!(hinge_loss(&[vec![1, 0]], &[vec![1.5, 0.2]]).unwrap(), 0.0);
        assert_eq!(
            hinge_loss(&[vec![1, 1, 1]], &[vec![0.1, 0.2, 0.3]]).unwrap(),
            0.0
        );
        // Two samples: pair sum divided by |P| = 2.
        let h2 = hinge_loss(&[vec![1, 0], vec![0, 1]], &[vec![0.9, 0.2], vec![0.9, 0.2]]).unwrap();
        assert!((h2 - (0.3 + 1.7) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn combined_mixes_with_alpha() {
        let t = [vec![1, 0]];
        let p = [vec![0.9, 0.2]];
        let bce = bce_loss(&t, &p, EPS).unwrap();
        let hinge = hinge_loss(&t, &p).unwrap();
        let cfg = |alpha| LossConfig {
            alpha,
            ..LossConfig::default()
        };
        assert_eq!(combined_loss(&t, &p, &cfg(1.0)).unwrap(), bce);
        assert_eq!(combined_loss(&t, &p, &cfg(0.0)).unwrap(), hinge);
        let mixed: f64 = 0.95 * 0.693147 + 0.05 * 0.3;
        assert!((mixed - 0.673490).abs() < 1e-6);
        assert!(
            (combined_loss(&t, &p, &cfg(0.95)).unwrap() - (0.95 * bce + 0.05 * hinge)).abs()
                < 1e-15
        );
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig {
            alpha: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            bce_eps: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    fn targets_and_probs() -> impl Strategy<Value = (Vec<Vec<u8>>, Vec<Vec<f64>>)> {
        (1usize..5, 1usize..8).prop_flat_map(|(b, d)| {
            (
                prop::collection::vec(prop::collection::vec(0u8..=1, d), b),
                prop::collection::vec(prop::collection::vec(0.001f64..0.999, d), b),
            )
        })
    }

    proptest! {
        #[test]
        fn combined_is_nonnegative((t, p) in targets_and_probs(), alpha in 0.0f64..=1.0) {
            let cfg = LossConfig { alpha, ..Default::default() };
            prop_assert!(combined_loss(&t, &p, &cfg).unwrap() >= 0.0);
        }

        #[test]
        fn hinge_ignores_constant_shift((t, p) in targets_and_probs(), c in -5.0f64..5.0) {
            let shifted: Vec<Vec<f64>> = p.iter().map(|r| r.iter().map(|v| v + c).collect()).collect();
            let a = hinge_loss(&t, &p).unwrap();
            let b = hinge_loss(&t, &shifted).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn bce_decreases_towards_target(o in 0u8..=1, p in 0.01f64..0.98, step in 0.001f64..0.01) {
            let closer = if o == 1 { p + step } else { p - step };
            prop_assume!(closer > 0.0 && closer < 1.0);
            prop_assert!(bce_loss(&[vec![o]], &[vec![closer]], EPS).unwrap() < bce_loss(&[vec![o]], &[vec![p]], EPS).unwrap());
        }

        #[test]
        fn gradient_matches_finite_differences((t, p) in targets_and_probs(), alpha in 0.0f64..=1.0, mean in any::<bool>()) {
            let cfg = LossConfig {
                alpha,
                reduction: if mean { Reduction::Mean } else { Reduction::Sum },
                ..Default::default()
            };
            let g = loss_with_grad(&t, &p, &p, &cfg).unwrap();
            let h = 1e-6;
            for s in 0..t.len() {
                for k in 0..t[s].len() {
                    let near_kink = (0..t[s].len()).any(|j| {
                        let (i, jj) = if t[s][k] == 1 { (k, j) } else { (j, k) };
                        t[s][i] == 1 && t[s][jj] == 0 && (1.0 - (p[s][i] - p[s][jj])).abs() < 1e-3
                    });
                    if near_kink {
                        continue;
                    }
                    let mut pp = p.clone();
                    pp[s][k] += h;
                    let mut pm = p.clone();
                    pm[s][k] -= h;
                    let fd = (combined_loss(&t, &pp, &cfg).unwrap() - combined_loss(&t, &pm, &cfg).unwrap()) / (2.0 * h);
                    let a = g.d_prob[s][k];
                    let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
                    prop_assert!(rel < 1e-4, "fd {} analytic {}", fd, a);
                }
            }
        }
    }
}
