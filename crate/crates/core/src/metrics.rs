//! Classification and ranking metrics for multilabel predictions.
//!
//! Conventions:
//! - per-label precision/recall/F1 with a zero denominator are 0, and labels with no
//!   support still count towards macro averages;
//! - `accuracy` is the mean over all (sample, label) cells;
//! - top-k ties are broken by the lower label index;
//! - samples without any relevant label are skipped by Recall@k / NDCG@k and counted.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::THRESHOLD;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub targets: Vec<Vec<u8>>,
    pub scores: Vec<Vec<f64>>,
    pub predicted: Vec<Vec<u8>>,
}

impl PredictionSet {
    pub fn new(
        targets: Vec<Vec<u8>>,
        scores: Vec<Vec<f64>>,
        predicted: Vec<Vec<u8>>,
    ) -> Result<Self> {
        let n = targets.len();
        if scores.len() != n || predicted.len() != n {
            return Err(Error::Shape {
                context: "prediction set sample count",
                expected: n,
                actual: if scores.len() != n {
                    scores.len()
                } else {
                    predicted.len()
                },
            });
        }
        let d = targets.first().map_or(0, Vec::len);
        for ((t, s), p) in targets.iter().zip(&scores).zip(&predicted) {
            for len in [t.len(), s.len(), p.len()] {
                if len != d {
                    return Err(Error::Shape {
                        context: "prediction set label count",
                        expected: d,
                        actual: len,
                    });
                }
            }
            if t.iter().chain(p).any(|&b| b > 1) {
                return Err(Error::Config("prediction bits must be 0 or 1".into()));
            }
        }
        Ok(Self {
            targets,
            scores,
            predicted,
        })
    }

    /// Thresholds `scores` at 0.5 (inclusive) to get the predicted bits.
    pub fn from_scores(targets: Vec<Vec<u8>>, scores: Vec<Vec<f64>>) -> Result<Self> {
        let predicted = scores
            .iter()
            .map(|s| s.iter().map(|&p| u8::from(p >= THRESHOLD)).collect())
            .collect();
        Self::new(targets, scores, predicted)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_labels(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: usize,
    pub support: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn per_label_metrics(set: &PredictionSet) -> Vec<LabelMetrics> {
    (0..set.n_labels())
        .map(|k| {
            let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
            for (t, p) in set.targets.iter().zip(&set.predicted) {
                match (t[k], p[k]) {
                    (1, 1) => tp += 1,
                    (0, 1) => fp += 1,
                    (1, 0) => fn_ += 1,
                    _ => tn += 1,
                }
            }
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            LabelMetrics {
                label: k,
                support: tp + fn_,
                tp,
                fp,
                fn_,
                tn,
                precision,
                recall,
                f1,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricReport {
    pub n_samples: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1_macro: f64,
    pub f1_weighted: f64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub subset_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub auc: Option<f64>,
    pub recall_at_k: BTreeMap<usize, f64>,
    pub ndcg_at_k: BTreeMap<usize, f64>,
    /// Samples without relevant labels, excluded from the ranking metrics.
    pub ranking_skipped: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub per_label: Vec<LabelMetrics>,
}

/// Macro precision/recall/F1, support-weighted F1 and cell accuracy.
pub fn classification_metrics(set: &PredictionSet) -> Result<MetricReport> {
    if set.is_empty() {
        return Err(Error::Empty("prediction set"));
    }
    let labels = per_label_metrics(set);
    let d = labels.len().max(1) as f64;
    let total_support: usize = labels.iter().map(|l| l.support).sum();
    let f1_weighted = if total_support == 0 {
        0.0
    } else {
        labels.iter().map(|l| l.f1 * l.support as f64).sum::<f64>() / total_support as f64
    };
    let cells = set.len() * set.n_labels();
    let correct: usize = set
        .targets
        .iter()
        .zip(&set.predicted)
        .map(|(t, p)| t.iter().zip(p).filter(|(a, b)| a == b).count())
        .sum();
    Ok(MetricReport {
        n_samples: set.len(),
        precision: labels.iter().map(|l| l.precision).sum::<f64>() / d,
        recall: labels.iter().map(|l| l.recall).sum::<f64>() / d,
        f1_macro: labels.iter().map(|l| l.f1).sum::<f64>() / d,
        f1_weighted,
        accuracy: ratio(correct, cells),
        per_label: labels,
        ..Default::default()
    })
}

/// Fraction of samples whose whole predicted vector equals the target.
pub fn subset_accuracy(set: &PredictionSet) -> f64 {
    ratio(
        set.targets
            .iter()
            .zip(&set.predicted)
            .filter(|(t, p)| t == p)
            .count(),
        set.len(),
    )
}

/// Indices of the `k` highest scores, best first; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn check_k(set: &PredictionSet, k: usize) -> Result<()> {
    if k == 0 || k > set.n_labels() {
        return Err(Error::Config(format!(
            "k must lie in 1..={}, got {k}",
            set.n_labels()
        )));
    }
    Ok(())
}

/// Mean ranking score over samples with at least one relevant label, and the number skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingScore {
    pub value: f64,
    pub skipped: usize,
}

pub fn recall_at_k(set: &PredictionSet, k: usize) -> Result<RankingScore> {
    check_k(set, k)?;
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for (t, s) in set.targets.iter().zip(&set.scores) {
        let relevant = t.iter().filter(|&&b| b == 1).count();
        if relevant == 0 {
            skipped += 1;
            continue;
        }
        let hits = top_k(s, k).iter().filter(|&&i| t[i] == 1).count();
        sum += hits as f64 / relevant as f64;
        n += 1;
    }
    Ok(RankingScore {
        value: if n == 0 { 0.0 } else { sum / n as f64 },
        skipped,
    })
}

/// NDCG with binary gains; the ideal DCG covers the best `min(k, |relevant|)` positions.
pub fn ndcg_at_k(set: &PredictionSet, k: usize) -> Result<RankingScore> {
    check_k(set, k)?;
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let (mut sum, mut n, mut skipped) = (0.0, 0usize, 0usize);
    for (t, s) in set.targets.iter().zip(&set.scores) {
        let relevant = t.iter().filter(|&&b| b == 1).count();
        let ideal: f64 = (1..=relevant.min(k)).map(discount).sum();
        if ideal == 0.0 {
            skipped += 1;
            continue;
        }
        let dcg: f64 = top_k(s, k)
            .iter()
            .enumerate()
            .filter(|(_, &i)| t[i] == 1)
            .map(|(r, _)| discount(r + 1))
            .sum();
        sum += dcg / ideal;
        n += 1;
    }
    Ok(RankingScore {
        value: if n == 0 { 0.0 } else { sum / n as f64 },
        skipped,
    })
}

/// Rank-based (Mann-Whitney) area under the ROC curve, ties counted as one half.
/// `None` when either class is absent.
pub fn auc(labels: &[u8], scores: &[f64]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&b| b == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // positions i..=j share the average of ranks i+1..=j+1
        let avg = (i + j + 2) as f64 / 2.0;
        for &s in &idx[i..=j] {
            if labels[s] == 1 {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalOptions {
    pub k_list: Vec<usize>,
    pub subset_accuracy: bool,
    pub per_label: bool,
}

/// Full report: classification block, ranking metrics for every `k` that fits the
/// label count, and AUC when there is a single output.
pub fn evaluate(set: &PredictionSet, opts: &EvalOptions) -> Result<MetricReport> {
    let mut report = classification_metrics(set)?;
    if !opts.per_label {
        report.per_label.clear();
    }
    if opts.subset_accuracy {
        report.subset_accuracy = Some(subset_accuracy(set));
    }
    for &k in opts
        .k_list
        .iter()
        .filter(|&&k| k >= 1 && k <= set.n_labels())
    {
        let r = recall_at_k(set, k)?;
        let g = ndcg_at_k(set, k)?;
        report.recall_at_k.insert(k, r.value);
        report.ndcg_at_k.insert(k, g.value);
        report.ranking_skipped = r.skipped;
    }
    if set.n_labels() == 1 {
        let labels: Vec<u8> = set.targets.iter().map(|t| t[0]).collect();
        let scores: Vec<f64> = set.scores.iter().map(|s| s[0]).collect();
        report.auc = auc(&labels, &scores);
    }
    Ok(report)
}

impl MetricReport {
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("precision".to_string(), self.precision),
            ("recall".to_string(), self.recall),
            ("f1_macro".to_string(), self.f1_macro),
            ("f1_weighted".to_string(), self.f1_weighted),
            ("accuracy".to_string(), self.accuracy),
        ];
        if let Some(v) = self.subset_accuracy {
            rows.push(("subset_accuracy".into(), v));
        }
        if let Some(v) = self.auc {
            rows.push(("auc".into(), v));
        }
        rows.extend(
            self.recall_at_k
                .iter()
                .map(|(k, v)| (format!("recall@{k}"), *v)),
        );
        rows.extend(
            self.ndcg_at_k
                .iter()
                .map(|(k, v)| (format!("ndcg@{k}"), *v)),
        );
        rows.push(("ranking_skipped".into(), self.ranking_skipped as f64));
        rows.push(("n_samples".into(), self.n_samples as f64));
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["metric", "value"])?;
        for (k, v) in self.rows() {
            w.write_record([k, format!("{v}")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn write_per_label_csv(&self, path: &Path, names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["label", "support", "precision", "recall", "f1"])?;
        for l in &self.per_label {
            let name = names
                .get(l.label)
                .cloned()
                .unwrap_or_else(|| l.label.to_string());
            w.write_record([
                name,
                l.support.to_string(),
                format!("{}", l.precision),
                format!("{}", l.recall),
                format!("{}", l.f1),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(targets: Vec<Vec<u8>>, scores: Vec<Vec<f64>>) -> PredictionSet {
        PredictionSet::from_scores(targets, scores).unwrap()
    }

    #[test]
    fn perfect_predictions_score_one() {
        let s = set(
            vec![vec![1, 0, 1], vec![0, 1, 1]],
            vec![vec![0.9, 0.1, 0.8], vec![0.2, 0.7, 0.6]],
        );
        let r = classification_metrics(&s).unwrap();
        for v in [r.precision, r.recall, r.f1_macro, r.f1_weighted, r.accuracy] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn all_wrong_single_label() {
        let s = set(vec![vec![1], vec![0]], vec![vec![0.1], vec![0.9]]);
        let r = classification_metrics(&s).unwrap();
        assert_eq!((r.precision, r.recall, r.f1_macro), (0.0, 0.0, 0.0));
        assert!(matches!(
            classification_metrics(&set(vec![], vec![])),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn classification_matches_counting_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let (n, d) = (50, 10);
        let t: Vec<Vec<u8>> = (0..n)
            .map(|_| (0..d).map(|_| u8::from(rng.gen_bool(0.3))).collect())
            .collect();
        let p: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let r = classification_metrics(&set(t.clone(), p.clone())).unwrap();

        let (mut prec, mut rec, mut f1s, mut wsum, mut sup_total, mut correct) =
            (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for k in 0..d {
            let mut cm = [[0.0f64; 2]; 2];
            for i in 0..n {
                let pred = usize::from(p[i][k] >= 0.5);
                cm[t[i][k] as usize][pred] += 1.0;
            }
            let (tp, fp, fn_) = (cm[1][1], cm[0][1], cm[1][0]);
            let pk = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let rk = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let fk = if pk + rk > 0.0 {
                2.0 * pk * rk / (pk + rk)
            } else {
                0.0
            };
            prec += pk / d as f64;
            rec += rk / d as f64;
            f1s += fk / d as f64;
            wsum += fk * (tp + fn_);
            sup_total += tp + fn_;
            correct += cm[0][0] + cm[1][1];
        }
        for (got, want) in [
            (r.precision, prec),
            (r.recall, rec),
            (r.f1_macro, f1s),
            (r.f1_weighted, wsum / sup_total),
            (r.accuracy, correct / (n * d) as f64),
        ] {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn recall_at_k_examples() {
        let s = set(
            vec![vec![1, 1, 1, 0, 0]],
            vec![vec![0.9, 0.1, 0.8, 0.85, 0.0]],
        );
        assert!((recall_at_k(&s, 3).unwrap().value - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall_at_k(&s, 5).unwrap().value, 1.0);
        assert!(recall_at_k(&s, 6).is_err());
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k(&[0.5, 0.7, 0.5, 0.7], 3), vec![1, 3, 0]);
    }

    #[test]
    fn ndcg_examples() {
        let s = set(vec![vec![0, 1, 0]], vec![vec![0.1, 0.9, 0.2]]);
        assert_eq!(ndcg_at_k(&s, 1).unwrap().value, 1.0);
        // relevance at ranks (1,0,1) with 2 relevant labels
        let s = set(vec![vec![1, 0, 1, 0]], vec![vec![0.9, 0.8, 0.7, 0.1]]);
        let v = ndcg_at_k(&s, 3).unwrap().value;
        assert!((v - 1.5 / (1.0 + 1.0 / 3f64.log2())).abs() < 1e-12);
        assert!((v - 0.91972).abs() < 5e-6);
        let s = set(vec![vec![0, 0, 1]], vec![vec![0.9, 0.8, 0.1]]);
        assert_eq!(ndcg_at_k(&s, 2).unwrap().value, 0.0);
        let empty = set(vec![vec![0, 0]], vec![vec![0.3, 0.1]]);
        assert_eq!(ndcg_at_k(&empty, 1).unwrap().skipped, 1);
    }

    #[test]
    fn ndcg_is_not_monotone_in_k() {
        // A relevant label first, then an irrelevant one: NDCG@1 = 1 but NDCG@2 < 1,
        // because the ideal ranking at k = 2 holds both relevant labels.
        let s = set(vec![vec![1, 0, 1]], vec![vec![0.9, 0.8, 0.1]]);
        assert_eq!(ndcg_at_k(&s, 1).unwrap().value, 1.0);
        assert!(ndcg_at_k(&s, 2).unwrap().value < 1.0);
    }

    #[test]
    fn auc_known_values() {
        assert_eq!(auc(&[0, 0, 1, 1], &[0.1, 0.4, 0.35, 0.8]), Some(0.75));
        assert_eq!(auc(&[0, 1], &[0.5, 0.5]), Some(0.5));
        assert_eq!(auc(&[1, 1], &[0.5, 0.2]), None);
    }

    #[test]
    fn weighted_f1_uses_support() {
        // label 0: support 3, perfect; label 1: support 1, missed.
        let s = set(
            vec![vec![1, 0], vec![1, 0], vec![1, 1]],
            vec![vec![0.9, 0.1], vec![0.9, 0.1], vec![0.9, 0.1]],
        );
        let r = classification_metrics(&s).unwrap();
        assert_eq!(r.f1_macro, 0.5);
        assert_eq!(r.f1_weighted, 0.75);
        assert!((r.accuracy - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(subset_accuracy(&s), 2.0 / 3.0);
    }

    #[test]
    fn report_serializes() {
        let s = set(vec![vec![1, 0]], vec![vec![0.9, 0.3]]);
        let r = evaluate(
            &s,
            &EvalOptions {
                k_list: vec![1, 2, 3],
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.recall_at_k.len(), 2);
        let json = serde_json::to_string(&r).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    fn arb_set() -> impl Strategy<Value = PredictionSet> {
        (1usize..20, 1usize..8).prop_flat_map(|(n, d)| {
            (
                prop::collection::vec(prop::collection::vec(0u8..=1, d), n),
                prop::collection::vec(prop::collection::vec(0.0f64..1.0, d), n),
            )
                .prop_map(|(t, s)| PredictionSet::from_scores(t, s).unwrap())
        })
    }

    proptest! {
        #[test]
        fn recall_monotone_in_k(s in arb_set()) {
            let mut prev = 0.0;
            for k in 1..=s.n_labels() {
                let v = recall_at_k(&s, k).unwrap().value;
                prop_assert!(v + 1e-12 >= prev);
                prev = v;
            }
        }

        #[test]
        fn ndcg_bounded_and_one_iff_ideal(s in arb_set()) {
            for k in 1..=s.n_labels() {
                let v = ndcg_at_k(&s, k).unwrap().value;
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
            for (t, sc) in s.targets.iter().zip(&s.scores) {
                let single = PredictionSet::from_scores(vec![t.clone()], vec![sc.clone()]).unwrap();
                let rel = t.iter().filter(|&&b| b == 1).count();
                if rel == 0 { continue; }
                for k in 1..=t.len() {
                    let v = ndcg_at_k(&single, k).unwrap().value;
                    let m = k.min(rel);
                    let ideal = top_k(sc, m).iter().all(|&i| t[i] == 1);
                    prop_assert_eq!((v - 1.0).abs() < 1e-12, ideal);
                }
            }
        }

        #[test]
        fn f1_macro_between_label_extremes(s in arb_set()) {
            let r = classification_metrics(&s).unwrap();
            let f1s: Vec<f64> = r.per_label.iter().map(|l| l.f1).collect();
            let lo = f1s.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = f1s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r.f1_macro >= lo - 1e-12 && r.f1_macro <= hi + 1e-12);
            for v in [r.precision, r.recall, r.f1_macro, r.f1_weighted, r.accuracy] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn invariant_under_sample_reordering(s in arb_set(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut order: Vec<usize> = (0..s.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let p = PredictionSet::new(
                order.iter().map(|&i| s.targets[i].clone()).collect(),
                order.iter().map(|&i| s.scores[i].clone()).collect(),
                order.iter().map(|&i| s.predicted[i].clone()).collect(),
            ).unwrap();
            let opts = EvalOptions { k_list: (1..=s.n_labels()).collect(), ..Default::default() };
            let a = evaluate(&s, &opts).unwrap();
            let b = evaluate(&p, &opts).unwrap();
            prop_assert!((a.f1_macro - b.f1_macro).abs() < 1e-12);
            prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
            for k in a.recall_at_k.keys() {
                prop_assert!((a.recall_at_k[k] - b.recall_at_k[k]).abs() < 1e-12);
                prop_assert!((a.ndcg_at_k[k] - b.ndcg_at_k[k]).abs() < 1e-12);
            }
        }
    }
}
