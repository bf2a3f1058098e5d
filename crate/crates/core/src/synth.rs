//! Synthetic EHR corpora with planted disease structure.
//!
//! Each patient carries latent chronic conditions. Conditions are drawn one by one
//! with a logit boost from already-active comorbid conditions, and new ones can start
//! at later visits but never resolve. An active condition may produce an abnormal lab;
//! the note mostly mentions the conditions that did not, so the two text sources are
//! complementary. Stays get longer and gaps shorter as the condition count grows.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::ehr::{LabResult, PatientRecord, Visit};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::params::mix_seed;

pub const DEFAULT_LABELS: [&str; 10] = [
    "HTN", "ARRHY", "DM", "VALVE", "CHF", "CHRNLUNG", "LYTES", "NEURO", "RENLFAIL", "HTNCX",
];

const DEFAULT_WORDS: [[&str; 5]; 10] = [
    [
        "hypertension",
        "amlodipine",
        "systolic",
        "lisinopril",
        "headache",
    ],
    [
        "arrhythmia",
        "palpitations",
        "fibrillation",
        "amiodarone",
        "telemetry",
    ],
    ["diabetes", "insulin", "glucose", "metformin", "neuropathy"],
    [
        "valvular",
        "murmur",
        "stenosis",
        "regurgitation",
        "echocardiogram",
    ],
    ["heart", "failure", "edema", "furosemide", "orthopnea"],
    ["copd", "wheezing", "inhaler", "dyspnea", "spirometry"],
    [
        "electrolyte",
        "hyponatremia",
        "potassium",
        "repletion",
        "magnesium",
    ],
    [
        "seizure",
        "neurologic",
        "weakness",
        "levetiracetam",
        "confusion",
    ],
    ["renal", "creatinine", "dialysis", "nephrology", "oliguria"],
    [
        "hypertensive",
        "crisis",
        "retinopathy",
        "nicardipine",
        "encephalopathy",
    ],
];

const FILLER_WORDS: [&str; 12] = [
    "patient",
    "admitted",
    "stable",
    "reports",
    "history",
    "denies",
    "follow",
    "plan",
    "discharged",
    "ward",
    "reviewed",
    "tolerating",
];

const LAB_UNITS: [&str; 10] = [
    "mmHg", "bpm", "mg/dL", "cm/s", "pg/mL", "%", "mEq/L", "mg/L", "mg/dL", "mmHg",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub label_names: Vec<String>,
    /// Inclusive visit-count range per patient.
    pub visits_min: usize,
    pub visits_max: usize,
    /// Probability that a patient has each condition at the first visit, before comorbidity boosts.
    pub base_rates: Vec<f64>,
    /// Symmetric, non-negative logit boosts between conditions.
    pub comorbidity: Vec<Vec<f64>>,
    pub vocab_per_disease: Vec<Vec<String>>,
    /// Per-visit probability that an inactive condition starts (scaled by its base rate).
    pub onset_prob: f64,
    /// Chance that an active condition produces an abnormal lab.
    pub lab_prob: f64,
    /// Chance that the note mentions an active condition without an abnormal lab.
    pub note_prob: f64,
    /// Chance that the note mentions an active condition that already has one.
    pub note_overlap_prob: f64,
    /// Chance that each word of a mentioned condition appears (at least one always does).
    pub note_word_prob: f64,
    /// Chance that a note mentions a word of an inactive condition.
    pub noise_word_prob: f64,
    pub filler_words: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::with_labels(DEFAULT_LABELS.len())
    }
}

/// Built-in names for the first ten labels, `D<k>` beyond that.
pub fn default_label_names(d: usize) -> Vec<String> {
    (0..d)
        .map(|k| {
            DEFAULT_LABELS
                .get(k)
                .map_or_else(|| format!("D{k}"), |s| s.to_string())
        })
        .collect()
}

impl GeneratorConfig {
    /// Defaults for `d` labels; names and word lists beyond the built-in ten are synthesised.
    pub fn with_labels(d: usize) -> Self {
        let label_names = default_label_names(d);
        let vocab_per_disease = (0..d)
            .map(|k| match DEFAULT_WORDS.get(k) {
                Some(ws) => ws.iter().map(|w| w.to_string()).collect(),
                None => (0..5).map(|j| format!("cond{k}term{j}")).collect(),
            })
            .collect();
        let base_rates = (0..d)
            .map(|k| 0.45 - 0.2 * k as f64 / d.max(1) as f64)
            .collect();
        let mut comorbidity = vec![vec![0.0; d]; d];
        for &(a, b, w) in &[
            (0, 4, 1.5),
            (1, 4, 1.0),
            (2, 8, 1.0),
            (0, 9, 1.0),
            (3, 4, 0.8),
            (6, 8, 0.8),
        ] {
            if a < d && b < d {
                comorbidity[a][b] = w;
                comorbidity[b][a] = w;
            }
        }
        Self {
            n_patients: 500,
            label_names,
            visits_min: 2,
            visits_max: 6,
            base_rates,
            comorbidity,
            vocab_per_disease,
            onset_prob: 0.08,
            lab_prob: 0.5,
            note_prob: 0.9,
            note_overlap_prob: 0.2,
            note_word_prob: 0.7,
            noise_word_prob: 0.05,
            filler_words: 2,
            seed: 0,
        }
    }

    pub fn n_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.n_labels();
        let cfg = |m: String| Err(Error::Config(m));
        if self.n_patients == 0 {
            return cfg("n_patients must be positive".into());
        }
        if d == 0 {
            return cfg("at least one label is required".into());
        }
        if self.visits_min < 2 || self.visits_max < self.visits_min {
            return cfg(format!(
                "visit range {}..={} must satisfy 2 <= min <= max",
                self.visits_min, self.visits_max
            ));
        }
        if self.base_rates.len() != d
            || self.vocab_per_disease.len() != d
            || self.comorbidity.len() != d
        {
            return cfg(format!(
                "base rates, vocabularies and comorbidity matrix must all have {d} entries"
            ));
        }
        if self.base_rates.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return cfg("base rates must lie in (0, 1)".into());
        }
        for (i, row) in self.comorbidity.iter().enumerate() {
            if row.len() != d {
                return cfg(format!(
                    "comorbidity row {i} has {} entries, expected {d}",
                    row.len()
                ));
            }
            for (j, &w) in row.iter().enumerate() {
                if !(w >= 0.0 && w.is_finite()) {
                    return cfg(format!(
                        "comorbidity weight ({i},{j}) must be finite and non-negative"
                    ));
                }
                if w != self.comorbidity[j][i] {
                    return cfg(format!("comorbidity matrix is not symmetric at ({i},{j})"));
                }
            }
        }
        if self.vocab_per_disease.iter().any(Vec::is_empty) {
            return cfg("every condition needs at least one word".into());
        }
        for (name, p) in [
            ("onset_prob", self.onset_prob),
            ("note_word_prob", self.note_word_prob),
            ("note_prob", self.note_prob),
            ("note_overlap_prob", self.note_overlap_prob),
            ("lab_prob", self.lab_prob),
            ("noise_word_prob", self.noise_word_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return cfg(format!("{name} must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn boosted(cfg: &GeneratorConfig, k: usize, active: &[bool]) -> f64 {
    active
        .iter()
        .enumerate()
        .filter(|&(_, &a)| a)
        .map(|(j, _)| cfg.comorbidity[j][k])
        .sum()
}

fn lab_for(k: usize, rng: &mut ChaCha8Rng) -> LabResult {
    let item = 50800 + 10 * k;
    let value = 100 + 20 * k as i64 + 5 * rng.gen_range(-1..=1);
    LabResult::new(
        item.to_string(),
        value.to_string(),
        LAB_UNITS[k % LAB_UNITS.len()],
    )
}

fn note_for(
    cfg: &GeneratorConfig,
    active: &[bool],
    has_lab: &[bool],
    rng: &mut ChaCha8Rng,
) -> String {
    let mut words: Vec<&str> = (0..cfg.filler_words)
        .map(|_| *FILLER_WORDS.choose(rng).expect("non-empty"))
        .collect();
    for (k, vocab) in cfg.vocab_per_disease.iter().enumerate() {
        if active[k] {
            let p = if has_lab[k] {
                cfg.note_overlap_prob
            } else {
                cfg.note_prob
            };
            if rng.gen_bool(p) {
                let start = words.len();
                words.extend(
                    vocab
                        .iter()
                        .filter(|_| rng.gen_bool(cfg.note_word_prob))
                        .map(String::as_str),
                );
                if words.len() == start {
                    words.push(vocab.choose(rng).expect("validated non-empty"));
                }
            }
        } else if rng.gen_bool(cfg.noise_word_prob) {
            words.push(vocab.choose(rng).expect("validated non-empty"));
        }
    }
    words.shuffle(rng);
    words.join(" ")
}

/// One patient from its own seed.
pub fn generate_patient(cfg: &GeneratorConfig, index: usize) -> PatientRecord {
    let d = cfg.n_labels();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index as u64));
    let mut active = vec![false; d];
    for k in 0..d {
        let p = crate::linalg::sigmoid(logit(cfg.base_rates[k]) + boosted(cfg, k, &active));
        active[k] = rng.gen_bool(p);
    }
    let n_visits = rng.gen_range(cfg.visits_min..=cfg.visits_max);
    let mut t = rng.gen_range(0..2000_i64);
    let mut visits = Vec::with_capacity(n_visits);
    for v in 0..n_visits {
        if v > 0 {
            for k in 0..d {
                if !active[k] {
                    let p = (cfg.onset_prob * cfg.base_rates[k] * (1.0 + boosted(cfg, k, &active)))
                        .min(1.0);
                    active[k] = rng.gen_bool(p);
                }
            }
        }
        let n_active = active.iter().filter(|&&a| a).count() as f64;
        if v > 0 {
            let gap = LogNormal::new((24.0 * 120.0_f64).ln() - 0.35 * n_active, 0.5)
                .expect("valid sigma");
            t += gap.sample(&mut rng).round().max(1.0) as i64;
        }
        let stay = LogNormal::new(36.0_f64.ln() + 0.3 * n_active, 0.35).expect("valid sigma");
        let duration = stay.sample(&mut rng).round().max(1.0) as i64;
        let has_lab: Vec<bool> = active
            .iter()
            .map(|&a| a && rng.gen_bool(cfg.lab_prob))
            .collect();
        let labs = (0..d)
            .filter(|&k| has_lab[k])
            .map(|k| lab_for(k, &mut rng))
            .collect();
        visits.push(Visit {
            admission_hours: t,
            discharge_hours: t + duration,
            note: note_for(cfg, &active, &has_lab, &mut rng),
            labs,
            labels: active.iter().map(|&a| u8::from(a)).collect(),
        });
        t += duration;
    }
    PatientRecord {
        patient_id: format!("P{index:06}"),
        visits,
    }
}

/// Deterministic for a fixed config; patients are independent so they can be built in parallel.
pub fn generate(cfg: &GeneratorConfig, exec: ExecMode) -> Result<Vec<PatientRecord>> {
    cfg.validate()?;
    Ok(exec::map_range(exec, cfg.n_patients, |i| {
        generate_patient(cfg, i)
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelCount {
    pub label: String,
    /// Patients with the label at any visit.
    pub patients: usize,
    pub visits: usize,
}

pub fn prevalence(records: &[PatientRecord], names: &[String]) -> Vec<LabelCount> {
    let mut out: Vec<LabelCount> = names
        .iter()
        .map(|n| LabelCount {
            label: n.clone(),
            patients: 0,
            visits: 0,
        })
        .collect();
    for r in records {
        let mut seen = vec![false; names.len()];
        for v in &r.visits {
            for (k, &b) in v.labels.iter().enumerate().take(names.len()) {
                if b == 1 {
                    out[k].visits += 1;
                    seen[k] = true;
                }
            }
        }
        for (c, s) in out.iter_mut().zip(seen) {
            c.patients += usize::from(s);
        }
    }
    out
}

/// Prevalence table sorted by patient count, most frequent first.
pub fn write_stats_csv(path: &Path, records: &[PatientRecord], names: &[String]) -> Result<()> {
    let mut rows = prevalence(records, names);
    rows.sort_by(|a, b| {
        b.patients
            .cmp(&a.patients)
            .then_with(|| a.label.cmp(&b.label))
    });
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "label,patients,visits")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.label, r.patients, r.visits)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            n_patients: n,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate(&small(100, 1), ExecMode::Parallel).unwrap();
        let b = generate(&small(100, 1), ExecMode::Sequential).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let c = generate(&small(100, 2), ExecMode::Sequential).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn records_are_valid_and_chronic() {
        let recs = generate(&small(300, 3), ExecMode::Parallel).unwrap();
        for r in &recs {
            r.validate(Some(10)).unwrap();
            assert!(r.visits.len() >= 2);
            for w in r.visits.windows(2) {
                for (a, b) in w[0].labels.iter().zip(&w[1].labels) {
                    assert!(a <= b, "condition resolved in {}", r.patient_id);
                }
            }
        }
    }

    #[test]
    fn no_active_disease_gives_zero_labels_and_no_labs() {
        let cfg = GeneratorConfig {
            base_rates: vec![1e-9; 10],
            onset_prob: 0.0,
            ..small(50, 4)
        };
        for r in generate(&cfg, ExecMode::Sequential).unwrap() {
            for v in &r.visits {
                assert!(v.labels.iter().all(|&b| b == 0));
                assert!(v.labs.is_empty());
            }
        }
    }

    #[test]
    fn comorbidity_raises_cooccurrence() {
        let mut cfg = small(10_000, 5);
        cfg.onset_prob = 0.0;
        cfg.comorbidity = vec![vec![0.0; 10]; 10];
        cfg.comorbidity[0][4] = 2.5;
        cfg.comorbidity[4][0] = 2.5;
        let recs = generate(&cfg, ExecMode::Parallel).unwrap();
        let n = recs.len() as f64;
        let first: Vec<&Vec<u8>> = recs.iter().map(|r| &r.visits[0].labels).collect();
        let p0 = first.iter().filter(|l| l[0] == 1).count() as f64 / n;
        let p4 = first.iter().filter(|l| l[4] == 1).count() as f64 / n;
        let p04 = first.iter().filter(|l| l[0] == 1 && l[4] == 1).count() as f64 / n;
        assert!(p04 > p0 * p4, "joint {p04} vs product {}", p0 * p4);
        // Only label 0 boosts label 4, so P(0, 4) = b0 * sigmoid(logit(b4) + w).
        let (b0, b4) = (cfg.base_rates[0], cfg.base_rates[4]);
        let expected = b0 * crate::linalg::sigmoid(logit(b4) + 2.5);
        let se = (expected * (1.0 - expected) / n).sqrt();
        assert!(
            (p04 - expected).abs() < 4.0 * se,
            "joint {p04} vs expected {expected}"
        );
    }

    #[test]
    fn prevalence_follows_base_rates() {
        let mut cfg = small(4000, 6);
        cfg.comorbidity = vec![vec![0.0; 10]; 10];
        cfg.base_rates = (0..10).map(|k| 0.05 + 0.04 * k as f64).collect();
        let recs = generate(&cfg, ExecMode::Parallel).unwrap();
        let counts = prevalence(&recs, &cfg.label_names);
        for w in counts.windows(2) {
            assert!(w[0].patients < w[1].patients, "{counts:?}");
        }
    }

    #[test]
    fn sicker_patients_stay_longer_and_return_sooner() {
        let recs = generate(&small(2000, 7), ExecMode::Parallel).unwrap();
        let (mut lo, mut hi) = ((0.0, 0.0, 0usize), (0.0, 0.0, 0usize));
        for r in &recs {
            for w in r.visits.windows(2) {
                let n: u32 = w[1].labels.iter().map(|&b| u32::from(b)).sum();
                let dur = (w[1].discharge_hours - w[1].admission_hours) as f64;
                let gap = (w[1].admission_hours - w[0].discharge_hours) as f64;
                let slot = if n <= 1 {
                    &mut lo
                } else if n >= 4 {
                    &mut hi
                } else {
                    continue;
                };
                slot.0 += dur;
                slot.1 += gap;
                slot.2 += 1;
            }
        }
        assert!(lo.2 > 0 && hi.2 > 0);
        assert!(hi.0 / hi.2 as f64 > lo.0 / lo.2 as f64);
        assert!(hi.1 / (hi.2 as f64) < lo.1 / lo.2 as f64);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate(&small(0, 0), ExecMode::Sequential).is_err());
        let mut c = small(5, 0);
        c.visits_min = 1;
        assert!(c.validate().is_err());
        let mut c = small(5, 0);
        c.comorbidity[0][1] = 0.5;
        assert!(c.validate().is_err());
        let mut c = small(5, 0);
        c.comorbidity[2][3] = -1.0;
        c.comorbidity[3][2] = -1.0;
        assert!(c.validate().is_err());
    }
}
