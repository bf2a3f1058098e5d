//! Patient timelines: the record model, temporal feature derivation, lab templating,
//! sample construction, patient-level splitting and min-max scaling.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Number of temporal features per visit: duration and gap.
pub const TEMPORAL_FEATURES: usize = 2;

const LAB_PREAMBLE: &str = "These are abnormal results recorded: ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabResult {
    pub item_id: String,
    pub value: String,
    pub unit: String,
}

impl LabResult {
    pub fn new(
        item_id: impl Into<String>,
        value: impl Into<String>,
        unit: impl Into<String>,
    ) -> Self {
        Self {
            item_id: item_id.into(),
            value: value.into(),
            unit: unit.into(),
        }
    }
}

/// One hospital stay. Times are whole hours since an arbitrary epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub admission_hours: i64,
    pub discharge_hours: i64,
    #[serde(default)]
    pub note: String,
    #[serde(default)]
    pub labs: Vec<LabResult>,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    fn invalid(&self, visit_index: usize, reason: impl Into<String>) -> Error {
        Error::InvalidRecord {
            patient_id: self.patient_id.clone(),
            visit_index,
            reason: reason.into(),
        }
    }

    /// Checks ordering, non-overlap, lab ids and label shape. Visit indices in errors are 1-based.
    pub fn validate(&self, n_labels: Option<usize>) -> Result<()> {
        let expected = n_labels.or_else(|| self.visits.first().map(|v| v.labels.len()));
        for (i, v) in self.visits.iter().enumerate() {
            let t = i + 1;
            if v.discharge_hours < v.admission_hours {
                return Err(self.invalid(t, "discharge precedes admission"));
            }
            if i > 0 {
                let prev = &self.visits[i - 1];
                if v.admission_hours <= prev.admission_hours {
                    return Err(self.invalid(t, "visits not strictly ordered by admission"));
                }
                if v.admission_hours < prev.discharge_hours {
                    return Err(self.invalid(t, "visit overlaps the previous stay"));
                }
            }
            if let Some(d) = expected {
                if v.labels.len() != d {
                    return Err(
                        self.invalid(t, format!("expected {d} labels, found {}", v.labels.len()))
                    );
                }
            }
            if v.labels.iter().any(|&b| b > 1) {
                return Err(self.invalid(t, "labels must be 0 or 1"));
            }
            if v.labs.iter().any(|l| l.item_id.is_empty()) {
                return Err(self.invalid(t, "lab result with empty item_id"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemporalFeatures {
    pub duration_hours: f64,
    pub gap_hours: f64,
}

impl TemporalFeatures {
    pub fn as_array(&self) -> [f64; TEMPORAL_FEATURES] {
        [self.duration_hours, self.gap_hours]
    }
}

/// Per-visit length of stay and time since the previous discharge (0 for the first visit).
pub fn derive_temporal_features(record: &PatientRecord) -> Result<Vec<TemporalFeatures>> {
    record.validate(None)?;
    let mut out = Vec::with_capacity(record.visits.len());
    let mut prev_discharge = None;
    for v in &record.visits {
        let gap = prev_discharge.map_or(0, |d| v.admission_hours - d);
        out.push(TemporalFeatures {
            duration_hours: (v.discharge_hours - v.admission_hours) as f64,
            gap_hours: gap as f64,
        });
        prev_discharge = Some(v.discharge_hours);
    }
    Ok(out)
}

/// Renders abnormal labs as a single templated sentence; empty input gives an empty string.
pub fn labs_to_text(labs: &[LabResult]) -> String {
    if labs.is_empty() {
        return String::new();
    }
    let entries: Vec<String> = labs
        .iter()
        .map(|l| format!("ITEMID{}: {}{}", l.item_id, l.value, l.unit))
        .collect();
    format!("{LAB_PREAMBLE}{};", entries.join("; "))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Multilabel,
    /// Binary prediction of the label at `label_index`.
    HeartFailure {
        label_index: usize,
    },
}

impl Task {
    pub fn output_dim(&self, n_labels: usize) -> usize {
        match self {
            Task::Multilabel => n_labels,
            Task::HeartFailure { .. } => 1,
        }
    }
}

/// Which visit's labels a sample at visit `t` is asked to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TargetMode {
    /// Labels of visit `t` itself (text of visit `t`, history `1..=t`).
    #[default]
    Current,
    /// Labels of visit `t + 1`; the last visit produces no sample.
    NextVisit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitSample {
    pub patient_id: String,
    /// 1-based visit index `t`.
    pub visit_index: usize,
    pub temporal_history: Vec<TemporalFeatures>,
    pub note: String,
    pub lab_text: String,
    pub target: Vec<u8>,
}

impl VisitSample {
    /// Note first, then the lab sentence, joined by one space.
    pub fn text(&self) -> String {
        join_text(&self.note, &self.lab_text)
    }
}

pub(crate) fn join_text(a: &str, b: &str) -> String {
    match (a.is_empty(), b.is_empty()) {
        (true, _) => b.to_string(),
        (_, true) => a.to_string(),
        _ => format!("{a} {b}"),
    }
}

pub const MIN_VISITS: usize = 2;

pub fn build_samples(
    record: &PatientRecord,
    task: Task,
    target: TargetMode,
) -> Result<Vec<VisitSample>> {
    if record.visits.len() < MIN_VISITS {
        return Ok(Vec::new());
    }
    let features = derive_temporal_features(record)?;
    let n_labels = record.visits[0].labels.len();
    if let Task::HeartFailure { label_index } = task {
        if label_index >= n_labels {
            return Err(Error::Config(format!(
                "heart-failure label index {label_index} out of range for {n_labels} labels"
            )));
        }
    }
    let last = match target {
        TargetMode::Current => record.visits.len(),
        TargetMode::NextVisit => record.visits.len() - 1,
    };
    let mut out = Vec::with_capacity(last);
    for t in 1..=last {
        let visit = &record.visits[t - 1];
        let labels = match target {
            TargetMode::Current => &visit.labels,
            TargetMode::NextVisit => &record.visits[t].labels,
        };
        let target = match task {
            Task::Multilabel => labels.clone(),
            Task::HeartFailure { label_index } => vec![labels[label_index]],
        };
        out.push(VisitSample {
            patient_id: record.patient_id.clone(),
            visit_index: t,
            temporal_history: features[..t].to_vec(),
            note: visit.note.clone(),
            lab_text: labs_to_text(&visit.labs),
            target,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortReport {
    pub patients_total: usize,
    pub patients_included: usize,
    pub patients_excluded: usize,
    pub samples: usize,
}

impl CohortReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "patients_total",
            "patients_included",
            "patients_excluded",
            "samples",
        ])?;
        w.write_record([
            self.patients_total.to_string(),
            self.patients_included.to_string(),
            self.patients_excluded.to_string(),
            self.samples.to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Applies the cohort rule and builds every sample for the included patients.
pub fn build_dataset(
    records: &[PatientRecord],
    task: Task,
    target: TargetMode,
) -> Result<(Vec<VisitSample>, CohortReport)> {
    let mut report = CohortReport {
        patients_total: records.len(),
        ..Default::default()
    };
    let mut samples = Vec::new();
    for r in records {
        if r.visits.len() < MIN_VISITS {
            report.patients_excluded += 1;
            continue;
        }
        let s = build_samples(r, task, target)?;
        report.patients_included += 1;
        report.samples += s.len();
        samples.extend(s);
    }
    Ok((samples, report))
}

/// Partitions patients (never individual samples) into train and test sets.
///
/// The number of training patients is `round(n * train_fraction)` clamped so both
/// sides are non-empty. Each side keeps the input order.
pub fn patient_level_split(
    records: &[PatientRecord],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<PatientRecord>, Vec<PatientRecord>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if records.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 patients to split, got {}",
            records.len()
        )));
    }
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.patient_id.as_str()) {
            return Err(Error::Config(format!(
                "duplicate patient_id {}",
                r.patient_id
            )));
        }
    }
    let n = records.len();
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (mut train, mut test) = (Vec::with_capacity(n_train), Vec::with_capacity(n - n_train));
    for (r, t) in records.iter().zip(in_train) {
        if t {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub min: [f64; TEMPORAL_FEATURES],
    pub max: [f64; TEMPORAL_FEATURES],
}

/// Min-max scaler for temporal features. Fitted once on training data; values outside
/// the fitted range are clamped into `[0, 1]` and a constant feature maps to 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    params: Option<ScalerParams>,
}

impl MinMaxScaler {
    pub fn from_params(params: ScalerParams) -> Self {
        Self {
            params: Some(params),
        }
    }

    pub fn params(&self) -> Option<&ScalerParams> {
        self.params.as_ref()
    }

    pub fn fit<'a, I>(features: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a TemporalFeatures>,
    {
        let mut min = [f64::INFINITY; TEMPORAL_FEATURES];
        let mut max = [f64::NEG_INFINITY; TEMPORAL_FEATURES];
        let mut any = false;
        for f in features {
            any = true;
            for (k, v) in f.as_array().into_iter().enumerate() {
                min[k] = min[k].min(v);
                max[k] = max[k].max(v);
            }
        }
        if !any {
            return Err(Error::Empty("scaler fit data"));
        }
        Ok(Self::from_params(ScalerParams { min, max }))
    }

    /// Fits on every history entry of the given (training) samples.
    pub fn fit_samples(samples: &[VisitSample]) -> Result<Self> {
        Self::fit(samples.iter().flat_map(|s| s.temporal_history.iter()))
    }

    pub fn scale_value(&self, feature: usize, x: f64) -> Result<f64> {
        let p = self.params.as_ref().ok_or(Error::UnfittedScaler)?;
        let range = p.max[feature] - p.min[feature];
        if range <= 0.0 {
            return Ok(0.0);
        }
        Ok(((x - p.min[feature]) / range).clamp(0.0, 1.0))
    }

    /// Scales a history into a (w × 2) matrix, one row per visit.
    pub fn transform(&self, history: &[TemporalFeatures]) -> Result<Matrix> {
        let mut m = Matrix::zeros(history.len(), TEMPORAL_FEATURES);
        for (t, f) in history.iter().enumerate() {
            for (k, v) in f.as_array().into_iter().enumerate() {
                m.set(t, k, self.scale_value(k, v)?);
            }
        }
        Ok(m)
    }
}

/// Reads one patient record per line. Blank lines are ignored.
pub fn read_jsonl(path: &Path) -> Result<Vec<PatientRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PatientRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[PatientRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Validates every record and checks all share one label dimension, which is returned.
pub fn validate_corpus(records: &[PatientRecord]) -> Result<usize> {
    let d = records
        .iter()
        .flat_map(|r| r.visits.first())
        .map(|v| v.labels.len())
        .next()
        .ok_or(Error::Empty("corpus"))?;
    for r in records {
        r.validate(Some(d))?;
    }
    Ok(d)
}
