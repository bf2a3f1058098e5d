//! CSV outputs: per-visit probabilities, fused representations, ablation and ranking tables.

use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::metrics::MetricReport;
use crate::model::{EncodedSample, SampleOutput};

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// `patient_id,visit_index,p_<label>...`
pub fn write_predictions_csv(
    path: &Path,
    samples: &[EncodedSample],
    outputs: &[SampleOutput],
    label_names: &[String],
) -> Result<()> {
    let mut w = create(path)?;
    write!(w, "patient_id,visit_index")?;
    for n in label_names {
        write!(w, ",p_{n}")?;
    }
    writeln!(w)?;
    for (s, o) in samples.iter().zip(outputs) {
        write!(w, "{},{}", s.patient_id, s.visit_index)?;
        for p in &o.fusion.probs {
            write!(w, ",{p:?}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// The positive label the model is most confident about, or `none`.
pub fn dominant_label(target: &[u8], probs: &[f64], label_names: &[String]) -> String {
    target
        .iter()
        .zip(probs)
        .enumerate()
        .filter(|(_, (&t, _))| t == 1)
        .fold(
            None,
            |best: Option<(usize, f64)>, (k, (_, &p))| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((k, p)),
            },
        )
        .map_or_else(|| "none".to_string(), |(k, _)| label_names[k].clone())
}

/// `patient_id,visit_index,h0..h{n-1},dominant_label`, one row per sample.
pub fn write_embeddings_csv(
    path: &Path,
    samples: &[EncodedSample],
    outputs: &[SampleOutput],
    label_names: &[String],
) -> Result<()> {
    let mut w = create(path)?;
    let width = outputs
        .first()
        .map_or(0, |o| o.fusion.representation().len());
    write!(w, "patient_id,visit_index")?;
    for i in 0..width {
        write!(w, ",h{i}")?;
    }
    writeln!(w, ",dominant_label")?;
    for (s, o) in samples.iter().zip(outputs) {
        write!(w, "{},{}", s.patient_id, s.visit_index)?;
        for v in o.fusion.representation() {
            write!(w, ",{v:?}")?;
        }
        writeln!(
            w,
            ",{}",
            dominant_label(&s.target, &o.fusion.probs, label_names)
        )?;
    }
    Ok(())
}

/// `k,recall,ndcg` for every k in the report.
pub fn write_ranking_csv(path: &Path, report: &MetricReport) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "k,recall,ndcg")?;
    for (k, r) in &report.recall_at_k {
        writeln!(w, "{k},{r:?},{:?}", report.ndcg_at_k[k])?;
    }
    Ok(())
}

/// Classification block then ranking block at k = 3 and 5, one row per variant.
pub fn write_ablation_csv(path: &Path, rows: &[(String, MetricReport)]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(
        w,
        "variant,precision,recall,f1_macro,f1_weighted,accuracy,recall@3,recall@5,ndcg@3,ndcg@5"
    )?;
    let at = |m: &std::collections::BTreeMap<usize, f64>, k| {
        m.get(&k).map_or(String::new(), |v| format!("{v:.6}"))
    };
    for (name, r) in rows {
        writeln!(
            w,
            "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            r.precision,
            r.recall,
            r.f1_macro,
            r.f1_weighted,
            r.accuracy,
            at(&r.recall_at_k, 3),
            at(&r.recall_at_k, 5),
            at(&r.ndcg_at_k, 3),
            at(&r.ndcg_at_k, 5),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dominant_label_picks_most_confident_positive() {
        let names: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        assert_eq!(dominant_label(&[1, 0, 1], &[0.2, 0.9, 0.6], &names), "C");
        assert_eq!(dominant_label(&[1, 1, 0], &[0.5, 0.5, 0.9], &names), "A");
        assert_eq!(dominant_label(&[0, 0, 0], &[0.5, 0.5, 0.9], &names), "none");
    }
}
