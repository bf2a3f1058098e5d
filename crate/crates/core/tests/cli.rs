use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chronofuse"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = bin(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn without_timestamps(manifest: &str) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(manifest).unwrap();
    let obj = v.as_object_mut().unwrap();
    obj.remove("started_unix");
    obj.remove("finished_unix");
    v
}

/// Small corpus plus a 2-epoch training run, shared by several checks.
fn trained(dir: &Path) {
    ok(
        &[
            "generate",
            "--n-patients",
            "40",
            "--seed",
            "4",
            "--out",
            "c.jsonl",
        ],
        dir,
    );
    ok(
        &[
            "train",
            "--data",
            "c.jsonl",
            "--out",
            "run",
            "--epochs",
            "2",
            "--seed",
            "4",
            "--sequential",
        ],
        dir,
    );
}

#[test]
fn generate_is_seeded_and_hashed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "generate",
            "--n-patients",
            "30",
            "--seed",
            "9",
            "--out",
            "a.jsonl",
        ],
        d,
    );
    ok(
        &[
            "generate",
            "--n-patients",
            "30",
            "--seed",
            "9",
            "--out",
            "b.jsonl",
        ],
        d,
    );
    assert_eq!(read(d.join("a.jsonl")), read(d.join("b.jsonl")));
    assert_eq!(
        read(d.join("a.jsonl.stats.csv")),
        read(d.join("b.jsonl.stats.csv"))
    );
    assert_eq!(read(d.join("a.jsonl")).lines().count(), 30);
    let stats = read(d.join("a.jsonl.stats.csv"));
    assert_eq!(stats.lines().next().unwrap(), "label,patients,visits");
    assert_eq!(stats.lines().count(), 11);

    let m: serde_json::Value =
        serde_json::from_str(&read(d.join("a.jsonl.manifest.json"))).unwrap();
    assert_eq!(m["command"], "generate");
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["n_patients"], 30);
    let outputs = m["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 2);
    let hash = chronofuse::manifest::sha256_file(&d.join("a.jsonl")).unwrap();
    assert_eq!(outputs[0]["sha256"], hash.as_str());

    ok(
        &[
            "generate",
            "--n-patients",
            "30",
            "--seed",
            "10",
            "--out",
            "c.jsonl",
        ],
        d,
    );
    assert_ne!(read(d.join("a.jsonl")), read(d.join("c.jsonl")));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("exp.cfg"),
        "# small corpus\nn_patients = 12\nseed = 3\n",
    )
    .unwrap();
    ok(
        &[
            "generate", "--config", "exp.cfg", "--seed", "5", "--out", "x.jsonl",
        ],
        d,
    );
    let m: serde_json::Value =
        serde_json::from_str(&read(d.join("x.jsonl.manifest.json"))).unwrap();
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config"]["n_patients"], 12);
    assert_eq!(read(d.join("x.jsonl")).lines().count(), 12);
    assert_eq!(m["inputs"][0]["path"], "exp.cfg");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        bin(&["generate", "--n-patients", "0", "--out", "z.jsonl"], d)
            .status
            .code(),
        Some(1)
    );
    assert_eq!(bin(&["frobnicate"], d).status.code(), Some(1));
    assert_eq!(bin(&["--help"], d).status.code(), Some(0));
    std::fs::write(d.join("bad.cfg"), "seed = 1\nnope = 2\n").unwrap();
    let out = bin(&["generate", "--config", "bad.cfg", "--out", "z.jsonl"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    ok(&["generate", "--n-patients", "10", "--out", "c.jsonl"], d);
    let missing = bin(
        &[
            "eval",
            "--checkpoint",
            "none.bin",
            "--data",
            "c.jsonl",
            "--out",
            "e",
        ],
        d,
    );
    assert_ne!(missing.status.code(), Some(0));
    assert_eq!(
        bin(
            &["train", "--data", "c.jsonl", "--out", "r", "--alpha", "1.5"],
            d
        )
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn train_eval_predict_export() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let run = d.join("run");
    for f in [
        "checkpoint.bin",
        "train_log.csv",
        "metrics.csv",
        "metrics.json",
        "baseline_metrics.csv",
        "cohort_train.csv",
        "cohort_test.csv",
        "metrics_ranking.csv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(
        read(run.join("train_log.csv")).lines().next().unwrap(),
        "epoch,split,loss,f1_macro,accuracy"
    );
    assert_eq!(read(run.join("train_log.csv")).lines().count(), 5);

    // eval recovers the same held-out split from the checkpoint
    ok(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.bin",
            "--data",
            "c.jsonl",
            "--out",
            "ev",
            "--sequential",
        ],
        d,
    );
    assert_eq!(
        read(run.join("metrics.json")),
        read(d.join("ev/metrics.json"))
    );

    let ranking = read(d.join("ev/metrics_ranking.csv"));
    let rows: Vec<Vec<f64>> = ranking
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 5);
    for w in rows.windows(2) {
        assert!(w[1][1] >= w[0][1], "recall@k non-decreasing");
    }

    ok(
        &[
            "predict",
            "--checkpoint",
            "run/checkpoint.bin",
            "--data",
            "c.jsonl",
            "--split",
            "all",
            "--out",
            "p.csv",
        ],
        d,
    );
    let preds = read(d.join("p.csv"));
    assert!(preds.starts_with("patient_id,visit_index,p_HTN,"));
    let n_visits: usize = read(d.join("c.jsonl"))
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["visits"]
                .as_array()
                .unwrap()
                .len()
        })
        .sum();
    assert_eq!(preds.lines().count() - 1, n_visits);
    assert!(d.join("p.csv.manifest.json").exists());

    ok(
        &[
            "embed-export",
            "--checkpoint",
            "run/checkpoint.bin",
            "--data",
            "c.jsonl",
            "--out",
            "e1.csv",
        ],
        d,
    );
    ok(
        &[
            "embed-export",
            "--checkpoint",
            "run/checkpoint.bin",
            "--data",
            "c.jsonl",
            "--out",
            "e2.csv",
        ],
        d,
    );
    assert_eq!(read(d.join("e1.csv")), read(d.join("e2.csv")));
    let header = read(d.join("e1.csv")).lines().next().unwrap().to_string();
    assert!(header.ends_with(",dominant_label"));
    assert_eq!(header.split(',').count(), 2 + 64 + 1);
}

#[test]
fn label_mismatch_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    ok(
        &[
            "generate",
            "--n-patients",
            "10",
            "--set",
            "n_labels=6",
            "--out",
            "six.jsonl",
        ],
        d,
    );
    let out = bin(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.bin",
            "--data",
            "six.jsonl",
            "--out",
            "ev",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("label count mismatch"));
}

#[test]
fn runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    ok(
        &[
            "train",
            "--data",
            "c.jsonl",
            "--out",
            "run2",
            "--epochs",
            "2",
            "--seed",
            "4",
            "--sequential",
        ],
        d,
    );
    for f in ["train_log.csv", "metrics.csv", "checkpoint.bin"] {
        assert_eq!(
            std::fs::read(d.join("run").join(f)).unwrap(),
            std::fs::read(d.join("run2").join(f)).unwrap(),
            "{f}"
        );
    }
    let a = without_timestamps(&read(d.join("run/manifest.json")));
    let mut b = without_timestamps(&read(d.join("run2/manifest.json")));
    // output paths differ only in the directory name
    let b_text = serde_json::to_string(&b).unwrap().replace("run2/", "run/");
    b = serde_json::from_str(&b_text).unwrap();
    assert_eq!(a, b);

    // parallel execution gives the same bytes
    ok(
        &[
            "train", "--data", "c.jsonl", "--out", "run3", "--epochs", "2", "--seed", "4",
        ],
        d,
    );
    assert_eq!(
        read(d.join("run/train_log.csv")),
        read(d.join("run3/train_log.csv"))
    );
}

#[test]
fn ablate_and_heart_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &[
            "generate",
            "--n-patients",
            "40",
            "--seed",
            "2",
            "--out",
            "c.jsonl",
        ],
        d,
    );
    ok(
        &[
            "ablate", "--data", "c.jsonl", "--out", "abl", "--epochs", "1", "--seed", "2",
        ],
        d,
    );
    let table = read(d.join("abl/ablation.csv"));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(
        lines[0],
        "variant,precision,recall,f1_macro,f1_weighted,accuracy,recall@3,recall@5,ndcg@3,ndcg@5"
    );
    let variants: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        variants,
        ["full", "no_text", "no_labtext", "prevalence_baseline"]
    );
    assert_eq!(
        read(d.join("abl/ablation_ranking.csv")).lines().count(),
        1 + 3 * 5
    );

    ok(
        &[
            "train",
            "--data",
            "c.jsonl",
            "--out",
            "hf",
            "--epochs",
            "1",
            "--task",
            "heart-failure",
        ],
        d,
    );
    let metrics = read(d.join("hf/metrics.csv"));
    for key in ["auc,", "recall,", "f1_macro,"] {
        assert!(metrics.lines().any(|l| l.starts_with(key)), "missing {key}");
    }
}

#[test]
fn gradcheck_command() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(&["gradcheck", "--out", "gc.json"], d);
    assert!(String::from_utf8_lossy(&out.stdout).contains("max_rel_err"));
    let report: serde_json::Value = serde_json::from_str(&read(d.join("gc.json"))).unwrap();
    assert_eq!(report["passed"], true);
    // an impossible tolerance is a runtime failure
    assert_eq!(
        bin(&["gradcheck", "--tolerance", "0"], d).status.code(),
        Some(2)
    );
}

#[test]
fn default_corpus_has_ten_labels_and_two_visits() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["generate", "--out", "c.jsonl"], d);
    let text = read(d.join("c.jsonl"));
    assert_eq!(text.lines().count(), 500);
    for line in text.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        let visits = rec["visits"].as_array().unwrap();
        assert!(visits.len() >= 2);
        assert!(visits
            .iter()
            .all(|v| v["labels"].as_array().unwrap().len() == 10));
    }
}

#[test]
fn ablation_table_ranks_full_above_no_text() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["generate", "--seed", "7", "--out", "c.jsonl"], d);
    ok(
        &["ablate", "--data", "c.jsonl", "--out", "abl", "--seed", "7"],
        d,
    );
    let table = read(d.join("abl/ablation.csv"));
    let f1 = |variant: &str| -> f64 {
        let row = table
            .lines()
            .find(|l| l.starts_with(&format!("{variant},")))
            .unwrap();
        row.split(',').nth(3).unwrap().parse().unwrap()
    };
    assert!(f1("full") > f1("no_text"), "{table}");
    assert!(f1("full") >= f1("no_labtext"), "{table}");
}
