use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use chronofuse::checkpoint::Checkpoint;
use chronofuse::config::Settings;
use chronofuse::ehr::{
    build_dataset, patient_level_split, read_jsonl, validate_corpus, write_jsonl, PatientRecord,
    Task, VisitSample,
};
use chronofuse::export::{
    write_ablation_csv, write_embeddings_csv, write_predictions_csv, write_ranking_csv,
};
use chronofuse::gradcheck::{gradient_check, tiny_setup, GradCheckConfig};
use chronofuse::manifest::RunManifest;
use chronofuse::metrics::{EvalOptions, MetricReport};
use chronofuse::model::{Ablation, EncodedSample};
use chronofuse::pipeline::{run, ExperimentConfig};
use chronofuse::synth::{default_label_names, generate, write_stats_csv};
use chronofuse::text::PrecomputedEmbeddings;
use chronofuse::train::{evaluate_model, write_log_csv};
use chronofuse::tst::NormKind;
use chronofuse::{Error, Result};

#[derive(Parser)]
#[command(
    name = "chronofuse",
    version,
    about = "Chronic-disease prediction from visit timelines and clinical text"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (JSONL) and its label prevalence table.
    Generate {
        #[command(flatten)]
        opts: Opts,
        #[arg(long)]
        out: PathBuf,
        /// Prevalence CSV; defaults to `<out>.stats.csv`.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Train on the training split and evaluate on held-out patients.
    Train {
        #[command(flatten)]
        opts: Opts,
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        opts: Opts,
        #[command(flatten)]
        input: CheckpointInput,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-visit probabilities.
    Predict {
        #[command(flatten)]
        opts: Opts,
        #[command(flatten)]
        input: CheckpointInput,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train full, no_text and no_labtext under one seed and compare.
    Ablate {
        #[command(flatten)]
        opts: Opts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export fused representations with a dominant-label tag.
    EmbedExport {
        #[command(flatten)]
        opts: Opts,
        #[command(flatten)]
        input: CheckpointInput,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the analytic gradients on a tiny model.
    Gradcheck {
        #[command(flatten)]
        opts: Opts,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Default)]
struct Opts {
    /// Settings file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any setting as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    ablation: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    norm: Option<String>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    n_patients: Option<String>,
    #[arg(long)]
    fusion_depth: Option<String>,
    /// Precomputed text embeddings CSV (`patient_id,visit_index,e0,...`).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    per_label: bool,
    /// Disable data parallelism.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct CheckpointInput {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
    All,
}

impl Opts {
    fn settings(&self) -> Result<Settings> {
        let mut s = match &self.config {
            Some(p) => Settings::load(p)?,
            None => Settings::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
            s.set(k, v)?;
        }
        let named = [
            ("seed", &self.seed),
            ("task", &self.task),
            ("ablation", &self.ablation),
            ("alpha", &self.alpha),
            ("k", &self.k),
            ("norm", &self.norm),
            ("target", &self.target),
            ("epochs", &self.epochs),
            ("n_patients", &self.n_patients),
            ("fusion_depth", &self.fusion_depth),
        ];
        for (k, v) in named {
            if let Some(v) = v {
                s.set(k, v)?;
            }
        }
        if self.per_label {
            s.per_label = true;
        }
        if self.sequential {
            s.sequential = true;
        }
        Ok(s)
    }

    fn inputs(&self, extra: &[&Path]) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = extra.iter().map(|p| p.to_path_buf()).collect();
        v.extend(self.config.clone());
        v.extend(self.embeddings.clone());
        v
    }

    fn embeddings(&self) -> Result<Option<PrecomputedEmbeddings>> {
        self.embeddings
            .as_deref()
            .map(|p| PrecomputedEmbeddings::load(p, None))
            .transpose()
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn output_names(task: Task, n_labels: usize) -> Vec<String> {
    let names = default_label_names(n_labels);
    match task {
        Task::Multilabel => names,
        Task::HeartFailure { label_index } => vec![names
            .get(label_index)
            .cloned()
            .unwrap_or_else(|| "target".into())],
    }
}

fn settings_json(s: &Settings) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(s)?)
}

fn cmd_generate(opts: &Opts, out: &Path, stats: Option<&Path>) -> Result<()> {
    let s = opts.settings()?;
    let cfg = s.generator_config()?;
    let stats = stats.map_or_else(|| with_suffix(out, ".stats.csv"), Path::to_path_buf);
    let manifest_path = with_suffix(out, ".manifest.json");
    let mut manifest =
        RunManifest::start("generate", settings_json(&s)?, s.seed, &opts.inputs(&[]))?;
    manifest.write(&manifest_path)?;
    let records = generate(&cfg, s.exec())?;
    write_jsonl(out, &records)?;
    write_stats_csv(&stats, &records, &cfg.label_names)?;
    manifest.finish(&[out.to_path_buf(), stats], &manifest_path)?;
    eprintln!("wrote {} patients to {}", records.len(), out.display());
    Ok(())
}

fn write_report(
    dir: &Path,
    stem: &str,
    report: &MetricReport,
    names: &[String],
    outputs: &mut Vec<PathBuf>,
) -> Result<()> {
    let csv = dir.join(format!("{stem}.csv"));
    let json = dir.join(format!("{stem}.json"));
    report.write_csv(&csv)?;
    report.write_json(&json)?;
    outputs.extend([csv, json]);
    if !report.per_label.is_empty() {
        let p = dir.join(format!("{stem}_per_label.csv"));
        report.write_per_label_csv(&p, names)?;
        outputs.push(p);
    }
    if !report.recall_at_k.is_empty() {
        let p = dir.join(format!("{stem}_ranking.csv"));
        write_ranking_csv(&p, report)?;
        outputs.push(p);
    }
    Ok(())
}

fn load_corpus(path: &Path) -> Result<(Vec<PatientRecord>, usize)> {
    let records = read_jsonl(path)?;
    let d = validate_corpus(&records)?;
    Ok((records, d))
}

fn experiment_config(
    s: &Settings,
    n_labels: usize,
    emb: Option<&PrecomputedEmbeddings>,
) -> ExperimentConfig {
    let mut cfg = s.experiment(n_labels, emb.is_some());
    if let Some(e) = emb {
        cfg.model.text.embed_dim = e.dim();
    }
    cfg
}

fn cmd_train(opts: &Opts, data: &Path, out: &Path) -> Result<()> {
    let s = opts.settings()?;
    std::fs::create_dir_all(out)?;
    let manifest_path = out.join("manifest.json");
    let mut manifest =
        RunManifest::start("train", settings_json(&s)?, s.seed, &opts.inputs(&[data]))?;
    manifest.write(&manifest_path)?;

    let (records, d) = load_corpus(data)?;
    let emb = opts.embeddings()?;
    let cfg = experiment_config(&s, d, emb.as_ref());
    let exp = run(&records, &cfg, emb.as_ref())?;
    let names = output_names(cfg.model.task, d);

    let mut outputs = Vec::new();
    let ckpt = out.join("checkpoint.bin");
    Checkpoint::new(
        exp.model,
        exp.trainer,
        names.clone(),
        cfg.train_fraction,
        cfg.target,
    )
    .save(&ckpt)?;
    outputs.push(ckpt);
    let log = out.join("train_log.csv");
    write_log_csv(&log, &exp.log)?;
    outputs.push(log);
    write_report(out, "metrics", &exp.report, &names, &mut outputs)?;
    write_report(out, "baseline_metrics", &exp.baseline, &names, &mut outputs)?;
    for (name, cohort) in [
        ("cohort_train.csv", &exp.data.train_cohort),
        ("cohort_test.csv", &exp.data.test_cohort),
    ] {
        cohort.write_csv(&out.join(name))?;
        outputs.push(out.join(name));
    }
    manifest.finish(&outputs, &manifest_path)?;
    eprintln!(
        "f1_macro {:.4} (baseline {:.4}), accuracy {:.4}{}",
        exp.report.f1_macro,
        exp.baseline.f1_macro,
        exp.report.accuracy,
        exp.report
            .auc
            .map_or(String::new(), |a| format!(", auc {a:.4}"))
    );
    Ok(())
}

/// Rebuilds the samples of one side of the checkpoint's patient split.
fn checkpoint_samples(
    ckpt: &Checkpoint,
    records: &[PatientRecord],
    split: Split,
) -> Result<Vec<VisitSample>> {
    let d = validate_corpus(records)?;
    if d != ckpt.model.config.n_labels {
        return Err(Error::LabelMismatch {
            model: ckpt.model.config.n_labels,
            data: d,
        });
    }
    let task = ckpt.model.config.task;
    let chosen = match split {
        Split::All => records.to_vec(),
        _ => {
            let (train, test) =
                patient_level_split(records, ckpt.train_fraction, ckpt.trainer.config.seed)?;
            if split == Split::Train {
                train
            } else {
                test
            }
        }
    };
    Ok(build_dataset(&chosen, task, ckpt.target)?.0)
}

struct Loaded {
    ckpt: Checkpoint,
    samples: Vec<EncodedSample>,
}

fn load_for_inference(opts: &Opts, input: &CheckpointInput) -> Result<Loaded> {
    let ckpt = Checkpoint::load(&input.checkpoint)?;
    let records = read_jsonl(&input.data)?;
    let raw = checkpoint_samples(&ckpt, &records, input.split)?;
    let emb = opts.embeddings()?;
    if ckpt.model.config.precomputed_text && emb.is_none() {
        return Err(Error::Config(
            "checkpoint uses precomputed text embeddings; pass --embeddings".into(),
        ));
    }
    let samples = ckpt.model.encode_samples(&raw, emb.as_ref())?;
    Ok(Loaded { ckpt, samples })
}

fn cmd_eval(opts: &Opts, input: &CheckpointInput, out: &Path) -> Result<()> {
    let s = opts.settings()?;
    std::fs::create_dir_all(out)?;
    let manifest_path = out.join("manifest.json");
    let mut manifest = RunManifest::start(
        "eval",
        settings_json(&s)?,
        s.seed,
        &opts.inputs(&[&input.checkpoint, &input.data]),
    )?;
    manifest.write(&manifest_path)?;
    let loaded = load_for_inference(opts, input)?;
    let eval_opts = EvalOptions {
        k_list: s.k.clone(),
        per_label: s.per_label,
        subset_accuracy: s.subset_accuracy,
    };
    let (report, _) = evaluate_model(&loaded.ckpt.model, &loaded.samples, &eval_opts, s.exec())?;
    let mut outputs = Vec::new();
    write_report(
        out,
        "metrics",
        &report,
        &loaded.ckpt.label_names,
        &mut outputs,
    )?;
    manifest.finish(&outputs, &manifest_path)?;
    eprintln!(
        "f1_macro {:.4}, accuracy {:.4} on {} samples",
        report.f1_macro, report.accuracy, report.n_samples
    );
    Ok(())
}

fn cmd_predict(opts: &Opts, input: &CheckpointInput, out: &Path, embed: bool) -> Result<()> {
    let s = opts.settings()?;
    let manifest_path = with_suffix(out, ".manifest.json");
    let command = if embed { "embed-export" } else { "predict" };
    let mut manifest = RunManifest::start(
        command,
        settings_json(&s)?,
        s.seed,
        &opts.inputs(&[&input.checkpoint, &input.data]),
    )?;
    manifest.write(&manifest_path)?;
    let loaded = load_for_inference(opts, input)?;
    let outputs = loaded.ckpt.model.predict(&loaded.samples, s.exec())?;
    if embed {
        write_embeddings_csv(out, &loaded.samples, &outputs, &loaded.ckpt.label_names)?;
    } else {
        write_predictions_csv(out, &loaded.samples, &outputs, &loaded.ckpt.label_names)?;
    }
    manifest.finish(&[out.to_path_buf()], &manifest_path)?;
    eprintln!("wrote {} rows to {}", outputs.len(), out.display());
    Ok(())
}

fn cmd_ablate(opts: &Opts, data: &Path, out: &Path) -> Result<()> {
    let s = opts.settings()?;
    std::fs::create_dir_all(out)?;
    let manifest_path = out.join("manifest.json");
    let mut manifest =
        RunManifest::start("ablate", settings_json(&s)?, s.seed, &opts.inputs(&[data]))?;
    manifest.write(&manifest_path)?;
    let (records, d) = load_corpus(data)?;
    let emb = opts.embeddings()?;
    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    let mut ranking = csv::Writer::from_path(out.join("ablation_ranking.csv"))?;
    ranking.write_record(["variant", "k", "recall", "ndcg"])?;
    let mut baseline = None;
    for variant in [Ablation::Full, Ablation::NoText, Ablation::NoLabText] {
        let mut cfg = experiment_config(&s, d, emb.as_ref());
        cfg.model.ablation = variant;
        let exp = run(&records, &cfg, emb.as_ref())?;
        let log = out.join(format!("train_log_{}.csv", variant.name()));
        write_log_csv(&log, &exp.log)?;
        outputs.push(log);
        for (k, r) in &exp.report.recall_at_k {
            ranking.write_record([
                variant.name().to_string(),
                k.to_string(),
                format!("{r:?}"),
                format!("{:?}", exp.report.ndcg_at_k[k]),
            ])?;
        }
        eprintln!("{}: f1_macro {:.4}", variant.name(), exp.report.f1_macro);
        baseline.get_or_insert(exp.baseline);
        rows.push((variant.name().to_string(), exp.report));
    }
    ranking.flush()?;
    outputs.push(out.join("ablation_ranking.csv"));
    if let Some(b) = baseline {
        rows.push(("prevalence_baseline".to_string(), b));
    }
    let table = out.join("ablation.csv");
    write_ablation_csv(&table, &rows)?;
    outputs.push(table);
    manifest.finish(&outputs, &manifest_path)?;
    Ok(())
}

fn cmd_gradcheck(opts: &Opts, batch: usize, tolerance: f64, out: Option<&Path>) -> Result<()> {
    let s = opts.settings()?;
    let norm = if s.norm == "batch" {
        NormKind::Batch
    } else {
        NormKind::Layer
    };
    let manifest_path = out.map(|p| with_suffix(p, ".manifest.json"));
    let mut manifest =
        RunManifest::start("gradcheck", settings_json(&s)?, s.seed, &opts.inputs(&[]))?;
    if let Some(p) = &manifest_path {
        manifest.write(p)?;
    }
    let (model, samples) = tiny_setup(s.seed, norm, batch)?;
    let loss = s.train_config().loss;
    let cfg = GradCheckConfig {
        tolerance,
        ..Default::default()
    };
    let report = gradient_check(&model, &samples, &loss, &cfg)?;
    for t in &report.tensors {
        println!(
            "{:<28} checked {:>4} skipped {:>4} max_rel_err {:.3e}",
            t.name, t.checked, t.skipped, t.max_rel_err
        );
    }
    println!(
        "max_rel_err {:.3e} (tolerance {:.1e}, floor {:.1e}), {} checked, {} skipped",
        report.max_rel_err, report.tolerance, report.floor, report.checked, report.skipped
    );
    if let (Some(p), Some(mp)) = (out, &manifest_path) {
        std::fs::write(p, serde_json::to_string_pretty(&report)? + "\n")?;
        manifest.finish(&[p.to_path_buf()], mp)?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(Error::GradCheckFailed(format!(
            "max relative error {:e} >= {:e}",
            report.max_rel_err, report.tolerance
        )))
    }
}

fn dispatch(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Generate { opts, out, stats } => cmd_generate(opts, out, stats.as_deref()),
        Command::Train { opts, data, out } => cmd_train(opts, data, out),
        Command::Eval { opts, input, out } => cmd_eval(opts, input, out),
        Command::Predict { opts, input, out } => cmd_predict(opts, input, out, false),
        Command::Ablate { opts, data, out } => cmd_ablate(opts, data, out),
        Command::EmbedExport { opts, input, out } => cmd_predict(opts, input, out, true),
        Command::Gradcheck {
            opts,
            batch,
            tolerance,
            out,
        } => cmd_gradcheck(opts, *batch, *tolerance, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
