use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use contproto::corpus::{generate_synthetic_dataset, Corpus, Dataset, SynthConfig};
use contproto::encoder::EncoderParams;
use contproto::eval::{
    evaluate_corpus, export_embeddings, oracle_pseudo_f1, read_embeddings, refine_from_embeddings, EmbeddingKind,
    EvalReport,
};
use contproto::prototypes::PseudoLabelStore;
use contproto::trainer::{
    assign_initial_pseudo_labels, load_teacher, run_pipeline, save_teacher, train_teacher, ExperimentReport,
    TrainConfig, TrainMode,
};
use contproto::Real;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "contproto",
    version,
    about = "Cross-lingual self-training for span-based NER"
)]
struct Cli {
    /// Relative output paths are resolved against this directory.
    #[arg(long, global = true, env = "CONTPROTO_OUT_ROOT")]
    out_root: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, or import four CoNLL files.
    GenData(GenData),
    /// Train a teacher on the labeled source split.
    TrainTeacher(TrainTeacher),
    /// Assign initial soft pseudo labels to the target training split.
    PseudoLabel(PseudoLabel),
    /// Run teacher, pseudo labeling and student training end to end.
    Train(Train),
    /// Score a checkpoint or a finished run.
    Evaluate(Evaluate),
    /// Export span embeddings of one split as JSON lines.
    ExportEmbeddings(ExportEmbeddings),
    /// Refine a pseudo-label file offline from exported embeddings.
    RefineLabels(RefineLabels),
    /// Summarize finished runs with per-mode medians.
    Report(Report),
}

#[derive(Args)]
struct TrainOpts {
    /// TOML training configuration; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl TrainOpts {
    fn load(&self, mode: Option<TrainMode>) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(m) = mode {
            cfg.mode = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    /// TOML synthetic-corpus configuration.
    #[arg(long, conflicts_with = "conll")]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "conll")]
    seed: Option<u64>,
    /// Source train, source dev, target train and target test CoNLL files.
    #[arg(long, num_args = 4, value_names = ["SRC_TRAIN", "SRC_DEV", "TGT_TRAIN", "TGT_TEST"])]
    conll: Option<Vec<PathBuf>>,
}

#[derive(Args)]
struct TrainTeacher {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct PseudoLabel {
    #[arg(long)]
    data: PathBuf,
    /// Directory written by `train-teacher`.
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,
    /// Reuse a teacher from `train-teacher` instead of training one.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Continue a previous run in `--out` from its last finished epoch.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    SourceTrain,
    SourceDev,
    TargetTrain,
    TargetTest,
}

impl Split {
    fn corpus(self, ds: &Dataset) -> &Corpus {
        match self {
            Split::SourceTrain => &ds.source_train,
            Split::SourceDev => &ds.source_dev,
            Split::TargetTrain => &ds.target_train,
            Split::TargetTest => &ds.target_test,
        }
    }
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "run", required_unless_present = "run")]
    checkpoint: Option<PathBuf>,
    /// Directory written by `train`; scores its checkpoints and writes eval.json there.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "target-test")]
    split: Split,
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Z,
    Zeta,
}

#[derive(Args)]
struct ExportEmbeddings {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "target-train")]
    split: Split,
    #[arg(long, value_enum, default_value = "zeta")]
    which: Which,
    #[arg(long)]
    max_span_len: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RefineLabels {
    #[arg(long)]
    data: PathBuf,
    /// Outputs of `export-embeddings`, read in order; source-language files
    /// seed prototypes from gold labels.
    #[arg(long, num_args = 1.., required = true)]
    embeddings: Vec<PathBuf>,
    /// Pseudo-label file to refine.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.99)]
    alpha: f64,
    #[arg(long, default_value_t = 0.95)]
    beta: f64,
}

#[derive(Args)]
struct Report {
    /// Run directories, or directories whose subdirectories are runs.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    json: bool,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse().map_err(|e: contproto::Error| e.to_string())
}

struct Ctx {
    root: Option<PathBuf>,
}

impl Ctx {
    fn out(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(r) if p.is_relative() => r.join(p),
            _ => p.to_path_buf(),
        }
    }
}

fn load_data(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn gen_data(ctx: &Ctx, a: &GenData) -> Result<()> {
    let out = ctx.out(&a.out);
    let ds = match &a.conll {
        Some(p) => Dataset::from_conll(&p[0], &p[1], &p[2], &p[3])?,
        None => {
            let mut cfg = match &a.config {
                Some(p) => SynthConfig::load(p)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let ds = generate_synthetic_dataset(&cfg)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            std::fs::write(out.join("synth_config.toml"), cfg.to_toml())?;
            ds
        }
    };
    ds.save(&out)?;
    print_json(&json!({
        "out": out,
        "source_train": ds.source_train.len(),
        "source_dev": ds.source_dev.len(),
        "target_train": ds.target_train.len(),
        "target_test": ds.target_test.len(),
        "vocab_size": ds.vocab_size,
    }))
}

fn cmd_train_teacher(ctx: &Ctx, a: &TrainTeacher) -> Result<()> {
    let cfg = a.opts.load(None)?;
    let ds = load_data(&a.data)?;
    let out = ctx.out(&a.out);
    let teacher = train_teacher(&cfg, &ds)?;
    save_teacher(&out, &teacher)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    print_json(&json!({ "best_epoch": teacher.best_epoch, "best_dev_f1": teacher.best_dev_f1 }))
}

fn cmd_pseudo_label(ctx: &Ctx, a: &PseudoLabel) -> Result<()> {
    let cfg = a.opts.load(None)?;
    let ds = load_data(&a.data)?;
    let teacher = load_teacher(&a.teacher)?;
    let store = assign_initial_pseudo_labels(&teacher.params, &ds.target_train, cfg.max_span_len, cfg.beta)?;
    let out = ctx.out(&a.out);
    store.save(&out)?;
    let oracle = oracle_pseudo_f1(&store, &ds.target_train, ds.labels.num_classes()).ok();
    print_json(&json!({ "spans": store.len(), "oracle_f1": oracle }))
}

fn cmd_train(ctx: &Ctx, a: &Train) -> Result<()> {
    let cfg = a.opts.load(a.mode)?;
    let ds = load_data(&a.data)?;
    let teacher = a.teacher.as_deref().map(load_teacher).transpose()?;
    let report = run_pipeline(&cfg, &ds, &ctx.out(&a.out), a.resume, teacher)?;
    print_json(&report)
}

/// Oracle F1 of the newest refined pseudo-label file in a run directory.
fn latest_oracle(dir: &Path, ds: &Dataset, beta: f64) -> Result<Option<(usize, f64)>> {
    let mut latest = None;
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        let epoch = name
            .strip_prefix("pseudo_labels_epoch")
            .and_then(|r| r.strip_suffix(".jsonl"))
            .and_then(|e| e.parse::<usize>().ok());
        if let Some(e) = epoch {
            latest = latest.max(Some(e));
        }
    }
    let Some(e) = latest else { return Ok(None) };
    let path = dir.join(format!("pseudo_labels_epoch{e}.jsonl"));
    let store = PseudoLabelStore::<Real>::load(&path, beta, ds.target_train.len())?;
    match oracle_pseudo_f1(&store, &ds.target_train, ds.labels.num_classes()) {
        Ok(f) => Ok(Some((e, f))),
        Err(contproto::Error::OracleUnavailable) => Ok(None),
        Err(err) => Err(err.into()),
    }
}

fn cmd_evaluate(ctx: &Ctx, a: &Evaluate) -> Result<()> {
    let ds = load_data(&a.data)?;
    let corpus = a.split.corpus(&ds);
    let score = |path: &Path| -> Result<EvalReport> {
        let params = EncoderParams::<Real>::load(path)?;
        Ok(evaluate_corpus(&params, corpus, None)?)
    };
    let Some(run) = &a.run else {
        return print_json(&score(a.checkpoint.as_ref().expect("clap requires checkpoint or run"))?);
    };
    let run = ctx.out(run);
    let mut scores = BTreeMap::new();
    for name in ["teacher", "student_best", "student_final"] {
        let path = run.join(format!("{name}.json"));
        if path.exists() {
            scores.insert(name, score(&path)?);
        }
    }
    if scores.is_empty() {
        bail!("no checkpoints in {}", run.display());
    }
    let cfg = TrainConfig::load(&run.join("config.toml"))?;
    let oracle = latest_oracle(&run, &ds, cfg.beta)?;
    let out = json!({
        "scores": scores,
        "pseudo_labels": oracle.map(|(epoch, f1)| json!({ "epoch": epoch, "oracle_f1": f1 })),
    });
    std::fs::write(run.join("eval.json"), serde_json::to_string_pretty(&out)?)?;
    print_json(&out)
}

fn cmd_export(ctx: &Ctx, a: &ExportEmbeddings) -> Result<()> {
    let ds = load_data(&a.data)?;
    let params = EncoderParams::<Real>::load(&a.checkpoint)?;
    let which = match a.which {
        Which::Z => EmbeddingKind::Z,
        Which::Zeta => EmbeddingKind::Zeta,
    };
    let out = ctx.out(&a.out);
    let n = export_embeddings(&params, a.split.corpus(&ds), &ds.labels, which, a.max_span_len, &out)?;
    print_json(&json!({ "records": n, "out": out }))
}

fn cmd_refine(ctx: &Ctx, a: &RefineLabels) -> Result<()> {
    let ds = load_data(&a.data)?;
    let mut records = Vec::new();
    for p in &a.embeddings {
        records.extend(read_embeddings(p)?);
    }
    let mut store = PseudoLabelStore::<Real>::load(&a.labels, a.beta, ds.target_train.len())?;
    let summary = refine_from_embeddings(&records, &ds.labels, &mut store, a.alpha)?;
    store.save(&ctx.out(&a.out))?;
    let oracle = oracle_pseudo_f1(&store, &ds.target_train, ds.labels.num_classes()).ok();
    print_json(&json!({ "summary": summary, "oracle_f1": oracle }))
}

fn collect_reports(paths: &[PathBuf]) -> Result<Vec<ExperimentReport>> {
    let mut files = Vec::new();
    for p in paths {
        let direct = p.join("report.json");
        if direct.exists() {
            files.push(direct);
            continue;
        }
        let mut sub: Vec<PathBuf> = std::fs::read_dir(p)
            .with_context(|| format!("reading {}", p.display()))?
            .filter_map(|e| e.ok().map(|e| e.path().join("report.json")))
            .filter(|f| f.exists())
            .collect();
        sub.sort();
        files.extend(sub);
    }
    if files.is_empty() {
        bail!("no report.json found");
    }
    files
        .iter()
        .map(|f| {
            let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", f.display()))
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

fn cmd_report(a: &Report) -> Result<()> {
    let reports = collect_reports(&a.runs)?;
    let mut by_mode: BTreeMap<&str, Vec<&ExperimentReport>> = BTreeMap::new();
    for r in &reports {
        by_mode.entry(r.mode.as_str()).or_default().push(r);
    }
    let final_oracle = |r: &ExperimentReport| r.oracle_f1_per_epoch.last().copied().flatten();
    let summary: BTreeMap<&str, serde_json::Value> = by_mode
        .iter()
        .map(|(mode, rs)| {
            let med = |f: &dyn Fn(&ExperimentReport) -> Option<f64>| median(rs.iter().filter_map(|r| f(r)).collect());
            (
                *mode,
                json!({
                    "runs": rs.len(),
                    "initial_oracle_f1": med(&|r| r.initial_oracle_f1),
                    "final_oracle_f1": med(&final_oracle),
                    "final_target_f1": med(&|r| r.final_target_f1),
                    "selected_target_f1": med(&|r| r.selected_target_f1),
                }),
            )
        })
        .collect();
    if a.json {
        return print_json(&json!({ "runs": reports, "median_by_mode": summary }));
    }
    println!(
        "{:<28} {:>6} {:>10} {:>10} {:>10}",
        "run", "seed", "oracle0", "oracleN", "target"
    );
    for r in &reports {
        println!(
            "{:<28} {:>6} {:>10} {:>10} {:>10}",
            r.run_id,
            r.seed,
            fmt(r.initial_oracle_f1),
            fmt(final_oracle(r)),
            fmt(r.final_target_f1)
        );
    }
    println!();
    println!(
        "{:<28} {:>6} {:>10} {:>10} {:>10}",
        "median by mode", "runs", "oracle0", "oracleN", "target"
    );
    for (mode, s) in &summary {
        println!(
            "{:<28} {:>6} {:>10} {:>10} {:>10}",
            mode,
            s["runs"],
            fmt(s["initial_oracle_f1"].as_f64()),
            fmt(s["final_oracle_f1"].as_f64()),
            fmt(s["final_target_f1"].as_f64())
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let ctx = Ctx { root: cli.out_root };
    match &cli.cmd {
        Command::GenData(a) => gen_data(&ctx, a),
        Command::TrainTeacher(a) => cmd_train_teacher(&ctx, a),
        Command::PseudoLabel(a) => cmd_pseudo_label(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::ExportEmbeddings(a) => cmd_export(&ctx, a),
        Command::RefineLabels(a) => cmd_refine(&ctx, a),
        Command::Report(a) => cmd_report(a),
    }
}
