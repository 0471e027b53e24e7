//! Teacher → initial pseudo labels → student → report, optionally writing
//! every artifact to an output directory:
//!
//! ```text
//! config.toml                 configuration echo
//! teacher.json                teacher checkpoint (best source dev F1)
//! teacher_history.json        teacher metrics, kept for resumed runs
//! pseudo_labels_initial.jsonl teacher-assigned soft labels
//! pseudo_labels_epoch{e}.jsonl  refined labels after epoch e   (prototype modes)
//! prototypes_epoch{e}.json      prototypes and margins after e  (prototype modes)
//! run_state.json              resumable student state after the last epoch
//! metrics.jsonl               one record per step and per epoch
//! student_best.json           student checkpoint with best source dev F1
//! student_final.json          student checkpoint after the last epoch
//! report.json                 summary
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    assign_initial_pseudo_labels, train_student_until, train_teacher, MetricRecord, RunState, TeacherOutcome,
    TrainConfig,
};
use crate::corpus::Dataset;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::eval::evaluate_corpus;
use crate::prototypes::{MarginTable, PrototypeBank};
use crate::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub run_id: String,
    pub mode: String,
    pub seed: u64,
    pub teacher_best_epoch: usize,
    pub teacher_dev_f1: f64,
    pub teacher_target_f1: Option<f64>,
    /// Oracle F1 of the teacher-assigned labels.
    pub initial_oracle_f1: Option<f64>,
    pub oracle_f1_per_epoch: Vec<Option<f64>>,
    pub dev_f1_per_epoch: Vec<f64>,
    pub target_f1_per_epoch: Vec<Option<f64>>,
    /// Mean total loss per epoch.
    pub loss_per_epoch: Vec<f64>,
    pub selected_epoch: usize,
    pub selected_dev_f1: f64,
    pub selected_target_f1: Option<f64>,
    /// Target F1 after the last epoch.
    pub final_target_f1: Option<f64>,
    pub reg_clamps: u64,
}

fn target_f1(params: &EncoderParams<Real>, ds: &Dataset, cfg: &TrainConfig) -> Result<Option<f64>> {
    if ds.target_test.is_empty() || ds.target_test.visible_gold().is_none() {
        return Ok(None);
    }
    Ok(Some(
        evaluate_corpus(params, &ds.target_test, Some(cfg.max_span_len))?.micro_f1,
    ))
}

fn build_report(
    cfg: &TrainConfig,
    ds: &Dataset,
    teacher: &TeacherOutcome,
    state: &RunState,
) -> Result<ExperimentReport> {
    let epochs: Vec<&MetricRecord> = state.history.iter().filter(|r| r.step.is_none()).collect();
    let best = state
        .best
        .as_ref()
        .ok_or_else(|| Error::Config("student has not finished an epoch".into()))?;
    Ok(ExperimentReport {
        run_id: cfg.run_id(),
        mode: cfg.mode.to_string(),
        seed: cfg.seed,
        teacher_best_epoch: teacher.best_epoch,
        teacher_dev_f1: teacher.best_dev_f1,
        teacher_target_f1: target_f1(&teacher.params, ds, cfg)?,
        initial_oracle_f1: state.initial_oracle_f1,
        oracle_f1_per_epoch: epochs.iter().map(|r| r.oracle_f1).collect(),
        dev_f1_per_epoch: epochs.iter().map(|r| r.dev_f1.unwrap_or(0.0)).collect(),
        target_f1_per_epoch: epochs.iter().map(|r| r.target_f1).collect(),
        loss_per_epoch: epochs.iter().map(|r| r.total).collect(),
        selected_epoch: best.epoch,
        selected_dev_f1: best.dev_f1,
        selected_target_f1: target_f1(&best.params, ds, cfg)?,
        final_target_f1: epochs.last().and_then(|r| r.target_f1),
        reg_clamps: state.reg_clamps,
    })
}

/// In-memory student run on top of an existing teacher.
pub fn run_experiment(
    cfg: &TrainConfig,
    ds: &Dataset,
    teacher: &TeacherOutcome,
) -> Result<(ExperimentReport, RunState)> {
    let store = assign_initial_pseudo_labels(&teacher.params, &ds.target_train, cfg.max_span_len, cfg.beta)?;
    let mut state = RunState::new(cfg, ds, store, Some(&teacher.params))?;
    train_student_until(cfg, ds, &mut state, cfg.epochs, &mut |_, _| Ok(()))?;
    Ok((build_report(cfg, ds, teacher, &state)?, state))
}

/// Paths written by [`run_pipeline`].
#[derive(Clone, Debug)]
pub struct PipelineArtifacts {
    pub dir: PathBuf,
}

impl PipelineArtifacts {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn metrics(&self) -> PathBuf {
        self.path("metrics.jsonl")
    }

    pub fn report(&self) -> PathBuf {
        self.path("report.json")
    }

    pub fn run_state(&self) -> PathBuf {
        self.path("run_state.json")
    }
}

#[derive(Serialize, Deserialize)]
struct TeacherHistory {
    best_epoch: usize,
    best_dev_f1: f64,
    history: Vec<MetricRecord>,
}

#[derive(Serialize)]
struct PrototypeSnapshot<'a> {
    epoch: usize,
    prototypes: &'a PrototypeBank<Real>,
    margins: &'a MarginTable,
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_metrics(path: &Path, teacher: &[MetricRecord], student: &[MetricRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in teacher.iter().chain(student) {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads the teacher of a previous run in `dir`.
pub fn load_teacher(dir: &Path) -> Result<TeacherOutcome> {
    let params = EncoderParams::load(&dir.join("teacher.json"))?;
    let path = dir.join("teacher_history.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let h: TeacherHistory = serde_json::from_str(&text)?;
    Ok(TeacherOutcome {
        params,
        best_epoch: h.best_epoch,
        best_dev_f1: h.best_dev_f1,
        history: h.history,
    })
}

/// Writes a teacher checkpoint plus its history into `dir`.
pub fn save_teacher(dir: &Path, teacher: &TeacherOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    teacher.params.save(&dir.join("teacher.json"))?;
    let h = TeacherHistory {
        best_epoch: teacher.best_epoch,
        best_dev_f1: teacher.best_dev_f1,
        history: teacher.history.clone(),
    };
    write(&dir.join("teacher_history.json"), &serde_json::to_string(&h)?)
}

/// Full pipeline writing artifacts into `dir`. With `resume`, a previous
/// run's teacher and `run_state.json` in `dir` are picked up and training
/// continues from the next unfinished epoch. A supplied `teacher` replaces
/// teacher training on a fresh run.
pub fn run_pipeline(
    cfg: &TrainConfig,
    ds: &Dataset,
    dir: &Path,
    resume: bool,
    teacher: Option<TeacherOutcome>,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let art = PipelineArtifacts { dir: dir.to_path_buf() };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let resuming = resume && art.run_state().exists();
    if resuming {
        let echo = TrainConfig::load(&art.path("config.toml"))?;
        if &echo != cfg {
            return Err(Error::Config(
                "cannot resume: configuration differs from the saved run".into(),
            ));
        }
    }
    write(&art.path("config.toml"), &cfg.to_toml())?;

    let (teacher, mut state) = if resuming {
        (load_teacher(dir)?, RunState::load(&art.run_state())?)
    } else {
        let teacher = match teacher {
            Some(t) => t,
            None => train_teacher(cfg, ds)?,
        };
        save_teacher(dir, &teacher)?;
        let store = assign_initial_pseudo_labels(&teacher.params, &ds.target_train, cfg.max_span_len, cfg.beta)?;
        store.save(&art.path("pseudo_labels_initial.jsonl"))?;
        let state = RunState::new(cfg, ds, store, Some(&teacher.params))?;
        (teacher, state)
    };

    let teacher_history = teacher.history.clone();
    let mut on_epoch = |state: &RunState, epoch: usize| -> Result<()> {
        if let (Some(bank), Some(margins)) = (&state.bank, &state.margins) {
            state
                .store
                .save(&art.path(&format!("pseudo_labels_epoch{epoch}.jsonl")))?;
            let snap = PrototypeSnapshot {
                epoch,
                prototypes: bank,
                margins,
            };
            write(
                &art.path(&format!("prototypes_epoch{epoch}.json")),
                &serde_json::to_string(&snap)?,
            )?;
        }
        write_metrics(&art.metrics(), &teacher_history, &state.history)?;
        state.save(&art.run_state())
    };
    train_student_until(cfg, ds, &mut state, cfg.epochs, &mut on_epoch)?;
    write_metrics(&art.metrics(), &teacher_history, &state.history)?;

    let best = state
        .best
        .as_ref()
        .ok_or_else(|| Error::Config("no student epoch completed".into()))?;
    best.params.save(&art.path("student_best.json"))?;
    state.params.save(&art.path("student_final.json"))?;
    let report = build_report(cfg, ds, &teacher, &state)?;
    write(&art.report(), &serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}
