//! Teacher training, initial pseudo-labeling, and self-training of the
//! student with optional contrastive, consistency and prototype machinery.
//!
//! A student step:
//!
//! 1. draw a source batch (cycling) and the next target batch,
//! 2. run the encoder once, or twice with independent dropout when the mode
//!    has a contrastive or consistency term,
//! 3. cross-entropy on the first pass (gold for source spans, stored soft
//!    labels for target spans), plus the mode's extra terms,
//! 4. backward and AdamW,
//! 5. with prototypes on: update prototypes from the first pass's vectors,
//!    refine the batch's stored labels (after warm-up), and record margin
//!    statistics. Refined labels take effect from the next step.

mod config;
mod pipeline;
pub mod schedule;

pub use config::{LrSchedule, ProtoSource, TrainConfig, TrainMode};
pub use pipeline::{load_teacher, run_experiment, run_pipeline, save_teacher, ExperimentReport, PipelineArtifacts};

use serde::{Deserialize, Serialize};

use crate::corpus::{enumerate_spans, sample_training_spans, Corpus, Dataset, Language, Span};
use crate::encoder::{argmax, encode_pass, infer, EncoderParams, SpanRef};
use crate::error::{Error, Result};
use crate::eval::{evaluate_corpus, oracle_pseudo_f1};
use crate::math::{adamw_step, derive_seed, AdamWState, Gradients, NodeId, Tape, Tensor};
use crate::objectives::{
    loss_cont, loss_reg, loss_src, loss_tgt, total_loss, LossMode, LossNodes, LossReport, MultiViewSet, SideRows,
};
use crate::prototypes::{refinement_rate, warmup_gate, MarginTable, PrototypeBank, PseudoLabelStore};
use crate::Real;

/// One line of the metrics file: a step (`step` set) or an epoch summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u64>,
    pub l_src: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_tgt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_cont: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_reg: Option<f64>,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_f1: Option<f64>,
    /// Target test F1 (reported only, never used for selection).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margins: Option<Vec<Option<f64>>>,
}

impl MetricRecord {
    fn step(run_id: &str, epoch: usize, step: u64, r: &LossReport, has_tgt: bool) -> Self {
        Self {
            run_id: run_id.to_string(),
            epoch,
            step: Some(step),
            l_src: r.l_src,
            l_tgt: has_tgt.then_some(r.l_tgt),
            l_cont: r.l_cont,
            l_reg: r.l_reg,
            total: r.total,
            dev_f1: None,
            oracle_f1: None,
            target_f1: None,
            margins: None,
        }
    }

    /// Epoch summary with losses averaged over that epoch's step records.
    fn summary(run_id: &str, epoch: usize, steps: &[MetricRecord]) -> Self {
        let n = steps.len().max(1) as f64;
        let mean = |f: &dyn Fn(&MetricRecord) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = steps.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / n)
        };
        Self {
            run_id: run_id.to_string(),
            epoch,
            step: None,
            l_src: mean(&|r| Some(r.l_src)).unwrap_or(0.0),
            l_tgt: mean(&|r| r.l_tgt),
            l_cont: mean(&|r| r.l_cont),
            l_reg: mean(&|r| r.l_reg),
            total: mean(&|r| Some(r.total)).unwrap_or(0.0),
            dev_f1: None,
            oracle_f1: None,
            target_f1: None,
            margins: None,
        }
    }
}

/// Parameters of the epoch with the best source dev F1 (later epochs win
/// ties).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub dev_f1: f64,
    pub params: EncoderParams<Real>,
}

fn consider_best(best: &mut Option<BestCheckpoint>, epoch: usize, dev_f1: f64, params: &EncoderParams<Real>) {
    if best.as_ref().is_none_or(|b| dev_f1 >= b.dev_f1) {
        *best = Some(BestCheckpoint {
            epoch,
            dev_f1,
            params: params.clone(),
        });
    }
}

fn check_dataset(ds: &Dataset) -> Result<()> {
    if ds.source_train.is_empty() {
        return Err(Error::EmptyCorpus("source_train"));
    }
    if ds.source_dev.is_empty() {
        return Err(Error::EmptyCorpus("source_dev"));
    }
    Ok(())
}

/// Labeled source spans of a batch, placed on the first rows of a pass.
struct SourcePart {
    side: SideRows,
    gold: Vec<usize>,
}

fn add_source_spans(
    cfg: &TrainConfig,
    corpus: &Corpus,
    batch: &[usize],
    rng: &mut crate::math::Rng,
    sentences: &mut Vec<Vec<usize>>,
    refs: &mut Vec<SpanRef>,
) -> Result<SourcePart> {
    let mut part = SourcePart {
        side: SideRows::default(),
        gold: Vec::new(),
    };
    for &i in batch {
        let s = &corpus.sentences[i];
        let gold = s
            .gold_spans
            .as_deref()
            .ok_or_else(|| Error::Config(format!("source sentence {i} has no gold annotations")))?;
        let slot = sentences.len();
        sentences.push(s.tokens.clone());
        for (span, class) in sample_training_spans(s.len(), gold, cfg.negatives(), Some(cfg.max_span_len), rng) {
            part.side.push(refs.len(), slot);
            part.gold.push(class);
            refs.push(SpanRef { sentence: slot, span });
        }
    }
    Ok(part)
}

fn param_grads(grads: &Gradients<Real>, nodes: &[NodeId], params: &EncoderParams<Real>) -> Vec<Tensor<Real>> {
    nodes
        .iter()
        .zip(params.tensors())
        .map(|(&n, t)| grads.get_or_zeros(n, t))
        .collect()
}

fn scalar(tape: &Tape<Real>, node: NodeId) -> f64 {
    tape.value(node).item().unwrap_or(f64::NAN)
}

/// Outcome of teacher training.
#[derive(Clone, Debug)]
pub struct TeacherOutcome {
    /// Best-by-dev parameters.
    pub params: EncoderParams<Real>,
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub history: Vec<MetricRecord>,
}

pub fn teacher_run_id(cfg: &TrainConfig) -> String {
    format!("teacher-seed{}", cfg.seed)
}

/// Trains on labeled source data with the source cross-entropy alone and
/// returns the checkpoint with the highest dev micro-F1.
pub fn train_teacher(cfg: &TrainConfig, ds: &Dataset) -> Result<TeacherOutcome> {
    cfg.validate()?;
    check_dataset(ds)?;
    let mut enc = cfg.encoder_config(ds);
    enc.init_seed = derive_seed(cfg.seed, "teacher-init", 0);
    let mut params = EncoderParams::<Real>::init(enc)?;
    let mut opt = AdamWState::new(params.tensors());
    let total = (cfg.teacher_epochs * schedule::steps_per_epoch(ds.source_train.len(), cfg.batch_size)) as u64;
    let run_id = teacher_run_id(cfg);
    let mut history = Vec::new();
    let mut best = None;
    let mut step = 0u64;
    let n = ds.source_train.len();
    for epoch in 0..cfg.teacher_epochs {
        let mut steps = Vec::new();
        for batch in schedule::teacher_batches(cfg.seed, epoch, n, cfg.batch_size) {
            let mut sentences = Vec::new();
            let mut refs = Vec::new();
            let mut rng = schedule::span_rng(cfg.seed, "teacher", step);
            let src = add_source_spans(cfg, &ds.source_train, &batch, &mut rng, &mut sentences, &mut refs)?;
            let views: Vec<&[usize]> = sentences.iter().map(Vec::as_slice).collect();
            let mut tape = Tape::new();
            let nodes = params.register(&mut tape);
            let mut dropout = schedule::dropout_rng(cfg.seed, "teacher", step);
            let pass = encode_pass(&mut tape, &params, &nodes, &views, &refs, Some(&mut dropout))?;
            let loss = loss_src(&mut tape, pass.probs, &src.side, &src.gold)?;
            let value = scalar(&tape, loss);
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "teacher epoch {epoch} step {step}: source batch {batch:?}, l_src = {value}"
                )));
            }
            let grads = tape.backward(loss)?;
            let g = param_grads(&grads, &nodes.all, &params);
            adamw_step(&mut params.tensors_mut(), &g, &cfg.optimizer(step, total), &mut opt)?;
            let report = LossReport {
                l_src: value,
                total: value,
                ..LossReport::default()
            };
            steps.push(MetricRecord::step(&run_id, epoch, step, &report, false));
            step += 1;
        }
        let dev_f1 = evaluate_corpus(&params, &ds.source_dev, Some(cfg.max_span_len))?.micro_f1;
        consider_best(&mut best, epoch, dev_f1, &params);
        let mut summary = MetricRecord::summary(&run_id, epoch, &steps);
        summary.dev_f1 = Some(dev_f1);
        history.extend(steps);
        history.push(summary);
    }
    let best = best.expect("at least one epoch");
    Ok(TeacherOutcome {
        params: best.params,
        best_epoch: best.epoch,
        best_dev_f1: best.dev_f1,
        history,
    })
}

/// The teacher's full (dropout-free) distribution for every enumerated
/// span of every sentence of `corpus`.
pub fn assign_initial_pseudo_labels(
    teacher: &EncoderParams<Real>,
    corpus: &Corpus,
    max_len: usize,
    beta: f64,
) -> Result<PseudoLabelStore<Real>> {
    let cap = max_len.min(teacher.config.max_span_len);
    let mut entries = Vec::with_capacity(corpus.len());
    for chunk in corpus.sentences.chunks(64) {
        let views: Vec<&[usize]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
        let per: Vec<Vec<Span>> = chunk.iter().map(|s| enumerate_spans(s.len(), Some(cap))).collect();
        let refs: Vec<SpanRef> = per
            .iter()
            .enumerate()
            .flat_map(|(i, spans)| spans.iter().map(move |&span| SpanRef { sentence: i, span }))
            .collect();
        let out = infer(teacher, &views, &refs)?;
        let mut row = 0;
        for spans in per {
            let labels = spans
                .into_iter()
                .map(|span| {
                    let y = out.probs.row(row).to_vec();
                    row += 1;
                    (span, y)
                })
                .collect();
            entries.push(labels);
        }
    }
    PseudoLabelStore::new(beta, entries)
}

/// Everything needed to continue a student run bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub params: EncoderParams<Real>,
    pub optimizer: AdamWState<Real>,
    pub bank: Option<PrototypeBank<Real>>,
    pub margins: Option<MarginTable>,
    pub store: PseudoLabelStore<Real>,
    /// First epoch not yet run.
    pub next_epoch: usize,
    pub global_step: u64,
    pub history: Vec<MetricRecord>,
    pub best: Option<BestCheckpoint>,
    pub initial_oracle_f1: Option<f64>,
    /// Number of log-floor clamps in the consistency term so far.
    pub reg_clamps: u64,
}

impl RunState {
    /// Fresh student state; `teacher` seeds the weights when `warm_start`.
    pub fn new(
        cfg: &TrainConfig,
        ds: &Dataset,
        store: PseudoLabelStore<Real>,
        teacher: Option<&EncoderParams<Real>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let params = match teacher {
            Some(t) if cfg.warm_start => t.clone(),
            _ => {
                let mut enc = cfg.encoder_config(ds);
                enc.init_seed = derive_seed(cfg.seed, "student-init", 0);
                EncoderParams::init(enc)?
            }
        };
        let k = ds.labels.num_classes();
        let (bank, margins) = match cfg.mode.prototypes() {
            None => (None, None),
            Some(source) => {
                let dim = match source {
                    ProtoSource::Projected => params.config.d_proj,
                    ProtoSource::NormalizedSpan => params.config.z_dim(),
                };
                let margins = if cfg.mode == TrainMode::FixedMargin {
                    MarginTable::fixed(k, cfg.fixed_margin)
                } else {
                    MarginTable::new(k)
                };
                (Some(PrototypeBank::new(k, dim, cfg.alpha)?), Some(margins))
            }
        };
        let initial_oracle_f1 = match oracle_pseudo_f1(&store, &ds.target_train, k) {
            Ok(f) => Some(f),
            Err(Error::OracleUnavailable) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            optimizer: AdamWState::new(params.tensors()),
            params,
            bank,
            margins,
            store,
            next_epoch: 0,
            global_step: 0,
            history: Vec::new(),
            best: None,
            initial_oracle_f1,
            reg_clamps: 0,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn normalized_rows(t: &Tensor<Real>) -> Vec<Vec<Real>> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let n = r.iter().map(|x| x * x).sum::<Real>().sqrt();
            if n > 0.0 {
                r.iter().map(|x| x / n).collect()
            } else {
                r.to_vec()
            }
        })
        .collect()
}

fn student_step(
    cfg: &TrainConfig,
    ds: &Dataset,
    state: &mut RunState,
    epoch: usize,
    target_batch: &[usize],
) -> Result<LossReport> {
    let step = state.global_step;
    let mode: LossMode = cfg.mode.loss_mode();
    let source_batch = schedule::source_batch(cfg.seed, step, ds.source_train.len(), cfg.batch_size);

    let mut sentences = Vec::new();
    let mut refs = Vec::new();
    let mut rng = schedule::span_rng(cfg.seed, "student", step);
    let src = add_source_spans(
        cfg,
        &ds.source_train,
        &source_batch,
        &mut rng,
        &mut sentences,
        &mut refs,
    )?;

    let mut tgt_side = SideRows::default();
    let mut tgt_keys = Vec::new();
    let mut soft = Vec::new();
    for &i in target_batch {
        let slot = sentences.len();
        sentences.push(ds.target_train.sentences[i].tokens.clone());
        for (span, y) in state.store.sentence(i) {
            tgt_side.push(refs.len(), slot);
            tgt_keys.push((i, *span));
            soft.push(y.clone());
            refs.push(SpanRef {
                sentence: slot,
                span: *span,
            });
        }
    }
    let views: Vec<&[usize]> = sentences.iter().map(Vec::as_slice).collect();

    let params = &state.params;
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let mut dropout = schedule::dropout_rng(cfg.seed, "student", step);
    let pass1 = encode_pass(&mut tape, params, &nodes, &views, &refs, Some(&mut dropout))?;
    let pass2 = if mode.dual_pass() {
        Some(encode_pass(
            &mut tape,
            params,
            &nodes,
            &views,
            &refs,
            Some(&mut dropout),
        )?)
    } else {
        None
    };

    let l_src = loss_src(&mut tape, pass1.probs, &src.side, &src.gold)?;
    let l_tgt = if tgt_side.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        loss_tgt(&mut tape, pass1.probs, &tgt_side, &soft)?
    };

    // Span labels: gold on the source side, current prediction on the target side.
    let probs1 = tape.value(pass1.probs).clone();
    let mut labels = src.gold.clone();
    labels.extend(tgt_side.rows.iter().map(|&r| argmax(probs1.row(r)).0));

    let mut parts = LossNodes {
        src: l_src,
        tgt: l_tgt,
        cont: None,
        reg: None,
    };
    if let Some(p2) = pass2 {
        if mode.uses_cont() {
            let mut origins = vec![Language::Source; src.gold.len()];
            origins.resize(labels.len(), Language::Target);
            let mvs = MultiViewSet::from_views(&mut tape, pass1.zeta, p2.zeta, &labels, &origins)?;
            parts.cont = Some(loss_cont(&mut tape, &mvs, &cfg.contrastive())?);
        }
        if mode.uses_reg() {
            let reg = loss_reg(&mut tape, pass1.probs, p2.probs)?;
            state.reg_clamps += reg.clamped as u64;
            parts.reg = Some(reg.node);
        }
    }
    let total = total_loss(&mut tape, &parts, mode)?;
    let report = LossReport {
        l_src: scalar(&tape, parts.src),
        l_tgt: scalar(&tape, parts.tgt),
        l_cont: parts.cont.map(|n| scalar(&tape, n)),
        l_reg: parts.reg.map(|n| scalar(&tape, n)),
        total: scalar(&tape, total),
    };
    if !report.total.is_finite() {
        return Err(Error::Diverged(format!(
            "epoch {epoch} step {step}: source batch {source_batch:?}, target batch {target_batch:?}, losses {report:?}"
        )));
    }
    let grads = tape.backward(total)?;
    let g = param_grads(&grads, &nodes.all, &state.params);
    let vectors = match cfg.mode.prototypes() {
        Some(ProtoSource::Projected) => Some(normalized_rows(tape.value(pass1.zeta))),
        Some(ProtoSource::NormalizedSpan) => Some(normalized_rows(tape.value(pass1.z))),
        None => None,
    };
    drop(tape);
    let total = (cfg.epochs * schedule::steps_per_epoch(ds.target_train.len(), cfg.batch_size)) as u64;
    adamw_step(
        &mut state.params.tensors_mut(),
        &g,
        &cfg.optimizer(step, total),
        &mut state.optimizer,
    )?;

    if let (Some(vectors), Some(bank), Some(margins)) = (vectors, state.bank.as_mut(), state.margins.as_mut()) {
        bank.update_batch(labels.iter().zip(&vectors).map(|(&c, v)| (c, v.as_slice())))?;
        let refine = warmup_gate(epoch) && bank.is_complete();
        for (k, &row) in tgt_side.rows.iter().enumerate() {
            let v = &vectors[row];
            if refine {
                let (target, rate) = refinement_rate(bank, margins, v, cfg.beta)?;
                let (sentence, span) = tgt_keys[k];
                state.store.refine(sentence, span, target, rate)?;
            }
            let predicted = labels[row];
            if let Some(phi) = bank.get(predicted) {
                margins.record(predicted, phi.iter().zip(v).map(|(a, b)| a * b).sum());
            }
        }
    }
    state.global_step += 1;
    Ok(report)
}

/// Runs student epochs `state.next_epoch..until` (capped at `cfg.epochs`),
/// calling `on_epoch` after each finished epoch.
pub fn train_student_until(
    cfg: &TrainConfig,
    ds: &Dataset,
    state: &mut RunState,
    until: usize,
    on_epoch: &mut dyn FnMut(&RunState, usize) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    check_dataset(ds)?;
    if ds.target_train.is_empty() {
        return Err(Error::EmptyCorpus("target_train"));
    }
    if state.store.num_sentences() != ds.target_train.len() {
        return Err(Error::Config(format!(
            "pseudo-label store covers {} sentences, target corpus has {}",
            state.store.num_sentences(),
            ds.target_train.len()
        )));
    }
    let run_id = cfg.run_id();
    let k = ds.labels.num_classes();
    for epoch in state.next_epoch..until.min(cfg.epochs) {
        let mut steps = Vec::new();
        for batch in schedule::target_batches(cfg.seed, epoch, ds.target_train.len(), cfg.batch_size) {
            let step = state.global_step;
            let report = student_step(cfg, ds, state, epoch, &batch)?;
            steps.push(MetricRecord::step(&run_id, epoch, step, &report, true));
        }
        if let Some(m) = state.margins.as_mut() {
            m.finalize();
        }
        let mut summary = MetricRecord::summary(&run_id, epoch, &steps);
        let dev_f1 = evaluate_corpus(&state.params, &ds.source_dev, Some(cfg.max_span_len))?.micro_f1;
        summary.dev_f1 = Some(dev_f1);
        summary.oracle_f1 = match oracle_pseudo_f1(&state.store, &ds.target_train, k) {
            Ok(f) => Some(f),
            Err(Error::OracleUnavailable) => None,
            Err(e) => return Err(e),
        };
        if ds.target_test.visible_gold().is_some() && !ds.target_test.is_empty() {
            summary.target_f1 = Some(evaluate_corpus(&state.params, &ds.target_test, Some(cfg.max_span_len))?.micro_f1);
        }
        summary.margins = state.margins.as_ref().map(|m| m.margins.clone());
        consider_best(&mut state.best, epoch, dev_f1, &state.params);
        state.history.extend(steps);
        state.history.push(summary);
        state.next_epoch = epoch + 1;
        on_epoch(state, epoch)?;
    }
    Ok(())
}

/// Full student training from `state` to the configured epoch count.
pub fn train_student(cfg: &TrainConfig, ds: &Dataset, state: &mut RunState) -> Result<()> {
    train_student_until(cfg, ds, state, cfg.epochs, &mut |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_dataset, SynthConfig};

    fn dataset(num_source: usize) -> Dataset {
        generate_synthetic_dataset(&SynthConfig {
            num_source,
            num_target: 40,
            num_source_dev: 40,
            num_target_test: 16,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn config(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: 2,
            teacher_epochs: 2,
            lr: 1e-2,
            max_span_len: 4,
            d_tok: 8,
            d_h: 16,
            d_len: 4,
            d_proj_hidden: 16,
            d_proj: 8,
            word_dropout: 0.2,
            ..TrainConfig::default()
        }
    }

    fn student(cfg: &TrainConfig, ds: &Dataset) -> RunState {
        let teacher = train_teacher(cfg, ds).unwrap();
        let store =
            assign_initial_pseudo_labels(&teacher.params, &ds.target_train, cfg.max_span_len, cfg.beta).unwrap();
        RunState::new(cfg, ds, store, Some(&teacher.params)).unwrap()
    }

    #[test]
    fn store_covers_every_enumerated_span() {
        let ds = dataset(48);
        let cfg = config(TrainMode::Vanilla);
        let state = student(&cfg, &ds);
        let expected: usize = ds
            .target_train
            .sentences
            .iter()
            .map(|s| enumerate_spans(s.len(), Some(4)).len())
            .sum();
        assert_eq!(state.store.len(), expected);
        assert_eq!(state.store.num_sentences(), ds.target_train.len());
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let ds = dataset(48);
        let cfg = TrainConfig {
            lr: 0.0,
            ..config(TrainMode::NoProto)
        };
        let mut state = student(&cfg, &ds);
        let before = state.params.clone();
        train_student_until(&cfg, &ds, &mut state, 1, &mut |_, _| Ok(())).unwrap();
        assert_eq!(state.params, before);
        assert!(state.global_step > 0);
    }

    #[test]
    fn labels_stay_fixed_without_prototypes_and_during_warm_up() {
        let ds = dataset(48);
        for (mode, epochs) in [(TrainMode::Vanilla, 2), (TrainMode::Contproto, 1)] {
            let cfg = config(mode);
            let mut state = student(&cfg, &ds);
            let initial = state.store.clone();
            train_student_until(&cfg, &ds, &mut state, epochs, &mut |_, _| Ok(())).unwrap();
            assert_eq!(state.store, initial, "{mode}");
        }
    }

    #[test]
    fn refinement_starts_after_warm_up() {
        let ds = dataset(48);
        let cfg = config(TrainMode::Contproto);
        let mut state = student(&cfg, &ds);
        let initial = state.store.clone();
        train_student(&cfg, &ds, &mut state).unwrap();
        assert_ne!(state.store, initial);
        assert!(state.bank.as_ref().unwrap().is_complete());
    }

    #[test]
    fn fixed_margin_mode_keeps_its_margins() {
        let ds = dataset(48);
        let cfg = TrainConfig {
            fixed_margin: 0.3,
            ..config(TrainMode::FixedMargin)
        };
        let mut state = student(&cfg, &ds);
        let before = state.margins.clone().unwrap();
        train_student(&cfg, &ds, &mut state).unwrap();
        assert_eq!(state.margins.unwrap().margins, before.margins);
    }

    #[test]
    fn resuming_from_a_saved_state_is_bit_exact() {
        let ds = dataset(48);
        let cfg = config(TrainMode::Contproto);
        let mut direct = student(&cfg, &ds);
        let mut resumed = direct.clone();
        train_student(&cfg, &ds, &mut direct).unwrap();

        train_student_until(&cfg, &ds, &mut resumed, 1, &mut |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        resumed.save(&path).unwrap();
        let mut resumed = RunState::load(&path).unwrap();
        train_student(&cfg, &ds, &mut resumed).unwrap();
        assert_eq!(resumed, direct);
    }

    #[test]
    fn pipeline_resume_matches_uninterrupted_run() {
        let ds = dataset(48);
        let cfg = config(TrainMode::Contproto);
        let full = tempfile::tempdir().unwrap();
        let report = run_pipeline(&cfg, &ds, full.path(), false, None).unwrap();

        // Rebuild the state a run interrupted after epoch 0 would have saved.
        let part = tempfile::tempdir().unwrap();
        for f in [
            "config.toml",
            "teacher.json",
            "teacher_history.json",
            "pseudo_labels_initial.jsonl",
        ] {
            std::fs::copy(full.path().join(f), part.path().join(f)).unwrap();
        }
        let teacher = load_teacher(part.path()).unwrap();
        let store = PseudoLabelStore::load(
            &part.path().join("pseudo_labels_initial.jsonl"),
            cfg.beta,
            ds.target_train.len(),
        )
        .unwrap();
        let mut state = RunState::new(&cfg, &ds, store, Some(&teacher.params)).unwrap();
        train_student_until(&cfg, &ds, &mut state, 1, &mut |_, _| Ok(())).unwrap();
        state.save(&part.path().join("run_state.json")).unwrap();

        let other = TrainConfig { seed: 1, ..cfg.clone() };
        assert!(run_pipeline(&other, &ds, part.path(), true, None).is_err());
        let resumed = run_pipeline(&cfg, &ds, part.path(), true, None).unwrap();
        assert_eq!(resumed, report);
        for f in [
            "metrics.jsonl",
            "student_final.json",
            "student_best.json",
            "pseudo_labels_epoch1.jsonl",
        ] {
            assert_eq!(
                std::fs::read(full.path().join(f)).unwrap(),
                std::fs::read(part.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn teacher_fits_synthetic_source_language() {
        let ds = dataset(200);
        let cfg = TrainConfig {
            teacher_epochs: 10,
            d_tok: 16,
            d_h: 32,
            d_len: 8,
            ..config(TrainMode::Contproto)
        };
        let teacher = train_teacher(&cfg, &ds).unwrap();
        assert!(teacher.best_dev_f1 > 0.9, "dev F1 {}", teacher.best_dev_f1);
    }
}
