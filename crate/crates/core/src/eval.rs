//! Exact-match span scoring, pseudo-label oracle scoring, and span
//! embedding export.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{enumerate_spans, validate_gold, Corpus, GoldSpan, LabelSet, Language, Sentence, Span, OUTSIDE};
use crate::encoder::{argmax, decode_spans, infer, EncoderParams, SpanRef, ThresholdPolicy};
use crate::error::{Error, Result};
use crate::math::Tensor;
use crate::prototypes::{refinement_rate, MarginTable, PrototypeBank, PseudoLabelStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold spans of the class.
    pub support: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Indexed by class; the `O` slot stays zero.
    pub per_class: Vec<ClassScores>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub micro_f1: f64,
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    if tp == 0 {
        return (0.0, 0.0, 0.0);
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    (p, r, 2.0 * p * r / (p + r))
}

/// Exact `(j, k, class)` matching per sentence, pooled over classes.
pub fn span_micro_f1(predictions: &[Vec<GoldSpan>], gold: &[Vec<GoldSpan>], num_classes: usize) -> Result<EvalReport> {
    if predictions.len() != gold.len() {
        return Err(Error::Config(format!(
            "{} predicted sentences vs {} gold sentences",
            predictions.len(),
            gold.len()
        )));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (i, (pred, g)) in predictions.iter().zip(gold).enumerate() {
        let mut checked = g.clone();
        let n = checked.iter().map(|s| s.span.end + 1).max().unwrap_or(0);
        validate_gold(n, &mut checked, num_classes).map_err(|e| Error::Span(format!("gold of sentence {i}: {e}")))?;
        for p in pred {
            if p.class == OUTSIDE || p.class >= num_classes {
                return Err(Error::Label(format!("prediction class {} in sentence {i}", p.class)));
            }
            if checked.contains(p) {
                tp[p.class] += 1;
            } else {
                fp[p.class] += 1;
            }
        }
        for s in &checked {
            if !pred.contains(s) {
                fn_[s.class] += 1;
            }
        }
    }
    let per_class = (0..num_classes)
        .map(|c| {
            let (precision, recall, f1) = prf(tp[c], fp[c], fn_[c]);
            ClassScores {
                precision,
                recall,
                f1,
                support: tp[c] + fn_[c],
            }
        })
        .collect();
    let (t, f, m) = (tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let (precision, recall, micro_f1) = prf(t, f, m);
    Ok(EvalReport {
        per_class,
        tp: t,
        fp: f,
        fn_: m,
        precision,
        recall,
        micro_f1,
    })
}

/// Decodes every sentence of a store with the prediction-time overlap rule.
pub fn decode_store<S: Scalar>(store: &PseudoLabelStore<S>) -> Result<Vec<Vec<GoldSpan>>> {
    (0..store.num_sentences())
        .map(|i| {
            let entries = store.sentence(i);
            if entries.is_empty() {
                return Ok(Vec::new());
            }
            let spans: Vec<Span> = entries.iter().map(|(s, _)| *s).collect();
            let rows: Vec<Vec<S>> = entries.iter().map(|(_, y)| y.clone()).collect();
            Ok(decode_spans(
                &spans,
                &Tensor::from_rows(&rows)?,
                ThresholdPolicy::Argmax,
            ))
        })
        .collect()
}

/// F1 of the decoded store against the corpus's hidden gold.
pub fn oracle_pseudo_f1<S: Scalar>(store: &PseudoLabelStore<S>, corpus: &Corpus, num_classes: usize) -> Result<f64> {
    let gold = corpus.oracle_gold().ok_or(Error::OracleUnavailable)?;
    Ok(span_micro_f1(&decode_store(store)?, gold, num_classes)?.micro_f1)
}

/// Scores `params` on a corpus carrying visible gold.
pub fn evaluate_corpus<S: Scalar>(
    params: &EncoderParams<S>,
    corpus: &Corpus,
    max_len: Option<usize>,
) -> Result<EvalReport> {
    let gold: Vec<Vec<GoldSpan>> = corpus
        .visible_gold()
        .ok_or_else(|| Error::Config("evaluation corpus has no visible gold".into()))?
        .into_iter()
        .map(<[GoldSpan]>::to_vec)
        .collect();
    let sents: Vec<&[usize]> = corpus.sentences.iter().map(|s| s.tokens.as_slice()).collect();
    let pred = crate::encoder::predict_batch(params, &sents, max_len, ThresholdPolicy::Argmax)?;
    span_micro_f1(&pred, &gold, params.config.num_classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    /// Span representation before projection.
    Z,
    /// Unit-norm projection.
    Zeta,
}

#[derive(Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
    /// Gold label where visible, otherwise the model's argmax.
    pub label: String,
    pub language: Language,
    pub vector: Vec<f64>,
}

fn sentence_embeddings<S: Scalar>(
    params: &EncoderParams<S>,
    id: usize,
    s: &Sentence,
    cap: usize,
    which: EmbeddingKind,
    labels: &LabelSet,
) -> Result<Vec<EmbeddingRecord>> {
    let spans = enumerate_spans(s.len(), Some(cap));
    let refs: Vec<SpanRef> = spans.iter().map(|&span| SpanRef { sentence: 0, span }).collect();
    let out = infer(params, &[&s.tokens], &refs)?;
    let gold = s.gold_spans.as_ref().map(|g| Sentence::span_classes(g, &spans));
    let vectors = match which {
        EmbeddingKind::Z => &out.z,
        EmbeddingKind::Zeta => &out.zeta,
    };
    Ok(spans
        .iter()
        .enumerate()
        .map(|(i, span)| {
            let class = gold.as_ref().map_or_else(|| argmax(out.probs.row(i)).0, |g| g[i]);
            EmbeddingRecord {
                sentence: id,
                start: span.start,
                end: span.end,
                label: labels.name(class).to_string(),
                language: s.language,
                vector: vectors.row(i).iter().map(|v| v.to_f64_lossy()).collect(),
            }
        })
        .collect())
}

/// One JSON line per enumerated span of `corpus`; returns the record count.
pub fn export_embeddings<S: Scalar>(
    params: &EncoderParams<S>,
    corpus: &Corpus,
    labels: &LabelSet,
    which: EmbeddingKind,
    max_len: Option<usize>,
    out: &Path,
) -> Result<usize> {
    let cap = max_len.map_or(params.config.max_span_len, |m| m.min(params.config.max_span_len));
    let file = std::fs::File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut count = 0;
    for (id, s) in corpus.sentences.iter().enumerate() {
        for rec in sentence_embeddings(params, id, s, cap, which, labels)? {
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(out, e))?;
            count += 1;
        }
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(count)
}

/// Reads records written by [`export_embeddings`].
pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    /// Target spans whose label was refined.
    pub refined: usize,
    /// Refined spans whose argmax class changed.
    pub argmax_changed: usize,
    /// Final per-class margins; `None` where a class never got one.
    pub margins: Vec<Option<f64>>,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Offline refinement from exported embeddings: prototypes are built over
/// every record in file order with moving-average rate `alpha`, margins
/// from each class's mean similarity to its prototype, then every
/// target-language record found in `store` is refined once.
pub fn refine_from_embeddings(
    records: &[EmbeddingRecord],
    labels: &LabelSet,
    store: &mut PseudoLabelStore<f64>,
    alpha: f64,
) -> Result<RefineSummary> {
    let k = labels.num_classes();
    let dim = records
        .first()
        .map(|r| r.vector.len())
        .ok_or_else(|| Error::Config("no embedding records".into()))?;
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let class = labels.index(&r.label).ok_or_else(|| Error::Label(r.label.clone()))?;
        if r.vector.len() != dim {
            return Err(Error::Shape {
                op: "refine_from_embeddings",
                detail: format!("embedding of length {} where {dim} expected", r.vector.len()),
            });
        }
        rows.push((class, unit(&r.vector)));
    }
    let mut bank = PrototypeBank::<f64>::new(k, dim, alpha)?;
    bank.update_batch(rows.iter().map(|(c, v)| (*c, v.as_slice())))?;
    let mut margins = MarginTable::new(k);
    for (c, v) in &rows {
        if *c != OUTSIDE {
            let p = bank.get(*c).expect("class was updated");
            margins.record(*c, p.iter().zip(v).map(|(a, b)| a * b).sum());
        }
    }
    margins.finalize();
    let mut summary = RefineSummary {
        margins: (0..k).map(|c| margins.margin(c)).collect(),
        ..RefineSummary::default()
    };
    for (r, (_, v)) in records.iter().zip(&rows) {
        let span = Span::new(r.start, r.end);
        if r.language != Language::Target || store.get(r.sentence, span).is_err() {
            continue;
        }
        let before = argmax(store.get(r.sentence, span)?).0;
        let (target, rate) = refinement_rate(&bank, &margins, v, store.beta)?;
        let after = argmax(store.refine(r.sentence, span, target, rate)?).0;
        summary.refined += 1;
        summary.argmax_changed += usize::from(before != after);
    }
    Ok(summary)
}
