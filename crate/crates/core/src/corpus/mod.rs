//! Sentences, label sets, span enumeration and corpus files.

mod conll;
mod dataset;
mod synth;

pub use conll::{parse_conll, read_conll, spans_to_bio, word_shape, Vocabulary};
pub use dataset::Dataset;
pub use synth::{generate_synthetic_dataset, generate_synthetic_pair, CueSwap, SynthConfig, SyntheticPair, TokenShift};

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Rng;

/// Index of the non-entity class in every [`LabelSet`].
pub const OUTSIDE: usize = 0;

/// Entity types plus the `"O"` class, which always sits at index 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    entity_types: Vec<String>,
}

impl LabelSet {
    pub fn new<I, T>(entity_types: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let mut set = Self {
            entity_types: Vec::new(),
        };
        for name in entity_types {
            let name = name.into();
            if set.index(&name).is_some() {
                return Err(Error::Label(format!("duplicate label {name:?}")));
            }
            set.push(name)?;
        }
        Ok(set)
    }

    fn push(&mut self, name: String) -> Result<usize> {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Label(format!("bad entity type name {name:?}")));
        }
        self.entity_types.push(name);
        Ok(self.entity_types.len())
    }

    /// Index of `name`, adding it as a new entity type if unseen.
    pub fn intern(&mut self, name: &str) -> Result<usize> {
        match self.index(name) {
            Some(i) => Ok(i),
            None => self.push(name.to_string()),
        }
    }

    /// `|C|`: entity types plus `O`.
    pub fn num_classes(&self) -> usize {
        self.entity_types.len() + 1
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn name(&self, class: usize) -> &str {
        if class == OUTSIDE {
            "O"
        } else {
            &self.entity_types[class - 1]
        }
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        if name == "O" {
            return Some(OUTSIDE);
        }
        self.entity_types.iter().position(|t| t == name).map(|i| i + 1)
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        LabelSet::new(v)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(l: LabelSet) -> Self {
        l.entity_types
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Source,
    Target,
}

/// Inclusive token range `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// An annotated entity; `class` is never [`OUTSIDE`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GoldSpan {
    pub span: Span,
    pub class: usize,
}

impl GoldSpan {
    pub fn new(start: usize, end: usize, class: usize) -> Self {
        Self {
            span: Span::new(start, end),
            class,
        }
    }
}

/// Checks bounds, ordering, non-overlap and the no-`O` rule, and sorts.
pub fn validate_gold(n: usize, spans: &mut [GoldSpan], num_classes: usize) -> Result<()> {
    spans.sort();
    for g in spans.iter() {
        if g.span.start > g.span.end || g.span.end >= n {
            return Err(Error::Span(format!("{:?} outside sentence of length {n}", g.span)));
        }
        if g.class == OUTSIDE || g.class >= num_classes {
            return Err(Error::Span(format!("gold class {} is not an entity class", g.class)));
        }
    }
    for w in spans.windows(2) {
        if w[0].span.overlaps(&w[1].span) {
            return Err(Error::Span(format!(
                "overlapping gold spans {:?} and {:?}",
                w[0].span, w[1].span
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<usize>,
    pub language: Language,
    /// Visible annotations; `None` for unlabeled data.
    pub gold_spans: Option<Vec<GoldSpan>>,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Gold class of every span in `spans` (absent spans are `O`).
    pub fn span_classes(gold: &[GoldSpan], spans: &[Span]) -> Vec<usize> {
        let lookup: HashMap<Span, usize> = gold.iter().map(|g| (g.span, g.class)).collect();
        spans
            .iter()
            .map(|s| lookup.get(s).copied().unwrap_or(OUTSIDE))
            .collect()
    }
}

/// Sentences plus an optional side channel of withheld gold annotations
/// (for unlabeled target data, used only by oracle scoring).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    hidden_gold: Option<Vec<Vec<GoldSpan>>>,
}

#[derive(Serialize, Deserialize)]
struct SpanRecord {
    start: usize,
    end: usize,
    label: String,
}

#[derive(Serialize, Deserialize)]
struct SentenceRecord {
    id: usize,
    tokens: Vec<usize>,
    language: Language,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_spans: Option<Vec<SpanRecord>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hidden_gold_spans: Option<Vec<SpanRecord>>,
}

fn to_records(spans: &[GoldSpan], labels: &LabelSet) -> Vec<SpanRecord> {
    spans
        .iter()
        .map(|g| SpanRecord {
            start: g.span.start,
            end: g.span.end,
            label: labels.name(g.class).to_string(),
        })
        .collect()
}

fn from_records(records: Vec<SpanRecord>, n: usize, labels: &LabelSet) -> Result<Vec<GoldSpan>> {
    let mut spans = records
        .into_iter()
        .map(|r| {
            let class = labels
                .index(&r.label)
                .ok_or_else(|| Error::Label(format!("unknown label {:?}", r.label)))?;
            Ok(GoldSpan::new(r.start, r.end, class))
        })
        .collect::<Result<Vec<_>>>()?;
    validate_gold(n, &mut spans, labels.num_classes())?;
    Ok(spans)
}

impl Corpus {
    pub fn new(sentences: Vec<Sentence>) -> Self {
        Self {
            sentences,
            hidden_gold: None,
        }
    }

    /// Unlabeled corpus whose annotations are kept only for oracle scoring.
    pub fn with_hidden_gold(sentences: Vec<Sentence>, hidden: Vec<Vec<GoldSpan>>) -> Result<Self> {
        if sentences.len() != hidden.len() {
            return Err(Error::Config(format!(
                "{} sentences but {} hidden annotation lists",
                sentences.len(),
                hidden.len()
            )));
        }
        Ok(Self {
            sentences,
            hidden_gold: Some(hidden),
        })
    }

    /// Strips visible annotations into the hidden side channel.
    pub fn hide_gold(mut self) -> Self {
        let hidden = self
            .sentences
            .iter_mut()
            .map(|s| s.gold_spans.take().unwrap_or_default())
            .collect();
        self.hidden_gold = Some(hidden);
        self
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn oracle_gold(&self) -> Option<&[Vec<GoldSpan>]> {
        self.hidden_gold.as_deref()
    }

    /// Visible gold if every sentence carries it.
    pub fn visible_gold(&self) -> Option<Vec<&[GoldSpan]>> {
        self.sentences.iter().map(|s| s.gold_spans.as_deref()).collect()
    }

    pub fn write_jsonl(&self, mut out: impl Write, labels: &LabelSet) -> Result<()> {
        for (id, s) in self.sentences.iter().enumerate() {
            let rec = SentenceRecord {
                id,
                tokens: s.tokens.clone(),
                language: s.language,
                gold_spans: s.gold_spans.as_deref().map(|g| to_records(g, labels)),
                hidden_gold_spans: self.hidden_gold.as_ref().map(|h| to_records(&h[id], labels)),
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n").map_err(|e| Error::io("<corpus>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead, labels: &LabelSet) -> Result<Self> {
        let mut sentences = Vec::new();
        let mut hidden = Vec::new();
        let mut any_hidden = false;
        for (lineno, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<corpus>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SentenceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: "<corpus>".into(),
                line: lineno + 1,
                msg: e.to_string(),
            })?;
            let n = rec.tokens.len();
            if n == 0 {
                return Err(Error::Parse {
                    path: "<corpus>".into(),
                    line: lineno + 1,
                    msg: "empty sentence".into(),
                });
            }
            let gold = rec.gold_spans.map(|g| from_records(g, n, labels)).transpose()?;
            if let Some(h) = rec.hidden_gold_spans {
                any_hidden = true;
                hidden.push(from_records(h, n, labels)?);
            } else {
                hidden.push(Vec::new());
            }
            sentences.push(Sentence {
                tokens: rec.tokens,
                language: rec.language,
                gold_spans: gold,
            });
        }
        Ok(Self {
            sentences,
            hidden_gold: any_hidden.then_some(hidden),
        })
    }

    pub fn save(&self, path: &Path, labels: &LabelSet) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w, labels)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, labels: &LabelSet) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(std::io::BufReader::new(file), labels).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                msg,
            },
            other => other,
        })
    }
}

/// All spans `(j, k)` with `j ≤ k < n` and `k − j + 1 ≤ max_len`, in
/// lexicographic order. `max_len = None` means no cap.
pub fn enumerate_spans(n: usize, max_len: Option<usize>) -> Vec<Span> {
    let cap = max_len.unwrap_or(usize::MAX).max(1);
    let mut out = Vec::new();
    for start in 0..n {
        let last = n.min(start.saturating_add(cap));
        for end in start..last {
            out.push(Span::new(start, end));
        }
    }
    out
}

/// Which non-entity spans enter the training losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    /// Every enumerated non-entity span.
    All,
    /// At most this many negatives per gold span, drawn without replacement.
    PerPositive(usize),
}

/// Labeled spans for one sentence: every gold span within the length cap,
/// plus negatives per `policy`, returned in enumeration order.
pub fn sample_training_spans(
    n: usize,
    gold: &[GoldSpan],
    policy: NegativeSampling,
    max_len: Option<usize>,
    rng: &mut Rng,
) -> Vec<(Span, usize)> {
    let spans = enumerate_spans(n, max_len);
    let classes = Sentence::span_classes(gold, &spans);
    let labeled: Vec<(Span, usize)> = spans.into_iter().zip(classes).collect();
    match policy {
        NegativeSampling::All => labeled,
        NegativeSampling::PerPositive(ratio) => {
            let positives = labeled.iter().filter(|(_, c)| *c != OUTSIDE).count();
            let mut negatives: Vec<usize> = (0..labeled.len()).filter(|&i| labeled[i].1 == OUTSIDE).collect();
            rng.shuffle(&mut negatives);
            negatives.truncate(ratio * positives);
            let mut keep = vec![false; labeled.len()];
            for i in negatives {
                keep[i] = true;
            }
            labeled
                .into_iter()
                .enumerate()
                .filter(|(i, (_, c))| *c != OUTSIDE || keep[*i])
                .map(|(_, x)| x)
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rng;
    use proptest::prelude::*;

    #[test]
    fn enumerate_three_tokens_uncapped() {
        let spans: Vec<(usize, usize)> = enumerate_spans(3, None).iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(spans, vec![(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]);
    }

    #[test]
    fn enumerate_capped_and_single() {
        assert_eq!(enumerate_spans(4, Some(2)).len(), 7);
        assert_eq!(enumerate_spans(1, Some(5)), vec![Span::new(0, 0)]);
    }

    proptest! {
        #[test]
        fn enumeration_count_formula(n in 1usize..40, cap in 1usize..12) {
            let expected: usize = (1..=cap.min(n)).map(|l| n - l + 1).sum();
            let spans = enumerate_spans(n, Some(cap));
            prop_assert_eq!(spans.len(), expected);
            prop_assert!(spans.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn label_set_rules() {
        let l = LabelSet::new(["PER", "LOC"]).unwrap();
        assert_eq!(l.num_classes(), 3);
        assert_eq!(l.index("O"), Some(OUTSIDE));
        assert_eq!(l.name(2), "LOC");
        assert!(LabelSet::new(["PER", "PER"]).is_err());
        assert!(LabelSet::new(["O"]).is_err());
    }

    #[test]
    fn sampling_all_keeps_everything() {
        let gold = [GoldSpan::new(1, 1, 1)];
        let out = sample_training_spans(3, &gold, NegativeSampling::All, None, &mut Rng::new(0));
        assert_eq!(out.len(), 6);
        assert_eq!(out.iter().filter(|(_, c)| *c == 1).count(), 1);
    }

    #[test]
    fn sampling_ratio_arithmetic_and_clamping() {
        let gold = [GoldSpan::new(0, 0, 1), GoldSpan::new(3, 4, 2)];
        let out = sample_training_spans(6, &gold, NegativeSampling::PerPositive(2), None, &mut Rng::new(1));
        assert_eq!(out.len(), 6);
        assert_eq!(out.iter().filter(|(_, c)| *c == OUTSIDE).count(), 4);

        let gold = [GoldSpan::new(0, 0, 1)];
        let out = sample_training_spans(1, &gold, NegativeSampling::PerPositive(2), None, &mut Rng::new(1));
        assert_eq!(out, vec![(Span::new(0, 0), 1)]);
    }

    #[test]
    fn gold_validation() {
        let mut ok = vec![GoldSpan::new(2, 3, 1), GoldSpan::new(0, 0, 2)];
        validate_gold(4, &mut ok, 3).unwrap();
        assert_eq!(ok[0].span.start, 0);
        assert!(validate_gold(4, &mut [GoldSpan::new(0, 1, 1), GoldSpan::new(1, 2, 1)], 3).is_err());
        assert!(validate_gold(4, &mut [GoldSpan::new(0, 4, 1)], 3).is_err());
        assert!(validate_gold(4, &mut [GoldSpan::new(0, 0, OUTSIDE)], 3).is_err());
    }

    #[test]
    fn jsonl_keeps_hidden_channel_separate() {
        let labels = LabelSet::new(["PER"]).unwrap();
        let s = Sentence {
            tokens: vec![4, 5, 6],
            language: Language::Target,
            gold_spans: Some(vec![GoldSpan::new(1, 2, 1)]),
        };
        let corpus = Corpus::new(vec![s]).hide_gold();
        let mut buf = Vec::new();
        corpus.write_jsonl(&mut buf, &labels).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("hidden_gold_spans") && !text.contains("\"gold_spans\""));
        let back = Corpus::read_jsonl(buf.as_slice(), &labels).unwrap();
        assert_eq!(back, corpus);
        assert!(back.sentences[0].gold_spans.is_none());
    }
}
