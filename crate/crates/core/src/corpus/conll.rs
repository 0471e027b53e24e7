//! CoNLL column files: first column token, last column BIO tag, blank line
//! between sentences. `-DOCSTART-` lines are skipped.
//!
//! An `I-X` that does not continue an open `X` entity (after `O`, at the
//! start of a sentence, or after a different type) opens a new entity, as
//! if it were `B-X` (IOB1-style input repaired to IOB2).

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{validate_gold, GoldSpan, LabelSet, Language, Sentence, OUTSIDE};
use crate::error::{Error, Result};

/// Token string ↔ id table shared across all files of a dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, token: &str) -> usize {
        if self.index.is_empty() && !self.tokens.is_empty() {
            self.rebuild();
        }
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    fn rebuild(&mut self) {
        self.index = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// [`word_shape`] of every token, indexed by id.
    pub fn shapes(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| word_shape(t)).collect()
    }
}

/// Coarse orthographic class: 0 lowercase, 1 capitalized, 2 all caps,
/// 3 contains a digit, 4 anything else.
pub fn word_shape(token: &str) -> usize {
    let mut chars = token.chars();
    let Some(first) = chars.next() else { return 4 };
    if token.chars().any(|c| c.is_numeric()) {
        3
    } else if !token.chars().any(char::is_alphabetic) {
        4
    } else if first.is_uppercase()
        && token.chars().filter(|c| c.is_alphabetic()).all(char::is_uppercase)
        && token.chars().count() > 1
    {
        2
    } else if first.is_uppercase() {
        1
    } else {
        0
    }
}

enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

fn parse_tag(tag: &str) -> Option<Tag<'_>> {
    if tag == "O" {
        return Some(Tag::Outside);
    }
    let (prefix, ty) = tag.split_once('-')?;
    if ty.is_empty() {
        return None;
    }
    match prefix {
        "B" => Some(Tag::Begin(ty)),
        "I" => Some(Tag::Inside(ty)),
        _ => None,
    }
}

/// Parses CoNLL text from `input`; `origin` names the source in errors.
pub fn parse_conll(
    input: impl BufRead,
    origin: &str,
    vocab: &mut Vocabulary,
    labels: &mut LabelSet,
    language: Language,
) -> Result<Vec<Sentence>> {
    let mut sentences = Vec::new();
    let mut tokens: Vec<usize> = Vec::new();
    let mut spans: Vec<GoldSpan> = Vec::new();
    // (start, class) of the entity currently open.
    let mut open: Option<(usize, usize)> = None;

    let flush = |tokens: &mut Vec<usize>,
                 spans: &mut Vec<GoldSpan>,
                 open: &mut Option<(usize, usize)>,
                 sentences: &mut Vec<Sentence>,
                 labels: &LabelSet|
     -> Result<()> {
        if let Some((start, class)) = open.take() {
            spans.push(GoldSpan::new(start, tokens.len() - 1, class));
        }
        if !tokens.is_empty() {
            let mut gold = std::mem::take(spans);
            validate_gold(tokens.len(), &mut gold, labels.num_classes())?;
            sentences.push(Sentence {
                tokens: std::mem::take(tokens),
                language,
                gold_spans: Some(gold),
            });
        }
        Ok(())
    };

    for (i, line) in input.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            flush(&mut tokens, &mut spans, &mut open, &mut sentences, labels)?;
            continue;
        }
        if cols[0] == "-DOCSTART-" {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: lineno,
            msg,
        };
        if cols.len() < 2 {
            return Err(parse_err(format!(
                "expected token and tag columns, got {:?}",
                line.trim()
            )));
        }
        let tag_text = cols[cols.len() - 1];
        let tag = parse_tag(tag_text).ok_or_else(|| parse_err(format!("tag {tag_text:?} is not O, B-X or I-X")))?;
        let pos = tokens.len();
        tokens.push(vocab.intern(cols[0]));
        match tag {
            Tag::Outside => {
                if let Some((start, class)) = open.take() {
                    spans.push(GoldSpan::new(start, pos - 1, class));
                }
            }
            Tag::Begin(ty) | Tag::Inside(ty) => {
                let class = labels.intern(ty).map_err(|e| parse_err(e.to_string()))?;
                debug_assert_ne!(class, OUTSIDE);
                let continues = matches!(tag, Tag::Inside(_)) && matches!(open, Some((_, c)) if c == class);
                if !continues {
                    if let Some((start, prev)) = open.take() {
                        spans.push(GoldSpan::new(start, pos - 1, prev));
                    }
                    open = Some((pos, class));
                }
            }
        }
    }
    flush(&mut tokens, &mut spans, &mut open, &mut sentences, labels)?;
    Ok(sentences)
}

pub fn read_conll(
    path: &Path,
    vocab: &mut Vocabulary,
    labels: &mut LabelSet,
    language: Language,
) -> Result<Vec<Sentence>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_conll(
        std::io::BufReader::new(file),
        &path.display().to_string(),
        vocab,
        labels,
        language,
    )
}

/// IOB2 tags for a sentence of length `n` with the given entity spans.
pub fn spans_to_bio(n: usize, spans: &[GoldSpan], labels: &LabelSet) -> Vec<String> {
    let mut tags = vec!["O".to_string(); n];
    for g in spans {
        let name = labels.name(g.class);
        tags[g.span.start] = format!("B-{name}");
        for t in &mut tags[g.span.start + 1..=g.span.end] {
            *t = format!("I-{name}");
        }
    }
    tags
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<(Vec<Sentence>, LabelSet)> {
        let mut vocab = Vocabulary::new();
        let mut labels = LabelSet::new(Vec::<String>::new()).unwrap();
        let s = parse_conll(text.as_bytes(), "test", &mut vocab, &mut labels, Language::Source)?;
        Ok((s, labels))
    }

    fn spans(s: &Sentence, l: &LabelSet) -> Vec<(usize, usize, String)> {
        s.gold_spans
            .as_ref()
            .unwrap()
            .iter()
            .map(|g| (g.span.start, g.span.end, l.name(g.class).to_string()))
            .collect()
    }

    #[test]
    fn shapes() {
        let got: Vec<usize> = ["the", "Paris", "NATO", "1990", ",", "", "A", "x2"]
            .iter()
            .map(|t| word_shape(t))
            .collect();
        assert_eq!(got, vec![0, 1, 2, 3, 4, 4, 1, 3]);
    }

    #[test]
    fn bio_entity() {
        let (s, l) = parse("John NNP B-PER\nSmith NNP I-PER\nran VBD O\n").unwrap();
        assert_eq!(spans(&s[0], &l), vec![(0, 1, "PER".to_string())]);
    }

    #[test]
    fn all_outside() {
        let (s, _) = parse("a O\nb O\n\n").unwrap();
        assert_eq!(s.len(), 1);
        assert!(s[0].gold_spans.as_ref().unwrap().is_empty());
    }

    #[test]
    fn dangling_inside_opens_entity() {
        let (s, l) = parse("Paris I-LOC\nis O\n").unwrap();
        assert_eq!(spans(&s[0], &l), vec![(0, 0, "LOC".to_string())]);
        // I- of a different type after an open entity also starts a new one.
        let (s, l) = parse("a B-PER\nb I-LOC\nc I-LOC\n").unwrap();
        assert_eq!(
            spans(&s[0], &l),
            vec![(0, 0, "PER".to_string()), (1, 2, "LOC".to_string())]
        );
    }

    #[test]
    fn sentences_split_on_blank_lines_and_docstart_skipped() {
        let text = "-DOCSTART- -X- O\n\nA B-ORG\n\nB O\nC B-PER\n";
        let (s, l) = parse(text).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(spans(&s[1], &l), vec![(1, 1, "PER".to_string())]);
    }

    #[test]
    fn bad_tag_reports_line() {
        let err = parse("a O\nb X-PER\n").unwrap_err().to_string();
        assert!(err.contains("test:2"), "{err}");
        let err = parse("a O\n\nlonely\n").unwrap_err().to_string();
        assert!(err.contains("test:3"), "{err}");
    }

    #[test]
    fn unreadable_file_is_an_error() {
        let mut vocab = Vocabulary::new();
        let mut labels = LabelSet::new(Vec::<String>::new()).unwrap();
        let err = read_conll(
            Path::new("/definitely/not/here.conll"),
            &mut vocab,
            &mut labels,
            Language::Source,
        );
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    fn well_formed_tags() -> impl Strategy<Value = Vec<String>> {
        // Runs of (type, length) separated by O tokens: always valid IOB2.
        prop::collection::vec((0usize..4, 1usize..4, 0usize..3), 1..6).prop_map(|chunks| {
            let names = ["PER", "LOC", "ORG"];
            let mut tags = Vec::new();
            for (ty, len, gap) in chunks {
                tags.extend(std::iter::repeat_n("O".to_string(), gap));
                if ty < 3 {
                    tags.push(format!("B-{}", names[ty]));
                    tags.extend(std::iter::repeat_n(format!("I-{}", names[ty]), len - 1));
                } else {
                    tags.push("O".into());
                }
            }
            tags
        })
    }

    proptest! {
        #[test]
        fn iob2_round_trip(tags in well_formed_tags()) {
            let text: String = tags.iter().enumerate().map(|(i, t)| format!("w{i} {t}\n")).collect();
            let (s, l) = parse(&text).unwrap();
            prop_assert_eq!(s.len(), 1);
            let back = spans_to_bio(s[0].len(), s[0].gold_spans.as_ref().unwrap(), &l);
            prop_assert_eq!(back, tags);
        }
    }
}
