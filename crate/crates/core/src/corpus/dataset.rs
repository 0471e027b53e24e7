//! The four corpora of a cross-lingual transfer experiment, stored as a
//! directory: `meta.json` plus one JSONL file per split.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_conll, Corpus, LabelSet, Language, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub labels: LabelSet,
    /// Token ids in every split are below this.
    pub vocab_size: usize,
    /// Present when tokens came from text files.
    pub vocabulary: Option<Vocabulary>,
    /// Word-shape class per token id; empty when unknown.
    pub token_shapes: Vec<usize>,
    pub source_train: Corpus,
    pub source_dev: Corpus,
    /// Unlabeled; gold, if known, is only in the hidden channel.
    pub target_train: Corpus,
    pub target_test: Corpus,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    labels: LabelSet,
    vocab_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocabulary: Option<Vocabulary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    token_shapes: Vec<usize>,
}

const SPLITS: [&str; 4] = ["source_train", "source_dev", "target_train", "target_test"];

impl Dataset {
    fn splits(&self) -> [&Corpus; 4] {
        [
            &self.source_train,
            &self.source_dev,
            &self.target_train,
            &self.target_test,
        ]
    }

    /// Checks token ranges, languages, and that the labeled splits carry gold
    /// while target training data does not.
    pub fn validate(&self) -> Result<()> {
        let langs = [Language::Source, Language::Source, Language::Target, Language::Target];
        for ((name, corpus), lang) in SPLITS.iter().zip(self.splits()).zip(langs) {
            if corpus.is_empty() {
                return Err(Error::EmptyCorpus(name));
            }
            for (i, s) in corpus.sentences.iter().enumerate() {
                if s.is_empty() {
                    return Err(Error::Config(format!("{name}: sentence {i} is empty")));
                }
                if s.language != lang {
                    return Err(Error::Config(format!(
                        "{name}: sentence {i} has language {:?}",
                        s.language
                    )));
                }
                if let Some(&t) = s.tokens.iter().find(|&&t| t >= self.vocab_size) {
                    return Err(Error::Config(format!(
                        "{name}: sentence {i} has token {t} >= vocab size {}",
                        self.vocab_size
                    )));
                }
            }
        }
        for (name, corpus) in [
            ("source_train", &self.source_train),
            ("source_dev", &self.source_dev),
            ("target_test", &self.target_test),
        ] {
            if corpus.visible_gold().is_none() {
                return Err(Error::Config(format!("{name} must carry gold annotations")));
            }
        }
        if !self.token_shapes.is_empty() && self.token_shapes.len() != self.vocab_size {
            return Err(Error::Config(format!(
                "token_shapes has {} entries for a vocabulary of {}",
                self.token_shapes.len(),
                self.vocab_size
            )));
        }
        if self.target_train.sentences.iter().any(|s| s.gold_spans.is_some()) {
            return Err(Error::Config("target_train must not expose gold annotations".into()));
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = Meta {
            labels: self.labels.clone(),
            vocab_size: self.vocab_size,
            vocabulary: self.vocabulary.clone(),
            token_shapes: self.token_shapes.clone(),
        };
        let meta_path = dir.join("meta.json");
        std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
        for (name, corpus) in SPLITS.iter().zip(self.splits()) {
            corpus.save(&dir.join(format!("{name}.jsonl")), &self.labels)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Meta = serde_json::from_str(&text)?;
        let load = |name: &str| Corpus::load(&dir.join(format!("{name}.jsonl")), &meta.labels);
        let ds = Self {
            source_train: load("source_train")?,
            source_dev: load("source_dev")?,
            target_train: load("target_train")?,
            target_test: load("target_test")?,
            labels: meta.labels,
            vocab_size: meta.vocab_size,
            vocabulary: meta.vocabulary,
            token_shapes: meta.token_shapes,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Builds a dataset from four CoNLL files sharing one vocabulary and
    /// label set. Target training annotations move to the hidden channel
    /// (the file may be all `O` if no gold exists).
    pub fn from_conll(source_train: &Path, source_dev: &Path, target_train: &Path, target_test: &Path) -> Result<Self> {
        let mut vocab = Vocabulary::new();
        let mut labels = LabelSet::new(Vec::<String>::new())?;
        let mut read = |p: &Path, lang| read_conll(p, &mut vocab, &mut labels, lang).map(Corpus::new);
        let source_train = read(source_train, Language::Source)?;
        let source_dev = read(source_dev, Language::Source)?;
        let target_train = read(target_train, Language::Target)?.hide_gold();
        let target_test = read(target_test, Language::Target)?;
        let ds = Self {
            labels,
            vocab_size: vocab.len(),
            token_shapes: vocab.shapes(),
            vocabulary: Some(vocab),
            source_train,
            source_dev,
            target_train,
            target_test,
        };
        ds.validate()?;
        Ok(ds)
    }
}
