//! Class prototypes in projection space and the pseudo-label refinement
//! they drive.
//!
//! * Prototypes are unit-norm moving averages `φ_c ← normalize(αφ_c + (1−α)ζ)`,
//!   seeded with the first `ζ` seen for the class.
//! * A target span's nearest prototype `c*` (by dot product) pulls its soft
//!   label: `ŷ ← β_eff·ŷ + (1−β_eff)·onehot(c*)`.
//! * Pulls toward `O` always use `β`. Pulls toward an entity class use `β`
//!   only when the similarity beats that class's margin, and are frozen
//!   (`β_eff = 1`) otherwise.
//! * Margins are the mean prototype similarity of target spans predicted as
//!   the class during the previous epoch.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Span, OUTSIDE};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Epochs during which stored pseudo labels are frozen.
pub const WARMUP_EPOCHS: usize = 1;

/// Whether refinement runs in `epoch` (0-based).
pub fn warmup_gate(epoch: usize) -> bool {
    epoch >= WARMUP_EPOCHS
}

fn normalize<S: Scalar>(v: &mut [S]) {
    let n = v.iter().map(|&x| x * x).sum::<S>().sqrt();
    if n > S::zero() {
        for x in v {
            *x /= n;
        }
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct PrototypeBank<S: Scalar = f64> {
    pub alpha: f64,
    pub dim: usize,
    /// One slot per class including `O`; `None` until first seen.
    pub prototypes: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> PrototypeBank<S> {
    pub fn new(num_classes: usize, dim: usize, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("prototype rate must lie in [0, 1], got {alpha}")));
        }
        Ok(Self {
            alpha,
            dim,
            prototypes: vec![None; num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn update(&mut self, class: usize, zeta: &[S]) -> Result<()> {
        if zeta.len() != self.dim {
            return Err(Error::shape(
                "update_prototypes",
                format!("ζ dim {} vs {}", zeta.len(), self.dim),
            ));
        }
        let slot = self
            .prototypes
            .get_mut(class)
            .ok_or_else(|| Error::Label(format!("class {class} has no prototype slot")))?;
        let a = S::lit(self.alpha);
        let next = match slot.take() {
            None => {
                let mut v = zeta.to_vec();
                normalize(&mut v);
                v
            }
            Some(mut phi) => {
                for (p, &z) in phi.iter_mut().zip(zeta) {
                    *p = a * *p + (S::one() - a) * z;
                }
                normalize(&mut phi);
                phi
            }
        };
        *slot = Some(next);
        Ok(())
    }

    /// Applies entries in order.
    pub fn update_batch<'a>(&mut self, entries: impl IntoIterator<Item = (usize, &'a [S])>) -> Result<()> {
        for (class, zeta) in entries {
            self.update(class, zeta)?;
        }
        Ok(())
    }

    pub fn get(&self, class: usize) -> Option<&[S]> {
        self.prototypes.get(class).and_then(|p| p.as_deref())
    }

    pub fn is_complete(&self) -> bool {
        self.prototypes.iter().all(Option::is_some)
    }

    /// Most similar class and its similarity; ties go to the lower index.
    pub fn nearest(&self, zeta: &[S]) -> Result<(usize, S)> {
        let mut best: Option<(usize, S)> = None;
        for (c, p) in self.prototypes.iter().enumerate() {
            let p = p
                .as_ref()
                .ok_or_else(|| Error::UninitializedPrototype(format!("class {c}")))?;
            let s = dot(p, zeta);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((c, s));
            }
        }
        best.ok_or_else(|| Error::UninitializedPrototype("bank has no classes".into()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Per-class margins plus the current epoch's running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginTable {
    /// Indexed by class; the `O` slot is never set.
    pub margins: Vec<Option<f64>>,
    sums: Vec<f64>,
    counts: Vec<usize>,
    /// When set, every entity margin is this constant and statistics are ignored.
    pub fixed: Option<f64>,
}

impl MarginTable {
    pub fn new(num_classes: usize) -> Self {
        Self {
            margins: vec![None; num_classes],
            sums: vec![0.0; num_classes],
            counts: vec![0; num_classes],
            fixed: None,
        }
    }

    pub fn fixed(num_classes: usize, r: f64) -> Self {
        let mut t = Self::new(num_classes);
        t.fixed = Some(r);
        for (c, m) in t.margins.iter_mut().enumerate() {
            if c != OUTSIDE {
                *m = Some(r);
            }
        }
        t
    }

    pub fn margin(&self, class: usize) -> Option<f64> {
        self.margins.get(class).copied().flatten()
    }

    /// Records `φ_c·ζ` for a target span predicted as entity class `c`.
    pub fn record(&mut self, class: usize, similarity: f64) {
        if class != OUTSIDE && self.fixed.is_none() {
            self.sums[class] += similarity;
            self.counts[class] += 1;
        }
    }

    pub fn pending_count(&self, class: usize) -> usize {
        self.counts[class]
    }

    /// Installs the epoch's means and resets statistics; classes without
    /// observations keep their previous margin.
    pub fn finalize(&mut self) {
        for c in 0..self.margins.len() {
            if self.counts[c] > 0 {
                self.margins[c] = Some(self.sums[c] / self.counts[c] as f64);
            }
            self.sums[c] = 0.0;
            self.counts[c] = 0;
        }
    }
}

/// `β_eff` for a span with projection `zeta`, and the class `c*` it is
/// pulled toward.
pub fn refinement_rate<S: Scalar>(
    bank: &PrototypeBank<S>,
    margins: &MarginTable,
    zeta: &[S],
    beta: f64,
) -> Result<(usize, f64)> {
    let (class, sim) = bank.nearest(zeta)?;
    if class == OUTSIDE {
        return Ok((class, beta));
    }
    let passes = margins.margin(class).is_some_and(|r| sim.to_f64_lossy() > r);
    Ok((class, if passes { beta } else { 1.0 }))
}

/// `β_eff·ŷ + (1−β_eff)·onehot(target)`.
pub fn refine_pseudo_label<S: Scalar>(prev: &[S], target: usize, beta_eff: f64) -> Vec<S> {
    let b = S::lit(beta_eff);
    let pull = S::one() - b;
    prev.iter()
        .enumerate()
        .map(|(c, &y)| if c == target { b * y + pull } else { b * y })
        .collect()
}

/// Soft labels for every enumerated span of every target sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct PseudoLabelStore<S: Scalar = f64> {
    pub beta: f64,
    /// Per sentence, spans in lexicographic order with their labels.
    entries: Vec<Vec<(Span, Vec<S>)>>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
struct LabelRecord<S: Scalar> {
    sentence: usize,
    start: usize,
    end: usize,
    label: Vec<S>,
}

impl<S: Scalar> PseudoLabelStore<S> {
    /// Spans within each sentence are sorted; duplicates are rejected.
    pub fn new(beta: f64, mut entries: Vec<Vec<(Span, Vec<S>)>>) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::Config(format!(
                "pseudo-label rate must lie in [0, 1], got {beta}"
            )));
        }
        for (i, sent) in entries.iter_mut().enumerate() {
            sent.sort_by_key(|(s, _)| *s);
            if sent.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::Span(format!("duplicate span in sentence {i}")));
            }
        }
        Ok(Self { beta, entries })
    }

    pub fn num_sentences(&self) -> usize {
        self.entries.len()
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sentence(&self, i: usize) -> &[(Span, Vec<S>)] {
        &self.entries[i]
    }

    fn index(&self, sentence: usize, span: Span) -> Result<usize> {
        self.entries
            .get(sentence)
            .and_then(|s| s.binary_search_by_key(&span, |(sp, _)| *sp).ok())
            .ok_or_else(|| {
                Error::Span(format!(
                    "no pseudo label for sentence {sentence} span ({}, {})",
                    span.start, span.end
                ))
            })
    }

    pub fn get(&self, sentence: usize, span: Span) -> Result<&[S]> {
        let i = self.index(sentence, span)?;
        Ok(&self.entries[sentence][i].1)
    }

    pub fn set(&mut self, sentence: usize, span: Span, label: Vec<S>) -> Result<()> {
        let i = self.index(sentence, span)?;
        self.entries[sentence][i].1 = label;
        Ok(())
    }

    /// Applies one refinement step in place and returns the new label.
    pub fn refine(&mut self, sentence: usize, span: Span, target: usize, beta_eff: f64) -> Result<&[S]> {
        let i = self.index(sentence, span)?;
        let slot = &mut self.entries[sentence][i].1;
        *slot = refine_pseudo_label(slot, target, beta_eff);
        Ok(slot)
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for (sentence, spans) in self.entries.iter().enumerate() {
            for (span, label) in spans {
                let rec = LabelRecord {
                    sentence,
                    start: span.start,
                    end: span.end,
                    label: label.clone(),
                };
                serde_json::to_writer(&mut out, &rec)?;
                out.write_all(b"\n").map_err(|e| Error::io("<pseudo labels>", e))?;
            }
        }
        Ok(())
    }

    /// Reads records written by [`PseudoLabelStore::write_jsonl`]; sentence
    /// ids must be below `num_sentences`.
    pub fn read_jsonl(input: impl BufRead, beta: f64, num_sentences: usize) -> Result<Self> {
        let mut entries = vec![Vec::new(); num_sentences];
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<pseudo labels>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LabelRecord<S> = serde_json::from_str(&line).map_err(|e| Error::Parse {
                path: "<pseudo labels>".into(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            let slot = entries.get_mut(rec.sentence).ok_or_else(|| Error::Parse {
                path: "<pseudo labels>".into(),
                line: i + 1,
                msg: format!("sentence {} >= {num_sentences}", rec.sentence),
            })?;
            slot.push((Span::new(rec.start, rec.end), rec.label));
        }
        Self::new(beta, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, beta: f64, num_sentences: usize) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(std::io::BufReader::new(file), beta, num_sentences)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn single_update_mixes_then_normalizes() {
        let mut bank = PrototypeBank::<f64>::new(2, 2, 0.99).unwrap();
        bank.update(1, &[1.0, 0.0]).unwrap();
        bank.update(1, &[0.0, 1.0]).unwrap();
        let n = (0.99f64 * 0.99 + 0.01 * 0.01).sqrt();
        let phi = bank.get(1).unwrap();
        assert!((phi[0] - 0.99 / n).abs() < 1e-15 && (phi[1] - 0.01 / n).abs() < 1e-15);
        assert!(bank.get(0).is_none());
    }

    #[test]
    fn constant_input_converges() {
        let mut bank = PrototypeBank::new(1, 3, 0.99).unwrap();
        let v = [0.0, 0.6, 0.8];
        bank.update(0, &[1.0, 0.0, 0.0]).unwrap();
        for _ in 0..1000 {
            bank.update(0, &v).unwrap();
            assert!((norm(bank.get(0).unwrap()) - 1.0).abs() < 1e-9);
        }
        let d: f64 = bank
            .get(0)
            .unwrap()
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(d < 1e-3, "distance {d}");
    }

    #[test]
    fn nearest_rules() {
        let mut bank = PrototypeBank::<f64>::new(3, 2, 0.9).unwrap();
        assert!(matches!(
            bank.nearest(&[1.0, 0.0]),
            Err(Error::UninitializedPrototype(_))
        ));
        bank.update(0, &[0.3, 0.9539392014169456]).unwrap();
        bank.update(1, &[1.0, 0.0]).unwrap();
        bank.update(2, &[1.0, 0.0]).unwrap();
        // Classes 1 and 2 tie exactly; the lower index wins.
        assert_eq!(bank.nearest(&[1.0, 0.0]).unwrap(), (1, 1.0));
        let (c, s) = bank.nearest(&[0.0, 1.0]).unwrap();
        assert_eq!(c, 0);
        assert!((s - 0.9539392014169456).abs() < 1e-12);
    }

    #[test]
    fn refinement_arithmetic() {
        let y: Vec<f64> = refine_pseudo_label(&[0.7, 0.2, 0.1], 1, 0.95);
        let want = [0.665, 0.24, 0.095];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(refine_pseudo_label(&[0.7, 0.2, 0.1], 1, 1.0), vec![0.7, 0.2, 0.1]);
    }

    #[test]
    fn repeated_refinement_converges_geometrically() {
        let mut y: Vec<f64> = vec![0.9, 0.1];
        for t in 1..=50 {
            y = refine_pseudo_label(&y, 1, 0.95);
            let want = 1.0 - 0.9 * 0.95f64.powi(t);
            assert!((y[1] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn margins_average_and_carry_over() {
        let mut m = MarginTable::new(3);
        m.record(1, 0.6);
        m.record(1, 1.0);
        m.record(2, 0.8);
        m.record(OUTSIDE, 0.5);
        m.finalize();
        assert!((m.margin(1).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(m.margin(2), Some(0.8));
        assert_eq!(m.margin(OUTSIDE), None);
        m.record(2, 0.4);
        m.finalize();
        assert!((m.margin(1).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(m.margin(2), Some(0.4));
    }

    #[test]
    fn fixed_margins_ignore_statistics() {
        let mut m = MarginTable::fixed(3, 1.0);
        m.record(1, 0.2);
        m.finalize();
        assert_eq!(m.margins, vec![None, Some(1.0), Some(1.0)]);
    }

    #[test]
    fn gating() {
        let mut bank = PrototypeBank::<f64>::new(3, 2, 0.9).unwrap();
        bank.update(0, &[0.0, 1.0]).unwrap();
        bank.update(1, &[1.0, 0.0]).unwrap();
        bank.update(2, &[-1.0, 0.0]).unwrap();
        let mut m = MarginTable::new(3);
        // No margin yet: entity pulls are frozen.
        assert_eq!(refinement_rate(&bank, &m, &[1.0, 0.0], 0.95).unwrap(), (1, 1.0));
        m.record(1, 0.9);
        m.finalize();
        assert_eq!(refinement_rate(&bank, &m, &[1.0, 0.0], 0.95).unwrap(), (1, 0.95));
        let z = [0.8, 0.6];
        assert_eq!(refinement_rate(&bank, &m, &z, 0.95).unwrap(), (1, 1.0));
        assert_eq!(refinement_rate(&bank, &m, &[0.6, 0.8], 0.95).unwrap(), (0, 0.95));
    }

    #[test]
    fn warmup() {
        assert!(!warmup_gate(0));
        assert!(warmup_gate(1));
    }

    #[test]
    fn store_round_trip() {
        let store = PseudoLabelStore::new(
            0.95,
            vec![
                vec![(Span::new(0, 1), vec![0.25, 0.75]), (Span::new(0, 0), vec![1.0, 0.0])],
                vec![],
                vec![(Span::new(0, 0), vec![0.1, 0.9])],
            ],
        )
        .unwrap();
        assert_eq!(store.sentence(0)[0].0, Span::new(0, 0));
        let mut buf = Vec::new();
        store.write_jsonl(&mut buf).unwrap();
        let back = PseudoLabelStore::read_jsonl(&buf[..], 0.95, 3).unwrap();
        assert_eq!(back, store);
        assert!(store.get(1, Span::new(0, 0)).is_err());
    }

    proptest! {
        #[test]
        fn refinement_stays_on_simplex(
            raw in prop::collection::vec(0.0f64..1.0, 2..6),
            steps in prop::collection::vec((0usize..6, any::<bool>()), 1..50),
        ) {
            let s: f64 = raw.iter().sum::<f64>() + 1e-3;
            let mut y: Vec<f64> = raw.iter().map(|v| (v + 1e-3 / raw.len() as f64) / s).collect();
            for (c, frozen) in steps {
                let c = c % y.len();
                y = refine_pseudo_label(&y, c, if frozen { 1.0 } else { 0.95 });
                prop_assert!(y.iter().all(|&v| v >= 0.0));
                prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn prototypes_stay_unit_norm(zs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 1..40)) {
            let mut bank = PrototypeBank::new(2, 3, 0.99).unwrap();
            for (i, z) in zs.iter().enumerate() {
                let mut z = z.clone();
                normalize(&mut z);
                if norm(&z) == 0.0 { continue; }
                bank.update(i % 2, &z).unwrap();
                let phi = bank.get(i % 2).unwrap();
                prop_assert!((norm(phi) - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn below_margin_spans_never_gain_entity_mass(
            angle in 0.0f64..std::f64::consts::TAU,
            y0 in 0.05f64..0.95,
            steps in 1usize..30,
        ) {
            let mut bank = PrototypeBank::<f64>::new(3, 2, 0.9).unwrap();
            bank.update(0, &[1.0, 0.0]).unwrap();
            bank.update(1, &[0.0, 1.0]).unwrap();
            bank.update(2, &[-0.6, -0.8]).unwrap();
            // Margins of 1 can never be exceeded by unit vectors.
            let mut margins = MarginTable::new(3);
            margins.record(1, 1.0);
            margins.record(2, 1.0);
            margins.finalize();
            let z = [angle.cos(), angle.sin()];
            let mut y = vec![y0, (1.0 - y0) / 2.0, (1.0 - y0) / 2.0];
            for _ in 0..steps {
                let entity_before = y[1] + y[2];
                let (c, b) = refinement_rate(&bank, &margins, &z, 0.95).unwrap();
                y = refine_pseudo_label(&y, c, b);
                prop_assert!(y[1] + y[2] <= entity_before + 1e-15);
            }
        }
    }
}
