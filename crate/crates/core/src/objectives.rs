//! Training losses, built on the tape from span probabilities `P` and
//! projections `ζ`:
//!
//! * source cross-entropy against gold classes,
//! * target soft cross-entropy against stored pseudo labels,
//! * supervised contrastive loss over two dropout views of every span,
//! * KL consistency between the two views' class distributions.
//!
//! Each is expressed as Frobenius products of tape nodes with constant
//! weight matrices, so all gradients come from the generic op rules.

use serde::{Deserialize, Serialize};

use crate::corpus::{Language, OUTSIDE};
use crate::error::{Error, Result};
use crate::math::{Axis, NodeId, Tape, Tensor};
use crate::scalar::Scalar;

/// Floor applied inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Which terms enter the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// All four terms.
    Contproto,
    /// Source plus target cross-entropy.
    Vanilla,
    /// Everything except consistency regularization.
    NoReg,
    /// Cross-entropy only (no contrastive term, no regularization).
    NoCont,
}

impl LossMode {
    pub fn uses_cont(self) -> bool {
        matches!(self, LossMode::Contproto | LossMode::NoReg)
    }

    pub fn uses_reg(self) -> bool {
        self == LossMode::Contproto
    }

    /// Whether a second dropout view is needed at all.
    pub fn dual_pass(self) -> bool {
        self.uses_cont() || self.uses_reg()
    }
}

/// Rows of a probability node belonging to one side of the batch, with the
/// sentence each row came from (used for per-sentence averaging).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SideRows {
    pub rows: Vec<usize>,
    pub sentence: Vec<usize>,
}

impl SideRows {
    pub fn push(&mut self, row: usize, sentence: usize) {
        self.rows.push(row);
        self.sentence.push(sentence);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `1 / (N·|S(X)|)` for every row: `N` distinct sentences, `|S(X)|`
    /// rows from that row's sentence.
    fn weights(&self) -> Vec<f64> {
        let mut counts = std::collections::BTreeMap::new();
        for &s in &self.sentence {
            *counts.entry(s).or_insert(0usize) += 1;
        }
        let n = counts.len() as f64;
        self.sentence.iter().map(|s| 1.0 / (n * counts[s] as f64)).collect()
    }
}

fn cross_entropy<S: Scalar>(
    tape: &mut Tape<S>,
    probs: NodeId,
    side: &SideRows,
    target: impl Fn(usize, usize) -> f64,
) -> Result<NodeId> {
    let (rows, cols) = tape.value(probs).dims()?;
    if side.rows.len() != side.sentence.len() {
        return Err(Error::shape("cross_entropy", "rows and sentence ids differ in length"));
    }
    let mut w = Tensor::zeros(rows, cols);
    for ((i, &r), wt) in side.rows.iter().enumerate().zip(side.weights()) {
        if r >= rows {
            return Err(Error::shape("cross_entropy", format!("row {r} of {rows}")));
        }
        for c in 0..cols {
            let y = target(i, c);
            if y != 0.0 {
                w.row_mut(r)[c] -= S::lit(y * wt);
            }
        }
    }
    let logp = tape.log(probs, S::lit(LOG_FLOOR))?;
    let w = tape.constant(w);
    tape.dot(logp, w)
}

/// `−(1/N) Σ_X (1/|S(X)|) Σ_s log P_gold(s)` over the source rows.
pub fn loss_src<S: Scalar>(tape: &mut Tape<S>, probs: NodeId, side: &SideRows, gold: &[usize]) -> Result<NodeId> {
    let classes = tape.value(probs).cols();
    if gold.len() != side.len() {
        return Err(Error::shape(
            "loss_src",
            format!("{} gold labels for {} rows", gold.len(), side.len()),
        ));
    }
    if let Some(&g) = gold.iter().find(|&&g| g >= classes) {
        return Err(Error::Label(format!("gold class {g} outside {classes} classes")));
    }
    cross_entropy(tape, probs, side, |i, c| if gold[i] == c { 1.0 } else { 0.0 })
}

/// Soft cross-entropy against `soft` (one distribution per target row).
pub fn loss_tgt<S: Scalar>(tape: &mut Tape<S>, probs: NodeId, side: &SideRows, soft: &[Vec<S>]) -> Result<NodeId> {
    let classes = tape.value(probs).cols();
    if soft.len() != side.len() {
        return Err(Error::shape(
            "loss_tgt",
            format!("{} pseudo labels for {} rows", soft.len(), side.len()),
        ));
    }
    let tol = S::epsilon().sqrt().to_f64_lossy();
    for (i, y) in soft.iter().enumerate() {
        let sum: f64 = y.iter().map(|v| v.to_f64_lossy()).sum();
        if y.len() != classes || y.iter().any(|v| !(v.to_f64_lossy() >= 0.0)) || (sum - 1.0).abs() > tol {
            return Err(Error::Distribution(format!(
                "pseudo label {i} is not a distribution over {classes} classes"
            )));
        }
    }
    cross_entropy(tape, probs, side, |i, c| soft[i][c].to_f64_lossy())
}

/// The `2m` entries of the contrastive objective: both views of every span
/// stacked (`view 1` rows first), with one label and origin per span.
#[derive(Clone, Debug)]
pub struct MultiViewSet {
    pub zeta: NodeId,
    pub labels: Vec<usize>,
    pub origins: Vec<Language>,
}

impl MultiViewSet {
    /// `labels`/`origins` describe the `m` spans; both views inherit them.
    pub fn from_views<S: Scalar>(
        tape: &mut Tape<S>,
        zeta1: NodeId,
        zeta2: NodeId,
        labels: &[usize],
        origins: &[Language],
    ) -> Result<Self> {
        let m = tape.value(zeta1).rows();
        if tape.value(zeta2).rows() != m || labels.len() != m || origins.len() != m {
            return Err(Error::shape(
                "multi_view_set",
                format!("{m} spans, {} labels, {} origins", labels.len(), origins.len()),
            ));
        }
        let zeta = tape.concat(&[zeta1, zeta2], Axis::Rows)?;
        Ok(Self {
            zeta,
            labels: labels.iter().chain(labels).copied().collect(),
            origins: origins.iter().chain(origins).copied().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    /// Whether `O`-labeled entries act as anchors.
    pub include_outside_anchors: bool,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            include_outside_anchors: true,
        }
    }
}

/// Supervised contrastive loss over the entries of `mvs`:
///
/// ```text
/// −(1/|I|) Σ_{i∈I} (1/|P(i)|) Σ_{p∈P(i)} log( exp(ζ_i·ζ_p/τ) / Σ_{a≠i} exp(ζ_i·ζ_a/τ) )
/// ```
///
/// `P(i)` holds the other entries sharing `i`'s label; anchors with empty
/// `P(i)` (or `O` anchors when excluded) are left out of `I`. With no anchor
/// left the loss is a constant 0.
pub fn loss_cont<S: Scalar>(tape: &mut Tape<S>, mvs: &MultiViewSet, cfg: &ContrastiveConfig) -> Result<NodeId> {
    let n = mvs.len();
    if n < 2 {
        return Err(Error::shape("loss_cont", format!("need at least 2 entries, got {n}")));
    }
    if tape.value(mvs.zeta).rows() != n {
        return Err(Error::shape(
            "loss_cont",
            format!("{} rows for {n} labels", tape.value(mvs.zeta).rows()),
        ));
    }
    if !(cfg.temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {}",
            cfg.temperature
        )));
    }

    let mut positives = vec![0usize; n];
    let mut by_label: std::collections::BTreeMap<usize, usize> = Default::default();
    for &l in &mvs.labels {
        *by_label.entry(l).or_default() += 1;
    }
    let mut anchors = 0usize;
    for (i, &l) in mvs.labels.iter().enumerate() {
        positives[i] = by_label[&l] - 1;
        if positives[i] > 0 && (cfg.include_outside_anchors || l != OUTSIDE) {
            anchors += 1;
        } else {
            positives[i] = 0;
        }
    }
    if anchors == 0 {
        return Ok(tape.constant(Tensor::scalar(S::zero())));
    }

    let inv_t = 1.0 / cfg.temperature;
    let sim = tape.matmul_t(mvs.zeta, mvs.zeta)?;
    let logits = tape.scale(sim, S::lit(inv_t))?;
    // Unit-norm rows keep ζ_i·ζ_a ≤ 1, so shifting by −1/τ bounds exp by 1.
    // The shift cancels between numerator and denominator.
    let shift = tape.constant(Tensor::scalar(S::lit(-inv_t)));
    let logits = tape.add(logits, shift)?;
    let e = tape.exp(logits)?;
    let mut off = Tensor::filled(n, n, S::one());
    for i in 0..n {
        off.row_mut(i)[i] = S::zero();
    }
    let e = tape.mask_apply(e, off)?;
    let ones = tape.constant(Tensor::filled(n, 1, S::one()));
    let denom = tape.matmul(e, ones)?;
    let log_denom = tape.log(denom, S::min_positive_value())?;

    let a = anchors as f64;
    let mut w_pos = Tensor::zeros(n, n);
    let mut w_den = Tensor::zeros(n, 1);
    for (i, &pos) in positives.iter().enumerate() {
        if pos == 0 {
            continue;
        }
        let w = S::lit(-1.0 / (a * pos as f64));
        let row = w_pos.row_mut(i);
        for (p, &lp) in mvs.labels.iter().enumerate() {
            if p != i && lp == mvs.labels[i] {
                row[p] = w;
            }
        }
        w_den.row_mut(i)[0] = S::lit(1.0 / a);
    }
    let w_pos = tape.constant(w_pos);
    let w_den = tape.constant(w_den);
    let num = tape.dot(logits, w_pos)?;
    let den = tape.dot(log_denom, w_den)?;
    tape.add(num, den)
}

/// Consistency loss and how many probabilities hit the log floor.
#[derive(Clone, Copy, Debug)]
pub struct RegLoss {
    pub node: NodeId,
    pub clamped: usize,
}

/// `(1/m) Σ_i KL(P_i ‖ P'_i)` over the `m` rows of the two views, minimized
/// as a nonnegative quantity. Log arguments are floored at `1e-12`.
pub fn loss_reg<S: Scalar>(tape: &mut Tape<S>, p: NodeId, q: NodeId) -> Result<RegLoss> {
    let (m, c) = tape.value(p).dims()?;
    if tape.value(q).dims()? != (m, c) || m == 0 {
        return Err(Error::shape(
            "loss_reg",
            format!("{:?} vs {:?}", tape.value(p).shape(), tape.value(q).shape()),
        ));
    }
    let floor = S::lit(LOG_FLOOR);
    let clamped = tape
        .value(p)
        .data()
        .iter()
        .zip(tape.value(q).data())
        .filter(|(&a, &b)| a > S::zero() && (a < floor || b < floor))
        .count();
    let lp = tape.log(p, floor)?;
    let lq = tape.log(q, floor)?;
    let neg_lq = tape.scale(lq, -S::one())?;
    let diff = tape.add(lp, neg_lq)?;
    let kl = tape.dot(p, diff)?;
    let node = tape.scale(kl, S::lit(1.0 / m as f64))?;
    Ok(RegLoss { node, clamped })
}

/// Loss term nodes of one step; absent terms were not computed.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub src: NodeId,
    pub tgt: NodeId,
    pub cont: Option<NodeId>,
    pub reg: Option<NodeId>,
}

/// Sums the terms `mode` selects. A term the mode needs but that is absent
/// is a configuration error.
pub fn total_loss<S: Scalar>(tape: &mut Tape<S>, parts: &LossNodes, mode: LossMode) -> Result<NodeId> {
    let mut total = tape.add(parts.src, parts.tgt)?;
    for (used, node, name) in [
        (mode.uses_cont(), parts.cont, "contrastive"),
        (mode.uses_reg(), parts.reg, "regularization"),
    ] {
        if used {
            let node = node.ok_or_else(|| Error::Config(format!("{mode:?} needs the {name} term")))?;
            total = tape.add(total, node)?;
        }
    }
    Ok(total)
}

/// Scalar values of one step's losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_src: f64,
    pub l_tgt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_cont: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_reg: Option<f64>,
    pub total: f64,
}

impl LossReport {
    pub fn read<S: Scalar>(tape: &Tape<S>, parts: &LossNodes, total: NodeId, mode: LossMode) -> Result<Self> {
        let get = |n: NodeId| -> Result<f64> {
            let v = tape
                .value(n)
                .item()
                .ok_or_else(|| Error::NonScalarLoss(tape.value(n).shape().to_vec()))?;
            let v = v.to_f64_lossy();
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite("loss value".into()))
            }
        };
        Ok(Self {
            l_src: get(parts.src)?,
            l_tgt: get(parts.tgt)?,
            l_cont: if mode.uses_cont() {
                parts.cont.map(get).transpose()?
            } else {
                None
            },
            l_reg: if mode.uses_reg() {
                parts.reg.map(get).transpose()?
            } else {
                None
            },
            total: get(total)?,
        })
    }
}
