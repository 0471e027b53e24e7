//! Span-based NER model: a small windowed token encoder, span
//! representations `z = [h_j; h_k; len(k−j)]`, a linear classifier, and a
//! two-layer projection head producing unit-norm `ζ`.
//!
//! Token encoder: each token's input is the embedding of itself and its
//! neighbours within `window` positions (sentence edges see a learned
//! boundary row), each augmented by a learned position embedding. A stack of
//! dense layers with dropout maps that window to `h`. The window is what lets
//! a span's boundary states see context words just outside the span.
//!
//! An optional shape table maps every vocabulary id to a coarse word-shape
//! class (for text: capitalization, digits) whose embedding is added to the
//! token row. Shapes are shared across languages, so they carry over to
//! words the model never saw during training.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{GoldSpan, Span, OUTSIDE};
use crate::error::{Error, Result};
use crate::math::{Activation, Axis, NodeId, Rng, Tape, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    /// Classes including `O`.
    pub num_classes: usize,
    /// Rows of the position table; later positions share the last row.
    pub max_positions: usize,
    pub d_tok: usize,
    pub d_h: usize,
    pub layers: usize,
    /// Neighbours on each side feeding a token's state.
    pub window: usize,
    pub activation: Activation,
    pub dropout: f64,
    /// Training-time probability of zeroing a token's identity embedding
    /// (shape and position stay), so unfamiliar words are read from context.
    pub word_dropout: f64,
    /// Longest span with a length embedding.
    pub max_span_len: usize,
    pub d_len: usize,
    pub d_proj_hidden: usize,
    pub d_proj: usize,
    pub init_seed: u64,
    /// Shape class per vocabulary id; empty disables shape embeddings.
    pub token_shapes: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            num_classes: 0,
            max_positions: 128,
            d_tok: 32,
            d_h: 64,
            layers: 2,
            window: 1,
            activation: Activation::Tanh,
            dropout: 0.1,
            word_dropout: 0.0,
            max_span_len: 8,
            d_len: 16,
            d_proj_hidden: 64,
            d_proj: 32,
            init_seed: 0,
            token_shapes: Vec::new(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
            ("max_positions", self.max_positions),
            ("d_tok", self.d_tok),
            ("d_h", self.d_h),
            ("layers", self.layers),
            ("max_span_len", self.max_span_len),
            ("d_len", self.d_len),
            ("d_proj_hidden", self.d_proj_hidden),
            ("d_proj", self.d_proj),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("encoder needs O plus at least one entity class".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(0.0..1.0).contains(&self.word_dropout) {
            return Err(Error::Config(format!(
                "word_dropout must lie in [0, 1), got {}",
                self.word_dropout
            )));
        }
        if !self.token_shapes.is_empty() && self.token_shapes.len() != self.vocab_size {
            return Err(Error::Config(format!(
                "token_shapes has {} entries for a vocabulary of {}",
                self.token_shapes.len(),
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Rows of the shape table; zero when shapes are disabled.
    pub fn num_shapes(&self) -> usize {
        self.token_shapes.iter().max().map_or(0, |m| m + 1)
    }

    pub fn z_dim(&self) -> usize {
        2 * self.d_h + self.d_len
    }

    fn window_dim(&self) -> usize {
        (2 * self.window + 1) * self.d_tok
    }
}

/// Dense layer stored `out × in` with a `1 × out` bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct Linear<S: Scalar = f64> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    fn xavier(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| S::lit(rng.uniform(-a, a))).collect();
        Self {
            weight: Tensor::matrix(outputs, inputs, data).expect("sized above"),
            bias: Tensor::zeros(1, outputs),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "S: Scalar")]
pub struct EncoderParams<S: Scalar = f64> {
    pub config: EncoderConfig,
    /// `(V + 1) × d_tok`; the last row is the sentence-boundary token.
    pub token_embedding: Tensor<S>,
    pub position_embedding: Tensor<S>,
    /// `num_shapes × d_tok`, present when the config has a shape table.
    pub shape_embedding: Option<Tensor<S>>,
    pub layers: Vec<Linear<S>>,
    /// Row `l − 1` embeds span length `l`.
    pub length_embedding: Tensor<S>,
    pub classifier: Linear<S>,
    pub proj_hidden: Linear<S>,
    pub proj_out: Linear<S>,
}

fn uniform_table<S: Scalar>(rows: usize, cols: usize, rng: &mut Rng) -> Tensor<S> {
    let data = (0..rows * cols).map(|_| S::lit(rng.uniform(-0.1, 0.1))).collect();
    Tensor::matrix(rows, cols, data).expect("sized above")
}

impl<S: Scalar> EncoderParams<S> {
    /// Seeded initialization: uniform(−0.1, 0.1) tables, Xavier-uniform
    /// weights, zero biases.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derived(config.init_seed, "encoder-init", 0);
        let c = &config;
        let token_embedding = uniform_table(c.vocab_size + 1, c.d_tok, &mut rng);
        let position_embedding = uniform_table(c.max_positions, c.d_tok, &mut rng);
        let shape_embedding = (c.num_shapes() > 0).then(|| uniform_table(c.num_shapes(), c.d_tok, &mut rng));
        let mut layers = Vec::with_capacity(c.layers);
        let mut width = c.window_dim();
        for _ in 0..c.layers {
            layers.push(Linear::xavier(width, c.d_h, &mut rng));
            width = c.d_h;
        }
        let length_embedding = uniform_table(c.max_span_len, c.d_len, &mut rng);
        let classifier = Linear::xavier(c.z_dim(), c.num_classes, &mut rng);
        let proj_hidden = Linear::xavier(c.z_dim(), c.d_proj_hidden, &mut rng);
        let proj_out = Linear::xavier(c.d_proj_hidden, c.d_proj, &mut rng);
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            shape_embedding,
            layers,
            length_embedding,
            classifier,
            proj_hidden,
            proj_out,
        })
    }

    /// Every trainable tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        out.extend(&self.shape_embedding);
        for l in &self.layers {
            out.extend([&l.weight, &l.bias]);
        }
        out.push(&self.length_embedding);
        for l in [&self.classifier, &self.proj_hidden, &self.proj_out] {
            out.extend([&l.weight, &l.bias]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        out.extend(&mut self.shape_embedding);
        for l in &mut self.layers {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        out.push(&mut self.length_embedding);
        for l in [&mut self.classifier, &mut self.proj_hidden, &mut self.proj_out] {
            out.extend([&mut l.weight, &mut l.bias]);
        }
        out
    }

    /// Names matching [`EncoderParams::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["token_embedding".to_string(), "position_embedding".to_string()];
        if self.shape_embedding.is_some() {
            out.push("shape_embedding".into());
        }
        for i in 0..self.layers.len() {
            out.push(format!("layer{i}.weight"));
            out.push(format!("layer{i}.bias"));
        }
        out.push("length_embedding".into());
        for l in ["classifier", "proj_hidden", "proj_out"] {
            out.push(format!("{l}.weight"));
            out.push(format!("{l}.bias"));
        }
        out
    }

    /// Puts every parameter on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape<S>) -> ParamNodes {
        let ids: Vec<NodeId> = self.tensors().into_iter().map(|t| tape.param(t.clone())).collect();
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("one node per tensor");
        let token_embedding = next();
        let position_embedding = next();
        let shape_embedding = self.shape_embedding.as_ref().map(|_| next());
        let layers = (0..self.layers.len()).map(|_| (next(), next())).collect();
        let length_embedding = next();
        let classifier = (next(), next());
        let proj_hidden = (next(), next());
        let proj_out = (next(), next());
        ParamNodes {
            all: ids,
            token_embedding,
            position_embedding,
            shape_embedding,
            layers,
            length_embedding,
            classifier,
            proj_hidden,
            proj_out,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let params: Self = serde_json::from_str(&text)?;
        params.config.validate()?;
        if params.shape_embedding.is_some() != (params.config.num_shapes() > 0) {
            return Err(Error::Config("shape embedding does not match the shape table".into()));
        }
        Ok(params)
    }
}

/// Tape handles for the parameters, in [`EncoderParams::tensors`] order.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    pub all: Vec<NodeId>,
    token_embedding: NodeId,
    position_embedding: NodeId,
    shape_embedding: Option<NodeId>,
    layers: Vec<(NodeId, NodeId)>,
    length_embedding: NodeId,
    classifier: (NodeId, NodeId),
    proj_hidden: (NodeId, NodeId),
    proj_out: (NodeId, NodeId),
}

/// A span of sentence `sentence` in a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpanRef {
    pub sentence: usize,
    pub span: Span,
}

/// Tape nodes produced by one pass; each has one row per requested span.
#[derive(Clone, Copy, Debug)]
pub struct PassNodes {
    pub z: NodeId,
    pub zeta: NodeId,
    pub probs: NodeId,
}

/// Inverted dropout mask: entries are 0 with probability `p`, else 1/(1−p).
pub fn dropout_mask<S: Scalar>(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Tensor<S> {
    let keep = S::lit(1.0 / (1.0 - p));
    let data = (0..rows * cols)
        .map(|_| if rng.bernoulli(p) { S::zero() } else { keep })
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized above")
}

fn linear<S: Scalar>(tape: &mut Tape<S>, x: NodeId, (w, b): (NodeId, NodeId)) -> Result<NodeId> {
    let y = tape.matmul_t(x, w)?;
    tape.add(y, b)
}

/// Builds span outputs for `spans` over `sentences` on `tape`. With
/// `dropout = Some(rng)` masks are drawn from `rng` (when the configured
/// rate is positive); with `None` the pass is deterministic.
pub fn encode_pass<S: Scalar>(
    tape: &mut Tape<S>,
    params: &EncoderParams<S>,
    nodes: &ParamNodes,
    sentences: &[&[usize]],
    spans: &[SpanRef],
    dropout: Option<&mut Rng>,
) -> Result<PassNodes> {
    let c = &params.config;
    if spans.is_empty() {
        return Err(Error::shape("encode_pass", "no spans requested"));
    }
    let boundary = c.vocab_size;
    let mut offsets = Vec::with_capacity(sentences.len());
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    for s in sentences {
        offsets.push(ids.len());
        for (i, &t) in s.iter().enumerate() {
            if t >= c.vocab_size {
                return Err(Error::shape(
                    "encode_pass",
                    format!("token id {t} >= vocab size {}", c.vocab_size),
                ));
            }
            ids.push(t);
            positions.push(i.min(c.max_positions - 1));
        }
    }
    let n_tok = ids.len();
    // Row `n_tok` of `padded` is the boundary embedding.
    ids.push(boundary);
    let mut tok = tape.row_select(nodes.token_embedding, ids)?;
    let mut rng = dropout;
    if let Some(rng) = rng.as_deref_mut().filter(|_| c.word_dropout > 0.0) {
        let mut mask = Tensor::filled(n_tok + 1, c.d_tok, S::one());
        for i in 0..n_tok {
            if rng.bernoulli(c.word_dropout) {
                mask.row_mut(i).fill(S::zero());
            }
        }
        tok = tape.mask_apply(tok, mask)?;
    }
    let pos = tape.row_select(nodes.position_embedding, positions)?;
    let zero_row = tape.constant(Tensor::zeros(1, c.d_tok));
    let pos = tape.concat(&[pos, zero_row], Axis::Rows)?;
    let mut padded = tape.add(tok, pos)?;
    if let Some(table) = nodes.shape_embedding {
        let shapes = sentences
            .iter()
            .flat_map(|s| s.iter().map(|&t| c.token_shapes[t]))
            .collect();
        let rows = tape.row_select(table, shapes)?;
        let rows = tape.concat(&[rows, zero_row], Axis::Rows)?;
        padded = tape.add(padded, rows)?;
    }

    let mut parts = Vec::with_capacity(2 * c.window + 1);
    for shift in -(c.window as isize)..=(c.window as isize) {
        let mut rows = Vec::with_capacity(n_tok);
        for (s, &off) in sentences.iter().zip(&offsets) {
            for i in 0..s.len() as isize {
                let j = i + shift;
                rows.push(if j < 0 || j >= s.len() as isize {
                    n_tok
                } else {
                    off + j as usize
                });
            }
        }
        parts.push(tape.row_select(padded, rows)?);
    }
    let mut h = tape.concat(&parts, Axis::Cols)?;

    for &layer in &nodes.layers {
        h = linear(tape, h, layer)?;
        h = tape.activation(h, c.activation)?;
        if let Some(rng) = rng.as_deref_mut().filter(|_| c.dropout > 0.0) {
            h = tape.mask_apply(h, dropout_mask(n_tok, c.d_h, c.dropout, rng))?;
        }
    }

    let mut starts = Vec::with_capacity(spans.len());
    let mut ends = Vec::with_capacity(spans.len());
    let mut lens = Vec::with_capacity(spans.len());
    for r in spans {
        let s = sentences
            .get(r.sentence)
            .ok_or_else(|| Error::Span(format!("sentence {} not in batch of {}", r.sentence, sentences.len())))?;
        if r.span.start > r.span.end || r.span.end >= s.len() {
            return Err(Error::Span(format!(
                "span ({}, {}) outside sentence of length {}",
                r.span.start,
                r.span.end,
                s.len()
            )));
        }
        if r.span.len() > c.max_span_len {
            return Err(Error::Span(format!(
                "span length {} exceeds the length table ({})",
                r.span.len(),
                c.max_span_len
            )));
        }
        starts.push(offsets[r.sentence] + r.span.start);
        ends.push(offsets[r.sentence] + r.span.end);
        lens.push(r.span.len() - 1);
    }
    let hs = tape.row_select(h, starts)?;
    let he = tape.row_select(h, ends)?;
    let hl = tape.row_select(nodes.length_embedding, lens)?;
    let z = tape.concat(&[hs, he, hl], Axis::Cols)?;

    let logits = linear(tape, z, nodes.classifier)?;
    let probs = tape.softmax_rows(logits)?;

    let p = linear(tape, z, nodes.proj_hidden)?;
    let p = tape.activation(p, c.activation)?;
    let p = linear(tape, p, nodes.proj_out)?;
    let zeta = tape.l2_normalize_rows(p)?;
    Ok(PassNodes { z, zeta, probs })
}

/// Plain values of one dropout-free pass.
#[derive(Clone, Debug)]
pub struct SpanOutputs<S: Scalar = f64> {
    pub z: Tensor<S>,
    pub zeta: Tensor<S>,
    pub probs: Tensor<S>,
}

/// Dropout-free forward pass returning values only.
pub fn infer<S: Scalar>(
    params: &EncoderParams<S>,
    sentences: &[&[usize]],
    spans: &[SpanRef],
) -> Result<SpanOutputs<S>> {
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let out = encode_pass(&mut tape, params, &nodes, sentences, spans, None)?;
    Ok(SpanOutputs {
        z: tape.value(out.z).clone(),
        zeta: tape.value(out.zeta).clone(),
        probs: tape.value(out.probs).clone(),
    })
}

/// How a span's class distribution becomes a hard decision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Plain argmax (ties go to the lower class index, so to `O` first).
    #[default]
    Argmax,
    /// Argmax, but entity decisions below this probability become `O`.
    MinConfidence(f64),
}

/// Argmax class and its probability; ties go to the lower index.
pub fn argmax<S: Scalar>(row: &[S]) -> (usize, S) {
    let mut best = (0, row[0]);
    for (i, &p) in row.iter().enumerate().skip(1) {
        if p > best.1 {
            best = (i, p);
        }
    }
    best
}

/// Greedy flat decoding: entity candidates by descending probability (ties
/// by earlier start, then shorter span), each kept unless it overlaps one
/// already kept. Output is sorted by start.
pub fn decode_spans<S: Scalar>(spans: &[Span], probs: &Tensor<S>, policy: ThresholdPolicy) -> Vec<GoldSpan> {
    let mut candidates: Vec<(Span, usize, S)> = spans
        .iter()
        .enumerate()
        .filter_map(|(i, &span)| {
            let (class, p) = argmax(probs.row(i));
            let confident = match policy {
                ThresholdPolicy::Argmax => true,
                ThresholdPolicy::MinConfidence(t) => p.to_f64_lossy() >= t,
            };
            (class != OUTSIDE && confident).then_some((span, class, p))
        })
        .collect();
    candidates.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.0.start.cmp(&b.0.start))
            .then(a.0.len().cmp(&b.0.len()))
    });
    let mut kept: Vec<GoldSpan> = Vec::new();
    for (span, class, _) in candidates {
        if kept.iter().all(|k| !k.span.overlaps(&span)) {
            kept.push(GoldSpan { span, class });
        }
    }
    kept.sort_by_key(|g| (g.span.start, g.span.end));
    kept
}

/// Entity predictions for one sentence over all spans up to `max_len`
/// (capped by the length table).
pub fn predict<S: Scalar>(
    params: &EncoderParams<S>,
    tokens: &[usize],
    max_len: Option<usize>,
    policy: ThresholdPolicy,
) -> Result<Vec<GoldSpan>> {
    predict_batch(params, &[tokens], max_len, policy).map(|mut v| v.remove(0))
}

/// [`predict`] over many sentences with one forward pass per chunk.
pub fn predict_batch<S: Scalar>(
    params: &EncoderParams<S>,
    sentences: &[&[usize]],
    max_len: Option<usize>,
    policy: ThresholdPolicy,
) -> Result<Vec<Vec<GoldSpan>>> {
    let cap = max_len.map_or(params.config.max_span_len, |m| m.min(params.config.max_span_len));
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(64) {
        let per: Vec<Vec<Span>> = chunk
            .iter()
            .map(|s| crate::corpus::enumerate_spans(s.len(), Some(cap)))
            .collect();
        let refs: Vec<SpanRef> = per
            .iter()
            .enumerate()
            .flat_map(|(i, spans)| spans.iter().map(move |&span| SpanRef { sentence: i, span }))
            .collect();
        if refs.is_empty() {
            out.extend(chunk.iter().map(|_| Vec::new()));
            continue;
        }
        let values = infer(params, chunk, &refs)?;
        let mut row = 0;
        for spans in &per {
            let rows: Vec<Vec<S>> = (row..row + spans.len()).map(|r| values.probs.row(r).to_vec()).collect();
            row += spans.len();
            let probs = if rows.is_empty() {
                Tensor::zeros(0, params.config.num_classes)
            } else {
                Tensor::from_rows(&rows)?
            };
            out.push(decode_spans(spans, &probs, policy));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 12,
            num_classes: 4,
            max_positions: 16,
            d_tok: 5,
            d_h: 8,
            layers: 2,
            max_span_len: 3,
            d_len: 4,
            d_proj_hidden: 6,
            d_proj: 5,
            init_seed: 3,
            ..EncoderConfig::default()
        }
    }

    fn batch() -> (Vec<Vec<usize>>, Vec<SpanRef>) {
        let sents = vec![vec![1, 4, 7, 2], vec![3, 11]];
        let mut refs = Vec::new();
        for (i, s) in sents.iter().enumerate() {
            for span in crate::corpus::enumerate_spans(s.len(), Some(3)) {
                refs.push(SpanRef { sentence: i, span });
            }
        }
        (sents, refs)
    }

    fn run(params: &EncoderParams, sents: &[Vec<usize>], refs: &[SpanRef], seed: Option<u64>) -> SpanOutputs {
        let views: Vec<&[usize]> = sents.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::new();
        let nodes = params.register(&mut tape);
        let mut rng = seed.map(Rng::new);
        let out = encode_pass(&mut tape, params, &nodes, &views, refs, rng.as_mut()).unwrap();
        SpanOutputs {
            z: tape.value(out.z).clone(),
            zeta: tape.value(out.zeta).clone(),
            probs: tape.value(out.probs).clone(),
        }
    }

    #[test]
    fn output_shapes_and_invariants() {
        let params = EncoderParams::<f64>::init(config()).unwrap();
        let (sents, refs) = batch();
        let out = run(&params, &sents, &refs, Some(1));
        assert_eq!(out.z.shape(), &[refs.len(), 20]);
        assert_eq!(out.zeta.shape(), &[refs.len(), 5]);
        for i in 0..refs.len() {
            let s: f64 = out.probs.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            let n: f64 = out.zeta.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dropout_off_is_deterministic_and_on_varies() {
        let params = EncoderParams::<f64>::init(config()).unwrap();
        let (sents, refs) = batch();
        assert_eq!(
            run(&params, &sents, &refs, None).probs,
            run(&params, &sents, &refs, None).probs
        );
        let a = run(&params, &sents, &refs, Some(1)).probs;
        let b = run(&params, &sents, &refs, Some(2)).probs;
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn word_dropout_acts_only_with_a_random_stream() {
        let quiet = EncoderConfig {
            dropout: 0.0,
            ..config()
        };
        let params = EncoderParams::<f64>::init(quiet.clone()).unwrap();
        let (sents, refs) = batch();
        assert_eq!(
            run(&params, &sents, &refs, Some(1)).probs,
            run(&params, &sents, &refs, None).probs
        );
        let params = EncoderParams::<f64>::init(EncoderConfig {
            word_dropout: 0.5,
            ..quiet
        })
        .unwrap();
        assert_ne!(
            run(&params, &sents, &refs, Some(1)).probs,
            run(&params, &sents, &refs, None).probs
        );
    }

    #[test]
    fn shape_table_feeds_the_output() {
        let shaped = EncoderConfig {
            token_shapes: (0..12).map(|t| t % 3).collect(),
            ..config()
        };
        let mut params = EncoderParams::<f64>::init(shaped.clone()).unwrap();
        assert!(params.tensor_names().iter().any(|n| n == "shape_embedding"));
        assert_eq!(params.shape_embedding.as_ref().unwrap().shape(), &[3, 5]);
        let (sents, refs) = batch();
        let before = run(&params, &sents, &refs, None).probs;
        params.shape_embedding.as_mut().unwrap().data_mut()[0] += 0.5;
        assert_ne!(run(&params, &sents, &refs, None).probs, before);

        let bad = EncoderConfig {
            token_shapes: vec![0; 5],
            ..config()
        };
        assert!(EncoderParams::<f64>::init(bad).is_err());
        let plain = EncoderParams::<f64>::init(config()).unwrap();
        assert_eq!(plain.tensors().len() + 1, params.tensors().len());
    }

    #[test]
    fn permuting_sentences_permutes_outputs() {
        let params = EncoderParams::<f64>::init(config()).unwrap();
        let (sents, refs) = batch();
        let out = run(&params, &sents, &refs, None);
        let swapped = vec![sents[1].clone(), sents[0].clone()];
        let swapped_refs: Vec<SpanRef> = refs
            .iter()
            .map(|r| SpanRef {
                sentence: 1 - r.sentence,
                span: r.span,
            })
            .collect();
        let out2 = run(&params, &swapped, &swapped_refs, None);
        for i in 0..refs.len() {
            assert_eq!(out.probs.row(i), out2.probs.row(i));
            assert_eq!(out.zeta.row(i), out2.zeta.row(i));
        }
    }

    #[test]
    fn overlong_span_rejected() {
        let params = EncoderParams::<f64>::init(config()).unwrap();
        let refs = [SpanRef {
            sentence: 0,
            span: Span::new(0, 3),
        }];
        let toks = [1usize, 2, 3, 4];
        let err = infer(&params, &[&toks[..]], &refs).unwrap_err();
        assert!(matches!(err, Error::Span(_)), "{err}");
    }

    #[test]
    fn checkpoint_reload_is_bit_exact() {
        let params = EncoderParams::<f64>::init(config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        params.save(&path).unwrap();
        let back = EncoderParams::<f64>::load(&path).unwrap();
        assert_eq!(back, params);
        let (sents, refs) = batch();
        assert_eq!(
            run(&params, &sents, &refs, None).zeta,
            run(&back, &sents, &refs, None).zeta
        );
    }

    #[test]
    fn f32_encoder_runs() {
        let params = EncoderParams::<f32>::init(config()).unwrap();
        let toks = [1usize, 2, 3];
        let refs = [SpanRef {
            sentence: 0,
            span: Span::new(0, 1),
        }];
        let out = infer(&params, &[&toks[..]], &refs).unwrap();
        assert!((out.probs.row(0).iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }

    fn probs(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn decode_all_outside_is_empty() {
        let spans = [Span::new(0, 0), Span::new(0, 1)];
        let p = probs(&[&[0.9, 0.1], &[0.6, 0.4]]);
        assert!(decode_spans(&spans, &p, ThresholdPolicy::Argmax).is_empty());
    }

    #[test]
    fn decode_keeps_more_confident_overlap() {
        let spans = [Span::new(0, 1), Span::new(1, 2)];
        let p = probs(&[&[0.1, 0.8, 0.1], &[0.05, 0.05, 0.9]]);
        assert_eq!(
            decode_spans(&spans, &p, ThresholdPolicy::Argmax),
            vec![GoldSpan::new(1, 2, 2)]
        );
    }

    #[test]
    fn decode_ties_prefer_earlier_then_shorter() {
        let spans = [Span::new(1, 2), Span::new(0, 1), Span::new(0, 0)];
        let p = probs(&[&[0.2, 0.8], &[0.2, 0.8], &[0.2, 0.8]]);
        assert_eq!(
            decode_spans(&spans, &p, ThresholdPolicy::Argmax),
            vec![GoldSpan::new(0, 0, 1), GoldSpan::new(1, 2, 1)]
        );
    }

    #[test]
    fn decode_single_token_entity() {
        let p = probs(&[&[0.1, 0.9]]);
        assert_eq!(
            decode_spans(&[Span::new(0, 0)], &p, ThresholdPolicy::Argmax),
            vec![GoldSpan::new(0, 0, 1)]
        );
        assert!(decode_spans(&[Span::new(0, 0)], &p, ThresholdPolicy::MinConfidence(0.95)).is_empty());
    }

    #[test]
    fn predict_batch_matches_single() {
        let params = EncoderParams::<f64>::init(config()).unwrap();
        let (sents, _) = batch();
        let views: Vec<&[usize]> = sents.iter().map(Vec::as_slice).collect();
        let all = predict_batch(&params, &views, None, ThresholdPolicy::Argmax).unwrap();
        for (s, p) in views.iter().zip(&all) {
            assert_eq!(&predict(&params, s, None, ThresholdPolicy::Argmax).unwrap(), p);
        }
    }
}
