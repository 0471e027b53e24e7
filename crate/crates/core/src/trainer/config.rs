//! Training configuration (one flat TOML table) and ablation modes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, NegativeSampling};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::math::{Activation, AdamWConfig};
use crate::objectives::{ContrastiveConfig, LossMode};

/// Training variant: the full method or one of its ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// All four losses, prototype refinement with automatic margins.
    Contproto,
    /// Source plus target cross-entropy on fixed teacher labels.
    Vanilla,
    /// All four losses, no prototypes.
    NoProto,
    /// Cross-entropy only, no prototypes (same trajectory as `Vanilla`).
    NoProtoNoCl,
    /// No consistency term; prototypes on.
    NoReg,
    /// Prototypes with every entity margin fixed at `fixed_margin`.
    FixedMargin,
    /// Cross-entropy only; prototypes built from normalized `z` instead of `ζ`.
    ProtoNoCl,
}

/// Learning-rate schedule over a training phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Decays linearly from `lr` towards 0 over the phase.
    #[default]
    Linear,
}

/// Which vectors feed prototypes and refinement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProtoSource {
    Projected,
    /// L2-normalized span representation before the projection head.
    NormalizedSpan,
}

impl TrainMode {
    pub const ALL: [TrainMode; 7] = [
        TrainMode::Contproto,
        TrainMode::Vanilla,
        TrainMode::NoProto,
        TrainMode::NoProtoNoCl,
        TrainMode::NoReg,
        TrainMode::FixedMargin,
        TrainMode::ProtoNoCl,
    ];

    pub fn loss_mode(self) -> LossMode {
        match self {
            TrainMode::Contproto | TrainMode::NoProto | TrainMode::FixedMargin => LossMode::Contproto,
            TrainMode::Vanilla => LossMode::Vanilla,
            TrainMode::NoProtoNoCl | TrainMode::ProtoNoCl => LossMode::NoCont,
            TrainMode::NoReg => LossMode::NoReg,
        }
    }

    pub fn prototypes(self) -> Option<ProtoSource> {
        match self {
            TrainMode::Contproto | TrainMode::NoReg | TrainMode::FixedMargin => Some(ProtoSource::Projected),
            TrainMode::ProtoNoCl => Some(ProtoSource::NormalizedSpan),
            TrainMode::Vanilla | TrainMode::NoProto | TrainMode::NoProtoNoCl => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Contproto => "contproto",
            TrainMode::Vanilla => "vanilla",
            TrainMode::NoProto => "no_proto",
            TrainMode::NoProtoNoCl => "no_proto_no_cl",
            TrainMode::NoReg => "no_reg",
            TrainMode::FixedMargin => "fixed_margin",
            TrainMode::ProtoNoCl => "proto_no_cl",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = TrainMode::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown mode {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Margin used by `fixed_margin` mode.
    pub fixed_margin: f64,
    pub epochs: usize,
    pub teacher_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub include_outside_anchors: bool,
    pub dropout: f64,
    pub word_dropout: f64,
    /// Longest enumerated span.
    pub max_span_len: usize,
    /// Negatives per gold source span; absent means every negative.
    pub neg_ratio: Option<usize>,
    pub d_tok: usize,
    pub d_h: usize,
    pub layers: usize,
    pub window: usize,
    pub d_len: usize,
    pub d_proj_hidden: usize,
    pub d_proj: usize,
    pub max_positions: usize,
    /// Start the student from the teacher's weights instead of fresh ones.
    pub warm_start: bool,
    /// Add word-shape embeddings when the dataset provides shapes.
    pub shape_features: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        Self {
            mode: TrainMode::Contproto,
            fixed_margin: 1.0,
            epochs: 10,
            teacher_epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            lr_schedule: LrSchedule::Linear,
            weight_decay: 0.01,
            alpha: 0.99,
            beta: 0.95,
            temperature: 0.07,
            include_outside_anchors: true,
            dropout: enc.dropout,
            word_dropout: enc.word_dropout,
            max_span_len: enc.max_span_len,
            neg_ratio: None,
            d_tok: enc.d_tok,
            d_h: enc.d_h,
            layers: enc.layers,
            window: enc.window,
            d_len: enc.d_len,
            d_proj_hidden: enc.d_proj_hidden,
            d_proj: enc.d_proj,
            max_positions: enc.max_positions,
            warm_start: false,
            shape_features: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.teacher_epochs == 0 || self.batch_size == 0 {
            return bad("epochs, teacher_epochs and batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.mode == TrainMode::FixedMargin && !self.fixed_margin.is_finite() {
            return bad("fixed_margin must be finite".into());
        }
        self.encoder_base(1, 2, Vec::new()).validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn encoder_config(&self, ds: &Dataset) -> EncoderConfig {
        let shapes = if self.shape_features {
            ds.token_shapes.clone()
        } else {
            Vec::new()
        };
        self.encoder_base(ds.vocab_size, ds.labels.num_classes(), shapes)
    }

    fn encoder_base(&self, vocab_size: usize, num_classes: usize, token_shapes: Vec<usize>) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            num_classes,
            max_positions: self.max_positions,
            d_tok: self.d_tok,
            d_h: self.d_h,
            layers: self.layers,
            window: self.window,
            activation: Activation::Tanh,
            dropout: self.dropout,
            word_dropout: self.word_dropout,
            max_span_len: self.max_span_len,
            d_len: self.d_len,
            d_proj_hidden: self.d_proj_hidden,
            d_proj: self.d_proj,
            init_seed: 0,
            token_shapes,
        }
    }

    /// Optimizer settings for step `step` of a phase lasting `total` steps.
    pub fn optimizer(&self, step: u64, total: u64) -> AdamWConfig {
        let lr = match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Linear => self.lr * (1.0 - step.min(total) as f64 / total.max(1) as f64),
        };
        AdamWConfig {
            lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.temperature,
            include_outside_anchors: self.include_outside_anchors,
        }
    }

    pub fn negatives(&self) -> NegativeSampling {
        self.neg_ratio
            .map_or(NegativeSampling::All, NegativeSampling::PerPositive)
    }

    /// Identifier written into every metrics record.
    pub fn run_id(&self) -> String {
        format!("{}-seed{}", self.mode, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = TrainConfig {
            mode: TrainMode::FixedMargin,
            neg_ratio: Some(3),
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            TrainConfig::from_toml("epochs = 3\nlearning_rate = 0.1\n"),
            Err(Error::Toml(_))
        ));
    }

    #[test]
    fn partial_file_takes_defaults() {
        let cfg = TrainConfig::from_toml("mode = \"no_reg\"\nseed = 4\n").unwrap();
        assert_eq!(cfg.mode, TrainMode::NoReg);
        assert_eq!(cfg.alpha, 0.99);
        assert_eq!(cfg.beta, 0.95);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.epochs, 10);
    }

    #[test]
    fn mode_names_parse() {
        for m in TrainMode::ALL {
            assert_eq!(m.name().parse::<TrainMode>().unwrap(), m);
        }
        assert!("bogus".parse::<TrainMode>().is_err());
    }

    #[test]
    fn mode_contracts() {
        assert_eq!(TrainMode::Vanilla.loss_mode(), LossMode::Vanilla);
        assert_eq!(TrainMode::NoReg.loss_mode(), LossMode::NoReg);
        assert_eq!(TrainMode::ProtoNoCl.prototypes(), Some(ProtoSource::NormalizedSpan));
        assert!(TrainMode::NoProto.prototypes().is_none());
        assert!(!TrainMode::NoProtoNoCl.loss_mode().dual_pass());
    }
}
