use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where the typing stage gets its candidate spans from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    /// Spans whose mention probability clears `tau_mention`.
    Tagger,
    /// Pairs of a likely start token and a likely end token.
    StartEndPairs,
    /// Every enumerable span.
    AllSpans,
}

/// Component switches for ablation runs. The default enables everything.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub entity_detection: bool,
    pub start_end: bool,
    pub focus_attention: bool,
    pub two_level_attention: bool,
    pub neighbor_attention: bool,
    pub candidates: CandidateSource,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            entity_detection: true,
            start_end: true,
            focus_attention: true,
            two_level_attention: true,
            neighbor_attention: true,
            candidates: CandidateSource::Tagger,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Entity types, not counting the non-entity class.
    pub num_types: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub encoder_blocks: usize,
    pub encoder_heads: usize,
    /// Heads of the dual-info and two-level attention blocks; reduced to the
    /// largest divisor of `d_model` not above this value.
    pub heads: usize,
    pub d_low: usize,
    pub d_span: usize,
    pub d_hidden: usize,
    pub window: usize,
    pub tau_ent: f64,
    pub tau_mention: f64,
    pub max_span_len: usize,
    pub neighbor_window: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 0,
            num_types: 0,
            max_len: 128,
            d_model: 128,
            encoder_blocks: 2,
            encoder_heads: 4,
            heads: 16,
            d_low: 84,
            d_span: 128,
            d_hidden: 128,
            window: 2,
            tau_ent: 0.5,
            tau_mention: 0.5,
            max_span_len: 64,
            neighbor_window: 128,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("num_types", self.num_types),
            ("max_len", self.max_len),
            ("d_model", self.d_model),
            ("encoder_heads", self.encoder_heads),
            ("heads", self.heads),
            ("d_low", self.d_low),
            ("d_span", self.d_span),
            ("d_hidden", self.d_hidden),
            ("max_span_len", self.max_span_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size <= crate::data::RESERVED_TOKENS.len() {
            return Err(Error::Config("vocab_size must exceed the 4 reserved ids".into()));
        }
        if self.d_model % self.encoder_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by encoder_heads {}",
                self.d_model, self.encoder_heads
            )));
        }
        for (name, tau) in [("tau_ent", self.tau_ent), ("tau_mention", self.tau_mention)] {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {tau}")));
            }
        }
        Ok(())
    }

    /// Head count actually used by the dual-info and two-level blocks.
    pub fn effective_heads(&self) -> usize {
        (1..=self.heads.min(self.d_model))
            .rev()
            .find(|h| self.d_model % h == 0)
            .unwrap_or(1)
    }

    pub fn num_classes(&self) -> usize {
        self.num_types + 1
    }
}
