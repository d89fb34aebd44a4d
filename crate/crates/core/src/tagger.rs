//! Mention tagger: boundary projections, biaffine span vectors, the four
//! detection heads and candidate generation.

use rand::Rng;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::Mlp;
use crate::params::{glorot, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Lower bound, in log space, on the product of entity probabilities over a
/// span.
pub const SPAN_LOG_FLOOR: f64 = -50.0;

#[derive(Clone, Debug)]
pub struct MentionTagger {
    pub start_proj: Mlp,
    pub end_proj: Mlp,
    pub start_point: Mlp,
    pub end_point: Mlp,
    pub entity: Mlp,
    /// `[d_low, d_span * d_low]`; channel `c` occupies columns `c*d_low..(c+1)*d_low`.
    pub span_bilinear: ParamId,
    pub span_start: ParamId,
    pub span_end: ParamId,
    pub span_bias: ParamId,
    pub mention: Mlp,
    pub d_low: usize,
    pub d_span: usize,
}

/// Low-dimensional start and end representations, `[n, d_low]` each.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryProjections {
    pub start: Var,
    pub end: Var,
}

impl MentionTagger {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: &ModelConfig) -> Self {
        let (d, dl, ds, dh) = (config.d_model, config.d_low, config.d_span, config.d_hidden);
        let bil_limit = (6.0 / (dl * dl + ds) as f64).sqrt();
        let bil = Tensor::from_fn(&[dl, ds * dl], |_| rng.random_range(-bil_limit..=bil_limit));
        MentionTagger {
            start_proj: Mlp::new(store, rng, "tagger.start_proj", d, dl, dl),
            end_proj: Mlp::new(store, rng, "tagger.end_proj", d, dl, dl),
            start_point: Mlp::new(store, rng, "tagger.start_point", dl, dh, 2),
            end_point: Mlp::new(store, rng, "tagger.end_point", dl, dh, 2),
            entity: Mlp::new(store, rng, "tagger.entity", d, dh, 2),
            span_bilinear: store.add("tagger.span.bilinear", bil),
            span_start: store.add("tagger.span.start", glorot(rng, dl, ds)),
            span_end: store.add("tagger.span.end", glorot(rng, dl, ds)),
            span_bias: store.add("tagger.span.bias", Tensor::zeros(&[ds])),
            mention: Mlp::new(store, rng, "tagger.mention", ds, dh, 2),
            d_low: dl,
            d_span: ds,
        }
    }

    /// `h_start = MLP_start(R)`, `h_end = MLP_end(R)` over real tokens.
    pub fn project_boundaries(&self, tape: &mut Tape, tokens: Var) -> Result<BoundaryProjections> {
        Ok(BoundaryProjections {
            start: self.start_proj.forward(tape, tokens)?,
            end: self.end_proj.forward(tape, tokens)?,
        })
    }

    /// Span vectors `h_s(i)^T U h_e(j) + h_s(i) u_start + h_e(j) u_end + b`
    /// for every `(i, j)` in `spans`; `[spans, d_span]`.
    pub fn biaffine_span_scores(
        &self,
        tape: &mut Tape,
        proj: &BoundaryProjections,
        spans: &[(usize, usize)],
    ) -> Result<Var> {
        let u = tape.param(self.span_bilinear);
        let us = tape.param(self.span_start);
        let ue = tape.param(self.span_end);
        let b = tape.param(self.span_bias);
        let left = tape.matmul(proj.start, u)?;
        let bilinear = tape.span_bilinear(left, proj.end, spans)?;
        let starts: Vec<usize> = spans.iter().map(|s| s.0).collect();
        let ends: Vec<usize> = spans.iter().map(|s| s.1).collect();
        let lin_s = tape.matmul(proj.start, us)?;
        let lin_s = tape.gather_rows(lin_s, &starts)?;
        let lin_e = tape.matmul(proj.end, ue)?;
        let lin_e = tape.gather_rows(lin_e, &ends)?;
        let s = tape.add(bilinear, lin_s)?;
        let s = tape.add(s, lin_e)?;
        tape.add_bias(s, b)
    }

    /// Start and end logits, `[n, 2]` each.
    pub fn start_end_logits(&self, tape: &mut Tape, proj: &BoundaryProjections) -> Result<(Var, Var)> {
        Ok((
            self.start_point.forward(tape, proj.start)?,
            self.end_point.forward(tape, proj.end)?,
        ))
    }

    /// Entity-token logits, `[n, 2]`.
    pub fn entity_logits(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        self.entity.forward(tape, tokens)
    }

    /// Span-level gate `prod_{k=i..=j} P(token k is inside an entity)` from
    /// entity logits; computed in log space and floored at `exp(-50)`.
    pub fn span_gate(&self, tape: &mut Tape, entity_logits: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let lp = tape.log_softmax(entity_logits)?;
        let pos = tape.select_col(lp, 1)?;
        tape.span_log_product(pos, spans, SPAN_LOG_FLOOR)
    }

    /// Mention logits `MLP(S * g)`, `[spans, 2]`. Without a gate the span
    /// vectors go in unscaled.
    pub fn mention_logits(&self, tape: &mut Tape, scores: Var, gate: Option<Var>) -> Result<Var> {
        let x = match gate {
            Some(g) => tape.scale_rows(scores, g)?,
            None => scores,
        };
        self.mention.forward(tape, x)
    }
}

/// Positive-class probabilities from `[m, 2]` logits.
pub fn positive_probs(logits: &Tensor) -> Vec<f64> {
    (0..logits.outer())
        .map(|r| {
            let row = logits.row(r);
            1.0 / (1.0 + (row[0] - row[1]).exp())
        })
        .collect()
}

/// A thresholded mention candidate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MentionCandidate {
    pub start: usize,
    pub end: usize,
    pub p_mention: f64,
}

/// Candidates sorted by `(start, end)` without duplicates.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MentionCandidateSet {
    pub candidates: Vec<MentionCandidate>,
}

impl MentionCandidateSet {
    pub fn spans(&self) -> Vec<(usize, usize)> {
        self.candidates.iter().map(|c| (c.start, c.end)).collect()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Keeps every span with `p_mention >= tau`. `forced` spans (gold mentions
/// during training) are added regardless of probability.
pub fn generate_candidates(
    spans: &[(usize, usize)],
    p_mention: &[f64],
    tau: f64,
    forced: &[(usize, usize)],
) -> MentionCandidateSet {
    let mut out: Vec<MentionCandidate> = spans
        .iter()
        .zip(p_mention)
        .filter(|(_, &p)| p >= tau)
        .map(|(&(start, end), &p)| MentionCandidate {
            start,
            end,
            p_mention: p,
        })
        .collect();
    for &(start, end) in forced {
        if !out.iter().any(|c| (c.start, c.end) == (start, end)) {
            let p = spans
                .iter()
                .position(|&s| s == (start, end))
                .map_or(0.0, |i| p_mention[i]);
            out.push(MentionCandidate {
                start,
                end,
                p_mention: p,
            });
        }
    }
    out.sort_by_key(|c| (c.start, c.end));
    MentionCandidateSet { candidates: out }
}

/// Spans pairing a token with `p_start >= tau` and a later-or-equal token with
/// `p_end >= tau`, at most `max_span_len` long. The reported probability is
/// `p_start * p_end`.
pub fn start_end_candidates(
    p_start: &[f64],
    p_end: &[f64],
    tau: f64,
    max_span_len: usize,
    forced: &[(usize, usize)],
) -> MentionCandidateSet {
    let n = p_start.len();
    let mut spans = Vec::new();
    let mut probs = Vec::new();
    for i in (0..n).filter(|&i| p_start[i] >= tau) {
        for j in (i..n.min(i + max_span_len)).filter(|&j| p_end[j] >= tau) {
            spans.push((i, j));
            probs.push(p_start[i] * p_end[j]);
        }
    }
    generate_candidates(&spans, &probs, 0.0, forced)
}
