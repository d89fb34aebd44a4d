//! Type classifier: two-level attention over a position-fused sequence and the
//! four-level candidate representation.
//!
//! Attention is evaluated lazily: queries, keys and values are projected once
//! per sentence, and for each candidate only the four rows the representation
//! reads (start, end, previous, next) are attended.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::mask::{MaskKind, MaskMatrix};
use crate::nn::{AttentionBlock, AttentionInputs, Embedding, Linear, Mlp};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TypeClassifier {
    pub position: Embedding,
    pub position_fuse: Linear,
    pub mention_block: AttentionBlock,
    pub neighbor_block: AttentionBlock,
    pub sentence_level: Linear,
    pub position_level: Linear,
    pub mention_level: Linear,
    pub neighbor_level: Linear,
    pub fusion: Linear,
    pub type_head: Mlp,
    pub neighbor_window: usize,
    pub two_level: bool,
    pub neighbor: bool,
    d_model: usize,
}

/// Per-sentence state shared by every candidate.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierContext {
    /// Real tokens in the sentence.
    pub n: usize,
    /// `H = Linear([R; P])`, `[n + 2, d_model]`.
    pub h: Var,
    pub mention: AttentionInputs,
    pub neighbor: AttentionInputs,
    /// `E_sentence`, `[1, d_model]`.
    pub sentence: Var,
}

/// Two-level attention rows for a batch of candidates. Row `2c` / `2c + 1`
/// of `mention` hold candidate `c`'s start / end rows; the same rows of
/// `neighbor` hold its previous / next rows.
#[derive(Clone, Copy, Debug)]
pub struct TwoLevelRows {
    pub mention: Var,
    pub neighbor: Var,
}

/// The four component vectors and their fusion `T`, one row per candidate.
#[derive(Clone, Copy, Debug)]
pub struct CandidateRepresentation {
    pub sentence: Var,
    pub position: Var,
    pub mention: Var,
    pub neighbor: Var,
    pub fused: Var,
}

impl TypeClassifier {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: &ModelConfig) -> Self {
        let d = config.d_model;
        let heads = config.effective_heads();
        TypeClassifier {
            position: Embedding::new(store, rng, "typer.position", config.max_len + 2, d, 0.1),
            position_fuse: Linear::new(store, rng, "typer.position_fuse", 2 * d, d),
            mention_block: AttentionBlock::new(store, rng, "typer.mention_att", d, heads),
            neighbor_block: AttentionBlock::new(store, rng, "typer.neighbor_att", d, heads),
            sentence_level: Linear::new(store, rng, "typer.e_sentence", 2 * d, d),
            position_level: Linear::new(store, rng, "typer.e_position", 2 * d, d),
            mention_level: Linear::new(store, rng, "typer.e_mention", 2 * d, d),
            neighbor_level: Linear::new(store, rng, "typer.e_neighbor", 2 * d, d),
            fusion: Linear::new(store, rng, "typer.fusion", 4 * d, d),
            type_head: Mlp::new(store, rng, "typer.type", d, config.d_hidden, config.num_classes()),
            neighbor_window: config.neighbor_window,
            two_level: config.ablation.two_level_attention,
            neighbor: config.ablation.neighbor_attention,
            d_model: d,
        }
    }

    /// Builds `H`, the attention projections and `E_sentence` from the
    /// dual-info output `r` (`[n + 2, d_model]`, sentinels included).
    pub fn prepare(&self, tape: &mut Tape, r: Var) -> Result<ClassifierContext> {
        let len = tape.value(r).shape()[0];
        let positions: Vec<usize> = (0..len).collect();
        let p = self.position.forward(tape, &positions)?;
        let rp = tape.concat(&[r, p])?;
        let h = self.position_fuse.forward(tape, rp)?;
        let mention = self.mention_block.project(tape, h)?;
        let neighbor = self.neighbor_block.project(tape, h)?;
        let first = tape.gather_rows(r, &[0])?;
        let last = tape.gather_rows(r, &[len - 1])?;
        let both = tape.concat(&[first, last])?;
        let sentence = self.sentence_level.forward(tape, both)?;
        Ok(ClassifierContext {
            n: len - 2,
            h,
            mention,
            neighbor,
            sentence,
        })
    }

    fn check_spans(n: usize, spans: &[(usize, usize)]) -> Result<()> {
        if let Some(&(l, r)) = spans.iter().find(|&&(l, r)| l > r || r >= n) {
            return Err(Error::Contract(format!(
                "span ({l}, {r}) outside sentence of length {n}"
            )));
        }
        Ok(())
    }

    /// Full mention-level and neighbor-level attention blocks for one span,
    /// `[n + 2, d_model]` each.
    pub fn two_level_attention(
        &self,
        tape: &mut Tape,
        ctx: &ClassifierContext,
        span: (usize, usize),
    ) -> Result<(Var, Var)> {
        Self::check_spans(ctx.n, &[span])?;
        let mm = MaskMatrix::mention(ctx.n, span.0, span.1)?;
        let nm = MaskMatrix::neighbor(ctx.n, span.0, span.1, self.neighbor_window)?;
        let m = self.mention_block.forward(tape, ctx.h, &mm)?;
        let nb = self.neighbor_block.forward(tape, ctx.h, &nm)?;
        Ok((m.output, nb.output))
    }

    /// Only the attention rows the representation needs, for every span.
    pub fn two_level_rows(
        &self,
        tape: &mut Tape,
        ctx: &ClassifierContext,
        spans: &[(usize, usize)],
    ) -> Result<TwoLevelRows> {
        Self::check_spans(ctx.n, spans)?;
        let mut mention_rows = Vec::with_capacity(2 * spans.len());
        let mut neighbor_rows = Vec::with_capacity(2 * spans.len());
        let mut mention_mask = Vec::with_capacity(2 * spans.len());
        let mut neighbor_mask = Vec::with_capacity(2 * spans.len());
        for &(l, r) in spans {
            // sequence positions are shifted by the BEGIN sentinel
            mention_rows.extend([l + 1, r + 1]);
            neighbor_rows.extend([l, r + 2]);
            let mrow = MaskMatrix::mention_row(ctx.n, l, r);
            let nrow = MaskMatrix::neighbor_row(ctx.n, l, r, self.neighbor_window);
            mention_mask.extend([mrow.clone(), mrow]);
            neighbor_mask.extend([nrow.clone(), nrow]);
        }
        let mm = MaskMatrix::from_rows(MaskKind::Mention, &mention_mask)?;
        let nm = MaskMatrix::from_rows(MaskKind::Neighbor, &neighbor_mask)?;
        let mention = self
            .mention_block
            .forward_rows(tape, &ctx.mention, &mention_rows, &mm)?
            .output;
        let neighbor = self
            .neighbor_block
            .forward_rows(tape, &ctx.neighbor, &neighbor_rows, &nm)?
            .output;
        Ok(TwoLevelRows { mention, neighbor })
    }

    fn pair_rows(tape: &mut Tape, rows: Var, count: usize) -> Result<Var> {
        let even: Vec<usize> = (0..count).map(|c| 2 * c).collect();
        let odd: Vec<usize> = (0..count).map(|c| 2 * c + 1).collect();
        let a = tape.gather_rows(rows, &even)?;
        let b = tape.gather_rows(rows, &odd)?;
        tape.concat(&[a, b])
    }

    /// `E_sentence`, `E_position`, `E_mention`, `E_neighbor` and their fusion.
    pub fn four_level_representation(
        &self,
        tape: &mut Tape,
        ctx: &ClassifierContext,
        spans: &[(usize, usize)],
    ) -> Result<CandidateRepresentation> {
        Self::check_spans(ctx.n, spans)?;
        let c = spans.len();
        let sentence = tape.gather_rows(ctx.sentence, &vec![0; c])?;
        let bounds: Vec<usize> = spans.iter().flat_map(|&(l, r)| [l + 1, r + 1]).collect();
        let hb = tape.gather_rows(ctx.h, &bounds)?;
        let hb = Self::pair_rows(tape, hb, c)?;
        let position = self.position_level.forward(tape, hb)?;
        let zeros = |tape: &mut Tape| tape.constant(Tensor::zeros(&[c, self.d_model]));
        let (mention, neighbor) = if self.two_level {
            let rows = self.two_level_rows(tape, ctx, spans)?;
            let m = Self::pair_rows(tape, rows.mention, c)?;
            let mention = self.mention_level.forward(tape, m)?;
            let neighbor = if self.neighbor {
                let nb = Self::pair_rows(tape, rows.neighbor, c)?;
                self.neighbor_level.forward(tape, nb)?
            } else {
                zeros(tape)
            };
            (mention, neighbor)
        } else {
            (zeros(tape), zeros(tape))
        };
        let all = tape.concat(&[sentence, position, mention, neighbor])?;
        let fused = self.fusion.forward(tape, all)?;
        Ok(CandidateRepresentation {
            sentence,
            position,
            mention,
            neighbor,
            fused,
        })
    }

    /// Type logits `[candidates, num_types + 1]`; class 0 is non-entity.
    pub fn classify(&self, tape: &mut Tape, rep: &CandidateRepresentation) -> Result<Var> {
        self.type_head.forward(tape, rep.fused)
    }
}

/// Row-wise softmax of `[m, c]` logits.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    (0..logits.outer())
        .map(|r| {
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / total).collect()
        })
        .collect()
}
