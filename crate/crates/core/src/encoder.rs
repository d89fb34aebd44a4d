//! Base token encoder and the dual-info attention layer.

use rand::Rng;

use crate::config::ModelConfig;
use crate::data::Sentence;
use crate::error::{Error, Result};
use crate::mask::MaskMatrix;
use crate::nn::{AttentionBlock, Embedding, Linear};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct Encoder {
    pub token: Embedding,
    pub position: Embedding,
    pub blocks: Vec<AttentionBlock>,
    pub global: AttentionBlock,
    pub focus: AttentionBlock,
    pub fuse: Linear,
}

/// Output of one dual-info pass.
#[derive(Clone, Copy, Debug)]
pub struct DualInfo {
    /// Fused representation `R`, `[n + 2, d_model]`.
    pub output: Var,
    pub global_branch: Var,
    pub focus_branch: Var,
    /// Raw attention nodes, for reading weights back.
    pub global_attention: Var,
    pub focus_attention: Var,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: &ModelConfig) -> Self {
        let d = config.d_model;
        let heads = config.effective_heads();
        Encoder {
            token: Embedding::new(store, rng, "encoder.token", config.vocab_size, d, 1.0),
            position: Embedding::sinusoidal(store, "encoder.position", config.max_len + 2, d, 1.0),
            blocks: (0..config.encoder_blocks)
                .map(|i| AttentionBlock::new(store, rng, &format!("encoder.block{i}"), d, config.encoder_heads))
                .collect(),
            global: AttentionBlock::new(store, rng, "dual.global", d, heads),
            focus: AttentionBlock::new(store, rng, "dual.focus", d, heads),
            fuse: Linear::new(store, rng, "dual.fuse", 2 * d, d),
        }
    }

    /// Token plus position embeddings followed by the full-visibility blocks.
    /// Returns `[n + 2, d_model]` including the sentinel rows.
    pub fn encode_base(&self, tape: &mut Tape, sentence: &Sentence) -> Result<Var> {
        let vocab_size = tape.params().get(self.token.table).shape()[0];
        let max_rows = tape.params().get(self.position.table).shape()[0];
        let ids: Vec<usize> = sentence
            .ids()
            .iter()
            .map(|&id| if id < vocab_size { id } else { crate::data::UNK_ID })
            .collect();
        if ids.len() > max_rows {
            return Err(Error::Validation(format!(
                "sentence of {} tokens exceeds max_len {}",
                sentence.len(),
                max_rows - 2
            )));
        }
        let positions: Vec<usize> = (0..ids.len()).collect();
        let tok = self.token.forward(tape, &ids)?;
        let pos = self.position.forward(tape, &positions)?;
        let mut x = tape.add(tok, pos)?;
        let mask = MaskMatrix::global(ids.len());
        for block in &self.blocks {
            x = block.forward(tape, x, &mask)?.output;
        }
        Ok(x)
    }

    /// `Linear([AttBlock(base, global); AttBlock(base, focus)])`.
    pub fn dual_info(
        &self,
        tape: &mut Tape,
        base: Var,
        mask_global: &MaskMatrix,
        mask_focus: &MaskMatrix,
    ) -> Result<DualInfo> {
        let len = tape.value(base).shape()[0];
        for m in [mask_global, mask_focus] {
            if m.rows() != len || m.cols() != len {
                return Err(Error::shape(
                    "dual_info",
                    format!("{}x{} mask for a sequence of {len}", m.rows(), m.cols()),
                ));
            }
        }
        let g = self.global.forward(tape, base, mask_global)?;
        let f = self.focus.forward(tape, base, mask_focus)?;
        let both = tape.concat(&[g.output, f.output])?;
        Ok(DualInfo {
            output: self.fuse.forward(tape, both)?,
            global_branch: g.output,
            focus_branch: f.output,
            global_attention: g.attention,
            focus_attention: f.attention,
        })
    }
}
