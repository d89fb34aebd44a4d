//! Parameterised layers built on the tape.

use rand::Rng;

use crate::error::Result;
use crate::mask::MaskMatrix;
use crate::params::{glorot, normal, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, d_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, d_in, d_out));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    /// `x W + b` over the trailing axis.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_hidden: usize,
        d_out: usize,
    ) -> Self {
        Mlp {
            hidden: Linear::new(store, rng, &format!("{name}.hidden"), d_in, d_hidden),
            output: Linear::new(store, rng, &format!("{name}.output"), d_hidden, d_out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.gelu(h);
        self.output.forward(tape, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, rows: usize, dim: usize, std: f64) -> Self {
        Embedding {
            table: store.add(format!("{name}.table"), normal(rng, &[rows, dim], std)),
        }
    }

    /// A position table initialised with sinusoids of geometrically spaced
    /// wavelengths, scaled by `scale`.
    pub fn sinusoidal(store: &mut ParamStore, name: &str, rows: usize, dim: usize, scale: f64) -> Self {
        let table = Tensor::from_fn(&[rows, dim], |k| {
            let (pos, i) = ((k / dim) as f64, k % dim);
            let freq = 1.0 / 10000f64.powf((i / 2 * 2) as f64 / dim as f64);
            scale * if i % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() }
        });
        Embedding {
            table: store.add(format!("{name}.table"), table),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        let t = tape.param(self.table);
        tape.gather_rows(t, ids)
    }
}

/// Queries, keys and values of one attention block for a whole sequence.
#[derive(Clone, Copy, Debug)]
pub struct AttentionInputs {
    pub x: Var,
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

/// Pre-LayerNorm residual attention: `MultiHead(LayerNorm(x), mask) + x`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Result of an attention block together with the raw attention node, whose
/// weights can be read back with [`Tape::attention_weights`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub attention: Var,
}

impl AttentionBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, dim: usize, heads: usize) -> Self {
        AttentionBlock {
            norm: LayerNorm::new(store, &format!("{name}.norm"), dim),
            query: Linear::new(store, rng, &format!("{name}.query"), dim, dim),
            key: Linear::new(store, rng, &format!("{name}.key"), dim, dim),
            value: Linear::new(store, rng, &format!("{name}.value"), dim, dim),
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim),
            heads,
        }
    }

    /// Layer-normalises `x` and projects it to queries, keys and values.
    pub fn project(&self, tape: &mut Tape, x: Var) -> Result<AttentionInputs> {
        let z = self.norm.forward(tape, x)?;
        Ok(AttentionInputs {
            x,
            q: self.query.forward(tape, z)?,
            k: self.key.forward(tape, z)?,
            v: self.value.forward(tape, z)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, mask: &MaskMatrix) -> Result<AttentionOutput> {
        let inputs = self.project(tape, x)?;
        let att = tape.attention(inputs.q, inputs.k, inputs.v, mask, self.heads)?;
        let proj = self.out.forward(tape, att)?;
        Ok(AttentionOutput {
            output: tape.add(proj, x)?,
            attention: att,
        })
    }

    /// The block's output at selected query rows only. `mask` has one row per
    /// entry of `rows`. Equal to gathering those rows from [`Self::forward`].
    pub fn forward_rows(
        &self,
        tape: &mut Tape,
        inputs: &AttentionInputs,
        rows: &[usize],
        mask: &MaskMatrix,
    ) -> Result<AttentionOutput> {
        let q = tape.gather_rows(inputs.q, rows)?;
        let att = tape.attention(q, inputs.k, inputs.v, mask, self.heads)?;
        let proj = self.out.forward(tape, att)?;
        let residual = tape.gather_rows(inputs.x, rows)?;
        Ok(AttentionOutput {
            output: tape.add(proj, residual)?,
            attention: att,
        })
    }
}
