//! Central finite-difference checks of tape gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst per-tensor disagreement found by [`check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Name of the tensor with the largest error (`input{i}` or a parameter name).
    pub worst: String,
    /// Scalars compared.
    pub checked: usize,
}

/// `||a - n|| / max(||a|| + ||n||, 1e-6)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    diff / scale.max(1e-6)
}

/// Reduces any tensor to a scalar through a fixed random projection, so that
/// every output coordinate contributes to the checked gradient.
pub fn random_projection<R: Rng>(tape: &mut Tape, x: Var, rng: &mut R) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let w = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let w = tape.constant(w);
    let prod = tape.mul(x, w)?;
    Ok(tape.sum(prod))
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h`, for every input tensor and every parameter the loss reaches.
///
/// `f` receives one leaf per entry of `inputs` and must return a scalar.
pub fn check<F>(params: &ParamStore, inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore, ins: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new(store);
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss);
        if v.numel() != 1 {
            return Err(Error::Contract(format!("checked function returned shape {:?}", v.shape())));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new(params);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let record = |name: String, analytic: &[f64], numeric: &[f64], report: &mut GradCheck| {
        let e = relative_error(analytic, numeric);
        report.checked += analytic.len();
        if e >= report.max_rel_error {
            report.max_rel_error = e;
            report.worst = name;
        }
    };

    let mut shifted = inputs.to_vec();
    for (i, &var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(var)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let x = inputs[i].data()[k];
            shifted[i].data_mut()[k] = x + h;
            let up = eval(params, &shifted)?;
            shifted[i].data_mut()[k] = x - h;
            let down = eval(params, &shifted)?;
            shifted[i].data_mut()[k] = x;
            *slot = (up - down) / (2.0 * h);
        }
        record(format!("input{i}"), &analytic, &numeric, &mut report);
    }

    let mut store = params.clone();
    for id in params.ids() {
        let Some(g) = grads.param(id) else { continue };
        let mut numeric = vec![0.0; g.numel()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let x = params.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = x + h;
            let up = eval(&store, inputs)?;
            store.get_mut(id).data_mut()[k] = x - h;
            let down = eval(&store, inputs)?;
            store.get_mut(id).data_mut()[k] = x;
            *slot = (up - down) / (2.0 * h);
        }
        record(params.name(id).to_string(), g.data(), &numeric, &mut report);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let store = ParamStore::new();
        let x = Tensor::vector(vec![0.3, -1.2, 2.0]);
        let r = check(&store, &[x], 1e-5, |t, v| {
            let sq = t.mul(v[0], v[0])?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn identical_vectors_have_zero_error() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0], &[0.0]) - 1.0).abs() < 1e-15);
    }
}
