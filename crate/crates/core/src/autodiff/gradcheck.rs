use super::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Checks at most this many coordinates per parameter, spread evenly; `None` checks all.
    pub max_coords: Option<usize>,
    /// Lower bound on the relative-error denominator. Derivatives smaller than
    /// this are effectively compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, max_coords: None, floor: 1e-12 }
    }
}

fn coords(numel: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < numel => (0..m).map(|i| i * numel / m).collect(),
        _ => (0..numel).collect(),
    }
}

/// Maximum relative error between reverse-mode gradients and central differences.
///
/// `f` builds a scalar from leaves bound to `params` (in order). The relative
/// error of one coordinate is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn grad_check<F>(params: &[Tensor<f64>], mut f: F, options: GradCheckOptions) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut eval = |values: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|p| tape.leaf(p.clone().with_requires_grad(with_grad)))
            .collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss).data()[0];
        if !with_grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(loss)?;
        Ok((value, vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect()))
    };

    let (_, analytic) = eval(params, true)?;
    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        let numel = params[p].numel();
        for i in coords(numel, options.max_coords) {
            let original = params[p].data()[i];
            probe[p].data_mut()[i] = original + options.step;
            let (plus, _) = eval(&probe, false)?;
            probe[p].data_mut()[i] = original - options.step;
            let (minus, _) = eval(&probe, false)?;
            probe[p].data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * options.step);
            let a = grad.as_ref().map_or(0.0, |g| g[i]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(options.floor);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
