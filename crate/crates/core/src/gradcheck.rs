//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per parameter tensor, chosen at
    /// random. `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|a - n| / max(1, |a|, |n|)`.
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coords_checked: usize,
}

/// Compares the tape gradient of `f` against central differences.
///
/// `f` receives a fresh tape and one differentiable leaf per entry of
/// `params`, and must return a scalar. It is evaluated twice at the base
/// point first; differing results are reported as
/// [`Error::NonDeterministic`].
pub fn finite_diff_check<F>(f: F, params: &[Tensor], options: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(options.step > 0.0) {
        return Err(Error::invalid("finite_diff_check", "step must be positive"));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let first = tape.value(loss).item();
    let second = eval(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let mut working: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let analytic = grads
            .get(vars[pi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(param.shape().to_vec()));
        let coords: Vec<usize> = match options.max_coords_per_param {
            Some(k) if k < param.len() => {
                let mut c = sample(&mut rng, param.len(), k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..param.len()).collect(),
        };
        for c in coords {
            let mut plus = param.to_vec();
            plus[c] += options.step;
            working[pi] = Tensor::new(param.shape().to_vec(), plus)?;
            let f_plus = eval(&working)?;
            let mut minus = param.to_vec();
            minus[c] -= options.step;
            working[pi] = Tensor::new(param.shape().to_vec(), minus)?;
            let f_minus = eval(&working)?;
            working[pi] = param.clone();

            let numeric = (f_plus - f_minus) / (2.0 * options.step);
            let a = analytic.data()[c];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, c));
            }
        }
    }
    Ok(report)
}

/// Uniform values in `[-1, 1]` for test inputs.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..=1.0))
}
