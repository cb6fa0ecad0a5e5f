//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::nn::graph::{Graph, Var};
use crate::nn::tensor::Tensor;

/// Default perturbation.
pub const DEFAULT_EPS: f64 = 1e-4;

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Input index and flat coordinate where the maximum occurred.
    pub worst: (usize, usize),
    /// Analytic and numeric derivative at `worst`.
    pub at_worst: (f64, f64),
    pub coordinates: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the tape's gradient of the scalar `f(inputs)` with central
/// differences over every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    grad_check_steps(f, inputs, &[eps])
}

/// Like [`grad_check`], but each coordinate is differenced at every step
/// in `steps` and scored by the closest estimate. A large step can straddle
/// a relu or max-pool kink and a small one loses tiny derivatives to
/// rounding; a wrong analytic gradient disagrees at all of them.
pub fn grad_check_steps<F>(f: F, inputs: &[Tensor<f64>], steps: &[f64]) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    assert!(!steps.is_empty(), "at least one step");
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param_owned(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.data(out)[0])
    };

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        at_worst: (0.0, 0.0),
        coordinates: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for (j, &a) in analytic.iter().enumerate() {
            let x0 = inputs[i].data()[j];
            let mut best = (f64::INFINITY, 0.0);
            for &eps in steps {
                probe[i].data_mut()[j] = x0 + eps;
                let up = eval(&probe)?;
                probe[i].data_mut()[j] = x0 - eps;
                let down = eval(&probe)?;
                let numeric = (up - down) / (2.0 * eps);
                let err = relative_error(a, numeric);
                if err < best.0 {
                    best = (err, numeric);
                }
            }
            probe[i].data_mut()[j] = x0;
            worst.coordinates += 1;
            if best.0 > worst.max_rel_error {
                worst.max_rel_error = best.0;
                worst.worst = (i, j);
                worst.at_worst = (analytic[j], best.1);
            }
        }
    }
    Ok(worst)
}
