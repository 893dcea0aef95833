//! Central finite-difference checks against [`Graph::backward`].

use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Step used for every central difference.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Largest analytic gradient magnitude among the sampled coordinates.
    pub max_abs_grad: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Uniform entries in `[-2, 2]`.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-2.0..=2.0)).collect(),
    )
    .unwrap()
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences on `samples` random coordinates spread over all inputs.
pub fn check_gradients<F>(
    inputs: &[Tensor],
    samples: usize,
    rng: &mut impl Rng,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::no_grad();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let total: usize = inputs.iter().map(Tensor::numel).sum();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        max_abs_grad: 0.0,
    };
    let mut work = inputs.to_vec();
    for _ in 0..samples.min(total.max(1)) {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= inputs[which].numel() {
            flat -= inputs[which].numel();
            which += 1;
        }
        let analytic = grads.get(vars[which]).map_or(0.0, |t| t.data()[flat]);
        let orig = work[which].data()[flat];
        work[which].data_mut()[flat] = orig + FD_STEP;
        let up = eval(&work)?;
        work[which].data_mut()[flat] = orig - FD_STEP;
        let down = eval(&work)?;
        work[which].data_mut()[flat] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(relative_error(analytic, numeric));
        report.max_abs_grad = report.max_abs_grad.max(analytic.abs());
    }
    Ok(report)
}
