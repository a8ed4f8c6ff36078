//! Central-difference gradient checking in 64-bit precision.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Default relative step: `h ≈ DEFAULT_H_SCALE * max(1, |x|)`.
pub const DEFAULT_H_SCALE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    /// max over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// `h_scale * max(1, |x|)` rounded to the nearest power of two, so that
/// `x ± h` and the final division by `2h` add no rounding of their own.
pub fn step_size(x: f64, h_scale: f64) -> f64 {
    let h = h_scale * x.abs().max(1.0);
    2f64.powi(h.log2().round() as i32)
}

/// `(f(x0 + h) - f(x0 - h)) / 2h` with `h = step_size(x0, h_scale)`.
pub fn central_difference(x0: f64, h_scale: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let h = step_size(x0, h_scale);
    let plus = f(x0 + h)?;
    let minus = f(x0 - h)?;
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::Numerics(format!("non-finite function value near x = {x0} (f+ = {plus}, f- = {minus})")));
    }
    Ok((plus - minus) / (2.0 * h))
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.value(out).item()
}

/// Compares the reverse-mode gradient of a scalar function of `inputs`
/// against central differences, coordinate by coordinate.
pub fn finite_diff_gradcheck<F>(f: F, inputs: &[Tensor<f64>], h_scale: f64) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    gradcheck_coords(f, inputs, h_scale, None)
}

/// Like [`finite_diff_gradcheck`] but only probes the listed
/// `(input, element)` coordinates when `coords` is given.
pub fn gradcheck_coords<F>(
    f: F,
    inputs: &[Tensor<f64>],
    h_scale: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).all_finite() {
        return Err(Error::Numerics("non-finite function value".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> =
        vars.iter().map(|&v| g.grad(v).cloned().expect("leaf gradient after backward")).collect();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradcheckReport { max_rel_error: 0.0, worst: (0, 0), checked: 0 };
    if let Some(k) = analytic.iter().position(|g| !g.all_finite()) {
        return Err(Error::Numerics(format!("non-finite analytic gradient for input {k}")));
    }
    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = analytic.iter().enumerate().flat_map(|(k, g)| (0..g.data().len()).map(move |j| (k, j))).collect();
            &all
        }
    };
    for &(k, j) in coords {
        let x0 = inputs[k].data()[j];
        let numeric = central_difference(x0, h_scale, |x| {
            work[k].data_mut()[j] = x;
            evaluate(&f, &work)
        })?;
        work[k].data_mut()[j] = x0;
        let err = relative_error(analytic[k].data()[j], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (k, j);
        }
        report.checked += 1;
    }
    Ok(report)
}
