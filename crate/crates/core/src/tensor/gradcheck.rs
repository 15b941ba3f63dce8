use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate) of the worst disagreement
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Default denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-8;

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central finite-difference check of a scalar function over every input
/// coordinate. Relative error is `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    finite_diff_check_masked(f, inputs, eps, |_, _, _| true)
}

/// As [`finite_diff_check`], checking only coordinates where
/// `include(input, coord, value)` holds (e.g. away from relu kinks).
pub fn finite_diff_check_masked<F, M>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    include: M,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    M: Fn(usize, usize, f64) -> bool,
{
    finite_diff_check_floor(f, inputs, eps, REL_FLOOR, include)
}

/// As [`finite_diff_check_masked`] with an explicit denominator floor:
/// `|a - b| / max(|a|, |b|, floor)`. Central differences of an `O(1)`
/// function carry roughly `1e-16 / eps` of roundoff, so gradients far below
/// that scale can only be compared against a floor above it.
pub fn finite_diff_check_floor<F, M>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    floor: f64,
    include: M,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    M: Fn(usize, usize, f64) -> bool,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Argument(format!("finite-difference eps {eps} outside [1e-7, 1e-3]")));
    }
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.var(t.clone(), true)).collect();
        let out = f(&tape, &vars)?;
        out.backward()?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    };
    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = probe.iter().map(|t| tape.var(t.clone(), false)).collect();
        Ok(f(&tape, &vars)?.value().data()[0])
    };
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, checked: 0 };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for c in 0..input.numel() {
            let x0 = input.data()[c];
            if !include(i, c, x0) {
                continue;
            }
            probe[i].data_mut()[c] = x0 + eps;
            let up = eval(&probe)?;
            probe[i].data_mut()[c] = x0 - eps;
            let down = eval(&probe)?;
            probe[i].data_mut()[c] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let err = rel_err(analytic[i].data()[c], numeric, floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((i, c));
            }
        }
    }
    Ok(report)
}
