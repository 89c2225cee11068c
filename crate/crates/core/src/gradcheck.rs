//! Central finite-difference checks of tape gradients.

use std::fmt;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for relative errors, so coordinates with vanishing
/// gradients are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// Two one-sided slopes disagreeing by more than this (relative) mark a kink.
const KINK_TOL: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub enum GradFailure {
    /// NaN or infinity on the analytic or numeric side.
    NonFinite { input: usize, coord: usize },
    /// Left and right slopes disagree: the function is not differentiable here.
    Kink {
        input: usize,
        coord: usize,
        left: f64,
        right: f64,
    },
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// (input, coordinate) of the largest relative error.
    pub worst: (usize, usize),
    pub coords_checked: usize,
    pub failure: Option<GradFailure>,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.failure.is_none() && self.max_rel_err <= rel_tol
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} coords, max abs err {:.3e}, max rel err {:.3e} at input {} coord {}",
            self.coords_checked, self.max_abs_err, self.max_rel_err, self.worst.0, self.worst.1
        )?;
        if let Some(fail) = &self.failure {
            write!(f, ", FAILED: {fail:?}")?;
        }
        Ok(())
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Checks a single-input scalar function.
pub fn check_gradient<F>(f: F, point: &Tensor, epsilon: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    check_gradients(|tape, xs| f(tape, xs[0]), std::slice::from_ref(point), epsilon, None)
}

/// Checks every coordinate of every input (or the first `max_coords` of each)
/// of a scalar function against fourth-order central differences.
pub fn check_gradients<F>(
    f: F,
    points: &[Tensor],
    epsilon: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let eval = |pts: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = pts.iter().map(|p| tape.leaf(p.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = points.iter().map(|p| tape.leaf(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|&v| grads.get(v)).collect()
    };
    let center = eval(points)?;

    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst: (0, 0),
        coords_checked: 0,
        failure: None,
    };
    let mut probe: Vec<Tensor> = points.to_vec();
    for (input, point) in points.iter().enumerate() {
        let n = max_coords.map_or(point.numel(), |m| m.min(point.numel()));
        for coord in 0..n {
            let x0 = point.data()[coord];
            let mut at = |d: f64| -> Result<f64> {
                probe[input].data_mut()[coord] = x0 + d;
                eval(&probe)
            };
            let (up, down) = (at(epsilon)?, at(-epsilon)?);
            let (up2, down2) = (at(2.0 * epsilon)?, at(-2.0 * epsilon)?);
            probe[input].data_mut()[coord] = x0;

            let numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * epsilon);
            let a = analytic[input].data()[coord];
            report.coords_checked += 1;
            if !numeric.is_finite() || !a.is_finite() {
                report.failure = Some(GradFailure::NonFinite { input, coord });
                return Ok(report);
            }
            let right = (up - center) / epsilon;
            let left = (center - down) / epsilon;
            if (right - left).abs() > KINK_TOL * (1.0 + right.abs() + left.abs()) {
                report.failure = Some(GradFailure::Kink {
                    input,
                    coord,
                    left,
                    right,
                });
                return Ok(report);
            }
            let abs = (a - numeric).abs();
            let rel = rel_err(a, numeric);
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (input, coord);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let report = check_gradient(|_, x| Ok(x.mul(x)?.sum()), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!(report.max_abs_err < 1e-8, "{report}");
        assert!(report.passes(1e-8));
    }

    #[test]
    fn kink_is_reported() {
        let report = check_gradient(|_, x| Ok(x.abs().sum()), &Tensor::scalar(0.0), 1e-5).unwrap();
        assert!(matches!(report.failure, Some(GradFailure::Kink { coord: 0, .. })), "{report}");
        assert!(!report.passes(1.0));
    }

    #[test]
    fn nan_is_reported_with_coordinate() {
        let point = Tensor::new([2], vec![1.0, 0.0]).unwrap();
        let report = check_gradient(|_, x| Ok(x.powf(0.5).sum()), &point, 1e-5).unwrap();
        assert_eq!(report.failure, Some(GradFailure::NonFinite { input: 0, coord: 1 }));
    }

    #[test]
    fn rejects_nonpositive_epsilon() {
        assert!(check_gradient(|_, x| Ok(x.sum()), &Tensor::scalar(1.0), 0.0).is_err());
    }
}
