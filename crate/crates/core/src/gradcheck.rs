//! Central-difference gradient checking.

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Coordinates sampled per parameter tensor; smaller tensors are checked exhaustively.
    pub max_coords_per_param: usize,
    pub seed: u64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Below this magnitude the absolute error is used instead of the relative one.
    pub small_grad: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            max_coords_per_param: 64,
            seed: 0,
            rel_tol: 1e-5,
            abs_tol: 1e-8,
            small_grad: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_error: f64,
    pub rel_error: f64,
    pub small: bool,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub passed: bool,
    pub checked: usize,
    pub failures: usize,
    /// Max relative error over coordinates judged relatively.
    pub max_rel_error: f64,
    /// Max absolute error over coordinates judged absolutely (tiny gradients).
    pub max_abs_error_small: f64,
    pub worst: Option<CoordCheck>,
}

/// Compares analytic gradients with central differences.
///
/// `loss_fn` maps parameter values to `(loss, gradients)` with one gradient
/// tensor per parameter. It is evaluated twice at the unperturbed point and
/// must return bit-identical losses.
pub fn grad_check<F>(mut loss_fn: F, params: &[Tensor], eps: f64, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("grad_check step {eps} outside [1e-6, 1e-4]")));
    }
    let (base, analytic) = loss_fn(params)?;
    let (again, _) = loss_fn(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Determinism { first: base, second: again });
    }
    if analytic.len() != params.len() {
        return Err(Error::Config(format!(
            "loss function returned {} gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }

    let mut rng = SplitMix64::new(opts.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        passed: true,
        checked: 0,
        failures: 0,
        max_rel_error: 0.0,
        max_abs_error_small: 0.0,
        worst: None,
    };
    let mut worst_score = f64::NEG_INFINITY;

    for (p, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[p].shape() {
            return Err(Error::shape("grad_check", grad.shape(), params[p].shape()));
        }
        let n = params[p].len();
        let coords: Vec<usize> = if n <= opts.max_coords_per_param {
            (0..n).collect()
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut all);
            all.truncate(opts.max_coords_per_param);
            all.sort_unstable();
            all
        };
        for index in coords {
            let orig = params[p].data()[index];
            work[p].data_mut()[index] = orig + eps;
            let (plus, _) = loss_fn(&work)?;
            work[p].data_mut()[index] = orig - eps;
            let (minus, _) = loss_fn(&work)?;
            work[p].data_mut()[index] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[index];
            let abs_error = (a - numeric).abs();
            let magnitude = a.abs().max(numeric.abs());
            let small = magnitude < opts.small_grad;
            let rel_error = if magnitude > 0.0 { abs_error / magnitude } else { 0.0 };
            let passed = if small {
                abs_error < opts.abs_tol
            } else {
                rel_error < opts.rel_tol
            };
            if small {
                report.max_abs_error_small = report.max_abs_error_small.max(abs_error);
            } else {
                report.max_rel_error = report.max_rel_error.max(rel_error);
            }
            let score = if small { abs_error / opts.abs_tol } else { rel_error / opts.rel_tol };
            let check = CoordCheck {
                param: p,
                index,
                analytic: a,
                numeric,
                abs_error,
                rel_error,
                small,
                passed,
            };
            if score > worst_score {
                worst_score = score;
                report.worst = Some(check);
            }
            report.checked += 1;
            if !passed {
                report.failures += 1;
                report.passed = false;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_loss_passes() {
        let p = Tensor::vector(vec![0.5, -1.5, 2.0, 3.25]);
        let f = |ps: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
            let loss = ps[0].data().iter().map(|v| v * v).sum();
            Ok((loss, vec![ps[0].scale(2.0)]))
        };
        let report = grad_check(f, &[p], 1e-5, &GradCheckOptions::default()).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.checked, 4);
    }

    #[test]
    fn unused_parameter_has_exact_zero_gradient() {
        let used = Tensor::vector(vec![1.0, 2.0]);
        let unused = Tensor::vector(vec![3.0]);
        let f = |ps: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
            let loss = ps[0].data().iter().map(|v| v * v * v).sum();
            let g = ps[0].map(|v| 3.0 * v * v);
            Ok((loss, vec![g, Tensor::zeros(ps[1].shape())]))
        };
        let report = grad_check(f, &[used, unused], 1e-5, &GradCheckOptions::default()).unwrap();
        assert!(report.passed);
        assert_eq!(report.max_abs_error_small, 0.0);
    }

    #[test]
    fn wrong_gradient_fails() {
        let p = Tensor::vector(vec![1.0, 2.0]);
        let f = |ps: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
            let loss = ps[0].data().iter().map(|v| v * v).sum();
            Ok((loss, vec![ps[0].scale(2.1)]))
        };
        let report = grad_check(f, &[p], 1e-5, &GradCheckOptions::default()).unwrap();
        assert!(!report.passed);
        assert_eq!(report.failures, 2);
    }

    #[test]
    fn nondeterministic_loss_is_detected() {
        let mut calls = 0.0;
        let f = |ps: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
            calls += 1.0;
            Ok((calls, vec![Tensor::zeros(ps[0].shape())]))
        };
        let err = grad_check(f, &[Tensor::scalar(1.0)], 1e-5, &GradCheckOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Determinism { .. }));
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let f = |ps: &[Tensor]| -> Result<(f64, Vec<Tensor>)> { Ok((0.0, vec![Tensor::zeros(ps[0].shape())])) };
        assert!(grad_check(f, &[Tensor::scalar(1.0)], 1e-3, &GradCheckOptions::default()).is_err());
    }
}
