//! Central-difference gradient verification.
//!
//! Runs at 64-bit precision: the analytic gradient from one backward pass
//! is compared coordinate by coordinate against (f(p+h) - f(p-h)) / 2h.

use super::{Element, Tape, Tensor, Var};
use crate::error::Result;

/// One disagreeing (or worst) coordinate.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    /// Index into the parameter list handed to [`grad_check`].
    pub param: usize,
    /// Flat coordinate inside that parameter.
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<GradCheckEntry>,
    /// Coordinates whose relative error exceeded the tolerance.
    pub failures: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Relative error with an absolute floor so near-zero gradients do not
/// amplify rounding noise.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Compare analytic gradients of a scalar function against central
/// differences, for every coordinate of every parameter.
///
/// `build_loss` must be a pure function of the parameter leaves it is
/// given: it is re-invoked on perturbed copies, so any state it closes
/// over must stay fixed.
pub fn grad_check<F>(build_loss: F, params: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = build_loss(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            tape.grad(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed
            .iter()
            .map(|p| tape.leaf(p.clone(), false))
            .collect();
        let loss = build_loss(&mut tape, &vars)?;
        Ok(tape.value(loss).item()?.as_f64())
    };

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        failures: Vec::new(),
        tol,
    };
    for pi in 0..params.len() {
        for ci in 0..params[pi].numel() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let f_plus = eval(&work)?;
            work[pi].data_mut()[ci] = orig - h;
            let f_minus = eval(&work)?;
            work[pi].data_mut()[ci] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[pi][ci];
            let err = rel_err(a, numeric);
            let entry = GradCheckEntry {
                param: pi,
                coord: ci,
                analytic: a,
                numeric,
                rel_err: err,
            };
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(entry.clone());
            }
            if err > tol {
                report.failures.push(entry);
            }
        }
    }
    Ok(report)
}

/// Default step size for central differences.
pub const DEFAULT_H: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_rounding() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let sq = tape.mul(vars[0], vars[0])?;
                Ok(tape.sum_all(sq))
            },
            &[x],
            DEFAULT_H,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-8);
    }

    #[test]
    fn abs_away_from_kink_passes() {
        let x = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let a = tape.abs(vars[0]);
                Ok(tape.sum_all(a))
            },
            &[x],
            DEFAULT_H,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn truncation_error_fails_a_tight_tolerance() {
        // softmax has a nonzero third derivative, so a coarse step leaves
        // visible central-difference truncation error; an absurdly tight
        // tolerance must surface it as a failure naming the coordinate.
        let x = Tensor::new(vec![2], vec![0.3, -0.6]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let y = tape.softmax_axis(vars[0], 0)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            },
            &[x],
            1e-1,
            1e-14,
        )
        .unwrap();
        assert!(!report.passed());
        let worst = report.worst.unwrap();
        assert_eq!(worst.param, 0);
        assert!(worst.coord < 2);
    }
}
