use crate::error::{Error, Result};

use super::Tensor;

/// Worst relative error per parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub tol: f64,
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    /// Flat element index where the maximum occurs.
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }
}

/// `|a - n| / max(1e-6, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Compares `analytic` gradients of `f` at `params` against central
/// differences `(f(p + h) - f(p - h)) / 2h`, element by element.
pub fn finite_diff_check(
    mut f: impl FnMut(&[Tensor<f64>]) -> Result<f64>,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if params.len() != analytic.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters but {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    let mut work = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        if grad.shape() != params[pi].shape() {
            return Err(Error::Shape {
                op: "finite_diff_check",
                lhs: params[pi].shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let mut worst = ParamCheck {
            index: pi,
            max_rel_error: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in 0..params[pi].numel() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let up = f(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let down = f(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[e];
            let err = relative_error(a, numeric);
            if err > worst.max_rel_error {
                worst = ParamCheck {
                    index: pi,
                    max_rel_error: err,
                    worst_element: e,
                    analytic: a,
                    numeric,
                };
            }
        }
        per_param.push(worst);
    }
    Ok(GradCheckReport { per_param, tol })
}
