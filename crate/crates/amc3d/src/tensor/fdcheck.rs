//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, VarId};
use super::{Scalar, Tensor};
use crate::error::{AmcError, Result};

/// Outcome of a finite-difference comparison at one point.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Compares the analytic gradient of `f` wrt `point` against central
/// differences (f(x+h e) - f(x-h e)) / 2h, coordinate by coordinate.
///
/// `f` builds a fresh graph from the leaf it is given and must return a
/// scalar node. Relative error uses max(|analytic|, |numeric|, 1) as scale.
pub fn finite_difference_check<T: Scalar>(
    f: &dyn Fn(&mut Graph<T>, VarId) -> Result<VarId>,
    point: &Tensor<T>,
    step: f64,
    tolerance: f64,
) -> Result<FdReport> {
    if step <= 0.0 {
        return Err(AmcError::Contract("finite-difference step must be > 0".into()));
    }
    let analytic = {
        let mut g = Graph::new();
        let x = g.leaf(point.clone(), true);
        let loss = f(&mut g, x)?;
        if g.value(loss).numel() != 1 {
            return Err(AmcError::Contract(
                "finite_difference_check needs a scalar-valued function".into(),
            ));
        }
        g.backward(loss)?;
        g.grad(x)
    };
    let eval = |t: &Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.leaf(t.clone(), false);
        let loss = f(&mut g, x)?;
        Ok(g.value(loss).item()?.to_f64())
    };
    let mut report = FdReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_index: 0,
        passed: true,
    };
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] = T::from_f64(point.data()[i].to_f64() + step);
        let mut minus = point.clone();
        minus.data_mut()[i] = T::from_f64(point.data()[i].to_f64() - step);
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let a = analytic.data()[i].to_f64();
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1.0);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.max_abs_error = report.max_abs_error.max(abs);
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}
