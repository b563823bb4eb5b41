//! Gradient verification against central finite differences.
//!
//! These helpers never call `backward`; they only re-run a forward closure
//! with perturbed parameter values, so they stay independent of the reverse
//! sweep they are used to validate. Only meaningful under [`Precision::F64`].
//!
//! [`Precision::F64`]: super::Precision::F64

use std::rc::Rc;

use super::{Parameter, Tensor};

/// Central finite-difference gradient of `forward` with respect to every
/// element of `param`. The parameter value is restored before returning.
pub fn finite_difference_grad(
    param: &Rc<Parameter>,
    eps: f64,
    mut forward: impl FnMut() -> f64,
) -> Vec<f64> {
    let base = param.value();
    let shape = base.shape().to_vec();
    let data = base.data().to_vec();
    let mut grad = vec![0.0; data.len()];
    for i in 0..data.len() {
        let mut plus = data.clone();
        plus[i] += eps;
        param.set_value(Tensor::new(shape.clone(), plus).expect("finite perturbation"));
        let f_plus = forward();

        let mut minus = data.clone();
        minus[i] -= eps;
        param.set_value(Tensor::new(shape.clone(), minus).expect("finite perturbation"));
        let f_minus = forward();

        grad[i] = (f_plus - f_minus) / (2.0 * eps);
    }
    param.set_value(base);
    grad
}

/// Worst-case elementwise relative error, with magnitudes below 1 compared
/// absolutely.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}
