//! Central finite differences, the oracle for every analytic gradient.

use crate::numerics::tensor::Tensor;

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every coordinate `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Tensor::new(x.shape(), out).expect("same shape as x")
}

/// Largest errors seen while comparing two gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradError {
    pub max_abs: f64,
    /// Largest relative error among elements that failed the absolute test.
    pub max_rel: f64,
}

/// Elementwise comparison: each element passes if its absolute error is
/// below `abs_tol` or its relative error is below `rel_tol`.
pub fn grad_error(analytic: &Tensor, numeric: &Tensor, rel_tol: f64, abs_tol: f64) -> (GradError, bool) {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut err = GradError::default();
    let mut ok = true;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let abs = (a - n).abs();
        err.max_abs = err.max_abs.max(abs);
        if abs <= abs_tol {
            continue;
        }
        let rel = abs / a.abs().max(n.abs());
        err.max_rel = err.max_rel.max(rel);
        if rel > rel_tol || !rel.is_finite() {
            ok = false;
        }
    }
    (err, ok)
}

pub fn grads_close(analytic: &Tensor, numeric: &Tensor, rel_tol: f64, abs_tol: f64) -> Result<(), String> {
    let (err, ok) = grad_error(analytic, numeric, rel_tol, abs_tol);
    if ok {
        Ok(())
    } else {
        Err(format!(
            "gradient mismatch: max abs {:.3e}, max rel {:.3e}\nanalytic {:?}\nnumeric  {:?}",
            err.max_abs,
            err.max_rel,
            analytic.data(),
            numeric.data()
        ))
    }
}
