//! Reference equalizers: the genie-aided LMMSE estimate and the
//! context-free zero predictor.

use crate::error::{Error, Result};
use crate::numerics::{solve_hpd, ComplexMatrix};

/// Estimate produced by a reference method, tagged with its label.
#[derive(Debug, Clone)]
pub struct BaselineResult {
    pub estimate: ComplexMatrix,
    pub method: String,
}

impl BaselineResult {
    pub fn new(method: impl Into<String>, estimate: ComplexMatrix) -> Self {
        BaselineResult {
            estimate,
            method: method.into(),
        }
    }
}

/// Genie-aided linear MMSE estimate `(2 sigma^2 I + H^H H)^{-1} H^H y`.
///
/// Uses the true instantaneous channel and the true noise variance; the
/// quantizer is not modeled. At `sigma2 = 0` the Gram matrix must be
/// invertible, otherwise the solve reports the failing pivot.
pub fn lmmse_estimate(h: &ComplexMatrix, y: &ComplexMatrix, sigma2: f64) -> Result<ComplexMatrix> {
    if y.rows() != h.rows() || y.cols() != 1 {
        return Err(Error::ShapeMismatch {
            context: "lmmse_estimate",
            expected: format!("{} x 1 observation", h.rows()),
            got: format!("{} x {}", y.rows(), y.cols()),
        });
    }
    if !(sigma2 >= 0.0) {
        return Err(Error::contract(format!("sigma2 must be >= 0, got {sigma2}")));
    }
    let hh = h.hermitian();
    let gram = hh.matmul(h);
    let a = gram.add(&ComplexMatrix::identity(h.cols()).scale_re(2.0 * sigma2));
    solve_hpd(&a, &hh.matmul(y))
}

/// Context-free floor: always predicts the zero vector. On unit-power
/// inputs its mean squared error is exactly 1.
pub fn zero_predictor(m1: usize) -> ComplexMatrix {
    ComplexMatrix::zeros(m1, 1)
}
