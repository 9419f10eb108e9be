//! Target directions: the least-squares direction Sigma^+ mu for the square
//! loss and the hard-margin SVM direction for the logistic loss.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{spectrum_bounds, Dataset, EIGEN_CLAMP};
use crate::error::{BnError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    LeastSquares,
    Svm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceDirection {
    pub w_hat: DVector<f64>,
    /// 1 / ||w_hat||.
    pub gamma: f64,
    /// Dual coefficients beta with w_hat = sum_i beta_i y_i x_i, when known.
    pub dual_coeffs: Option<DVector<f64>>,
    pub kind: ReferenceKind,
}

impl ReferenceDirection {
    pub fn norm(&self) -> f64 {
        self.w_hat.norm()
    }
}

/// w_hat = Sigma^+ mu, with the pseudo-inverse taken on span(X).
pub fn least_squares_reference(ds: &Dataset) -> Result<ReferenceDirection> {
    let sb = spectrum_bounds(ds)?;
    if sb.lambda_min <= EIGEN_CLAMP {
        return Err(BnError::Singular {
            eigenvalue: sb.lambda_min,
            clamp: EIGEN_CLAMP,
        });
    }
    let b = &sb.eigenvectors;
    let inv = DMatrix::from_diagonal(&sb.eigenvalues.map(|l| 1.0 / l));
    let w_hat = b * (inv * b.tr_mul(ds.mu()));
    let norm = w_hat.norm();
    if norm == 0.0 {
        return Err(BnError::Precondition(
            "mu is zero; no least-squares direction".into(),
        ));
    }
    Ok(ReferenceDirection {
        gamma: 1.0 / norm,
        w_hat,
        dual_coeffs: None,
        kind: ReferenceKind::LeastSquares,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_dataset, whiten};

    #[test]
    fn whitened_least_squares_is_mu() {
        let ds = whiten(&gen_gaussian_dataset(8, 15, 4).unwrap()).unwrap();
        let r = least_squares_reference(&ds).unwrap();
        assert!((&r.w_hat - ds.mu()).amax() < 1e-12);
        // overparameterized whitened data: ||mu|| = 1
        assert!((r.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn least_squares_solves_normal_equations() {
        let ds = gen_gaussian_dataset(5, 9, 2).unwrap();
        let r = least_squares_reference(&ds).unwrap();
        assert!((ds.sigma() * &r.w_hat - ds.mu()).amax() < 1e-10);
    }
}
