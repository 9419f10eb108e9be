//! The batch-normalized linear model alpha <x, w> / ||w||_Sigma, its two
//! losses, the empirical risk and the exact analytic gradients.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{BnError, Result};

/// Below this Sigma-norm of w the model is undefined and evaluation fails.
pub const DEGENERATE_NORM: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Logistic,
    Square,
}

impl LossKind {
    /// l(z): log(1 + e^{-z}) or (1 - z)^2 / 2.
    pub fn value(self, z: f64) -> f64 {
        match self {
            LossKind::Logistic => {
                if z > 0.0 {
                    (-z).exp().ln_1p()
                } else {
                    -z + z.exp().ln_1p()
                }
            }
            LossKind::Square => 0.5 * (1.0 - z) * (1.0 - z),
        }
    }

    /// l'(z). The logistic branch only ever exponentiates a nonpositive
    /// argument.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            LossKind::Logistic => {
                if z >= 0.0 {
                    let e = (-z).exp();
                    -e / (1.0 + e)
                } else {
                    -1.0 / (1.0 + z.exp())
                }
            }
            LossKind::Square => z - 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Logistic => "logistic",
            LossKind::Square => "square",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = BnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(LossKind::Logistic),
            "square" => Ok(LossKind::Square),
            other => Err(BnError::Config {
                path: "loss".into(),
                message: format!("unknown loss `{other}` (expected square or logistic)"),
            }),
        }
    }
}

/// The parameter pair (w, alpha) at one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub w: DVector<f64>,
    pub alpha: f64,
}

impl ModelState {
    pub fn new(w: DVector<f64>, alpha: f64) -> Self {
        ModelState { w, alpha }
    }
}

/// Everything one forward/backward pass produces.
#[derive(Debug, Clone)]
pub struct Evaluation {
    /// X~^T w / ||w||_Sigma.
    pub normalized: DVector<f64>,
    /// Signed logits alpha X~^T w / ||w||_Sigma, the arguments of l.
    pub logits: DVector<f64>,
    pub w_sigma_norm: f64,
    pub risk: f64,
    pub grad_w: DVector<f64>,
    pub grad_alpha: f64,
}

pub fn evaluate(state: &ModelState, ds: &Dataset, loss: LossKind) -> Result<Evaluation> {
    if state.w.len() != ds.d() {
        return Err(BnError::DimensionMismatch {
            what: "w",
            expected: ds.d(),
            got: state.w.len(),
        });
    }
    let n = ds.n() as f64;
    let xt = ds.xtilde();
    let proj = xt.tr_mul(&state.w);
    let s = proj.norm() / n.sqrt();
    if !(s > DEGENERATE_NORM) {
        return Err(BnError::Degenerate { norm: s });
    }
    let normalized = &proj / s;
    let logits = &normalized * state.alpha;
    let risk = logits.iter().map(|&z| loss.value(z)).sum::<f64>() / n;
    let lp = logits.map(|z| loss.derivative(z));
    // grad_w = alpha/(n s) (I - Sigma w w^T / s^2) X~ l'
    let g = xt * &lp;
    let sigma_w = xt * &proj / n;
    let wg = state.w.dot(&g);
    let mut grad_w = g;
    grad_w.axpy(-wg / (s * s), &sigma_w, 1.0);
    grad_w *= state.alpha / (n * s);
    let grad_alpha = normalized.dot(&lp) / n;
    Ok(Evaluation {
        normalized,
        logits,
        w_sigma_norm: s,
        risk,
        grad_w,
        grad_alpha,
    })
}

pub fn logits(state: &ModelState, ds: &Dataset) -> Result<DVector<f64>> {
    Ok(evaluate(state, ds, LossKind::Square)?.logits)
}

pub fn risk(state: &ModelState, ds: &Dataset, loss: LossKind) -> Result<f64> {
    Ok(evaluate(state, ds, loss)?.risk)
}

pub fn grad_w(state: &ModelState, ds: &Dataset, loss: LossKind) -> Result<DVector<f64>> {
    Ok(evaluate(state, ds, loss)?.grad_w)
}

pub fn grad_alpha(state: &ModelState, ds: &Dataset, loss: LossKind) -> Result<f64> {
    Ok(evaluate(state, ds, loss)?.grad_alpha)
}

/// (1/n) ||z - 1||^2 over the signed logits. Twice the square-loss risk; this
/// is the quantity the whitened decomposition (alpha - rho)^2 + rho_perp^2 +
/// 1 - ||w_hat||^2 describes.
pub fn mean_squared_residual(state: &ModelState, ds: &Dataset) -> Result<f64> {
    let z = logits(state, ds)?;
    Ok(z.iter().map(|v| (v - 1.0) * (v - 1.0)).sum::<f64>() / ds.n() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_dataset, whiten};
    use approx::assert_relative_eq;

    #[test]
    fn logistic_is_stable() {
        let l = LossKind::Logistic;
        assert_relative_eq!(l.value(0.0), 2f64.ln(), epsilon = 1e-15);
        assert!(l.value(800.0).is_finite() && l.value(800.0) >= 0.0);
        assert_relative_eq!(l.value(-800.0), 800.0, epsilon = 1e-12);
        assert!(l.derivative(-800.0) == -1.0);
        assert!(l.derivative(800.0) <= 0.0 && l.derivative(800.0) > -1e-300);
        assert_relative_eq!(l.derivative(0.0), -0.5, epsilon = 1e-15);
    }

    #[test]
    fn zero_alpha_gives_zero_logits_and_log2() {
        let ds = gen_gaussian_dataset(5, 7, 1).unwrap();
        let st = ModelState::new(DVector::from_element(7, 0.3), 0.0);
        assert_eq!(logits(&st, &ds).unwrap(), DVector::zeros(5));
        assert_relative_eq!(
            risk(&st, &ds, LossKind::Logistic).unwrap(),
            2f64.ln(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn logits_match_scalar_loop() {
        let ds = gen_gaussian_dataset(6, 4, 2).unwrap();
        let w = DVector::from_vec(vec![0.3, -1.0, 0.5, 2.0]);
        let st = ModelState::new(w.clone(), 1.7);
        let z = logits(&st, &ds).unwrap();
        let mut s2 = 0.0;
        for i in 0..6 {
            let xi = ds.x().column(i);
            let v: f64 = (0..4).map(|k| xi[k] * w[k]).sum();
            s2 += v * v;
        }
        let s = (s2 / 6.0).sqrt();
        let mut total = 0.0;
        for i in 0..6 {
            let xi = ds.x().column(i);
            let v: f64 = (0..4).map(|k| xi[k] * w[k]).sum();
            let zi = 1.7 * ds.y()[i] * v / s;
            assert_relative_eq!(z[i], zi, max_relative = 1e-13);
            total += (1.0 + (-zi).exp()).ln();
        }
        assert_relative_eq!(
            risk(&st, &ds, LossKind::Logistic).unwrap(),
            total / 6.0,
            max_relative = 1e-13
        );
    }

    #[test]
    fn degenerate_norm_is_an_error() {
        let ds = gen_gaussian_dataset(3, 4, 1).unwrap();
        let st = ModelState::new(DVector::zeros(4), 1.0);
        assert!(matches!(
            evaluate(&st, &ds, LossKind::Square),
            Err(BnError::Degenerate { .. })
        ));
    }

    #[test]
    fn whitened_square_stationary_points() {
        let ds = whiten(&gen_gaussian_dataset(6, 10, 3).unwrap()).unwrap();
        let w_hat = ds.mu().clone();
        // w parallel to w_hat, alpha = rho = ||w_hat||
        let st = ModelState::new(&w_hat * 2.5, w_hat.norm());
        let ev = evaluate(&st, &ds, LossKind::Square).unwrap();
        assert!(ev.grad_w.norm() < 1e-12);
        assert!(ev.grad_alpha.abs() < 1e-12);
        assert_relative_eq!(ev.risk, 0.5 * (1.0 - w_hat.norm_squared()), epsilon = 1e-12);
        // collinear logits equal <x~_i, w_hat>/||w_hat|| * alpha
        let st1 = ModelState::new(w_hat.clone(), 1.0);
        let z = logits(&st1, &ds).unwrap();
        for i in 0..6 {
            assert_relative_eq!(
                z[i],
                ds.signed_sample(i).dot(&w_hat) / w_hat.norm(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn saturating_alpha_gradient_sign() {
        let ds = gen_gaussian_dataset(4, 8, 5).unwrap();
        let w = crate::data::min_norm_interpolant(&ds).unwrap();
        let st = ModelState::new(w, 40.0);
        let g = grad_alpha(&st, &ds, LossKind::Logistic).unwrap();
        assert!(g < 0.0 && g > -1e-3);
    }
}
