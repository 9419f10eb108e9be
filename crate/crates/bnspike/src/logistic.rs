//! Logistic-loss side: hard-margin SVM reference, margin offset, the
//! constants package of the small-ratio entry theorem, loss and gradient
//! bound evaluators, and the campaign that checks the theorem's clauses.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{column_span, spectrum_bounds, Dataset, SpectrumBounds};
use crate::dynamics::{
    directional_stats, run_trajectory_with, DirectionalStats, Edge, GdConfig, Mode,
};
use crate::error::{BnError, Result};
use crate::linear::{direction_conditions_at, Verdict};
use crate::model::{evaluate, LossKind, ModelState};
use crate::reference::{ReferenceDirection, ReferenceKind};

/// Absolute slack below which a bound counts as violated.
pub const BOUND_SLACK: f64 = 1e-9;

const SVM_MAX_ITERS: usize = 100_000;
const SVM_KKT_TOL: f64 = 1e-8;

fn dual_objective(beta: &DVector<f64>, k: &DMatrix<f64>) -> f64 {
    beta.sum() - 0.5 * beta.dot(&(k * beta))
}

/// KKT residual of the hard-margin dual at beta: |1 - margin| on the
/// support, violated margins elsewhere, and negative coefficients.
pub fn svm_kkt_residual(beta: &DVector<f64>, k: &DMatrix<f64>) -> f64 {
    let g = DVector::from_element(beta.len(), 1.0) - k * beta;
    let mut r = 0.0f64;
    for i in 0..beta.len() {
        let v = if beta[i] > 0.0 {
            g[i].abs()
        } else {
            g[i].max(0.0)
        };
        r = r.max(v).max(-beta[i]);
    }
    r
}

/// Solves K_SS beta_S = 1 on the current support; returns the full beta if
/// it is dual feasible and passes the KKT tolerance.
fn polish_support(beta: &DVector<f64>, k: &DMatrix<f64>) -> Option<DVector<f64>> {
    let support: Vec<usize> = (0..beta.len()).filter(|&i| beta[i] > 0.0).collect();
    if support.is_empty() {
        return None;
    }
    let m = support.len();
    let ks = DMatrix::from_fn(m, m, |a, b| k[(support[a], support[b])]);
    let sol = ks.cholesky()?.solve(&DVector::from_element(m, 1.0));
    if sol.iter().any(|v| *v <= 0.0) {
        return None;
    }
    let mut full = DVector::zeros(beta.len());
    for (a, &i) in support.iter().enumerate() {
        full[i] = sol[a];
    }
    (svm_kkt_residual(&full, k) < SVM_KKT_TOL).then_some(full)
}

/// Hard-margin SVM through its dual, max 1^T beta - |X~ beta|^2 / 2 over
/// beta >= 0, by projected gradient ascent with exact (Cauchy) steps along
/// the projected gradient, finished by solving the KKT system on the
/// identified support.
pub fn solve_svm(ds: &Dataset) -> Result<ReferenceDirection> {
    let xt = ds.xtilde();
    let n = ds.n();
    let k = xt.tr_mul(xt);
    let ones = DVector::from_element(n, 1.0);
    let mut beta = DVector::zeros(n);
    let mut solved = None;
    for it in 0..SVM_MAX_ITERS {
        let g = &ones - &k * &beta;
        let mut dir = g.clone();
        for i in 0..n {
            if beta[i] <= 0.0 && g[i] < 0.0 {
                dir[i] = 0.0;
            }
        }
        let kd = &k * &dir;
        let curv = dir.dot(&kd);
        let gain = g.dot(&dir);
        if gain <= 0.0 || !(curv > 0.0) {
            if gain > 0.0 {
                return Err(BnError::NotSeparable);
            }
            solved = Some(beta.clone());
            break;
        }
        let step = gain / curv;
        let proj = (&beta + &dir * step).map(|v| v.max(0.0));
        let obj = dual_objective(&beta, &k);
        if dual_objective(&proj, &k) >= obj {
            beta = proj;
        } else {
            let cap = (0..n)
                .filter(|&i| dir[i] < 0.0)
                .map(|i| -beta[i] / dir[i])
                .fold(step, f64::min);
            beta = (&beta + &dir * cap).map(|v| v.max(0.0));
        }
        if beta.sum() > 1e12 {
            return Err(BnError::NotSeparable);
        }
        if it % 25 == 0 || it + 1 == SVM_MAX_ITERS {
            if let Some(p) = polish_support(&beta, &k) {
                solved = Some(p);
                break;
            }
            if svm_kkt_residual(&beta, &k) < SVM_KKT_TOL * 1e-2 {
                solved = Some(beta.clone());
                break;
            }
        }
    }
    let beta = solved.unwrap_or(beta);
    let res = svm_kkt_residual(&beta, &k);
    if !(res < SVM_KKT_TOL) {
        return Err(BnError::Convergence {
            what: "svm dual",
            residual: res,
        });
    }
    let w_hat = xt * &beta;
    let nrm = w_hat.norm();
    if nrm == 0.0 {
        return Err(BnError::NotSeparable);
    }
    Ok(ReferenceDirection {
        gamma: 1.0 / nrm,
        w_hat,
        dual_coeffs: Some(beta),
        kind: ReferenceKind::Svm,
    })
}

/// True when every signed sample sits on the margin boundary to `tol`.
pub fn all_margins_active(ds: &Dataset, reference: &ReferenceDirection, tol: f64) -> bool {
    ds.xtilde()
        .tr_mul(&reference.w_hat)
        .iter()
        .all(|m| (m - 1.0).abs() <= tol)
}

pub const OFFSET_RESTARTS: usize = 32;
pub const OFFSET_ITERS: usize = 5000;
pub const OFFSET_AGREEMENT: f64 = 1e-4;
const OFFSET_SEED: u64 = 0x6d61_7267_696e;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginOffset {
    pub b: f64,
    /// Dimension of span(X) intersected with the orthogonal complement of w_hat.
    pub dim: usize,
    /// Gap between the best two restarts.
    pub restart_gap: f64,
}

/// Orthonormal basis of span(X) intersected with w_hat-perp.
pub fn offset_subspace(ds: &Dataset, reference: &ReferenceDirection) -> Result<DMatrix<f64>> {
    let sb = spectrum_bounds(ds)?;
    let u = &sb.span_basis;
    let r = u.ncols();
    let a = u.tr_mul(&reference.w_hat);
    let an = a.norm();
    if an == 0.0 {
        return Err(BnError::Precondition(
            "w_hat has no component in span(X)".into(),
        ));
    }
    let proj = DMatrix::identity(r, r) - (&a * a.transpose()) / (an * an);
    if r == 1 {
        return Ok(DMatrix::zeros(ds.d(), 0));
    }
    let n = column_span(&proj)?;
    Ok(u * n)
}

fn min_margin(a: &DMatrix<f64>, c: &DVector<f64>) -> (f64, usize) {
    let v = a.tr_mul(c);
    let mut best = (f64::INFINITY, 0);
    for (i, &x) in v.iter().enumerate() {
        if x < best.0 {
            best = (x, i);
        }
    }
    best
}

/// Vertex of {c : a_i^T c >= -1} where the m lowest constraints at `c` are
/// tight; returns its min-margin value on the unit sphere if it is feasible.
fn vertex_polish(a: &DMatrix<f64>, c: &DVector<f64>) -> Option<f64> {
    let m = a.nrows();
    let vals = a.tr_mul(c);
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&i, &j| vals[i].partial_cmp(&vals[j]).unwrap());
    if order.len() < m {
        return None;
    }
    let act = DMatrix::from_fn(m, m, |r, k| a[(k, order[r])]);
    let v = act.lu().solve(&DVector::from_element(m, -1.0))?;
    let nv = v.norm();
    if !(nv.is_finite() && nv > 0.0) {
        return None;
    }
    let (mn, _) = min_margin(a, &v);
    if mn < -1.0 - 1e-10 {
        return None;
    }
    Some(min_margin(a, &(v / nv)).0)
}

/// Margin offset b, with -b the largest achievable worst-case margin
/// min_i y_i <x_i, c> over unit vectors c of span(X) orthogonal to w_hat.
/// Subgradient ascent on the sphere (step 1/sqrt(k)) from 32 seeded
/// restarts, each finished by a vertex polish.
pub fn margin_offset(ds: &Dataset, reference: &ReferenceDirection) -> Result<MarginOffset> {
    let basis = offset_subspace(ds, reference)?;
    let dim = basis.ncols();
    if dim == 0 {
        return Err(BnError::NotApplicable(
            "span(X) has no direction orthogonal to w_hat".into(),
        ));
    }
    let a = basis.tr_mul(ds.xtilde());
    let mut rng = ChaCha8Rng::seed_from_u64(OFFSET_SEED);
    let mut values = Vec::with_capacity(OFFSET_RESTARTS);
    for _ in 0..OFFSET_RESTARTS {
        let mut c = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
        let cn = c.norm();
        c /= cn;
        let mut best_val = min_margin(&a, &c).0;
        let mut best_c = c.clone();
        for k in 1..=OFFSET_ITERS {
            let (val, i) = min_margin(&a, &c);
            if val > best_val {
                best_val = val;
                best_c = c.clone();
            }
            let ai = a.column(i);
            let mut g: DVector<f64> = ai.into_owned();
            g.axpy(-ai.dot(&c), &c, 1.0);
            c.axpy(1.0 / (k as f64).sqrt(), &g, 1.0);
            let cn = c.norm();
            c /= cn;
        }
        if let Some(p) = vertex_polish(&a, &best_c) {
            best_val = best_val.max(p);
        }
        values.push(best_val);
    }
    values.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let gap = if values.len() > 1 {
        values[0] - values[1]
    } else {
        0.0
    };
    if gap > OFFSET_AGREEMENT {
        return Err(BnError::Convergence {
            what: "margin offset restarts",
            residual: gap,
        });
    }
    let best = values[0];
    if best >= 0.0 {
        return Err(BnError::AssumptionViolated(format!(
            "a direction orthogonal to w_hat keeps every margin nonnegative (best {best:e})"
        )));
    }
    let b = -best;
    if !(b > 1e-10) {
        return Err(BnError::AssumptionViolated(format!(
            "margin offset {b:e} too small"
        )));
    }
    Ok(MarginOffset {
        b,
        dim,
        restart_gap: gap,
    })
}

/// Inputs of the constants package; everything in `LogisticConstants` is a
/// pure function of these.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantInputs {
    pub alpha0: f64,
    pub gamma: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub w0_norm: f64,
    pub rho0_perp_sigma: f64,
    pub eta: f64,
    pub eta_alpha: f64,
    pub margin_offset_b: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticConstants {
    pub c0: f64,
    /// (32/alpha0)(lambda_max/lambda_min), the chained form.
    pub c: f64,
    /// (32 sqrt(lambda_max/lambda_min)) e^{3 alpha0/2} / alpha0.
    pub c_stated: f64,
    pub c1: f64,
    /// 2 C alpha0^2 (lambda_max/lambda_min)^{3/2}.
    pub c2: f64,
    /// 2 C alpha0^2 (lambda_max/lambda_min).
    pub c2_proof: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
    pub c_tilde: f64,
    pub phi: f64,
    pub tan_min_sq: f64,
    /// Horizon ceil(C2 (1 + 1/tan_min^2) eta gamma / ||w0||^2), saturating.
    pub t0: u64,
    pub t0_real: f64,
    pub margin_offset_b: Option<f64>,
    pub theta_down: f64,
    pub theta_up: f64,
    pub rho0_perp_sigma: f64,
    /// max(16 C1 (lambda_max/lambda_min)^2, C4).
    pub c_low: f64,
    pub c_high: f64,
    /// C3 lambda_min^2 / (16 lambda_max^2).
    pub c_alpha: f64,
}

pub fn logistic_constants(inp: &ConstantInputs) -> LogisticConstants {
    let kappa = inp.lambda_max / inp.lambda_min;
    let a0 = inp.alpha0;
    let c0 = kappa.sqrt() + 2.0 * 2f64.sqrt() * kappa;
    let c = 32.0 / a0 * kappa;
    let c_stated = 32.0 * kappa.sqrt() * (1.5 * a0).exp() / a0;
    let c1 =
        2.0 * c * (1.0 + 36.0 * kappa * kappa * (2.0 * a0).exp() / inp.rho0_perp_sigma.powi(2));
    let c2 = 2.0 * c * a0 * a0 * kappa.powf(1.5);
    let c2_proof = 2.0 * c * a0 * a0 * kappa;
    let c3 = a0 / (2.0 * c2);
    let c_tilde = 3.0 / 256.0 / kappa * a0;
    let c4 = 2.0 / c_tilde;
    let c5 = ((c_tilde / 2.0) / (36.0 * c2 * a0 * a0 * kappa.powi(3))).sqrt();
    let c6 = (6.0 * kappa.powf(2.5) * a0 * (1.5 * a0).exp() * (1.5 * a0 + 1.0).powi(2)).powi(2);
    let scale = inp.eta * inp.gamma / (inp.w0_norm * inp.w0_norm);
    let phi = 6.0 * kappa * kappa * a0 * scale;
    let tan_min_sq =
        inp.gamma * inp.gamma * inp.lambda_min / (8.0 * inp.lambda_max * inp.lambda_max);
    let t0_real = c2 * (1.0 + 1.0 / tan_min_sq) * scale;
    let t0 = if t0_real.is_finite() && t0_real < u64::MAX as f64 {
        t0_real.ceil() as u64
    } else {
        u64::MAX
    };
    let theta_down = 4.0 / ((phi * phi + 4.0).sqrt() - phi).powi(2) - 1.0;
    let theta_up = c6 * inp.eta * inp.eta / (inp.w0_norm.powi(4) * inp.gamma * inp.gamma) - 1.0;
    LogisticConstants {
        c0,
        c,
        c_stated,
        c1,
        c2,
        c2_proof,
        c3,
        c4,
        c5,
        c6,
        c_tilde,
        phi,
        tan_min_sq,
        t0,
        t0_real,
        margin_offset_b: inp.margin_offset_b,
        theta_down,
        theta_up,
        rho0_perp_sigma: inp.rho0_perp_sigma,
        c_low: (16.0 * c1 * kappa * kappa).max(c4),
        c_high: c5,
        c_alpha: c3 / (16.0 * kappa * kappa),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskBounds {
    pub risk: f64,
    /// l(alpha) + alpha |l'((1 - C0 gamma rho_perp) alpha)| C0 gamma rho_perp.
    pub upper: Option<f64>,
    /// (1/n) l((alpha/sqrt(lambda_min)) (rho gamma^2 - rho_perp b gamma)).
    pub lower: Option<f64>,
}

/// Upper bound needs rho > 0 and alpha > 0; the lower bound additionally
/// needs the margin offset b.
pub fn logistic_risk_bounds(
    stats: &DirectionalStats,
    n: usize,
    gamma: f64,
    lambda_min: f64,
    consts: &LogisticConstants,
) -> RiskBounds {
    let l = LossKind::Logistic;
    let on_branch = stats.rho > 0.0 && stats.alpha > 0.0;
    let a = stats.alpha;
    let pert = consts.c0 * gamma * stats.rho_perp;
    let upper = on_branch.then(|| l.value(a) + a * l.derivative((1.0 - pert) * a).abs() * pert);
    let lower = match (on_branch, consts.margin_offset_b) {
        (true, Some(b)) => {
            let arg =
                a / lambda_min.sqrt() * (stats.rho * gamma * gamma - stats.rho_perp * b * gamma);
            Some(l.value(arg) / n as f64)
        }
        _ => None,
    };
    RiskBounds {
        risk: stats.risk,
        upper,
        lower,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundEntry {
    pub name: &'static str,
    /// Value that must not exceed `rhs` (after orienting the inequality).
    pub lhs: f64,
    pub rhs: f64,
    /// rhs - lhs.
    pub slack: f64,
    pub verdict: Verdict,
    /// Reported for context only; does not count towards violations.
    pub diagnostic: bool,
}

impl BoundEntry {
    fn le(name: &'static str, lhs: f64, rhs: f64, applicable: bool) -> Self {
        let slack = rhs - lhs;
        BoundEntry {
            name,
            lhs,
            rhs,
            slack,
            verdict: if applicable {
                Verdict::from_bool(slack >= -BOUND_SLACK)
            } else {
                Verdict::NotApplicable
            },
            diagnostic: false,
        }
    }

    fn diagnostic(mut self) -> Self {
        self.diagnostic = true;
        self
    }

    pub fn violated(&self) -> bool {
        !self.diagnostic && self.verdict == Verdict::Fails
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundLedger {
    pub entries: Vec<BoundEntry>,
}

impl BoundLedger {
    pub fn violations(&self) -> usize {
        self.entries.iter().filter(|e| e.violated()).count()
    }
    pub fn get(&self, name: &str) -> Option<&BoundEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

/// Evaluates the Sigma-norm and per-sample margin deviation bounds, the
/// descent-direction bound and the gradient-norm sandwich at one state.
pub fn margin_gradient_bounds(
    state: &ModelState,
    ds: &Dataset,
    reference: &ReferenceDirection,
    sb: &SpectrumBounds,
) -> Result<BoundLedger> {
    let ev = evaluate(state, ds, LossKind::Logistic)?;
    let cfg = GdConfig::new(0.0, 0.0, 1, LossKind::Logistic, Mode::Vector);
    let s = directional_stats(state, ds, reference, &cfg)?;
    let (lmin, lmax) = (sb.lambda_min, sb.lambda_max);
    let gamma = reference.gamma;
    let wn = s.w_norm;
    let ws = s.w_sigma_norm;
    let a = state.alpha;
    let on6 = s.rho > 0.0;
    let on78 = a > 0.0;
    let mut e = Vec::new();
    let center = gamma * gamma * wn * s.rho;
    e.push(BoundEntry::le(
        "sigma_norm_deviation",
        (ws - center).abs(),
        2.0 * 2f64.sqrt() * lmax * gamma * wn * wn / ws * s.rho_perp,
        on6,
    ));
    let margins = ds.xtilde().tr_mul(&state.w);
    let worst = margins
        .iter()
        .map(|m| (m - center).abs())
        .fold(0.0, f64::max);
    e.push(BoundEntry::le(
        "sample_margin_deviation",
        worst,
        lmax.sqrt() * gamma * wn * s.rho_perp,
        on6,
    ));
    let max_x = (0..ds.n())
        .map(|i| ds.x().column(i).norm())
        .fold(0.0, f64::max);
    e.push(
        BoundEntry::le(
            "sample_margin_deviation_max_norm",
            worst,
            max_x * gamma * wn * s.rho_perp,
            on6,
        )
        .diagnostic(),
    );
    let g = &ev.grad_w;
    let gn = g.norm();
    let desc = -reference.w_hat.dot(g);
    let decay = a * (-a).exp() / ws;
    e.push(BoundEntry::le(
        "reference_descent",
        lmin / 8.0 * decay * s.rho_perp * s.rho_perp,
        desc,
        on78,
    ));
    e.push(BoundEntry::le(
        "reference_descent_sign",
        0.0,
        a * desc,
        true,
    ));
    e.push(BoundEntry::le(
        "grad_norm_chain",
        lmin / 4.0 * decay * s.rho_perp,
        lmin.sqrt() / 4.0 * decay * s.rho_perp_sigma,
        on78,
    ));
    e.push(BoundEntry::le(
        "grad_norm_lower",
        lmin.sqrt() / 4.0 * decay * s.rho_perp_sigma,
        gn,
        on78,
    ));
    e.push(BoundEntry::le(
        "grad_norm_upper",
        gn,
        a / ws * lmax.sqrt().max(lmax * (a + 1.0) * s.rho_perp),
        on78,
    ));
    Ok(BoundLedger { entries: e })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eq3Eval {
    pub lhs: f64,
    pub rhs: f64,
    pub diverge_criterion_holds: Verdict,
    /// ratio^2 >= theta_down (the regime of the decreasing-rho_perp clause).
    pub theta_down_reached: Verdict,
    /// ratio^2 >= theta_up (inclusive).
    pub theta_up_exceeded: Verdict,
}

/// Divergence criterion (lambda_min/4)(alpha/e^alpha)(eta rho/(||w||_Sigma ||w||))
/// >= 2/(1 - ratio^2) and the two exit thresholds.
pub fn eq3_and_exit_thresholds(
    stats: &DirectionalStats,
    consts: &LogisticConstants,
    eta: f64,
    lambda_min: f64,
) -> Eq3Eval {
    let Some(r) = stats.ratio else {
        return Eq3Eval {
            lhs: f64::NAN,
            rhs: f64::NAN,
            diverge_criterion_holds: Verdict::NotApplicable,
            theta_down_reached: Verdict::NotApplicable,
            theta_up_exceeded: Verdict::NotApplicable,
        };
    };
    let a = stats.alpha;
    let lhs =
        lambda_min / 4.0 * a / a.exp() * eta * stats.rho / (stats.w_sigma_norm * stats.w_norm);
    let rhs = crate::linear::rising_threshold(r);
    let r2 = r * r;
    Eq3Eval {
        lhs,
        rhs,
        diverge_criterion_holds: Verdict::from_bool(lhs >= rhs),
        theta_down_reached: Verdict::from_bool(r2 >= consts.theta_down),
        theta_up_exceeded: Verdict::from_bool(r2 >= consts.theta_up),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CampaignStatus {
    /// A standing precondition (lambda_max > 1, alpha0 range, active margins) fails.
    Rejected {
        reason: String,
    },
    /// The step-size window is empty.
    Unsatisfiable {
        lower: f64,
        upper: f64,
        c_low: f64,
        c_high: f64,
        gamma: f64,
    },
    /// The window is nonempty but the configured step sizes are outside it.
    OutsideWindow {
        eta_over_w2: f64,
        lower: f64,
        upper: f64,
        eta_alpha_max: f64,
    },
    Ran,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClauseReport {
    pub verdict: Verdict,
    pub applicable_steps: usize,
    pub first_failure: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub status: CampaignStatus,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub gamma: f64,
    pub constants: Option<LogisticConstants>,
    /// Clause verdicts carry weight only when `status` is `Ran` and
    /// `forced` is false.
    pub forced: bool,
    pub horizon: usize,
    pub clause1_decreasing: Option<ClauseReport>,
    /// First t with ratio^2 <= tan_min^2.
    pub clause2_t0: Option<usize>,
    pub clause2: Option<Verdict>,
    pub clause3_exit: Option<ClauseReport>,
    pub alpha_corridor: Option<ClauseReport>,
}

impl CampaignReport {
    /// True when some applicable clause failed in a non-forced run.
    pub fn failed(&self) -> bool {
        if self.forced || self.status != CampaignStatus::Ran {
            return false;
        }
        let bad =
            |c: &Option<ClauseReport>| c.as_ref().map_or(false, |c| c.verdict == Verdict::Fails);
        bad(&self.clause1_decreasing)
            || bad(&self.clause3_exit)
            || bad(&self.alpha_corridor)
            || self.clause2 == Some(Verdict::Fails)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignOptions {
    /// Run the trajectory even when the window is empty; verdicts are then
    /// informational only.
    pub force: bool,
    /// Cap on the horizon (the theorem's T0 can be astronomically large).
    pub max_horizon: usize,
}

impl Default for CampaignOptions {
    fn default() -> Self {
        CampaignOptions {
            force: false,
            max_horizon: 100_000,
        }
    }
}

fn clause(applicable: usize, first_failure: Option<usize>) -> ClauseReport {
    ClauseReport {
        verdict: if applicable == 0 {
            Verdict::NotApplicable
        } else if first_failure.is_some() {
            Verdict::Fails
        } else {
            Verdict::Holds
        },
        applicable_steps: applicable,
        first_failure,
    }
}

/// Checks the small-ratio entry theorem on one logistic instance: computes
/// the constants, decides satisfiability of the step-size window and, when
/// it is satisfiable (or forced), runs GD for the horizon and checks the
/// decreasing-rho_perp clause, the entry clause, the exit clause and the
/// alpha corridor.
pub fn long_horizon_campaign(
    ds: &Dataset,
    init: &ModelState,
    cfg: &GdConfig,
    opts: &CampaignOptions,
) -> Result<CampaignReport> {
    let sb = spectrum_bounds(ds)?;
    let reference = solve_svm(ds)?;
    let gamma = reference.gamma;
    let mut report = CampaignReport {
        status: CampaignStatus::Ran,
        lambda_min: sb.lambda_min,
        lambda_max: sb.lambda_max,
        gamma,
        constants: None,
        forced: false,
        horizon: 0,
        clause1_decreasing: None,
        clause2_t0: None,
        clause2: None,
        clause3_exit: None,
        alpha_corridor: None,
    };
    let a0 = init.alpha;
    let reject = if !(sb.lambda_max > 1.0) {
        Some(format!("lambda_max = {} must exceed 1", sb.lambda_max))
    } else if !(a0 > 0.0 && a0 <= sb.lambda_max.ln() / 3.0) {
        Some(format!(
            "alpha0 = {a0} outside (0, ln(lambda_max)/3 = {}]",
            sb.lambda_max.ln() / 3.0
        ))
    } else if !all_margins_active(ds, &reference, 1e-8) {
        Some("not every sample is on the margin boundary".into())
    } else {
        None
    };
    if let Some(reason) = reject {
        report.status = CampaignStatus::Rejected { reason };
        return Ok(report);
    }
    let lcfg = GdConfig {
        loss: LossKind::Logistic,
        mode: Mode::Vector,
        ..*cfg
    };
    let s0 = directional_stats(init, ds, &reference, &lcfg)?;
    let b = margin_offset(ds, &reference).ok().map(|m| m.b);
    let consts = logistic_constants(&ConstantInputs {
        alpha0: a0,
        gamma,
        lambda_min: sb.lambda_min,
        lambda_max: sb.lambda_max,
        w0_norm: s0.w_norm,
        rho0_perp_sigma: s0.rho_perp_sigma,
        eta: cfg.eta,
        eta_alpha: cfg.eta_alpha,
        margin_offset_b: b,
    });
    let lower = consts.c_low * gamma;
    let upper = consts.c_high / gamma;
    let x = cfg.eta / (s0.w_norm * s0.w_norm);
    let eta_alpha_max = consts.c_alpha * s0.w_norm * s0.w_norm / (cfg.eta * gamma);
    report.constants = Some(consts.clone());
    if !(lower <= upper) {
        report.status = CampaignStatus::Unsatisfiable {
            lower,
            upper,
            c_low: consts.c_low,
            c_high: consts.c_high,
            gamma,
        };
    } else if !(x >= lower && x <= upper && cfg.eta_alpha <= eta_alpha_max) {
        report.status = CampaignStatus::OutsideWindow {
            eta_over_w2: x,
            lower,
            upper,
            eta_alpha_max,
        };
    }
    if report.status != CampaignStatus::Ran && !opts.force {
        return Ok(report);
    }
    report.forced = report.status != CampaignStatus::Ran;
    let t0 = usize::try_from(consts.t0).unwrap_or(usize::MAX);
    let horizon = t0.min(opts.max_horizon).min(cfg.max_iters).max(2);
    report.horizon = horizon;
    let run_cfg = GdConfig {
        max_iters: horizon + 1,
        ..lcfg
    };
    let traj = run_trajectory_with(init, ds, &reference, &run_cfg, usize::MAX)?;
    let recs = &traj.records;

    let (mut app1, mut fail1) = (0, None);
    let (mut app_a, mut fail_a) = (0, None);
    for t in 0..horizon {
        let s = recs[t].stats;
        let next = recs[t + 1].stats;
        if let Some(r) = s.ratio {
            if r * r >= consts.theta_down {
                app1 += 1;
                if next.rho_perp > s.rho_perp + 1e-12 && fail1.is_none() {
                    fail1 = Some(t);
                }
            }
        }
        app_a += 1;
        if !(s.alpha >= a0 / 2.0 && s.alpha <= 1.5 * a0) && fail_a.is_none() {
            fail_a = Some(t);
        }
    }
    report.clause1_decreasing = Some(clause(app1, fail1));
    report.alpha_corridor = Some(clause(app_a, fail_a));
    let entry = (0..horizon).find(|&t| {
        recs[t]
            .stats
            .ratio
            .map_or(false, |r| r * r <= consts.tan_min_sq)
    });
    report.clause2_t0 = entry;
    report.clause2 = Some(Verdict::from_bool(entry.is_some()));

    let (mut app3, mut fail3) = (0, None);
    if let Some(te) = entry {
        // Rising steps after entry whose ratio^2 reaches theta_up must
        // satisfy the convergence condition and be followed by a non-rising step.
        for t in te..horizon {
            let s = recs[t].stats;
            if recs[t].edge != Edge::Rising {
                continue;
            }
            let Some(r) = s.ratio else { continue };
            if r * r < consts.theta_up {
                continue;
            }
            app3 += 1;
            let st = replay_state(ds, init, &lcfg, t)?;
            let g = evaluate(&st, ds, LossKind::Logistic)?.grad_w;
            let l5 = direction_conditions_at(&st, &g, &reference, cfg.eta);
            let next_rising = recs[t + 1].edge == Edge::Rising;
            if (!l5.converge.holds() || next_rising) && fail3.is_none() {
                fail3 = Some(t);
            }
        }
    }
    report.clause3_exit = Some(clause(app3, fail3));
    Ok(report)
}

fn replay_state(ds: &Dataset, init: &ModelState, cfg: &GdConfig, t: usize) -> Result<ModelState> {
    let mut st = init.clone();
    for _ in 0..t {
        st = crate::dynamics::step_vector(&st, ds, cfg)?;
    }
    Ok(st)
}
