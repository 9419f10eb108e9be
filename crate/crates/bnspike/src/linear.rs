//! Evaluators for the whitened square-loss statements: the generic
//! direction convergence/divergence conditions, onset thresholds with the
//! waiting-time bound, the rising-edge duration and shape bounds, and the
//! falling-edge existence monitor.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Edge, TrajectoryRecord};
use crate::error::{BnError, Result};
use crate::model::ModelState;
use crate::reference::ReferenceDirection;

/// Absolute slack allowed on the shape bounds.
pub const SHAPE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Holds,
    Fails,
    NotApplicable,
}

impl Verdict {
    pub fn from_bool(b: bool) -> Self {
        if b {
            Verdict::Holds
        } else {
            Verdict::Fails
        }
    }
    pub fn holds(self) -> bool {
        self == Verdict::Holds
    }
}

/// Both sides of the direction convergence and divergence conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionEval {
    pub rho: f64,
    pub rho_perp: f64,
    pub ratio: Option<f64>,
    pub grad_norm: f64,
    /// <w_hat, grad>.
    pub hat_inner_grad: f64,
    /// eta rho / ||w|| * ||grad||^2.
    pub converge_lhs: f64,
    /// -2 <w_hat, grad>.
    pub converge_rhs: f64,
    pub converge: Verdict,
    /// eta ||grad|| / ||w||.
    pub diverge_lhs: f64,
    /// 2 rho rho_perp / (rho^2 - rho_perp^2).
    pub diverge_rhs: f64,
    pub diverge: Verdict,
}

/// Evaluates the convergence condition (needs rho > 0) and the divergence
/// condition (needs 0 < ratio <= 1 and alpha > 0) for any scale-invariant
/// objective with gradient `grad` at `state`.
pub fn direction_conditions_at(
    state: &ModelState,
    grad: &DVector<f64>,
    reference: &ReferenceDirection,
    eta: f64,
) -> DirectionEval {
    let w_norm = state.w.norm();
    let w_hat = &reference.w_hat;
    let rho = w_hat.dot(&state.w) / w_norm;
    let mut resid = w_hat.clone();
    resid.axpy(-rho / w_norm, &state.w, 1.0);
    let rho_perp = resid.norm();
    let ratio = if rho > 0.0 {
        Some(rho_perp / rho)
    } else {
        None
    };
    let g2 = grad.norm_squared();
    let gn = g2.sqrt();
    let hat_inner_grad = w_hat.dot(grad);
    let converge_lhs = eta * rho / w_norm * g2;
    let converge_rhs = -2.0 * hat_inner_grad;
    let converge = if rho > 0.0 {
        Verdict::from_bool(converge_lhs <= converge_rhs)
    } else {
        Verdict::NotApplicable
    };
    let diverge_lhs = eta * gn / w_norm;
    let denom = rho * rho - rho_perp * rho_perp;
    let diverge_rhs = if denom > 0.0 {
        2.0 * rho * rho_perp / denom
    } else {
        f64::INFINITY
    };
    let diverge = match ratio {
        Some(r) if r > 0.0 && r <= 1.0 && state.alpha > 0.0 => {
            Verdict::from_bool(diverge_lhs >= diverge_rhs)
        }
        _ => Verdict::NotApplicable,
    };
    DirectionEval {
        rho,
        rho_perp,
        ratio,
        grad_norm: gn,
        hat_inner_grad,
        converge_lhs,
        converge_rhs,
        converge,
        diverge_lhs,
        diverge_rhs,
        diverge,
    }
}

/// Threshold 2 / (1 - ratio^2) that the effective learning rate must cross
/// for the ratio to grow; infinite for ratio >= 1.
pub fn rising_threshold(ratio: f64) -> f64 {
    let q = 1.0 - ratio * ratio;
    if q > 0.0 {
        2.0 / q
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnsetCondition {
    NoRisingEdge,
    DelayedOnset,
    Indeterminate,
}

/// Directional state at the reference time t0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnsetInputs {
    pub t0: usize,
    pub ratio: f64,
    pub alpha: f64,
    pub rho: f64,
    pub w_norm: f64,
    pub hatw_norm: f64,
    pub eta: f64,
    pub eta_alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnsetReport {
    pub t0: usize,
    pub k_t0: f64,
    /// Upper end of the delayed-onset window used for classification:
    /// min(1/(alpha rho), eta_alpha (rho/rho_perp)^2 / (16 ||w_hat||^2 e^{1+eta_alpha} (1-k))).
    pub c_t0: f64,
    /// Relaxed closed form min(1/(alpha rho), 3 eta_alpha / (16 ||w_hat||^2 e^2 (1-k))).
    pub c_t0_stated: f64,
    /// Whether 8/||w_hat||^2 < c_t0_stated fails, i.e. the relaxed window is empty.
    pub stated_window_empty: bool,
    pub delta_t0: u64,
    pub delta_t0_log_arg: f64,
    /// The log argument was <= 1 and the waiting time was clamped to 1.
    pub delta_t0_clamped: bool,
    pub no_rise_threshold: f64,
    pub onset_lower_threshold: f64,
    pub eta_over_w2: f64,
    pub condition: OnsetCondition,
    pub indeterminate_reason: Option<String>,
    pub observed_t1: Option<usize>,
    /// t1 in (t0, t0 + delta_t0], when t1 was observed in the DelayedOnset regime.
    pub onset_within_bound: Option<bool>,
}

impl OnsetReport {
    pub fn with_observed(mut self, t1: Option<usize>) -> Self {
        self.observed_t1 = t1;
        self.onset_within_bound = match (self.condition, t1) {
            (OnsetCondition::DelayedOnset, Some(t1)) => {
                Some(t1 > self.t0 && (t1 - self.t0) as u64 <= self.delta_t0)
            }
            (OnsetCondition::DelayedOnset, None) => Some(false),
            _ => None,
        };
        self
    }
}

/// Waiting-time bound floor((1/eta_alpha) ln(arg) + 1) with
/// arg = eta_alpha (1-k) ||w||^2 / (4 eta ||w_hat||^2 ratio^2).
pub fn delta_t0(inp: &OnsetInputs) -> (u64, f64, bool) {
    let k = inp.alpha / inp.rho;
    let h2 = inp.hatw_norm * inp.hatw_norm;
    let arg = inp.eta_alpha * (1.0 - k) * inp.w_norm * inp.w_norm
        / (4.0 * inp.eta * h2 * inp.ratio * inp.ratio);
    if !(arg > 1.0) {
        return (1, arg, true);
    }
    let v = (arg.ln() / inp.eta_alpha + 1.0).floor();
    (v as u64, arg, false)
}

pub fn c_t0_forms(inp: &OnsetInputs) -> (f64, f64) {
    let k = inp.alpha / inp.rho;
    let h2 = inp.hatw_norm * inp.hatw_norm;
    let first = 1.0 / (inp.alpha * inp.rho);
    let inv_r2 = 1.0 / (inp.ratio * inp.ratio);
    let proof = inp.eta_alpha * inv_r2 / (16.0 * h2 * (1.0 + inp.eta_alpha).exp() * (1.0 - k));
    let stated = 3.0 * inp.eta_alpha / (16.0 * h2 * std::f64::consts::E.powi(2) * (1.0 - k));
    (first.min(proof), first.min(stated))
}

pub fn onset_analysis(inp: &OnsetInputs) -> OnsetReport {
    let h2 = inp.hatw_norm * inp.hatw_norm;
    let k = inp.alpha / inp.rho;
    let (c_t0, c_t0_stated) = c_t0_forms(inp);
    let (dt0, arg, clamped) = delta_t0(inp);
    let x = inp.eta / (inp.w_norm * inp.w_norm);
    let lo = 2.0 / h2;
    let hi = 8.0 / h2;
    let mut reason = None;
    let condition = if !(inp.ratio <= 1.0 / 3f64.sqrt()) {
        reason = Some(format!("ratio {} exceeds 1/sqrt(3)", inp.ratio));
        OnsetCondition::Indeterminate
    } else if !(inp.alpha > 0.0 && inp.alpha < inp.rho) {
        reason = Some(format!(
            "need 0 < alpha < rho, got alpha {} rho {}",
            inp.alpha, inp.rho
        ));
        OnsetCondition::Indeterminate
    } else if !(inp.eta_alpha > 0.0 && inp.eta_alpha < 1.0) {
        reason = Some(format!("eta_alpha {} outside (0, 1)", inp.eta_alpha));
        OnsetCondition::Indeterminate
    } else if x < lo {
        OnsetCondition::NoRisingEdge
    } else if x > hi && x <= c_t0 {
        OnsetCondition::DelayedOnset
    } else {
        reason = Some(if x <= hi {
            format!("eta/||w||^2 = {x} lies in the uncovered band [{lo}, {hi}]")
        } else {
            format!("eta/||w||^2 = {x} exceeds C_t0 = {c_t0}")
        });
        OnsetCondition::Indeterminate
    };
    OnsetReport {
        t0: inp.t0,
        k_t0: k,
        c_t0,
        c_t0_stated,
        stated_window_empty: !(hi < c_t0_stated),
        delta_t0: dt0,
        delta_t0_log_arg: arg,
        delta_t0_clamped: clamped,
        no_rise_threshold: lo,
        onset_lower_threshold: hi,
        eta_over_w2: x,
        condition,
        indeterminate_reason: reason,
        observed_t1: None,
        onset_within_bound: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeBound {
    /// (ratio_t)^2 <= 1 - (2 rho_perp_{t1} alpha_{t1} / ||w_hat||^2) sqrt(t - t1) on [t1, phi].
    BeforeCatchUp,
    /// (ratio_t)^2 <= 1 - (2 rho_perp_{t1} / ||w_hat||) sqrt(t - phi) on (phi, t2].
    AfterCatchUp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeViolation {
    pub t: usize,
    pub which: ShapeBound,
    pub bound: f64,
    pub observed: f64,
    /// The violation sits at t2 itself, the last point of the closed interval.
    pub at_endpoint: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilizationReport {
    pub t1: usize,
    pub delta_t1: u64,
    /// The duration formula collapsed to 0 (ratio 1 at t1).
    pub delta_t1_degenerate: bool,
    pub phi: Option<usize>,
    pub observed_t2: Option<usize>,
    pub t2_within_bound: Option<bool>,
    /// Shape-bound violations beyond the slack over [t1, t2].
    pub shape_bound_violations: Vec<ShapeViolation>,
    pub steps_checked: usize,
    /// max ratio over [t1, t2] (attained at t2 when the edge ends).
    pub peak_ratio: f64,
    /// max ratio over [t1, t2).
    pub peak_ratio_before_t2: f64,
}

impl StabilizationReport {
    pub fn violations_before_t2(&self) -> usize {
        self.shape_bound_violations
            .iter()
            .filter(|v| !v.at_endpoint)
            .count()
    }
    pub fn peak_below_one(&self) -> bool {
        self.peak_ratio < 1.0
    }
}

/// Rising-edge duration bound.
pub fn delta_t1(ratio: f64, rho: f64, alpha: f64, hatw_norm: f64) -> (u64, bool) {
    let rp = ratio * rho;
    let a =
        0.25 * hatw_norm.powi(4) / (alpha * alpha) * (1.0 / (rp * rp) - 1.0 / (rho * rho)).powi(2);
    let b = 0.25 * hatw_norm.powi(2) / (rho * rho) * (rho / rp - rp / rho).powi(2);
    let v = a.ceil() + b.ceil();
    (v as u64, v == 0.0)
}

/// Analyses the rising edge starting at `t1`: duration bound, catch-up time
/// phi and both square-root shape bounds over the closed interval [t1, t2]
/// (up to the horizon when the edge never ends).
pub fn stabilization_analysis(
    records: &[TrajectoryRecord],
    t1: Option<usize>,
    hatw_norm: f64,
) -> Result<StabilizationReport> {
    let t1 = t1.ok_or(BnError::NoRisingSegment)?;
    if t1 >= records.len() || records[t1].edge != Edge::Rising {
        return Err(BnError::NoRisingSegment);
    }
    let s1 = records[t1].stats;
    let r1 = s1.ratio.ok_or(BnError::BranchViolation { rho: s1.rho })?;
    let (dt1, degenerate) = delta_t1(r1, s1.rho, s1.alpha, hatw_norm);
    let mut t2 = None;
    for (t, rec) in records.iter().enumerate().skip(t1 + 1) {
        match rec.edge {
            Edge::Falling => {
                t2 = Some(t);
                break;
            }
            Edge::Rising => {}
            _ => {
                // Flat/Gap ends the monotone run without a Falling step.
                break;
            }
        }
    }
    let end = t2.unwrap_or(records.len() - 1);
    let phi = (t1..=end).find(|&t| records[t].stats.alpha >= records[t].stats.rho);
    let rp1 = s1.rho_perp;
    let c1 = 2.0 * rp1 * s1.alpha / (hatw_norm * hatw_norm);
    let c2 = 2.0 * rp1 / hatw_norm;
    let mut violations = Vec::new();
    let mut peak = 0.0f64;
    let mut peak_open = 0.0f64;
    for t in t1..=end {
        let Some(r) = records[t].stats.ratio else {
            continue;
        };
        peak = peak.max(r);
        if t < end || t2.is_none() {
            peak_open = peak_open.max(r);
        }
        let (which, bound) = match phi {
            Some(p) if t > p => (ShapeBound::AfterCatchUp, 1.0 - c2 * ((t - p) as f64).sqrt()),
            _ => (
                ShapeBound::BeforeCatchUp,
                1.0 - c1 * ((t - t1) as f64).sqrt(),
            ),
        };
        let observed = r * r;
        if observed - bound > SHAPE_SLACK {
            violations.push(ShapeViolation {
                t,
                which,
                bound,
                observed,
                at_endpoint: Some(t) == t2,
            });
        }
    }
    Ok(StabilizationReport {
        t1,
        delta_t1: dt1,
        delta_t1_degenerate: degenerate,
        phi,
        observed_t2: t2,
        t2_within_bound: t2.map(|t2| (t2 - t1) as u64 <= dt1),
        shape_bound_violations: violations,
        steps_checked: end + 1 - t1,
        peak_ratio: peak,
        peak_ratio_before_t2: peak_open,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FallingEdgeCertificate {
    PreconditionNotMet {
        eff_lr: f64,
        threshold: f64,
    },
    Found {
        t: usize,
        eff_lr: f64,
        threshold: f64,
    },
    NotFound {
        horizon: usize,
    },
}

/// Scans (eff_lr_t, ratio_t) for the first t with eff_lr_t below
/// 2 / (1 - ratio_t^2), given that t = 0 starts above it.
pub fn falling_edge_scan<I>(series: I) -> FallingEdgeCertificate
where
    I: IntoIterator<Item = (f64, Option<f64>)>,
{
    let mut it = series.into_iter().enumerate();
    let Some((_, (e0, r0))) = it.next() else {
        return FallingEdgeCertificate::NotFound { horizon: 0 };
    };
    let th0 = r0.map_or(f64::INFINITY, rising_threshold);
    if !(e0 > th0) {
        return FallingEdgeCertificate::PreconditionNotMet {
            eff_lr: e0,
            threshold: th0,
        };
    }
    let mut horizon = 1;
    for (t, (e, r)) in it {
        horizon = t + 1;
        if let Some(r) = r {
            let th = rising_threshold(r);
            if e < th {
                return FallingEdgeCertificate::Found {
                    t,
                    eff_lr: e,
                    threshold: th,
                };
            }
        }
    }
    FallingEdgeCertificate::NotFound { horizon }
}

/// Falling-edge monitor over a trajectory, starting at record `start`.
pub fn falling_edge_monitor(records: &[TrajectoryRecord], start: usize) -> FallingEdgeCertificate {
    let cert = falling_edge_scan(
        records
            .iter()
            .skip(start)
            .map(|r| (r.stats.eff_lr_euclid, r.stats.ratio)),
    );
    match cert {
        FallingEdgeCertificate::Found {
            t,
            eff_lr,
            threshold,
        } => FallingEdgeCertificate::Found {
            t: t + start,
            eff_lr,
            threshold,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_dataset, whiten};
    use crate::dynamics::{classify_ratios, directional_stats, DirectionalStats, GdConfig, Mode};
    use crate::model::{evaluate, LossKind};
    use crate::reference::least_squares_reference;

    fn inputs(ratio: f64, k: f64, eta_alpha: f64, x: f64) -> OnsetInputs {
        let rho = 1.0 / (1.0 + ratio * ratio).sqrt();
        OnsetInputs {
            t0: 0,
            ratio,
            alpha: k * rho,
            rho,
            w_norm: 1.0,
            hatw_norm: 1.0,
            eta: x,
            eta_alpha,
        }
    }

    #[test]
    fn stationary_gradient_converges() {
        let ds = whiten(&gen_gaussian_dataset(5, 9, 1).unwrap()).unwrap();
        let r = least_squares_reference(&ds).unwrap();
        let st = ModelState::new(&r.w_hat * 2.0, 0.7);
        let e = direction_conditions_at(&st, &DVector::zeros(9), &r, 1.0);
        assert_eq!(e.converge, Verdict::Holds);
    }

    #[test]
    fn divergence_rhs_infinite_at_ratio_one() {
        let ds = whiten(&gen_gaussian_dataset(5, 9, 2).unwrap()).unwrap();
        let r = least_squares_reference(&ds).unwrap();
        let c = GdConfig::new(1.0, 0.1, 1, LossKind::Square, Mode::Vector);
        let st = crate::dynamics::state_with_ratio(&ds, &r, 1.0, 1.0, 0.5, 3).unwrap();
        let g = evaluate(&st, &ds, LossKind::Square).unwrap().grad_w;
        let e = direction_conditions_at(&st, &g, &r, 1e6);
        let s = directional_stats(&st, &ds, &r, &c).unwrap();
        assert!((s.ratio.unwrap() - 1.0).abs() < 1e-12);
        // numerically the denominator may land on either side of zero; the
        // condition is never satisfied by a finite gradient
        assert!(e.diverge != Verdict::Holds || e.diverge_rhs.is_finite());
        assert!(e.diverge_rhs > 1e8);
    }

    #[test]
    fn no_rise_regime() {
        let rep = onset_analysis(&inputs(0.1, 0.5, 0.5, 1.0));
        assert_eq!(rep.condition, OnsetCondition::NoRisingEdge);
        assert_eq!(rep.onset_lower_threshold, 4.0 * rep.no_rise_threshold);
    }

    #[test]
    fn k_to_one_limit() {
        let inp = inputs(0.1, 1.0 - 1e-15, 0.5, 9.0);
        let (c, cs) = c_t0_forms(&inp);
        let first = 1.0 / (inp.alpha * inp.rho);
        assert_eq!(c, first);
        assert_eq!(cs, first);
    }

    #[test]
    fn stated_window_is_empty_on_example() {
        let rep = onset_analysis(&inputs(0.1, 0.5, 0.5, 9.0));
        assert!(rep.stated_window_empty);
        assert!(rep.c_t0_stated < rep.onset_lower_threshold);
    }

    #[test]
    fn delta_t0_grows_with_log_ratio() {
        let a = delta_t0(&inputs(1e-2, 0.1, 0.5, 9.0)).0;
        let b = delta_t0(&inputs(1e-4, 0.1, 0.5, 9.0)).0;
        assert!(b > a);
        let (v, _, clamped) = delta_t0(&inputs(0.5, 0.1, 0.5, 90.0));
        assert!(clamped && v == 1);
    }

    #[test]
    fn delta_t1_degenerate_at_ratio_one() {
        let rho = 1.0 / 2f64.sqrt();
        let (v, deg) = delta_t1(1.0, rho, 0.3, 1.0);
        assert!(deg && v == 0);
    }

    fn rec(t: usize, ratio: f64, alpha: f64, edge: Edge) -> TrajectoryRecord {
        let rho = 1.0 / (1.0 + ratio * ratio).sqrt();
        TrajectoryRecord {
            t,
            stats: DirectionalStats {
                rho,
                rho_perp: ratio * rho,
                ratio: Some(ratio),
                rho_perp_sigma: ratio * rho,
                eff_lr_euclid: 0.0,
                eff_lr_sigma: 0.0,
                w_norm: 1.0,
                w_sigma_norm: 1.0,
                alpha,
                risk: 0.0,
            },
            edge,
            snapshot: None,
        }
    }

    #[test]
    fn stabilization_requires_rising_segment() {
        let recs = vec![
            rec(0, 0.5, 0.1, Edge::Falling),
            rec(1, 0.4, 0.1, Edge::Flat),
        ];
        assert!(matches!(
            stabilization_analysis(&recs, None, 1.0),
            Err(BnError::NoRisingSegment)
        ));
    }

    #[test]
    fn stabilization_flags_endpoint_overshoot() {
        let ratios = [0.3, 0.1, 0.2, 1.5, 0.2];
        let a = classify_ratios(&ratios.map(Some), 0.0).unwrap();
        let recs: Vec<_> = ratios
            .iter()
            .enumerate()
            .map(|(t, &r)| rec(t, r, 0.1, a.labels[t]))
            .collect();
        let rep = stabilization_analysis(&recs, a.t1, 1.0).unwrap();
        assert_eq!(rep.observed_t2, Some(3));
        assert!(!rep.peak_below_one());
        assert!(rep.peak_ratio_before_t2 < 1.0);
        assert!(rep.shape_bound_violations.iter().any(|v| v.at_endpoint));
    }

    #[test]
    fn falling_edge_scan_cases() {
        let c = falling_edge_scan(vec![(1.0, Some(0.1)), (0.5, Some(0.1))]);
        assert!(matches!(
            c,
            FallingEdgeCertificate::PreconditionNotMet { .. }
        ));
        // eff_lr = 10/sqrt(t+1) with ratio 0: threshold 2, first t with 10/sqrt(t+1) < 2 is t = 25
        let series = (0..100).map(|t| (10.0 / ((t + 1) as f64).sqrt(), Some(0.0)));
        match falling_edge_scan(series) {
            FallingEdgeCertificate::Found { t, .. } => assert_eq!(t, 25),
            other => panic!("{other:?}"),
        }
    }
}
