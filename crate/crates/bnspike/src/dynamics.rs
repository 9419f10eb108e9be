//! Gradient-descent engine: simultaneous full-vector steps, the closed-form
//! whitened recurrence, directional statistics, edge classification and a
//! finite-difference sharpness estimate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{sigma_inner, spectrum_bounds, Dataset};
use crate::error::{BnError, Result};
use crate::model::{evaluate, Evaluation, LossKind, ModelState};
use crate::reference::{ReferenceDirection, ReferenceKind};

/// Default spacing of full-state snapshots along a trajectory.
pub const DEFAULT_SNAPSHOT_EVERY: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Vector,
    Recurrence,
}

impl std::str::FromStr for Mode {
    type Err = BnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vector" => Ok(Mode::Vector),
            "recurrence" => Ok(Mode::Recurrence),
            other => Err(BnError::Config {
                path: "mode".into(),
                message: format!("unknown mode `{other}` (expected vector or recurrence)"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GdConfig {
    pub eta: f64,
    pub eta_alpha: f64,
    pub max_iters: usize,
    pub loss: LossKind,
    pub mode: Mode,
}

impl GdConfig {
    pub fn new(eta: f64, eta_alpha: f64, max_iters: usize, loss: LossKind, mode: Mode) -> Self {
        GdConfig {
            eta,
            eta_alpha,
            max_iters,
            loss,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(BnError::Config {
                path: "gd.eta".into(),
                message: format!("must be a finite nonnegative number, got {}", self.eta),
            });
        }
        if !(self.eta_alpha >= 0.0 && self.eta_alpha.is_finite()) {
            return Err(BnError::Config {
                path: "gd.eta_alpha".into(),
                message: format!(
                    "must be a finite nonnegative number, got {}",
                    self.eta_alpha
                ),
            });
        }
        if self.max_iters == 0 {
            return Err(BnError::Config {
                path: "gd.max_iters".into(),
                message: "must be at least 1".into(),
            });
        }
        if self.mode == Mode::Recurrence && self.loss != LossKind::Square {
            return Err(BnError::Config {
                path: "gd.mode".into(),
                message: "recurrence mode requires the square loss".into(),
            });
        }
        Ok(())
    }
}

/// Per-step directional statistics. `ratio` is `None` off the
/// positive-alignment branch (rho <= 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionalStats {
    pub rho: f64,
    pub rho_perp: f64,
    pub ratio: Option<f64>,
    pub rho_perp_sigma: f64,
    /// eta alpha rho / ||w||^2.
    pub eff_lr_euclid: f64,
    /// eta alpha rho / ||w||_Sigma^2.
    pub eff_lr_sigma: f64,
    pub w_norm: f64,
    pub w_sigma_norm: f64,
    pub alpha: f64,
    pub risk: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Edge {
    Rising,
    Falling,
    Flat,
    /// The ratio is undefined at t or t+1.
    Gap,
}

impl Edge {
    pub fn as_str(self) -> &'static str {
        match self {
            Edge::Rising => "rising",
            Edge::Falling => "falling",
            Edge::Flat => "flat",
            Edge::Gap => "gap",
        }
    }
}

impl std::str::FromStr for Edge {
    type Err = BnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rising" => Ok(Edge::Rising),
            "falling" => Ok(Edge::Falling),
            "flat" => Ok(Edge::Flat),
            "gap" => Ok(Edge::Gap),
            other => Err(BnError::Parse {
                line: 0,
                message: format!("unknown edge label `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub t: usize,
    pub stats: DirectionalStats,
    pub edge: Edge,
    pub snapshot: Option<ModelState>,
}

/// Directional state advanced by the closed-form whitened recurrence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecurrenceState {
    pub ratio: f64,
    pub alpha: f64,
    pub rho: f64,
    pub w_norm: f64,
}

/// One simultaneous update of (w, alpha) from gradients at the input state.
pub fn step_vector(state: &ModelState, ds: &Dataset, cfg: &GdConfig) -> Result<ModelState> {
    let ev = evaluate(state, ds, cfg.loss)?;
    Ok(apply_step(state, &ev, cfg))
}

fn apply_step(state: &ModelState, ev: &Evaluation, cfg: &GdConfig) -> ModelState {
    let mut w = state.w.clone();
    w.axpy(-cfg.eta, &ev.grad_w, 1.0);
    ModelState {
        w,
        alpha: state.alpha - cfg.eta_alpha * ev.grad_alpha,
    }
}

/// Effective learning rate of the whitened recurrence.
pub fn recurrence_eff_lr(s: &RecurrenceState, eta: f64) -> f64 {
    eta * s.alpha * s.rho / (s.w_norm * s.w_norm)
}

/// Advances (ratio, alpha, ||w||) by the three closed-form recurrences of
/// whitened square-loss GD; rho is recovered from the new ratio.
pub fn step_recurrence(
    s: &RecurrenceState,
    hatw_norm: f64,
    cfg: &GdConfig,
) -> Result<RecurrenceState> {
    if !(s.rho > 0.0) {
        return Err(BnError::BranchViolation { rho: s.rho });
    }
    let eh = recurrence_eff_lr(s, cfg.eta);
    let r = s.ratio;
    let ratio = (eh - 1.0).abs() / (1.0 + eh * r * r) * r;
    let alpha = s.alpha + cfg.eta_alpha * (s.rho - s.alpha);
    let rho_perp = r * s.rho;
    let w2 = s.w_norm * s.w_norm
        + cfg.eta * cfg.eta * s.alpha * s.alpha * rho_perp * rho_perp / (s.w_norm * s.w_norm);
    Ok(RecurrenceState {
        ratio,
        alpha,
        rho: hatw_norm / (1.0 + ratio * ratio).sqrt(),
        w_norm: w2.sqrt(),
    })
}

fn stats_from_eval(
    state: &ModelState,
    ev: &Evaluation,
    ds: &Dataset,
    reference: &ReferenceDirection,
    cfg: &GdConfig,
) -> Result<DirectionalStats> {
    let w_norm = state.w.norm();
    if !(w_norm > 0.0) {
        return Err(BnError::Degenerate { norm: w_norm });
    }
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
    let s = ev.w_sigma_norm;
    let coef = sigma_inner(&state.w, w_hat, ds)? / (s * s);
    let mut resid_s = w_hat.clone();
    resid_s.axpy(-coef, &state.w, 1.0);
    let rho_perp_sigma = crate::data::sigma_norm(&resid_s, ds)?;
    Ok(DirectionalStats {
        rho,
        rho_perp,
        ratio,
        rho_perp_sigma,
        eff_lr_euclid: cfg.eta * state.alpha * rho / (w_norm * w_norm),
        eff_lr_sigma: cfg.eta * state.alpha * rho / (s * s),
        w_norm,
        w_sigma_norm: s,
        alpha: state.alpha,
        risk: ev.risk,
    })
}

pub fn directional_stats(
    state: &ModelState,
    ds: &Dataset,
    reference: &ReferenceDirection,
    cfg: &GdConfig,
) -> Result<DirectionalStats> {
    let ev = evaluate(state, ds, cfg.loss)?;
    stats_from_eval(state, &ev, ds, reference, cfg)
}

/// Statistics implied by a recurrence state on whitened data, where the
/// Euclidean and Sigma geometries coincide and the square-loss risk is
/// ((alpha - rho)^2 + rho_perp^2 + 1 - ||w_hat||^2) / 2.
pub fn recurrence_stats(s: &RecurrenceState, hatw_norm: f64, cfg: &GdConfig) -> DirectionalStats {
    let rho_perp = s.ratio * s.rho;
    let eff = recurrence_eff_lr(s, cfg.eta);
    DirectionalStats {
        rho: s.rho,
        rho_perp,
        ratio: Some(s.ratio),
        rho_perp_sigma: rho_perp,
        eff_lr_euclid: eff,
        eff_lr_sigma: eff,
        w_norm: s.w_norm,
        w_sigma_norm: s.w_norm,
        alpha: s.alpha,
        risk: 0.5 * ((s.alpha - s.rho).powi(2) + rho_perp * rho_perp + 1.0 - hatw_norm * hatw_norm),
    }
}

/// Maximal run of identical edge labels, `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: Edge,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeAnalysis {
    pub labels: Vec<Edge>,
    pub segments: Vec<Segment>,
    /// First Rising step after a Falling run.
    pub t1: Option<usize>,
    /// First Falling step after the Rising run that starts at t1.
    pub t2: Option<usize>,
}

/// Label of step t -> t+1 under a multiplicative tolerance.
pub fn edge_label(cur: Option<f64>, next: Option<f64>, tol: f64) -> Edge {
    match (cur, next) {
        (Some(a), Some(b)) => {
            if b > a * (1.0 + tol) {
                Edge::Rising
            } else if b < a * (1.0 - tol) {
                Edge::Falling
            } else {
                Edge::Flat
            }
        }
        _ => Edge::Gap,
    }
}

/// Online onset/stabilization detector shared by the classifier and the
/// simulator loop.
#[derive(Debug, Clone, Default)]
struct EventTracker {
    last: Option<Edge>,
    t1: Option<usize>,
    t2: Option<usize>,
}

impl EventTracker {
    /// Feeds label of step t; returns true if t is t1 or t2.
    fn push(&mut self, t: usize, e: Edge) -> bool {
        let mut event = false;
        match e {
            Edge::Rising => {
                if self.t1.is_none() && self.last == Some(Edge::Falling) {
                    self.t1 = Some(t);
                    event = true;
                }
                self.last = Some(Edge::Rising);
            }
            Edge::Falling => {
                if self.t1.is_some() && self.t2.is_none() && self.last == Some(Edge::Rising) {
                    self.t2 = Some(t);
                    event = true;
                }
                self.last = Some(Edge::Falling);
            }
            Edge::Flat => {}
            Edge::Gap => self.last = None,
        }
        event
    }
}

pub fn classify_ratios(ratios: &[Option<f64>], tol: f64) -> Result<EdgeAnalysis> {
    if ratios.is_empty() {
        return Err(BnError::EmptyTrajectory);
    }
    let n = ratios.len();
    let mut labels = Vec::with_capacity(n);
    let mut tracker = EventTracker::default();
    for t in 0..n {
        let e = if t + 1 < n {
            edge_label(ratios[t], ratios[t + 1], tol)
        } else {
            Edge::Flat
        };
        tracker.push(t, e);
        labels.push(e);
    }
    let mut segments: Vec<Segment> = Vec::new();
    for (t, &e) in labels.iter().enumerate() {
        match segments.last_mut() {
            Some(s) if s.kind == e => s.end = t,
            _ => segments.push(Segment {
                kind: e,
                start: t,
                end: t,
            }),
        }
    }
    Ok(EdgeAnalysis {
        labels,
        segments,
        t1: tracker.t1,
        t2: tracker.t2,
    })
}

/// Labels each step Rising if ratio_{t+1} > ratio_t (1 + tol), Falling if
/// ratio_{t+1} < ratio_t (1 - tol), Flat otherwise (Gap where a ratio is
/// undefined). The final record has no successor and is labelled Flat.
pub fn classify_edges(traj: &mut [TrajectoryRecord], tol: f64) -> Result<EdgeAnalysis> {
    let ratios: Vec<Option<f64>> = traj.iter().map(|r| r.stats.ratio).collect();
    let a = classify_ratios(&ratios, tol)?;
    for (r, &e) in traj.iter_mut().zip(a.labels.iter()) {
        r.edge = e;
    }
    Ok(a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrajectoryEvents {
    pub t1: Option<usize>,
    pub t2: Option<usize>,
    /// First t in [t1, t2] with alpha_t >= rho_t.
    pub phi: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
    pub events: TrajectoryEvents,
    pub final_state: Option<ModelState>,
}

impl Trajectory {
    pub fn ratios(&self) -> Vec<Option<f64>> {
        self.records.iter().map(|r| r.stats.ratio).collect()
    }
}

/// True when Sigma restricted to span(X) is the identity to `tol`.
pub fn is_whitened(ds: &Dataset, tol: f64) -> Result<bool> {
    let sb = spectrum_bounds(ds)?;
    Ok(sb.eigenvalues.iter().all(|l| (l - 1.0).abs() <= tol))
}

pub fn run_trajectory(
    init: &ModelState,
    ds: &Dataset,
    reference: &ReferenceDirection,
    cfg: &GdConfig,
) -> Result<Trajectory> {
    run_trajectory_with(init, ds, reference, cfg, DEFAULT_SNAPSHOT_EVERY)
}

fn phi_check(events: &mut TrajectoryEvents, t: usize, s: &DirectionalStats) -> bool {
    if events.t1.map_or(false, |t1| t >= t1) && events.phi.is_none() && s.alpha >= s.rho {
        let before_t2 = events.t2.map_or(true, |t2| t <= t2);
        if before_t2 {
            events.phi = Some(t);
            return true;
        }
    }
    false
}

/// Runs `cfg.max_iters` records (t = 0 .. max_iters-1). Snapshots of the full
/// state are kept every `snapshot_every` steps and at t1, t2 and phi
/// (vector mode only; recurrence mode keeps the initial state).
pub fn run_trajectory_with(
    init: &ModelState,
    ds: &Dataset,
    reference: &ReferenceDirection,
    cfg: &GdConfig,
    snapshot_every: usize,
) -> Result<Trajectory> {
    cfg.validate()?;
    if !(init.alpha > 0.0) {
        return Err(BnError::Precondition(format!(
            "initial alpha must be positive, got {}",
            init.alpha
        )));
    }
    let every = snapshot_every.max(1);
    let mut records: Vec<TrajectoryRecord> = Vec::with_capacity(cfg.max_iters);
    let mut tracker = EventTracker::default();
    let mut events = TrajectoryEvents::default();
    let at = |t: usize| {
        move |e: BnError| BnError::AtIteration {
            iteration: t,
            source: Box::new(e),
        }
    };
    match cfg.mode {
        Mode::Vector => {
            let mut state = init.clone();
            let mut ev = evaluate(&state, ds, cfg.loss).map_err(at(0))?;
            let mut stats = stats_from_eval(&state, &ev, ds, reference, cfg).map_err(at(0))?;
            for t in 0..cfg.max_iters {
                let last = t + 1 == cfg.max_iters;
                let mut snap = t % every == 0;
                let (edge, next) = if last {
                    (Edge::Flat, None)
                } else {
                    let ns = apply_step(&state, &ev, cfg);
                    let nev = evaluate(&ns, ds, cfg.loss).map_err(at(t + 1))?;
                    let nstats =
                        stats_from_eval(&ns, &nev, ds, reference, cfg).map_err(at(t + 1))?;
                    let e = edge_label(stats.ratio, nstats.ratio, 0.0);
                    (e, Some((ns, nev, nstats)))
                };
                if tracker.push(t, edge) {
                    snap = true;
                }
                events.t1 = tracker.t1;
                events.t2 = tracker.t2;
                if phi_check(&mut events, t, &stats) {
                    snap = true;
                }
                records.push(TrajectoryRecord {
                    t,
                    stats,
                    edge,
                    snapshot: if snap { Some(state.clone()) } else { None },
                });
                match next {
                    Some((ns, nev, nstats)) => {
                        state = ns;
                        ev = nev;
                        stats = nstats;
                    }
                    None => break,
                }
            }
            Ok(Trajectory {
                records,
                events,
                final_state: Some(state),
            })
        }
        Mode::Recurrence => {
            if reference.kind != ReferenceKind::LeastSquares || !is_whitened(ds, 1e-8)? {
                return Err(BnError::Precondition(
                    "recurrence mode needs whitened data and the least-squares reference".into(),
                ));
            }
            let hn = reference.norm();
            let s0 = directional_stats(init, ds, reference, cfg).map_err(at(0))?;
            let ratio = s0.ratio.ok_or(BnError::BranchViolation { rho: s0.rho })?;
            let mut rs = RecurrenceState {
                ratio,
                alpha: init.alpha,
                rho: s0.rho,
                w_norm: s0.w_norm,
            };
            let mut stats = s0;
            for t in 0..cfg.max_iters {
                let last = t + 1 == cfg.max_iters;
                let (edge, next) = if last {
                    (Edge::Flat, None)
                } else {
                    let nrs = step_recurrence(&rs, hn, cfg).map_err(at(t))?;
                    let nstats = recurrence_stats(&nrs, hn, cfg);
                    (
                        edge_label(stats.ratio, nstats.ratio, 0.0),
                        Some((nrs, nstats)),
                    )
                };
                tracker.push(t, edge);
                events.t1 = tracker.t1;
                events.t2 = tracker.t2;
                phi_check(&mut events, t, &stats);
                records.push(TrajectoryRecord {
                    t,
                    stats,
                    edge,
                    snapshot: if t == 0 { Some(init.clone()) } else { None },
                });
                match next {
                    Some((nrs, nstats)) => {
                        rs = nrs;
                        stats = nstats;
                    }
                    None => break,
                }
            }
            Ok(Trajectory {
                records,
                events,
                final_state: None,
            })
        }
    }
}

/// Initial state in span(X) with a prescribed ratio rho_perp / rho, norm and
/// scale: w = ||w|| (cos a * w_hat/||w_hat|| + sin a * u) with tan a = ratio
/// and u a seeded unit vector in span(X) orthogonal to w_hat.
pub fn state_with_ratio(
    ds: &Dataset,
    reference: &ReferenceDirection,
    ratio: f64,
    w_norm: f64,
    alpha: f64,
    seed: u64,
) -> Result<ModelState> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    if !(ratio >= 0.0 && w_norm > 0.0) {
        return Err(BnError::Precondition(
            "ratio must be >= 0 and ||w|| > 0".into(),
        ));
    }
    let sb = spectrum_bounds(ds)?;
    let e = &reference.w_hat / reference.norm();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut u = DVector::zeros(ds.d());
    for _ in 0..8 {
        let c = DVector::from_fn(sb.rank(), |_, _| StandardNormal.sample(&mut rng));
        let mut v: DVector<f64> = &sb.span_basis * c;
        let p = v.dot(&e);
        v.axpy(-p, &e, 1.0);
        let nv = v.norm();
        if nv > 1e-8 {
            u = v / nv;
            break;
        }
    }
    if ratio > 0.0 && u.norm() == 0.0 {
        return Err(BnError::Precondition(
            "span(X) has no direction orthogonal to w_hat".into(),
        ));
    }
    let a = ratio.atan();
    let w = (e * a.cos() + u * a.sin()) * w_norm;
    Ok(ModelState::new(w, alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpnessEstimate {
    pub value: f64,
    pub iterations: usize,
    /// False when the iteration cap was hit before the tolerance was met.
    pub converged: bool,
}

pub const SHARPNESS_TOL: f64 = 1e-4;
pub const SHARPNESS_MAX_ITERS: usize = 500;

/// Central-difference Hessian-vector product of a gradient map.
pub fn fd_hvp<F>(grad: &F, theta: &DVector<f64>, v: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let gp = grad(&(theta + v * h))?;
    let gm = grad(&(theta - v * h))?;
    Ok((gp - gm) / (2.0 * h))
}

/// Dominant Hessian eigenvalue by power iteration on finite-difference
/// Hessian-vector products.
pub fn power_iteration_fd<F>(grad: &F, theta: &DVector<f64>, h: f64) -> Result<SharpnessEstimate>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let m = theta.len();
    let mut v = DVector::from_fn(m, |i, _| 1.0 + (i as f64 + 1.0).sqrt().fract());
    v /= v.norm();
    let mut prev = f64::NAN;
    let mut calm = 0;
    for k in 1..=SHARPNESS_MAX_ITERS {
        let hv = fd_hvp(grad, theta, &v, h)?;
        let lam = v.dot(&hv);
        let nrm = hv.norm();
        if nrm == 0.0 {
            return Ok(SharpnessEstimate {
                value: 0.0,
                iterations: k,
                converged: true,
            });
        }
        v = hv / nrm;
        if (lam - prev).abs() <= SHARPNESS_TOL * lam.abs() {
            calm += 1;
            if calm >= 2 {
                return Ok(SharpnessEstimate {
                    value: lam,
                    iterations: k,
                    converged: true,
                });
            }
        } else {
            calm = 0;
        }
        prev = lam;
    }
    Ok(SharpnessEstimate {
        value: prev,
        iterations: SHARPNESS_MAX_ITERS,
        converged: false,
    })
}

fn pack(state: &ModelState) -> DVector<f64> {
    let d = state.w.len();
    DVector::from_fn(d + 1, |i, _| if i < d { state.w[i] } else { state.alpha })
}

fn unpack(theta: &DVector<f64>) -> ModelState {
    let d = theta.len() - 1;
    ModelState::new(theta.rows(0, d).into_owned(), theta[d])
}

/// Gradient of R in the stacked coordinates (w, alpha).
pub fn stacked_gradient(
    theta: &DVector<f64>,
    ds: &Dataset,
    loss: LossKind,
) -> Result<DVector<f64>> {
    let st = unpack(theta);
    let ev = evaluate(&st, ds, loss)?;
    let d = st.w.len();
    Ok(DVector::from_fn(d + 1, |i, _| {
        if i < d {
            ev.grad_w[i]
        } else {
            ev.grad_alpha
        }
    }))
}

fn fd_step(theta: &DVector<f64>) -> f64 {
    1e-5 * theta.norm().max(1.0)
}

/// Top Hessian eigenvalue of R in (w, alpha).
pub fn sharpness(state: &ModelState, ds: &Dataset, loss: LossKind) -> Result<SharpnessEstimate> {
    let theta = pack(state);
    let g = |th: &DVector<f64>| stacked_gradient(th, ds, loss);
    power_iteration_fd(&g, &theta, fd_step(&theta))
}

/// Dense symmetric finite-difference Hessian in (w, alpha).
pub fn dense_fd_hessian(state: &ModelState, ds: &Dataset, loss: LossKind) -> Result<DMatrix<f64>> {
    let theta = pack(state);
    let m = theta.len();
    let h = fd_step(&theta);
    let g = |th: &DVector<f64>| stacked_gradient(th, ds, loss);
    let mut hm = DMatrix::zeros(m, m);
    for j in 0..m {
        let mut e = DVector::zeros(m);
        e[j] = 1.0;
        let col = fd_hvp(&g, &theta, &e, h)?;
        hm.set_column(j, &col);
    }
    Ok((&hm + hm.transpose()) * 0.5)
}
