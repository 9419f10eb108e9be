//! Experiment orchestration behind the command line: simulation with spike
//! summaries, the clause scoreboard, parallel sweeps, constants reports and
//! dataset generation. Everything here is deterministic in the config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{OutputFormat, RunConfig};
use crate::data::{dataset_to_json, spectrum_bounds};
use crate::dynamics::{
    classify_ratios, is_whitened, run_trajectory_with, sharpness, step_vector, Edge, Mode,
    Trajectory, TrajectoryEvents,
};
use crate::error::{BnError, Result};
use crate::io::{
    dataset_to_csv, trajectory_to_json, write_trajectory_csv, RunMetadata, TrajectoryFile,
    TrajectoryRow,
};
use crate::linear::{
    direction_conditions_at, onset_analysis, stabilization_analysis, OnsetCondition, OnsetInputs,
    Verdict,
};
use crate::logistic::{
    all_margins_active, eq3_and_exit_thresholds, logistic_constants, logistic_risk_bounds,
    long_horizon_campaign, margin_gradient_bounds, margin_offset, CampaignOptions, CampaignStatus,
    ConstantInputs,
};
use crate::model::{evaluate, LossKind};
use crate::reference::ReferenceKind;

/// Tolerance of the whitened risk decomposition.
pub const RISK_IDENTITY_TOL: f64 = 1e-10;
/// Tolerance of the direction-condition outcome checks on rho_perp^2.
pub const DIRECTION_TOL: f64 = 1e-10;
/// Recovery level relative to the pre-onset trough.
pub const RECOVERY_FACTOR: f64 = 1.01;
/// rho_perp / ||w_hat|| below which a vector-mode direction is numerically
/// aligned; ratio flips at that level are roundoff, not rising edges.
pub const ROUNDOFF_RHO_PERP: f64 = 1e-12;
pub const THREADS_ENV: &str = "BNSPIKE_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeSummary {
    /// Step of the lowest risk before the onset (the whole run without one).
    pub t_descent_end: usize,
    pub trough_risk_before: f64,
    pub peak_risk: f64,
    pub peak_t: Option<usize>,
    pub recovery_time: Option<usize>,
    pub spike_ratio: f64,
    /// First Rising step (after a Falling run when there is one).
    pub onset: Option<usize>,
    /// First non-Rising step after the onset.
    pub segment_end: Option<usize>,
}

/// Trough = min risk on [0, onset]; peak = max risk over the Rising segment
/// [onset, segment_end]; recovery = first t after the peak with
/// risk <= trough * 1.01.
pub fn spike_summary(rows: &[TrajectoryRow]) -> Result<SpikeSummary> {
    if rows.is_empty() {
        return Err(BnError::EmptyTrajectory);
    }
    let mut last_nonflat = None;
    let mut onset = None;
    for (t, r) in rows.iter().enumerate() {
        match r.edge {
            Edge::Rising => {
                if last_nonflat == Some(Edge::Falling) {
                    onset = Some(t);
                    break;
                }
                last_nonflat = Some(Edge::Rising);
            }
            Edge::Falling => last_nonflat = Some(Edge::Falling),
            Edge::Gap => last_nonflat = None,
            Edge::Flat => {}
        }
    }
    let onset = onset.or_else(|| rows.iter().position(|r| r.edge == Edge::Rising));
    let argmin = |a: usize, b: usize| {
        (a..=b).fold(a, |m, t| if rows[t].risk < rows[m].risk { t } else { m })
    };
    let Some(t1) = onset else {
        let m = argmin(0, rows.len() - 1);
        return Ok(SpikeSummary {
            t_descent_end: m,
            trough_risk_before: rows[m].risk,
            peak_risk: rows[m].risk,
            peak_t: None,
            recovery_time: None,
            spike_ratio: 1.0,
            onset: None,
            segment_end: None,
        });
    };
    let m = argmin(0, t1);
    let trough = rows[m].risk;
    let seg_end = (t1..rows.len())
        .find(|&t| rows[t].edge != Edge::Rising)
        .unwrap_or(rows.len() - 1);
    let peak_t = (t1..=seg_end).fold(t1, |p, t| if rows[t].risk > rows[p].risk { t } else { p });
    let peak = rows[peak_t].risk;
    let recovery_time =
        (peak_t + 1..rows.len()).find(|&t| rows[t].risk <= trough * RECOVERY_FACTOR);
    Ok(SpikeSummary {
        t_descent_end: m,
        trough_risk_before: trough,
        peak_risk: peak,
        peak_t: Some(peak_t),
        recovery_time,
        spike_ratio: peak / trough,
        onset: Some(t1),
        segment_end: Some(seg_end),
    })
}

/// Config as stored in run metadata: everything that determines the
/// numbers, without output placement or sweep grids.
pub fn metadata_config(cfg: &RunConfig) -> serde_json::Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    if let Some(m) = v.as_object_mut() {
        m.remove("output");
        m.remove("grid");
    }
    v
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub config: RunConfig,
    pub experiment: crate::config::Experiment,
    pub trajectory: Trajectory,
    pub rows: Vec<TrajectoryRow>,
    pub summary: SpikeSummary,
    pub metadata: RunMetadata,
}

pub fn simulate(cfg: &RunConfig) -> Result<Simulation> {
    cfg.validate()?;
    let exp = cfg.build()?;
    let sharp_every = cfg
        .analysis
        .sharpness_every
        .filter(|_| exp.gd.mode == Mode::Vector);
    let snap = sharp_every.unwrap_or(cfg.gd.snapshot_every);
    let traj = run_trajectory_with(&exp.init, &exp.ds, &exp.reference, &exp.gd, snap)?;
    let mut rows = Vec::with_capacity(traj.records.len());
    for r in &traj.records {
        let sh = match (sharp_every, &r.snapshot) {
            (Some(k), Some(st)) if r.t % k == 0 => Some(
                sharpness(st, &exp.ds, exp.gd.loss)
                    .map_err(|e| BnError::AtIteration {
                        iteration: r.t,
                        source: Box::new(e),
                    })?
                    .value,
            ),
            _ => None,
        };
        rows.push(TrajectoryRow::from_record(r, sh));
    }
    let summary = spike_summary(&rows)?;
    let metadata = RunMetadata::new(cfg.seed, exp.ds.content_hash(), metadata_config(cfg));
    Ok(Simulation {
        config: cfg.clone(),
        experiment: exp,
        trajectory: traj,
        rows,
        summary,
        metadata,
    })
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    metadata: &'a RunMetadata,
    events: &'a TrajectoryEvents,
    spike: &'a SpikeSummary,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

/// Writes trajectory.{csv,json} and summary.json under `dir`; returns the
/// trajectory path.
pub fn write_simulation(sim: &Simulation, dir: &Path, format: OutputFormat) -> Result<PathBuf> {
    let path = match format {
        OutputFormat::Csv => {
            let mut buf = Vec::new();
            write_trajectory_csv(&mut buf, &sim.rows)?;
            let p = dir.join("trajectory.csv");
            write_file(&p, &buf)?;
            p
        }
        OutputFormat::Json => {
            let file = TrajectoryFile {
                metadata: Some(sim.metadata.clone()),
                events: sim.trajectory.events,
                records: sim.rows.clone(),
            };
            let p = dir.join("trajectory.json");
            write_file(&p, trajectory_to_json(&file).as_bytes())?;
            p
        }
    };
    let summary = SummaryFile {
        metadata: &sim.metadata,
        events: &sim.trajectory.events,
        spike: &sim.summary,
    };
    write_file(
        &dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)
            .expect("summary serializes")
            .as_bytes(),
    )?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClauseResult {
    pub id: String,
    pub verdict: Verdict,
    /// Number of steps (or instances) the clause was evaluated on.
    pub applicable: usize,
    pub violations: usize,
    pub detail: String,
    /// Reported for context; never affects the exit status.
    pub informational: bool,
}

impl ClauseResult {
    fn new(id: &str, applicable: usize, violations: usize, detail: String) -> Self {
        ClauseResult {
            id: id.into(),
            verdict: if applicable == 0 {
                Verdict::NotApplicable
            } else {
                Verdict::from_bool(violations == 0)
            },
            applicable,
            violations,
            detail,
            informational: false,
        }
    }

    fn not_applicable(id: &str, why: impl Into<String>) -> Self {
        ClauseResult {
            id: id.into(),
            verdict: Verdict::NotApplicable,
            applicable: 0,
            violations: 0,
            detail: why.into(),
            informational: false,
        }
    }

    fn informational(mut self) -> Self {
        self.informational = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scoreboard {
    pub metadata: Option<RunMetadata>,
    pub clauses: Vec<ClauseResult>,
}

impl Scoreboard {
    /// True iff some applicable, non-informational clause fails.
    pub fn failed(&self) -> bool {
        self.clauses
            .iter()
            .any(|c| !c.informational && c.verdict == Verdict::Fails)
    }

    pub fn get(&self, id: &str) -> Option<&ClauseResult> {
        self.clauses.iter().find(|c| c.id == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scoreboard serializes")
    }

    pub fn table(&self) -> String {
        let w = self
            .clauses
            .iter()
            .map(|c| c.id.len())
            .max()
            .unwrap_or(6)
            .max(6);
        let mut s = format!(
            "{:<w$}  {:<14}  {:>9}  {:>10}  detail\n",
            "clause", "verdict", "evaluated", "violations"
        );
        for c in &self.clauses {
            let v = match (c.verdict, c.informational) {
                (Verdict::Holds, false) => "PASS",
                (Verdict::Fails, false) => "FAIL",
                (Verdict::NotApplicable, _) => "N/A",
                (Verdict::Holds, true) => "pass (info)",
                (Verdict::Fails, true) => "fail (info)",
            };
            let _ = writeln!(
                s,
                "{:<w$}  {:<14}  {:>9}  {:>10}  {}",
                c.id, v, c.applicable, c.violations, c.detail
            );
        }
        let _ = writeln!(
            s,
            "overall: {}",
            if self.failed() { "FAIL" } else { "PASS" }
        );
        s
    }
}

fn risk_identity_clause(rows: &[TrajectoryRow], hatw_norm: f64) -> ClauseResult {
    let h2 = hatw_norm * hatw_norm;
    let mut worst = 0.0f64;
    let mut bad = 0;
    for r in rows {
        let recon = (r.alpha - r.rho).powi(2) + r.rho_perp * r.rho_perp + 1.0 - h2;
        let dev = (2.0 * r.risk - recon).abs();
        worst = worst.max(dev);
        if !(dev < RISK_IDENTITY_TOL) {
            bad += 1;
        }
    }
    ClauseResult::new(
        "risk_decomposition",
        rows.len(),
        bad,
        format!("max |2 risk - ((alpha-rho)^2 + rho_perp^2 + 1 - |w_hat|^2)| = {worst:.3e}"),
    )
}

fn norm_monotone_clause(rows: &[TrajectoryRow]) -> ClauseResult {
    let bad = rows
        .windows(2)
        .filter(|w| w[1].w_norm < w[0].w_norm * (1.0 - 1e-12))
        .count();
    ClauseResult::new(
        "norm_monotone",
        rows.len().saturating_sub(1),
        bad,
        String::new(),
    )
}

/// Duration, shape and peak clauses for the rising edge starting at t1.
fn stabilization_clauses(
    rows: &[TrajectoryRow],
    labels: &[Edge],
    t1: Option<usize>,
    hatw_norm: f64,
) -> Result<Vec<ClauseResult>> {
    let ids = ["stabilization_time", "shape_bounds", "peak_ratio_below_one"];
    let Some(t1) = t1 else {
        return Ok(ids
            .iter()
            .map(|id| ClauseResult::not_applicable(id, "no rising edge after a falling run"))
            .collect());
    };
    let mut recs: Vec<_> = rows.iter().map(|r| r.to_record()).collect();
    for (r, &e) in recs.iter_mut().zip(labels) {
        r.edge = e;
    }
    let rep = stabilization_analysis(&recs, Some(t1), hatw_norm)?;
    let time = match rep.t2_within_bound {
        Some(ok) => ClauseResult::new(
            ids[0],
            1,
            usize::from(!ok),
            format!(
                "t1 = {t1}, t2 = {:?}, bound t1 + {}",
                rep.observed_t2, rep.delta_t1
            ),
        ),
        None if (t1 as u64).saturating_add(rep.delta_t1) < (rows.len() - 1) as u64 => {
            ClauseResult::new(
                ids[0],
                1,
                1,
                format!(
                    "no falling step within t1 + {} = {}",
                    rep.delta_t1,
                    t1 as u64 + rep.delta_t1
                ),
            )
        }
        None => ClauseResult::not_applicable(ids[0], "horizon ends before the duration bound"),
    };
    let shape = ClauseResult::new(
        ids[1],
        rep.steps_checked,
        rep.shape_bound_violations.len(),
        format!(
            "[t1, t2] = [{t1}, {:?}], phi = {:?}, violations before t2: {}",
            rep.observed_t2,
            rep.phi,
            rep.violations_before_t2()
        ),
    );
    let peak = ClauseResult::new(
        ids[2],
        1,
        usize::from(!rep.peak_below_one()),
        format!(
            "peak ratio {:.6} (before t2: {:.6})",
            rep.peak_ratio, rep.peak_ratio_before_t2
        ),
    );
    Ok(vec![time, shape, peak])
}

/// Scoreboard of a fresh run described by `cfg`.
pub fn verify_config(cfg: &RunConfig) -> Result<(Simulation, Scoreboard)> {
    let sim = simulate(cfg)?;
    let exp = &sim.experiment;
    let rows = &sim.rows;
    let an = &cfg.analysis;
    let mut clauses = Vec::new();
    let whitened_square = exp.gd.loss == LossKind::Square
        && exp.reference.kind == ReferenceKind::LeastSquares
        && is_whitened(&exp.ds, 1e-8)?;
    let hn = exp.reference.norm();
    let labels: Vec<Edge> = rows.iter().map(|r| r.edge).collect();
    let events = sim.trajectory.events;

    if an.risk_identity {
        clauses.push(if whitened_square {
            risk_identity_clause(rows, hn)
        } else {
            ClauseResult::not_applicable(
                "risk_decomposition",
                "needs whitened data and the square loss",
            )
        });
    }
    clauses.push(norm_monotone_clause(rows));

    let mut delayed = false;
    if an.onset {
        let s0 = &sim.trajectory.records[0].stats;
        let ids = ["no_rising_edge", "onset_within_bound"];
        match (whitened_square, s0.ratio) {
            (true, Some(r)) => {
                let rep = onset_analysis(&OnsetInputs {
                    t0: 0,
                    ratio: r,
                    alpha: s0.alpha,
                    rho: s0.rho,
                    w_norm: s0.w_norm,
                    hatw_norm: hn,
                    eta: exp.gd.eta,
                    eta_alpha: exp.gd.eta_alpha,
                })
                .with_observed(events.t1);
                match rep.condition {
                    OnsetCondition::NoRisingEdge => {
                        let floor = ROUNDOFF_RHO_PERP * hn;
                        let (mut rising, mut roundoff) = (0, 0);
                        for (t, e) in labels.iter().enumerate() {
                            if *e == Edge::Rising {
                                if rows.get(t + 1).is_some_and(|r| r.rho_perp <= floor) {
                                    roundoff += 1;
                                } else {
                                    rising += 1;
                                }
                            }
                        }
                        clauses.push(ClauseResult::new(
                            ids[0],
                            rows.len(),
                            rising,
                            format!(
                                "eta/|w|^2 = {:.4e} < {:.4e}; {roundoff} roundoff flips with rho_perp <= {floor:.1e} ignored",
                                rep.eta_over_w2, rep.no_rise_threshold
                            ),
                        ));
                        clauses.push(ClauseResult::not_applicable(
                            ids[1],
                            "no-rising-edge regime",
                        ));
                    }
                    OnsetCondition::DelayedOnset => {
                        delayed = true;
                        clauses.push(ClauseResult::not_applicable(ids[0], "delayed-onset regime"));
                        let ok = rep.onset_within_bound == Some(true);
                        clauses.push(ClauseResult::new(
                            ids[1],
                            1,
                            usize::from(!ok),
                            format!("t1 = {:?}, window (0, {}]", events.t1, rep.delta_t0),
                        ));
                    }
                    OnsetCondition::Indeterminate => {
                        let why = rep.indeterminate_reason.unwrap_or_default();
                        clauses.push(ClauseResult::not_applicable(ids[0], why.clone()));
                        clauses.push(ClauseResult::not_applicable(ids[1], why));
                    }
                }
            }
            _ => {
                for id in ids {
                    clauses.push(ClauseResult::not_applicable(
                        id,
                        "needs whitened square loss with rho_0 > 0",
                    ));
                }
            }
        }
    }
    if an.stabilization {
        if delayed {
            clauses.extend(stabilization_clauses(rows, &labels, events.t1, hn)?);
        } else {
            for id in ["stabilization_time", "shape_bounds", "peak_ratio_below_one"] {
                clauses.push(ClauseResult::not_applicable(
                    id,
                    "premises of the delayed-onset regime not met",
                ));
            }
        }
    }

    let need_states =
        an.direction_conditions || (an.logistic_bounds && exp.gd.loss == LossKind::Logistic);
    if need_states && exp.gd.mode == Mode::Vector {
        let logistic = an.logistic_bounds && exp.gd.loss == LossKind::Logistic;
        let sb = spectrum_bounds(&exp.ds)?;
        let active = logistic && all_margins_active(&exp.ds, &exp.reference, 1e-8);
        let b = if active {
            margin_offset(&exp.ds, &exp.reference).ok().map(|m| m.b)
        } else {
            None
        };
        let s0 = &sim.trajectory.records[0].stats;
        let consts = logistic_constants(&ConstantInputs {
            alpha0: exp.init.alpha,
            gamma: exp.reference.gamma,
            lambda_min: sb.lambda_min,
            lambda_max: sb.lambda_max,
            w0_norm: s0.w_norm,
            rho0_perp_sigma: s0.rho_perp_sigma,
            eta: exp.gd.eta,
            eta_alpha: exp.gd.eta_alpha,
            margin_offset_b: b,
        });
        let (mut conv_n, mut conv_bad, mut div_n, mut div_bad) = (0, 0, 0, 0);
        let mut ledger: BTreeMap<&'static str, (usize, usize, bool)> = BTreeMap::new();
        let (mut up_n, mut up_bad, mut lo_n, mut lo_bad) = (0, 0, 0, 0);
        let mut eq3_hits = 0;
        let mut state = exp.init.clone();
        let recs = &sim.trajectory.records;
        for t in 0..recs.len() {
            let at = |e: BnError| BnError::AtIteration {
                iteration: t,
                source: Box::new(e),
            };
            let s = &recs[t].stats;
            if an.direction_conditions && t + 1 < recs.len() {
                let g = evaluate(&state, &exp.ds, exp.gd.loss).map_err(at)?.grad_w;
                let l5 = direction_conditions_at(&state, &g, &exp.reference, exp.gd.eta);
                let p0 = s.rho_perp * s.rho_perp;
                let p1 = recs[t + 1].stats.rho_perp.powi(2);
                if l5.converge.holds() {
                    conv_n += 1;
                    if p1 > p0 + DIRECTION_TOL {
                        conv_bad += 1;
                    }
                }
                if l5.diverge.holds() {
                    div_n += 1;
                    if p1 < p0 - DIRECTION_TOL {
                        div_bad += 1;
                    }
                }
            }
            if active {
                let l = margin_gradient_bounds(&state, &exp.ds, &exp.reference, &sb).map_err(at)?;
                for e in &l.entries {
                    let slot = ledger.entry(e.name).or_insert((0, 0, e.diagnostic));
                    if e.verdict != Verdict::NotApplicable {
                        slot.0 += 1;
                        if e.verdict == Verdict::Fails {
                            slot.1 += 1;
                        }
                    }
                }
                let rb = logistic_risk_bounds(
                    s,
                    exp.ds.n(),
                    exp.reference.gamma,
                    sb.lambda_min,
                    &consts,
                );
                if let Some(u) = rb.upper {
                    up_n += 1;
                    if rb.risk > u + crate::logistic::BOUND_SLACK {
                        up_bad += 1;
                    }
                }
                if let Some(lw) = rb.lower {
                    lo_n += 1;
                    if rb.risk < lw - crate::logistic::BOUND_SLACK {
                        lo_bad += 1;
                    }
                }
                if eq3_and_exit_thresholds(s, &consts, exp.gd.eta, sb.lambda_min)
                    .diverge_criterion_holds
                    == Verdict::Holds
                {
                    eq3_hits += 1;
                }
            }
            if t + 1 < recs.len() {
                state = step_vector(&state, &exp.ds, &exp.gd).map_err(at)?;
            }
        }
        if an.direction_conditions {
            clauses.push(ClauseResult::new(
                "direction_convergence",
                conv_n,
                conv_bad,
                format!("steps meeting the convergence condition: {conv_n}"),
            ));
            clauses.push(ClauseResult::new(
                "direction_divergence",
                div_n,
                div_bad,
                format!("steps meeting the divergence condition: {div_n}"),
            ));
        }
        if logistic {
            if active {
                clauses.push(ClauseResult::new(
                    "risk_upper_bound",
                    up_n,
                    up_bad,
                    String::new(),
                ));
                clauses.push(match b {
                    Some(b) => ClauseResult::new(
                        "risk_lower_bound",
                        lo_n,
                        lo_bad,
                        format!("margin offset b = {b:.6e}"),
                    ),
                    None => ClauseResult::not_applicable(
                        "risk_lower_bound",
                        "margin offset unavailable",
                    ),
                });
                for (name, (n, bad, diag)) in ledger {
                    let c = ClauseResult::new(name, n, bad, String::new());
                    clauses.push(if diag { c.informational() } else { c });
                }
                clauses.push(
                    ClauseResult::new(
                        "divergence_criterion_steps",
                        recs.len(),
                        0,
                        format!("{eq3_hits} steps meet it"),
                    )
                    .informational(),
                );
            } else {
                clauses.push(ClauseResult::not_applicable(
                    "logistic_bounds",
                    "not every sample is on the margin boundary",
                ));
            }
        }
    } else if need_states {
        clauses.push(ClauseResult::not_applicable(
            "direction_convergence",
            "needs vector mode",
        ));
        clauses.push(ClauseResult::not_applicable(
            "direction_divergence",
            "needs vector mode",
        ));
    }

    if an.campaign {
        if exp.gd.loss != LossKind::Logistic || exp.gd.mode != Mode::Vector {
            clauses.push(ClauseResult::not_applicable(
                "campaign",
                "needs the logistic loss in vector mode",
            ));
        } else {
            let rep = long_horizon_campaign(
                &exp.ds,
                &exp.init,
                &exp.gd,
                &CampaignOptions {
                    force: an.campaign_force,
                    max_horizon: an.campaign_max_horizon,
                },
            )?;
            let status = match &rep.status {
                CampaignStatus::Rejected { reason } => format!("rejected: {reason}"),
                CampaignStatus::Unsatisfiable { lower, upper, .. } => {
                    format!("unsatisfiable window: lower {lower:.3e} > upper {upper:.3e}")
                }
                CampaignStatus::OutsideWindow {
                    eta_over_w2,
                    lower,
                    upper,
                    ..
                } => {
                    format!("eta/|w0|^2 = {eta_over_w2:.3e} outside [{lower:.3e}, {upper:.3e}]")
                }
                CampaignStatus::Ran => format!("ran {} steps", rep.horizon),
            };
            clauses.push(
                ClauseResult::not_applicable("campaign_status", status.clone()).informational(),
            );
            let ran = rep.status == CampaignStatus::Ran || rep.forced;
            let mark = |c: ClauseResult| if rep.forced { c.informational() } else { c };
            let from = |id: &str, c: &Option<crate::logistic::ClauseReport>| match c {
                Some(c) if ran => mark(ClauseResult {
                    id: id.into(),
                    verdict: c.verdict,
                    applicable: c.applicable_steps,
                    violations: usize::from(c.first_failure.is_some()),
                    detail: c
                        .first_failure
                        .map(|t| format!("first failure at t = {t}"))
                        .unwrap_or_default(),
                    informational: false,
                }),
                _ => ClauseResult::not_applicable(id, status.clone()),
            };
            clauses.push(from("entry_rho_perp_decreasing", &rep.clause1_decreasing));
            clauses.push(match rep.clause2 {
                Some(v) if ran => mark(ClauseResult {
                    id: "entry_reached".into(),
                    verdict: v,
                    applicable: 1,
                    violations: usize::from(v == Verdict::Fails),
                    detail: format!("t0 = {:?}", rep.clause2_t0),
                    informational: false,
                }),
                _ => ClauseResult::not_applicable("entry_reached", status.clone()),
            });
            clauses.push(from("entry_exit_behaviour", &rep.clause3_exit));
            clauses.push(from("alpha_corridor", &rep.alpha_corridor));
        }
    }
    let board = Scoreboard {
        metadata: Some(sim.metadata.clone()),
        clauses,
    };
    Ok((sim, board))
}

/// Replays the clauses that a stored trajectory supports. The run is read as
/// a whitened square-loss run unless `loss` says otherwise; ||w_hat|| is
/// recovered from rho^2 + rho_perp^2.
pub fn verify_rows(
    rows: &[TrajectoryRow],
    loss: LossKind,
    metadata: Option<RunMetadata>,
) -> Result<Scoreboard> {
    if rows.is_empty() {
        return Err(BnError::EmptyTrajectory);
    }
    let ratios: Vec<Option<f64>> = rows.iter().map(|r| r.ratio).collect();
    let replay = classify_ratios(&ratios, 0.0)?;
    let mismatched = rows
        .iter()
        .zip(&replay.labels)
        .filter(|(r, e)| r.edge != **e)
        .count();
    let mut clauses = vec![ClauseResult::new(
        "edge_labels_consistent",
        rows.len(),
        mismatched,
        String::new(),
    )];
    let hn = (rows[0].rho.powi(2) + rows[0].rho_perp.powi(2)).sqrt();
    if loss == LossKind::Square {
        clauses.push(risk_identity_clause(rows, hn));
    } else {
        clauses.push(ClauseResult::not_applicable(
            "risk_decomposition",
            "logistic run",
        ));
    }
    clauses.push(norm_monotone_clause(rows));
    if loss == LossKind::Square {
        clauses.extend(stabilization_clauses(rows, &replay.labels, replay.t1, hn)?);
    }
    Ok(Scoreboard { metadata, clauses })
}

/// Worker count from BNSPIKE_THREADS; None when unset.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .map(Some)
            .ok_or_else(|| BnError::Config {
                path: THREADS_ENV.into(),
                message: format!("expected a positive integer, got `{v}`"),
            }),
        Err(_) => Ok(None),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub index: usize,
    pub eta: f64,
    pub eta_alpha: f64,
    pub seed: u64,
    pub error: Option<String>,
    pub rising_steps: usize,
    pub t1: Option<usize>,
    pub t2: Option<usize>,
    pub spike_ratio: Option<f64>,
    pub verdicts: BTreeMap<String, Verdict>,
    pub failed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClauseTally {
    pub holds: usize,
    pub fails: usize,
    pub not_applicable: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub schema_version: u32,
    pub base: serde_json::Value,
    pub cell_count: usize,
    pub errors: usize,
    pub failed_cells: usize,
    pub clauses: BTreeMap<String, ClauseTally>,
    pub cells: Vec<CellResult>,
}

/// Cell configs in row-major order over (eta, eta_alpha, seed).
pub fn sweep_cells(cfg: &RunConfig) -> Result<Vec<RunConfig>> {
    let grid = cfg.grid.clone().ok_or_else(|| BnError::Config {
        path: "grid".into(),
        message: "sweep needs a [grid] section".into(),
    })?;
    let etas = if grid.eta.is_empty() {
        vec![cfg.gd.eta]
    } else {
        grid.eta
    };
    let eas = if grid.eta_alpha.is_empty() {
        vec![cfg.gd.eta_alpha]
    } else {
        grid.eta_alpha
    };
    let seeds = if grid.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        grid.seeds
    };
    let mut out = Vec::new();
    for &e in &etas {
        for &ea in &eas {
            for &s in &seeds {
                let mut c = cfg.clone();
                c.grid = None;
                c.gd.eta = e;
                c.gd.eta_alpha = ea;
                c.seed = s;
                out.push(c);
            }
        }
    }
    if out.len() > crate::config::MAX_SWEEP_CELLS {
        return Err(BnError::Config {
            path: "grid".into(),
            message: format!("{} cells exceed the limit", out.len()),
        });
    }
    Ok(out)
}

pub fn cell_dir(root: &Path, index: usize) -> PathBuf {
    root.join("cells").join(format!("cell_{index:05}"))
}

fn run_cell(index: usize, cfg: &RunConfig, root: &Path) -> CellResult {
    let mut res = CellResult {
        index,
        eta: cfg.gd.eta,
        eta_alpha: cfg.gd.eta_alpha,
        seed: cfg.seed,
        error: None,
        rising_steps: 0,
        t1: None,
        t2: None,
        spike_ratio: None,
        verdicts: BTreeMap::new(),
        failed: false,
    };
    let dir = cell_dir(root, index);
    let outcome = verify_config(cfg).and_then(|(sim, board)| {
        write_simulation(&sim, &dir, cfg.output.format)?;
        write_file(&dir.join("scoreboard.json"), board.to_json().as_bytes())?;
        Ok((sim, board))
    });
    match outcome {
        Ok((sim, board)) => {
            res.rising_steps = sim.rows.iter().filter(|r| r.edge == Edge::Rising).count();
            res.t1 = sim.trajectory.events.t1;
            res.t2 = sim.trajectory.events.t2;
            res.spike_ratio = Some(sim.summary.spike_ratio);
            res.failed = board.failed();
            for c in board.clauses.iter().filter(|c| !c.informational) {
                res.verdicts.insert(c.id.clone(), c.verdict);
            }
        }
        Err(e) => {
            res.error = Some(e.to_string());
            let _ = write_file(&dir.join("error.txt"), e.to_string().as_bytes());
        }
    }
    res
}

/// Runs every grid cell (in parallel, at most `threads` workers), writes
/// per-cell artifacts to cell-unique directories and reduces to one summary
/// in cell order. Failing cells are recorded and the sweep continues.
pub fn sweep(cfg: &RunConfig, root: &Path, threads: Option<usize>) -> Result<SweepSummary> {
    let cells = sweep_cells(cfg)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| BnError::Io(e.to_string()))?;
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, c)| run_cell(i, c, root))
            .collect()
    });
    let mut tallies: BTreeMap<String, ClauseTally> = BTreeMap::new();
    for r in &results {
        for (id, v) in &r.verdicts {
            let t = tallies.entry(id.clone()).or_default();
            match v {
                Verdict::Holds => t.holds += 1,
                Verdict::Fails => t.fails += 1,
                Verdict::NotApplicable => t.not_applicable += 1,
            }
        }
    }
    let summary = SweepSummary {
        schema_version: crate::io::TRAJECTORY_SCHEMA_VERSION,
        base: metadata_config(cfg),
        cell_count: results.len(),
        errors: results.iter().filter(|r| r.error.is_some()).count(),
        failed_cells: results.iter().filter(|r| r.failed).count(),
        clauses: tallies,
        cells: results,
    };
    write_file(
        &root.join("sweep_summary.json"),
        serde_json::to_string_pretty(&summary)
            .expect("summary serializes")
            .as_bytes(),
    )?;
    Ok(summary)
}

/// Spectrum, reference and theorem constants of the configured instance.
pub fn constants_report(cfg: &RunConfig) -> Result<serde_json::Value> {
    let exp = cfg.build()?;
    let sb = spectrum_bounds(&exp.ds)?;
    let s0 = crate::dynamics::directional_stats(&exp.init, &exp.ds, &exp.reference, &exp.gd)?;
    let mut out = serde_json::json!({
        "dataset_hash": exp.ds.content_hash(),
        "lambda_min": sb.lambda_min,
        "lambda_max": sb.lambda_max,
        "condition_number": sb.condition_number(),
        "rank": sb.rank(),
        "reference_norm": exp.reference.norm(),
        "gamma": exp.reference.gamma,
        "initial": s0,
    });
    let m = out.as_object_mut().expect("object");
    match exp.gd.loss {
        LossKind::Square => {
            if let Some(r) = s0.ratio {
                let inp = OnsetInputs {
                    t0: 0,
                    ratio: r,
                    alpha: s0.alpha,
                    rho: s0.rho,
                    w_norm: s0.w_norm,
                    hatw_norm: exp.reference.norm(),
                    eta: exp.gd.eta,
                    eta_alpha: exp.gd.eta_alpha,
                };
                m.insert(
                    "onset".into(),
                    serde_json::to_value(onset_analysis(&inp)).expect("json"),
                );
                let (dt1, _) = crate::linear::delta_t1(r, s0.rho, s0.alpha, exp.reference.norm());
                m.insert("delta_t1_at_init".into(), dt1.into());
            }
        }
        LossKind::Logistic => {
            let b = margin_offset(&exp.ds, &exp.reference);
            let inp = ConstantInputs {
                alpha0: exp.init.alpha,
                gamma: exp.reference.gamma,
                lambda_min: sb.lambda_min,
                lambda_max: sb.lambda_max,
                w0_norm: s0.w_norm,
                rho0_perp_sigma: s0.rho_perp_sigma,
                eta: exp.gd.eta,
                eta_alpha: exp.gd.eta_alpha,
                margin_offset_b: b.as_ref().ok().map(|m| m.b),
            };
            let c = logistic_constants(&inp);
            let lower = c.c_low * inp.gamma;
            let upper = c.c_high / inp.gamma;
            m.insert("inputs".into(), serde_json::to_value(inp).expect("json"));
            m.insert("constants".into(), serde_json::to_value(&c).expect("json"));
            m.insert(
                "window".into(),
                serde_json::json!({
                    "lower": lower,
                    "upper": upper,
                    "satisfiable": lower <= upper,
                    "eta_over_w2": inp.eta / (inp.w0_norm * inp.w0_norm),
                    "eta_alpha_max": c.c_alpha * inp.w0_norm * inp.w0_norm / (inp.eta * inp.gamma),
                }),
            );
            if let Err(e) = b {
                m.insert("margin_offset_error".into(), e.to_string().into());
            }
            m.insert(
                "active_margins".into(),
                all_margins_active(&exp.ds, &exp.reference, 1e-8).into(),
            );
        }
    }
    Ok(out)
}

/// Writes the configured dataset as dataset.json or dataset.csv.
pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    let ds = cfg.build_dataset()?;
    let (name, body) = match cfg.output.format {
        OutputFormat::Json => (
            "dataset.json",
            dataset_to_json(
                &ds,
                Some(
                    serde_json::json!({ "seed": cfg.seed, "dataset": cfg.dataset, "hash": ds.content_hash() }),
                ),
            ),
        ),
        OutputFormat::Csv => ("dataset.csv", dataset_to_csv(&ds)),
    };
    let p = dir.join(name);
    write_file(&p, body.as_bytes())?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: usize, risk: f64, edge: Edge) -> TrajectoryRow {
        TrajectoryRow {
            t,
            rho: 1.0,
            rho_perp: 0.1,
            ratio: Some(0.1),
            alpha: 0.5,
            w_norm: 1.0,
            eff_lr_euclid: 0.0,
            eff_lr_sigma: 0.0,
            risk,
            edge,
            sharpness: None,
        }
    }

    #[test]
    fn spike_summary_without_rising_edge() {
        let rows: Vec<_> = (0..5)
            .map(|t| row(t, 1.0 / (t + 1) as f64, Edge::Falling))
            .collect();
        let s = spike_summary(&rows).unwrap();
        assert_eq!(s.spike_ratio, 1.0);
        assert!(s.peak_t.is_none());
        assert_eq!(s.t_descent_end, 4);
    }

    #[test]
    fn spike_summary_hand_example() {
        use Edge::*;
        let risks = [1.0, 0.5, 0.4, 0.6, 0.9, 0.7, 0.402, 0.3];
        let edges = [
            Falling, Falling, Rising, Rising, Falling, Falling, Falling, Flat,
        ];
        let rows: Vec<_> = (0..8).map(|t| row(t, risks[t], edges[t])).collect();
        let s = spike_summary(&rows).unwrap();
        assert_eq!(s.onset, Some(2));
        assert_eq!(s.segment_end, Some(4));
        assert_eq!(s.t_descent_end, 2);
        assert_eq!(s.peak_t, Some(4));
        assert_eq!(s.recovery_time, Some(6));
        assert!((s.spike_ratio - 0.9 / 0.4).abs() < 1e-15);
        assert!(s.peak_risk >= s.trough_risk_before);
    }

    #[test]
    fn scoreboard_exit_policy() {
        let mut b = Scoreboard {
            metadata: None,
            clauses: vec![
                ClauseResult::new("a", 3, 0, String::new()),
                ClauseResult::not_applicable("b", "x"),
                ClauseResult::new("c", 2, 1, String::new()).informational(),
            ],
        };
        assert!(!b.failed());
        b.clauses.push(ClauseResult::new("d", 1, 1, String::new()));
        assert!(b.failed());
        assert!(b.table().contains("FAIL"));
    }
}
