//! Dependency-free SVG emission: three aligned 900x300 panels (risk,
//! effective learning rates, ratio) with Rising segments shaded, plus the
//! raw series as CSV.

use std::fmt::Write as _;

use crate::dynamics::{classify_ratios, Edge};
use crate::error::Result;
use crate::io::{fmt_f64, TrajectoryRow};

pub const PANEL_WIDTH: f64 = 900.0;
pub const PANEL_HEIGHT: f64 = 300.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 70.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 40.0;
const TICKS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlotOptions {
    /// log10 axis for the risk panel; nonpositive values are dropped.
    pub log_risk: bool,
    /// Tolerance of the replayed edge classifier.
    pub edge_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotOutput {
    pub svg: String,
    pub data_csv: String,
    /// Shaded Rising spans [start, end] in iteration units; `end` is the
    /// first step that is no longer Rising.
    pub rising_spans: Vec<(usize, usize)>,
}

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn fit(vals: impl Iterator<Item = f64>) -> Axis {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in vals.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Axis { lo: 0.0, hi: 1.0 };
        }
        if hi - lo <= f64::EPSILON * hi.abs().max(lo.abs()) {
            let pad = if lo == 0.0 { 1.0 } else { 0.05 * lo.abs() };
            return Axis {
                lo: lo - pad,
                hi: hi + pad,
            };
        }
        Axis { lo, hi }
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

struct Panel {
    x: Axis,
    y0: f64,
}

impl Panel {
    fn px(&self, t: f64) -> f64 {
        LEFT + self.x.frac(t) * (PANEL_WIDTH - LEFT - RIGHT)
    }
    fn py(&self, axis: &Axis, v: f64) -> f64 {
        self.y0 + TOP + (1.0 - axis.frac(v)) * (PANEL_HEIGHT - TOP - BOTTOM)
    }
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-3..1e4).contains(&a) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s.is_empty() || s == "-" {
            "0".into()
        } else {
            s.into()
        }
    } else {
        format!("{v:.2e}")
    }
}

/// Polyline pieces broken at missing values; single isolated points become
/// circles.
fn series(
    out: &mut String,
    p: &Panel,
    axis: &Axis,
    pts: &[(f64, Option<f64>)],
    color: &str,
    dash: bool,
) {
    let mut pieces: Vec<Vec<(f64, f64)>> = vec![Vec::new()];
    for &(t, v) in pts {
        match v.filter(|v| v.is_finite()) {
            Some(v) => pieces.last_mut().unwrap().push((p.px(t), p.py(axis, v))),
            None => {
                if !pieces.last().unwrap().is_empty() {
                    pieces.push(Vec::new());
                }
            }
        }
    }
    let dash = if dash {
        " stroke-dasharray=\"5,3\""
    } else {
        ""
    };
    for piece in pieces.iter().filter(|p| !p.is_empty()) {
        if piece.len() == 1 {
            let _ = writeln!(
                out,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\"/>",
                piece[0].0, piece[0].1
            );
        } else {
            let coords: Vec<String> = piece
                .iter()
                .map(|(x, y)| format!("{x:.2},{y:.2}"))
                .collect();
            let _ = writeln!(
                out,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash} points=\"{}\"/>",
                coords.join(" ")
            );
        }
    }
}

fn frame(
    out: &mut String,
    p: &Panel,
    axis: &Axis,
    title: &str,
    log: bool,
    spans: &[(usize, usize)],
    right: Option<(&Axis, &str)>,
) {
    let x1 = PANEL_WIDTH - RIGHT;
    let ytop = p.y0 + TOP;
    let ybot = p.y0 + PANEL_HEIGHT - BOTTOM;
    for &(a, b) in spans {
        let xa = p.px(a as f64);
        let xb = p.px(b as f64);
        let _ = writeln!(
            out,
            "<rect class=\"rising\" data-t-start=\"{a}\" data-t-end=\"{b}\" x=\"{:.2}\" y=\"{ytop:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#f4b6b6\" fill-opacity=\"0.5\"/>",
            xa,
            (xb - xa).max(1.0),
            ybot - ytop
        );
    }
    let _ = writeln!(
        out,
        "<rect x=\"{LEFT:.2}\" y=\"{ytop:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#333\"/>",
        x1 - LEFT,
        ybot - ytop
    );
    let _ = writeln!(out, "<text x=\"{LEFT:.2}\" y=\"{:.2}\" font-size=\"14\" font-family=\"sans-serif\">{title}</text>", p.y0 + 20.0);
    for k in 0..=TICKS {
        let f = k as f64 / TICKS as f64;
        let tv = p.x.lo + f * (p.x.hi - p.x.lo);
        let xp = p.px(tv);
        let _ = writeln!(
            out,
            "<line x1=\"{xp:.2}\" y1=\"{ybot:.2}\" x2=\"{xp:.2}\" y2=\"{:.2}\" stroke=\"#333\"/><text x=\"{xp:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\" font-family=\"sans-serif\">{}</text>",
            ybot + 5.0,
            ybot + 18.0,
            tick_label(tv)
        );
        let yv = axis.lo + f * (axis.hi - axis.lo);
        let yp = p.py(axis, yv);
        let label = if log {
            format!("1e{}", tick_label(yv))
        } else {
            tick_label(yv)
        };
        let _ = writeln!(
            out,
            "<line x1=\"{:.2}\" y1=\"{yp:.2}\" x2=\"{LEFT:.2}\" y2=\"{yp:.2}\" stroke=\"#333\"/><text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\" font-family=\"sans-serif\">{label}</text>",
            LEFT - 5.0,
            LEFT - 8.0,
            yp + 4.0
        );
        if let Some((ra, _)) = right {
            let rv = ra.lo + f * (ra.hi - ra.lo);
            let rp = p.py(ra, rv);
            let _ = writeln!(
                out,
                "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" font-family=\"sans-serif\" fill=\"#7a4\">{}</text>",
                x1 + 5.0,
                rp + 4.0,
                tick_label(rv)
            );
        }
    }
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\" font-family=\"sans-serif\">t</text>",
        (LEFT + x1) / 2.0,
        ybot + 34.0
    );
    if let Some((_, name)) = right {
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" font-family=\"sans-serif\" fill=\"#7a4\">{name}</text>",
            x1 + 5.0,
            p.y0 + 20.0
        );
    }
}

pub fn render(rows: &[TrajectoryRow], opts: &PlotOptions) -> Result<PlotOutput> {
    let ratios: Vec<Option<f64>> = rows.iter().map(|r| r.ratio).collect();
    let analysis = classify_ratios(&ratios, opts.edge_tol)?;
    let last = rows.len() - 1;
    let spans: Vec<(usize, usize)> = analysis
        .segments
        .iter()
        .filter(|s| s.kind == Edge::Rising)
        .map(|s| (rows[s.start].t, rows[(s.end + 1).min(last)].t))
        .collect();
    let ts: Vec<f64> = rows.iter().map(|r| r.t as f64).collect();
    let x = Axis::fit(ts.iter().cloned());
    let risk_val = |r: &TrajectoryRow| {
        if opts.log_risk {
            (r.risk > 0.0).then(|| r.risk.log10())
        } else {
            Some(r.risk)
        }
    };
    let mut svg = String::new();
    let total_h = 3.0 * PANEL_HEIGHT;
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{PANEL_WIDTH}\" height=\"{total_h}\" viewBox=\"0 0 {PANEL_WIDTH} {total_h}\">"
    );
    let _ = writeln!(svg, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");

    let p0 = Panel {
        x: Axis { lo: x.lo, hi: x.hi },
        y0: 0.0,
    };
    let risk_pts: Vec<(f64, Option<f64>)> =
        rows.iter().map(|r| (r.t as f64, risk_val(r))).collect();
    let ra = Axis::fit(risk_pts.iter().filter_map(|p| p.1));
    let title = if opts.log_risk {
        "risk (log10)"
    } else {
        "risk"
    };
    frame(&mut svg, &p0, &ra, title, opts.log_risk, &spans, None);
    series(&mut svg, &p0, &ra, &risk_pts, "#1f4e9c", false);

    let p1 = Panel {
        x: Axis { lo: x.lo, hi: x.hi },
        y0: PANEL_HEIGHT,
    };
    let e1: Vec<(f64, Option<f64>)> = rows
        .iter()
        .map(|r| (r.t as f64, Some(r.eff_lr_euclid)))
        .collect();
    let e2: Vec<(f64, Option<f64>)> = rows
        .iter()
        .map(|r| (r.t as f64, Some(r.eff_lr_sigma)))
        .collect();
    let ea = Axis::fit(e1.iter().chain(e2.iter()).filter_map(|p| p.1));
    let sharp: Vec<(f64, Option<f64>)> = rows.iter().map(|r| (r.t as f64, r.sharpness)).collect();
    let has_sharp = sharp.iter().any(|p| p.1.is_some());
    let sa = Axis::fit(sharp.iter().filter_map(|p| p.1));
    frame(
        &mut svg,
        &p1,
        &ea,
        "effective learning rate: euclidean (orange), sigma (purple)",
        false,
        &spans,
        has_sharp.then_some((&sa, "sharpness")),
    );
    series(&mut svg, &p1, &ea, &e1, "#e07b00", false);
    series(&mut svg, &p1, &ea, &e2, "#7b3fa0", true);
    if has_sharp {
        series(&mut svg, &p1, &sa, &sharp, "#7a4", true);
    }

    let p2 = Panel {
        x,
        y0: 2.0 * PANEL_HEIGHT,
    };
    let rp: Vec<(f64, Option<f64>)> = rows.iter().map(|r| (r.t as f64, r.ratio)).collect();
    let rax = Axis::fit(rp.iter().filter_map(|p| p.1));
    frame(
        &mut svg,
        &p2,
        &rax,
        "ratio rho_perp / rho (rising edges shaded)",
        false,
        &spans,
        None,
    );
    series(&mut svg, &p2, &rax, &rp, "#b22222", false);
    svg.push_str("</svg>\n");

    let mut csv = String::from("t,risk,eff_lr_euclid,eff_lr_sigma,ratio,edge");
    if has_sharp {
        csv.push_str(",sharpness");
    }
    csv.push('\n');
    for (r, e) in rows.iter().zip(analysis.labels.iter()) {
        let _ = write!(
            csv,
            "{},{},{},{},{},{}",
            r.t,
            fmt_f64(r.risk),
            fmt_f64(r.eff_lr_euclid),
            fmt_f64(r.eff_lr_sigma),
            r.ratio.map(fmt_f64).unwrap_or_default(),
            e.as_str()
        );
        if has_sharp {
            let _ = write!(csv, ",{}", r.sharpness.map(fmt_f64).unwrap_or_default());
        }
        csv.push('\n');
    }
    Ok(PlotOutput {
        svg,
        data_csv: csv,
        rising_spans: spans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(ratios: &[f64]) -> Vec<TrajectoryRow> {
        ratios
            .iter()
            .enumerate()
            .map(|(t, &r)| TrajectoryRow {
                t,
                rho: 1.0,
                rho_perp: r,
                ratio: Some(r),
                alpha: 0.5,
                w_norm: 1.0,
                eff_lr_euclid: 1.0 + t as f64,
                eff_lr_sigma: 1.0,
                risk: 0.1 * (t as f64 + 1.0),
                edge: Edge::Flat,
                sharpness: None,
            })
            .collect()
    }

    #[test]
    fn single_record_gives_points() {
        let out = render(&rows(&[0.3]), &PlotOptions::default()).unwrap();
        assert!(out.svg.starts_with("<svg"));
        assert!(out.svg.trim_end().ends_with("</svg>"));
        assert!(out.svg.contains("<circle"));
        assert!(!out.svg.contains("<polyline"));
        assert!(!out.svg.contains("NaN"));
        assert_eq!(out.data_csv.lines().count(), 2);
    }

    #[test]
    fn rising_shading_spans_onset_to_stabilization() {
        // labels: F R R F (flat last) -> t1 = 1, t2 = 3
        let out = render(&rows(&[0.5, 0.4, 0.45, 0.5, 0.4]), &PlotOptions::default()).unwrap();
        assert_eq!(out.rising_spans, vec![(1, 3)]);
        assert_eq!(
            out.svg
                .matches("data-t-start=\"1\" data-t-end=\"3\"")
                .count(),
            3
        );
    }

    #[test]
    fn log_scale_drops_nonpositive() {
        let mut r = rows(&[0.5, 0.4, 0.3]);
        r[1].risk = 0.0;
        r[2].ratio = None;
        let out = render(
            &r,
            &PlotOptions {
                log_risk: true,
                edge_tol: 0.0,
            },
        )
        .unwrap();
        assert!(out.svg.contains("risk (log10)"));
        assert!(!out.svg.contains("NaN") && !out.svg.contains("inf"));
    }

    #[test]
    fn deterministic_output() {
        let r = rows(&[0.5, 0.4, 0.45, 0.5, 0.4]);
        assert_eq!(
            render(&r, &PlotOptions::default()).unwrap(),
            render(&r, &PlotOptions::default()).unwrap()
        );
    }
}
