//! Trajectory and dataset persistence. Floats are written in shortest
//! round-trip form so that re-reading reproduces the exact bits and repeated
//! runs produce identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dynamics::{DirectionalStats, Edge, TrajectoryEvents, TrajectoryRecord};
use crate::error::{BnError, Result};

pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 10] = [
    "t",
    "rho",
    "rho_perp",
    "ratio",
    "alpha",
    "w_norm",
    "eff_lr_euclid",
    "eff_lr_sigma",
    "risk",
    "edge",
];
/// Optional trailing column, present when sharpness was estimated.
pub const SHARPNESS_COLUMN: &str = "sharpness";

/// One persisted trajectory row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: usize,
    pub rho: f64,
    pub rho_perp: f64,
    pub ratio: Option<f64>,
    pub alpha: f64,
    pub w_norm: f64,
    pub eff_lr_euclid: f64,
    pub eff_lr_sigma: f64,
    pub risk: f64,
    pub edge: Edge,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sharpness: Option<f64>,
}

impl TrajectoryRow {
    pub fn from_record(r: &TrajectoryRecord, sharpness: Option<f64>) -> Self {
        let s = &r.stats;
        TrajectoryRow {
            t: r.t,
            rho: s.rho,
            rho_perp: s.rho_perp,
            ratio: s.ratio,
            alpha: s.alpha,
            w_norm: s.w_norm,
            eff_lr_euclid: s.eff_lr_euclid,
            eff_lr_sigma: s.eff_lr_sigma,
            risk: s.risk,
            edge: r.edge,
            sharpness,
        }
    }

    /// Record view for replaying analyses on a stored trajectory. Quantities
    /// that are not persisted (Sigma-norms) are NaN.
    pub fn to_record(&self) -> TrajectoryRecord {
        TrajectoryRecord {
            t: self.t,
            stats: DirectionalStats {
                rho: self.rho,
                rho_perp: self.rho_perp,
                ratio: self.ratio,
                rho_perp_sigma: f64::NAN,
                eff_lr_euclid: self.eff_lr_euclid,
                eff_lr_sigma: self.eff_lr_sigma,
                w_norm: self.w_norm,
                w_sigma_norm: f64::NAN,
                alpha: self.alpha,
                risk: self.risk,
            },
            edge: self.edge,
            snapshot: None,
        }
    }
}

/// Shortest round-trip decimal; exponent form outside [1e-4, 1e15).
pub fn fmt_f64(x: f64) -> String {
    let a = x.abs();
    if x == 0.0 || (a >= 1e-4 && a < 1e15) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

pub fn write_trajectory_csv<W: Write>(w: W, rows: &[TrajectoryRow]) -> Result<()> {
    let with_sharp = rows.iter().any(|r| r.sharpness.is_some());
    let mut wr = csv::WriterBuilder::new().from_writer(w);
    let mut header: Vec<&str> = CSV_COLUMNS.to_vec();
    if with_sharp {
        header.push(SHARPNESS_COLUMN);
    }
    let io = |e: csv::Error| BnError::Io(e.to_string());
    wr.write_record(&header).map_err(io)?;
    for r in rows {
        let mut rec = vec![
            r.t.to_string(),
            fmt_f64(r.rho),
            fmt_f64(r.rho_perp),
            r.ratio.map(fmt_f64).unwrap_or_default(),
            fmt_f64(r.alpha),
            fmt_f64(r.w_norm),
            fmt_f64(r.eff_lr_euclid),
            fmt_f64(r.eff_lr_sigma),
            fmt_f64(r.risk),
            r.edge.as_str().to_string(),
        ];
        if with_sharp {
            rec.push(r.sharpness.map(fmt_f64).unwrap_or_default());
        }
        wr.write_record(&rec).map_err(io)?;
    }
    wr.flush()?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(s: &str, col: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse::<T>().map_err(|e| BnError::Parse {
        line,
        message: format!("column `{col}`: cannot parse `{s}`: {e}"),
    })
}

pub fn read_trajectory_csv<R: Read>(r: R) -> Result<Vec<TrajectoryRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
    let mut rows = Vec::new();
    let mut with_sharp = false;
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| BnError::Parse {
            line: e.position().map_or(k + 1, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(k + 1, |p| p.line() as usize);
        if k == 0 {
            let cols: Vec<&str> = rec.iter().collect();
            with_sharp =
                cols.len() == CSV_COLUMNS.len() + 1 && cols[CSV_COLUMNS.len()] == SHARPNESS_COLUMN;
            if cols[..cols.len().min(CSV_COLUMNS.len())] != CSV_COLUMNS[..]
                || (cols.len() > CSV_COLUMNS.len() && !with_sharp)
            {
                return Err(BnError::Parse {
                    line,
                    message: format!("unexpected header; expected {}", CSV_COLUMNS.join(",")),
                });
            }
            continue;
        }
        let want = CSV_COLUMNS.len() + usize::from(with_sharp);
        if rec.len() != want {
            return Err(BnError::Parse {
                line,
                message: format!("expected {want} fields, got {}", rec.len()),
            });
        }
        let f = |i: usize| -> Result<f64> { parse_field::<f64>(&rec[i], CSV_COLUMNS[i], line) };
        let ratio = if rec[3].is_empty() { None } else { Some(f(3)?) };
        let edge: Edge = rec[9].parse().map_err(|_| BnError::Parse {
            line,
            message: format!("column `edge`: unknown label `{}`", &rec[9]),
        })?;
        let sharpness = if with_sharp && !rec[10].is_empty() {
            Some(parse_field::<f64>(&rec[10], SHARPNESS_COLUMN, line)?)
        } else {
            None
        };
        rows.push(TrajectoryRow {
            t: parse_field(&rec[0], "t", line)?,
            rho: f(1)?,
            rho_perp: f(2)?,
            ratio,
            alpha: f(4)?,
            w_norm: f(5)?,
            eff_lr_euclid: f(6)?,
            eff_lr_sigma: f(7)?,
            risk: f(8)?,
            edge,
            sharpness,
        });
    }
    Ok(rows)
}

/// Run provenance stored next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub schema_version: u32,
    pub seed: u64,
    pub dataset_hash: String,
    pub config: serde_json::Value,
    pub generator: String,
}

impl RunMetadata {
    pub fn new(seed: u64, dataset_hash: String, config: serde_json::Value) -> Self {
        RunMetadata {
            schema_version: TRAJECTORY_SCHEMA_VERSION,
            seed,
            dataset_hash,
            config,
            generator: format!("bnspike {}", env!("CARGO_PKG_VERSION")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub metadata: Option<RunMetadata>,
    pub events: TrajectoryEvents,
    pub records: Vec<TrajectoryRow>,
}

pub fn trajectory_to_json(file: &TrajectoryFile) -> String {
    serde_json::to_string_pretty(file).expect("trajectory serializes")
}

pub fn trajectory_from_json(text: &str) -> Result<TrajectoryFile> {
    serde_json::from_str(text).map_err(|e| BnError::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}

/// Reads a trajectory by extension (.json or CSV otherwise).
pub fn load_trajectory(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let text = std::fs::read_to_string(path)?;
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        Ok(trajectory_from_json(&text)?.records)
    } else {
        read_trajectory_csv(text.as_bytes())
    }
}

/// Samples as rows, label last, with a header.
pub fn dataset_to_csv(ds: &Dataset) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..ds.d())
        .map(|k| format!("x{k}"))
        .chain(["y".to_string()])
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..ds.n() {
        let row: Vec<String> = ds
            .x()
            .column(i)
            .iter()
            .map(|v| fmt_f64(*v))
            .chain([fmt_f64(ds.y()[i])])
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{dataset_from_csv, gen_gaussian_dataset};

    fn row(t: usize, ratio: Option<f64>, edge: Edge) -> TrajectoryRow {
        TrajectoryRow {
            t,
            rho: 0.1 + t as f64,
            rho_perp: 1e-300,
            ratio,
            alpha: -3.25e17,
            w_norm: 1.0 / 3.0,
            eff_lr_euclid: 2.0,
            eff_lr_sigma: 2.5e-7,
            risk: 0.0,
            edge,
            sharpness: None,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows = vec![
            row(0, Some(0.7), Edge::Rising),
            row(1, None, Edge::Gap),
            row(2, Some(1e-9), Edge::Flat),
        ];
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "t,rho,rho_perp,ratio,alpha,w_norm,eff_lr_euclid,eff_lr_sigma,risk,edge\n"
        ));
        let back = read_trajectory_csv(&buf[..]).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn csv_with_sharpness_round_trip() {
        let mut rows = vec![
            row(0, Some(0.7), Edge::Falling),
            row(1, Some(0.6), Edge::Flat),
        ];
        rows[1].sharpness = Some(4.5);
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &rows).unwrap();
        assert_eq!(read_trajectory_csv(&buf[..]).unwrap(), rows);
    }

    #[test]
    fn csv_errors_carry_line_numbers() {
        let mut buf = Vec::new();
        write_trajectory_csv(
            &mut buf,
            &[row(0, Some(0.5), Edge::Flat), row(1, Some(0.5), Edge::Flat)],
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap().replacen("0.5", "zz", 2);
        match read_trajectory_csv(text.as_bytes()) {
            Err(BnError::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("ratio"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let text = "t,rho\n1,2\n";
        assert!(matches!(
            read_trajectory_csv(text.as_bytes()),
            Err(BnError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn json_round_trip_and_parse_error_line() {
        let file = TrajectoryFile {
            metadata: Some(RunMetadata::new(
                5,
                "abc".into(),
                serde_json::json!({"k": 1}),
            )),
            events: TrajectoryEvents::default(),
            records: vec![row(0, None, Edge::Flat)],
        };
        let text = trajectory_to_json(&file);
        assert_eq!(trajectory_from_json(&text).unwrap(), file);
        let broken = text.replacen("\"risk\": 0.0", "\"risk\": oops", 1);
        match trajectory_from_json(&broken) {
            Err(BnError::Parse { line, .. }) => assert!(line > 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dataset_csv_round_trip() {
        let ds = gen_gaussian_dataset(4, 3, 8).unwrap();
        let back = dataset_from_csv(dataset_to_csv(&ds).as_bytes()).unwrap();
        assert_eq!(back.x(), ds.x());
        assert_eq!(back.y(), ds.y());
    }
}
