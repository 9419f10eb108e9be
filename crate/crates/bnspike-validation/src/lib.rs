//! Reporting helpers for the acceptance suite: one verdict line per
//! criterion and content digests of every artifact a criterion produces,
//! so that two passes over the suite can be compared byte for byte.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Duration;

use sha2::{Digest, Sha256};

/// Outcome of one criterion.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

/// A finished criterion with its wall time and runtime budget.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub id: u32,
    pub title: &'static str,
    pub outcome: Outcome,
    pub elapsed: Duration,
    pub budget: Option<Duration>,
}

impl Verdict {
    pub fn within_budget(&self) -> bool {
        self.budget.map_or(true, |b| self.elapsed <= b)
    }

    pub fn pass(&self) -> bool {
        self.outcome.pass && self.within_budget()
    }

    /// `PASS  3 title: detail [1.20 s / 10 s]`
    pub fn line(&self) -> String {
        let time = match self.budget {
            Some(b) => format!("{:.2} s / {} s", self.elapsed.as_secs_f64(), b.as_secs()),
            None => format!("{:.2} s", self.elapsed.as_secs_f64()),
        };
        let over = if self.within_budget() {
            ""
        } else {
            " OVER BUDGET"
        };
        format!(
            "{} {:>2} {}: {} [{time}{over}]",
            if self.pass() { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.outcome.detail
        )
    }
}

/// Named SHA-256 digests of serialized artifacts.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Artifacts {
    digests: BTreeMap<String, String>,
}

impl Artifacts {
    /// Streams `fill`'s output into a digest stored under `name`.
    pub fn record<F>(&mut self, name: impl Into<String>, fill: F)
    where
        F: FnOnce(&mut dyn Write),
    {
        let mut h = HashWriter(Sha256::new());
        fill(&mut h);
        self.digests
            .insert(name.into(), hex::encode(h.0.finalize()));
    }

    pub fn record_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        self.record(name, |w| {
            w.write_all(bytes).expect("hash sink accepts bytes")
        });
    }

    pub fn len(&self) -> usize {
        self.digests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.digests.is_empty()
    }

    /// Names whose digests differ or exist on one side only.
    pub fn mismatches(&self, other: &Artifacts) -> Vec<String> {
        let mut out: Vec<String> = self
            .digests
            .iter()
            .filter(|(k, v)| other.digests.get(*k) != Some(v))
            .map(|(k, _)| k.clone())
            .collect();
        out.extend(
            other
                .digests
                .keys()
                .filter(|k| !self.digests.contains_key(*k))
                .cloned(),
        );
        out
    }
}

struct HashWriter(Sha256);

impl Write for HashWriter {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }
    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_detect_changes() {
        let mut a = Artifacts::default();
        a.record_bytes("x", b"abc");
        let mut b = a.clone();
        assert!(a.mismatches(&b).is_empty());
        b.record_bytes("x", b"abd");
        b.record_bytes("y", b"");
        assert_eq!(a.mismatches(&b), vec!["x".to_string(), "y".to_string()]);
    }

    #[test]
    fn verdict_line_reports_budget() {
        let v = Verdict {
            id: 4,
            title: "t",
            outcome: Outcome::new(true, "ok"),
            elapsed: Duration::from_secs(2),
            budget: Some(Duration::from_secs(1)),
        };
        assert!(!v.pass());
        assert!(v.line().starts_with("FAIL  4 t: ok"));
        assert!(v.line().contains("OVER BUDGET"));
    }
}
