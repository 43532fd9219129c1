//! Line-delimited JSON metrics emitted by every training phase.
//!
//! One [`MetricsRecord`] per optimizer step (or validation probe). Records
//! are append-only and self-describing, so separate runs can be diffed with
//! standard text tools. `wall_time` is the only field that is allowed to
//! differ between two runs of the same seed.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::LossBundle;

/// One metrics line: which phase, which step, the loss components, the
/// learning rate in effect, and seconds elapsed since the phase started.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: String,
    pub step: u64,
    pub recon: f64,
    pub variance: f64,
    pub l_da: f64,
    pub l_orth: f64,
    pub total: f64,
    pub lr: f64,
    pub wall_time: f64,
}

impl MetricsRecord {
    /// Builds a record from a loss bundle plus bookkeeping fields.
    pub fn new(phase: &str, step: u64, bundle: &LossBundle, lr: f64, wall_time: f64) -> Self {
        Self {
            phase: phase.to_string(),
            step,
            recon: bundle.recon,
            variance: bundle.variance,
            l_da: bundle.l_da,
            l_orth: bundle.l_orth,
            total: bundle.total,
            lr,
            wall_time,
        }
    }

    /// Equality that ignores `wall_time`, for determinism comparisons.
    pub fn same_modulo_wall_time(&self, other: &Self) -> bool {
        self.phase == other.phase
            && self.step == other.step
            && self.recon == other.recon
            && self.variance == other.variance
            && self.l_da == other.l_da
            && self.l_orth == other.l_orth
            && self.total == other.total
            && self.lr == other.lr
    }
}

/// Writes records as one JSON object per line, overwriting `path`.
pub fn write_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSONL metrics file; blank lines are skipped.
pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(step: u64, wall: f64) -> MetricsRecord {
        MetricsRecord {
            phase: "pretrain".into(),
            step,
            recon: 1.5,
            variance: 0.25,
            l_da: 3.0,
            l_orth: 0.01,
            total: 1.78,
            lr: 1e-3,
            wall_time: wall,
        }
    }

    #[test]
    fn jsonl_round_trip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let records = vec![sample(0, 0.1), sample(1, 0.2)];
        write_jsonl(&path, &records).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn wall_time_is_ignored_by_modulo_comparison() {
        let a = sample(3, 0.5);
        let b = sample(3, 99.0);
        assert!(a.same_modulo_wall_time(&b));
        let c = sample(4, 0.5);
        assert!(!a.same_modulo_wall_time(&c));
    }

    #[test]
    fn blank_lines_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let rec = sample(7, 1.0);
        let text = format!("{}\n\n{}\n", serde_json::to_string(&rec).unwrap(), "");
        std::fs::write(&path, text).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back, vec![rec]);
    }
}
