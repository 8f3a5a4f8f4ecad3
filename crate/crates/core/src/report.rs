//! Sweep records on disk, the rate summary, and run manifests.
//!
//! Records CSV columns:
//! `gate,k_fit,n,replication,seed,loss_name,loss_value,em_iterations,final_loglik,converged,wall_ms`.
//! Reals are written with 17 significant digits, so reading a file back
//! reproduces every value bit for bit.
//!
//! The summary is pretty-printed JSON built only from the records, so
//! regenerating it from a records file is byte-identical to the original.
//! Timestamps live in the manifest, never in the summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiments::{fit_loglog_with, group_records, RateFit, RegressionOptions, SweepRecord};
use crate::model::GateKind;

pub const RECORDS_HEADER: &str =
    "gate,k_fit,n,replication,seed,loss_name,loss_value,em_iterations,final_loglik,converged,wall_ms";

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Records as CSV text, in the order given.
pub fn records_to_csv(records: &[SweepRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(RECORDS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{:.16e},{},{:.16e},{},{}",
            r.gate,
            r.k_fit,
            r.n,
            r.replication,
            r.seed,
            r.loss_name,
            r.loss_value,
            r.em_iterations,
            r.final_loglik,
            r.converged,
            r.wall_ms
        );
    }
    out
}

pub fn write_records_csv(records: &[SweepRecord], path: &Path) -> Result<()> {
    std::fs::write(path, records_to_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: &Path) -> Result<Vec<SweepRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.into(),
        source: e,
    })?;
    let header = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: path.into(),
            source: e,
        })?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != RECORDS_HEADER {
        return Err(Error::Record {
            path: path.into(),
            msg: format!("unexpected header `{header}`"),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv {
            path: path.into(),
            source: e,
        })?;
        let bad = |col: &str, e: &dyn std::fmt::Display| Error::Record {
            path: path.into(),
            msg: format!("row {}, column {col}: {e}", i + 1),
        };
        macro_rules! field {
            ($idx:expr, $name:expr) => {
                rec[$idx].parse().map_err(|e| bad($name, &e))?
            };
        }
        let gate = GateKind::from_name(&rec[0]).ok_or_else(|| bad("gate", &"unknown gate"))?;
        out.push(SweepRecord {
            gate,
            k_fit: field!(1, "k_fit"),
            n: field!(2, "n"),
            replication: field!(3, "replication"),
            seed: field!(4, "seed"),
            loss_name: rec[5].to_string(),
            loss_value: field!(6, "loss_value"),
            em_iterations: field!(7, "em_iterations"),
            final_loglik: field!(8, "final_loglik"),
            converged: field!(9, "converged"),
            wall_ms: field!(10, "wall_ms"),
        });
    }
    Ok(out)
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub tool_version: String,
    /// SHA-256 of the records CSV the fits were computed from.
    pub records_sha256: String,
    pub record_count: usize,
    pub failure_count: usize,
    pub fits: Vec<RateFit>,
}

impl Summary {
    /// One fit per `(gate, k, loss)` group, in order of first appearance.
    pub fn from_records(records: &[SweepRecord], opts: &RegressionOptions) -> Result<Summary> {
        let fits = group_records(records)
            .iter()
            .map(|g| fit_loglog_with(g, opts))
            .collect::<Result<Vec<_>>>()?;
        Summary::new(records, fits)
    }

    pub fn new(records: &[SweepRecord], fits: Vec<RateFit>) -> Result<Summary> {
        if fits.is_empty() {
            return Err(Error::InvalidArgument(
                "a summary needs at least one fit".into(),
            ));
        }
        Ok(Summary {
            tool_version: TOOL_VERSION.to_string(),
            records_sha256: sha256_hex(records_to_csv(records).as_bytes()),
            record_count: records.len(),
            failure_count: records.iter().filter(|r| !r.converged).count(),
            fits,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("summary serializes");
        s.push('\n');
        s
    }
}

pub fn write_summary(summary: &Summary, path: &Path) -> Result<()> {
    std::fs::write(path, summary.to_json()).map_err(|e| Error::io(path, e))
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Record {
        path: path.into(),
        msg: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: PathBuf,
    pub sha256: String,
}

/// Provenance of one CLI invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// SHA-256 of the resolved configuration, when the run had one.
    pub config_digest: Option<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub record_count: usize,
    pub failure_count: usize,
    pub files: Vec<ManifestFile>,
}

pub fn unix_ms_now() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

impl RunManifest {
    pub fn start(command: &str, config_digest: Option<String>) -> RunManifest {
        RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            command: command.to_string(),
            config_digest,
            started_unix_ms: unix_ms_now(),
            finished_unix_ms: 0,
            record_count: 0,
            failure_count: 0,
            files: Vec::new(),
        }
    }

    /// Registers an emitted file with its content hash.
    pub fn add_file(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.files.push(ManifestFile {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    pub fn finish(&mut self, records: &[SweepRecord]) {
        self.record_count = records.len();
        self.failure_count = records.iter().filter(|r| !r.converged).count();
        self.finished_unix_ms = unix_ms_now();
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(n: usize, rep: usize, loss: f64) -> SweepRecord {
        SweepRecord {
            gate: GateKind::TempSigmoidEuclidean,
            k_fit: 3,
            n,
            replication: rep,
            seed: u64::MAX - rep as u64,
            loss_name: "D3".into(),
            loss_value: loss,
            em_iterations: 12,
            final_loglik: -1234.5678901234567,
            converged: rep != 1,
            wall_ms: 17,
        }
    }

    #[test]
    fn empty_records_give_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        write_records_csv(&[], &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            format!("{RECORDS_HEADER}\n")
        );
        assert!(read_records_csv(&path).unwrap().is_empty());
    }

    #[test]
    fn line_count_and_format() {
        let recs: Vec<_> = (0..400)
            .map(|i| record(100 + i / 20, i % 20, 0.1 + i as f64))
            .collect();
        let text = records_to_csv(&recs);
        assert_eq!(text.lines().count(), 401);
        assert!(text.ends_with('\n') && !text.contains('\r'));
        let row = text.lines().nth(1).unwrap();
        assert_eq!(
            row,
            "temp_sigmoid_euclidean,3,100,0,18446744073709551615,D3,1.0000000000000001e-1,12,-1.2345678901234567e3,true,17"
        );
    }

    #[test]
    fn rejects_wrong_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        std::fs::write(&path, "gate,k\nmodified_sigmoid,3\n").unwrap();
        assert!(matches!(read_records_csv(&path), Err(Error::Record { .. })));
        let missing = dir.path().join("none.csv");
        assert!(read_records_csv(&missing).is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_exact(losses in prop::collection::vec(0.0f64..1e6, 1..20), ll in -1e9f64..0.0) {
            let recs: Vec<_> = losses
                .iter()
                .enumerate()
                .map(|(i, &l)| SweepRecord { final_loglik: ll, ..record(10 + i, i, l) })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.csv");
            write_records_csv(&recs, &path).unwrap();
            let back = read_records_csv(&path).unwrap();
            prop_assert_eq!(back, recs);
        }
    }

    #[test]
    fn summary_blocks_follow_record_order() {
        let mut recs = Vec::new();
        for (k, c) in [(4usize, 3.0f64), (3, 1.0)] {
            for n in [100usize, 1000, 10_000] {
                for rep in 0..3 {
                    recs.push(SweepRecord {
                        k_fit: k,
                        converged: true,
                        ..record(n, rep, c * (n as f64).powf(-0.5))
                    });
                }
            }
        }
        let s = Summary::from_records(&recs, &RegressionOptions::default()).unwrap();
        assert_eq!(s.fits.len(), 2);
        assert_eq!((s.fits[0].k_fit, s.fits[1].k_fit), (4, 3));
        assert!((s.fits[0].slope + 0.5).abs() < 1e-12);
        assert_eq!(s.record_count, 18);
        let json = s.to_json();
        let back: Summary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        assert!(Summary::new(&recs, vec![]).is_err());
    }
}
