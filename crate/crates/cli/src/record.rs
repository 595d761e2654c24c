//! Experiment records, one JSON object per line, appended and never rewritten.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use avgk_core::calibration::Group;
use avgk_core::training::{Evaluation, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub examples: usize,
    pub accuracy: f64,
    pub mean_set_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub test_avgk_accuracy: f64,
    pub val_avgk_accuracy: f64,
    pub lambda_val: f64,
    pub mean_set_size: f64,
    pub best_epoch: usize,
    pub few: Option<GroupSummary>,
    pub medium: Option<GroupSummary>,
    pub many: Option<GroupSummary>,
}

impl RecordMetrics {
    pub fn new(eval: &Evaluation, best_epoch: usize) -> Self {
        let group = |g: Group| {
            eval.test
                .group_accuracies
                .as_ref()
                .and_then(|ga| ga.get(g))
                .map(|s| GroupSummary {
                    examples: s.examples,
                    accuracy: s.accuracy,
                    mean_set_size: s.histogram.mean,
                })
        };
        RecordMetrics {
            test_avgk_accuracy: eval.test.avg_k_accuracy,
            val_avgk_accuracy: eval.val_avgk_accuracy,
            lambda_val: eval.lambda_val,
            mean_set_size: eval.test.mean_set_size,
            best_epoch,
            few: group(Group::Few),
            medium: group(Group::Medium),
            many: group(Group::Many),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_sha256: String,
    pub code_version: String,
    /// Seconds since the Unix epoch; only present when requested, so that
    /// repeated runs stay byte-identical by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config_sha256: String,
    pub config: TrainConfig,
    pub metrics: RecordMetrics,
    pub provenance: Provenance,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the configuration together with the dataset it runs on.
pub fn config_hash(cfg: &TrainConfig, dataset_sha256: &str) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    sha256_hex(format!("{json}\n{dataset_sha256}").as_bytes())
}

/// Hash of a split directory's manifest, which pins sizes, class counts
/// and (for synthetic data) the generator settings.
pub fn dataset_hash(dir: &Path) -> CliResult<String> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn append_record(path: &Path, record: &ExperimentRecord) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    let line = serde_json::to_string(record)? + "\n";
    file.write_all(line.as_bytes()).map_err(|e| CliError::io(path, e))
}

/// All records in `path`; a missing file has none. A truncated last line
/// (from an interrupted append) is ignored.
pub fn read_records(path: &Path) -> CliResult<Vec<ExperimentRecord>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(CliError::io(path, e)),
    };
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut out = Vec::with_capacity(lines.len());
    for (n, line) in lines.iter().enumerate() {
        match serde_json::from_str(line) {
            Ok(r) => out.push(r),
            Err(_) if n + 1 == lines.len() && !text.ends_with('\n') => break,
            Err(e) => {
                return Err(CliError::Usage(format!(
                    "{}:{}: bad record: {e}",
                    path.display(),
                    n + 1
                )))
            }
        }
    }
    Ok(out)
}

/// Mean and 1.96 standard errors (sample standard deviation); the interval
/// is zero for a single value.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn mean_ci_values() {
        assert_eq!(mean_ci(&[0.5]), (0.5, 0.0));
        let (m, ci) = mean_ci(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((ci - 1.96 / 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn truncated_tail_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        fs::write(&path, "{\"config_sha256\":").unwrap();
        assert!(read_records(&path).unwrap().is_empty());
        assert!(read_records(&dir.path().join("missing")).unwrap().is_empty());
    }
}
