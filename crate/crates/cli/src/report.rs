//! Machine-readable run artifacts: per-run reports, frequency reports, and
//! ablation summaries, all versioned with `"schema": 1`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use blv_core::MetricsReportF64;

use crate::config::ExperimentConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub schema: u32,
    pub command: String,
    pub mode: String,
    pub seed: u64,
    /// Effective configuration; re-feeding it reproduces the run.
    pub config: ExperimentConfig,
    pub frequency_history: Vec<Vec<f64>>,
    pub loss_curve: Vec<f64>,
    pub tail_miou_curve: Vec<Option<f64>>,
    pub metrics: MetricsReportF64,
    pub wall_clock_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbed_logits_sample: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreqReport {
    pub schema: u32,
    pub command: String,
    pub num_classes: usize,
    pub ignore_index: u32,
    pub smoothing: f64,
    pub files: Vec<String>,
    pub counts: Vec<u64>,
    pub ignored: u64,
    pub frequencies: Vec<f64>,
    pub raw_coefficients: Vec<f64>,
    pub coefficients: Vec<f64>,
    /// Classes ordered by coefficient, rarest (largest coefficient) first.
    pub tail_ranking: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSummary {
    pub schema: u32,
    pub command: String,
    pub axis: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<AblateCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateCell {
    pub value: String,
    pub run_dirs: Vec<String>,
    pub tail_mious: Vec<Option<f64>>,
    pub mious: Vec<f64>,
    pub median_tail_miou: Option<f64>,
    pub median_miou: f64,
}

impl AblateSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,value,n_seeds,median_tail_miou,median_miou\n");
        for cell in &self.cells {
            let tail = cell
                .median_tail_miou
                .map_or(String::new(), |v| format!("{v}"));
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                self.axis,
                cell.value,
                cell.run_dirs.len(),
                tail,
                cell.median_miou
            ));
        }
        out
    }
}

/// Median over the defined values; `None` when nothing is defined.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    })
}

/// Ten hex characters of the SHA-256 of the serialized value.
pub fn short_hash<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_string(value).expect("serializable");
    let digest = Sha256::digest(json.as_bytes());
    let mut out = String::with_capacity(10);
    for byte in digest.iter().take(5) {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Sweep-safe run directory: `<command>-<seed>-<hash(config)>` under `out`.
pub fn run_dir<S: Serialize>(out: &Path, command: &str, seed: u64, config: &S) -> PathBuf {
    out.join(format!("{command}-{seed}-{}", short_hash(config)))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> std::io::Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_handles_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn short_hash_is_stable_and_input_sensitive() {
        let a = short_hash(&serde_json::json!({"x": 1}));
        let b = short_hash(&serde_json::json!({"x": 1}));
        let c = short_hash(&serde_json::json!({"x": 2}));
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 10);
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let summary = AblateSummary {
            schema: SCHEMA_VERSION,
            command: "ablate".into(),
            axis: "sigma".into(),
            seeds: vec![0, 1],
            cells: vec![AblateCell {
                value: "6".into(),
                run_dirs: vec!["a".into(), "b".into()],
                tail_mious: vec![Some(0.5), Some(0.7)],
                mious: vec![0.6, 0.8],
                median_tail_miou: Some(0.6),
                median_miou: 0.7,
            }],
        };
        let csv = summary.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("sigma,6,2,"));
    }
}
