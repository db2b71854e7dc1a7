//! Experiment reports: one row per (condition, modality, stage, seed) with
//! a fixed CSV header, byte-stable across reruns under fixed seeds.

use std::path::Path;

use crate::error::{HarnessError, Result};

pub const CSV_HEADER: &str = "condition,modality,stage,wer,seed";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub condition: String,
    pub modality: String,
    pub stage: String,
    pub wer: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
}

impl ExperimentReport {
    pub fn push(&mut self, condition: &str, modality: &str, stage: &str, wer: f64, seed: u64) {
        self.rows.push(ReportRow {
            condition: condition.to_string(),
            modality: modality.to_string(),
            stage: stage.to_string(),
            wer,
            seed,
        });
    }

    pub fn extend(&mut self, other: ExperimentReport) {
        self.rows.extend(other.rows);
    }

    /// Deterministic output order: rows sorted by (stage, condition, seed).
    pub fn to_csv(&self) -> String {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| {
            a.stage
                .cmp(&b.stage)
                .then_with(|| a.condition.cmp(&b.condition))
                .then_with(|| a.seed.cmp(&b.seed))
        });
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.condition, r.modality, r.stage, r.wer, r.seed
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Mean WER over seeds for one (stage, condition) cell.
    pub fn mean_wer(&self, stage: &str, condition: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.stage == stage && r.condition == condition)
            .map(|r| r.wer)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Every (stage, condition) cell must appear exactly once per seed.
    pub fn validate_complete(&self, stages: &[&str], conditions: &[&str], seeds: &[u64]) -> Result<()> {
        for stage in stages {
            for cond in conditions {
                for &seed in seeds {
                    let n = self
                        .rows
                        .iter()
                        .filter(|r| r.stage == *stage && r.condition == *cond && r.seed == seed)
                        .count();
                    if n != 1 {
                        return Err(HarnessError::Run(format!(
                            "report cell ({stage}, {cond}, seed {seed}) appears {n} times, expected 1"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_fixed_header_and_sorted_rows() {
        let mut r = ExperimentReport::default();
        r.push("0dB", "av", "stage1", 0.25, 2);
        r.push("clean", "av", "stage1", 0.0, 1);
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "0dB,av,stage1,0.25,2");
        assert_eq!(lines.next().unwrap(), "clean,av,stage1,0,1");
    }

    #[test]
    fn completeness_check() {
        let mut r = ExperimentReport::default();
        r.push("clean", "a", "s", 0.1, 1);
        assert!(r.validate_complete(&["s"], &["clean"], &[1]).is_ok());
        assert!(r.validate_complete(&["s"], &["clean"], &[1, 2]).is_err());
        r.push("clean", "a", "s", 0.2, 1);
        assert!(r.validate_complete(&["s"], &["clean"], &[1]).is_err());
    }

    #[test]
    fn mean_over_seeds() {
        let mut r = ExperimentReport::default();
        r.push("0dB", "av", "full", 0.2, 1);
        r.push("0dB", "av", "full", 0.4, 2);
        assert!((r.mean_wer("full", "0dB").unwrap() - 0.3).abs() < 1e-15);
        assert!(r.mean_wer("full", "5dB").is_none());
    }
}
