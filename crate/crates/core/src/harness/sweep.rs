//! Ablation sweeps: one training run per value on a single axis, shared
//! seed, summarized in one CSV. Individual failures are recorded and do not
//! stop the sweep.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::harness::{ensure_dir, epochs_to_accuracy, run::train, RunConfig, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Alpha,
    K,
    PPeak,
    PPatch,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepAxis::Alpha),
            "k" => Ok(SweepAxis::K),
            "p_peak" => Ok(SweepAxis::PPeak),
            "p_patch" => Ok(SweepAxis::PPatch),
            other => Err(Error::Config(format!(
                "unknown sweep axis '{other}' (expected alpha, k, p_peak or p_patch)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::K => "k",
            SweepAxis::PPeak => "p_peak",
            SweepAxis::PPatch => "p_patch",
        }
    }

    fn apply(&self, cfg: &mut RunConfig, value: f64) -> Result<()> {
        match self {
            SweepAxis::Alpha => cfg.alpha = value,
            SweepAxis::K => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!(
                        "k sweep values must be positive integers, got {value}"
                    )));
                }
                cfg.k = value as usize;
            }
            SweepAxis::PPeak => cfg.p_peak = value,
            SweepAxis::PPatch => cfg.p_patch = value,
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    pub final_test_accuracy: Option<f64>,
    pub epochs_to_90: Option<usize>,
    pub error: Option<String>,
}

pub fn summary_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("value,final_test_accuracy,epochs_to_90,status\n");
    for r in rows {
        let acc = r
            .final_test_accuracy
            .map(|a| a.to_string())
            .unwrap_or_default();
        let epochs = r.epochs_to_90.map(|e| e.to_string()).unwrap_or_default();
        let status = match &r.error {
            None => "ok".to_string(),
            Some(e) => format!("failed: {}", e.replace(',', ";")),
        };
        let _ = writeln!(out, "{},{},{},{}", r.value, acc, epochs, status);
    }
    out
}

/// Train once per value (same seed, per-value output subdirectory) and
/// write `sweep_summary.csv` under the base output directory.
pub fn run_sweep(axis: SweepAxis, values: &[f64], base: &RunConfig) -> Result<(Vec<SweepRow>, PathBuf)> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    ensure_dir(&base.out_dir)?;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let mut cfg = base.clone();
        cfg.out_dir = base.out_dir.join(format!("{}_{}", axis.name(), value));
        let run = axis
            .apply(&mut cfg, value)
            .and_then(|()| train(&cfg));
        let row = match run {
            Ok(outcome) => SweepRow {
                value,
                final_test_accuracy: Some(outcome.final_test_accuracy),
                epochs_to_90: epochs_to_accuracy(&outcome.metrics, Split::Test, 0.9),
                error: None,
            },
            Err(e) => SweepRow {
                value,
                final_test_accuracy: None,
                epochs_to_90: None,
                error: Some(e.to_string()),
            },
        };
        println!(
            "sweep {}={}: {}",
            axis.name(),
            value,
            match (&row.final_test_accuracy, &row.error) {
                (Some(a), _) => format!("final test accuracy {a:.4}"),
                (_, Some(e)) => format!("failed ({e})"),
                _ => unreachable!(),
            }
        );
        rows.push(row);
    }
    let path = base.out_dir.join("sweep_summary.csv");
    std::fs::write(&path, summary_csv(&rows)).map_err(|e| Error::io(&path, e))?;
    Ok((rows, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing_and_apply() {
        assert_eq!(SweepAxis::parse("alpha").unwrap(), SweepAxis::Alpha);
        assert_eq!(SweepAxis::parse("k").unwrap(), SweepAxis::K);
        assert!(SweepAxis::parse("beta").is_err());
        let mut cfg = RunConfig::default();
        SweepAxis::K.apply(&mut cfg, 5.0).unwrap();
        assert_eq!(cfg.k, 5);
        assert!(SweepAxis::K.apply(&mut cfg, 2.5).is_err());
        SweepAxis::PPatch.apply(&mut cfg, 0.25).unwrap();
        assert_eq!(cfg.p_patch, 0.25);
    }

    #[test]
    fn summary_marks_failures_and_keeps_commas_clean() {
        let rows = vec![
            SweepRow {
                value: 0.1,
                final_test_accuracy: Some(0.95),
                epochs_to_90: Some(7),
                error: None,
            },
            SweepRow {
                value: 0.2,
                final_test_accuracy: None,
                epochs_to_90: None,
                error: Some("boom, really".into()),
            },
        ];
        let csv = summary_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "value,final_test_accuracy,epochs_to_90,status");
        assert_eq!(lines[1], "0.1,0.95,7,ok");
        assert_eq!(lines[2], "0.2,,,failed: boom; really");
    }
}
