//! Training/evaluation front door shared by the CLI and the test suites.

mod cam;
mod run;
mod sweep;

pub use cam::{export_cams, heatmap_argmax, mean_gt_cam_entropy, CamRequest};
pub use run::{
    eval_checkpoint, evaluate, train, train_observed, BatchTrace, EvalOutcome, TrainOutcome,
};
pub use sweep::{run_sweep, summary_csv, SweepAxis, SweepRow};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::Kv;
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::model::ModelConfig;

/// Everything one training run needs; echoed verbatim into the output
/// directory so a run can be reproduced from its artifacts.
#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Directory holding train.dbds, test.dbds, families.txt.
    pub dataset: PathBuf,
    pub input_size: usize,
    pub channels: Vec<usize>,
    pub loss: LossKind,
    pub k: usize,
    pub use_db: bool,
    pub p_peak: f64,
    pub p_patch: f64,
    pub patch_size: usize,
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_period: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Train with plain CE for this many leading epochs before switching to
    /// the configured loss.
    pub ce_warmup_epochs: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("data"),
            input_size: 32,
            channels: vec![16, 32, 64],
            loss: LossKind::Gce,
            k: 15,
            use_db: true,
            p_peak: 0.5,
            p_patch: 0.5,
            patch_size: 2,
            alpha: 0.1,
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_period: 20,
            epochs: 30,
            batch_size: 32,
            ce_warmup_epochs: 0,
            seed: 1,
            out_dir: PathBuf::from("out"),
        }
    }
}

pub const RUN_KEYS: &[&str] = &[
    "dataset",
    "input_size",
    "channels",
    "loss",
    "k",
    "use_db",
    "p_peak",
    "p_patch",
    "patch_size",
    "alpha",
    "lr",
    "momentum",
    "weight_decay",
    "lr_decay_factor",
    "lr_decay_period",
    "epochs",
    "batch_size",
    "ce_warmup_epochs",
    "seed",
    "out_dir",
];

impl RunConfig {
    pub fn from_kv(kv: &Kv) -> Result<Self> {
        let d = RunConfig::default();
        Ok(RunConfig {
            dataset: PathBuf::from(kv.raw("dataset").unwrap_or("data")),
            input_size: kv.get("input_size", d.input_size)?,
            channels: kv.get_usize_list("channels", &d.channels)?,
            loss: LossKind::parse(kv.raw("loss").unwrap_or("gce"))?,
            k: kv.get("k", d.k)?,
            use_db: kv.get("use_db", d.use_db)?,
            p_peak: kv.get("p_peak", d.p_peak)?,
            p_patch: kv.get("p_patch", d.p_patch)?,
            patch_size: kv.get("patch_size", d.patch_size)?,
            alpha: kv.get("alpha", d.alpha)?,
            lr: kv.get("lr", d.lr)?,
            momentum: kv.get("momentum", d.momentum)?,
            weight_decay: kv.get("weight_decay", d.weight_decay)?,
            lr_decay_factor: kv.get("lr_decay_factor", d.lr_decay_factor)?,
            lr_decay_period: kv.get("lr_decay_period", d.lr_decay_period)?,
            epochs: kv.get("epochs", d.epochs)?,
            batch_size: kv.get("batch_size", d.batch_size)?,
            ce_warmup_epochs: kv.get("ce_warmup_epochs", d.ce_warmup_epochs)?,
            seed: kv.get("seed", d.seed)?,
            out_dir: PathBuf::from(kv.raw("out_dir").unwrap_or("out")),
        })
    }

    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        let channels: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "dataset = {}", self.dataset.display());
        let _ = writeln!(out, "input_size = {}", self.input_size);
        let _ = writeln!(out, "channels = {}", channels.join(","));
        let _ = writeln!(out, "loss = {}", self.loss.name());
        let _ = writeln!(out, "k = {}", self.k);
        let _ = writeln!(out, "use_db = {}", self.use_db);
        let _ = writeln!(out, "p_peak = {}", self.p_peak);
        let _ = writeln!(out, "p_patch = {}", self.p_patch);
        let _ = writeln!(out, "patch_size = {}", self.patch_size);
        let _ = writeln!(out, "alpha = {}", self.alpha);
        let _ = writeln!(out, "lr = {}", self.lr);
        let _ = writeln!(out, "momentum = {}", self.momentum);
        let _ = writeln!(out, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(out, "lr_decay_factor = {}", self.lr_decay_factor);
        let _ = writeln!(out, "lr_decay_period = {}", self.lr_decay_period);
        let _ = writeln!(out, "epochs = {}", self.epochs);
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "ce_warmup_epochs = {}", self.ce_warmup_epochs);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "out_dir = {}", self.out_dir.display());
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dataset.is_dir() {
            return Err(Error::Config(format!(
                "dataset directory {} does not exist",
                self.dataset.display()
            )));
        }
        for name in ["train.dbds", "test.dbds"] {
            if !self.dataset.join(name).is_file() {
                return Err(Error::Config(format!(
                    "dataset directory {} is missing {name}",
                    self.dataset.display()
                )));
            }
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        for (name, p) in [("p_peak", self.p_peak), ("p_patch", self.p_patch)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.lr_decay_period == 0 {
            return Err(Error::Config("lr_decay_period must be >= 1".into()));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must be > 0, got {}",
                self.lr_decay_factor
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_size: self.input_size,
            channels: self.channels.clone(),
            num_classes,
        }
    }

    pub fn train_data_path(&self) -> PathBuf {
        self.dataset.join("train.dbds")
    }

    pub fn test_data_path(&self) -> PathBuf {
        self.dataset.join("test.dbds")
    }

    pub fn family_index_path(&self) -> PathBuf {
        self.dataset.join("families.txt")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    /// Wall-clock epoch time. Shown on the console and in timing.csv; the
    /// metrics.csv column is written as a constant so reruns of the same
    /// config are byte-identical.
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy,seconds";

/// Deterministic metrics CSV: full-precision loss/accuracy, constant
/// seconds column.
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},0.000",
            r.epoch,
            r.split.name(),
            r.loss,
            r.accuracy
        );
    }
    out
}

/// Wall-clock sidecar, not covered by the reproducibility contract.
pub fn timing_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("epoch,split,seconds\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.3}", r.epoch, r.split.name(), r.seconds);
    }
    out
}

/// First epoch whose row for `split` reaches the accuracy threshold.
pub fn epochs_to_accuracy(rows: &[MetricsRow], split: Split, threshold: f64) -> Option<usize> {
    rows.iter()
        .find(|r| r.split == split && r.accuracy >= threshold)
        .map(|r| r.epoch)
}

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_roundtrip_preserves_config() {
        let cfg = RunConfig {
            channels: vec![4, 8],
            loss: LossKind::Ce,
            k: 7,
            use_db: false,
            alpha: 0.25,
            seed: 99,
            ..RunConfig::default()
        };
        let kv = Kv::from_text(&cfg.to_kv_text(), RUN_KEYS).unwrap();
        let back = RunConfig::from_kv(&kv).unwrap();
        assert_eq!(back.channels, cfg.channels);
        assert_eq!(back.loss, cfg.loss);
        assert_eq!(back.k, cfg.k);
        assert_eq!(back.use_db, cfg.use_db);
        assert_eq!(back.alpha, cfg.alpha);
        assert_eq!(back.seed, cfg.seed);
    }

    #[test]
    fn metrics_csv_is_deterministic_and_headed() {
        let rows = vec![
            MetricsRow {
                epoch: 1,
                split: Split::Train,
                loss: 1.5,
                accuracy: 0.25,
                seconds: 1.234,
            },
            MetricsRow {
                epoch: 1,
                split: Split::Test,
                loss: 1.25,
                accuracy: 0.5,
                seconds: 0.4,
            },
        ];
        let csv = metrics_to_csv(&rows);
        assert!(csv.starts_with("epoch,split,loss,accuracy,seconds\n"));
        assert!(csv.contains("1,train,1.5,0.25,0.000"));
        assert!(csv.contains("1,test,1.25,0.5,0.000"));
        let timing = timing_to_csv(&rows);
        assert!(timing.contains("1,train,1.234"));
    }

    #[test]
    fn epochs_to_accuracy_finds_first_crossing() {
        let mk = |epoch, acc| MetricsRow {
            epoch,
            split: Split::Test,
            loss: 0.0,
            accuracy: acc,
            seconds: 0.0,
        };
        let rows = vec![mk(1, 0.3), mk(2, 0.91), mk(3, 0.85), mk(4, 0.95)];
        assert_eq!(epochs_to_accuracy(&rows, Split::Test, 0.9), Some(2));
        assert_eq!(epochs_to_accuracy(&rows, Split::Test, 0.99), None);
        assert_eq!(epochs_to_accuracy(&rows, Split::Train, 0.1), None);
    }
}
