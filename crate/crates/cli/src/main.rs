//! CLI front door: dataset generation, training, evaluation, CAM export,
//! ablation sweeps and the oracle cross-check battery.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 config validation failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use divboost_core::config::Kv;
use divboost_core::error::Error;
use divboost_core::harness::{
    eval_checkpoint, export_cams, run_sweep, train, CamRequest, RunConfig, SweepAxis, RUN_KEYS,
};
use divboost_core::loss::LossKind;
use divboost_core::oracle;
use divboost_core::synthdata::{
    generate, save_dataset, save_family_index, SynthConfig, SYNTH_KEYS,
};

#[derive(Parser)]
#[command(name = "divboost", version, about = "Toy fine-grained classification trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset files (train.dbds, test.dbds, families.txt)
    GenData {
        /// key = value config file with dataset parameters
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the dataset files
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write metrics plus checkpoints
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Evaluate a checkpoint on a dataset's test split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Where to write confusion.csv
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value = "ce")]
        loss: String,
        #[arg(long, default_value_t = 15)]
        k: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Export per-image ground-truth-class activation heatmaps as PGM
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated test-split image indices
        #[arg(long, value_delimiter = ',')]
        indices: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train once per value of one hyperparameter axis
    Sweep {
        /// alpha, k, p_peak or p_patch
        #[arg(long)]
        axis: String,
        /// Comma-separated values
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Run the oracle cross-check battery and write its report
    Check {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Where to write oracle_report.csv
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

/// Flag mirrors of the RunConfig keys; anything set here wins over the
/// config file.
#[derive(Args)]
struct TrainOverrides {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    use_db: Option<bool>,
    #[arg(long)]
    p_peak: Option<f64>,
    #[arg(long)]
    p_patch: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long)]
    lr_decay_period: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    ce_warmup_epochs: Option<usize>,
    #[arg(long)]
    input_size: Option<usize>,
    /// Comma-separated conv block widths
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), Error> {
        if let Some(v) = &self.dataset {
            cfg.dataset = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = &self.loss {
            cfg.loss = LossKind::parse(v)?;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = self.use_db {
            cfg.use_db = v;
        }
        if let Some(v) = self.p_peak {
            cfg.p_peak = v;
        }
        if let Some(v) = self.p_patch {
            cfg.p_patch = v;
        }
        if let Some(v) = self.patch_size {
            cfg.patch_size = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.lr_decay_factor {
            cfg.lr_decay_factor = v;
        }
        if let Some(v) = self.lr_decay_period {
            cfg.lr_decay_period = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.ce_warmup_epochs {
            cfg.ce_warmup_epochs = v;
        }
        if let Some(v) = self.input_size {
            cfg.input_size = v;
        }
        if let Some(v) = &self.channels {
            cfg.channels = v.clone();
        }
        Ok(())
    }
}

fn load_run_config(
    config: &Option<PathBuf>,
    out: &Option<PathBuf>,
    overrides: &TrainOverrides,
) -> Result<RunConfig, Error> {
    let mut cfg = match config {
        Some(path) => RunConfig::from_kv(&Kv::from_file(path, RUN_KEYS)?)?,
        None => RunConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    if let Some(out) = out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut cfg = match &config {
                Some(path) => SynthConfig::from_kv(&Kv::from_file(path, SYNTH_KEYS)?)?,
                None => SynthConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let splits = generate(&cfg)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            save_dataset(&out.join("train.dbds"), &splits.train)?;
            save_dataset(&out.join("test.dbds"), &splits.test)?;
            save_family_index(&out.join("families.txt"), &splits.train)?;
            println!(
                "wrote {} classes ({} families): {} train / {} test samples, {}x{} px -> {}",
                splits.train.num_classes(),
                cfg.num_families,
                splits.train.len(),
                splits.test.len(),
                cfg.image_size,
                cfg.image_size,
                out.display()
            );
        }
        Command::Train {
            config,
            out,
            overrides,
        } => {
            let cfg = load_run_config(&config, &out, &overrides)?;
            let outcome = train(&cfg)?;
            println!(
                "done: final test accuracy {:.4} (best {:.4}); artifacts in {}",
                outcome.final_test_accuracy,
                outcome.best_test_accuracy,
                cfg.out_dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
            loss,
            k,
            batch_size,
        } => {
            let kind = LossKind::parse(&loss)?;
            let outcome = eval_checkpoint(&checkpoint, &dataset, kind, k, batch_size, &out)?;
            println!(
                "test accuracy {:.4}, mean {} loss {:.6} over {} samples; confusion matrix in {}",
                outcome.accuracy,
                kind.name(),
                outcome.mean_loss,
                outcome.samples,
                out.join("confusion.csv").display()
            );
        }
        Command::Cam {
            checkpoint,
            dataset,
            indices,
            out,
        } => {
            if indices.is_empty() {
                return Err(Error::Config("cam needs at least one --indices value".into()));
            }
            let written = export_cams(&CamRequest {
                checkpoint,
                dataset_dir: dataset,
                indices,
                out_dir: out,
            })?;
            println!("wrote {} heatmaps", written.len());
            for p in written {
                println!("  {}", p.display());
            }
        }
        Command::Sweep {
            axis,
            values,
            config,
            out,
            overrides,
        } => {
            let axis = SweepAxis::parse(&axis)?;
            let base = load_run_config(&config, &out, &overrides)?;
            let (rows, summary) = run_sweep(axis, &values, &base)?;
            let failures = rows.iter().filter(|r| r.error.is_some()).count();
            println!(
                "sweep finished: {}/{} runs ok; summary in {}",
                rows.len() - failures,
                rows.len(),
                summary.display()
            );
        }
        Command::Check { seed, out } => {
            let reports = oracle::run_all(seed);
            print!("{}", oracle::reports_to_text(&reports));
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let csv_path = out.join("oracle_report.csv");
            std::fs::write(&csv_path, oracle::reports_to_csv(&reports))
                .map_err(|e| Error::io(&csv_path, e))?;
            if reports.iter().any(|r| !r.pass) {
                return Err(Error::InvalidArgument(
                    "oracle battery reported failures".into(),
                ));
            }
            println!("all {} oracle checks passed", reports.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
