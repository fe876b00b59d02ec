//! The training loop and eval-mode evaluation.
//!
//! RNG discipline: every random decision draws from a substream keyed by
//! its role -- ("init"), ("shuffle", epoch), ("mask", epoch, batch) -- so
//! switching the loss kind or disabling the diversification block never
//! shifts anyone else's randomness, and paired runs stay comparable.

use std::path::Path;
use std::time::Instant;

use crate::divblock::{forward_scores_graph, DiversificationConfig, Mode};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::harness::{
    ensure_dir, metrics_to_csv, timing_to_csv, MetricsRow, RunConfig, Split,
};
use crate::loss::{clamp_k, LossKind};
use crate::model::{
    argmax_rows, forward_maps, register_params, save_model, ModelConfig, ModelParams,
};
use crate::optim::{SgdConfig, SgdState};
use crate::rng::RngStream;
use crate::synthdata::{load_dataset, LabeledDataset};
use crate::tensor::Tensor;

const ROLE_INIT: u64 = 1;
const ROLE_SHUFFLE: u64 = 2;
const ROLE_MASK: u64 = 3;

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
    pub final_checkpoint: std::path::PathBuf,
    pub best_checkpoint: Option<std::path::PathBuf>,
    pub final_test_accuracy: f64,
    pub best_test_accuracy: f64,
    pub model_config: ModelConfig,
}

/// Forward-pass trace handed to an observer, one call per batch.
pub struct BatchTrace<'a> {
    pub epoch: usize,
    pub batch: usize,
    /// Head activation maps before any suppression.
    pub maps: &'a Tensor,
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    train_observed(cfg, &mut |_| {})
}

pub fn train_observed(
    cfg: &RunConfig,
    observer: &mut dyn FnMut(BatchTrace),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let family_index = cfg.family_index_path();
    let family_index = family_index.is_file().then_some(family_index);
    let train_ds = load_dataset(&cfg.train_data_path(), family_index.as_deref())?;
    let test_ds = load_dataset(&cfg.test_data_path(), family_index.as_deref())?;
    let classes = train_ds.num_classes();
    if test_ds.num_classes() != classes {
        return Err(Error::Config(format!(
            "train has {classes} classes but test has {}",
            test_ds.num_classes()
        )));
    }
    if train_ds.image_size() != cfg.input_size {
        return Err(Error::Config(format!(
            "input_size is {} but dataset images are {}x{}",
            cfg.input_size,
            train_ds.image_size(),
            train_ds.image_size()
        )));
    }
    let model_cfg = cfg.model_config(classes);
    model_cfg.validate()?;
    if cfg.use_db && model_cfg.map_size() < cfg.patch_size {
        return Err(Error::Config(format!(
            "activation maps are {0}x{0} but patch_size is {1}",
            model_cfg.map_size(),
            cfg.patch_size
        )));
    }
    let k = clamp_k(cfg.k, classes);

    ensure_dir(&cfg.out_dir)?;
    let echo_path = cfg.out_dir.join("config.txt");
    std::fs::write(&echo_path, cfg.to_kv_text()).map_err(|e| Error::io(&echo_path, e))?;

    let root = RngStream::from_seed(cfg.seed);
    let mut params = ModelParams::init(&model_cfg, &mut root.substream(&[ROLE_INIT]))?;
    let mut sgd = SgdState::new(&params.tensors());
    let div_cfg = DiversificationConfig {
        p_peak: cfg.p_peak,
        p_patch: cfg.p_patch,
        patch_size: cfg.patch_size,
        alpha: cfg.alpha,
        mode: Mode::Train,
    };
    div_cfg.validate()?;

    let mut metrics = Vec::new();
    let mut best_test_accuracy = f64::NEG_INFINITY;
    let mut best_path = None;
    let s = train_ds.image_size();
    let img_numel = s * s;

    let mut order: Vec<usize> = (0..train_ds.len()).collect();
    for epoch in 1..=cfg.epochs {
        let epoch_start = Instant::now();
        let lr = cfg.lr * cfg.lr_decay_factor.powi(((epoch - 1) / cfg.lr_decay_period) as i32);
        let sgd_cfg = SgdConfig {
            lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        let effective_loss = if epoch <= cfg.ce_warmup_epochs {
            LossKind::Ce
        } else {
            cfg.loss
        };

        root.substream(&[ROLE_SHUFFLE, epoch as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let n = batch.len();
            let mut images = Vec::with_capacity(n * img_numel);
            let mut labels = Vec::with_capacity(n);
            for &i in batch {
                images
                    .extend_from_slice(&train_ds.images.data()[i * img_numel..(i + 1) * img_numel]);
                labels.push(train_ds.labels[i]);
            }
            let images =
                crate::model::normalize_images(&Tensor::from_parts(vec![n, 1, s, s], images));

            let step = (|| -> Result<f64> {
                let mut g = Graph::new();
                let nodes = register_params(&mut g, &params, true);
                let img = g.constant(images);
                let maps = forward_maps(&mut g, &nodes, img, &model_cfg)?;
                observer(BatchTrace {
                    epoch,
                    batch: batch_idx,
                    maps: g.value(maps),
                });
                let scores = if cfg.use_db {
                    let mut mask_rng =
                        root.substream(&[ROLE_MASK, epoch as u64, batch_idx as u64]);
                    let (scores, _) = forward_scores_graph(&mut g, maps, &div_cfg, &mut mask_rng)?;
                    scores
                } else {
                    g.global_avg_pool(maps)?
                };
                let loss = g.batch_loss(scores, &labels, k, effective_loss)?;
                let loss_value = g.value(loss).data()[0];
                if !loss_value.is_finite() {
                    return Err(Error::NonFinite {
                        context: "batch loss".into(),
                    });
                }
                hits += argmax_rows(g.value(scores))
                    .iter()
                    .zip(&labels)
                    .filter(|(p, l)| p == l)
                    .count();
                let grads = g.backward(loss)?;
                let grad_tensors: Vec<Tensor> = nodes
                    .all
                    .iter()
                    .map(|&id| grads.get(id).expect("tracked param").clone())
                    .collect();
                let mut tensors = params.tensors();
                sgd.step(&mut tensors, &grad_tensors, &sgd_cfg)?;
                params.set_tensors(tensors);
                Ok(loss_value)
            })();
            let loss_value = step.map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                },
                other => other,
            })?;
            loss_sum += loss_value * n as f64;
        }
        let train_row = MetricsRow {
            epoch,
            split: Split::Train,
            loss: loss_sum / train_ds.len() as f64,
            accuracy: hits as f64 / train_ds.len() as f64,
            seconds: epoch_start.elapsed().as_secs_f64(),
        };

        let eval_start = Instant::now();
        let eval = evaluate(&params, &model_cfg, &test_ds, effective_loss, k, cfg.batch_size)?;
        let test_row = MetricsRow {
            epoch,
            split: Split::Test,
            loss: eval.mean_loss,
            accuracy: eval.accuracy,
            seconds: eval_start.elapsed().as_secs_f64(),
        };
        println!(
            "epoch {:>3}  train loss {:.4} acc {:.4}  test loss {:.4} acc {:.4}  [{:.2}s]",
            epoch,
            train_row.loss,
            train_row.accuracy,
            test_row.loss,
            test_row.accuracy,
            train_row.seconds + test_row.seconds
        );
        if eval.accuracy > best_test_accuracy {
            best_test_accuracy = eval.accuracy;
            let path = cfg.out_dir.join("best.dbkt");
            save_model(&path, &model_cfg, &params)?;
            best_path = Some(path);
        }
        metrics.push(train_row);
        metrics.push(test_row);
    }

    let final_path = cfg.out_dir.join("final.dbkt");
    save_model(&final_path, &model_cfg, &params)?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    std::fs::write(&metrics_path, metrics_to_csv(&metrics))
        .map_err(|e| Error::io(&metrics_path, e))?;
    let timing_path = cfg.out_dir.join("timing.csv");
    std::fs::write(&timing_path, timing_to_csv(&metrics))
        .map_err(|e| Error::io(&timing_path, e))?;

    let final_test_accuracy = metrics
        .iter()
        .rev()
        .find(|r| r.split == Split::Test)
        .map(|r| r.accuracy)
        .unwrap_or(0.0);
    Ok(TrainOutcome {
        metrics,
        final_checkpoint: final_path,
        best_checkpoint: best_path,
        final_test_accuracy,
        best_test_accuracy: best_test_accuracy.max(0.0),
        model_config: model_cfg,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// Row-major true-class x predicted-class counts.
    pub confusion: Vec<usize>,
    pub num_classes: usize,
    pub samples: usize,
}

impl EvalOutcome {
    pub fn confusion_csv(&self) -> String {
        let mut out = String::new();
        for row in self.confusion.chunks(self.num_classes) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Eval-mode pass: plain pooled scores, fixed batch order, no RNG.
pub fn evaluate(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    ds: &LabeledDataset,
    loss_kind: LossKind,
    k: usize,
    batch_size: usize,
) -> Result<EvalOutcome> {
    if params.num_classes() != ds.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint has {} classes but dataset has {}",
            params.num_classes(),
            ds.num_classes()
        )));
    }
    let s = ds.image_size();
    let img_numel = s * s;
    let classes = ds.num_classes();
    let k = clamp_k(k, classes);
    let mut confusion = vec![0usize; classes * classes];
    let mut loss_sum = 0.0;
    let mut hits = 0usize;
    let mut start = 0;
    while start < ds.len() {
        let end = (start + batch_size).min(ds.len());
        let n = end - start;
        let images = Tensor::from_parts(
            vec![n, 1, s, s],
            ds.images.data()[start * img_numel..end * img_numel].to_vec(),
        );
        let labels = &ds.labels[start..end];
        let scores = crate::model::eval_scores(params, model_cfg, &images)?;
        let (mean, _) = crate::loss::batched_loss(&scores, labels, k, loss_kind)?;
        loss_sum += mean * n as f64;
        for (pred, &truth) in argmax_rows(&scores).into_iter().zip(labels) {
            confusion[truth * classes + pred] += 1;
            if pred == truth {
                hits += 1;
            }
        }
        start = end;
    }
    Ok(EvalOutcome {
        accuracy: hits as f64 / ds.len() as f64,
        mean_loss: loss_sum / ds.len() as f64,
        confusion,
        num_classes: classes,
        samples: ds.len(),
    })
}

/// Load a checkpoint and evaluate it against a dataset directory's test
/// split, writing the confusion matrix alongside.
pub fn eval_checkpoint(
    checkpoint: &Path,
    dataset_dir: &Path,
    loss_kind: LossKind,
    k: usize,
    batch_size: usize,
    out_dir: &Path,
) -> Result<EvalOutcome> {
    let (model_cfg, params) = crate::model::load_model(checkpoint)?;
    let family = dataset_dir.join("families.txt");
    let family = family.is_file().then_some(family);
    let ds = load_dataset(&dataset_dir.join("test.dbds"), family.as_deref())?;
    let outcome = evaluate(&params, &model_cfg, &ds, loss_kind, k, batch_size)?;
    ensure_dir(out_dir)?;
    let path = out_dir.join("confusion.csv");
    std::fs::write(&path, outcome.confusion_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(outcome)
}
