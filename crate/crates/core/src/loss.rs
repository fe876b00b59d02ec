//! Cross-entropy baseline and the gradient-boosting variant that restricts
//! softmax normalization to the ground-truth class plus the top-k
//! highest-scoring negative classes.
//!
//! Tie handling: the threshold `t_k` is the k-th largest negative score and
//! every negative with score `>= t_k` joins the hard set, so ties can push
//! its size above k. The easy set gets an exactly-zero gradient.

use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Ce,
    Gce,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "gce" => Ok(LossKind::Gce),
            other => Err(Error::Config(format!(
                "unknown loss kind '{other}' (expected ce or gce)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Gce => "gce",
        }
    }
}

/// Split of the negative classes around the top-k threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSplit {
    pub label: usize,
    /// Negatives with score >= threshold, ascending by class index.
    pub hard: Vec<usize>,
    /// Remaining negatives, ascending by class index.
    pub easy: Vec<usize>,
    pub threshold: f64,
}

fn validate_label(scores: &[f64], label: usize) -> Result<()> {
    let c = scores.len();
    if c < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {c}"
        )));
    }
    if label >= c {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {c} classes"
        )));
    }
    Ok(())
}

fn validate_k(scores: &[f64], k: usize) -> Result<()> {
    let c = scores.len();
    if k < 1 || k > c - 1 {
        return Err(Error::InvalidArgument(format!(
            "k = {k} outside [1, {}]",
            c - 1
        )));
    }
    Ok(())
}

#[derive(PartialEq)]
struct HeapScore(f64);

impl Eq for HeapScore {}

impl PartialOrd for HeapScore {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapScore {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Threshold at the k-th largest negative score via max-heap selection,
/// then split negatives by `score >= threshold`.
pub fn top_k_negatives(scores: &[f64], label: usize, k: usize) -> Result<NegativeSplit> {
    validate_label(scores, label)?;
    validate_k(scores, k)?;
    let mut heap: BinaryHeap<HeapScore> = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label)
        .map(|(_, &s)| HeapScore(s))
        .collect();
    let mut threshold = f64::NEG_INFINITY;
    for _ in 0..k {
        threshold = heap.pop().expect("k <= C-1 negatives").0;
    }
    let mut hard = Vec::with_capacity(k);
    let mut easy = Vec::new();
    for (i, &s) in scores.iter().enumerate() {
        if i == label {
            continue;
        }
        if s >= threshold {
            hard.push(i);
        } else {
            easy.push(i);
        }
    }
    Ok(NegativeSplit {
        label,
        hard,
        easy,
        threshold,
    })
}

/// Class indices participating in the GCE normalization ({label} and the
/// hard negatives), ascending. Ascending order keeps the arithmetic
/// bit-identical with `ce_*` when the hard set covers all negatives.
fn participants(split: &NegativeSplit) -> Vec<usize> {
    let mut p = split.hard.clone();
    let pos = p.partition_point(|&i| i < split.label);
    p.insert(pos, split.label);
    p
}

/// log(sum over `idx` of exp(scores[i])), stabilized.
fn log_sum_exp(scores: &[f64], idx: &[usize]) -> f64 {
    let m = idx
        .iter()
        .map(|&i| scores[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = idx.iter().map(|&i| (scores[i] - m).exp()).sum();
    m + sum.ln()
}

pub fn ce_loss(scores: &[f64], label: usize) -> Result<f64> {
    validate_label(scores, label)?;
    let all: Vec<usize> = (0..scores.len()).collect();
    Ok(log_sum_exp(scores, &all) - scores[label])
}

/// softmax(scores) - onehot(label)
pub fn ce_gradient(scores: &[f64], label: usize) -> Result<Vec<f64>> {
    validate_label(scores, label)?;
    let all: Vec<usize> = (0..scores.len()).collect();
    let z = log_sum_exp(scores, &all);
    let mut grad: Vec<f64> = scores.iter().map(|&s| (s - z).exp()).collect();
    grad[label] -= 1.0;
    Ok(grad)
}

pub fn gce_loss(scores: &[f64], label: usize, k: usize) -> Result<f64> {
    let split = top_k_negatives(scores, label, k)?;
    let part = participants(&split);
    Ok(log_sum_exp(scores, &part) - scores[label])
}

/// Analytic GCE gradient: softmax over the participating set, minus one at
/// the label, exactly zero on easy negatives.
pub fn gce_gradient(scores: &[f64], label: usize, k: usize) -> Result<Vec<f64>> {
    let split = top_k_negatives(scores, label, k)?;
    Ok(gce_gradient_for_split(scores, &split))
}

/// Gradient with the selection held fixed; used both by `gce_gradient` and
/// by finite-difference tests that must not let the split move.
pub fn gce_gradient_for_split(scores: &[f64], split: &NegativeSplit) -> Vec<f64> {
    let part = participants(split);
    let z = log_sum_exp(scores, &part);
    let mut grad = vec![0.0; scores.len()];
    for &i in &part {
        grad[i] = (scores[i] - z).exp();
    }
    grad[split.label] -= 1.0;
    grad
}

/// GCE loss with a fixed, precomputed selection.
pub fn gce_loss_for_split(scores: &[f64], split: &NegativeSplit) -> f64 {
    let part = participants(split);
    log_sum_exp(scores, &part) - scores[split.label]
}

/// Per-class gradient margins of GCE over CE on the participating classes.
#[derive(Debug, Clone)]
pub struct BoostReport {
    pub split: NegativeSplit,
    /// (class, dGCE/ds_c - dCE/ds_c) for each participating class.
    pub margins: Vec<(usize, f64)>,
    /// Participating classes whose margin failed the expected comparison.
    pub violations: Vec<usize>,
}

impl BoostReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check the boost inequality: with a nonempty easy set, the GCE gradient
/// strictly exceeds the CE gradient on every participating class; with an
/// empty easy set the two gradients coincide.
pub fn verify_boost(scores: &[f64], label: usize, k: usize) -> Result<BoostReport> {
    let split = top_k_negatives(scores, label, k)?;
    let ce = ce_gradient(scores, label)?;
    let gce = gce_gradient_for_split(scores, &split);
    let part = participants(&split);
    let strict = !split.easy.is_empty();
    let mut margins = Vec::with_capacity(part.len());
    let mut violations = Vec::new();
    for &c in &part {
        let margin = gce[c] - ce[c];
        let fine = if strict { margin > 0.0 } else { margin == 0.0 };
        if !fine {
            violations.push(c);
        }
        margins.push((c, margin));
    }
    Ok(BoostReport {
        split,
        margins,
        violations,
    })
}

/// Mean loss over a batch of score rows plus the per-sample gradient rows
/// already scaled by 1/N.
pub fn batched_loss(
    scores: &Tensor,
    labels: &[usize],
    k: usize,
    kind: LossKind,
) -> Result<(f64, Tensor)> {
    let shape = scores.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "batched_loss expects N x C scores, got {shape:?}"
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{n} score rows but {} labels",
            labels.len()
        )));
    }
    for (row, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(Error::InvalidLabel {
                row,
                label,
                classes: c,
            });
        }
    }
    let mut total = 0.0;
    let mut grads = vec![0.0; n * c];
    let inv_n = 1.0 / n as f64;
    for row in 0..n {
        let s = &scores.data()[row * c..(row + 1) * c];
        let (loss, grad) = match kind {
            LossKind::Ce => (ce_loss(s, labels[row])?, ce_gradient(s, labels[row])?),
            LossKind::Gce => (
                gce_loss(s, labels[row], k)?,
                gce_gradient(s, labels[row], k)?,
            ),
        };
        total += loss;
        for (dst, g) in grads[row * c..(row + 1) * c].iter_mut().zip(grad) {
            *dst = g * inv_n;
        }
    }
    Ok((total * inv_n, Tensor::new(vec![n, c], grads)?))
}

/// Clamp k to the valid range [1, C-1] for a C-class problem.
pub fn clamp_k(k: usize, classes: usize) -> usize {
    k.max(1).min(classes.saturating_sub(1))
}
