//! Brute-force reference implementations kept deliberately independent of
//! the main code paths: full sorts instead of heap selection, unstabilized
//! sums instead of log-sum-exp, six-loop convolution instead of im2col.
//! The `check` CLI verb runs the whole battery and emits a report.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::loss::NegativeSplit;
use crate::tensor::Tensor;

/// Central finite differences of a scalar function of a tensor.
pub fn fd_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let (fp, fm) = (f(&plus), f(&minus));
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: format!("fd_gradient at coordinate {i}"),
            });
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Top-k negative split by full descending sort and the literal
/// `score >= t_k` rule.
pub fn naive_select(scores: &[f64], label: usize, k: usize) -> Result<NegativeSplit> {
    let c = scores.len();
    if c < 2 || label >= c {
        return Err(Error::InvalidArgument(format!(
            "bad label {label} for {c} classes"
        )));
    }
    if k < 1 || k > c - 1 {
        return Err(Error::InvalidArgument(format!("bad k {k} for {c} classes")));
    }
    let mut negatives: Vec<f64> = scores
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label)
        .map(|(_, &s)| s)
        .collect();
    negatives.sort_by(|a, b| b.total_cmp(a));
    let threshold = negatives[k - 1];
    let mut hard = Vec::new();
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

fn check_magnitude(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| s.abs() > 50.0) {
        return Err(Error::InvalidArgument(
            "naive loss overflow guard: |s| > 50".into(),
        ));
    }
    Ok(())
}

/// Cross entropy by the raw definition, no stabilization.
pub fn direct_ce(scores: &[f64], label: usize) -> Result<f64> {
    check_magnitude(scores)?;
    let denom: f64 = scores.iter().map(|&s| s.exp()).sum();
    Ok(-(scores[label].exp() / denom).ln())
}

/// Top-k loss by the raw definition, using the sort-based split.
pub fn direct_gce(scores: &[f64], label: usize, k: usize) -> Result<f64> {
    check_magnitude(scores)?;
    let split = naive_select(scores, label, k)?;
    let denom: f64 =
        scores[label].exp() + split.hard.iter().map(|&i| scores[i].exp()).sum::<f64>();
    Ok(-(scores[label].exp() / denom).ln())
}

/// Convolution by six nested loops, straight from the definition.
pub fn naive_conv2d(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let (n, cin, h, w) = {
        let s = input.shape();
        (s[0], s[1], s[2], s[3])
    };
    let (cout, kcin, kh, kw) = {
        let s = kernel.shape();
        (s[0], s[1], s[2], s[3])
    };
    if cin != kcin {
        return Err(Error::ShapeMismatch {
            left: input.shape().to_vec(),
            right: kernel.shape().to_vec(),
        });
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    let at_in = |s: usize, c: usize, i: usize, j: usize| input.data()[((s * cin + c) * h + i) * w + j];
    let at_k = |o: usize, c: usize, i: usize, j: usize| kernel.data()[((o * cin + c) * kh + i) * kw + j];
    for s in 0..n {
        for oc in 0..cout {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ih = (oh * stride + ki) as isize - padding as isize;
                                let iw = (ow * stride + kj) as isize - padding as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w {
                                    acc += at_in(s, ic, ih as usize, iw as usize)
                                        * at_k(oc, ic, ki, kj);
                                }
                            }
                        }
                    }
                    out[((s * cout + oc) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, ho, wo], out)
}

/// Per-class spatial mean by direct summation over a C x H x W tensor.
pub fn naive_avg_pool(maps: &Tensor) -> Result<Vec<f64>> {
    let shape = maps.shape();
    if shape.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "naive_avg_pool expects C x H x W, got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let area = h * w;
    let mut scores = Vec::with_capacity(c);
    for class in 0..c {
        let mut total = 0.0;
        for i in 0..area {
            total += maps.data()[class * area + i];
        }
        scores.push(total / area as f64);
    }
    Ok(scores)
}

/// Replay a recorded suppression: keep where mask is 0, scale by alpha
/// where mask is 1.
pub fn replay_suppression(maps: &Tensor, mask: &Tensor, alpha: f64) -> Result<Tensor> {
    if maps.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            left: maps.shape().to_vec(),
            right: mask.shape().to_vec(),
        });
    }
    let data = maps
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&m, &b)| if b == 0.0 { m } else { alpha * m })
        .collect();
    Tensor::new(maps.shape().to_vec(), data)
}

/// Outcome of one oracle cross-check.
#[derive(Debug, Clone)]
pub struct OracleReport {
    pub operation: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Reproduces the worst-case input: the seed and case index it came from.
    pub worst_input_digest: String,
    pub pass: bool,
}

impl OracleReport {
    pub fn new(operation: &str, tolerance: f64) -> ReportBuilder {
        ReportBuilder {
            operation: operation.to_string(),
            tolerance,
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            worst_input_digest: String::from("-"),
        }
    }
}

/// Accumulates per-case errors and remembers which case was worst.
pub struct ReportBuilder {
    operation: String,
    tolerance: f64,
    max_abs_err: f64,
    max_rel_err: f64,
    worst_input_digest: String,
}

impl ReportBuilder {
    /// Record one compared pair; `digest` should reproduce the input
    /// (typically "seed=S case=N").
    pub fn record(&mut self, got: f64, want: f64, digest: &str) {
        let abs = (got - want).abs();
        let rel = if want.abs() > 1e-300 {
            abs / want.abs()
        } else {
            abs
        };
        if abs > self.max_abs_err {
            self.max_abs_err = abs;
            self.worst_input_digest = digest.to_string();
        }
        self.max_rel_err = self.max_rel_err.max(rel);
    }

    pub fn record_slices(&mut self, got: &[f64], want: &[f64], digest: &str) {
        for (g, w) in got.iter().zip(want) {
            self.record(*g, *w, digest);
        }
    }

    pub fn finish(self) -> OracleReport {
        OracleReport {
            operation: self.operation,
            pass: self.max_abs_err <= self.tolerance,
            max_abs_err: self.max_abs_err,
            max_rel_err: self.max_rel_err,
            worst_input_digest: self.worst_input_digest,
        }
    }
}

/// Render reports as aligned plain text.
pub fn reports_to_text(reports: &[OracleReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(
            out,
            "{:<28} max_abs={:<12.3e} max_rel={:<12.3e} {} ({})",
            r.operation,
            r.max_abs_err,
            r.max_rel_err,
            if r.pass { "PASS" } else { "FAIL" },
            r.worst_input_digest
        );
    }
    out
}

/// Render reports as CSV: operation,max_abs_err,max_rel_err,pass
pub fn reports_to_csv(reports: &[OracleReport]) -> String {
    let mut out = String::from("operation,max_abs_err,max_rel_err,pass\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{:e},{:e},{}",
            r.operation, r.max_abs_err, r.max_rel_err, r.pass
        );
    }
    out
}

/// The full cross-check battery behind the `check` CLI verb: every fast
/// path against its brute-force reference, at the standard tolerance
/// ladder (1e-12 algebraic, 1e-8 finite differences of smooth scalars,
/// 1e-4 relative for deep compositions).
pub fn run_all(seed: u64) -> Vec<OracleReport> {
    use crate::divblock::{self, DiversificationConfig, Mode};
    use crate::loss;
    use crate::rng::RngStream;

    let mut reports = Vec::new();
    let digest = |case: usize| format!("seed={seed} case={case}");

    // conv2d vs the six-loop definition.
    {
        let mut b = OracleReport::new("conv2d_vs_naive", 1e-10);
        let mut rng = RngStream::from_seed(seed ^ 0x11);
        for case in 0..20 {
            let (cin, cout) = (1 + rng.index(3), 1 + rng.index(3));
            let (h, w) = (3 + rng.index(5), 3 + rng.index(5));
            let kside = 1 + rng.index(3.min(h.min(w)));
            let stride = 1 + rng.index(2);
            let padding = rng.index(2);
            let input = Tensor::from_parts(
                vec![1, cin, h, w],
                (0..cin * h * w).map(|_| rng.normal()).collect(),
            );
            let kernel = Tensor::from_parts(
                vec![cout, cin, kside, kside],
                (0..cout * cin * kside * kside).map(|_| rng.normal()).collect(),
            );
            if crate::conv::conv_output_dims(h, w, kside, kside, stride, padding).is_err() {
                continue;
            }
            let fast = crate::conv::conv2d(&input, &kernel, stride, padding).unwrap();
            let slow = naive_conv2d(&input, &kernel, stride, padding).unwrap();
            b.record_slices(fast.data(), slow.data(), &digest(case));
        }
        reports.push(b.finish());
    }

    // Pooling vs direct summation.
    {
        let mut b = OracleReport::new("avg_pool_vs_sum", 1e-12);
        let mut rng = RngStream::from_seed(seed ^ 0x22);
        for case in 0..50 {
            let (c, h, w) = (1 + rng.index(4), 2 + rng.index(7), 2 + rng.index(7));
            let maps = Tensor::from_parts(
                vec![c, h, w],
                (0..c * h * w).map(|_| rng.normal()).collect(),
            );
            let fast = divblock::global_avg_pool(&maps).unwrap();
            let slow = naive_avg_pool(&maps).unwrap();
            b.record_slices(&fast, &slow, &digest(case));
        }
        reports.push(b.finish());
    }

    // Suppression replay: generated masks applied two independent ways.
    {
        let mut b = OracleReport::new("suppression_replay", 1e-12);
        let mut rng = RngStream::from_seed(seed ^ 0x33);
        let cfg = DiversificationConfig {
            mode: Mode::Train,
            ..DiversificationConfig::default()
        };
        for case in 0..50 {
            let maps = Tensor::from_parts(
                vec![2, 4, 4],
                (0..32).map(|_| rng.normal()).collect(),
            );
            let mut mask_rng = RngStream::from_seed(seed ^ (case as u64) << 8);
            let mask = divblock::generate_mask(&maps, &cfg, &mut mask_rng).unwrap();
            let fast = divblock::apply_suppression(&maps, &mask, cfg.alpha).unwrap();
            let slow = replay_suppression(&maps, &mask, cfg.alpha).unwrap();
            b.record_slices(fast.data(), slow.data(), &digest(case));
        }
        reports.push(b.finish());
    }

    // Heap selection vs full-sort selection (exact agreement required).
    {
        let mut b = OracleReport::new("top_k_vs_sort", 0.0);
        let mut rng = RngStream::from_seed(seed ^ 0x44);
        for case in 0..10_000 {
            let c = 2 + rng.index(30);
            let mut s: Vec<f64> = (0..c).map(|_| rng.normal() * 3.0).collect();
            if case % 4 == 0 {
                for v in &mut s {
                    *v = v.round();
                }
            }
            let l = rng.index(c);
            let k = 1 + rng.index(c - 1);
            let fast = loss::top_k_negatives(&s, l, k).unwrap();
            let slow = naive_select(&s, l, k).unwrap();
            let agree = fast == slow;
            b.record(if agree { 0.0 } else { 1.0 }, 0.0, &digest(case));
        }
        reports.push(b.finish());
    }

    // Stabilized losses vs raw-definition evaluation.
    {
        let mut b_ce = OracleReport::new("ce_vs_direct", 1e-12);
        let mut b_gce = OracleReport::new("gce_vs_direct", 1e-12);
        let mut rng = RngStream::from_seed(seed ^ 0x55);
        for case in 0..500 {
            let c = 2 + rng.index(20);
            let s: Vec<f64> = (0..c).map(|_| (rng.next_f64() * 2.0 - 1.0) * 10.0).collect();
            let l = rng.index(c);
            let k = 1 + rng.index(c - 1);
            b_ce.record(
                loss::ce_loss(&s, l).unwrap(),
                direct_ce(&s, l).unwrap(),
                &digest(case),
            );
            b_gce.record(
                loss::gce_loss(&s, l, k).unwrap(),
                direct_gce(&s, l, k).unwrap(),
                &digest(case),
            );
        }
        reports.push(b_ce.finish());
        reports.push(b_gce.finish());
    }

    // Analytic loss gradient vs central finite differences (fixed split).
    {
        let mut b = OracleReport::new("gce_grad_vs_fd", 1e-8);
        let mut rng = RngStream::from_seed(seed ^ 0x66);
        for case in 0..200 {
            let c = 3 + rng.index(10);
            let s: Vec<f64> = (0..c).map(|_| (rng.next_f64() * 2.0 - 1.0) * 5.0).collect();
            let l = rng.index(c);
            let k = 1 + rng.index(c - 1);
            let split = loss::top_k_negatives(&s, l, k).unwrap();
            let grad = loss::gce_gradient_for_split(&s, &split);
            let h = 1e-6;
            for i in 0..c {
                let mut plus = s.clone();
                plus[i] += h;
                let mut minus = s.clone();
                minus[i] -= h;
                let fd = (loss::gce_loss_for_split(&plus, &split)
                    - loss::gce_loss_for_split(&minus, &split))
                    / (2.0 * h);
                b.record(grad[i], fd, &digest(case));
            }
        }
        reports.push(b.finish());
    }

    // Whole-model backward vs finite differences on a micro model.
    {
        let mut b = OracleReport::new("model_backward_vs_fd", 1e-4);
        let cfg = crate::model::ModelConfig {
            input_size: 8,
            channels: vec![2],
            num_classes: 3,
        };
        let params =
            crate::model::ModelParams::init(&cfg, &mut RngStream::from_seed(seed ^ 0x77)).unwrap();
        let mut rng = RngStream::from_seed(seed ^ 0x88);
        let images = Tensor::from_parts(
            vec![2, 1, 8, 8],
            (0..128).map(|_| rng.next_f64()).collect(),
        );
        let labels = vec![0, 2];
        let loss_of = |tensors: Vec<Tensor>| -> f64 {
            let mut p = params.clone();
            p.set_tensors(tensors);
            let mut g = crate::graph::Graph::new();
            let nodes = crate::model::register_params(&mut g, &p, false);
            let img = g.constant(images.clone());
            let maps = crate::model::forward_maps(&mut g, &nodes, img, &cfg).unwrap();
            let scores = g.global_avg_pool(maps).unwrap();
            let loss = g.batch_loss(scores, &labels, 1, loss::LossKind::Gce).unwrap();
            g.value(loss).data()[0]
        };
        let mut g = crate::graph::Graph::new();
        let nodes = crate::model::register_params(&mut g, &params, true);
        let img = g.constant(images.clone());
        let maps = crate::model::forward_maps(&mut g, &nodes, img, &cfg).unwrap();
        let scores = g.global_avg_pool(maps).unwrap();
        let loss_node = g.batch_loss(scores, &labels, 1, loss::LossKind::Gce).unwrap();
        let grads = g.backward(loss_node).unwrap();
        let base = params.tensors();
        for (pi, node) in nodes.all.iter().enumerate() {
            let analytic = grads.get(*node).unwrap();
            let fd = fd_gradient(
                |t| {
                    let mut tensors = base.clone();
                    tensors[pi] = t.clone();
                    loss_of(tensors)
                },
                &base[pi],
                1e-5,
            )
            .unwrap();
            for (a, n) in analytic.data().iter().zip(fd.data()) {
                // Relative error against the larger magnitude.
                let denom = n.abs().max(1e-2);
                b.record(a / denom, n / denom, &format!("seed={seed} param={pi}"));
            }
        }
        reports.push(b.finish());
    }

    // Momentum SGD vs a hand-unrolled two-step recurrence.
    {
        let mut b = OracleReport::new("sgd_vs_unrolled", 1e-12);
        let mut rng = RngStream::from_seed(seed ^ 0x99);
        for case in 0..100 {
            let (lr, mu, wd) = (0.05, 0.9, 0.01);
            let (p0, g1, g2) = (rng.normal(), rng.normal(), rng.normal());
            let v1 = g1 + wd * p0;
            let p1 = p0 - lr * v1;
            let v2 = mu * v1 + g2 + wd * p1;
            let p2 = p1 - lr * v2;
            let mut p = Tensor::from_parts(vec![1], vec![p0]);
            let mut v = Tensor::from_parts(vec![1], vec![0.0]);
            let cfg = crate::optim::SgdConfig {
                lr,
                momentum: mu,
                weight_decay: wd,
            };
            crate::optim::sgd_step(&mut p, &Tensor::from_parts(vec![1], vec![g1]), &mut v, &cfg)
                .unwrap();
            crate::optim::sgd_step(&mut p, &Tensor::from_parts(vec![1], vec![g2]), &mut v, &cfg)
                .unwrap();
            b.record(p.data()[0], p2, &digest(case));
        }
        reports.push(b.finish());
    }

    reports
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_battery_is_green() {
        let reports = run_all(2024);
        for r in &reports {
            assert!(r.pass, "{} failed: {}", r.operation, reports_to_text(&reports));
        }
        assert!(reports.len() >= 8);
    }

    #[test]
    fn fd_gradient_sum_of_squares() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let f = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
        let g = fd_gradient(f, &x, 1e-6).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn fd_gradient_constant_is_zero() {
        let x = Tensor::new(vec![3], vec![1.0, -1.0, 0.5]).unwrap();
        let g = fd_gradient(|_| 3.25, &x, 1e-6).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn naive_select_total_tie_takes_all() {
        for k in 1..4 {
            let split = naive_select(&[1.0, 1.0, 1.0, 1.0], 0, k).unwrap();
            assert_eq!(split.hard, vec![1, 2, 3]);
        }
    }

    #[test]
    fn naive_select_k1_is_argmax_set() {
        let split = naive_select(&[0.0, 3.0, 7.0, 7.0, 1.0], 0, 1).unwrap();
        assert_eq!(split.hard, vec![2, 3]);
        assert_eq!(split.threshold, 7.0);
    }

    #[test]
    fn direct_ce_two_equal_scores_is_log2() {
        let loss = direct_ce(&[0.0, 0.0], 0).unwrap();
        assert!((loss - 2.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn direct_losses_reject_large_magnitudes() {
        assert!(direct_ce(&[60.0, 0.0], 0).is_err());
        assert!(direct_gce(&[60.0, 0.0, 0.0], 0, 1).is_err());
    }

    #[test]
    fn report_builder_tracks_worst_case() {
        let mut b = OracleReport::new("demo", 1e-6);
        b.record(1.0, 1.0 + 1e-9, "seed=1 case=0");
        b.record(2.0, 2.1, "seed=1 case=1");
        b.record(3.0, 3.0, "seed=1 case=2");
        let r = b.finish();
        assert!(!r.pass);
        assert_eq!(r.worst_input_digest, "seed=1 case=1");
        assert!((r.max_abs_err - 0.1).abs() < 1e-12);
    }

    #[test]
    fn csv_shape() {
        let mut b = OracleReport::new("op_a", 1e-3);
        b.record(1.0, 1.0, "seed=0 case=0");
        let csv = reports_to_csv(&[b.finish()]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "operation,max_abs_err,max_rel_err,pass");
        assert!(lines.next().unwrap().starts_with("op_a,"));
    }
}
