//! Reverse-mode tape over whole tensors.
//!
//! Nodes are appended in creation order, which is already a topological
//! order, so `backward` is one reverse sweep that visits each node exactly
//! once and sums contributions where a value fans out to several consumers.

use crate::conv::{conv2d, conv2d_backward_raw, conv_output_dims};
use crate::error::{Error, Result};
use crate::loss::{batched_loss, LossKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Relu(NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    },
    AddChannelBias {
        input: NodeId,
        bias: NodeId,
    },
    MaxPool2 {
        input: NodeId,
        /// Flat input index chosen per output cell.
        argmax: Vec<usize>,
    },
    /// Elementwise multiplication by a tensor that is a constant of the
    /// forward pass (the suppression factor pattern).
    ScaleConst {
        input: NodeId,
        factors: Tensor,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    SumAll(NodeId),
    /// Mean classification loss over a batch of score rows; the gradient
    /// w.r.t. the scores is analytic and precomputed at forward time.
    BatchLoss {
        scores: NodeId,
        score_grads: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    /// Whether any tracked leaf feeds this node.
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Untracked input: gradients are not propagated into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Tracked input: `backward` reports a gradient for it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: crate::tensor::BinaryOp,
        make: fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let value = crate::tensor::tensor_binary(self.value(a), self.value(b), op)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, make(a, b), needs))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, crate::tensor::BinaryOp::Add, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, crate::tensor::BinaryOp::Sub, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, crate::tensor::BinaryOp::Mul, Op::Mul)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::from_parts(
            self.value(x).shape().to_vec(),
            self.value(x).data().iter().map(|&v| v.max(0.0)).collect(),
        );
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let value = conv2d(self.value(input), self.value(kernel), stride, padding)?;
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            needs,
        ))
    }

    /// input (N x C x H x W) plus a per-channel bias (C).
    pub fn add_channel_bias(&mut self, input: NodeId, bias: NodeId) -> Result<NodeId> {
        let in_t = self.value(input);
        let b = self.value(bias);
        let shape = in_t.shape().to_vec();
        if shape.len() != 4 || b.shape() != [shape[1]] {
            return Err(Error::ShapeMismatch {
                left: shape,
                right: b.shape().to_vec(),
            });
        }
        let (c, area) = (shape[1], shape[2] * shape[3]);
        let mut data = in_t.data().to_vec();
        for (chunk_idx, chunk) in data.chunks_mut(area).enumerate() {
            let bv = b.data()[chunk_idx % c];
            for v in chunk {
                *v += bv;
            }
        }
        let needs = self.needs(input) || self.needs(bias);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::AddChannelBias { input, bias },
            needs,
        ))
    }

    /// 2x2 max pooling with stride 2; trailing odd rows/columns are dropped.
    pub fn max_pool2(&mut self, input: NodeId) -> Result<NodeId> {
        let in_t = self.value(input);
        let s = in_t.shape();
        if s.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "max_pool2 expects 4-d input, got {s:?}"
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::InvalidArgument(format!(
                "max_pool2 on degenerate spatial size {h}x{w}"
            )));
        }
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; n * c * ho * wo];
        let data = in_t.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best_idx = base + (2 * oh) * w + 2 * ow;
                    let mut best = data[best_idx];
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oh + di) * w + 2 * ow + dj;
                        if data[idx] > best {
                            best = data[idx];
                            best_idx = idx;
                        }
                    }
                    let o = plane * ho * wo + oh * wo + ow;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, ho, wo], out),
            Op::MaxPool2 { input, argmax },
            needs,
        ))
    }

    /// Multiply elementwise by `factors`, which is treated as a constant:
    /// the upstream gradient is scaled by the same factors.
    pub fn scale_const(&mut self, input: NodeId, factors: Tensor) -> Result<NodeId> {
        let in_t = self.value(input);
        if in_t.shape() != factors.shape() {
            return Err(Error::ShapeMismatch {
                left: in_t.shape().to_vec(),
                right: factors.shape().to_vec(),
            });
        }
        let data = in_t
            .data()
            .iter()
            .zip(factors.data())
            .map(|(&v, &f)| v * f)
            .collect();
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::from_parts(in_t.shape().to_vec(), data),
            Op::ScaleConst { input, factors },
            needs,
        ))
    }

    /// (N x C x H x W) -> (N x C) spatial means.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let in_t = self.value(input);
        let s = in_t.shape();
        if s.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "global_avg_pool expects 4-d input, got {s:?}"
            )));
        }
        let (n, c, area) = (s[0], s[1], s[2] * s[3]);
        let mut out = Vec::with_capacity(n * c);
        for plane in in_t.data().chunks(area) {
            out.push(plane.iter().sum::<f64>() / area as f64);
        }
        let needs = self.needs(input);
        Ok(self.push(
            Tensor::from_parts(vec![n, c], out),
            Op::GlobalAvgPool { input },
            needs,
        ))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::from_parts(vec![1], vec![total]), Op::SumAll(x), needs)
    }

    /// Mean CE/GCE loss over score rows; scalar-valued node.
    pub fn batch_loss(
        &mut self,
        scores: NodeId,
        labels: &[usize],
        k: usize,
        kind: LossKind,
    ) -> Result<NodeId> {
        let (mean, score_grads) = batched_loss(self.value(scores), labels, k, kind)?;
        let needs = self.needs(scores);
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![mean]),
            Op::BatchLoss {
                scores,
                score_grads,
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar root. Returns a gradient per node that
    /// both needs one and received one.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if !self.value(root).is_scalar_shaped() {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar-shaped, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &grad, &mut grads);
            grads[id] = Some(grad);
        }
        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), data))
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn accumulate(
        &self,
        target: NodeId,
        contribution: impl Iterator<Item = f64>,
        grads: &mut [Option<Vec<f64>>],
    ) {
        if !self.needs(target) {
            return;
        }
        let slot = grads[target.0]
            .get_or_insert_with(|| vec![0.0; self.nodes[target.0].value.numel()]);
        for (dst, v) in slot.iter_mut().zip(contribution) {
            *dst += v;
        }
    }

    /// Scalar-broadcast aware accumulation for the binary ops: when the
    /// operand was scalar-shaped, its gradient is the sum of the elementwise
    /// contributions.
    fn accumulate_binary(
        &self,
        target: NodeId,
        contributions: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        if !self.needs(target) {
            return;
        }
        if self.nodes[target.0].value.is_scalar_shaped() && contributions.len() > 1 {
            let total: f64 = contributions.iter().sum();
            self.accumulate(target, std::iter::once(total), grads);
        } else {
            self.accumulate(target, contributions.iter().copied(), grads);
        }
    }

    fn propagate(&self, id: usize, grad: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        if !node.needs_grad {
            return;
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_binary(*a, grad, grads);
                self.accumulate_binary(*b, grad, grads);
            }
            Op::Sub(a, b) => {
                self.accumulate_binary(*a, grad, grads);
                let negated: Vec<f64> = grad.iter().map(|g| -g).collect();
                self.accumulate_binary(*b, &negated, grads);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let broadcast = |t: &Tensor, i: usize| {
                    if t.is_scalar_shaped() {
                        t.data()[0]
                    } else {
                        t.data()[i]
                    }
                };
                let da: Vec<f64> = grad
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * broadcast(bv, i))
                    .collect();
                let db: Vec<f64> = grad
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * broadcast(av, i))
                    .collect();
                self.accumulate_binary(*a, &da, grads);
                self.accumulate_binary(*b, &db, grads);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                self.accumulate(
                    *x,
                    grad.iter()
                        .zip(xv.data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }),
                    grads,
                );
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let in_t = self.value(*input);
                let k_t = self.value(*kernel);
                let (n, cin, h, w) = {
                    let s = in_t.shape();
                    (s[0], s[1], s[2], s[3])
                };
                let (cout, kh, kw) = {
                    let s = k_t.shape();
                    (s[0], s[2], s[3])
                };
                let (ho, wo) =
                    conv_output_dims(h, w, kh, kw, *stride, *padding).expect("validated at forward");
                let (gi, gk) = conv2d_backward_raw(
                    in_t.data(),
                    k_t.data(),
                    grad,
                    n,
                    cin,
                    h,
                    w,
                    cout,
                    kh,
                    kw,
                    *stride,
                    *padding,
                    ho,
                    wo,
                );
                self.accumulate(*input, gi.into_iter(), grads);
                self.accumulate(*kernel, gk.into_iter(), grads);
            }
            Op::AddChannelBias { input, bias } => {
                self.accumulate(*input, grad.iter().copied(), grads);
                if self.needs(*bias) {
                    let s = self.value(*input).shape();
                    let (c, area) = (s[1], s[2] * s[3]);
                    let mut gbias = vec![0.0; c];
                    for (chunk_idx, chunk) in grad.chunks(area).enumerate() {
                        gbias[chunk_idx % c] += chunk.iter().sum::<f64>();
                    }
                    self.accumulate(*bias, gbias.into_iter(), grads);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if self.needs(*input) {
                    let mut gi = vec![0.0; self.value(*input).numel()];
                    for (g, &src) in grad.iter().zip(argmax) {
                        gi[src] += g;
                    }
                    self.accumulate(*input, gi.into_iter(), grads);
                }
            }
            Op::ScaleConst { input, factors } => {
                self.accumulate(
                    *input,
                    grad.iter().zip(factors.data()).map(|(g, &f)| g * f),
                    grads,
                );
            }
            Op::GlobalAvgPool { input } => {
                if self.needs(*input) {
                    let s = self.value(*input).shape();
                    let area = s[2] * s[3];
                    let inv = 1.0 / area as f64;
                    let mut gi = Vec::with_capacity(self.value(*input).numel());
                    for g in grad {
                        gi.extend(std::iter::repeat(g * inv).take(area));
                    }
                    self.accumulate(*input, gi.into_iter(), grads);
                }
            }
            Op::SumAll(x) => {
                let g = grad[0];
                self.accumulate(*x, std::iter::repeat(g).take(self.value(*x).numel()), grads);
            }
            Op::BatchLoss {
                scores,
                score_grads,
            } => {
                let g = grad[0];
                self.accumulate(*scores, score_grads.data().iter().map(|&v| v * g), grads);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::fd_gradient;
    use crate::rng::RngStream;

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::new();
        let w = g.param(Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let loss = g.sum_all(w);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares_is_2w() {
        let mut g = Graph::new();
        let w = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn shared_subexpression_accumulates_like_cloned_one() {
        // y = (w*w) + (w*w), sharing the square node.
        let w_val = Tensor::new(vec![2], vec![1.5, -0.5]).unwrap();
        let mut g = Graph::new();
        let w = g.param(w_val.clone());
        let sq = g.mul(w, w).unwrap();
        let twice = g.add(sq, sq).unwrap();
        let loss = g.sum_all(twice);
        let shared = g.backward(loss).unwrap().get(w).unwrap().clone();

        // Oracle: clone the subexpression instead of sharing it.
        let mut g2 = Graph::new();
        let w2 = g2.param(w_val);
        let sq_a = g2.mul(w2, w2).unwrap();
        let sq_b = g2.mul(w2, w2).unwrap();
        let sum = g2.add(sq_a, sq_b).unwrap();
        let loss2 = g2.sum_all(sum);
        let cloned = g2.backward(loss2).unwrap().get(w2).unwrap().clone();

        assert_eq!(shared.data(), cloned.data());
    }

    #[test]
    fn rejects_non_scalar_root() {
        let mut g = Graph::new();
        let w = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn grad_of_sum_of_products_equals_other_factor() {
        let mut rng = RngStream::from_seed(9);
        let a_val = Tensor::new(vec![3, 4], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let b_val = Tensor::new(vec![3, 4], (0..12).map(|_| rng.normal()).collect()).unwrap();
        let mut g = Graph::new();
        let a = g.param(a_val.clone());
        let b = g.constant(b_val.clone());
        let prod = g.mul(a, b).unwrap();
        let loss = g.sum_all(prod);
        let grads = g.backward(loss).unwrap();
        for (got, want) in grads.get(a).unwrap().data().iter().zip(b_val.data()) {
            assert!((got - want).abs() < 1e-8);
        }
        // The untracked side gets no gradient.
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn scalar_broadcast_gradient_sums() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.param(Tensor::scalar(2.0).unwrap());
        let y = g.mul(x, s).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(s).unwrap().data(), &[6.0]); // 1+2+3
    }

    // Finite-difference sweep over every differentiable op on a few shapes.
    #[test]
    fn ops_match_finite_differences() {
        let mut rng = RngStream::from_seed(42);
        for shape in [vec![1, 2, 4, 4], vec![2, 3, 6, 6], vec![1, 1, 5, 5]] {
            let numel: usize = shape.iter().product();
            let x_val = Tensor::new(shape.clone(), (0..numel).map(|_| rng.normal()).collect())
                .unwrap();
            let factors = Tensor::new(
                shape.clone(),
                (0..numel).map(|_| if rng.bernoulli(0.5) { 0.1 } else { 1.0 }).collect(),
            )
            .unwrap();

            type Build = Box<dyn Fn(&mut Graph, NodeId) -> NodeId>;
            let f = factors.clone();
            let builders: Vec<(&str, Build)> = vec![
                ("relu_sum", Box::new(|g, x| { let r = g.relu(x); g.sum_all(r) })),
                (
                    "pool",
                    Box::new(|g, x| {
                        let p = g.global_avg_pool(x).unwrap();
                        g.sum_all(p)
                    }),
                ),
                (
                    "maxpool",
                    Box::new(|g, x| {
                        let p = g.max_pool2(x).unwrap();
                        g.sum_all(p)
                    }),
                ),
                (
                    "scale",
                    Box::new(move |g, x| {
                        let sc = g.scale_const(x, f.clone()).unwrap();
                        g.sum_all(sc)
                    }),
                ),
                (
                    "mul_self",
                    Box::new(|g, x| {
                        let m = g.mul(x, x).unwrap();
                        g.sum_all(m)
                    }),
                ),
            ];
            for (name, build) in &builders {
                let mut g = Graph::new();
                let x = g.param(x_val.clone());
                let root = build(&mut g, x);
                let analytic = g.backward(root).unwrap().get(x).unwrap().clone();
                let fd = fd_gradient(
                    |t| {
                        let mut g = Graph::new();
                        let x = g.param(t.clone());
                        let root = build(&mut g, x);
                        g.value(root).data()[0]
                    },
                    &x_val,
                    1e-5,
                )
                .unwrap();
                for (i, (a, n)) in analytic.data().iter().zip(fd.data()).enumerate() {
                    let denom = n.abs().max(1.0);
                    assert!(
                        ((a - n) / denom).abs() < 1e-6,
                        "{name} {shape:?} [{i}]: {a} vs {n}"
                    );
                }
            }
        }
    }

    #[test]
    fn batch_loss_gradient_matches_finite_differences() {
        let mut rng = RngStream::from_seed(17);
        let scores_val = Tensor::new(vec![4, 6], (0..24).map(|_| rng.normal()).collect()).unwrap();
        let labels = vec![0, 3, 5, 2];
        for kind in [LossKind::Ce, LossKind::Gce] {
            let mut g = Graph::new();
            let s = g.param(scores_val.clone());
            let loss = g.batch_loss(s, &labels, 2, kind).unwrap();
            let analytic = g.backward(loss).unwrap().get(s).unwrap().clone();
            let fd = fd_gradient(
                |t| {
                    let (v, _) = batched_loss(t, &labels, 2, kind).unwrap();
                    v
                },
                &scores_val,
                1e-6,
            )
            .unwrap();
            for (a, n) in analytic.data().iter().zip(fd.data()) {
                assert!((a - n).abs() < 1e-8, "{kind:?}: {a} vs {n}");
            }
        }
    }

    #[test]
    fn conv_chain_matches_finite_differences() {
        let mut rng = RngStream::from_seed(33);
        let img = Tensor::new(vec![1, 2, 5, 5], (0..50).map(|_| rng.normal()).collect()).unwrap();
        let k_val = Tensor::new(vec![3, 2, 3, 3], (0..54).map(|_| rng.normal()).collect()).unwrap();
        let b_val = Tensor::new(vec![3], (0..3).map(|_| rng.normal()).collect()).unwrap();

        let run = |kt: &Tensor, bt: &Tensor| -> (f64, Option<(Tensor, Tensor)>) {
            let mut g = Graph::new();
            let x = g.constant(img.clone());
            let k = g.param(kt.clone());
            let b = g.param(bt.clone());
            let c = g.conv2d(x, k, 1, 1).unwrap();
            let cb = g.add_channel_bias(c, b).unwrap();
            let r = g.relu(cb);
            let loss = g.sum_all(r);
            let grads = g.backward(loss).unwrap();
            (
                g.value(loss).data()[0],
                Some((
                    grads.get(k).unwrap().clone(),
                    grads.get(b).unwrap().clone(),
                )),
            )
        };
        let (_, grads) = run(&k_val, &b_val);
        let (gk, gb) = grads.unwrap();
        let fd_k = fd_gradient(|t| run(t, &b_val).0, &k_val, 1e-5).unwrap();
        let fd_b = fd_gradient(|t| run(&k_val, t).0, &b_val, 1e-5).unwrap();
        for (a, n) in gk.data().iter().zip(fd_k.data()) {
            assert!((a - n).abs() / n.abs().max(1.0) < 1e-6, "{a} vs {n}");
        }
        for (a, n) in gb.data().iter().zip(fd_b.data()) {
            assert!((a - n).abs() / n.abs().max(1.0) < 1e-6, "{a} vs {n}");
        }
    }
}
