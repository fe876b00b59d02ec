//! Toy convolutional backbone ending in a 1x1 per-class head.
//!
//! Each block is conv 3x3 (pad 1) -> bias -> ReLU -> 2x2 max pool; the head
//! is a 1x1 convolution with one output channel per class, so the network
//! emits class activation maps directly and the trainer pools them to
//! scores. There is no fully connected layer and no pre-head pooling.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Square input size in pixels.
    pub input_size: usize,
    /// Output channels of each conv block; the input is single-channel.
    pub channels: Vec<usize>,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 32,
            channels: vec![16, 32, 64],
            num_classes: 20,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(format!(
                "channel plan must be nonempty and positive, got {:?}",
                self.channels
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        let mut size = self.input_size;
        for _ in &self.channels {
            if size < 2 {
                return Err(Error::Config(format!(
                    "input size {} too small for {} pooling stages",
                    self.input_size,
                    self.channels.len()
                )));
            }
            size /= 2;
        }
        Ok(())
    }

    /// Spatial side of the activation maps the head emits.
    pub fn map_size(&self) -> usize {
        let mut size = self.input_size;
        for _ in &self.channels {
            size /= 2;
        }
        size
    }

    pub fn to_kv_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "input_size = {}", self.input_size);
        let channels: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(out, "channels = {}", channels.join(","));
        let _ = writeln!(out, "num_classes = {}", self.num_classes);
        out
    }

    pub fn from_kv_text(text: &str, origin: &Path) -> Result<Self> {
        let kv = crate::config::parse_kv(text, &["input_size", "channels", "num_classes"])
            .map_err(|e| Error::BadFormat {
                path: origin.to_path_buf(),
                reason: e.to_string(),
            })?;
        let get = |key: &str| {
            kv.get(key).ok_or_else(|| Error::BadFormat {
                path: origin.to_path_buf(),
                reason: format!("missing key '{key}'"),
            })
        };
        let input_size = get("input_size")?.parse().map_err(|_| Error::BadFormat {
            path: origin.to_path_buf(),
            reason: "input_size is not an integer".into(),
        })?;
        let channels = get("channels")?
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::BadFormat {
                path: origin.to_path_buf(),
                reason: "channels is not a comma list of integers".into(),
            })?;
        let num_classes = get("num_classes")?.parse().map_err(|_| Error::BadFormat {
            path: origin.to_path_buf(),
            reason: "num_classes is not an integer".into(),
        })?;
        let cfg = ModelConfig {
            input_size,
            channels,
            num_classes,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub conv_weights: Vec<Tensor>,
    pub conv_biases: Vec<Tensor>,
    /// C x C_last x 1 x 1
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl ModelParams {
    /// Kaiming fan-in normal initialization for weights, zero biases.
    pub fn init(cfg: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let mut conv_weights = Vec::new();
        let mut conv_biases = Vec::new();
        let mut prev = 1usize;
        for &ch in &cfg.channels {
            let fan_in = prev * 9;
            let std = (2.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..ch * prev * 9).map(|_| rng.normal() * std).collect();
            conv_weights.push(Tensor::new(vec![ch, prev, 3, 3], data)?);
            conv_biases.push(Tensor::zeros(&[ch]));
            prev = ch;
        }
        let std = (2.0 / prev as f64).sqrt();
        let head_data: Vec<f64> = (0..cfg.num_classes * prev)
            .map(|_| rng.normal() * std)
            .collect();
        Ok(ModelParams {
            conv_weights,
            conv_biases,
            head_weight: Tensor::new(vec![cfg.num_classes, prev, 1, 1], head_data)?,
            head_bias: Tensor::zeros(&[cfg.num_classes]),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head_weight.shape()[0]
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.conv_weights.iter().zip(&self.conv_biases).enumerate() {
            out.push((format!("conv{i}.weight"), w));
            out.push((format!("conv{i}.bias"), b));
        }
        out.push(("head.weight".to_string(), &self.head_weight));
        out.push(("head.bias".to_string(), &self.head_bias));
        out
    }

    /// Flat parameter list in the fixed named() order.
    pub fn tensors(&self) -> Vec<Tensor> {
        self.named().into_iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) {
        let mut it = tensors.into_iter();
        for i in 0..self.conv_weights.len() {
            self.conv_weights[i] = it.next().expect("conv weight");
            self.conv_biases[i] = it.next().expect("conv bias");
        }
        self.head_weight = it.next().expect("head weight");
        self.head_bias = it.next().expect("head bias");
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Persist params (DBKT) plus the config as `<stem>.cfg` alongside.
pub fn save_model(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    checkpoint::save(path, &params.named())?;
    let cfg_path = sidecar_cfg_path(path);
    std::fs::write(&cfg_path, cfg.to_kv_text()).map_err(|e| Error::io(&cfg_path, e))
}

pub fn load_model(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let cfg_path = sidecar_cfg_path(path);
    let cfg_text =
        std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg = ModelConfig::from_kv_text(&cfg_text, &cfg_path)?;
    let tensors = checkpoint::load(path)?;
    let lookup = |name: &str| -> Result<Tensor> {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::BadFormat {
                path: path.to_path_buf(),
                reason: format!("missing tensor '{name}'"),
            })
    };
    let mut conv_weights = Vec::new();
    let mut conv_biases = Vec::new();
    for i in 0..cfg.channels.len() {
        conv_weights.push(lookup(&format!("conv{i}.weight"))?);
        conv_biases.push(lookup(&format!("conv{i}.bias"))?);
    }
    let head_weight = lookup("head.weight")?;
    let head_bias = lookup("head.bias")?;
    if head_weight.shape()[0] != cfg.num_classes {
        return Err(Error::BadFormat {
            path: path.to_path_buf(),
            reason: format!(
                "head has {} output channels but config says {} classes",
                head_weight.shape()[0],
                cfg.num_classes
            ),
        });
    }
    Ok((
        cfg,
        ModelParams {
            conv_weights,
            conv_biases,
            head_weight,
            head_bias,
        },
    ))
}

fn sidecar_cfg_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".cfg");
    PathBuf::from(os)
}

/// Dataset images are [0,1] grayscale; every forward path centers them to
/// [-1, 1] before the first conv.
pub fn normalize_images(images: &Tensor) -> Tensor {
    Tensor::from_parts(
        images.shape().to_vec(),
        images.data().iter().map(|&v| (v - 0.5) * 2.0).collect(),
    )
}

/// Node handles for registered parameters, in optimizer order.
pub struct ParamNodes {
    pub all: Vec<NodeId>,
}

pub fn register_params(g: &mut Graph, params: &ModelParams, tracked: bool) -> ParamNodes {
    let all = params
        .tensors()
        .into_iter()
        .map(|t| if tracked { g.param(t) } else { g.constant(t) })
        .collect();
    ParamNodes { all }
}

/// Backbone plus head: images (N x 1 x S x S) to activation maps
/// (N x C x m x m).
pub fn forward_maps(
    g: &mut Graph,
    nodes: &ParamNodes,
    images: NodeId,
    cfg: &ModelConfig,
) -> Result<NodeId> {
    let shape = g.value(images).shape().to_vec();
    if shape.len() != 4 || shape[1] != 1 || shape[2] != cfg.input_size || shape[3] != cfg.input_size
    {
        return Err(Error::ShapeMismatch {
            left: shape,
            right: vec![0, 1, cfg.input_size, cfg.input_size],
        });
    }
    let mut x = images;
    let mut idx = 0;
    for _ in &cfg.channels {
        let w = nodes.all[idx];
        let b = nodes.all[idx + 1];
        idx += 2;
        let c = g.conv2d(x, w, 1, 1)?;
        let cb = g.add_channel_bias(c, b)?;
        let r = g.relu(cb);
        x = g.max_pool2(r)?;
    }
    let hw = nodes.all[idx];
    let hb = nodes.all[idx + 1];
    let head = g.conv2d(x, hw, 1, 0)?;
    g.add_channel_bias(head, hb)
}

/// Eval-mode scores: pooled activation maps, no suppression, no RNG.
pub fn eval_scores(params: &ModelParams, cfg: &ModelConfig, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let nodes = register_params(&mut g, params, false);
    let img = g.constant(normalize_images(images));
    let maps = forward_maps(&mut g, &nodes, img, cfg)?;
    let scores = g.global_avg_pool(maps)?;
    Ok(g.value(scores).clone())
}

/// Raw head activation maps in eval mode (N x C x m x m).
pub fn eval_maps(params: &ModelParams, cfg: &ModelConfig, images: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let nodes = register_params(&mut g, params, false);
    let img = g.constant(normalize_images(images));
    let maps = forward_maps(&mut g, &nodes, img, cfg)?;
    Ok(g.value(maps).clone())
}

/// Argmax labels (ties resolve to the lowest class index) plus the score
/// rows they came from.
pub fn predict(params: &ModelParams, cfg: &ModelConfig, images: &Tensor) -> Result<(Vec<usize>, Tensor)> {
    let scores = eval_scores(params, cfg, images)?;
    let labels = argmax_rows(&scores);
    Ok((labels, scores))
}

pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    let c = scores.shape()[1];
    scores
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}
