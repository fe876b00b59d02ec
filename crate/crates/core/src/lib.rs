//! Desk-scale trainer for fine-grained classification built around two
//! training-time mechanisms: a diversification block that stochastically
//! suppresses peak and patch regions of per-class activation maps, and a
//! gradient-boosting cross-entropy loss that normalizes only over the
//! ground-truth class and its top-k most confusing negatives.
//!
//! The crate is self-contained: dense f64 tensors with a reverse-mode tape,
//! a small CNN ending in a 1x1 per-class head, a deterministic synthetic
//! dataset generator, brute-force oracles for every numeric path, and a
//! training harness with reproducible, byte-stable artifacts.

pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod divblock;
pub mod error;
pub mod graph;
pub mod harness;
pub mod loss;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod pgm;
pub mod rng;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
