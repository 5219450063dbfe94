//! Combined affinity/difference attention on a small reverse-mode autodiff
//! core.
//!
//! The stack, bottom-up:
//!
//! - [`tensor`], [`graph`], [`gradcheck`]: dense tensors, a Wengert-list
//!   autodiff graph and a central finite-difference oracle.
//! - [`attention`]: affinity (scaled dot product) and difference (negated
//!   pairwise L1) matrices composed as `tanh(E) ⊙ sigmoid(N)` instead of a
//!   softmax, the normalisation/composition variants, multi-head wrappers and
//!   the softmax baseline.
//! - [`encoder`]: a post-norm transformer encoder whose layers route a
//!   configurable fraction of heads through combined attention.
//! - [`matcher`]: sentence-pair classification (cross or siamese) and
//!   evaluation metrics.
//! - [`data`], [`optim`], [`train`]: synthetic perturbation datasets, Adam and
//!   the training / ablation loops.
//! - [`config`]: the single JSON run configuration.
//! - [`diagnostics`]: the finite-difference gradient suite.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix `f64`, which the tests and the CLI use.

pub mod attention;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod matcher;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = graph::Graph<f64>;
pub type Model64 = matcher::Model<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph32 = graph::Graph<f32>;
pub type Model32 = matcher::Model<f32>;
