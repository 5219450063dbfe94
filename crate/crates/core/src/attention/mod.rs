//! Combined (quasi-)attention.
//!
//! Two matrices compare every token of one sequence with every token of the
//! other: an affinity matrix `E` of scaled dot products and a difference
//! matrix `N` of negated, scaled L1 distances. Instead of a row softmax over
//! `E`, the attention matrix is `M = f_E(E) ⊙ f_N(N)` (by default
//! `tanh ⊙ sigmoid`), so a row of `M` can add, subtract or drop value rows
//! rather than form a convex combination of them.
//!
//! [`dual`] holds the two-sequence pipeline (`attend`), [`heads`] the
//! multi-head self-attention forms used inside the encoder.

pub mod dual;
pub mod heads;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use dual::{
    affinity_matrix, attend, center, compose, difference_matrix, normalize_difference,
    AttendOutput, DualProjections,
};
pub use heads::{
    combined_attention_heads, combined_head, multi_head_attention, softmax_attention_heads,
    softmax_head, HeadProjections, MultiHeadOutput,
};

/// Squashing function applied to `E` or `N` before the elementwise product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Squash {
    Tanh,
    Sigmoid,
    Arctan,
}

impl Squash {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Squash::Tanh => g.tanh(x),
            Squash::Sigmoid => g.sigmoid(x),
            Squash::Arctan => g.atan(x),
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Squash::Tanh => x.tanh(),
            Squash::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Squash::Arctan => x.atan(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Squash::Tanh => "tanh",
            Squash::Sigmoid => "sigmoid",
            Squash::Arctan => "arctan",
        }
    }
}

/// The `(f_E, f_N)` pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Composition {
    pub affinity: Squash,
    pub difference: Squash,
}

impl Composition {
    pub const TANH_SIGMOID: Composition = Composition {
        affinity: Squash::Tanh,
        difference: Squash::Sigmoid,
    };

    pub fn new(affinity: Squash, difference: Squash) -> Self {
        Composition {
            affinity,
            difference,
        }
    }

    pub fn name(self) -> String {
        format!("{}*{}", self.affinity.name(), self.difference.name())
    }
}

impl Default for Composition {
    fn default() -> Self {
        Composition::TANH_SIGMOID
    }
}

/// How `E` and `N` are adjusted before composition.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormVariant {
    /// Use `E` and `N` as computed.
    #[default]
    None,
    /// Subtract the mean of `N` (over the whole matrix) before `f_N`.
    CenterN,
    /// Subtract the mean of `E` before `f_E`.
    CenterE,
    /// Double the gate: `M = f_E(E) ⊙ 2·f_N(N)`.
    TwoSigmoid,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Combined,
    SoftmaxBaseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    /// Temperature on `E`.
    pub alpha: f64,
    /// Temperature on `N`.
    pub beta: f64,
    pub composition: Composition,
    pub norm_variant: NormVariant,
    /// Use one projection for both `F_E` and `F_N` in [`attend`].
    pub share_projections: bool,
    pub num_heads: usize,
    pub d_model: usize,
    pub mode: AttentionMode,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            alpha: 1.0,
            beta: 1.0,
            composition: Composition::TANH_SIGMOID,
            norm_variant: NormVariant::None,
            share_projections: true,
            num_heads: 4,
            d_model: 64,
            mode: AttentionMode::Combined,
        }
    }
}

impl AttentionConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.num_heads == 0 || self.d_model == 0 {
            return Err(Error::Config("num_heads and d_model must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.composition.affinity == Squash::Arctan {
            return Err(Error::Config("affinity squash must be tanh or sigmoid".into()));
        }
        Ok(())
    }
}

/// Graph handles for the matrices of one combined head.
#[derive(Clone, Copy, Debug)]
pub struct TraceVars {
    pub e: Var,
    /// `E` as fed to `f_E` (centred under [`NormVariant::CenterE`]).
    pub e_used: Var,
    pub n_raw: Var,
    pub n_norm: Var,
    pub m: Var,
}

impl TraceVars {
    pub fn materialize<T: Scalar>(&self, g: &Graph<T>) -> CombinedAttentionTrace<T> {
        CombinedAttentionTrace {
            e: g.value(self.e).clone(),
            e_used: g.value(self.e_used).clone(),
            n_raw: g.value(self.n_raw).clone(),
            n_norm: g.value(self.n_norm).clone(),
            m: g.value(self.m).clone(),
        }
    }
}

/// Owned copies of the `E`, `N` and `M` matrices of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedAttentionTrace<T: Scalar> {
    pub e: Tensor<T>,
    pub e_used: Tensor<T>,
    pub n_raw: Tensor<T>,
    pub n_norm: Tensor<T>,
    pub m: Tensor<T>,
}
