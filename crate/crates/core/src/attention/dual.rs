//! Two-sequence combined attention: `A` attends over `B` and vice versa
//! through one shared matrix `M`.

use super::{AttentionConfig, NormVariant, TraceVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_widths<T: Scalar>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::Dimension {
            op,
            left: sa.to_vec(),
            right: sb.to_vec(),
        });
    }
    Ok(())
}

/// `E[i][j] = alpha · ⟨a_i, b_j⟩`.
pub fn affinity_matrix<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, alpha: T) -> Result<Var> {
    check_widths(g, "affinity_matrix", a, b)?;
    let bt = g.transpose(b)?;
    let dots = g.matmul(a, bt)?;
    Ok(g.scale(dots, alpha))
}

/// `N[i][j] = −beta · ‖a_i − b_j‖₁`, so every entry is `≤ 0`.
pub fn difference_matrix<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var, beta: T) -> Result<Var> {
    check_widths(g, "difference_matrix", a, b)?;
    let dist = g.pairwise_l1(a, b)?;
    Ok(g.scale(dist, -beta))
}

/// Subtracts the mean of `x`. With `weights`, the mean is taken over the
/// entries with non-zero weight only (padding excluded); the shift still
/// applies to every entry.
pub fn center<T: Scalar>(g: &mut Graph<T>, x: Var, weights: Option<&Tensor<T>>) -> Result<Var> {
    let mean = match weights {
        Some(w) => g.weighted_mean(x, w.clone())?,
        None => g.mean_all(x)?,
    };
    g.sub_scalar(x, mean)
}

/// Applies the `N`-side normalisation of `variant`. Only
/// [`NormVariant::CenterN`] changes `n`; the two-sigmoid factor lives in
/// [`compose`].
pub fn normalize_difference<T: Scalar>(
    g: &mut Graph<T>,
    n: Var,
    variant: NormVariant,
    weights: Option<&Tensor<T>>,
) -> Result<Var> {
    match variant {
        NormVariant::CenterN => center(g, n, weights),
        NormVariant::None | NormVariant::CenterE | NormVariant::TwoSigmoid => Ok(n),
    }
}

/// `M = f_E(e) ⊙ f_N(n)`, with the gate doubled under
/// [`NormVariant::TwoSigmoid`].
pub fn compose<T: Scalar>(
    g: &mut Graph<T>,
    e: Var,
    n: Var,
    config: &AttentionConfig,
) -> Result<Var> {
    if g.shape(e) != g.shape(n) {
        return Err(Error::Dimension {
            op: "compose",
            left: g.shape(e).to_vec(),
            right: g.shape(n).to_vec(),
        });
    }
    let fe = config.composition.affinity.apply(g, e);
    let mut fn_ = config.composition.difference.apply(g, n);
    if config.norm_variant == NormVariant::TwoSigmoid {
        fn_ = g.scale(fn_, T::of(2.0));
    }
    g.mul(fe, fn_)
}

/// The full `E`/`N` → `M` pipeline on already-projected inputs, scaled by
/// `1/√d_k` where `d_k` is the projected width.
pub(crate) fn combined_matrix<T: Scalar>(
    g: &mut Graph<T>,
    ae: Var,
    be: Var,
    an: Var,
    bn: Var,
    config: &AttentionConfig,
    weights: Option<&Tensor<T>>,
) -> Result<TraceVars> {
    let d_k = g.shape(ae)[1].max(1) as f64;
    let inv_sqrt = 1.0 / d_k.sqrt();
    let e = affinity_matrix(g, ae, be, T::of(config.alpha * inv_sqrt))?;
    let n_raw = difference_matrix(g, an, bn, T::of(config.beta * inv_sqrt))?;
    let e_used = match config.norm_variant {
        NormVariant::CenterE => center(g, e, weights)?,
        _ => e,
    };
    let n_norm = normalize_difference(g, n_raw, config.norm_variant, weights)?;
    let m = compose(g, e_used, n_norm, config)?;
    Ok(TraceVars {
        e,
        e_used,
        n_raw,
        n_norm,
        m,
    })
}

/// The learnable maps `F_E` and `F_N`, each `d × d_k` without bias.
#[derive(Clone, Copy, Debug)]
pub enum DualProjections {
    Identity,
    Shared(Var),
    Separate { affinity: Var, difference: Var },
}

impl DualProjections {
    fn affinity_map(&self) -> Option<Var> {
        match *self {
            DualProjections::Identity => None,
            DualProjections::Shared(w) => Some(w),
            DualProjections::Separate { affinity, .. } => Some(affinity),
        }
    }

    fn difference_map(&self) -> Option<Var> {
        match *self {
            DualProjections::Identity => None,
            DualProjections::Shared(w) => Some(w),
            DualProjections::Separate { difference, .. } => Some(difference),
        }
    }
}

fn project<T: Scalar>(g: &mut Graph<T>, x: Var, w: Option<Var>) -> Result<Var> {
    match w {
        Some(w) => g.matmul(x, w),
        None => Ok(x),
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttendOutput {
    /// `M · B`, one row per token of `A`.
    pub a_hat: Var,
    /// `Mᵀ · A`, one row per token of `B`.
    pub b_hat: Var,
    pub trace: TraceVars,
}

/// Cross-attention pooling of `a` (`N_a×d`) against `b` (`N_b×d`).
pub fn attend<T: Scalar>(
    g: &mut Graph<T>,
    a: Var,
    b: Var,
    projections: &DualProjections,
    config: &AttentionConfig,
) -> Result<AttendOutput> {
    check_widths(g, "attend", a, b)?;
    let ae = project(g, a, projections.affinity_map())?;
    let be = project(g, b, projections.affinity_map())?;
    let (an, bn) = if let DualProjections::Separate { difference, .. } = *projections {
        (
            project(g, a, Some(difference))?,
            project(g, b, Some(difference))?,
        )
    } else {
        debug_assert_eq!(projections.affinity_map(), projections.difference_map());
        (ae, be)
    };
    let trace = combined_matrix(g, ae, be, an, bn, config, None)?;
    let a_hat = g.matmul(trace.m, b)?;
    let mt = g.transpose(trace.m)?;
    let b_hat = g.matmul(mt, a)?;
    Ok(AttendOutput {
        a_hat,
        b_hat,
        trace,
    })
}
