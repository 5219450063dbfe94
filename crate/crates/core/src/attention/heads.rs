//! Multi-head self-attention with per-head choice between combined attention
//! and scaled dot-product softmax attention.

use super::dual::combined_matrix;
use super::{AttentionConfig, TraceVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Q/K/V/output maps (`d_model × d_model` weights, `d_model` biases); head
/// `h` owns columns `h·d_k .. (h+1)·d_k` of the Q/K/V projections.
#[derive(Clone, Copy, Debug)]
pub struct HeadProjections {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Clone, Debug)]
pub struct MultiHeadOutput {
    pub output: Var,
    /// One entry per head; `Some` for combined heads.
    pub traces: Vec<Option<TraceVars>>,
}

fn mask_weights<T: Scalar>(keep: &[bool], rows: usize) -> Tensor<T> {
    let n = keep.len();
    let mut w = Tensor::zeros(&[rows, n]);
    for i in 0..rows {
        for j in 0..n {
            // self-attention: query rows share the key mask
            let row_ok = rows != n || keep[i];
            if row_ok && keep[j] {
                w.set(i, j, T::one());
            }
        }
    }
    w
}

/// One combined head on already-projected `q, k, v` (`n×d_k`).
///
/// `E = α·QKᵀ/√d_k`, `N = −β·L1(Q, K)/√d_k`, `M` per the configured
/// composition, masked key columns of `M` zeroed, output `M·V`.
pub fn combined_head<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    config: &AttentionConfig,
    key_mask: Option<&[bool]>,
) -> Result<(Var, TraceVars)> {
    let weights = match key_mask {
        Some(keep) if keep.iter().any(|&x| !x) && keep.iter().any(|&x| x) => {
            Some(mask_weights(keep, g.shape(q)[0]))
        }
        _ => None,
    };
    let mut trace = combined_matrix(g, q, k, q, k, config, weights.as_ref())?;
    if let Some(keep) = key_mask {
        trace.m = g.mask_cols(trace.m, keep)?;
    }
    let out = g.matmul(trace.m, v)?;
    Ok((out, trace))
}

/// Scaled dot-product softmax head with `−∞` masking of invalid keys.
pub fn softmax_head<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let d_k = g.shape(q)[1].max(1) as f64;
    let kt = g.transpose(k)?;
    let dots = g.matmul(q, kt)?;
    let scores = g.scale(dots, T::of(1.0 / d_k.sqrt()));
    let probs = match key_mask {
        Some(keep) => g.masked_softmax_rows(scores, keep)?,
        None => g.softmax_rows(scores)?,
    };
    g.matmul(probs, v)
}

/// Projects the inputs, routes the first `num_combined` heads through
/// [`combined_head`] and the rest through [`softmax_head`], concatenates the
/// heads and applies the output projection.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    proj: &HeadProjections,
    config: &AttentionConfig,
    num_combined: usize,
    mask: Option<&[bool]>,
) -> Result<MultiHeadOutput> {
    let n = g.shape(k_in)[0];
    if let Some(keep) = mask {
        if keep.len() != n {
            return Err(Error::Dimension {
                op: "attention mask",
                left: vec![n],
                right: vec![keep.len()],
            });
        }
    }
    if g.shape(q_in).len() != 2 || g.shape(q_in)[1] != config.d_model {
        return Err(Error::Dimension {
            op: "multi_head_attention",
            left: g.shape(q_in).to_vec(),
            right: vec![config.d_model],
        });
    }
    let q = g.linear(q_in, proj.wq, Some(proj.bq))?;
    let k = g.linear(k_in, proj.wk, Some(proj.bk))?;
    let v = g.linear(v_in, proj.wv, Some(proj.bv))?;

    let d_k = config.d_k();
    let mut heads = Vec::with_capacity(config.num_heads);
    let mut traces = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let qh = g.columns(q, h * d_k, d_k)?;
        let kh = g.columns(k, h * d_k, d_k)?;
        let vh = g.columns(v, h * d_k, d_k)?;
        if h < num_combined {
            let (out, trace) = combined_head(g, qh, kh, vh, config, mask)?;
            heads.push(out);
            traces.push(Some(trace));
        } else {
            heads.push(softmax_head(g, qh, kh, vh, mask)?);
            traces.push(None);
        }
    }
    let joined = g.concat_cols(&heads)?;
    let output = g.linear(joined, proj.wo, Some(proj.bo))?;
    Ok(MultiHeadOutput { output, traces })
}

/// Every head combined.
pub fn combined_attention_heads<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    proj: &HeadProjections,
    config: &AttentionConfig,
    mask: Option<&[bool]>,
) -> Result<MultiHeadOutput> {
    multi_head_attention(g, q, k, v, proj, config, config.num_heads, mask)
}

/// Every head softmax (the baseline).
pub fn softmax_attention_heads<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    proj: &HeadProjections,
    config: &AttentionConfig,
    mask: Option<&[bool]>,
) -> Result<MultiHeadOutput> {
    multi_head_attention(g, q, k, v, proj, config, 0, mask)
}
