//! Post-norm transformer encoder with mixed combined/softmax attention.
//!
//! Block layout: `x' = LN(x + MHA(x))`, `out = LN(x' + FFN(x'))` with a relu
//! feed-forward. Layer `l` routes its first
//! `round(replacement_schedule[l] · num_heads)` heads through combined
//! attention and the remaining heads through softmax attention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    multi_head_attention, AttentionConfig, AttentionMode, HeadProjections, TraceVars,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    /// Feed-forward width; `None` means `4 × d_model`.
    pub d_ff: Option<usize>,
    /// Fraction of heads per layer using combined attention. Layers past the
    /// end of the list use 0.
    pub replacement_schedule: Vec<f64>,
    pub max_seq_len: usize,
    /// Token vocabulary size; 0 asks the run loader to derive it.
    pub vocab_size: usize,
    /// Learned segment embeddings (cross-mode pairs use two).
    pub num_segments: usize,
    pub attention: AttentionConfig,
}

/// Replacement fractions for layers 1–3 (0-based layers 0–2).
pub const DEFAULT_SCHEDULE: [f64; 3] = [0.5, 0.4, 0.3];

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 4,
            d_ff: None,
            replacement_schedule: DEFAULT_SCHEDULE.to_vec(),
            max_seq_len: 64,
            vocab_size: 0,
            num_segments: 2,
            attention: AttentionConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn d_model(&self) -> usize {
        self.attention.d_model
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.attention.d_model)
    }

    pub fn fraction(&self, layer: usize) -> f64 {
        self.replacement_schedule.get(layer).copied().unwrap_or(0.0)
    }

    /// Number of combined heads in `layer` (0 in softmax-baseline mode).
    pub fn combined_heads(&self, layer: usize) -> usize {
        if self.attention.mode == AttentionMode::SoftmaxBaseline {
            return 0;
        }
        let heads = self.attention.num_heads as f64;
        (self.fraction(layer) * heads).round().clamp(0.0, heads) as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if self.max_seq_len == 0 || self.d_ff() == 0 {
            return Err(Error::Config("max_seq_len and d_ff must be positive".into()));
        }
        if let Some(f) = self.replacement_schedule.iter().find(|f| !f.is_finite()) {
            return Err(Error::Config(format!("replacement fraction {f} is not finite")));
        }
        Ok(())
    }
}

/// Fixed sinusoidal encoding of `position`: `sin(pos/10000^(2i/d))` at even
/// indices, `cos` at odd ones.
pub fn sinusoid(position: usize, d_model: usize) -> Vec<f64> {
    (0..d_model)
        .map(|j| {
            let pair = (j / 2) as f64;
            let angle = position as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttnLayout {
    pub fn bind(&self, bound: &Bound) -> HeadProjections {
        HeadProjections {
            wq: bound.var(self.wq),
            bq: bound.var(self.bq),
            wk: bound.var(self.wk),
            bk: bound.var(self.bk),
            wv: bound.var(self.wv),
            bv: bound.var(self.bv),
            wo: bound.var(self.wo),
            bo: bound.var(self.bo),
        }
    }
}

/// Parameter ids of one encoder block.
#[derive(Clone, Debug)]
pub struct BlockLayout {
    pub attn: AttnLayout,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ff_w1: ParamId,
    pub ff_b1: ParamId,
    pub ff_w2: ParamId,
    pub ff_b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub token_embedding: ParamId,
    pub segment_embedding: Option<ParamId>,
    pub blocks: Vec<BlockLayout>,
}

#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub output: Var,
    /// Attention sublayer output before the residual.
    pub attention: Var,
    pub traces: Vec<Option<TraceVars>>,
}

#[derive(Clone, Debug)]
pub struct EncodeOutput {
    pub embedded: Var,
    pub hidden: Var,
    /// `traces[layer][head]`, `Some` for combined heads.
    pub traces: Vec<Vec<Option<TraceVars>>>,
}

/// Where each input token sits: position index and segment id.
#[derive(Clone, Debug, Default)]
pub struct Positions {
    pub positions: Vec<usize>,
    pub segments: Option<Vec<usize>>,
}

impl Positions {
    pub fn sequential(n: usize) -> Self {
        Positions {
            positions: (0..n).collect(),
            segments: None,
        }
    }
}

impl Encoder {
    /// Registers the encoder parameters under `prefix` and initialises them
    /// (Xavier-uniform maps, unit-variance embeddings, zero biases, unit
    /// layer-norm gains).
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        config: EncoderConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model();
        let d_ff = config.d_ff();
        let s3 = 3f64.sqrt();
        let token_embedding = store.add(
            format!("{prefix}.token_embedding"),
            Tensor::uniform(&[config.vocab_size, d], -s3, s3, rng),
        );
        let segment_embedding = (config.num_segments > 0).then(|| {
            store.add(
                format!("{prefix}.segment_embedding"),
                Tensor::uniform(&[config.num_segments, d], -s3, s3, rng),
            )
        });
        let mut blocks = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = format!("{prefix}.layer{l}");
            let mut lin = |name: &str, fan_in: usize, fan_out: usize, rng: &mut R| {
                let w = store.add(format!("{p}.{name}.w"), Tensor::xavier(fan_in, fan_out, rng));
                let b = store.add(format!("{p}.{name}.b"), Tensor::zeros(&[fan_out]));
                (w, b)
            };
            let (wq, bq) = lin("attn.q", d, d, rng);
            let (wk, bk) = lin("attn.k", d, d, rng);
            let (wv, bv) = lin("attn.v", d, d, rng);
            let (wo, bo) = lin("attn.o", d, d, rng);
            let (ff_w1, ff_b1) = lin("ff1", d, d_ff, rng);
            let (ff_w2, ff_b2) = lin("ff2", d_ff, d, rng);
            let ln1_gain = store.add(format!("{p}.ln1.gain"), Tensor::full(&[d], T::one()));
            let ln1_bias = store.add(format!("{p}.ln1.bias"), Tensor::zeros(&[d]));
            let ln2_gain = store.add(format!("{p}.ln2.gain"), Tensor::full(&[d], T::one()));
            let ln2_bias = store.add(format!("{p}.ln2.bias"), Tensor::zeros(&[d]));
            blocks.push(BlockLayout {
                attn: AttnLayout {
                    wq,
                    bq,
                    wk,
                    bk,
                    wv,
                    bv,
                    wo,
                    bo,
                },
                ln1_gain,
                ln1_bias,
                ff_w1,
                ff_b1,
                ff_w2,
                ff_b2,
                ln2_gain,
                ln2_bias,
            });
        }
        Ok(Encoder {
            config,
            token_embedding,
            segment_embedding,
            blocks,
        })
    }

    /// Token embedding plus sinusoidal position encoding (plus segment
    /// embedding when segments are given).
    pub fn embed<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        tokens: &[usize],
        layout: &Positions,
    ) -> Result<Var> {
        let d = self.config.d_model();
        if layout.positions.len() != tokens.len() {
            return Err(Error::Dimension {
                op: "embed positions",
                left: vec![tokens.len()],
                right: vec![layout.positions.len()],
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Domain(format!(
                "token id {id} outside vocab of {}",
                self.config.vocab_size
            )));
        }
        if tokens.len() > self.config.max_seq_len
            || layout.positions.iter().any(|&p| p >= self.config.max_seq_len)
        {
            return Err(Error::Domain(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        let tok = g.gather_rows(bound.var(self.token_embedding), tokens)?;
        let mut pe = Vec::with_capacity(tokens.len() * d);
        for &p in &layout.positions {
            pe.extend(sinusoid(p, d).into_iter().map(T::of));
        }
        let pe = g.constant(Tensor::new(vec![tokens.len(), d], pe)?);
        let mut x = g.add(tok, pe)?;
        if let Some(segments) = &layout.segments {
            let table = self.segment_embedding.ok_or_else(|| {
                Error::Config("segment ids given but the encoder has no segment table".into())
            })?;
            if segments.len() != tokens.len() {
                return Err(Error::Dimension {
                    op: "embed segments",
                    left: vec![tokens.len()],
                    right: vec![segments.len()],
                });
            }
            let seg = g.gather_rows(bound.var(table), segments)?;
            x = g.add(x, seg)?;
        }
        Ok(x)
    }

    pub fn block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        x: Var,
        mask: Option<&[bool]>,
        layer_index: usize,
    ) -> Result<BlockOutput> {
        let layout = self.blocks.get(layer_index).ok_or_else(|| {
            Error::Usage(format!(
                "layer {layer_index} out of range 0..{}",
                self.blocks.len()
            ))
        })?;
        encoder_block(
            g,
            bound,
            layout,
            &self.config,
            x,
            mask,
            self.config.combined_heads(layer_index),
        )
    }

    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        bound: &Bound,
        tokens: &[usize],
        layout: &Positions,
        mask: Option<&[bool]>,
    ) -> Result<EncodeOutput> {
        let embedded = self.embed(g, bound, tokens, layout)?;
        let mut hidden = embedded;
        let mut traces = Vec::with_capacity(self.blocks.len());
        for l in 0..self.blocks.len() {
            let out = self.block(g, bound, hidden, mask, l)?;
            hidden = out.output;
            traces.push(out.traces);
        }
        Ok(EncodeOutput {
            embedded,
            hidden,
            traces,
        })
    }
}

/// One post-norm block with `num_combined` combined heads.
pub fn encoder_block<T: Scalar>(
    g: &mut Graph<T>,
    bound: &Bound,
    layout: &BlockLayout,
    config: &EncoderConfig,
    x: Var,
    mask: Option<&[bool]>,
    num_combined: usize,
) -> Result<BlockOutput> {
    let proj = layout.attn.bind(bound);
    let mha = multi_head_attention(g, x, x, x, &proj, &config.attention, num_combined, mask)?;
    let res1 = g.add(x, mha.output)?;
    let h = g.layer_norm(res1, bound.var(layout.ln1_gain), bound.var(layout.ln1_bias))?;
    let ff = g.linear(h, bound.var(layout.ff_w1), Some(bound.var(layout.ff_b1)))?;
    let ff = g.relu(ff);
    let ff = g.linear(ff, bound.var(layout.ff_w2), Some(bound.var(layout.ff_b2)))?;
    let res2 = g.add(h, ff)?;
    let output = g.layer_norm(res2, bound.var(layout.ln2_gain), bound.var(layout.ln2_bias))?;
    Ok(BlockOutput {
        output,
        attention: mha.output,
        traces: mha.traces,
    })
}
