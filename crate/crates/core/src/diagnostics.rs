//! Finite-difference gradient suite over every graph op, the attention layers
//! and a small end-to-end model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    attend, combined_attention_heads, multi_head_attention, AttentionConfig, Composition,
    DualProjections, HeadProjections, NormVariant, Squash,
};
use crate::data::{generate, SyntheticSpec};
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, push_off_ties, push_off_zero, GradCheckReport, DEFAULT_EPS};
use crate::graph::{Graph, Var};
use crate::matcher::{EncodingMode, Model, ModelConfig};
use crate::params::Bound;
use crate::tensor::Tensor;

/// Tolerance on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct ComponentCheck {
    pub component: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub excluded: usize,
    pub zero: usize,
    pub passed: bool,
}

impl ComponentCheck {
    fn new(component: impl Into<String>, report: GradCheckReport) -> Self {
        ComponentCheck {
            component: component.into(),
            max_rel_error: report.max_rel_error,
            checked: report.checked,
            excluded: report.excluded.len(),
            zero: report.zero.len(),
            passed: report.passed(GRADCHECK_TOLERANCE),
        }
    }
}

type G = Graph<f64>;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn away_from_zero(mut t: Tensor<f64>) -> Tensor<f64> {
    push_off_zero(&mut t, 1e-2);
    t
}

fn check<F>(out: &mut Vec<ComponentCheck>, name: &str, f: F, params: &[Tensor<f64>]) -> Result<()>
where
    F: Fn(&mut G, &[Var]) -> Result<Var>,
{
    let report = finite_diff_check(f, params, DEFAULT_EPS)?;
    out.push(ComponentCheck::new(name, report));
    Ok(())
}

/// Every differentiable graph op on random inputs.
pub fn op_checks(seed: u64) -> Result<Vec<ComponentCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let (a34, b34, c45) = (rand_t(r, &[3, 4]), rand_t(r, &[3, 4]), rand_t(r, &[4, 5]));
    let s = rand_t(r, &[1]);
    let row4 = rand_t(r, &[4]);

    check(&mut out, "matmul", |g, v| g.matmul(v[0], v[1]), &[a34.clone(), c45.clone()])?;
    check(&mut out, "transpose", |g, v| g.transpose(v[0]), std::slice::from_ref(&a34))?;
    check(&mut out, "add", |g, v| g.add(v[0], v[1]), &[a34.clone(), b34.clone()])?;
    check(&mut out, "sub", |g, v| g.sub(v[0], v[1]), &[a34.clone(), b34.clone()])?;
    check(&mut out, "mul", |g, v| g.mul(v[0], v[1]), &[a34.clone(), b34.clone()])?;
    check(&mut out, "scale", |g, v| Ok(g.scale(v[0], -1.7)), std::slice::from_ref(&a34))?;
    check(&mut out, "sub_scalar", |g, v| g.sub_scalar(v[0], v[1]), &[a34.clone(), s.clone()])?;
    check(&mut out, "tanh", |g, v| Ok(g.tanh(v[0])), std::slice::from_ref(&a34))?;
    check(&mut out, "sigmoid", |g, v| Ok(g.sigmoid(v[0])), std::slice::from_ref(&a34))?;
    check(&mut out, "atan", |g, v| Ok(g.atan(v[0])), std::slice::from_ref(&a34))?;
    let kinked = away_from_zero(a34.clone());
    check(&mut out, "relu", |g, v| Ok(g.relu(v[0])), std::slice::from_ref(&kinked))?;
    check(&mut out, "abs", |g, v| Ok(g.abs(v[0])), &[kinked])?;

    let mut x = rand_t(r, &[3, 4]);
    let y = rand_t(r, &[5, 4]);
    push_off_ties(&mut x, &y, 1e-2);
    check(&mut out, "pairwise_l1", |g, v| g.pairwise_l1(v[0], v[1]), &[x, y])?;

    check(&mut out, "sum_all", |g, v| Ok(g.sum_all(v[0])), std::slice::from_ref(&a34))?;
    check(&mut out, "mean_all", |g, v| g.mean_all(v[0]), std::slice::from_ref(&a34))?;
    let weights = Tensor::uniform(&[3, 4], 0.0, 1.0, r);
    check(&mut out, "weighted_mean", |g, v| g.weighted_mean(v[0], weights.clone()), std::slice::from_ref(&a34))?;
    check(&mut out, "softmax_rows", |g, v| g.softmax_rows(v[0]), std::slice::from_ref(&a34))?;
    let keep = [true, false, true, true];
    check(&mut out, "masked_softmax_rows", |g, v| g.masked_softmax_rows(v[0], &keep), std::slice::from_ref(&a34))?;
    let gain = Tensor::uniform(&[4], 0.5, 1.5, r);
    check(
        &mut out,
        "layer_norm",
        |g, v| g.layer_norm(v[0], v[1], v[2]),
        &[a34.clone(), gain, row4.clone()],
    )?;
    let logits = rand_t(r, &[3]);
    check(&mut out, "cross_entropy", |g, v| g.cross_entropy(v[0], 1), &[logits])?;
    check(&mut out, "add_row_bias", |g, v| g.add_row_bias(v[0], v[1]), &[a34.clone(), row4.clone()])?;
    let bias5 = rand_t(r, &[5]);
    check(
        &mut out,
        "linear",
        |g, v| g.linear(v[0], v[1], Some(v[2])),
        &[a34.clone(), c45.clone(), bias5],
    )?;
    check(&mut out, "columns", |g, v| g.columns(v[0], 1, 2), std::slice::from_ref(&a34))?;
    check(
        &mut out,
        "concat_cols",
        |g, v| g.concat_cols(&[v[0], v[1]]),
        &[a34.clone(), rand_t(r, &[3, 2])],
    )?;
    check(&mut out, "gather_rows", |g, v| g.gather_rows(v[0], &[2, 0, 2, 1]), std::slice::from_ref(&a34))?;
    check(&mut out, "mask_cols", |g, v| g.mask_cols(v[0], &keep), std::slice::from_ref(&a34))?;
    check(&mut out, "mean_rows", |g, v| g.mean_rows(v[0], &[true, false, true]), &[a34])?;
    Ok(out)
}

fn variant_configs(d_model: usize, num_heads: usize) -> Vec<(String, AttentionConfig)> {
    let base = AttentionConfig {
        d_model,
        num_heads,
        ..Default::default()
    };
    let mut out = Vec::new();
    for norm in [
        NormVariant::None,
        NormVariant::CenterN,
        NormVariant::CenterE,
        NormVariant::TwoSigmoid,
    ] {
        let cfg = AttentionConfig {
            norm_variant: norm,
            ..base.clone()
        };
        let name = serde_json::to_value(norm).expect("unit variant");
        out.push((name.as_str().unwrap_or_default().to_owned(), cfg));
    }
    for (fe, fn_) in [
        (Squash::Tanh, Squash::Tanh),
        (Squash::Tanh, Squash::Arctan),
        (Squash::Sigmoid, Squash::Sigmoid),
    ] {
        let composition = Composition::new(fe, fn_);
        out.push((
            composition.name(),
            AttentionConfig {
                composition,
                ..base.clone()
            },
        ));
    }
    out
}

/// `attend` (shared and separate projections) and the multi-head layers.
pub fn attention_checks(seed: u64) -> Result<Vec<ComponentCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa77e);
    let r = &mut rng;
    let mut out = Vec::new();
    let d = 4;
    let (a, b) = (rand_t(r, &[3, d]), rand_t(r, &[4, d]));
    let (f, f2) = (rand_t(r, &[d, d]), rand_t(r, &[d, d]));
    for (name, cfg) in variant_configs(d, 1) {
        for separate in [false, true] {
            let cfg = cfg.clone();
            let label = if separate { "separate" } else { "shared" };
            check(
                &mut out,
                &format!("attend/{label}/{name}"),
                move |g, v| {
                    let proj = if separate {
                        DualProjections::Separate {
                            affinity: v[2],
                            difference: v[3],
                        }
                    } else {
                        DualProjections::Shared(v[2])
                    };
                    let o = attend(g, v[0], v[1], &proj, &cfg)?;
                    let at = g.transpose(o.a_hat)?;
                    let bt = g.transpose(o.b_hat)?;
                    g.concat_cols(&[at, bt])
                },
                &[a.clone(), b.clone(), f.clone(), f2.clone()],
            )?;
        }
    }

    let dm = 8;
    let n = 4;
    let proj_params = |r: &mut ChaCha8Rng| -> Vec<Tensor<f64>> {
        let mut ps = Vec::new();
        for _ in 0..4 {
            ps.push(Tensor::uniform(&[dm, dm], -0.6, 0.6, r));
            ps.push(Tensor::uniform(&[dm], -0.1, 0.1, r));
        }
        ps
    };
    let bind = |v: &[Var]| HeadProjections {
        wq: v[1],
        bq: v[2],
        wk: v[3],
        bk: v[4],
        wv: v[5],
        bv: v[6],
        wo: v[7],
        bo: v[8],
    };
    let mask = [true, true, false, true];
    for (name, cfg) in variant_configs(dm, 2) {
        let mut params = vec![rand_t(r, &[n, dm])];
        params.extend(proj_params(r));
        let c = cfg.clone();
        check(
            &mut out,
            &format!("combined_attention_heads/{name}"),
            move |g, v| Ok(combined_attention_heads(g, v[0], v[0], v[0], &bind(v), &c, Some(&mask))?.output),
            &params,
        )?;
    }
    let cfg = AttentionConfig {
        d_model: dm,
        num_heads: 2,
        ..Default::default()
    };
    let mut params = vec![rand_t(r, &[n, dm])];
    params.extend(proj_params(r));
    check(
        &mut out,
        "multi_head_attention/mixed",
        move |g, v| Ok(multi_head_attention(g, v[0], v[0], v[0], &bind(v), &cfg, 1, Some(&mask))?.output),
        &params,
    )?;
    Ok(out)
}

/// Shrinks `config` to a 2-layer, `d_model = 8`, 2-head model keeping its
/// attention variant and matcher settings.
pub fn gradcheck_model_config(config: &ModelConfig, vocab_size: usize) -> ModelConfig {
    let mut cfg = config.clone();
    cfg.encoder.num_layers = 2;
    cfg.encoder.d_ff = Some(16);
    cfg.encoder.vocab_size = vocab_size;
    cfg.encoder.max_seq_len = cfg.encoder.max_seq_len.max(32);
    cfg.encoder.attention.d_model = 8;
    cfg.encoder.attention.num_heads = 2;
    cfg
}

/// The full model (in both encoding modes) on two generated pairs.
pub fn model_checks(config: &ModelConfig, data: &SyntheticSpec, seed: u64) -> Result<Vec<ComponentCheck>> {
    let spec = SyntheticSpec {
        num_examples: 2,
        max_len: data.max_len.min(6),
        min_len: data.min_len.min(data.max_len.min(6)),
        seed,
        ..data.clone()
    };
    let vocab = spec.vocab();
    let pairs = generate(&spec)?;
    let mut out = Vec::new();
    for mode in [EncodingMode::Cross, EncodingMode::Siamese] {
        let mut cfg = gradcheck_model_config(config, vocab.len());
        cfg.matcher.encoding = mode;
        let mut model: Model<f64> = Model::new(cfg, vocab.clone(), seed)?;
        // jitter every parameter by up to ±0.1
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        for t in model.store.tensors_mut() {
            for x in t.data_mut() {
                *x += rng.gen_range(-0.1..0.1);
            }
        }
        let params = model.store.tensors().to_vec();
        let report = finite_diff_check(
            |g, v| {
                let bound = Bound::from_vars(v.to_vec());
                let mut total = None;
                for p in &pairs {
                    let l = model.loss(g, &bound, p)?;
                    total = Some(match total {
                        None => l,
                        Some(t) => g.add(t, l)?,
                    });
                }
                Ok(total.expect("two pairs"))
            },
            &params,
            DEFAULT_EPS,
        )?;
        let name = match mode {
            EncodingMode::Cross => "model/cross",
            EncodingMode::Siamese => "model/siamese",
        };
        out.push(ComponentCheck::new(name, report));
    }
    Ok(out)
}

/// Ops, attention layers and the end-to-end model.
pub fn gradient_suite(config: &ModelConfig, data: &SyntheticSpec, seed: u64) -> Result<Vec<ComponentCheck>> {
    let mut out = op_checks(seed)?;
    out.extend(attention_checks(seed)?);
    out.extend(model_checks(config, data, seed)?);
    Ok(out)
}
