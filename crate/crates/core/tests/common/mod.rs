#![allow(dead_code)]

pub mod oracle;

use comate_core::attention::{AttentionConfig, Composition, HeadProjections, NormVariant, Squash};
use comate_core::{Graph, Tensor, Var};
use oracle::{Fun, HeadWeights, Mat, Norm, Setup};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    t.to_rows()
}

pub fn to_tensor(m: &Mat) -> Tensor<f64> {
    let rows: Vec<&[f64]> = m.iter().map(|r| r.as_slice()).collect();
    Tensor::from_f64_rows(&rows).unwrap()
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect()
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn squash(f: Fun) -> Squash {
    match f {
        Fun::Tanh => Squash::Tanh,
        Fun::Sigmoid => Squash::Sigmoid,
        Fun::Arctan => Squash::Arctan,
    }
}

pub fn attention_config(s: &Setup, d_model: usize, num_heads: usize) -> AttentionConfig {
    AttentionConfig {
        alpha: s.alpha,
        beta: s.beta,
        composition: Composition::new(squash(s.fe), squash(s.fn_)),
        norm_variant: match s.norm {
            Norm::None => NormVariant::None,
            Norm::CenterN => NormVariant::CenterN,
            Norm::CenterE => NormVariant::CenterE,
            Norm::TwoSigmoid => NormVariant::TwoSigmoid,
        },
        num_heads,
        d_model,
        ..Default::default()
    }
}

/// The eight composition variants plus two-sigmoid, as oracle setups.
pub fn all_setups() -> Vec<Setup> {
    let mut out = Vec::new();
    for (fe, fn_) in [
        (Fun::Tanh, Fun::Sigmoid),
        (Fun::Tanh, Fun::Tanh),
        (Fun::Tanh, Fun::Arctan),
        (Fun::Sigmoid, Fun::Tanh),
        (Fun::Sigmoid, Fun::Arctan),
        (Fun::Sigmoid, Fun::Sigmoid),
    ] {
        out.push(Setup {
            fe,
            fn_,
            ..Default::default()
        });
    }
    for norm in [Norm::CenterN, Norm::CenterE, Norm::TwoSigmoid] {
        out.push(Setup {
            norm,
            ..Default::default()
        });
    }
    out
}

/// Random setup with temperatures in `[0.5, 2)`.
pub fn random_setup(rng: &mut ChaCha8Rng) -> Setup {
    let setups = all_setups();
    let mut s = setups[rng.gen_range(0..setups.len())];
    s.alpha = rng.gen_range(0.5..2.0);
    s.beta = rng.gen_range(0.5..2.0);
    s
}

pub fn random_weights(rng: &mut ChaCha8Rng, d: usize) -> HeadWeights {
    let sc = 1.0 / (d as f64).sqrt();
    HeadWeights {
        wq: random_mat(rng, d, d, sc),
        bq: random_vec(rng, d, 0.2),
        wk: random_mat(rng, d, d, sc),
        bk: random_vec(rng, d, 0.2),
        wv: random_mat(rng, d, d, sc),
        bv: random_vec(rng, d, 0.2),
        wo: random_mat(rng, d, d, sc),
        bo: random_vec(rng, d, 0.2),
    }
}

/// Binds `w` as graph constants.
pub fn bind_weights(g: &mut Graph<f64>, w: &HeadWeights) -> HeadProjections {
    let mut c = |m: &Mat| g.constant(to_tensor(m));
    let (wq, wk, wv, wo) = (c(&w.wq), c(&w.wk), c(&w.wv), c(&w.wo));
    let mut v = |b: &[f64]| g.constant(Tensor::vector(b.to_vec()));
    HeadProjections {
        wq,
        bq: v(&w.bq),
        wk,
        bk: v(&w.bk),
        wv,
        bv: v(&w.bv),
        wo,
        bo: v(&w.bo),
    }
}

pub fn constant(g: &mut Graph<f64>, m: &Mat) -> Var {
    g.constant(to_tensor(m))
}
