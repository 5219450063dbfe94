//! Scalar-loop reference implementations on plain `Vec<Vec<f64>>`.
//!
//! Nothing here touches the graph; every formula is written out entry by
//! entry so the library can be compared against it.

#![allow(dead_code)]

pub type Mat = Vec<Vec<f64>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fun {
    Tanh,
    Sigmoid,
    Arctan,
}

impl Fun {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Fun::Tanh => x.tanh(),
            Fun::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Fun::Arctan => x.atan(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    None,
    CenterN,
    CenterE,
    TwoSigmoid,
}

#[derive(Clone, Copy, Debug)]
pub struct Setup {
    pub alpha: f64,
    pub beta: f64,
    pub fe: Fun,
    pub fn_: Fun,
    pub norm: Norm,
}

impl Default for Setup {
    fn default() -> Self {
        Setup {
            alpha: 1.0,
            beta: 1.0,
            fe: Fun::Tanh,
            fn_: Fun::Sigmoid,
            norm: Norm::None,
        }
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (m, k, n) = (a.len(), b.len(), b.first().map_or(0, |r| r.len()));
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    let cols = a.first().map_or(0, |r| r.len());
    (0..cols).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Matrices of one combined head.
#[derive(Clone, Debug)]
pub struct Trace {
    pub e: Mat,
    pub e_used: Mat,
    pub n_raw: Mat,
    pub n_norm: Mat,
    pub m: Mat,
}

/// `E`, `N`, `M` for projected rows; `valid[i][j]` marks entries entering the
/// centering mean.
pub fn combined(ae: &Mat, be: &Mat, an: &Mat, bn: &Mat, s: &Setup, valid: Option<&Vec<Vec<bool>>>) -> Trace {
    let (na, nb) = (ae.len(), be.len());
    let d_k = ae[0].len() as f64;
    let mut e = vec![vec![0.0; nb]; na];
    let mut n_raw = vec![vec![0.0; nb]; na];
    for i in 0..na {
        for j in 0..nb {
            e[i][j] = s.alpha * dot(&ae[i], &be[j]) / d_k.sqrt();
            n_raw[i][j] = -s.beta * l1(&an[i], &bn[j]) / d_k.sqrt();
        }
    }
    let mean = |x: &Mat| {
        let (mut sum, mut count) = (0.0, 0.0);
        for i in 0..na {
            for j in 0..nb {
                if valid.map_or(true, |v| v[i][j]) {
                    sum += x[i][j];
                    count += 1.0;
                }
            }
        }
        sum / count
    };
    let shift = |x: &Mat, c: f64| -> Mat { x.iter().map(|r| r.iter().map(|v| v - c).collect()).collect() };
    let e_used = if s.norm == Norm::CenterE { shift(&e, mean(&e)) } else { e.clone() };
    let n_norm = if s.norm == Norm::CenterN { shift(&n_raw, mean(&n_raw)) } else { n_raw.clone() };
    let gate_scale = if s.norm == Norm::TwoSigmoid { 2.0 } else { 1.0 };
    let mut m = vec![vec![0.0; nb]; na];
    for i in 0..na {
        for j in 0..nb {
            m[i][j] = s.fe.eval(e_used[i][j]) * gate_scale * s.fn_.eval(n_norm[i][j]);
        }
    }
    Trace {
        e,
        e_used,
        n_raw,
        n_norm,
        m,
    }
}

/// Cross-attention pooling with optional shared (`fe == fn`) or separate
/// projection matrices: returns `(â, b̂, trace)`.
pub fn attend(a: &Mat, b: &Mat, fe: Option<&Mat>, fn_: Option<&Mat>, s: &Setup) -> (Mat, Mat, Trace) {
    let proj = |x: &Mat, w: Option<&Mat>| w.map_or_else(|| x.clone(), |w| matmul(x, w));
    let t = combined(&proj(a, fe), &proj(b, fe), &proj(a, fn_), &proj(b, fn_), s, None);
    let a_hat = matmul(&t.m, b);
    let b_hat = matmul(&transpose(&t.m), a);
    (a_hat, b_hat, t)
}

/// Per-head Q/K/V and output maps (`d_model × d_model` weights).
#[derive(Clone, Debug)]
pub struct HeadWeights {
    pub wq: Mat,
    pub bq: Vec<f64>,
    pub wk: Mat,
    pub bk: Vec<f64>,
    pub wv: Mat,
    pub bv: Vec<f64>,
    pub wo: Mat,
    pub bo: Vec<f64>,
}

pub fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let mut y = matmul(x, w);
    for row in &mut y {
        for (v, bias) in row.iter_mut().zip(b) {
            *v += bias;
        }
    }
    y
}

fn cols(x: &Mat, start: usize, len: usize) -> Mat {
    x.iter().map(|r| r[start..start + len].to_vec()).collect()
}

/// Softmax head on projected `q, k, v` with keys masked to `-∞`.
pub fn softmax_head(q: &Mat, k: &Mat, v: &Mat, keep: Option<&[bool]>) -> Mat {
    let d_k = q[0].len() as f64;
    let n = k.len();
    let mut out = vec![vec![0.0; v[0].len()]; q.len()];
    for i in 0..q.len() {
        let scores: Vec<f64> = (0..n).map(|j| dot(&q[i], &k[j]) / d_k.sqrt()).collect();
        let ok = |j: usize| keep.map_or(true, |m| m[j]);
        if !(0..n).any(ok) {
            continue;
        }
        let max = (0..n).filter(|&j| ok(j)).map(|j| scores[j]).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = (0..n).map(|j| if ok(j) { (scores[j] - max).exp() } else { 0.0 }).collect();
        let z: f64 = w.iter().sum();
        for j in 0..n {
            for c in 0..v[0].len() {
                out[i][c] += w[j] / z * v[j][c];
            }
        }
    }
    out
}

/// Combined head on projected `q, k, v`: masked key columns of `M` are zero
/// and the centering mean runs over valid query × valid key entries.
pub fn combined_head(q: &Mat, k: &Mat, v: &Mat, s: &Setup, keep: Option<&[bool]>) -> (Mat, Trace) {
    let n = k.len();
    let valid: Option<Vec<Vec<bool>>> = keep.and_then(|m| {
        let partial = m.iter().any(|&x| x) && m.iter().any(|&x| !x);
        partial.then(|| (0..q.len()).map(|i| (0..n).map(|j| (q.len() != n || m[i]) && m[j]).collect()).collect())
    });
    let mut t = combined(q, k, q, k, s, valid.as_ref());
    if let Some(m) = keep {
        for row in &mut t.m {
            for j in 0..n {
                if !m[j] {
                    row[j] = 0.0;
                }
            }
        }
    }
    (matmul(&t.m, v), t)
}

/// Multi-head attention with the first `num_combined` heads combined.
pub fn multi_head(
    x_q: &Mat,
    x_k: &Mat,
    x_v: &Mat,
    w: &HeadWeights,
    num_heads: usize,
    num_combined: usize,
    s: &Setup,
    keep: Option<&[bool]>,
) -> Mat {
    let q = linear(x_q, &w.wq, &w.bq);
    let k = linear(x_k, &w.wk, &w.bk);
    let v = linear(x_v, &w.wv, &w.bv);
    let d_k = q[0].len() / num_heads;
    let mut joined = vec![Vec::new(); q.len()];
    for h in 0..num_heads {
        let (qh, kh, vh) = (cols(&q, h * d_k, d_k), cols(&k, h * d_k, d_k), cols(&v, h * d_k, d_k));
        let out = if h < num_combined {
            combined_head(&qh, &kh, &vh, s, keep).0
        } else {
            softmax_head(&qh, &kh, &vh, keep)
        };
        for (row, part) in joined.iter_mut().zip(out) {
            row.extend(part);
        }
    }
    linear(&joined, &w.wo, &w.bo)
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            row.iter()
                .enumerate()
                .map(|(k, v)| (v - mean) * inv * gain[k] + bias[k])
                .collect()
        })
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len(), "row count");
    a.iter()
        .zip(b)
        .flat_map(|(r, s)| {
            assert_eq!(r.len(), s.len(), "column count");
            r.iter().zip(s).map(|(x, y)| (x - y).abs())
        })
        .fold(0.0, f64::max)
}
