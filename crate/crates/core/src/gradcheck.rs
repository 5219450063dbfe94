//! Central finite-difference gradient checking.
//!
//! The check builds the function once to get analytic gradients, then
//! re-evaluates it on fresh graphs with each parameter coordinate shifted by
//! `±eps`. Coordinates that sit within `eps` of a non-differentiable point
//! (an L1 tie, relu at 0) are detected from the disagreement of the one-sided
//! differences and reported as excluded instead of failed. Coordinates whose
//! analytic and numeric values both lie inside the rounding-noise band of the
//! central difference are counted separately as zero gradients.

use serde::Serialize;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Width of the rounding-noise band in units of `ε_mach · |f| / eps`.
pub const NOISE_ULPS: f64 = 64.0;

/// One checked parameter coordinate.
#[derive(Clone, Debug, Serialize)]
pub struct Coordinate {
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// Worst relative error over the non-excluded coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    pub worst: Option<Coordinate>,
    /// Coordinates whose error is explained by a kink inside `±eps`.
    pub excluded: Vec<Coordinate>,
    /// Coordinates where both gradients are zero to within rounding noise.
    pub zero: Vec<Coordinate>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Fixed, non-degenerate weights used to reduce a tensor-valued output to a
/// scalar before differentiating.
fn reduction_weights<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    let count: usize = shape.iter().product();
    let data = (0..count)
        .map(|k| T::of(1.0 + 0.5 * (1.37 * k as f64 + 0.3).sin()))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("weights match shape")
}

fn scalarize<T: Scalar>(g: &mut Graph<T>, out: Var) -> Result<Var> {
    if g.value(out).len() == 1 {
        return Ok(out);
    }
    let w = g.constant(reduction_weights(g.shape(out)));
    let weighted = g.mul(out, w)?;
    Ok(g.sum_all(weighted))
}

fn evaluate<T, F>(f: &F, params: &[Tensor<T>]) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let root = scalarize(&mut g, out)?;
    Ok(g.value(root).item().to_f64_lossy())
}

/// Compares analytic gradients of `f` with respect to every coordinate of
/// `params` against central differences with step `eps`.
///
/// `f` may return any shape; non-scalar outputs are contracted with fixed
/// weights so that every output entry contributes.
pub fn finite_diff_check<T, F>(f: F, params: &[Tensor<T>], eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let root = scalarize(&mut g, out)?;
    let base = g.value(root).item().to_f64_lossy();
    let grads = g.backward(root)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        excluded: Vec::new(),
        zero: Vec::new(),
    };
    let unit = T::epsilon().to_f64_lossy();
    let mut shifted: Vec<Tensor<T>> = params.to_vec();
    for (pi, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            shifted[pi].data_mut()[k] = orig + T::of(eps);
            let plus = evaluate(&f, &shifted)?;
            shifted[pi].data_mut()[k] = orig - T::of(eps);
            let minus = evaluate(&f, &shifted)?;
            shifted[pi].data_mut()[k] = orig;

            let a = analytic.data()[k].to_f64_lossy();
            let numeric = (plus - minus) / (2.0 * eps);
            let coord = Coordinate {
                param: pi,
                index: k,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            };
            report.checked += 1;
            let noise = NOISE_ULPS * unit * plus.abs().max(minus.abs()).max(base.abs()) / eps;
            if a.abs() <= noise && numeric.abs() <= noise {
                report.zero.push(coord);
                continue;
            }
            let forward = (plus - base) / eps;
            let backward = (base - minus) / eps;
            // kink: one-sided slopes spread at least as far as the error
            let spread = (forward - backward).abs();
            let kink = spread >= (a - numeric).abs()
                && spread >= 1e-3 * forward.abs().max(backward.abs()).max(1e-8);
            if kink && coord.rel_error >= 1e-6 {
                report.excluded.push(coord);
                continue;
            }
            if coord.rel_error >= report.max_rel_error {
                report.max_rel_error = coord.rel_error;
                report.worst = Some(coord);
            }
        }
    }
    Ok(report)
}

/// Shifts entries of `x` by `margin` until no `|x[i][k] − y[j][k]| < margin`,
/// keeping the L1 terms between them away from their kinks.
pub fn push_off_ties<T: Scalar>(x: &mut Tensor<T>, y: &Tensor<T>, margin: f64) {
    let m = T::of(margin);
    let cols = x.cols();
    for i in 0..x.rows() {
        for k in 0..cols {
            let mut v = x.get(i, k);
            while (0..y.rows()).any(|j| (v - y.get(j, k)).abs() < m) {
                v = v + m;
            }
            x.set(i, k, v);
        }
    }
}

/// Keeps entries at least `margin` away from zero (relu and abs kinks).
pub fn push_off_zero<T: Scalar>(x: &mut Tensor<T>, margin: f64) {
    let m = T::of(margin);
    for v in x.data_mut() {
        if v.abs() < m {
            *v = if *v < T::zero() { *v - m } else { *v + m };
        }
    }
}
