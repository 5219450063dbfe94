mod common;

use common::oracle::{self, Fun, Mat, Norm, Setup};
use common::*;
use comate_core::attention::{
    affinity_matrix, attend, combined_attention_heads, compose, difference_matrix,
    multi_head_attention, normalize_difference, softmax_attention_heads, AttentionConfig,
    DualProjections, NormVariant,
};
use comate_core::gradcheck::{finite_diff_check, DEFAULT_EPS};
use comate_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn affinity_matches_scalar_sum() {
    let mut r = rng(1);
    let (a, b) = (random_mat(&mut r, 3, 4, 1.0), random_mat(&mut r, 5, 4, 1.0));
    let mut g = Graph::new();
    let (va, vb) = (constant(&mut g, &a), constant(&mut g, &b));
    let e = affinity_matrix(&mut g, va, vb, 2.0).unwrap();
    let got = to_mat(g.value(e));
    for i in 0..3 {
        for j in 0..5 {
            let want: f64 = (0..4).map(|k| 2.0 * a[i][k] * b[j][k]).sum();
            assert!((got[i][j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn difference_hand_values_and_gate_bound() {
    let mut g = Graph::new();
    let a = constant(&mut g, &vec![vec![1.0, 2.0]]);
    let b = constant(&mut g, &vec![vec![3.0, 0.0]]);
    let n = difference_matrix(&mut g, a, b, 1.0).unwrap();
    assert_eq!(g.value(n).data(), &[-4.0]);

    let mut r = rng(2);
    let (x, y) = (random_mat(&mut r, 4, 3, 2.0), random_mat(&mut r, 6, 3, 2.0));
    let (vx, vy) = (constant(&mut g, &x), constant(&mut g, &y));
    let n = difference_matrix(&mut g, vx, vy, 1.3).unwrap();
    let s = g.sigmoid(n);
    assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v <= 0.5));
}

#[test]
fn normalize_examples() {
    let mut g = Graph::new();
    let n = constant(&mut g, &vec![vec![-2.0, -4.0], vec![-6.0, -8.0]]);
    let c = normalize_difference(&mut g, n, NormVariant::CenterN, None).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 1.0, -1.0, -3.0]);
    let k = constant(&mut g, &vec![vec![-1.5; 3]; 2]);
    let c = normalize_difference(&mut g, k, NormVariant::CenterN, None).unwrap();
    assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    let same = normalize_difference(&mut g, n, NormVariant::None, None).unwrap();
    assert_eq!(g.value(same), g.value(n));
}

#[test]
fn compose_scalar_oracle() {
    let mut g = Graph::new();
    let e = constant(&mut g, &vec![vec![1.0]]);
    let n = constant(&mut g, &vec![vec![0.0]]);
    let m = compose(&mut g, e, n, &AttentionConfig::default()).unwrap();
    let want = 1f64.tanh() * (1.0 / (1.0 + 1.0));
    assert!((g.value(m).item() - want).abs() < 1e-15);
    assert!((g.value(m).item() - 0.380797).abs() < 1e-6);
}

#[test]
fn attend_zero_source_gives_zero_pooling() {
    let mut r = rng(3);
    let a = random_mat(&mut r, 3, 4, 1.0);
    let b = vec![vec![0.0; 4]; 2];
    let mut g = Graph::new();
    let (va, vb) = (constant(&mut g, &a), constant(&mut g, &b));
    let cfg = AttentionConfig::default();
    let out = attend(&mut g, va, vb, &DualProjections::Identity, &cfg).unwrap();
    assert!(g.value(out.a_hat).data().iter().all(|&v| v == 0.0));
}

#[test]
fn attend_one_by_one_identity_case() {
    let x = vec![vec![0.7]];
    let mut g = Graph::new();
    let v = constant(&mut g, &x);
    let out = attend(&mut g, v, v, &DualProjections::Identity, &AttentionConfig::default()).unwrap();
    // E = 0.49, N = 0, M = tanh(0.49)·0.5, â = M·0.7.
    let want = 0.49f64.tanh() * 0.5 * 0.7;
    assert!((g.value(out.a_hat).item() - want).abs() < 1e-15);
}

fn check_attend(seed: u64, na: usize, nb: usize, d: usize, d_k: usize, separate: bool, s: &Setup) -> f64 {
    let mut r = rng(seed);
    let a = random_mat(&mut r, na, d, 1.0);
    let b = random_mat(&mut r, nb, d, 1.0);
    let fe = random_mat(&mut r, d, d_k, 0.8);
    let fn_ = if separate { random_mat(&mut r, d, d_k, 0.8) } else { fe.clone() };
    let (want_a, want_b, want_t) = oracle::attend(&a, &b, Some(&fe), Some(&fn_), s);

    let mut g = Graph::new();
    let (va, vb) = (constant(&mut g, &a), constant(&mut g, &b));
    let (wf, wn) = (constant(&mut g, &fe), constant(&mut g, &fn_));
    let proj = if separate {
        DualProjections::Separate {
            affinity: wf,
            difference: wn,
        }
    } else {
        DualProjections::Shared(wf)
    };
    let cfg = attention_config(s, d, 1);
    let out = attend(&mut g, va, vb, &proj, &cfg).unwrap();
    let t = out.trace.materialize(&g);
    [
        oracle::max_abs_diff(&to_mat(g.value(out.a_hat)), &want_a),
        oracle::max_abs_diff(&to_mat(g.value(out.b_hat)), &want_b),
        oracle::max_abs_diff(&to_mat(&t.e), &want_t.e),
        oracle::max_abs_diff(&to_mat(&t.e_used), &want_t.e_used),
        oracle::max_abs_diff(&to_mat(&t.n_raw), &want_t.n_raw),
        oracle::max_abs_diff(&to_mat(&t.n_norm), &want_t.n_norm),
        oracle::max_abs_diff(&to_mat(&t.m), &want_t.m),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

#[test]
fn attend_matches_scalar_oracle_on_the_spec_shape() {
    for s in all_setups() {
        for separate in [false, true] {
            let err = check_attend(11, 3, 4, 6, 6, separate, &s);
            assert!(err < 1e-10, "{s:?} separate={separate}: {err:e}");
        }
    }
}

#[test]
fn attend_matches_scalar_oracle_on_random_instances() {
    let mut r = rng(12);
    for case in 0..50 {
        let s = random_setup(&mut r);
        let (na, nb) = (r.gen_range(1..=5), r.gen_range(1..=5));
        let (d, d_k) = (r.gen_range(1..=8), r.gen_range(1..=8));
        let err = check_attend(100 + case, na, nb, d, d_k, r.gen_bool(0.5), &s);
        assert!(err < 1e-10, "case {case}: {err:e}");
    }
}

fn check_heads(seed: u64, n: usize, heads: usize, d_k: usize, num_combined: usize, s: &Setup, keep: Option<&[bool]>) -> f64 {
    let mut r = rng(seed);
    let d = heads * d_k;
    let x = random_mat(&mut r, n, d, 1.0);
    let w = random_weights(&mut r, d);
    let want = oracle::multi_head(&x, &x, &x, &w, heads, num_combined, s, keep);
    let mut g = Graph::new();
    let vx = constant(&mut g, &x);
    let proj = bind_weights(&mut g, &w);
    let cfg = attention_config(s, d, heads);
    let out = multi_head_attention(&mut g, vx, vx, vx, &proj, &cfg, num_combined, keep).unwrap();
    oracle::max_abs_diff(&to_mat(g.value(out.output)), &want)
}

#[test]
fn single_head_n2_dk3_matches_oracle() {
    for s in all_setups() {
        assert!(check_heads(21, 2, 1, 3, 1, &s, None) < 1e-10, "{s:?}");
    }
}

#[test]
fn combined_heads_match_oracle_on_random_instances() {
    let mut r = rng(22);
    for case in 0..50 {
        let s = random_setup(&mut r);
        let n = r.gen_range(1..=5);
        let heads = r.gen_range(1..=3);
        let d_k = r.gen_range(1..=8);
        let keep: Vec<bool> = (0..n).map(|_| r.gen_bool(0.8)).collect();
        let mask = r.gen_bool(0.5).then_some(keep.as_slice());
        let err = check_heads(200 + case, n, heads, d_k, heads, &s, mask);
        assert!(err < 1e-10, "case {case}: {err:e}");
    }
}

#[test]
fn softmax_heads_match_oracle() {
    let mut r = rng(23);
    for case in 0..20 {
        let n = r.gen_range(1..=5);
        let keep: Vec<bool> = (0..n).map(|j| j == 0 || r.gen_bool(0.7)).collect();
        let err = check_heads(300 + case, n, 2, 3, 0, &Setup::default(), Some(&keep));
        assert!(err < 1e-10, "case {case}: {err:e}");
    }
}

#[test]
fn mixed_layers_match_oracle() {
    let mut r = rng(24);
    for case in 0..20 {
        let s = random_setup(&mut r);
        let err = check_heads(400 + case, 4, 4, 2, 1 + case as usize % 3, &s, None);
        assert!(err < 1e-10, "case {case}: {err:e}");
    }
}

fn identity_weights(d: usize) -> oracle::HeadWeights {
    let eye: Mat = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    oracle::HeadWeights {
        wq: eye.clone(),
        bq: vec![0.0; d],
        wk: eye.clone(),
        bk: vec![0.0; d],
        wv: eye.clone(),
        bv: vec![0.0; d],
        wo: eye,
        bo: vec![0.0; d],
    }
}

#[test]
fn zero_values_and_full_mask_give_zero_output() {
    let mut r = rng(25);
    let d = 4;
    let x = random_mat(&mut r, 3, d, 1.0);
    let cfg = AttentionConfig {
        d_model: d,
        num_heads: 2,
        ..Default::default()
    };
    let mut w = random_weights(&mut r, d);
    w.bo = vec![0.0; d];
    let mut g = Graph::new();
    let vx = constant(&mut g, &x);
    let zero = constant(&mut g, &vec![vec![0.0; d]; 3]);
    let mut wz = w.clone();
    wz.bv = vec![0.0; d];
    let proj = bind_weights(&mut g, &wz);
    let out = combined_attention_heads(&mut g, vx, vx, zero, &proj, &cfg, None).unwrap();
    assert!(g.value(out.output).data().iter().all(|&v| v == 0.0));

    let proj = bind_weights(&mut g, &w);
    let out = combined_attention_heads(&mut g, vx, vx, vx, &proj, &cfg, Some(&[false; 3])).unwrap();
    assert!(g.value(out.output).data().iter().all(|&v| v == 0.0));
}

#[test]
fn softmax_uniform_and_single_key_cases() {
    let d = 2;
    let w = identity_weights(d);
    let cfg = AttentionConfig {
        d_model: d,
        num_heads: 1,
        ..Default::default()
    };
    let mut g = Graph::new();
    let q = constant(&mut g, &vec![vec![0.3, 0.3]; 3]);
    let v = constant(&mut g, &vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]);
    let proj = bind_weights(&mut g, &w);
    let out = softmax_attention_heads(&mut g, q, q, v, &proj, &cfg, None).unwrap();
    for row in to_mat(g.value(out.output)) {
        assert!((row[0] - 1.0).abs() < 1e-15 && (row[1] - 1.0).abs() < 1e-15);
    }
    let out = softmax_attention_heads(&mut g, q, q, v, &proj, &cfg, Some(&[false, true, false])).unwrap();
    for row in to_mat(g.value(out.output)) {
        assert_eq!(row, vec![0.0, 1.0]);
    }
}

#[test]
fn mask_length_mismatch_is_a_dimension_error() {
    let mut r = rng(26);
    let w = random_weights(&mut r, 4);
    let mut g = Graph::new();
    let x = constant(&mut g, &random_mat(&mut r, 3, 4, 1.0));
    let proj = bind_weights(&mut g, &w);
    let cfg = AttentionConfig {
        d_model: 4,
        num_heads: 2,
        ..Default::default()
    };
    let err = combined_attention_heads(&mut g, x, x, x, &proj, &cfg, Some(&[true; 2])).unwrap_err();
    assert!(matches!(err, comate_core::Error::Dimension { .. }));
}

#[test]
fn rows_of_m_are_not_normalised() {
    let mut r = rng(27);
    let found = (0..20).any(|_| {
        let a = random_mat(&mut r, 3, 4, 1.5);
        let b = random_mat(&mut r, 4, 4, 1.5);
        let mut g = Graph::new();
        let (va, vb) = (constant(&mut g, &a), constant(&mut g, &b));
        let out = attend(&mut g, va, vb, &DualProjections::Identity, &AttentionConfig::default()).unwrap();
        to_mat(g.value(out.trace.m))
            .iter()
            .any(|row| (row.iter().sum::<f64>() - 1.0).abs() > 0.1)
    });
    assert!(found);
}

#[test]
fn attention_layer_gradients_pass_finite_differences() {
    let mut r = rng(28);
    let x0 = random_mat(&mut r, 4, 8, 1.0);
    let w = random_weights(&mut r, 8);
    let mut params = vec![to_tensor(&x0)];
    for m in [&w.wq, &w.wk, &w.wv, &w.wo] {
        params.push(to_tensor(m));
    }
    for s in all_setups() {
        let cfg = attention_config(&s, 8, 2);
        let bq = w.bq.clone();
        let report = finite_diff_check(
            |g, v| {
                let zero = g.constant(Tensor::vector(bq.clone()));
                let proj = comate_core::attention::HeadProjections {
                    wq: v[1],
                    bq: zero,
                    wk: v[2],
                    bk: zero,
                    wv: v[3],
                    bv: zero,
                    wo: v[4],
                    bo: zero,
                };
                Ok(combined_attention_heads(g, v[0], v[0], v[0], &proj, &cfg, None)?.output)
            },
            &params,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(report.passed(1e-4), "{s:?}: {report:?}");
    }
}

fn attend_trace(a: &Mat, b: &Mat, f: &Mat, s: &Setup) -> (Mat, Mat, Mat, Mat, Mat) {
    let (a_hat, b_hat, n_raw, n_norm, m, _) = attend_trace_full(a, b, f, s);
    (a_hat, b_hat, n_raw, n_norm, m)
}

fn attend_trace_full(a: &Mat, b: &Mat, f: &Mat, s: &Setup) -> (Mat, Mat, Mat, Mat, Mat, Mat) {
    let mut g = Graph::new();
    let (va, vb, vf) = (constant(&mut g, a), constant(&mut g, b), constant(&mut g, f));
    let cfg = attention_config(s, a[0].len(), 1);
    let out = attend(&mut g, va, vb, &DualProjections::Shared(vf), &cfg).unwrap();
    let t = out.trace.materialize(&g);
    (
        to_mat(g.value(out.a_hat)),
        to_mat(g.value(out.b_hat)),
        to_mat(&t.n_raw),
        to_mat(&t.n_norm),
        to_mat(&t.m),
        to_mat(&t.e_used),
    )
}

fn setup_strategy() -> impl Strategy<Value = Setup> {
    (0usize..9, 0.25f64..3.0, 0.25f64..3.0).prop_map(|(k, alpha, beta)| Setup {
        alpha,
        beta,
        ..all_setups()[k]
    })
}

fn mat_strategy(rows: std::ops::RangeInclusive<usize>, cols: usize) -> impl Strategy<Value = Mat> {
    rows.prop_flat_map(move |n| proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, cols), n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn range_and_centering_invariants(
        s in setup_strategy(),
        (a, b, f) in (1usize..=6).prop_flat_map(|d| (mat_strategy(1..=5, d), mat_strategy(1..=5, d), mat_strategy(d..=d, d))),
    ) {
        let (_, _, n_raw, n_norm, m, e_used) = attend_trace_full(&a, &b, &f, &s);
        for (i, row) in n_raw.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                prop_assert!(v <= 0.0);
                prop_assert!(Fun::Sigmoid.eval(v) <= 0.5);
                let mij = m[i][j].abs();
                // strict bound checked away from floating-point saturation
                let unsaturated = e_used[i][j].abs() < 15.0 && n_norm[i][j].abs() < 15.0;
                let bound = match (s.fe, s.fn_, s.norm) {
                    (Fun::Tanh, Fun::Sigmoid, Norm::None) => 0.5,
                    (Fun::Tanh, Fun::Sigmoid, Norm::CenterN | Norm::CenterE) => 1.0,
                    (_, _, Norm::TwoSigmoid) => 2.0,
                    (_, Fun::Arctan, _) => std::f64::consts::FRAC_PI_2,
                    _ => 1.0,
                };
                prop_assert!(mij <= bound, "{mij} > {bound}");
                if unsaturated {
                    prop_assert!(mij < bound, "{mij} not < {bound}");
                }
            }
        }
        if s.norm == Norm::CenterN {
            let count = (n_norm.len() * n_norm[0].len()) as f64;
            let mean = n_norm.iter().flatten().sum::<f64>() / count;
            prop_assert!(mean.abs() < 1e-12, "mean {mean:e}");
        }
    }

    #[test]
    fn shared_projection_symmetry(
        s in setup_strategy(),
        (a, b, f) in (1usize..=5).prop_flat_map(|d| (mat_strategy(1..=4, d), mat_strategy(1..=4, d), mat_strategy(d..=d, d))),
    ) {
        let (a_hat_ab, b_hat_ab, n_ab, _, m_ab) = attend_trace(&a, &b, &f, &s);
        let (a_hat_ba, b_hat_ba, n_ba, _, m_ba) = attend_trace(&b, &a, &f, &s);
        prop_assert!(oracle::max_abs_diff(&oracle::transpose(&n_ab), &n_ba) < 1e-12);
        prop_assert!(oracle::max_abs_diff(&oracle::transpose(&m_ab), &m_ba) < 1e-12);
        prop_assert!(oracle::max_abs_diff(&b_hat_ab, &a_hat_ba) < 1e-12);
        prop_assert!(oracle::max_abs_diff(&a_hat_ab, &b_hat_ba) < 1e-12);
    }

    #[test]
    fn row_permutation_equivariance(
        s in setup_strategy(),
        (a, b, f) in (1usize..=5).prop_flat_map(|d| (mat_strategy(2..=5, d), mat_strategy(1..=4, d), mat_strategy(d..=d, d))),
        seed in any::<u64>(),
    ) {
        let mut perm: Vec<usize> = (0..a.len()).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng(seed));
        let pa: Mat = perm.iter().map(|&i| a[i].clone()).collect();
        let (a_hat, _, _, _, _) = attend_trace(&a, &b, &f, &s);
        let (pa_hat, _, _, _, _) = attend_trace(&pa, &b, &f, &s);
        let expect: Mat = perm.iter().map(|&i| a_hat[i].clone()).collect();
        prop_assert!(oracle::max_abs_diff(&pa_hat, &expect) < 1e-12);
    }

    #[test]
    fn monotone_gate(
        e in 0.01f64..4.0,
        dist in 0.0f64..6.0,
        shrink in 0.0f64..1.0,
        beta in 0.25f64..3.0,
    ) {
        let mut g = Graph::<f64>::new();
        let cfg = AttentionConfig { beta, ..Default::default() };
        let ev = g.constant(Tensor::from_f64_rows(&[&[e]]).unwrap());
        let far = g.constant(Tensor::from_f64_rows(&[&[-beta * dist]]).unwrap());
        let near = g.constant(Tensor::from_f64_rows(&[&[-beta * dist * shrink]]).unwrap());
        let m_far = compose(&mut g, ev, far, &cfg).unwrap();
        let m_near = compose(&mut g, ev, near, &cfg).unwrap();
        prop_assert!(g.value(m_near).item().abs() >= g.value(m_far).item().abs());
    }
}

#[test]
fn monotone_gate_through_difference_matrix() {
    // pull row j of B toward row i of A with E fixed and positive
    let mut r = rng(29);
    for _ in 0..200 {
        let a = random_mat(&mut r, 2, 3, 1.0);
        let mut b = random_mat(&mut r, 3, 3, 1.0);
        let (i, j) = (r.gen_range(0..2), r.gen_range(0..3));
        let e_pos = vec![vec![0.8, 1.2, 0.3], vec![2.0, 0.1, 0.6]];
        let gate = |b: &Mat| {
            let mut g = Graph::new();
            let (va, vb) = (constant(&mut g, &a), constant(&mut g, b));
            let n = difference_matrix(&mut g, va, vb, 1.0).unwrap();
            let e = constant(&mut g, &e_pos);
            let m = compose(&mut g, e, n, &AttentionConfig::default()).unwrap();
            to_mat(g.value(m))[i][j].abs()
        };
        let before = gate(&b);
        let t = r.gen_range(0.0..1.0);
        for k in 0..3 {
            b[j][k] += t * (a[i][k] - b[j][k]);
        }
        assert!(gate(&b) >= before - 1e-15);
    }
}
