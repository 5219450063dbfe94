mod common;

use common::oracle::{self, Mat};
use common::*;
use comate_core::diagnostics::{op_checks, GRADCHECK_TOLERANCE};
use comate_core::gradcheck::{finite_diff_check, push_off_ties, DEFAULT_EPS};
use comate_core::{Error, Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let (a, b) = (random_mat(&mut r, 3, 4, 1.0), random_mat(&mut r, 4, 2, 1.0));
    let mut g = Graph::new();
    let (va, vb) = (constant(&mut g, &a), constant(&mut g, &b));
    let c = g.matmul(va, vb).unwrap();
    assert!(oracle::max_abs_diff(&to_mat(g.value(c)), &oracle::matmul(&a, &b)) < 1e-12);

    let eye = constant(&mut g, &vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let m = constant(&mut g, &vec![vec![3.0, 4.0], vec![5.0, 6.0]]);
    let p = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);
    let z = constant(&mut g, &vec![vec![0.0, 0.0]]);
    let ones = constant(&mut g, &vec![vec![1.0], vec![1.0]]);
    let p = g.matmul(z, ones).unwrap();
    assert_eq!(g.value(p).data(), &[0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Dimension { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected a dimension error, got {other:?}"),
    }
    let c = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.mul(a, c).is_err());
}

#[test]
fn pairwise_l1_matches_double_loop() {
    let mut r = rng(2);
    let (x, y) = (random_mat(&mut r, 3, 5, 1.0), random_mat(&mut r, 4, 5, 1.0));
    let mut g = Graph::new();
    let (vx, vy) = (constant(&mut g, &x), constant(&mut g, &y));
    let dv = g.pairwise_l1(vx, vy).unwrap();
    let d = to_mat(g.value(dv));
    for i in 0..3 {
        for j in 0..4 {
            assert!((d[i][j] - oracle::l1(&x[i], &y[j])).abs() < 1e-12);
        }
    }
    let same = g.pairwise_l1(vx, vx).unwrap();
    for i in 0..3 {
        assert_eq!(g.value(same).get(i, i), 0.0);
    }
    let bad = constant(&mut g, &vec![vec![1.0; 4]]);
    assert!(matches!(g.pairwise_l1(vx, bad), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_rows_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64_rows(&[&[0.0, 0.0]]).unwrap());
    let s = g.softmax_rows(x).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    let x = g.constant(Tensor::from_f64_rows(&[&[1000.0, 0.0]]).unwrap());
    let s = g.softmax_rows(x).unwrap();
    assert!(g.value(s).is_finite());
    assert!((g.value(s).data()[0] - 1.0).abs() < 1e-15);
    assert!(g.value(s).data()[1] < 1e-300);
}

#[test]
fn layer_norm_and_cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64_rows(&[&[2.5, 2.5, 2.5]]).unwrap());
    let gain = g.constant(Tensor::vector(vec![1.0; 3]));
    let bias = g.constant(Tensor::vector(vec![0.0; 3]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 3]);
    let logits = g.constant(Tensor::vector(vec![0.3, 0.3]));
    let l = g.cross_entropy(logits, 1).unwrap();
    assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
    assert!(matches!(g.cross_entropy(logits, 2), Err(Error::Domain(_))));
}

#[test]
fn mean_all_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64_rows(&[&[1.0, 3.0], &[5.0, 7.0]]).unwrap());
    let m = g.mean_all(x).unwrap();
    assert_eq!(g.value(m).item(), 4.0);
    let grads = g.backward(m).unwrap();
    assert_eq!(grads.wrt(x).data(), &[0.25; 4]);
    let c = g.constant(Tensor::full(&[3, 2], -1.25));
    let mc = g.mean_all(c).unwrap();
    assert_eq!(g.value(mc).item(), -1.25);
    let empty = g.constant(Tensor::zeros(&[0, 3]));
    assert!(matches!(g.mean_all(empty), Err(Error::Domain(_))));
}

#[test]
fn backward_needs_a_scalar_root() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward(x), Err(Error::Contract(_))));
}

#[test]
fn reusing_a_tensor_doubles_its_gradient() {
    let mut r = rng(3);
    let x0 = to_tensor(&random_mat(&mut r, 2, 3, 1.0));
    let w = to_tensor(&random_mat(&mut r, 2, 3, 1.0));
    let grad = |twice: bool| {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let wv = g.constant(w.clone());
        let once = g.mul(x, wv).unwrap();
        let y = if twice {
            let again = g.mul(x, wv).unwrap();
            g.add(once, again).unwrap()
        } else {
            once
        };
        let s = g.sum_all(y);
        g.backward(s).unwrap().wrt(x)
    };
    let (one, two) = (grad(false), grad(true));
    assert_eq!(two, one.map(|v| 2.0 * v));
}

fn fd(f: impl Fn(&mut Graph<f64>, &[comate_core::Var]) -> comate_core::Result<comate_core::Var>, params: &[Tensor<f64>]) -> f64 {
    finite_diff_check(f, params, DEFAULT_EPS).unwrap().max_rel_error
}

#[test]
fn smooth_op_gradients_at_tight_tolerances() {
    let mut r = rng(4);
    for _ in 0..10 {
        let x = to_tensor(&random_mat(&mut r, 2, 3, 1.5));
        assert!(fd(|g, v| Ok(g.tanh(v[0])), &[x.clone()]) < 1e-6);
        assert!(fd(|g, v| Ok(g.sigmoid(v[0])), &[x.clone()]) < 1e-6);
        assert!(fd(|g, v| g.softmax_rows(v[0]), &[x.clone()]) < 1e-6);
        let gain = to_tensor(&random_mat(&mut r, 1, 3, 1.0)).reshape(vec![3]).unwrap();
        let bias = to_tensor(&random_mat(&mut r, 1, 3, 1.0)).reshape(vec![3]).unwrap();
        assert!(fd(|g, v| g.layer_norm(v[0], v[1], v[2]), &[x.clone(), gain, bias]) < 1e-5);
        let logits = to_tensor(&random_mat(&mut r, 1, 3, 2.0)).reshape(vec![3]).unwrap();
        assert!(fd(|g, v| g.cross_entropy(v[0], 2), &[logits]) < 1e-5);
        let mut y = to_tensor(&random_mat(&mut r, 2, 3, 1.5));
        comate_core::gradcheck::push_off_zero(&mut y, 1e-2);
        assert!(fd(|g, v| Ok(g.relu(v[0])), &[y]) < 1e-5);
    }
}

#[test]
fn every_op_passes_at_100_random_points() {
    for seed in 0..100 {
        for c in op_checks(seed).unwrap() {
            assert!(c.max_rel_error < GRADCHECK_TOLERANCE, "seed {seed}: {c:?}");
        }
    }
}

#[test]
fn l1_kink_inside_eps_is_excluded() {
    let x: Tensor<f64> = Tensor::from_f64_rows(&[&[0.5, 1.0]]).unwrap();
    let y = Tensor::from_f64_rows(&[&[0.5 + 2e-6, -1.0]]).unwrap();
    let report = finite_diff_check(|g, v| g.pairwise_l1(v[0], v[1]), &[x.clone(), y.clone()], DEFAULT_EPS).unwrap();
    assert!(!report.excluded.is_empty());
    assert!(report.passed(1e-4), "{report:?}");

    let mut moved = x;
    push_off_ties(&mut moved, &y, 1e-3);
    let report = finite_diff_check(|g, v| g.pairwise_l1(v[0], v[1]), &[moved, y], DEFAULT_EPS).unwrap();
    assert!(report.excluded.is_empty());
    assert!(report.passed(1e-6), "{report:?}");
}

#[test]
fn sum_of_squares_matches_closed_form() {
    let report = finite_diff_check(
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum_all(sq))
        },
        &[Tensor::vector(vec![1.0, 2.0])],
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8);
}

#[test]
fn graphs_move_across_threads() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::vector(vec![1.0, -2.0]));
    let y = g.abs(x);
    let s = g.sum_all(y);
    let grads = std::thread::spawn(move || g.backward(s).unwrap().wrt(x)).join().unwrap();
    assert_eq!(grads.data(), &[1.0, -1.0]);
}

fn conforming(m: usize, k: usize, n: usize, p: usize) -> impl Strategy<Value = (Mat, Mat, Mat)> {
    let mat = |r: usize, c: usize| proptest::collection::vec(proptest::collection::vec(-2.0f64..2.0, c), r);
    (mat(m, k), mat(k, n), mat(n, p))
}

proptest! {
    #[test]
    fn matmul_is_associative(
        (a, b, c) in (1usize..5, 1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(m, k, n, p)| conforming(m, k, n, p)),
    ) {
        let mut g = Graph::new();
        let (va, vb, vc) = (constant(&mut g, &a), constant(&mut g, &b), constant(&mut g, &c));
        let ab = g.matmul(va, vb).unwrap();
        let left = g.matmul(ab, vc).unwrap();
        let bc = g.matmul(vb, vc).unwrap();
        let right = g.matmul(va, bc).unwrap();
        prop_assert!(g.value(left).max_abs_diff(g.value(right)) < 1e-9);
    }

    #[test]
    fn softmax_rows_are_distributions(
        x in (1usize..5, 1usize..7).prop_flat_map(|(r, c)| proptest::collection::vec(proptest::collection::vec(-30.0f64..30.0, c), r)),
    ) {
        let mut g = Graph::new();
        let v = constant(&mut g, &x);
        let s = g.softmax_rows(v).unwrap();
        for row in to_mat(g.value(s)) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0 && p <= 1.0));
            if row.len() > 1 && x.iter().flatten().all(|v| v.abs() < 10.0) {
                prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }
}
