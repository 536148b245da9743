use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t1(data: Vec<f64>) -> Tensor {
    let n = data.len();
    Tensor::constant(vec![n], data).unwrap()
}

fn p1(data: Vec<f64>) -> Tensor {
    let n = data.len();
    Tensor::param(vec![n], data).unwrap()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_identity() {
    let tape = Tape::new();
    let eye = Tensor::constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let v = Tensor::constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
    let out = tape.matmul(&eye, &v).unwrap();
    assert_eq!(out.to_vec(), vec![3.0, 4.0]);
}

#[test]
fn matmul_hand() {
    let tape = Tape::new();
    let a = Tensor::constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let b = Tensor::constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
    let out = tape.matmul(&a, &b).unwrap();
    assert_eq!(out.to_vec(), vec![11.0]);
}

#[test]
fn matmul_zero() {
    let tape = Tape::new();
    let z = Tensor::zeros(vec![2, 3]);
    let b = Tensor::constant(vec![3, 2], (0..6).map(|i| i as f64).collect()).unwrap();
    let out = tape.matmul(&z, &b).unwrap();
    assert!(out.to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = Tensor::zeros(vec![2, 3]);
    let b = Tensor::zeros(vec![2, 2]);
    let err = tape.matmul(&a, &b).unwrap_err();
    match err {
        Error::ShapeMismatch { lhs, rhs, .. } => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 2]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn softmax_symmetry_and_shift() {
    let tape = Tape::new();
    let out = tape.softmax(&t1(vec![0.0, 0.0]), 0).unwrap();
    assert_close(&out.to_vec(), &[0.5, 0.5], 1e-12);
    let out = tape.softmax(&t1(vec![1000.0, 1000.0]), 0).unwrap();
    assert_close(&out.to_vec(), &[0.5, 0.5], 1e-12);
    assert!(out.is_finite());
}

#[test]
fn softmax_hand() {
    let tape = Tape::new();
    let out = tape.softmax(&t1(vec![0.0, 3f64.ln()]), 0).unwrap();
    assert_close(&out.to_vec(), &[0.25, 0.75], 1e-12);
}

#[test]
fn softmax_axes_of_matrix() {
    let tape = Tape::new();
    let x = Tensor::constant(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    let cols = tape.softmax(&x, 0).unwrap();
    for j in 0..3 {
        let s: f64 = (0..2).map(|i| cols.get(i, j)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let rows = tape.softmax(&x, 1).unwrap();
    for i in 0..2 {
        let s: f64 = (0..3).map(|j| rows.get(i, j)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn elementwise_examples() {
    let tape = Tape::new();
    let x = t1(vec![2.0, 3.0]);
    let out = tape.mul(&x, &Tensor::ones(vec![2])).unwrap();
    assert_eq!(out.to_vec(), vec![2.0, 3.0]);
    let out = tape.sub(&x, &x).unwrap();
    assert_eq!(out.to_vec(), vec![0.0, 0.0]);
    let out = tape.mul(&x, &t1(vec![4.0, 5.0])).unwrap();
    assert_eq!(out.to_vec(), vec![8.0, 15.0]);
    assert!(tape.add(&x, &t1(vec![1.0])).is_err());
}

#[test]
fn activation_examples() {
    let tape = Tape::new();
    let out = tape.relu(&t1(vec![-1.0, 2.0]));
    assert_eq!(out.to_vec(), vec![0.0, 2.0]);
    let out = tape.sigmoid(&t1(vec![0.0]));
    assert_eq!(out.to_vec(), vec![0.5]);
    let out = tape.tanh(&t1(vec![0.0]));
    assert_eq!(out.to_vec(), vec![0.0]);
}

#[test]
fn concat_examples() {
    let tape = Tape::new();
    let a = t1(vec![1.0, 2.0]);
    let out = tape.concat(&[a.clone()], 0).unwrap();
    assert_eq!(out.to_vec(), vec![1.0, 2.0]);

    let l = Tensor::constant(vec![2, 1], vec![1.0, 2.0]).unwrap();
    let r = Tensor::constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
    let out = tape.concat(&[l, r], 1).unwrap();
    assert_eq!(out.shape(), vec![2, 2]);
    assert_eq!(out.to_vec(), vec![1.0, 3.0, 2.0, 4.0]);

    let three = tape
        .concat(&[t1(vec![1.0, 2.0]), t1(vec![3.0, 4.0]), t1(vec![5.0, 6.0])], 0)
        .unwrap();
    assert_eq!(three.shape(), vec![6]);

    let bad = tape.concat(&[t1(vec![1.0, 2.0]), t1(vec![1.0, 2.0, 3.0])], 1);
    assert!(bad.is_err());
}

#[test]
fn lstm_cell_zero_params_zero_state() {
    let tape = Tape::new();
    let p = LstmCellParams::zeros(3, 2);
    let x = t1(vec![1.0, -2.0, 0.5]);
    let h = Tensor::zeros(vec![2]);
    let c = Tensor::zeros(vec![2]);
    let (hn, cn) = lstm_cell(&tape, &x, &h, &c, &p).unwrap();
    assert_eq!(hn.to_vec(), vec![0.0, 0.0]);
    assert_eq!(cn.to_vec(), vec![0.0, 0.0]);
}

#[test]
fn lstm_cell_state_bound() {
    // |c'| <= |c| + 1 because f, i in (0,1) and g in (-1,1).
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tape = Tape::new();
    let p = LstmCellParams::init(3, 4, &mut rng);
    let x = t1(vec![2.0, -1.0, 3.0]);
    let c0: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let h = t1(vec![0.3, -0.4, 0.5, 0.1]);
    let c = t1(c0.clone());
    let (_, cn) = lstm_cell(&tape, &x, &h, &c, &p).unwrap();
    for (cv, c0v) in cn.to_vec().iter().zip(&c0) {
        assert!(cv.abs() <= c0v.abs() + 1.0 + 1e-12);
    }
}

#[test]
fn lstm_cell_matches_hand_unrolled_gates() {
    // 1-dim cell with hand-picked weights; expected values computed by
    // evaluating the five gate equations directly.
    let tape = Tape::new();
    let p = LstmCellParams {
        // rows: i, f, g, o
        w_x: Tensor::param(vec![4, 1], vec![0.5, -0.3, 0.8, 0.2]).unwrap(),
        w_h: Tensor::param(vec![4, 1], vec![0.1, 0.4, -0.6, 0.7]).unwrap(),
        b: Tensor::param(vec![4], vec![0.05, -0.1, 0.2, 0.0]).unwrap(),
    };
    let (x, h0, c0) = (0.9, -0.2, 0.3);
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let i = sig(0.5 * x + 0.1 * h0 + 0.05);
    let f = sig(-0.3 * x + 0.4 * h0 - 0.1);
    let g = (0.8 * x - 0.6 * h0 + 0.2).tanh();
    let o = sig(0.2 * x + 0.7 * h0);
    let c1 = f * c0 + i * g;
    let h1 = o * c1.tanh();

    let (hn, cn) = lstm_cell(&tape, &t1(vec![x]), &t1(vec![h0]), &t1(vec![c0]), &p).unwrap();
    assert!((hn.item() - h1).abs() < 1e-12);
    assert!((cn.item() - c1).abs() < 1e-12);
}

#[test]
fn backward_sum_gives_ones() {
    let tape = Tape::new();
    let x = p1(vec![1.0, 2.0, 3.0]);
    let loss = tape.sum(&x);
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn backward_dot_gives_other_operand() {
    let tape = Tape::new();
    let x = p1(vec![1.0, 2.0]);
    let y = t1(vec![5.0, 7.0]);
    let loss = tape.sum(&tape.mul(&x, &y).unwrap());
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![5.0, 7.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = p1(vec![1.0, 2.0]);
    let y = tape.scale(&x, 2.0);
    assert!(tape.backward(&y).is_err());
}

#[test]
fn backward_accumulates_across_calls() {
    let tape = Tape::new();
    let x = p1(vec![1.0, 2.0]);
    let loss = tape.sum(&x);
    tape.backward(&loss).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    x.zero_grad();
    tape.backward(&loss).unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
}

/// Builds a composite graph using every primitive, for finite-difference
/// verification.
fn composite_loss(tape: &Tape, w: &Tensor, m: &Tensor, table: &Tensor, s: &Tensor) -> Tensor {
    let wm = tape.matmul(m, w).unwrap(); // [3]
    let act = tape.tanh(&tape.relu(&wm));
    let sm = tape.softmax(&act, 0).unwrap();
    let lsm = tape.log_softmax(&act, 0).unwrap();
    let both = tape.concat(&[sm, lsm], 0).unwrap(); // [6]
    let rows = tape.gather_rows(table, &[0, 2]).unwrap(); // [2,2]
    let tr = tape.transpose(&rows).unwrap(); // [2,2]
    let masked = tape.mask_diag(&tr).unwrap();
    let msum = tape.sum(&tape.softmax(&masked, 0).unwrap());
    let sl = tape.slice_rows(&both, 1, 4).unwrap();
    let col = tape.slice_col(&tape.broadcast_cols(&tape.sigmoid(&sl), 3).unwrap(), 1).unwrap();
    let picked = tape.pick(&col, 2).unwrap();
    let scaled = tape.mul_scalar(&tape.scale(&tape.sum(&col), 0.5), s).unwrap();
    let e = tape.exp(&tape.scale(s, -1.0));
    let parts = tape.concat(&[msum, picked, scaled, e], 0).unwrap();
    tape.sum(&parts)
}

#[test]
fn backward_matches_finite_differences_on_composite_graph() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let w = Tensor::param_uniform(vec![4], 1.0, &mut rng);
        let m = Tensor::param_uniform(vec![3, 4], 1.0, &mut rng);
        let table = Tensor::param_uniform(vec![3, 2], 1.0, &mut rng);
        let s = Tensor::scalar_param(rng.gen_range(-0.5..0.5));
        let params = vec![
            ("w".to_string(), w.clone()),
            ("m".to_string(), m.clone()),
            ("table".to_string(), table.clone()),
            ("s".to_string(), s.clone()),
        ];
        let f = |tape: &Tape| Ok(composite_loss(tape, &w, &m, &table, &s));
        let report = grad_check(&f, &params, 1e-5, 1e-4).unwrap();
        assert!(
            report.pass(),
            "trial {trial}: max rel err {} in {:?}",
            report.max_rel_err,
            report.flagged
        );
    }
}

#[test]
fn grad_check_quadratic_is_exact() {
    let w = p1(vec![0.7, -1.3, 2.1]);
    let params = vec![("w".to_string(), w.clone())];
    let f = |tape: &Tape| tape.matmul(&tape.transpose(&w)?, &w);
    let report = grad_check(&f, &params, 1e-5, 1e-4).unwrap();
    // d(w^T w)/dw = 2w; a quadratic is exact under central differences.
    assert!(report.max_rel_err < 1e-9, "err {}", report.max_rel_err);
}

#[test]
fn grad_check_flags_corrupted_gradient() {
    let w = p1(vec![0.7, -1.3, 2.1]);
    let v = p1(vec![0.2, 0.4, 0.6]);
    let params = vec![("w".to_string(), w.clone()), ("v".to_string(), v.clone())];
    let f = |tape: &Tape| {
        let d = tape.mul(&w, &v)?;
        Ok(tape.sum(&d))
    };
    let mut grads = analytic_grads(&f, &params).unwrap();
    grads[1][0] += 0.5; // corrupt v
    let report = check_against_fd(&f, &params, &grads, 1e-5, 1e-4).unwrap();
    assert_eq!(report.flagged, vec!["v".to_string()]);
}

#[test]
fn grad_check_rejects_nondeterministic_function() {
    use std::cell::Cell;
    let calls = Cell::new(0.0);
    let f = move |_tape: &Tape| {
        calls.set(calls.get() + 1.0);
        Ok(Tensor::scalar(calls.get()))
    };
    let err = grad_check(&f, &[], 1e-5, 1e-4).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = Tensor::param_uniform(vec![3, 3], 1.0, &mut rng);
        let x = Tensor::param_uniform(vec![3], 1.0, &mut rng);
        let tape = Tape::new();
        let loss = tape.sum(&tape.softmax(&tape.matmul(&w, &x).unwrap(), 0).unwrap());
        tape.backward(&loss).unwrap();
        (loss.item(), w.grad().unwrap(), x.grad().unwrap())
    };
    let (l1, gw1, gx1) = run();
    let (l2, gw2, gx2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(gw1, gw2);
    assert_eq!(gx1, gx2);
}

#[test]
fn mask_diag_keeps_values_finite_and_zeroes_self_weight() {
    let tape = Tape::new();
    let x = Tensor::constant(vec![3, 3], (0..9).map(|i| i as f64).collect()).unwrap();
    let masked = tape.mask_diag(&x).unwrap();
    assert!(masked.is_finite());
    let p = tape.softmax(&masked, 0).unwrap();
    for j in 0..3 {
        assert_eq!(p.get(j, j), 0.0);
        let s: f64 = (0..3).map(|i| p.get(i, j)).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn softmax_columns_are_distributions(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let x = Tensor::constant(vec![rows, cols], data).unwrap();
        let tape = Tape::new();
        let p = tape.softmax(&x, 0).unwrap();
        for j in 0..cols {
            let mut s = 0.0;
            for i in 0..rows {
                let v = p.get(i, j);
                prop_assert!(v >= 0.0);
                s += v;
            }
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn ops_preserve_finiteness(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1usize..5);
        let a = Tensor::param_uniform(vec![n, n], 100.0, &mut rng);
        let b = Tensor::param_uniform(vec![n, n], 100.0, &mut rng);
        let tape = Tape::new();
        let m = tape.matmul(&a, &b).unwrap();
        let sm = tape.softmax(&m, 1).unwrap();
        let masked = tape.mask_diag(&m).unwrap();
        let acts = tape.concat(&[tape.relu(&m), tape.sigmoid(&m), tape.tanh(&m)], 0).unwrap();
        for t in [&m, &sm, &masked, &acts] {
            prop_assert!(t.is_finite());
        }
        let loss = tape.sum(&sm);
        tape.backward(&loss).unwrap();
        prop_assert!(a.grad().unwrap().iter().all(|g| g.is_finite()));
    }
}
