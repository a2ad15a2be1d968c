use super::*;
use approx::assert_relative_eq;
use ndarray::array;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Triple-loop reference product, written independently of ndarray's dot.
fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k) = a.dim();
    let m = b.ncols();
    let mut out = Mat::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[(i, l)] * b[(l, j)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

#[test]
fn matmul_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (n, k, m) in [(1, 1, 1), (2, 3, 4), (5, 2, 3), (4, 4, 4)] {
        let a = random_mat(&mut rng, n, k);
        let b = random_mat(&mut rng, k, m);
        let expected = naive_matmul(&a, &b);
        let mut tape = Tape::new();
        let ta = tape.constant(a);
        let tb = tape.constant(b);
        let tc = tape.matmul(ta, tb);
        for (got, want) in tape.value(tc).iter().zip(expected.iter()) {
            assert_relative_eq!(got, want, max_relative = 1e-12);
        }
    }
}

#[test]
fn softmax_closed_form() {
    // softmax([0, ln 2]) = [1/3, 2/3].
    let mut tape = Tape::new();
    let x = tape.constant(array![[0.0, std::f64::consts::LN_2]]);
    let p = tape.softmax_rows(x);
    assert_relative_eq!(tape.value(p)[(0, 0)], 1.0 / 3.0, max_relative = 1e-14);
    assert_relative_eq!(tape.value(p)[(0, 1)], 2.0 / 3.0, max_relative = 1e-14);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::new();
    let x = tape.constant(random_mat(&mut rng, 6, 5));
    let p = tape.softmax_rows(x);
    for row in tape.value(p).rows() {
        assert_relative_eq!(row.sum(), 1.0, max_relative = 1e-12);
        assert!(row.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn cross_entropy_half_probability_is_one_bit() {
    // -log2(0.5) = 1 exactly.
    let mut tape = Tape::new();
    let z = tape.constant(array![[0.5, 0.5]]);
    let y = array![[1.0, 0.0]];
    let loss = tape.cross_entropy(z, &y, &[1.0, 1.0]);
    assert_relative_eq!(tape.scalar_value(loss), 1.0, max_relative = 1e-14);
}

#[test]
fn cross_entropy_skips_unlabeled_rows_and_applies_weights() {
    let mut tape = Tape::new();
    let z = tape.constant(array![[0.25, 0.75], [0.9, 0.1], [0.5, 0.5]]);
    // Middle row all-zero: unlabeled, contributes nothing.
    let y = array![[0.0, 1.0], [0.0, 0.0], [1.0, 0.0]];
    let loss = tape.cross_entropy(z, &y, &[2.0, 3.0]);
    let expected = -3.0 * 0.75f64.log2() - 2.0 * 0.5f64.log2();
    assert_relative_eq!(tape.scalar_value(loss), expected, max_relative = 1e-13);
}

#[test]
fn cross_entropy_clamps_and_counts() {
    let mut tape = Tape::new();
    let z = tape.leaf(array![[0.0, 1.0]], true);
    let y = array![[1.0, 0.0]];
    let loss = tape.cross_entropy(z, &y, &[1.0, 1.0]);
    assert_eq!(tape.clamp_events(), 1);
    assert!(tape.scalar_value(loss).is_finite());
    tape.backward(loss);
    // Clamped entry is flat: gradient zero, not an enormous spike.
    assert_eq!(tape.grad(z).unwrap()[(0, 0)], 0.0);
}

#[test]
fn gather_rows_duplicating_a_row_doubles_its_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(array![[1.0], [2.0]], true);
    let g = tape.gather_rows(x, &[0, 0, 1]);
    let s = tape.sum(g);
    tape.backward(s);
    let grad = tape.grad(x).unwrap();
    assert_eq!(grad[(0, 0)], 2.0);
    assert_eq!(grad[(1, 0)], 1.0);
}

#[test]
fn backward_twice_doubles_accumulated_gradients() {
    let mut tape = Tape::new();
    let x = tape.leaf(array![[3.0, -1.0]], true);
    let s = tape.sum(x);
    tape.backward(s);
    let first = tape.grad(x).unwrap().clone();
    tape.backward(s);
    let second = tape.grad(x).unwrap();
    for (a, b) in first.iter().zip(second.iter()) {
        assert_eq!(*b, 2.0 * *a);
    }
    tape.zero_grads();
    assert!(tape.grad(x).is_none());
}

#[test]
fn grad_check_mse_of_sigmoid_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random_mat(&mut rng, 3, 2);
    let b = random_mat(&mut rng, 1, 2);
    let x = random_mat(&mut rng, 4, 3);
    let y = random_mat(&mut rng, 4, 2);
    let report = grad_check(
        &[w, b],
        move |tape, params| {
            let tx = tape.constant(x.clone());
            let h = tape.matmul(tx, params[0]);
            let h = tape.add_broadcast(h, params[1]);
            let z = tape.sigmoid(h);
            tape.mse(z, &y)
        },
        1e-5,
    );
    assert_eq!(report.entries_checked, 8);
    assert!(
        report.max_rel_error < 1e-6,
        "rel error {}",
        report.max_rel_error
    );
}

#[test]
fn grad_check_softmax_cross_entropy_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = random_mat(&mut rng, 3, 3);
    let x = random_mat(&mut rng, 5, 3);
    let mut y = Mat::zeros((5, 3));
    for (j, mut row) in y.rows_mut().into_iter().enumerate() {
        row[j % 3] = 1.0;
    }
    let report = grad_check(
        &[w],
        move |tape, params| {
            let tx = tape.constant(x.clone());
            let h = tape.matmul(tx, params[0]);
            let p = tape.softmax_rows(h);
            tape.cross_entropy(p, &y, &[1.0, 0.5, 2.0])
        },
        1e-5,
    );
    assert!(
        report.max_rel_error < 1e-6,
        "rel error {}",
        report.max_rel_error
    );
}

#[test]
fn grad_check_broadcast_pool_and_normalize() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random_mat(&mut rng, 4, 3);
    let gate = random_mat(&mut rng, 1, 3);
    let y = random_mat(&mut rng, 4, 3).mapv(f64::abs);
    let report = grad_check(
        &[a, gate],
        move |tape, params| {
            let gated = tape.mul_broadcast(params[0], params[1]);
            let pos = tape.sigmoid(gated);
            let z = tape.normalize_rows(pos);
            let pooled = tape.global_avg_pool(z);
            let scaled = tape.mul_const(pooled, 3.0);
            let back = tape.mul_broadcast(z, scaled);
            tape.mse(back, &y)
        },
        1e-5,
    );
    assert!(
        report.max_rel_error < 1e-6,
        "rel error {}",
        report.max_rel_error
    );
}

#[test]
fn grad_check_concat_gather_upsample_mix() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = random_mat(&mut rng, 4, 2);
    let b = random_mat(&mut rng, 4, 3);
    let y = random_mat(&mut rng, 4, 5);
    let report = grad_check(
        &[a, b],
        move |tape, params| {
            let cat = tape.concat_cols(&[params[0], params[1]]);
            let coarse = tape.gather_rows(cat, &[0, 2]);
            let fine = tape.nearest_upsample(coarse, &[0, 0, 1, 1]);
            tape.mse(fine, &y)
        },
        1e-5,
    );
    assert!(
        report.max_rel_error < 1e-6,
        "rel error {}",
        report.max_rel_error
    );
}

#[test]
fn grad_check_norm_and_scalar_division() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let w = random_mat(&mut rng, 1, 4).mapv(|v| v + 2.0);
    let x = random_mat(&mut rng, 3, 4);
    let report = grad_check(
        &[w, x],
        move |tape, params| {
            let gated = tape.mul_broadcast(params[1], params[0]);
            let total = tape.sum(gated);
            let norm = tape.l2_norm(params[0]);
            tape.div(total, norm)
        },
        1e-6,
    );
    assert!(
        report.max_rel_error < 1e-5,
        "rel error {}",
        report.max_rel_error
    );
}

#[test]
fn relu_gradient_masks_negative_inputs() {
    let mut tape = Tape::new();
    let x = tape.leaf(array![[-2.0, 3.0]], true);
    let r = tape.relu(x);
    let s = tape.sum(r);
    tape.backward(s);
    let g = tape.grad(x).unwrap();
    assert_eq!(g[(0, 0)], 0.0);
    assert_eq!(g[(0, 1)], 1.0);
}

#[test]
fn global_avg_pool_returns_column_means() {
    let mut tape = Tape::new();
    let x = tape.constant(array![[1.0, 2.0], [3.0, 6.0]]);
    let p = tape.global_avg_pool(x);
    assert_eq!(tape.value(p).dim(), (1, 2));
    assert_relative_eq!(tape.value(p)[(0, 0)], 2.0);
    assert_relative_eq!(tape.value(p)[(0, 1)], 4.0);
}

#[test]
fn mse_closed_form() {
    let mut tape = Tape::new();
    let z = tape.constant(array![[1.0, 0.0], [0.0, 1.0]]);
    let y = array![[0.0, 0.0], [0.0, 0.0]];
    let loss = tape.mse(z, &y);
    // (1 + 1) / 2 rows = 1.
    assert_relative_eq!(tape.scalar_value(loss), 1.0);
}

#[test]
#[should_panic(expected = "matmul shape mismatch")]
fn matmul_rejects_mismatched_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Mat::zeros((2, 3)));
    let b = tape.constant(Mat::zeros((2, 3)));
    tape.matmul(a, b);
}

#[test]
#[should_panic(expected = "out of range")]
fn gather_rows_rejects_out_of_range_index() {
    let mut tape = Tape::new();
    let a = tape.constant(Mat::zeros((2, 2)));
    tape.gather_rows(a, &[5]);
}
