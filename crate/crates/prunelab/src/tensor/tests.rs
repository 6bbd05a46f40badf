use super::*;
use crate::tensor::check::{finite_difference_check, primitive_gradcheck};

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

#[test]
fn matmul_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(vec![2, 3]), false);
    let b = tape.leaf(Tensor::zeros(vec![3, 4]), false);
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.shape(c), &[2, 4]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(vec![2, 3]), false);
    let b = tape.leaf(Tensor::zeros(vec![4, 2]), false);
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn softmax_of_equal_row_is_uniform() {
    let mut tape = Tape::new();
    let a = tape.leaf(tensor(vec![1, 5], vec![3.7; 5]), false);
    let s = tape.row_softmax(a).unwrap();
    for v in tape.value(s).data() {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn silu_at_zero_is_zero() {
    let mut tape = Tape::new();
    let a = tape.leaf(tensor(vec![1, 1], vec![0.0]), false);
    let y = tape.silu(a).unwrap();
    assert_eq!(tape.value(y).data()[0], 0.0);
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut tape = Tape::new();
    let w = tape.leaf(tensor(vec![2, 3], vec![0.3, -1.2, 4.0, 0.0, 2.5, -0.7]), true);
    let loss = tape.sum(w).unwrap();
    let grads = tape.gradients(loss).unwrap();
    assert_eq!(grads[&w].data(), &[1.0; 6]);
}

#[test]
fn gradient_of_half_square() {
    // L = 0.5·w² at w = 3 → dL/dw = 3.
    let mut tape = Tape::new();
    let w = tape.leaf(tensor(vec![1], vec![3.0]), true);
    let sq = tape.mul(w, w).unwrap();
    let half = tape.scale(sq, 0.5).unwrap();
    let loss = tape.sum(half).unwrap();
    let grads = tape.gradients(loss).unwrap();
    assert_eq!(grads[&w].data(), &[3.0]);
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    // loss = -log softmax(logits)[target] on a 1×4 row.
    let logits = tensor(vec![1, 4], vec![0.2, -1.1, 0.7, 0.05]);
    let target = 2usize;
    let build = |tape: &mut Tape, x: NodeId| {
        let lp = tape.row_log_softmax(x)?;
        let picked = tape.take_per_row(lp, &[target])?;
        let neg = tape.neg(picked)?;
        tape.sum(neg)
    };

    let mut tape = Tape::new();
    let x = tape.leaf(logits.clone(), true);
    let loss = build(&mut tape, x).unwrap();
    tape.backward(loss).unwrap();
    let analytic = tape.grad(x).to_vec();

    // Closed form: softmax − one-hot.
    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    for (i, g) in analytic.iter().enumerate() {
        let expected = exps[i] / z - if i == target { 1.0 } else { 0.0 };
        assert!((g - expected).abs() <= 1e-12, "slot {i}: {g} vs {expected}");
    }

    // And against central differences at step 1e-6.
    let err = finite_difference_check(build, &logits, 1e-6).unwrap();
    assert!(err <= 1e-6, "rel err {err}");
}

#[test]
fn fd_check_sum_of_squares() {
    let x = tensor(vec![3], vec![0.4, -1.3, 2.2]);
    let err = finite_difference_check(
        |tape, x| {
            let sq = tape.mul(x, x)?;
            tape.sum(sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-7, "rel err {err}");
}

#[test]
fn fd_check_constant_function_is_exactly_zero() {
    let x = tensor(vec![3], vec![1.0, 2.0, 3.0]);
    let c = tensor(vec![1], vec![5.0]);
    let err = finite_difference_check(
        |tape, _x| {
            let cl = tape.leaf(c.clone(), false);
            tape.sum(cl)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn fd_check_masked_nll_two_tokens() {
    // Masked-mean NLL over a 2-row toy logit matrix, second row masked out.
    let logits = tensor(vec![2, 3], vec![0.4, -0.2, 1.0, -0.5, 0.3, 0.1]);
    let targets = [2usize, 0usize];
    let mask = [true, false];
    let err = finite_difference_check(
        |tape, x| {
            let lp = tape.row_log_softmax(x)?;
            let picked = tape.take_per_row(lp, &targets)?;
            let nll = tape.neg(picked)?;
            tape.masked_mean(nll, &mask)
        },
        &logits,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-5, "rel err {err}");
}

#[test]
fn every_primitive_passes_gradcheck() {
    for &op in Op::all() {
        for seed in 0..3 {
            let err = primitive_gradcheck(op, seed).unwrap();
            assert!(err <= 1e-5, "{op:?} seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn backward_is_deterministic_and_rezeroes() {
    let mut tape = Tape::new();
    let x = tape.leaf(tensor(vec![2, 2], vec![0.5, -0.25, 1.5, 2.0]), true);
    let w = tape.leaf(tensor(vec![2, 2], vec![0.1, 0.2, -0.3, 0.4]), true);
    let y = tape.matmul(x, w).unwrap();
    let s = tape.row_softmax(y).unwrap();
    let shifted = tape_abs(&mut tape, s);
    let l = tape.log(shifted).unwrap();
    let loss = tape.sum(l).unwrap();

    let g1 = tape.gradients(loss).unwrap();
    let g2 = tape.gradients(loss).unwrap();
    // Identical, not doubled: slots are zeroed between passes.
    assert_eq!(g1[&x].data(), g2[&x].data());
    assert_eq!(g1[&w].data(), g2[&w].data());
}

// softmax outputs are in (0,1); shift away from zero so log is safe.
fn tape_abs(tape: &mut Tape, a: NodeId) -> NodeId {
    let half = Tensor::new(
        tape.shape(a).to_vec(),
        vec![0.5; tape.value(a).len()],
    )
    .unwrap();
    let h = tape.leaf(half, false);
    tape.add(a, h).unwrap()
}

#[test]
fn non_finite_output_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.leaf(tensor(vec![1], vec![0.0]), false);
    let err = tape.log(a).unwrap_err();
    assert!(matches!(err, TensorError::NonFinite { .. }));
}

#[test]
fn non_scalar_loss_is_an_error() {
    let mut tape = Tape::new();
    let a = tape.leaf(tensor(vec![2], vec![1.0, 2.0]), true);
    let err = tape.backward(a).unwrap_err();
    assert!(matches!(err, TensorError::NonScalarLoss { .. }));
}

#[test]
fn masked_mean_requires_a_true_entry() {
    let mut tape = Tape::new();
    let a = tape.leaf(tensor(vec![3], vec![1.0, 2.0, 3.0]), false);
    assert!(tape.masked_mean(a, &[false, false, false]).is_err());
}

#[test]
fn causal_softmax_rows_are_prefix_distributions() {
    let mut tape = Tape::new();
    let a = tape.leaf(tensor(vec![3, 3], vec![1.0, 9.0, 9.0, 0.3, 0.7, 9.0, 0.1, 0.2, 0.3]), false);
    let s = tape.causal_softmax(a).unwrap();
    let d = tape.value(s).data();
    assert_eq!(d[0], 1.0); // row 0 attends only to col 0
    assert_eq!(&d[1..3], &[0.0, 0.0]);
    assert!((d[3] + d[4] - 1.0).abs() < 1e-15 && d[5] == 0.0);
    assert!((d[6] + d[7] + d[8] - 1.0).abs() < 1e-15);
}
