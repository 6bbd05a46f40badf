//! Gradient verification against central finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NodeId, Op, Result, Tape, Tensor, TensorError};

/// Compare the analytic gradient of a scalar function against central
/// finite differences, coordinate by coordinate.
///
/// `f` builds the scalar loss on a fresh tape from a single leaf; it is
/// re-run twice per coordinate at x ± step. Returns the max over
/// coordinates of |analytic − numeric| / max(1, |analytic|).
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    assert!(step > 0.0, "finite_difference_check: step must be > 0");
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(t.clone(), false);
        let loss = f(&mut tape, leaf)?;
        let v = tape.value(loss);
        if !v.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: v.shape().to_vec(),
            });
        }
        let out = v.item();
        if !out.is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_difference_check",
            });
        }
        Ok(out)
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, leaf)?;
    tape.backward(loss)?;
    let analytic = tape.grad(leaf).to_vec();

    let mut max_err: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

/// Finite-difference check of one primitive from the [`Op`] catalog on a
/// seeded random instance. Returns the max relative error over all
/// differentiable input slots of the op.
pub fn primitive_gradcheck(op: Op, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let step = 1e-5;
    let mut worst: f64 = 0.0;

    // Weight tensors turn structured outputs into a non-degenerate
    // scalar (a plain sum of softmax rows is constant).
    fn randt(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Tensor::new(shape, data).expect("shape/data agree")
    }
    let weighted_sum = |tape: &mut Tape, id: NodeId, w: &Tensor| -> Result<NodeId> {
        let wl = tape.leaf(w.clone(), false);
        let prod = tape.mul(id, wl)?;
        tape.sum(prod)
    };

    match op {
        Op::MatMul => {
            let a = randt(&mut rng, vec![3, 4]);
            let b = randt(&mut rng, vec![4, 2]);
            let w = randt(&mut rng, vec![3, 2]);
            worst = worst.max(finite_difference_check(
                |t, x| {
                    let bl = t.leaf(b.clone(), false);
                    let y = t.matmul(x, bl)?;
                    weighted_sum(t, y, &w)
                },
                &a,
                step,
            )?);
            worst = worst.max(finite_difference_check(
                |t, x| {
                    let al = t.leaf(a.clone(), false);
                    let y = t.matmul(al, x)?;
                    weighted_sum(t, y, &w)
                },
                &b,
                step,
            )?);
        }
        Op::MatMulNt => {
            let a = randt(&mut rng, vec![3, 4]);
            let b = randt(&mut rng, vec![2, 4]);
            let w = randt(&mut rng, vec![3, 2]);
            worst = worst.max(finite_difference_check(
                |t, x| {
                    let bl = t.leaf(b.clone(), false);
                    let y = t.matmul_nt(x, bl)?;
                    weighted_sum(t, y, &w)
                },
                &a,
                step,
            )?);
            worst = worst.max(finite_difference_check(
                |t, x| {
                    let al = t.leaf(a.clone(), false);
                    let y = t.matmul_nt(al, x)?;
                    weighted_sum(t, y, &w)
                },
                &b,
                step,
            )?);
        }
        Op::Add => {
            let a = randt(&mut rng, vec![3, 4]);
            let b = randt(&mut rng, vec![3, 4]);
            let w = randt(&mut rng, vec![3, 4]);
            for side in 0..2 {
                let (fixed, var) = if side == 0 { (&b, &a) } else { (&a, &b) };
                let fixed = fixed.clone();
                let first = side == 0;
                worst = worst.max(finite_difference_check(
                    |t, x| {
                        let fl = t.leaf(fixed.clone(), false);
                        let y = if first { t.add(x, fl)? } else { t.add(fl, x)? };
                        weighted_sum(t, y, &w)
                    },
                    var,
                    step,
                )?);
            }
        }
        Op::AddBias => {
            let a = randt(&mut rng, vec![3, 4]);
            let b = randt(&mut rng, vec![4]);
            let w = randt(&mut rng, vec![3, 4]);
            worst = worst.max(finite_difference_check(
                |t, x| {
                    let bl = t.leaf(b.clone(), false);
                    let y = t.add_bias(x, bl)?;
                    weighted_sum(t, y, &w)
                },
                &a,
                step,
            )?);
            worst = worst.max(finite_difference_check(
                |t, x| {
                    let al = t.leaf(a.clone(), false);
                    let y = t.add_bias(al, x)?;
                    weighted_sum(t, y, &w)
                },
                &b,
                step,
            )?);
        }
        Op::Mul => {
            let a = randt(&mut rng, vec![3, 4]);
            let b = randt(&mut rng, vec![3, 4]);
            let w = randt(&mut rng, vec![3, 4]);
            worst = worst.max(finite_difference_check(
                |t, x| {
                    let bl = t.leaf(b.clone(), false);
                    let y = t.mul(x, bl)?;
                    weighted_sum(t, y, &w)
                },
                &a,
                step,
            )?);
            worst = worst.max(finite_difference_check(
                |t, x| {
                    let al = t.leaf(a.clone(), false);
                    let y = t.mul(al, x)?;
                    weighted_sum(t, y, &w)
                },
                &b,
                step,
            )?);
        }
        Op::MulColMask => {
            let a = randt(&mut rng, vec![3, 4]);
            let mut mask = vec![1.0; 4];
            for m in mask.iter_mut().skip(1) {
                if rng.gen_bool(0.5) {
                    *m = 0.0;
                }
            }
            let w = randt(&mut rng, vec![3, 4]);
            worst = worst.max(finite_difference_check(
                |t, x| {
                    let y = t.mul_col_mask(x, &mask)?;
                    weighted_sum(t, y, &w)
                },
                &a,
                step,
            )?);
        }
        Op::Scale => {
            let a = randt(&mut rng, vec![3, 4]);
            let c = rng.gen_range(-2.0..2.0);
            let w = randt(&mut rng, vec![3, 4]);
            worst = worst.max(finite_difference_check(
                |t, x| {
                    let y = t.scale(x, c)?;
                    weighted_sum(t, y, &w)
                },
                &a,
                step,
            )?);
        }
        Op::Neg | Op::Silu | Op::Log => {
            let mut a = randt(&mut rng, vec![3, 4]);
            if op == Op::Log {
                for v in a.data_mut() {
                    *v = v.abs() + 0.5;
                }
            }
            let w = randt(&mut rng, vec![3, 4]);
            worst = worst.max(finite_difference_check(
                |t, x| {
                    let y = match op {
                        Op::Neg => t.neg(x)?,
                        Op::Silu => t.silu(x)?,
                        Op::Log => t.log(x)?,
                        _ => unreachable!(),
                    };
                    weighted_sum(t, y, &w)
                },
                &a,
                step,
            )?);
        }
        Op::Sum => {
            let a = randt(&mut rng, vec![3, 4]);
            worst = worst.max(finite_difference_check(|t, x| t.sum(x), &a, step)?);
        }
        Op::RowSoftmax | Op::RowLogSoftmax => {
            let a = randt(&mut rng, vec![3, 5]);
            let w = randt(&mut rng, vec![3, 5]);
            worst = worst.max(finite_difference_check(
                |t, x| {
                    let y = if op == Op::RowSoftmax {
                        t.row_softmax(x)?
                    } else {
                        t.row_log_softmax(x)?
                    };
                    weighted_sum(t, y, &w)
                },
                &a,
                step,
            )?);
        }
        Op::CausalSoftmax => {
            let a = randt(&mut rng, vec![4, 4]);
            let w = randt(&mut rng, vec![4, 4]);
            worst = worst.max(finite_difference_check(
                |t, x| {
                    let y = t.causal_softmax(x)?;
                    weighted_sum(t, y, &w)
                },
                &a,
                step,
            )?);
        }
        Op::RmsNorm => {
            let x0 = randt(&mut rng, vec![3, 6]);
            let g0 = randt(&mut rng, vec![6]);
            let w = randt(&mut rng, vec![3, 6]);
            worst = worst.max(finite_difference_check(
                |t, x| {
                    let gl = t.leaf(g0.clone(), false);
                    let y = t.rms_norm(x, gl)?;
                    weighted_sum(t, y, &w)
                },
                &x0,
                step,
            )?);
            worst = worst.max(finite_difference_check(
                |t, g| {
                    let xl = t.leaf(x0.clone(), false);
                    let y = t.rms_norm(xl, g)?;
                    weighted_sum(t, y, &w)
                },
                &g0,
                step,
            )?);
        }
        Op::Embedding => {
            let table = randt(&mut rng, vec![5, 3]);
            let ids: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            let w = randt(&mut rng, vec![4, 3]);
            worst = worst.max(finite_difference_check(
                |t, x| {
                    let y = t.embedding(x, &ids)?;
                    weighted_sum(t, y, &w)
                },
                &table,
                step,
            )?);
        }
        Op::SliceCols => {
            let a = randt(&mut rng, vec![3, 6]);
            let start = rng.gen_range(0..4);
            let len = rng.gen_range(1..=(6 - start));
            let w = randt(&mut rng, vec![3, len]);
            worst = worst.max(finite_difference_check(
                |t, x| {
                    let y = t.slice_cols(x, start, len)?;
                    weighted_sum(t, y, &w)
                },
                &a,
                step,
            )?);
        }
        Op::ConcatCols => {
            // x is routed twice to exercise gradient fan-in.
            let a = randt(&mut rng, vec![3, 2]);
            let fixed = randt(&mut rng, vec![3, 3]);
            let w = randt(&mut rng, vec![3, 7]);
            worst = worst.max(finite_difference_check(
                |t, x| {
                    let fl = t.leaf(fixed.clone(), false);
                    let y = t.concat_cols(&[x, fl, x])?;
                    weighted_sum(t, y, &w)
                },
                &a,
                step,
            )?);
        }
        Op::MaskedMean => {
            let a = randt(&mut rng, vec![7]);
            let mut mask: Vec<bool> = (0..7).map(|_| rng.gen_bool(0.5)).collect();
            mask[rng.gen_range(0..7)] = true;
            worst = worst.max(finite_difference_check(
                |t, x| t.masked_mean(x, &mask),
                &a,
                step,
            )?);
        }
        Op::TakePerRow => {
            let a = randt(&mut rng, vec![4, 5]);
            let idx: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            let w = randt(&mut rng, vec![4]);
            worst = worst.max(finite_difference_check(
                |t, x| {
                    let y = t.take_per_row(x, &idx)?;
                    weighted_sum(t, y, &w)
                },
                &a,
                step,
            )?);
        }
        Op::Rope => {
            let a = randt(&mut rng, vec![4, 8]);
            let w = randt(&mut rng, vec![4, 8]);
            worst = worst.max(finite_difference_check(
                |t, x| {
                    let y = t.rope(x, 4, 100.0)?;
                    weighted_sum(t, y, &w)
                },
                &a,
                step,
            )?);
        }
    }
    Ok(worst)
}
