//! Finite-difference checks for every differentiable op plus the
//! algebraic properties of softmax and cross entropy.

use linesight_autodiff::{finite_diff_check, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Reduces any tensor to a scalar with non-uniform weights so that every
/// output coordinate contributes a distinct sensitivity.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> linesight_autodiff::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = tape.value(v).dims().to_vec();
    let w = tape.constant(random(&mut rng, &dims));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn check(name: &str, x: &Tensor, f: impl Fn(&mut Tape, Var) -> linesight_autodiff::Result<Var>) {
    let err = finite_diff_check(f, x, EPS).unwrap();
    assert!(err < TOL, "{name}: max relative error {err:e}");
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..5u64 {
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 2]);
        let same = random(&mut rng, &[3, 4]);
        let row = random(&mut rng, &[4]);
        let gamma = random(&mut rng, &[4]);
        let beta = random(&mut rng, &[4]);
        let sq = random(&mut rng, &[4, 4]);

        check("matmul lhs", &a, |t, v| {
            let c = t.constant(b.clone());
            let y = t.matmul(v, c)?;
            weighted_sum(t, y, trial)
        });
        check("matmul rhs", &b, |t, v| {
            let c = t.constant(a.clone());
            let y = t.matmul(c, v)?;
            weighted_sum(t, y, trial)
        });
        check("transpose", &a, |t, v| {
            let y = t.transpose(v)?;
            weighted_sum(t, y, trial)
        });
        check("add/sub/mul", &a, |t, v| {
            let c = t.constant(same.clone());
            let s = t.add(v, c)?;
            let d = t.sub(s, c)?;
            let m = t.mul(d, v)?;
            weighted_sum(t, m, trial)
        });
        check("scale/add_scalar", &a, |t, v| {
            let s = t.scale(v, -1.7);
            let s = t.add_scalar(s, 0.3);
            weighted_sum(t, s, trial)
        });
        check("gelu", &a, |t, v| {
            let y = t.gelu(v);
            weighted_sum(t, y, trial)
        });
        check("add_row (matrix)", &a, |t, v| {
            let r = t.constant(row.clone());
            let y = t.add_row(v, r)?;
            weighted_sum(t, y, trial)
        });
        check("add_row (bias)", &row, |t, v| {
            let m = t.constant(a.clone());
            let y = t.add_row(m, v)?;
            weighted_sum(t, y, trial)
        });
        check("softmax", &a, |t, v| {
            let y = t.softmax(v);
            weighted_sum(t, y, trial)
        });
        check("causal_softmax", &sq, |t, v| {
            let y = t.causal_softmax(v)?;
            weighted_sum(t, y, trial)
        });
        check("layer_norm x", &a, |t, v| {
            let g = t.constant(gamma.clone());
            let bt = t.constant(beta.clone());
            let y = t.layer_norm(v, g, bt, 1e-5)?;
            weighted_sum(t, y, trial)
        });
        check("layer_norm gamma", &gamma, |t, v| {
            let x = t.constant(a.clone());
            let bt = t.constant(beta.clone());
            let y = t.layer_norm(x, v, bt, 1e-5)?;
            weighted_sum(t, y, trial)
        });
        check("layer_norm beta", &beta, |t, v| {
            let x = t.constant(a.clone());
            let g = t.constant(gamma.clone());
            let y = t.layer_norm(x, g, v, 1e-5)?;
            weighted_sum(t, y, trial)
        });
        check("embedding", &a, |t, v| {
            let y = t.embedding(v, &[2, 0, 2, 1])?;
            weighted_sum(t, y, trial)
        });
        check("slice/concat", &a, |t, v| {
            let l = t.slice_cols(v, 0, 1)?;
            let r = t.slice_cols(v, 1, 3)?;
            let c = t.concat_cols(&[r, l])?;
            let s = t.concat_rows(&[c, c])?;
            weighted_sum(t, s, trial)
        });
        check("mean", &a, |t, v| {
            let y = t.gelu(v);
            Ok(t.mean(y))
        });
        check("masked_cross_entropy", &a, |t, v| {
            t.masked_cross_entropy(v, &[1, 3, 0], &[true, false, true])
        });
    }
}

#[test]
fn embedding_repeat_accumulates_twice() {
    // ids=[2,2]: the finite difference on a row-2 entry sees both copies.
    let table = Tensor::new(&[3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
    let f = |t: &mut Tape, v: Var| -> linesight_autodiff::Result<Var> {
        let y = t.embedding(v, &[2, 2])?;
        Ok(t.sum(y))
    };
    let mut tape = Tape::new();
    let leaf = tape.param(table.clone());
    let out = f(&mut tape, leaf).unwrap();
    let g = tape.backward(out).unwrap();
    let analytic = g.get(leaf).unwrap().data()[4];
    let h = 1e-5;
    let eval = |x: Tensor| {
        let mut tape = Tape::new();
        let leaf = tape.constant(x);
        let out = f(&mut tape, leaf).unwrap();
        tape.value(out).item().unwrap()
    };
    let numeric = (eval(table.with_value(4, 0.5 + h)) - eval(table.with_value(4, 0.5 - h))) / (2.0 * h);
    assert!((numeric - 2.0).abs() < 1e-9);
    assert_eq!(analytic, 2.0);
}

#[test]
fn two_layer_net_cross_entropy_gradcheck() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let input = random(&mut rng, &[5, 6]);
    let w1 = random(&mut rng, &[6, 8]);
    let b1 = random(&mut rng, &[8]);
    let w2 = random(&mut rng, &[8, 7]);
    let targets = [0, 6, 3, 3, 1];
    let mask = [true, true, false, true, true];
    let net = |t: &mut Tape, w1v: Var, w2v: Var| -> linesight_autodiff::Result<Var> {
        let x = t.constant(input.clone());
        let b = t.constant(b1.clone());
        let h = t.matmul(x, w1v)?;
        let h = t.add_row(h, b)?;
        let h = t.gelu(h);
        let logits = t.matmul(h, w2v)?;
        t.masked_cross_entropy(logits, &targets, &mask)
    };
    let err1 = finite_diff_check(
        |t, v| {
            let w2v = t.constant(w2.clone());
            net(t, v, w2v)
        },
        &w1,
        EPS,
    )
    .unwrap();
    let err2 = finite_diff_check(
        |t, v| {
            let w1v = t.constant(w1.clone());
            net(t, w1v, v)
        },
        &w2,
        EPS,
    )
    .unwrap();
    assert!(err1 < TOL && err2 < TOL, "{err1:e} {err2:e}");
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[4, 5]);
    let w = random(&mut rng, &[5, 5]);
    let run = || {
        let mut t = Tape::new();
        let xv = t.param(x.clone());
        let wv = t.param(w.clone());
        let h = t.matmul(xv, wv).unwrap();
        let s = t.softmax(h);
        let l = t.masked_cross_entropy(s, &[0, 1, 2, 3], &[true; 4]).unwrap();
        let g = t.backward(l).unwrap();
        (g.get(xv).unwrap().clone(), g.get(wv).unwrap().clone())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert!(a1.bit_eq(&a2) && b1.bit_eq(&b2));
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        row in prop::collection::vec(-50.0f64..50.0, 1..12),
        shift in -100.0f64..100.0,
    ) {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(&row));
        let shifted = t.constant(Tensor::vector(&row.iter().map(|v| v + shift).collect::<Vec<_>>()));
        let a = t.softmax(x);
        let b = t.softmax(shifted);
        let sum: f64 = t.value(a).data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-12);
        prop_assert!(t.value(a).data().iter().all(|&p| p >= 0.0));
        prop_assert!(t.value(a).max_abs_diff(t.value(b)) < 1e-12);
    }

    #[test]
    fn masked_targets_never_change_the_loss(
        seed in 0u64..1000,
        flips in prop::collection::vec(0usize..9, 6),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&mut rng, &[6, 9]);
        let mask = [true, false, true, false, false, true];
        let targets = [1, 2, 3, 4, 5, 6];
        let mut other = targets;
        for (i, f) in flips.iter().enumerate() {
            if !mask[i] {
                other[i] = *f;
            }
        }
        let mut t = Tape::new();
        let l = t.constant(logits);
        let a = t.masked_cross_entropy(l, &targets, &mask).unwrap();
        let b = t.masked_cross_entropy(l, &other, &mask).unwrap();
        prop_assert_eq!(t.value(a).item().unwrap().to_bits(), t.value(b).item().unwrap().to_bits());
    }
}
