use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

fn weighted_sum(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let y = tape.mul(x, w)?;
    tape.sum(y, None)
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::identity(2));
    let m = tape.constant(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let out = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(Tensor::matrix(&[vec![1.0, 2.0]]).unwrap());
    let b = tape.constant(Tensor::matrix(&[vec![3.0], vec![4.0]]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[1, 1]);
    assert_eq!(tape.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Dimension(msg)) => {
            assert!(msg.contains("[2, 3]"), "{msg}");
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let b = [[2.0, 3.0], [4.0, 5.0]];
    // Independent oracle: sum(A B) evaluated with plain loops.
    let f = |a: [[f64; 2]; 2]| {
        let mut s = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..2 {
                    s += a[i][p] * b[p][j];
                }
            }
        }
        s
    };
    let a0 = [[1.0, 0.0], [0.0, 1.0]];
    let h = 1e-6;
    let mut fd = [[0.0; 2]; 2];
    for i in 0..2 {
        for p in 0..2 {
            let mut up = a0;
            let mut dn = a0;
            up[i][p] += h;
            dn[i][p] -= h;
            fd[i][p] = (f(up) - f(dn)) / (2.0 * h);
        }
    }
    let frozen = [[5.0, 9.0], [5.0, 9.0]];
    for i in 0..2 {
        for p in 0..2 {
            assert!((fd[i][p] - frozen[i][p]).abs() < 1e-6);
        }
    }

    let mut tape = Tape::new();
    let a = tape.param(Tensor::identity(2));
    let bv = tape.constant(Tensor::matrix(&[vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap());
    let c = tape.matmul(a, bv).unwrap();
    let loss = tape.sum(c, None).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(a).unwrap().data(), &[5.0, 9.0, 5.0, 9.0]);
}

#[test]
fn batched_matmul_layouts_agree_with_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a2 = random_tensor(&mut rng, &[3, 4]);
    let b3 = random_tensor(&mut rng, &[5, 4, 2]);
    let mut tape = Tape::new();
    let a = tape.constant(a2.clone());
    let b = tape.constant(b3.clone());
    let c = tape.matmul(a, b).unwrap();
    let cv = tape.value(c);
    assert_eq!(cv.shape(), &[5, 3, 2]);
    for k in 0..5 {
        for i in 0..3 {
            for j in 0..2 {
                let want: f64 = (0..4).map(|p| a2.get(&[i, p]) * b3.get(&[k, p, j])).sum();
                assert!((cv.get(&[k, i, j]) - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let z = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let s = tape.add(a, z).unwrap();
    assert_eq!(tape.value(s).data(), &[1.0, 2.0, 3.0]);

    let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let y = tape.constant(Tensor::vector(vec![3.0, 4.0]));
    let p = tape.mul(x, y).unwrap();
    assert_eq!(tape.value(p).data(), &[3.0, 8.0]);

    let w = tape.param(Tensor::vector(vec![2.0, 5.0]));
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.sum(sq, None).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[4.0, 10.0]);
}

#[test]
fn leading_axis_broadcast_is_symmetric() {
    let big = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let row = Tensor::vector(vec![10.0, 20.0, 30.0]);
    let mut tape = Tape::new();
    let b = tape.param(big);
    let r = tape.param(row);
    let lr = tape.add(b, r).unwrap();
    let rl = tape.add(r, b).unwrap();
    assert_eq!(tape.value(lr), tape.value(rl));
    assert_eq!(tape.value(lr).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);

    let loss = tape.sum(rl, None).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(r).unwrap().data(), &[2.0, 2.0, 2.0]);
    assert_eq!(g.get(b).unwrap().data(), &[1.0; 6]);

    let bad = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.add(b, bad), Err(Error::Dimension(_))));
    // Trailing-axis repetition is not a supported broadcast.
    let col = tape.constant(Tensor::zeros(&[2, 1]));
    assert!(matches!(tape.mul(b, col), Err(Error::Dimension(_))));
}

#[test]
fn activation_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0, 3f64.ln()]));
    let s = tape.sigmoid(x).unwrap();
    assert_eq!(tape.value(s).data()[0], 0.5);
    assert!((tape.value(s).data()[1] - 0.75).abs() < 1e-15);
    let t = tape.tanh(x).unwrap();
    assert_eq!(tape.value(t).data()[0], 0.0);

    let extreme = tape.constant(Tensor::vector(vec![-800.0, 800.0]));
    let s = tape.sigmoid(extreme).unwrap();
    assert_eq!(tape.value(s).data(), &[0.0, 1.0]);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let cases = [
        (vec![0.0, 0.0], vec![0.5, 0.5]),
        (vec![1f64.ln(), 3f64.ln()], vec![0.25, 0.75]),
        (vec![1000.0, 1000.0], vec![0.5, 0.5]),
    ];
    for (input, want) in cases {
        let x = tape.constant(Tensor::vector(input));
        let y = tape.softmax(x, 0).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-15);
        }
    }
    let x = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(tape.softmax(x, 2).is_err());
}

#[test]
fn softmax_slices_sum_to_one_on_inner_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let t = random_tensor(&mut rng, &[3, 4, 5]).map(|v| v * 20.0);
        let mut tape = Tape::new();
        let x = tape.constant(t);
        let y = tape.softmax(x, 1).unwrap();
        let v = tape.value(y);
        for o in 0..3 {
            for i in 0..5 {
                let s: f64 = (0..4).map(|j| v.get(&[o, j, i])).sum();
                assert!((s - 1.0).abs() < 1e-9);
                assert!((0..4).all(|j| v.get(&[o, j, i]) > 0.0));
            }
        }
    }
}

#[test]
fn shape_op_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
    let p = tape.zero_pad(x, 0, 2, PadSide::Front).unwrap();
    assert_eq!(tape.shape(p), &[4, 1]);
    assert_eq!(tape.value(p).data(), &[0.0, 0.0, 1.0, 2.0]);
    let back = tape.zero_pad(x, 0, 1, PadSide::Back).unwrap();
    assert_eq!(tape.value(back).data(), &[1.0, 2.0, 0.0]);

    let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let b = tape.constant(Tensor::vector(vec![3.0]));
    let c = tape.concat(&[a, b], 0).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);

    let m = tape.constant(Tensor::new(vec![2, 3], (1..=6).map(f64::from).collect()).unwrap());
    let r = tape.reshape(m, &[3, 2]).unwrap();
    assert_eq!(
        tape.value(r),
        &Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap()
    );
    assert!(matches!(tape.reshape(m, &[4, 2]), Err(Error::Dimension(_))));

    let wrong = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(
        tape.concat(&[m, wrong], 0),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn reduce_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let s = tape.sum(x, None).unwrap();
    assert_eq!(tape.value(s).item().unwrap(), 6.0);

    let m = tape.constant(Tensor::matrix(&[vec![1.0, 3.0], vec![5.0, 7.0]]).unwrap());
    let mean0 = tape.mean(m, Some(0)).unwrap();
    assert_eq!(tape.value(mean0).data(), &[3.0, 5.0]);

    let w = tape.param(Tensor::vector(vec![4.0, -1.0, 2.0, 9.0]));
    let mean = tape.mean(w, None).unwrap();
    let g = tape.backward(mean).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[0.25; 4]);
}

#[test]
fn backward_examples_and_contract() {
    let mut tape = Tape::new();
    let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let loss = tape.sum(w, None).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[1.0, 1.0]);

    let mut tape = Tape::new();
    let w = tape.param(Tensor::vector(vec![3.0]));
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.sum(sq, None).unwrap();
    let g1 = tape.backward(loss).unwrap();
    assert_eq!(g1.get(w).unwrap().data(), &[6.0]);
    // Backward leaves the tape untouched, so a second sweep is identical.
    let g2 = tape.backward(loss).unwrap();
    assert_eq!(g1.get(w), g2.get(w));

    let two = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(two), Err(Error::Contract(_))));
}

#[test]
fn unused_leaf_gets_zero_gradient_of_its_shape() {
    let mut tape = Tape::new();
    let used = tape.param(Tensor::vector(vec![1.0]));
    let unused = tape.param(Tensor::zeros(&[2, 3]));
    let loss = tape.sum(used, None).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[2, 3]));
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1e200]));
    let y = tape.mul(x, x);
    assert!(matches!(y, Err(Error::Numerical(_))));
}

#[test]
fn gradient_check_examples() {
    let err = gradient_check(
        |t, x| t.sum(x, None),
        &Tensor::vector(vec![0.3, -4.0, 7.0]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-10, "{err}");

    let err = gradient_check(
        |t, x| {
            let s = t.sigmoid(x)?;
            t.sum(s, None)
        },
        &Tensor::vector(vec![0.3, -1.2]),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

/// Every differentiable op over 100 seeds, inputs in [-2, 2].
#[test]
fn elementwise_ops_pass_gradient_check_over_seeds() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[3, 4]);
        let other = random_tensor(&mut rng, &[3, 4]);
        let row = random_tensor(&mut rng, &[4]);
        let w = random_tensor(&mut rng, &[3, 4]);

        let checks: Vec<(&str, f64)> = vec![
            (
                "mul",
                gradient_check(
                    |t, v| {
                        let o = t.constant(other.clone());
                        let y = t.mul(v, o)?;
                        weighted_sum(t, y, &w)
                    },
                    &x,
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "add-broadcast",
                gradient_check_many(
                    |t, v| {
                        let y = t.add(v[1], v[0])?;
                        let y = t.mul(y, y)?;
                        t.sum(y, None)
                    },
                    &[x.clone(), row.clone()],
                    1e-5,
                )
                .unwrap()
                .max_error(),
            ),
            (
                "sub",
                gradient_check(
                    |t, v| {
                        let o = t.constant(other.clone());
                        let y = t.sub(o, v)?;
                        weighted_sum(t, y, &w)
                    },
                    &x,
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "sigmoid",
                gradient_check(
                    |t, v| {
                        let y = t.sigmoid(v)?;
                        weighted_sum(t, y, &w)
                    },
                    &x,
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "tanh",
                gradient_check(
                    |t, v| {
                        let y = t.tanh(v)?;
                        weighted_sum(t, y, &w)
                    },
                    &x,
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "softmax",
                gradient_check(
                    |t, v| {
                        let y = t.softmax(v, 1)?;
                        weighted_sum(t, y, &w)
                    },
                    &x,
                    1e-5,
                )
                .unwrap(),
            ),
            (
                "scale",
                gradient_check(
                    |t, v| {
                        let y = t.scale(v, -1.7)?;
                        weighted_sum(t, y, &w)
                    },
                    &x,
                    1e-5,
                )
                .unwrap(),
            ),
        ];
        for (name, err) in checks {
            assert!(err < 1e-6, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn compositions_pass_gradient_check_over_seeds() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let a = random_tensor(&mut rng, &[2, 3, 4]);
        let m = random_tensor(&mut rng, &[4, 3]);
        let left = random_tensor(&mut rng, &[3, 3]);
        let w = random_tensor(&mut rng, &[2, 3, 6]);
        let report = gradient_check_many(
            |t, v| {
                // pad -> window slices -> concat -> batched matmuls -> reduce
                let padded = t.zero_pad(v[0], 1, 1, PadSide::Front)?;
                let s0 = t.slice(padded, 1, 0..3)?;
                let s1 = t.slice(padded, 1, 1..4)?;
                let win = t.concat(&[s0, s1], 2)?;
                let win = t.reshape(win, &[6, 8])?;
                let mm = t.concat(&[v[1], v[1]], 0)?;
                let y = t.matmul(win, mm)?;
                let y = t.reshape(y, &[2, 3, 3])?;
                let y = t.matmul(v[2], y)?;
                // keep tanh out of saturation so no coordinate's gradient vanishes
                let y = t.scale(y, 0.05)?;
                let y = t.tanh(y)?;
                let z = t.softmax(y, 2)?;
                let z = t.concat(&[z, y], 2)?;
                let wv = t.constant(w.clone());
                let z = t.mul(z, wv)?;
                let z = t.mean(z, Some(1))?;
                t.sum(z, None)
            },
            &[a.clone(), m.clone(), left.clone()],
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_error() < 1e-5,
            "seed {seed}: {}",
            report.max_error()
        );
    }
}

#[test]
fn reshape_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let t = random_tensor(&mut rng, &[2, 3, 5]);
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        let r = tape.reshape(x, &[5, 6]).unwrap();
        let back = tape.reshape(r, &[2, 3, 5]).unwrap();
        assert_eq!(tape.value(back), &t);
    }
}

#[test]
fn zero_pad_then_slice_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for axis in 0..3 {
        for side in [PadSide::Front, PadSide::Back] {
            let t = random_tensor(&mut rng, &[3, 2, 4]);
            let mut tape = Tape::new();
            let x = tape.constant(t.clone());
            let p = tape.zero_pad(x, axis, 2, side).unwrap();
            let len = t.shape()[axis];
            let range = if side == PadSide::Front {
                2..len + 2
            } else {
                0..len
            };
            let s = tape.slice(p, axis, range).unwrap();
            assert_eq!(tape.value(s), &t);
        }
    }
}

#[test]
fn backward_is_deterministic_for_a_fixed_tape() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_tensor(&mut rng, &[4, 4]);
    let mut tape = Tape::new();
    let x = tape.param(a);
    let y = tape.matmul(x, x).unwrap();
    let y = tape.sigmoid(y).unwrap();
    let l = tape.sum(y, None).unwrap();
    let g1 = tape.backward(l).unwrap().take(x).unwrap();
    let g2 = tape.backward(l).unwrap().take(x).unwrap();
    assert_eq!(g1, g2);
}
