use htgnn_autograd::gradcheck::{self, check_inputs};
use htgnn_autograd::{Adam, AdamConfig, ParamStore, RunningStats, Tape, Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    // Box-Muller keeps the test free of extra distribution crates.
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k) = a.dims2();
    let (_, n) = b.dims2();
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a.at(i, p) * b.at(p, j);
            }
        }
    }
    c
}

/// Neumaier-compensated sum, used as the extended-precision reference.
fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Weighted sum of a tape value, so that gradient checks see a generic
/// linear functional rather than a plain sum.
fn weighted_total(tape: &mut Tape, x: htgnn_autograd::Var, rng_seed: u64) -> htgnn_autograd::Var {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(normal(&shape, &mut rng));
    let prod = tape.mul(x, w).unwrap();
    tape.sum(prod)
}

#[test]
fn matmul_identity_and_hand_example() {
    let mut tape = Tape::new();
    let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
    let i3 = tape.constant(Tensor::eye(3));
    let xv = tape.constant(x.clone());
    let out = tape.matmul(i3, xv).unwrap();
    assert_eq!(tape.value(out).data(), x.data());

    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let ones = tape.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
    let out = tape.matmul(a, ones).unwrap();
    assert_eq!(tape.value(out).shape(), &[2, 1]);
    assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let a = normal(&[5, 4], &mut rng);
        let b = normal(&[4, 3], &mut rng);
        let want = triple_loop(&a, &b);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a), tape.constant(b));
        let out = tape.matmul(av, bv).unwrap();
        for (x, y) in tape.value(out).data().iter().zip(&want) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, TensorError::Shape { .. }));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 4], 2.5));
    let y = tape.softmax_rows(x).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 0.25).abs() < 1e-15);
    }
    let x = tape.constant(Tensor::from_rows(&[vec![0.0, -1e9]]).unwrap());
    let y = tape.softmax_rows(x).unwrap();
    assert_eq!(tape.value(y).data()[0], 1.0);
    assert!(tape.value(y).data()[1] < 1e-300);
}

#[test]
fn softmax_matches_direct_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let x = normal(&[3, 4], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.softmax_rows(xv).unwrap();
        for r in 0..3 {
            let row = x.row(r);
            let z = compensated_sum(row.iter().map(|v| v.exp()));
            for (c, &v) in row.iter().enumerate() {
                let want = v.exp() / z;
                assert!((tape.value(y).at(r, c) - want).abs() <= 1e-12);
            }
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 1..12), 1..6)) {
        let width = rows[0].len();
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(width, 0.0); r }).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&rows).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        for r in 0..rows.len() {
            let s: f64 = tape.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn elementwise_outputs_are_finite(v in prop::collection::vec(-30.0f64..30.0, 1..20)) {
        let mut tape = Tape::new();
        let n = v.len();
        let x = tape.constant(Tensor::new(&[n], v).unwrap());
        for y in [tape.sigmoid(x), tape.relu(x), tape.exp(x)] {
            prop_assert!(tape.value(y).data().iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn batch_norm_examples() {
    let mut tape = Tape::new();
    let gamma = tape.constant(Tensor::full(&[2], 1.0));
    let beta = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(Tensor::from_rows(&[vec![3.0, -1.0], vec![3.0, 1.0]]).unwrap());
    let (y, moments) = tape.batch_norm_train(x, gamma, beta).unwrap();
    let out = tape.value(y);
    // constant column collapses to zero
    assert_eq!(out.at(0, 0), 0.0);
    assert_eq!(out.at(1, 0), 0.0);
    // already standardized column stays at ±1 up to the variance floor
    let scale = 1.0 / (1.0 + htgnn_autograd::BN_EPS).sqrt();
    assert!((out.at(0, 1) + scale).abs() < 1e-15);
    assert!((out.at(1, 1) - scale).abs() < 1e-15);
    assert_eq!(moments.mean, vec![3.0, 0.0]);
    assert_eq!(moments.var, vec![0.0, 1.0]);
}

#[test]
fn batch_norm_output_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = normal(&[8, 3], &mut rng);
    let mut tape = Tape::new();
    let gamma = tape.constant(Tensor::full(&[3], 1.0));
    let beta = tape.constant(Tensor::zeros(&[3]));
    let xv = tape.constant(x.clone());
    let (y, m) = tape.batch_norm_train(xv, gamma, beta).unwrap();
    for j in 0..3 {
        let col: Vec<f64> = (0..8).map(|i| tape.value(y).at(i, j)).collect();
        let mean = col.iter().sum::<f64>() / 8.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-10);
        // pre-scale variance is var / (var + eps)
        let expected = m.var[j] / (m.var[j] + htgnn_autograd::BN_EPS);
        assert!((var - expected).abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn batch_norm_single_row_is_rejected_in_train_mode() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(Tensor::zeros(&[1, 2]));
    assert!(matches!(
        tape.batch_norm_train(x, g, b),
        Err(TensorError::Contract(_))
    ));
    // eval mode is fine with one row
    let stats = RunningStats::new(2);
    assert!(tape.batch_norm_eval(x, g, b, &stats).is_ok());
}

#[test]
fn running_stats_use_momentum() {
    let mut stats = RunningStats::new(1);
    stats.update(&htgnn_autograd::BatchMoments {
        mean: vec![1.0],
        var: vec![3.0],
    });
    assert!((stats.mean[0] - 0.1).abs() < 1e-15);
    assert!((stats.var[0] - (0.9 + 0.3)).abs() < 1e-15);
}

#[test]
fn embedding_lookup_examples() {
    let table = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
    let mut tape = Tape::new();
    let t = tape.leaf(table.clone());
    let out = tape.embedding_lookup(t, &[0, 0]).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 1.0, 2.0]);

    // one-hot matmul equivalence
    let ids = [2usize, 0, 1, 2];
    let mut onehot = Tensor::zeros(&[ids.len(), 3]);
    for (r, &id) in ids.iter().enumerate() {
        onehot.data_mut()[r * 3 + id] = 1.0;
    }
    let oh = tape.constant(onehot);
    let via_matmul = tape.matmul(oh, t).unwrap();
    let via_lookup = tape.embedding_lookup(t, &ids).unwrap();
    assert_eq!(tape.value(via_matmul).data(), tape.value(via_lookup).data());

    // scatter gradient
    let mut tape = Tape::new();
    let t = tape.leaf(table);
    let out = tape.embedding_lookup(t, &[2, 2]).unwrap();
    let loss = tape.sum(out);
    let grads = tape.gradients(loss).unwrap();
    assert_eq!(grads.get(t).unwrap(), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
}

#[test]
fn embedding_lookup_rejects_out_of_range() {
    let mut tape = Tape::new();
    let t = tape.constant(Tensor::zeros(&[3, 2]));
    match tape.embedding_lookup(t, &[1, 3]) {
        Err(TensorError::Index { index, bound, .. }) => assert_eq!((index, bound), (3, 3)),
        other => panic!("expected index error, got {other:?}"),
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[3], vec![-3.0, 3.0, 0.0]).unwrap());
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 3.0, 0.0]);
    let s = tape.sigmoid(x);
    assert_eq!(tape.value(s).data()[2], 0.5);

    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    let grads = tape.gradients(s).unwrap();
    let analytic = grads.get(z).unwrap()[0];
    assert_eq!(analytic, 0.25);
    let h = 1e-6;
    let fd =
        (htgnn_autograd::kernels::sigmoid(h) - htgnn_autograd::kernels::sigmoid(-h)) / (2.0 * h);
    assert!((analytic - fd).abs() < 1e-9);
}

#[test]
fn log_domain() {
    let mut tape = Tape::new();
    let bad = tape.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
    assert!(matches!(tape.log(bad), Err(TensorError::Domain { .. })));
    let tiny = tape.constant(Tensor::new(&[1], vec![1e-20]).unwrap());
    let y = tape.log(tiny).unwrap();
    assert!((tape.value(y).item() - (1e-12f64).ln()).abs() < 1e-12);
}

#[test]
fn backward_linear_map_adjoint() {
    let mut store = ParamStore::new();
    let w = store
        .add(
            "w",
            Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![1.5, 0.0, -0.5]]).unwrap(),
        )
        .unwrap();
    let unused = store.add("unused", Tensor::full(&[4], 3.0)).unwrap();
    let x = Tensor::new(&[3, 1], vec![1.0, -2.0, 4.0]).unwrap();
    let mut tape = Tape::new();
    let wv = tape.param(&store, w);
    let _ = tape.param(&store, unused);
    let xv = tape.constant(x);
    let y = tape.matmul(wv, xv).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(
        store.tensor(w).grad().unwrap(),
        &[1.0, -2.0, 4.0, 1.0, -2.0, 4.0]
    );
    assert_eq!(store.tensor(unused).grad().unwrap(), &[0.0; 4]);

    // second sweep over the same tape doubles every gradient exactly
    let before = store.tensor(w).grad().unwrap().to_vec();
    tape.backward(loss, &mut store).unwrap();
    let after = store.tensor(w).grad().unwrap();
    for (a, b) in after.iter().zip(&before) {
        assert_eq!(*a, 2.0 * b);
    }
}

#[test]
fn repeated_parameter_use_accumulates() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::scalar(3.0)).unwrap();
    let mut tape = Tape::new();
    let a = tape.param(&store, w);
    let b = tape.param(&store, w);
    assert_eq!(a, b);
    let sq = tape.mul(a, b).unwrap();
    let loss = tape.add(sq, a).unwrap();
    tape.backward(loss, &mut store).unwrap();
    assert_eq!(store.tensor(w).grad().unwrap(), &[7.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]));
    let y = tape.exp(x);
    assert!(matches!(tape.gradients(y), Err(TensorError::Contract(_))));
    let empty = Tape::new();
    assert!(empty.is_empty());
}

#[test]
fn every_primitive_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut seed = 100u64;
    let mut next_seed = || {
        seed += 1;
        seed
    };
    let tol = gradcheck::DEFAULT_TOLERANCE;
    let mut check = |name: &str,
                     inputs: Vec<Tensor>,
                     f: &dyn Fn(
        &mut Tape,
        &[htgnn_autograd::Var],
    ) -> htgnn_autograd::Result<htgnn_autograd::Var>| {
        let mut r = ChaCha8Rng::seed_from_u64(next_seed());
        let err = check_inputs(&inputs, 20, &mut r, |t, v| f(t, v)).unwrap();
        assert!(err <= tol, "{name}: relative error {err}");
    };

    let w_seed = 77;
    check(
        "matmul",
        vec![normal(&[4, 3], &mut rng), normal(&[3, 5], &mut rng)],
        &|t, v| {
            let y = t.matmul(v[0], v[1])?;
            Ok(weighted_total(t, y, w_seed))
        },
    );
    check("transpose", vec![normal(&[3, 4], &mut rng)], &|t, v| {
        let y = t.transpose(v[0])?;
        Ok(weighted_total(t, y, w_seed))
    });
    check(
        "add/sub/mul",
        vec![normal(&[3, 3], &mut rng), normal(&[3, 3], &mut rng)],
        &|t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(a, v[1])?;
            let m = t.mul(s, v[1])?;
            Ok(weighted_total(t, m, w_seed))
        },
    );
    check(
        "add_row",
        vec![normal(&[4, 3], &mut rng), normal(&[3], &mut rng)],
        &|t, v| {
            let y = t.add_row(v[0], v[1])?;
            Ok(weighted_total(t, y, w_seed))
        },
    );
    check(
        "scale_rows",
        vec![normal(&[4, 3], &mut rng), normal(&[4, 1], &mut rng)],
        &|t, v| {
            let y = t.scale_rows(v[0], v[1])?;
            Ok(weighted_total(t, y, w_seed))
        },
    );
    check("relu", vec![normal(&[5, 4], &mut rng)], &|t, v| {
        let y = t.relu(v[0]);
        Ok(weighted_total(t, y, w_seed))
    });
    check("sigmoid", vec![normal(&[5, 4], &mut rng)], &|t, v| {
        let y = t.sigmoid(v[0]);
        Ok(weighted_total(t, y, w_seed))
    });
    check("exp", vec![normal(&[5, 4], &mut rng)], &|t, v| {
        let y = t.exp(v[0]);
        Ok(weighted_total(t, y, w_seed))
    });
    check("log", vec![normal(&[5, 4], &mut rng)], &|t, v| {
        let e = t.exp(v[0]);
        let y = t.log(e)?;
        let y = t.mul(y, e)?;
        Ok(weighted_total(t, y, w_seed))
    });
    check("softmax_rows", vec![normal(&[4, 6], &mut rng)], &|t, v| {
        let y = t.softmax_rows(v[0])?;
        Ok(weighted_total(t, y, w_seed))
    });
    check("gather", vec![normal(&[5, 3], &mut rng)], &|t, v| {
        let y = t.gather_rows(v[0], &[4, 1, 1, 0, 4, 4])?;
        Ok(weighted_total(t, y, w_seed))
    });
    check(
        "concat/slice",
        vec![normal(&[3, 2], &mut rng), normal(&[3, 4], &mut rng)],
        &|t, v| {
            let c = t.concat_cols(&[v[0], v[1]])?;
            let s = t.slice_cols(c, 1, 5)?;
            Ok(weighted_total(t, s, w_seed))
        },
    );
    check("reshape", vec![normal(&[3, 4], &mut rng)], &|t, v| {
        let y = t.reshape(v[0], &[2, 6])?;
        Ok(weighted_total(t, y, w_seed))
    });
    check("mean", vec![normal(&[3, 4], &mut rng)], &|t, v| {
        let y = t.mul(v[0], v[0])?;
        Ok(t.mean(y))
    });
    check("row_normalize", vec![normal(&[4, 5], &mut rng)], &|t, v| {
        let y = t.row_normalize(v[0], 1e-12)?;
        Ok(weighted_total(t, y, w_seed))
    });
    check(
        "batch_norm_train",
        vec![
            normal(&[6, 3], &mut rng),
            normal(&[3], &mut rng),
            normal(&[3], &mut rng),
        ],
        &|t, v| {
            let (y, _) = t.batch_norm_train(v[0], v[1], v[2])?;
            Ok(weighted_total(t, y, w_seed))
        },
    );
    let stats = RunningStats {
        mean: vec![0.3, -0.2, 0.1],
        var: vec![0.5, 2.0, 1.5],
    };
    check(
        "batch_norm_eval",
        vec![
            normal(&[6, 3], &mut rng),
            normal(&[3], &mut rng),
            normal(&[3], &mut rng),
        ],
        &|t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &stats)?;
            Ok(weighted_total(t, y, w_seed))
        },
    );
}

#[test]
fn adam_constant_gradient_matches_closed_form() {
    // With a constant gradient g the bias-corrected moments are exactly g
    // and g², so each step moves by lr * g / (|g| + eps).
    let (lr, g, w0) = (0.01, 0.37, 1.5);
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::scalar(w0)).unwrap();
    let mut adam = Adam::new(AdamConfig {
        lr,
        ..AdamConfig::default()
    });
    for t in 1..=50 {
        store.zero_grads();
        store.get_mut(id).tensor.accumulate_grad(&[g]).unwrap();
        adam.step(&mut store).unwrap();
        let closed = w0 - t as f64 * lr * g / (g.abs() + 1e-8);
        assert!((store.tensor(id).item() - closed).abs() < 1e-9, "step {t}");
    }
}

#[test]
fn adam_quadratic_bowl_converges() {
    // Scalar recurrence, written independently of the optimizer.
    let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8);
    let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    for t in 1..=200 {
        let g = 2.0 * w;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
    }

    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::scalar(1.0)).unwrap();
    let mut adam = Adam::with_lr(lr);
    for _ in 0..200 {
        store.zero_grads();
        let mut tape = Tape::new();
        let wv = tape.param(&store, id);
        let loss = tape.mul(wv, wv).unwrap();
        tape.backward(loss, &mut store).unwrap();
        adam.step(&mut store).unwrap();
    }
    let got = store.tensor(id).item();
    assert!((got - w).abs() < 1e-12, "{got} vs recurrence {w}");
    assert!(got.abs() < 1e-2, "|w| = {}", got.abs());
}

#[test]
fn seeded_training_is_bitwise_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let w = store
            .add("w", Tensor::uniform(&[4, 3], 0.5, &mut rng))
            .unwrap();
        let x = normal(&[8, 4], &mut rng);
        let mut adam = Adam::with_lr(0.05);
        for _ in 0..30 {
            store.zero_grads();
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.param(&store, w);
            let y = tape.matmul(xv, wv).unwrap();
            let y = tape.sigmoid(y);
            let loss = tape.mean(y);
            tape.backward(loss, &mut store).unwrap();
            adam.step(&mut store).unwrap();
        }
        store.tensor(w).data().to_vec()
    };
    assert_eq!(run(), run());
}
