//! Finite-difference checks of the hand-written backward passes.

use htgnn::experts::{dynamic_tower, tower_param_count, weighted_sum};
use htgnn::hypergraph::{
    build_knn_hyperedges, embedding_dissimilarity_m, js_supervision_loss, label_difference_n,
    propagate,
};
use htgnn::objective::{ce_sum, huber_sum, squared_sum};
use htgnn::temporal::ragged_attention;
use htgnn::Error;
use htgnn_autograd::gradcheck::check_inputs;
use htgnn_autograd::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn lift<T>(r: htgnn::Result<T>) -> htgnn_autograd::Result<T> {
    r.map_err(|e| match e {
        Error::Tensor(t) => t,
        other => TensorError::Contract(other.to_string()),
    })
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Contracts `y` against fixed pseudo-random weights so every output
/// coordinate contributes.
fn project(tape: &mut Tape, y: Var) -> htgnn_autograd::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let mut r = ChaCha8Rng::seed_from_u64(91);
    let w = tape.constant(random(&shape, -1.0, 1.0, &mut r));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(
    name: &str,
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> htgnn_autograd::Result<Var>,
) {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let err = check_inputs(&inputs, 25, &mut r, f).unwrap();
    assert!(err <= TOL, "{name}: worst relative error {err}");
}

#[test]
fn hypergraph_propagation() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let emb = random(&[7, 3], -1.0, 1.0, &mut r);
    let g = build_knn_hyperedges(&emb, 3).unwrap();
    check(
        "propagate",
        vec![
            random(&[7, 4], -1.0, 1.0, &mut r),
            random(&[7], 0.5, 1.5, &mut r),
        ],
        |t, v| {
            let z = lift(propagate(t, v[0], &g, v[1]))?;
            project(t, z)
        },
    );
}

#[test]
fn structural_js_through_m() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let y: Vec<f64> = (0..6).map(|_| r.gen_range(0.0..3.0)).collect();
    let n = label_difference_n(&y).unwrap();
    let w = vec![1.0, 0.4, 1.0, 1.0, 0.4, 1.0];
    check("js", vec![random(&[6, 4], -1.0, 1.0, &mut r)], |t, v| {
        let m = lift(embedding_dissimilarity_m(t, v[0]))?;
        lift(js_supervision_loss(t, m, &n, &w))
    });
}

#[test]
fn ragged_multi_head_attention() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let segments = [(0, 3), (3, 1), (4, 5)];
    check(
        "ragged_attention",
        vec![
            random(&[3, 6], -1.0, 1.0, &mut r),
            random(&[9, 6], -1.0, 1.0, &mut r),
            random(&[9, 6], -1.0, 1.0, &mut r),
        ],
        |t, v| {
            let y = lift(ragged_attention(t, v[0], v[1], v[2], &segments, 2))?;
            project(t, y)
        },
    );
}

#[test]
fn gates_and_towers() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    check(
        "weighted_sum",
        vec![
            random(&[4, 3], 0.0, 1.0, &mut r),
            random(&[4, 6], -1.0, 1.0, &mut r),
        ],
        |t, v| {
            let y = lift(weighted_sum(t, v[0], v[1]))?;
            project(t, y)
        },
    );
    let (d, h) = (3, 4);
    check(
        "dynamic_tower",
        vec![
            random(&[5, d], -1.0, 1.0, &mut r),
            random(&[5, tower_param_count(d, h)], -1.0, 1.0, &mut r),
        ],
        |t, v| {
            let y = lift(dynamic_tower(t, v[0], v[1], h))?;
            project(t, y)
        },
    );
}

#[test]
fn masked_losses() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let y: Vec<f64> = (0..8).map(|_| r.gen_range(-2.0..2.0)).collect();
    let c: Vec<f64> = (0..8).map(|i| (i % 2) as f64).collect();
    let mask = vec![true, true, false, true, true, true, false, true];
    let pred = random(&[8, 1], -2.0, 2.0, &mut r);
    check("huber", vec![pred.clone()], |t, v| {
        lift(huber_sum(t, v[0], &y, &mask, 1.0))
    });
    check("squared", vec![pred], |t, v| {
        lift(squared_sum(t, v[0], &y, &mask))
    });
    check("ce", vec![random(&[8, 1], 0.05, 0.95, &mut r)], |t, v| {
        lift(ce_sum(t, v[0], &c, &mask))
    });
}
