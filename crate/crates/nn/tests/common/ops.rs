//! Finite-difference checks of every differentiable graph op, shared by the
//! primitive tests and the acceptance harness.

#![allow(dead_code)]

use mga_nn::{gaussian, grad_check_inputs, Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 100;

pub const OPS: &[&str] = &[
    "matmul",
    "matmul_nt",
    "dense",
    "add",
    "sub",
    "mul",
    "scale",
    "scale_by",
    "exp",
    "gelu",
    "sum",
    "relu",
    "layer_norm",
    "l2_normalize",
    "gather_rows",
    "gather_sum",
    "concat_rows",
    "concat_cols",
    "dropout",
    "attention",
    "cross_entropy",
    "bce",
    "sq_error",
];

/// Contracts an arbitrary node with a fixed random tensor so every output
/// coordinate contributes to the scalar objective.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let shape = g.value(y).shape().to_vec();
    let r = g.constant(gaussian(&mut rng, &shape, 1.0));
    let p = g.mul(y, r)?;
    g.sum(p)
}

fn m(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    gaussian(rng, &[r, c], 1.0)
}

/// Worst relative error and its seed over [`SEEDS`] random inputs.
fn worst<I, F>(inputs: I, f: F) -> (f64, u64)
where
    I: Fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    F: Fn(&mut Graph, &[Var], &mut ChaCha8Rng) -> Result<Var>,
{
    let mut out = (0.0, 0);
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = inputs(&mut rng);
        let report = grad_check_inputs(&xs, H, |g, vars| {
            let mut op_rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            let y = f(g, vars, &mut op_rng)?;
            project(g, y, seed)
        })
        .unwrap();
        if report.max_rel_error > out.0 {
            out = (report.max_rel_error, seed);
        }
    }
    out
}

/// Worst relative error of one op from [`OPS`] and the seed reaching it.
pub fn check_op(name: &str) -> (f64, u64) {
    match name {
        "matmul" => worst(|r| vec![m(r, 3, 4), m(r, 4, 2)], |g, v, _| g.matmul(v[0], v[1])),
        "matmul_nt" => worst(|r| vec![m(r, 3, 4), m(r, 5, 4)], |g, v, _| g.matmul_nt(v[0], v[1])),
        "dense" => worst(
            |r| vec![m(r, 3, 4), m(r, 4, 2), gaussian(r, &[2], 1.0)],
            |g, v, _| g.dense(v[0], v[1], v[2]),
        ),
        "add" => worst(|r| vec![m(r, 2, 3), m(r, 2, 3)], |g, v, _| g.add(v[0], v[1])),
        "sub" => worst(|r| vec![m(r, 2, 3), m(r, 2, 3)], |g, v, _| g.sub(v[0], v[1])),
        "mul" => worst(|r| vec![m(r, 2, 3), m(r, 2, 3)], |g, v, _| g.mul(v[0], v[1])),
        "scale" => worst(|r| vec![m(r, 2, 3)], |g, v, _| g.scale(v[0], -1.7)),
        "scale_by" => worst(|r| vec![m(r, 2, 3), gaussian(r, &[1], 1.0)], |g, v, _| g.scale_by(v[0], v[1])),
        "exp" => worst(|r| vec![m(r, 2, 3)], |g, v, _| g.exp(v[0])),
        "gelu" => worst(|r| vec![m(r, 3, 3)], |g, v, _| g.gelu(v[0])),
        "sum" => worst(|r| vec![m(r, 3, 3)], |g, v, _| g.sum(v[0])),
        // Entries are shifted away from zero so no kink lies within the step.
        "relu" => worst(
            |r| {
                let mut t = m(r, 3, 4);
                for x in t.data_mut() {
                    *x += 0.01_f64.copysign(*x);
                }
                vec![t]
            },
            |g, v, _| g.relu(v[0]),
        ),
        "layer_norm" => worst(
            |r| vec![m(r, 3, 5), gaussian(r, &[5], 1.0), gaussian(r, &[5], 1.0)],
            |g, v, _| g.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        "l2_normalize" => worst(|r| vec![m(r, 4, 3)], |g, v, _| g.l2_normalize_rows(v[0], 1e-12)),
        "gather_rows" => worst(|r| vec![m(r, 4, 3)], |g, v, _| g.gather_rows(v[0], &[2, 0, 2, 3])),
        "gather_sum" => worst(
            |r| vec![m(r, 4, 3)],
            |g, v, _| g.gather_sum(v[0], vec![vec![0, 1], vec![], vec![3, 3, 2]]),
        ),
        "concat_rows" => {
            worst(|r| vec![m(r, 2, 3), m(r, 1, 3)], |g, v, _| g.concat_rows(&[v[0], v[1], v[0]]))
        }
        "concat_cols" => worst(|r| vec![m(r, 2, 3), m(r, 2, 1)], |g, v, _| g.concat_cols(v[0], v[1])),
        "dropout" => worst(|r| vec![m(r, 3, 4)], |g, v, rng| g.dropout(v[0], 0.3, rng)),
        "attention" => worst(
            |r| vec![m(r, 5, 4), m(r, 5, 4), m(r, 5, 4)],
            |g, v, _| g.causal_attention(v[0], v[1], v[2], 2, &[3, 2]),
        ),
        "cross_entropy" => worst(
            |r| vec![m(r, 3, 4)],
            |g, v, _| g.cross_entropy(v[0], &[1, 0, 3], Some(&[0.2, 0.5, 0.3])),
        ),
        "bce" => worst(
            |r| vec![m(r, 3, 2)],
            |g, v, rng| {
                let y: Vec<f64> = (0..6).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
                let y = Tensor::new(vec![3, 2], y).unwrap();
                g.bce_with_logits(v[0], &y, &[3.0, 0.5], &[0.5, 0.25, 0.25])
            },
        ),
        "sq_error" => worst(
            |r| vec![m(r, 4, 1)],
            |g, v, rng| {
                let t = gaussian(rng, &[4, 1], 1.0);
                g.weighted_sq_error(v[0], &t, &[0.25; 4])
            },
        ),
        other => panic!("unknown op {other}"),
    }
}
