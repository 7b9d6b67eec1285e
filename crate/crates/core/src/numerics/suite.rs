//! Named finite-difference checks covering every differentiable op.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use super::graph::{Graph, NormStats, Var};
use super::BN_EPS;
use super::tensor::Tensor;
use crate::error::Result;

type Inputs = fn(&mut ChaCha8Rng) -> Vec<(String, Tensor<f64>)>;
type Body = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// One op check: random inputs and the expression under test. The checked
/// scalar is `sum(y * p)` for a random projection `p`.
#[derive(Clone, Copy)]
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Inputs,
    pub body: Body,
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn named(name: &str, t: Tensor<f64>) -> (String, Tensor<f64>) {
    (String::from(name), t)
}

const RUN_MEAN: [f64; 4] = [0.1, -0.2, 0.3, 0.0];
const RUN_VAR: [f64; 4] = [0.5, 1.5, 2.0, 1.0];

/// Every op case, in a fixed order.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add_mul_scale",
            inputs: |r| vec![named("a", rand_tensor(&[3, 4], r)), named("b", rand_tensor(&[3, 4], r))],
            body: |g, v| {
                let s = g.add(v[0], v[1])?;
                let m = g.mul(s, v[1])?;
                Ok(g.scale(m, 0.7))
            },
        },
        OpCase {
            name: "relu",
            // inputs kept 0.05 away from the kink
            inputs: |r| vec![named("x", rand_tensor(&[5, 6], r).map(|x| if x.abs() < 0.05 { x + 0.1 } else { x }))],
            body: |g, v| Ok(g.relu(v[0])),
        },
        OpCase {
            name: "softmax",
            inputs: |r| vec![named("x", rand_tensor(&[4, 7], r).map(|x| 3.0 * x))],
            body: |g, v| Ok(g.softmax(v[0])),
        },
        OpCase {
            name: "linear",
            inputs: |r| {
                vec![
                    named("x", rand_tensor(&[2, 3, 5], r)),
                    named("w", rand_tensor(&[5, 4], r)),
                    named("b", rand_tensor(&[4], r)),
                ]
            },
            body: |g, v| g.linear(v[0], v[1], Some(v[2])),
        },
        OpCase {
            name: "conv2d_3x3_same",
            inputs: |r| conv_inputs(r, (3, 3)),
            body: |g, v| g.conv2d(v[0], v[1], Some(v[2]), (1, 1), (1, 1)),
        },
        OpCase {
            name: "conv2d_3x3_stride2",
            inputs: |r| conv_inputs(r, (3, 3)),
            body: |g, v| g.conv2d(v[0], v[1], Some(v[2]), (2, 2), (1, 1)),
        },
        OpCase {
            name: "conv2d_1x2_valid",
            inputs: |r| conv_inputs(r, (1, 2)),
            body: |g, v| g.conv2d(v[0], v[1], Some(v[2]), (1, 1), (0, 0)),
        },
        OpCase {
            name: "conv_transpose2d",
            inputs: |r| {
                vec![
                    named("x", rand_tensor(&[2, 3, 3, 4], r)),
                    named("k", rand_tensor(&[3, 2, 2, 2], r)),
                    named("b", rand_tensor(&[2], r)),
                ]
            },
            body: |g, v| g.conv_transpose2d(v[0], v[1], Some(v[2]), (2, 2)),
        },
        OpCase {
            name: "batch_norm_train_axis1",
            inputs: |r| norm_inputs(r, 4),
            body: |g, v| g.batch_norm(v[0], v[1], v[2], 1, NormStats::Batch, BN_EPS, 0),
        },
        OpCase {
            name: "batch_norm_train_axis3",
            inputs: |r| norm_inputs(r, 5),
            body: |g, v| g.batch_norm(v[0], v[1], v[2], 3, NormStats::Batch, BN_EPS, 0),
        },
        OpCase {
            name: "batch_norm_eval",
            inputs: |r| norm_inputs(r, 4),
            body: |g, v| {
                let stats = NormStats::Running { mean: &RUN_MEAN, var: &RUN_VAR };
                g.batch_norm(v[0], v[1], v[2], 1, stats, BN_EPS, 0)
            },
        },
        OpCase {
            name: "concat_pad_slice_swap_reshape",
            inputs: |r| vec![named("a", rand_tensor(&[2, 3, 4, 5], r)), named("b", rand_tensor(&[2, 2, 4, 5], r))],
            body: |g, v| {
                let c = g.concat(&[v[0], v[1]], 1)?;
                let p = g.pad_last(c, 1, 2);
                let s = g.slice_last(p, 2, 5)?;
                let t = g.swap_last2(s);
                g.reshape(t, &[10, 20])
            },
        },
        OpCase {
            name: "gather_matmul_latent_mix",
            inputs: |r| {
                vec![
                    named("table", rand_tensor(&[4, 3], r)),
                    named("keys", rand_tensor(&[5, 3], r)),
                    named("v", rand_tensor(&[3, 2, 5, 4], r)),
                ]
            },
            body: |g, v| {
                let q = g.gather_rows(v[0], &[2, 0, 2])?;
                let s = g.matmul_nt(q, v[1])?;
                let w = g.softmax(s);
                g.latent_mix(w, v[2])
            },
        },
        OpCase {
            name: "mse",
            inputs: |r| vec![named("a", rand_tensor(&[3, 5], r)), named("b", rand_tensor(&[3, 5], r))],
            body: |g, v| g.mse(v[0], v[1]),
        },
    ]
}

fn conv_inputs(r: &mut ChaCha8Rng, k: (usize, usize)) -> Vec<(String, Tensor<f64>)> {
    vec![
        named("x", rand_tensor(&[2, 3, 6, 5], r)),
        named("k", rand_tensor(&[4, 3, k.0, k.1], r)),
        named("b", rand_tensor(&[4], r)),
    ]
}

fn norm_inputs(r: &mut ChaCha8Rng, features: usize) -> Vec<(String, Tensor<f64>)> {
    vec![
        named("x", rand_tensor(&[3, 4, 2, 5], r)),
        named("scale", rand_tensor(&[features], r)),
        named("shift", rand_tensor(&[features], r)),
    ]
}

impl OpCase {
    /// Runs the check with inputs and projection drawn from `seed`.
    pub fn check(&self, seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (self.inputs)(&mut rng);
        let proj_seed = rng.gen::<u64>();
        let body = self.body;
        grad_check(
            &params,
            |g, v| {
                let y = body(g, v)?;
                let p = rand_tensor(g.shape(y), &mut ChaCha8Rng::seed_from_u64(proj_seed));
                let p = g.constant(p);
                let prod = g.mul(y, p)?;
                Ok(g.sum(prod))
            },
            opts,
        )
    }
}
