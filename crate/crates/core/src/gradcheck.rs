//! Operator-by-operator gradient verification table.
//!
//! Each row checks one differentiable operator (plus one full tiny network)
//! against central finite differences over randomized shapes and a list of
//! seeds. Relative error is |analytic - numeric| / max(1, |analytic|).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{self, ModelConfig};
use crate::tensor::check::{grad_check_at, DEFAULT_EPS};
use crate::tensor::{GradGraph, Tensor, TensorId};

pub const TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub seeds: usize,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::random_uniform(shape, -1.0, 1.0, rng)
}

/// Uniform in [-1, -margin] u [margin, 1]: keeps kinked ops (relu, abs)
/// away from the point where central differences straddle the corner.
fn rand_tensor_margin(shape: Vec<usize>, margin: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

fn even(rng: &mut ChaCha8Rng, max_half: usize) -> usize {
    2 * rng.gen_range(1..=max_half)
}

fn row(name: &'static str, seeds: &[u64], per_seed: impl Fn(u64) -> f64) -> GradCheckRow {
    let max_rel_err = seeds.iter().map(|&s| per_seed(s)).fold(0.0, f64::max);
    GradCheckRow {
        name,
        max_rel_err,
        tolerance: TOLERANCE,
        seeds: seeds.len(),
    }
}

/// Check every differentiable operator on randomized shapes up to 2x4x8x8.
pub fn operator_suite(seeds: &[u64]) -> Vec<GradCheckRow> {
    vec![
        row("conv2d", seeds, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let k: usize = [1, 3, 5][rng.gen_range(0..3)];
            let pad = rng.gen_range(0..=2);
            let h = rng.gen_range(k..=8);
            let w = rng.gen_range(k..=8);
            let inputs = vec![
                rand_tensor(vec![n, cin, h, w], &mut rng),
                rand_tensor(vec![cout, cin, k, k], &mut rng),
                rand_tensor(vec![cout], &mut rng),
            ];
            let f = move |g: &mut GradGraph, ids: &[TensorId]| {
                let y = g.conv2d(ids[0], ids[1], ids[2], pad)?;
                let y2 = g.mul(y, y)?;
                Ok(g.sum(y2))
            };
            grad_check_at(&f, &inputs, DEFAULT_EPS).expect("conv2d grad check failed")
        }),
        row("conv_transpose2d", seeds, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let h = rng.gen_range(1..=4);
            let w = rng.gen_range(1..=4);
            let inputs = vec![
                rand_tensor(vec![n, cin, h, w], &mut rng),
                rand_tensor(vec![cin, cout, 4, 4], &mut rng),
                rand_tensor(vec![cout], &mut rng),
            ];
            let f = |g: &mut GradGraph, ids: &[TensorId]| {
                let y = g.conv_transpose2d(ids[0], ids[1], ids[2])?;
                let y2 = g.mul(y, y)?;
                Ok(g.sum(y2))
            };
            grad_check_at(&f, &inputs, DEFAULT_EPS).expect("conv_transpose2d grad check failed")
        }),
        row("maxpool2d", seeds, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, c) = (rng.gen_range(1..=2), rng.gen_range(1..=4));
            let shape = vec![n, c, even(&mut rng, 4), even(&mut rng, 4)];
            let inputs = vec![rand_tensor(shape, &mut rng)];
            let f = |g: &mut GradGraph, ids: &[TensorId]| {
                let y = g.maxpool2d(ids[0])?;
                // square the pooled values so the routed gradient is data-dependent
                let y2 = g.mul(y, y)?;
                Ok(g.sum(y2))
            };
            grad_check_at(&f, &inputs, DEFAULT_EPS).expect("maxpool2d grad check failed")
        }),
        row("elementwise_mul", seeds, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = vec![
                rng.gen_range(1..=2),
                rng.gen_range(1..=4),
                even(&mut rng, 4),
                even(&mut rng, 4),
            ];
            let inputs = vec![rand_tensor(shape.clone(), &mut rng), rand_tensor(shape, &mut rng)];
            let f = |g: &mut GradGraph, ids: &[TensorId]| {
                let y = g.mul(ids[0], ids[1])?;
                Ok(g.sum(y))
            };
            grad_check_at(&f, &inputs, DEFAULT_EPS).expect("mul grad check failed")
        }),
        row("concat_channels", seeds, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, h, w) = (rng.gen_range(1..=2), even(&mut rng, 4), even(&mut rng, 4));
            let (ca, cb) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let inputs = vec![
                rand_tensor(vec![n, ca, h, w], &mut rng),
                rand_tensor(vec![n, cb, h, w], &mut rng),
                rand_tensor(vec![n, ca + cb, h, w], &mut rng),
            ];
            let f = |g: &mut GradGraph, ids: &[TensorId]| {
                let cat = g.concat_channels(ids[0], ids[1])?;
                let y = g.mul(cat, ids[2])?;
                Ok(g.sum(y))
            };
            grad_check_at(&f, &inputs, DEFAULT_EPS).expect("concat grad check failed")
        }),
        row("relu", seeds, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![rand_tensor_margin(vec![2, 4, 8, 8], 1e-3, &mut rng)];
            let f = |g: &mut GradGraph, ids: &[TensorId]| {
                let y = g.relu(ids[0]);
                let y2 = g.mul(y, y)?;
                Ok(g.sum(y2))
            };
            grad_check_at(&f, &inputs, DEFAULT_EPS).expect("relu grad check failed")
        }),
        row("sigmoid", seeds, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![rand_tensor(vec![2, 4, 8, 8], &mut rng)];
            let f = |g: &mut GradGraph, ids: &[TensorId]| {
                let y = g.sigmoid(ids[0]);
                let y2 = g.mul(y, y)?;
                Ok(g.sum(y2))
            };
            grad_check_at(&f, &inputs, DEFAULT_EPS).expect("sigmoid grad check failed")
        }),
        row("abs", seeds, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![rand_tensor_margin(vec![2, 4, 8, 8], 1e-3, &mut rng)];
            let f = |g: &mut GradGraph, ids: &[TensorId]| {
                let y = g.abs(ids[0]);
                Ok(g.sum(y))
            };
            grad_check_at(&f, &inputs, DEFAULT_EPS).expect("abs grad check failed")
        }),
        row("add", seeds, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = vec![2, rng.gen_range(1..=4), even(&mut rng, 4), even(&mut rng, 4)];
            let inputs = vec![rand_tensor(shape.clone(), &mut rng), rand_tensor(shape, &mut rng)];
            let f = |g: &mut GradGraph, ids: &[TensorId]| {
                let y = g.add(ids[0], ids[1])?;
                let y2 = g.mul(y, y)?;
                Ok(g.sum(y2))
            };
            grad_check_at(&f, &inputs, DEFAULT_EPS).expect("add grad check failed")
        }),
        row("sub", seeds, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = vec![2, rng.gen_range(1..=4), even(&mut rng, 4), even(&mut rng, 4)];
            let inputs = vec![rand_tensor(shape.clone(), &mut rng), rand_tensor(shape, &mut rng)];
            let f = |g: &mut GradGraph, ids: &[TensorId]| {
                let y = g.sub(ids[0], ids[1])?;
                let y2 = g.mul(y, y)?;
                Ok(g.sum(y2))
            };
            grad_check_at(&f, &inputs, DEFAULT_EPS).expect("sub grad check failed")
        }),
        row("sum", seeds, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![rand_tensor(vec![2, 4, 8, 8], &mut rng)];
            let f = |g: &mut GradGraph, ids: &[TensorId]| Ok(g.sum(ids[0]));
            grad_check_at(&f, &inputs, DEFAULT_EPS).expect("sum grad check failed")
        }),
        row("mean", seeds, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![rand_tensor(vec![2, 4, 8, 8], &mut rng)];
            let f = |g: &mut GradGraph, ids: &[TensorId]| Ok(g.mean(ids[0]));
            grad_check_at(&f, &inputs, DEFAULT_EPS).expect("mean grad check failed")
        }),
    ]
}

/// A probe point is only usable for central differences when every relu/abs
/// input and max-pool margin sits at least this far from its corner.
/// Measured on this network, probes crossing a corner appear below ~1.5e-5
/// distance (eps times the local slope); 1e-4 adds an order of magnitude.
const KINK_MARGIN: f64 = 1e-4;

/// End-to-end check of a tiny network (levels 2, base channels 2, 8x8
/// inputs): every parameter is perturbed against the training loss.
///
/// Seeds whose forward pass lands within [`KINK_MARGIN`] of a relu/abs
/// corner or a pool tie are deterministically re-derived; finite differences
/// are undefined across those corners, so probing there measures the probe,
/// not the gradient.
pub fn model_gradcheck(seeds: &[u64]) -> GradCheckRow {
    let cfg = ModelConfig::new(2, 2, true).expect("valid config");
    row("two_tower_net", seeds, |seed| {
        for attempt in 0..64u64 {
            let eff = seed ^ (attempt.wrapping_mul(0x9e3779b97f4a7c15));
            let mut rng = ChaCha8Rng::seed_from_u64(eff ^ 0x5eed_cafe);
            let params = model::build(&cfg, eff).expect("build failed");
            let tensors: Vec<Tensor> =
                params.named().into_iter().map(|(_, t)| t.clone()).collect();
            let left = Tensor::random_uniform(vec![1, 3, 8, 8], 0.05, 0.95, &mut rng);
            let clue = Tensor::random_uniform(vec![1, 1, 8, 8], 0.05, 0.95, &mut rng);
            let right = Tensor::random_uniform(vec![1, 3, 8, 8], 0.05, 0.95, &mut rng);
            let gt = Tensor::random_uniform(vec![1, 1, 8, 8], 0.05, 0.95, &mut rng);

            let f = |g: &mut GradGraph, ids: &[TensorId]| {
                let gp = model::graph_params_from_ids(&cfg, ids);
                let li = g.leaf(left.clone());
                let ci = g.leaf(clue.clone());
                let ri = g.leaf(right.clone());
                let gi = g.leaf(gt.clone());
                let out =
                    model::forward_graph(g, &gp, &cfg, li, Some(ci), ri).map_err(|e| match e {
                        model::ModelError::Tensor(t) => t,
                        other => panic!("model build error in grad check: {other}"),
                    })?;
                let diff = g.sub(out, gi)?;
                let a = g.abs(diff);
                Ok(g.mean(a))
            };

            // Probe the unperturbed forward pass first.
            let mut probe = GradGraph::new();
            let ids: Vec<TensorId> = tensors.iter().map(|t| probe.leaf(t.clone())).collect();
            f(&mut probe, &ids).expect("probe forward failed");
            if probe.kink_distance() <= KINK_MARGIN {
                continue;
            }
            return grad_check_at(&f, &tensors, DEFAULT_EPS).expect("model grad check failed");
        }
        panic!("no kink-free probe point found for seed {seed}");
    })
}

/// The full table: all operators plus the tiny end-to-end network.
pub fn full_suite(seeds: &[u64]) -> Vec<GradCheckRow> {
    let mut rows = operator_suite(seeds);
    rows.push(model_gradcheck(seeds));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operators_pass_on_three_seeds() {
        for r in operator_suite(&[0, 1, 2]) {
            assert!(r.passed(), "{} failed: max rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn tiny_model_passes_one_seed() {
        let r = model_gradcheck(&[0]);
        assert!(r.passed(), "model grad check err {}", r.max_rel_err);
    }
}
