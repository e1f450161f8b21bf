//! Central finite-difference gradient checking.
//!
//! The harness rebuilds the graph from scratch for every perturbed input, so
//! it is independent of the backward pass it validates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{GradGraph, Result, Tensor, TensorId};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Builds a scalar result from leaf ids; called once per function evaluation.
pub trait ScalarFn: Sync {
    fn build(&self, g: &mut GradGraph, inputs: &[TensorId]) -> Result<TensorId>;
}

impl<F> ScalarFn for F
where
    F: Fn(&mut GradGraph, &[TensorId]) -> Result<TensorId> + Sync,
{
    fn build(&self, g: &mut GradGraph, inputs: &[TensorId]) -> Result<TensorId> {
        self(g, inputs)
    }
}

fn eval<F: ScalarFn>(f: &F, inputs: &[Tensor]) -> Result<f64> {
    let mut g = GradGraph::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f.build(&mut g, &ids)?;
    Ok(g.tensor(out).item())
}

/// Max relative error between analytic gradients and central differences:
/// max over elements of |analytic - numeric| / max(1, |analytic|).
///
/// Inputs are drawn uniformly from `[lo, hi)` per the seed. Callers checking
/// kinked ops (relu, abs, max-pool ties) should pick a range that keeps
/// values away from the kink.
pub fn grad_check_range<F: ScalarFn>(
    f: &F,
    shapes: &[&[usize]],
    (lo, hi): (f64, f64),
    eps: f64,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = shapes
        .iter()
        .map(|s| Tensor::random_uniform(s.to_vec(), lo, hi, &mut rng).with_grad())
        .collect();
    grad_check_at(f, &inputs, eps)
}

/// `grad_check_range` with the default [-1, 1) sampling window.
pub fn grad_check<F: ScalarFn>(
    f: &F,
    shapes: &[&[usize]],
    eps: f64,
    seed: u64,
) -> Result<f64> {
    grad_check_range(f, shapes, (-1.0, 1.0), eps, seed)
}

/// Gradient check at explicit input tensors (all leaves are perturbed).
pub fn grad_check_at<F: ScalarFn>(f: &F, inputs: &[Tensor], eps: f64) -> Result<f64> {
    let mut g = GradGraph::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| g.leaf(t.clone().with_grad())).collect();
    let out = f.build(&mut g, &ids)?;
    let grads = g.backward(out)?;

    let mut max_err = 0.0f64;
    for (which, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("leaf gradient missing").data();
        // Each coordinate perturbation is independent; evaluate them in
        // parallel and fold the max afterwards so the result is order-free.
        let errs: Vec<f64> = (0..analytic.len())
            .into_par_iter()
            .map(|j| {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[j] += eps;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[j] -= eps;
                let fp = eval(f, &plus).expect("forward eval failed");
                let fm = eval(f, &minus).expect("forward eval failed");
                let numeric = (fp - fm) / (2.0 * eps);
                let a = analytic[j];
                (a - numeric).abs() / a.abs().max(1.0)
            })
            .collect();
        for e in errs {
            max_err = max_err.max(e);
        }
    }
    Ok(max_err)
}
