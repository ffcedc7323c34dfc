//! Finite-difference gradient verification.
//!
//! `grad_check` rebuilds a scalar-valued graph under coordinate-wise central
//! differences and reports the worst relative disagreement with the analytic
//! gradients from [`Graph::backward`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::graph::{Graph, NodeId};
use crate::numcore::tensor::Tensor;

/// Central-difference step used throughout the crate's own checks.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Coordinates with gradients this small on both sides are compared against
/// the floor instead of their own magnitude, so noise near zero does not
/// dominate the reported error.
const REL_ERROR_FLOOR: f64 = 1e-2;

fn validate_eps(eps: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!(
            "grad_check eps must lie in [1e-6, 1e-3], got {eps}"
        )));
    }
    Ok(())
}

fn eval_loss<F>(build: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t)).collect();
    let loss = build(&mut g, &ids)?;
    let value = g.item(loss)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "loss is non-finite ({value}) at a finite-difference probe point"
        )));
    }
    Ok(value)
}

/// Gradients of `build`'s scalar output w.r.t. every coordinate of every
/// input, from one reverse sweep. Inputs are treated as requiring gradients
/// regardless of their flag; unreachable inputs get zero gradients.
pub fn analytic_gradients<F>(build: &F, inputs: &[Tensor]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| g.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    Ok(ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            g.grad(id)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect())
}

/// Central differences `(f(x+eps) - f(x-eps)) / (2 eps)` for the selected
/// coordinates of each input (`None` selects all).
fn fd_gradients_at<F>(
    build: &F,
    inputs: &[Tensor],
    eps: f64,
    coords: &[Vec<usize>],
) -> Result<Vec<Vec<(usize, f64)>>>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for (i, list) in coords.iter().enumerate() {
        let mut per_input = Vec::with_capacity(list.len());
        for &c in list {
            let orig = probe[i].data[c];
            probe[i].data[c] = orig + eps;
            let plus = eval_loss(build, &probe)?;
            probe[i].data[c] = orig - eps;
            let minus = eval_loss(build, &probe)?;
            probe[i].data[c] = orig;
            per_input.push((c, (plus - minus) / (2.0 * eps)));
        }
        out.push(per_input);
    }
    Ok(out)
}

/// Full central-difference gradients for every coordinate of every input.
pub fn fd_gradients<F>(build: &F, inputs: &[Tensor], eps: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    validate_eps(eps)?;
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    let sparse = fd_gradients_at(build, inputs, eps, &coords)?;
    Ok(sparse
        .into_iter()
        .map(|list| list.into_iter().map(|(_, v)| v).collect())
        .collect())
}

/// Worst relative disagreement between two gradient values.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(REL_ERROR_FLOOR)
}

/// Worst relative disagreement over paired gradient sets.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    analytic
        .iter()
        .flatten()
        .zip(numeric.iter().flatten())
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Checks every coordinate of every input. `build` must produce a scalar.
pub fn grad_check<F>(build: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    validate_eps(eps)?;
    let analytic = analytic_gradients(&build, inputs)?;
    let numeric = fd_gradients(&build, inputs, eps)?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Like [`grad_check`] but probes at most `max_coords` randomly sampled
/// coordinates per input, making finite differences affordable on full-size
/// models (the analytic sweep still covers everything).
pub fn grad_check_sampled<F>(
    build: F,
    inputs: &[Tensor],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    validate_eps(eps)?;
    if max_coords == 0 {
        return Err(Error::Contract("grad_check_sampled with zero coordinate budget".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let analytic = analytic_gradients(&build, inputs)?;
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            if t.numel() <= max_coords {
                (0..t.numel()).collect()
            } else {
                rand::seq::index::sample(&mut rng, t.numel(), max_coords).into_vec()
            }
        })
        .collect();
    let numeric = fd_gradients_at(&build, inputs, eps, &coords)?;
    let mut worst = 0.0f64;
    for (per_input, a) in numeric.iter().zip(&analytic) {
        for &(c, n) in per_input {
            worst = worst.max(rel_err(a[c], n));
        }
    }
    Ok(worst)
}
