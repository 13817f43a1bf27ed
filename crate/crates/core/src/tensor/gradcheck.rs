//! Central finite-difference checking of reverse-mode gradients.

use super::{Graph, NodeId, Tensor};
use crate::error::Result;
use rand::Rng;

/// Outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per checked input tensor.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
    pub pass: bool,
    pub eps: f64,
    pub tolerance: f64,
}

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / 1.0_f64.max(ad.abs()).max(fd.abs())
}

fn eval<F>(inputs: &[Tensor], f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    Ok(g.value(out).item())
}

fn check_coords<F>(
    inputs: &[Tensor],
    coords: &[(usize, usize)],
    eps: f64,
    tolerance: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    // Reverse-mode gradients in one pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &ids)?;
    g.backward(out)?;
    let ad_grads: Vec<Tensor> = ids
        .iter()
        .map(|&id| g.grad(id).unwrap_or_else(|| Tensor::zeros(g.value(id).shape())))
        .collect();

    let mut per_input = vec![0.0_f64; inputs.len()];
    for &(ti, ei) in coords {
        let mut plus = inputs.to_vec();
        plus[ti].data_mut()[ei] += eps;
        let mut minus = inputs.to_vec();
        minus[ti].data_mut()[ei] -= eps;
        let fd = (eval(&plus, &mut f)? - eval(&minus, &mut f)?) / (2.0 * eps);
        let ad = ad_grads[ti].data()[ei];
        per_input[ti] = per_input[ti].max(rel_err(ad, fd));
    }
    let max_rel_err = per_input.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        per_input,
        max_rel_err,
        pass: max_rel_err <= tolerance,
        eps,
        tolerance,
    })
}

/// Checks every element of every input against central differences.
///
/// `f` must build a scalar-valued graph from the given leaves and must be a
/// pure function of them (no dropout, no fresh randomness).
pub fn grad_check<F>(inputs: &[Tensor], eps: f64, tolerance: f64, f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut coords = Vec::new();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.len() {
            coords.push((ti, ei));
        }
    }
    check_coords(inputs, &coords, eps, tolerance, f)
}

/// Like [`grad_check`] but only perturbs `samples` randomly chosen coordinates,
/// for composites with many parameters.
pub fn grad_check_sampled<F, R: Rng>(
    inputs: &[Tensor],
    eps: f64,
    tolerance: f64,
    samples: usize,
    rng: &mut R,
    f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut all = Vec::new();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.len() {
            all.push((ti, ei));
        }
    }
    let coords: Vec<(usize, usize)> = if all.len() <= samples {
        all
    } else {
        (0..samples)
            .map(|_| all[rng.gen_range(0..all.len())])
            .collect()
    };
    check_coords(inputs, &coords, eps, tolerance, f)
}

/// Default step for 64-bit central differences.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Default acceptance tolerance on the relative error.
pub const DEFAULT_TOL: f64 = 1e-4;
