//! Central finite-difference check of analytic gradients.

use rand::Rng;

use super::{BackboneError, Result};
use crate::seed;

/// A model whose parameters are addressable as one flat vector, split into
/// named groups (tensors), with an analytic gradient of its training loss.
pub trait Differentiable {
    type Sample: ?Sized;

    /// Lengths of the parameter groups; they tile the flat index space in order.
    fn param_groups(&self) -> Vec<usize>;
    fn param(&self, index: usize) -> f64;
    fn set_param(&mut self, index: usize, value: f64);
    fn loss(&self, sample: &Self::Sample) -> f64;
    /// Loss and the gradient over all parameters, flat.
    fn loss_and_grad(&self, sample: &Self::Sample) -> (f64, Vec<f64>);
}

/// Parameters compared per check (all of them when the model has fewer).
pub const CHECKED_PARAMS: usize = 64;

/// Relative errors are measured against max(|analytic|, |numeric|, this floor).
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Largest relative error between analytic and five-point central-difference gradients over
/// a random subset of parameters: a group is drawn uniformly, then an index in it.
pub fn grad_check<D>(model: &D, sample: &D::Sample, epsilon: f64, seed: u64) -> Result<f64>
where
    D: Differentiable + Clone,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(BackboneError::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let groups: Vec<usize> = model.param_groups();
    let total: usize = groups.iter().sum();
    let (_, grad) = model.loss_and_grad(sample);
    let indices: Vec<usize> = if total <= CHECKED_PARAMS {
        (0..total).collect()
    } else {
        let nonempty: Vec<(usize, usize)> = groups
            .iter()
            .scan(0, |start, &len| {
                let g = (*start, len);
                *start += len;
                Some(g)
            })
            .filter(|&(_, len)| len > 0)
            .collect();
        let mut rng = seed::rng(seed);
        (0..CHECKED_PARAMS)
            .map(|_| {
                let (start, len) = nonempty[rng.random_range(0..nonempty.len())];
                start + rng.random_range(0..len)
            })
            .collect()
    };

    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for i in indices {
        let original = probe.param(i);
        let mut at = |offset: f64| {
            probe.set_param(i, original + offset);
            probe.loss(sample)
        };
        // fourth-order stencil on the points +-h/2, +-h
        let (outer_up, inner_up, inner_down, outer_down) = (
            at(epsilon),
            at(0.5 * epsilon),
            at(-0.5 * epsilon),
            at(-epsilon),
        );
        probe.set_param(i, original);
        let numeric = (8.0 * (inner_up - inner_down) - (outer_up - outer_down)) / (6.0 * epsilon);
        let analytic = grad[i];
        let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    Ok(worst)
}
