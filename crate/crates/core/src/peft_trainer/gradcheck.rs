use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::loss::{batch_loss, batch_loss_and_grad, TrainItem};
use super::PeftParams;
use crate::error::{Error, Result};
use crate::lm::toy::{Grads, ToyLm};

pub const DEFAULT_EPS: f64 = 1e-4;
pub const MIN_COORDS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Tensor {
    Lambda,
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordCheck {
    pub adapter: usize,
    pub tensor: Tensor,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords: Vec<CoordCheck>,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central differences on `n_coords` seeded coordinates of λ, A and B
/// (cycling through the three tensor kinds), against the backward pass.
pub fn grad_check(
    model: &ToyLm<f64>,
    peft: &PeftParams<f64>,
    batch: &[TrainItem],
    gamma: f64,
    eps: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if batch.is_empty() || peft.adapters.is_empty() {
        return Err(Error::contract("gradient check needs a batch and adapters"));
    }
    let items: Vec<&TrainItem> = batch.iter().collect();
    let mut grads = Grads::for_peft(peft);
    batch_loss_and_grad(model, Some(peft), &items, gamma, &mut grads)?;
    let grads = grads.peft.expect("peft gradients");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = [Tensor::Lambda, Tensor::A, Tensor::B];
    let mut coords = Vec::with_capacity(n_coords);
    for k in 0..n_coords {
        let tensor = kinds[k % 3];
        let adapter = rng.gen_range(0..peft.adapters.len());
        let slot = tensor as usize;
        let len = peft.adapters[adapter].num_weights_of(slot);
        let index = rng.gen_range(0..len);
        let analytic = grads[adapter].tensors()[slot][index];
        let eval = |delta: f64| -> Result<f64> {
            let mut p = peft.clone();
            p.adapters[adapter].tensors_mut()[slot][index] += delta;
            Ok(batch_loss(model, Some(&p), &items, gamma)?.total)
        };
        let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
        coords.push(CoordCheck {
            adapter,
            tensor,
            index,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = coords.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, coords })
}
