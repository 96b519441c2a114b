use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{LceMode, TrainingConfig};
use crate::error::{ArtemisError, Result};
use crate::params::safe_sqrt;
use crate::vgg::BlockName;

/// Probabilities are clamped to `[LOG_FLOOR, 1 − LOG_FLOOR]` before `ln`.
pub const LOG_FLOOR: f64 = 1e-7;
/// Added to latent distances in the diversity denominator.
pub const DIVERSITY_EPS: f64 = 1e-8;

fn frobenius(t: &Tensor) -> Result<Tensor> {
    safe_sqrt(&t.sqr()?.sum_all()?)
}

/// `−Σ_{i<j} ‖G(zᵢ) − G(zⱼ)‖_F / (‖zᵢ − zⱼ‖_F + ε)` over the leading axis of
/// `latents` and `outputs`. Always ≤ 0.
pub fn diversity_loss(latents: &Tensor, outputs: &Tensor) -> Result<Tensor> {
    let k = latents.dim(0)?;
    if k < 2 {
        return Err(ArtemisError::config(format!(
            "diversity loss needs k ≥ 2 samples, got {k}"
        )));
    }
    if outputs.dim(0)? != k {
        return Err(ArtemisError::shape(format!(
            "{k} latents but {} outputs",
            outputs.dim(0)?
        )));
    }
    let latents = latents.detach();
    let mut terms = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            let num = frobenius(&(outputs.get(i)? - outputs.get(j)?)?)?;
            let den = (frobenius(&(latents.get(i)? - latents.get(j)?)?)? + DIVERSITY_EPS)?;
            terms.push((num / den)?);
        }
    }
    Ok(Tensor::stack(&terms, 0)?.sum_all()?.neg()?)
}

/// Draw `k` latents, redrawing any that coincide exactly with an earlier one.
///
/// Gives up with a degeneracy error once `budget` redraws are spent.
pub fn distinct_latents(
    k: usize,
    budget: usize,
    mut draw: impl FnMut() -> Result<Tensor>,
) -> Result<Tensor> {
    let mut picked: Vec<Tensor> = Vec::with_capacity(k);
    let mut redraws = 0;
    while picked.len() < k {
        let z = draw()?;
        let mut collides = false;
        for p in &picked {
            let d = (p - &z)?
                .abs()?
                .sum_all()?
                .to_dtype(DType::F64)?
                .to_scalar::<f64>()?;
            if d == 0.0 {
                collides = true;
                break;
            }
        }
        if collides {
            redraws += 1;
            if redraws > budget {
                return Err(ArtemisError::Degenerate(format!(
                    "could not draw {k} distinct latents within {budget} redraws"
                )));
            }
            continue;
        }
        picked.push(z);
    }
    Ok(Tensor::stack(&picked, 0)?)
}

/// Summed binary cross-entropy of probabilities against (soft) targets.
pub fn bce(probs: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if probs.shape() != targets.shape() {
        return Err(ArtemisError::shape(format!(
            "probabilities {:?} vs targets {:?}",
            probs.dims(),
            targets.dims()
        )));
    }
    let p = probs.clamp(LOG_FLOOR, 1.0 - LOG_FLOOR)?;
    let pos = (targets * p.log()?)?;
    let neg = (targets.affine(-1.0, 1.0)? * p.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.sum_all()?.neg()?)
}

/// Discriminator objective for one block: BCE of real outputs against the
/// (smoothed) real labels plus BCE of fake outputs against the fake labels.
pub fn discriminator_loss(
    d_real: &Tensor,
    d_fake: &Tensor,
    real_labels: &Tensor,
    fake_labels: &Tensor,
) -> Result<Tensor> {
    Ok((bce(d_real, real_labels)? + bce(d_fake, fake_labels)?)?)
}

/// `−Σ_block Σᵢ ln D_block(G(zᵢ))`, with outputs floored at [`LOG_FLOOR`].
pub fn generator_adversarial_loss(fake_outputs: &BTreeMap<BlockName, Tensor>) -> Result<Tensor> {
    if fake_outputs.is_empty() {
        return Err(ArtemisError::config("no discriminator outputs"));
    }
    let mut terms = Vec::with_capacity(fake_outputs.len());
    for (block, d) in fake_outputs {
        let min = d.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if min < LOG_FLOOR {
            log::warn!("{block} discriminator output {min:e} floored at {LOG_FLOOR:e} before log");
        }
        terms.push(d.clamp(LOG_FLOOR, 1.0)?.log()?.sum_all()?);
    }
    Ok(Tensor::stack(&terms, 0)?.sum_all()?.neg()?)
}

/// `λ_ga·L_GA + λ_dv·L_DV`, plus the reconstruction term when enabled.
pub fn total_generator_loss(
    l_ga: &Tensor,
    l_dv: &Tensor,
    l_ce: Option<&Tensor>,
    cfg: &TrainingConfig,
) -> Result<Tensor> {
    let base = ((l_ga * cfg.lambda_ga)? + (l_dv * cfg.lambda_dv)?)?;
    match (cfg.l_ce_mode, l_ce) {
        (LceMode::Off, _) => Ok(base),
        (LceMode::Reconstruction, Some(ce)) => Ok((base + ce)?),
        (LceMode::Reconstruction, None) => Err(ArtemisError::config(
            "l_ce_mode = reconstruction but no reconstruction term supplied",
        )),
    }
}

/// `n` draws of `η ~ N(0, σ²)`, the unclamped perturbation behind
/// [`smooth_labels`].
pub fn label_noise(n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let eta: f64 = StandardNormal.sample(rng);
            sigma * eta
        })
        .collect()
}

/// `clamp(y + η, 0, 1)` with `η` from [`label_noise`].
pub fn smooth_labels(labels: &[f32], sigma: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f32>> {
    if let Some(y) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(ArtemisError::config(format!("label {y} is not binary")));
    }
    let noise = label_noise(labels.len(), sigma, rng);
    Ok(labels
        .iter()
        .zip(noise)
        .map(|(&y, eta)| (y as f64 + eta).clamp(0.0, 1.0) as f32)
        .collect())
}
