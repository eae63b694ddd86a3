use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::schedule::{DiffusionSchedule, StepCoefficients};
use super::{ConditionalDenoiser, GuidanceConfig, NoiseScale};
use crate::rng::{substream, StreamRng};
use crate::{Error, Result};

/// Guided noise estimate `(1 + ω)·ε_cond − ω·ε_uncond`.
///
/// Evaluated as `ε_cond + ω·(ε_cond − ε_uncond)` so that ω = 0 and
/// `ε_cond == ε_uncond` both return `ε_cond` exactly.
pub fn cfg_epsilon(eps_cond: &[f64], eps_uncond: &[f64], omega: f64) -> Vec<f64> {
    debug_assert_eq!(eps_cond.len(), eps_uncond.len());
    eps_cond
        .iter()
        .zip(eps_uncond)
        .map(|(c, u)| c + omega * (c - u))
        .collect()
}

/// One reverse step:
/// `x_{t-1} = (x_t − β_t/√(1 − ᾱ_t) · ε̃) / √α_t + s_t · z`, where `s_t` is
/// `σ_t` or `σ_t²` depending on `noise_scale`.
pub fn ancestral_step(
    x_t: &[f64],
    eps: &[f64],
    t: usize,
    sched: &DiffusionSchedule,
    z: &[f64],
    noise_scale: NoiseScale,
) -> Result<Vec<f64>> {
    ancestral_step_with(sched.coefficients(t)?, x_t, eps, z, noise_scale)
}

pub fn ancestral_step_with(
    c: StepCoefficients,
    x_t: &[f64],
    eps: &[f64],
    z: &[f64],
    noise_scale: NoiseScale,
) -> Result<Vec<f64>> {
    if x_t.len() != eps.len() || x_t.len() != z.len() {
        return Err(Error::input("ancestral step inputs differ in length"));
    }
    let inv_sqrt_alpha = 1.0 / c.alpha.sqrt();
    // With β_t = 0 the drift coefficient is 0 regardless of ᾱ_t.
    let eps_coef = if c.beta == 0.0 {
        0.0
    } else {
        c.beta / (1.0 - c.alpha_bar).sqrt()
    };
    let noise_coef = match noise_scale {
        NoiseScale::Sigma => c.sigma,
        NoiseScale::SigmaSq => c.sigma * c.sigma,
    };
    Ok(x_t
        .iter()
        .zip(eps)
        .zip(z)
        .map(|((x, e), zi)| inv_sqrt_alpha * (x - eps_coef * e) + noise_coef * zi)
        .collect())
}

/// Which predictor evaluations a guided step performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branches {
    /// Conditional and unconditional, combined by [`cfg_epsilon`].
    Guided,
    /// Conditional only; the guided estimate with ω = 0.
    ConditionalOnly,
}

/// Runs one reverse trajectory from `x_T ~ N(0, I)` down to `x_0` and returns
/// it in data space. `class = None` samples from the null condition.
pub fn sample_trajectory(
    model: &ConditionalDenoiser,
    class: Option<usize>,
    sched: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    rng: &mut StreamRng,
    branches: Branches,
) -> Result<Vec<f64>> {
    if sched.timesteps() != model.timesteps() {
        return Err(Error::input(format!(
            "schedule has {} steps, model was built for {}",
            sched.timesteps(),
            model.timesteps()
        )));
    }
    let null = model.null_class();
    let condition = match class {
        Some(c) if c >= model.num_classes() => {
            return Err(Error::input(format!(
                "class {c} outside 0..{}",
                model.num_classes()
            )))
        }
        Some(c) => c,
        None => null,
    };
    let d = model.data_dim();
    let mut x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let zeros = vec![0.0; d];
    for t in (1..=sched.timesteps()).rev() {
        let eps_cond = model.predict(&x, t, condition)?;
        let eps = if branches == Branches::Guided && condition != null {
            let eps_uncond = model.predict(&x, t, null)?;
            cfg_epsilon(&eps_cond, &eps_uncond, guidance.omega)
        } else {
            eps_cond
        };
        let z: Vec<f64> = if t > 1 {
            (0..d).map(|_| rng.sample(StandardNormal)).collect()
        } else {
            zeros.clone()
        };
        x = ancestral_step(&x, &eps, t, sched, &z, guidance.noise_scale)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sampling { t });
        }
    }
    let scale = model.data_scale();
    Ok(x.into_iter().map(|v| v * scale).collect())
}

fn trajectory_tag(condition: usize, index: usize) -> u64 {
    ((condition as u64) << 32) | index as u64
}

/// Samples `count` items starting at trajectory index `start`.
///
/// Trajectory `i` of a condition always draws from the same substream of
/// `seed`, so a request for `n` items is a prefix of any larger request and
/// results do not depend on how work is split across threads.
pub fn sample_range(
    model: &ConditionalDenoiser,
    class: Option<usize>,
    sched: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    seed: u64,
    start: usize,
    count: usize,
) -> Result<Vec<Vec<f64>>> {
    let condition = class.unwrap_or(model.null_class());
    let branches = if guidance.omega == 0.0 {
        Branches::ConditionalOnly
    } else {
        Branches::Guided
    };
    (start..start + count)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, trajectory_tag(condition, i));
            sample_trajectory(model, class, sched, guidance, &mut rng, branches)
        })
        .collect()
}

pub fn sample(
    model: &ConditionalDenoiser,
    class: Option<usize>,
    sched: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    seed: u64,
    n: usize,
) -> Result<Vec<Vec<f64>>> {
    sample_range(model, class, sched, guidance, seed, 0, n)
}
