//! Class-conditional DDPM with classifier-free guidance.
//!
//! The denoiser predicts the noise that was mixed into `x_0`; training draws a
//! timestep and a noise vector per item and, with a small probability,
//! replaces the class by the null condition so the same network also learns
//! the unconditional predictor that guidance needs at sampling time.

mod denoiser;
mod sampler;
mod schedule;
mod train;

pub use denoiser::{ConditionalDenoiser, DenoiserCache};
pub use sampler::{
    ancestral_step, ancestral_step_with, cfg_epsilon, sample, sample_range, sample_trajectory,
    Branches,
};
pub use schedule::{forward_noise, forward_noise_with, DiffusionSchedule, StepCoefficients};
pub use train::{
    ddpm_loss_and_grads, ddpm_loss_with_draws, draw_noise, train_denoiser, NoiseDraw,
    TrainedDenoiser,
};

use serde::{Deserialize, Serialize};

use crate::numcore::{Activation, AdamConfig};
use crate::{Error, Result};

/// Scale applied to `z` in the ancestral step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseScale {
    /// `σ_t · z`, the usual DDPM ancestral sampler.
    #[default]
    Sigma,
    /// `σ_t² · z`.
    SigmaSq,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Guidance strength ω; 0 disables guidance.
    pub omega: f64,
    /// Probability of swapping the class for the null condition during training.
    pub train_drop_prob: f64,
    pub noise_scale: NoiseScale,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            omega: 0.4,
            train_drop_prob: 0.1,
            noise_scale: NoiseScale::Sigma,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.omega.is_finite() || self.omega < -1.0 {
            return Err(Error::config(format!(
                "guidance strength must be >= -1, got {}",
                self.omega
            )));
        }
        if !(0.0..1.0).contains(&self.train_drop_prob) {
            return Err(Error::config(format!(
                "train_drop_prob must lie in [0, 1), got {}",
                self.train_drop_prob
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_dim: usize,
    pub class_dim: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub guidance: GuidanceConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
            hidden: vec![64, 64],
            activation: Activation::SmoothRelu,
            time_dim: 16,
            class_dim: 8,
            train_steps: 4000,
            batch_size: 128,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            guidance: GuidanceConfig::default(),
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.guidance.validate()?;
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::config("time_dim must be even and positive"));
        }
        if self.class_dim == 0 || self.batch_size == 0 || self.hidden.contains(&0) {
            return Err(Error::config(
                "diffusion widths and batch size must be positive",
            ));
        }
        if self.adam.lr.is_nan() || self.adam.lr <= 0.0 {
            return Err(Error::config("diffusion learning rate must be positive"));
        }
        Ok(())
    }
}
