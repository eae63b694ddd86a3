use crate::{Error, Result};

/// Per-timestep constants of the forward process, indexed `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

/// The constants the sampler needs at one timestep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub alpha_bar: f64,
    pub sigma: f64,
}

impl DiffusionSchedule {
    /// Linear β from `beta_start` at `t = 1` to `beta_end` at `t = T`, with
    /// `σ_t² = β_t`.
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::config(format!(
                "need at least 2 timesteps, got {timesteps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let span = (timesteps - 1) as f64;
        let betas = (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
            .collect();
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        }
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::input(format!(
                "timestep {t} outside 1..={}",
                self.timesteps()
            )));
        }
        Ok(t - 1)
    }

    pub fn coefficients(&self, t: usize) -> Result<StepCoefficients> {
        let i = self.index(t)?;
        Ok(StepCoefficients {
            alpha: self.alphas[i],
            beta: self.betas[i],
            alpha_bar: self.alpha_bars[i],
            sigma: self.sigmas[i],
        })
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigmas[self.index(t)?])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

/// `x_t = √ᾱ_t · x_0 + √(1 − ᾱ_t) · ε`.
pub fn forward_noise(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    sched: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    forward_noise_with(sched.alpha_bar(t)?, x0, eps)
}

pub fn forward_noise_with(alpha_bar: f64, x0: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::input("x0 and noise differ in length"));
    }
    let a = alpha_bar.sqrt();
    let s = (1.0 - alpha_bar).sqrt();
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
}
