use rand::Rng;
use rand_distr::StandardNormal;

use super::schedule::{forward_noise, DiffusionSchedule};
use super::{ConditionalDenoiser, DiffusionConfig, GuidanceConfig};
use crate::numcore::{AdamState, ParamSet};
use crate::rng::{substream, tags, StreamRng};
use crate::{Error, Result};

/// The randomness of one training item: timestep, target noise, and whether
/// the class was dropped to the null condition.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: usize,
    pub eps: Vec<f64>,
    pub dropped: bool,
}

pub fn draw_noise<R: Rng + ?Sized>(
    batch_len: usize,
    dim: usize,
    sched: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    rng: &mut R,
) -> Vec<NoiseDraw> {
    (0..batch_len)
        .map(|_| {
            let t = rng.random_range(1..=sched.timesteps());
            let eps = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let dropped =
                guidance.train_drop_prob > 0.0 && rng.random_bool(guidance.train_drop_prob);
            NoiseDraw { t, eps, dropped }
        })
        .collect()
}

/// Mean over the batch of `‖ε(x_t, c, t) − ε‖²` for fixed draws, with exact
/// gradients. Batch items are `(x_0 in data space, class)`.
pub fn ddpm_loss_with_draws(
    model: &ConditionalDenoiser,
    batch: &[(&[f64], usize)],
    draws: &[NoiseDraw],
    sched: &DiffusionSchedule,
) -> Result<(f64, ConditionalDenoiser)> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    if batch.len() != draws.len() {
        return Err(Error::input("one noise draw per batch item required"));
    }
    let inv_scale = 1.0 / model.data_scale();
    let n = batch.len() as f64;
    let mut grads = model.zeros_like();
    let mut loss = 0.0;
    for ((x0, class), draw) in batch.iter().zip(draws) {
        if *class >= model.num_classes() {
            return Err(Error::input(format!(
                "label {class} outside 0..{}",
                model.num_classes()
            )));
        }
        let scaled: Vec<f64> = x0.iter().map(|v| v * inv_scale).collect();
        let x_t = forward_noise(&scaled, draw.t, &draw.eps, sched)?;
        let condition = if draw.dropped {
            model.null_class()
        } else {
            *class
        };
        let (pred, cache) = model.forward(&x_t, draw.t, condition)?;
        let residual: Vec<f64> = pred.iter().zip(&draw.eps).map(|(p, e)| p - e).collect();
        loss += residual.iter().map(|r| r * r).sum::<f64>() / n;
        let out_grad: Vec<f64> = residual.iter().map(|r| 2.0 * r / n).collect();
        model.backward_accumulate(&cache, &out_grad, &mut grads)?;
    }
    if !loss.is_finite() {
        return Err(Error::Training(format!("non-finite diffusion loss {loss}")));
    }
    Ok((loss, grads))
}

/// Draws `(t, ε, drop)` per item from `rng` and evaluates the ε-prediction loss.
pub fn ddpm_loss_and_grads<R: Rng + ?Sized>(
    model: &ConditionalDenoiser,
    batch: &[(&[f64], usize)],
    sched: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    rng: &mut R,
) -> Result<(f64, ConditionalDenoiser)> {
    let draws = draw_noise(batch.len(), model.data_dim(), sched, guidance, rng);
    ddpm_loss_with_draws(model, batch, &draws, sched)
}

#[derive(Debug, Clone)]
pub struct TrainedDenoiser {
    pub model: ConditionalDenoiser,
    /// Mean loss over consecutive windows of 100 steps.
    pub loss_trace: Vec<f64>,
}

/// Root mean square of all coordinates; the model-space unit.
fn rms_scale(data: &[(&[f64], usize)]) -> f64 {
    let (sum, count) = data.iter().fold((0.0, 0usize), |(s, c), (x, _)| {
        (s + x.iter().map(|v| v * v).sum::<f64>(), c + x.len())
    });
    let rms = (sum / count.max(1) as f64).sqrt();
    if rms > 0.0 && rms.is_finite() {
        rms
    } else {
        1.0
    }
}

/// Trains a fresh denoiser, or continues from `init` when given.
///
/// Initialization uses the `DIFFUSION_INIT` substream of `seed`, minibatch
/// selection and noise the `DIFFUSION_TRAIN` substream.
pub fn train_denoiser(
    data: &[(&[f64], usize)],
    num_classes: usize,
    cfg: &DiffusionConfig,
    seed: u64,
    init: Option<ConditionalDenoiser>,
) -> Result<TrainedDenoiser> {
    cfg.validate()?;
    let sched = cfg.schedule()?;
    let dim = data
        .first()
        .map(|(x, _)| x.len())
        .ok_or_else(|| Error::input("no training data for the denoiser"))?;
    if let Some(bad) = data
        .iter()
        .find(|(x, c)| x.len() != dim || *c >= num_classes)
    {
        return Err(Error::input(format!(
            "training item of dimension {} with label {} does not fit ({dim}-d, {num_classes} classes)",
            bad.0.len(),
            bad.1
        )));
    }
    let mut model = match init {
        Some(m) => {
            if m.data_dim() != dim
                || m.num_classes() != num_classes
                || m.timesteps() != cfg.timesteps
            {
                return Err(Error::input(
                    "fine-tune model does not match the data or schedule",
                ));
            }
            m
        }
        None => {
            let mut init_rng = substream(seed, tags::DIFFUSION_INIT);
            ConditionalDenoiser::new(dim, num_classes, rms_scale(data), cfg, &mut init_rng)?
        }
    };
    let mut rng: StreamRng = substream(seed, tags::DIFFUSION_TRAIN);
    let mut adam = AdamState::new(cfg.adam, &model);
    let mut loss_trace = Vec::new();
    let mut window = 0.0;
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.train_steps {
        batch.clear();
        for _ in 0..cfg.batch_size {
            batch.push(data[rng.random_range(0..data.len())]);
        }
        let (loss, grads) = ddpm_loss_and_grads(&model, &batch, &sched, &cfg.guidance, &mut rng)?;
        adam.step(&mut model, &grads)?;
        window += loss;
        if (step + 1) % 100 == 0 {
            loss_trace.push(window / 100.0);
            window = 0.0;
        }
    }
    debug_assert!(model
        .slices()
        .iter()
        .all(|s| s.iter().all(|v| v.is_finite())));
    Ok(TrainedDenoiser { model, loss_trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> DiffusionConfig {
        DiffusionConfig {
            timesteps: 10,
            hidden: vec![6],
            time_dim: 4,
            class_dim: 3,
            ..DiffusionConfig::default()
        }
    }

    #[test]
    fn exact_residual_gives_zero_loss() {
        // Zero the trunk except the output bias, then make the drawn noise
        // equal that bias.
        let cfg = tiny_cfg();
        let sched = cfg.schedule().unwrap();
        let mut m = ConditionalDenoiser::new(2, 2, 1.0, &cfg, &mut substream(0, 0)).unwrap();
        m.trunk_mut().fill(0.0);
        let last = m.trunk().layers().len() - 1;
        m.trunk_mut().layers_mut()[last].bias = vec![0.4, -0.3];
        let x = [1.0, 2.0];
        let batch = [(&x[..], 1usize)];
        let draws = vec![NoiseDraw {
            t: 3,
            eps: vec![0.4, -0.3],
            dropped: false,
        }];
        let (loss, grads) = ddpm_loss_with_draws(&m, &batch, &draws, &sched).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_output_model_loss_concentrates_at_dimension() {
        let cfg = tiny_cfg();
        let sched = cfg.schedule().unwrap();
        let d = 3;
        let mut m = ConditionalDenoiser::new(d, 2, 1.0, &cfg, &mut substream(0, 0)).unwrap();
        m.trunk_mut().fill(0.0);
        let x = vec![0.5; d];
        let batch: Vec<(&[f64], usize)> = (0..20_000).map(|i| (&x[..], i % 2)).collect();
        let mut rng = substream(1, 2);
        let (loss, _) = ddpm_loss_and_grads(&m, &batch, &sched, &cfg.guidance, &mut rng).unwrap();
        assert!((loss - d as f64).abs() / (d as f64) < 0.05, "loss {loss}");
    }

    #[test]
    fn label_out_of_range_rejected() {
        let cfg = tiny_cfg();
        let sched = cfg.schedule().unwrap();
        let m = ConditionalDenoiser::new(2, 2, 1.0, &cfg, &mut substream(0, 0)).unwrap();
        let x = [0.0, 0.0];
        let mut rng = substream(0, 1);
        assert!(ddpm_loss_and_grads(&m, &[(&x[..], 2)], &sched, &cfg.guidance, &mut rng).is_err());
    }

    #[test]
    fn drop_probability_is_respected() {
        let cfg = tiny_cfg();
        let sched = cfg.schedule().unwrap();
        let mut rng = substream(4, 4);
        let draws = draw_noise(20_000, 2, &sched, &cfg.guidance, &mut rng);
        let frac = draws.iter().filter(|d| d.dropped).count() as f64 / 20_000.0;
        assert!((frac - 0.1).abs() < 0.01, "{frac}");
        assert!(draws.iter().all(|d| (1..=10).contains(&d.t)));
        let none = GuidanceConfig {
            train_drop_prob: 0.0,
            ..cfg.guidance
        };
        assert!(draw_noise(1000, 2, &sched, &none, &mut rng)
            .iter()
            .all(|d| !d.dropped));
    }
}
