#![allow(dead_code)]

//! Test-only oracles. Nothing here calls back into the analytic gradient code.

use dpt_core::diffusion::{
    ddpm_loss_with_draws, draw_noise, ConditionalDenoiser, DiffusionConfig, DiffusionSchedule,
    NoiseDraw,
};
use dpt_core::numcore::{Activation, MlpParams, ParamSet};
use dpt_core::rng::substream;
use dpt_core::ssl::{
    make_views, msn_loss_frozen, target_assignments, MsnConfig, MsnOnline, MsnState,
};
use rand::Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-5;

/// Central differences of `f` at `x`.
pub fn central_differences(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Random small MLP; returns (analytic param grad, fd param grad, analytic input grad, fd input grad).
pub fn mlp_instance(seed: u64) -> (f64, f64, usize) {
    let mut rng = substream(seed, 100);
    let act = if seed.is_multiple_of(2) {
        Activation::Tanh
    } else {
        Activation::SmoothRelu
    };
    let dims: &[usize] = match seed % 3 {
        0 => &[2, 4, 3],
        1 => &[3, 5, 4, 2],
        _ => &[4, 6, 3],
    };
    let net = MlpParams::new(dims, act, &mut rng).unwrap();
    let mut net = net;
    let biased: Vec<f64> = net
        .flat()
        .iter()
        .map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    net.set_flat(&biased);
    let x = gaussian_vec(&mut rng, dims[0]);
    let weights = gaussian_vec(&mut rng, *dims.last().unwrap());
    let loss_of = |out: &[f64]| out.iter().zip(&weights).map(|(o, w)| o * w).sum::<f64>();

    let (_, cache) = net.forward(&x).unwrap();
    let (grads, input_grad) = net.backward(&cache, &weights).unwrap();

    let theta = net.flat();
    let fd_params = central_differences(
        |p| {
            let mut n = net.clone();
            n.set_flat(p);
            loss_of(&n.predict(&x).unwrap())
        },
        &theta,
        FD_STEP,
    );
    let fd_input = central_differences(|xi| loss_of(&net.predict(xi).unwrap()), &x, FD_STEP);
    (
        relative_error(&grads.flat(), &fd_params),
        relative_error(&input_grad, &fd_input),
        net.num_params(),
    )
}

/// Random tiny denoiser with frozen noise draws; returns (relative error, parameter count).
pub fn ddpm_instance(seed: u64) -> (f64, usize) {
    let cfg = DiffusionConfig {
        timesteps: 20,
        beta_start: 1e-3,
        beta_end: 0.2,
        hidden: vec![5],
        activation: if seed.is_multiple_of(2) {
            Activation::SmoothRelu
        } else {
            Activation::Tanh
        },
        time_dim: 4,
        class_dim: 3,
        ..DiffusionConfig::default()
    };
    let sched = DiffusionSchedule::linear(cfg.timesteps, cfg.beta_start, cfg.beta_end).unwrap();
    let mut rng = substream(seed, 200);
    let model = ConditionalDenoiser::new(2, 3, 1.7, &cfg, &mut rng).unwrap();
    let xs: Vec<Vec<f64>> = (0..4).map(|_| gaussian_vec(&mut rng, 2)).collect();
    let batch: Vec<(&[f64], usize)> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| (x.as_slice(), i % 3))
        .collect();
    let mut draws: Vec<NoiseDraw> = draw_noise(batch.len(), 2, &sched, &cfg.guidance, &mut rng);
    // Always exercise the null-condition path in at least one item.
    draws[0].dropped = true;

    let (_, grads) = ddpm_loss_with_draws(&model, &batch, &draws, &sched).unwrap();
    let fd = central_differences(
        |p| {
            let mut m = model.clone();
            m.set_flat(p);
            ddpm_loss_with_draws(&m, &batch, &draws, &sched).unwrap().0
        },
        &model.flat(),
        FD_STEP,
    );
    (relative_error(&grads.flat(), &fd), model.num_params())
}

/// Random tiny encoder with frozen views and frozen target assignments.
pub fn msn_instance(seed: u64) -> (f64, usize) {
    let cfg = MsnConfig {
        hidden: vec![5],
        feature_dim: 4,
        prototypes: Some(5),
        activation: if seed.is_multiple_of(2) {
            Activation::SmoothRelu
        } else {
            Activation::Tanh
        },
        // Milder temperatures keep the softmax away from saturation so the
        // finite-difference reference itself stays accurate.
        tau: 0.5,
        tau_target: 0.25,
        entropy_weight: 0.5 + (seed % 3) as f64 * 0.5,
        ..MsnConfig::default()
    };
    let mut rng = substream(seed, 300);
    let state = MsnState::new(2, 2, &cfg, &mut rng).unwrap();
    let xs: Vec<Vec<f64>> = (0..3).map(|_| gaussian_vec(&mut rng, 2)).collect();
    let views: Vec<_> = xs.iter().map(|x| make_views(x, &cfg, &mut rng)).collect();
    let targets: Vec<Vec<f64>> = views.iter().map(|v| v.target.clone()).collect();
    let target_probs = target_assignments(&state, &targets, &cfg).unwrap();
    let anchors: Vec<Vec<Vec<f64>>> = views.into_iter().map(|v| v.anchors).collect();

    let (_, grads) = msn_loss_frozen(&state.online, &anchors, &target_probs, &cfg).unwrap();
    let fd = central_differences(
        |p| {
            let mut online: MsnOnline = state.online.clone();
            online.set_flat(p);
            msn_loss_frozen(&online, &anchors, &target_probs, &cfg)
                .unwrap()
                .0
        },
        &state.online.flat(),
        FD_STEP,
    );
    (
        relative_error(&grads.flat(), &fd),
        state.online.num_params(),
    )
}
