//! Masked-siamese training on low-dimensional vectors.
//!
//! Anchor views are corrupted copies of an item (Gaussian jitter, then a
//! random subset of coordinates zeroed); the target view only gets jitter.
//! The anchor encoder's soft assignment to a learnable prototype bank is
//! pulled toward the target encoder's sharper assignment, while the entropy
//! of the mean anchor assignment is pushed up to keep every prototype in use.
//! The target encoder is an exponential moving average of the anchor encoder
//! and never receives gradients.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numcore::{
    dot, log_sum_exp, norm, softmax, Activation, AdamConfig, AdamState, MlpCache, MlpParams,
    ParamSet, Tensor2,
};
use crate::rng::{substream, tags, StreamRng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsnConfig {
    /// Anchor views per item.
    pub views: usize,
    pub mask_ratio: f64,
    pub noise_scale: f64,
    /// Anchor temperature.
    pub tau: f64,
    /// Target temperature.
    pub tau_target: f64,
    /// Weight of the mean-entropy regularizer.
    pub entropy_weight: f64,
    pub ema_decay: f64,
    /// Prototype count; `4 · classes` when absent.
    pub prototypes: Option<usize>,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for MsnConfig {
    fn default() -> Self {
        Self {
            views: 2,
            mask_ratio: 0.3,
            noise_scale: 0.1,
            tau: 0.1,
            tau_target: 0.025,
            entropy_weight: 1.0,
            ema_decay: 0.996,
            prototypes: None,
            hidden: vec![64, 64],
            feature_dim: 16,
            activation: Activation::SmoothRelu,
            epochs: 20,
            batch_size: 128,
            adam: AdamConfig::default(),
        }
    }
}

impl MsnConfig {
    pub fn num_prototypes(&self, num_classes: usize) -> usize {
        self.prototypes.unwrap_or(4 * num_classes)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.views == 0 {
            return Err(Error::config("need at least one anchor view"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config(format!(
                "mask_ratio must lie in [0, 1), got {}",
                self.mask_ratio
            )));
        }
        if self.noise_scale.is_nan() || self.noise_scale < 0.0 {
            return Err(Error::config("noise_scale must be non-negative"));
        }
        if !(self.tau > 0.0 && self.tau_target > 0.0) {
            return Err(Error::config("temperatures must be positive"));
        }
        if self.entropy_weight.is_nan() || self.entropy_weight < 0.0 {
            return Err(Error::config("entropy weight must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay must lie in [0, 1]"));
        }
        if self.num_prototypes(num_classes) < num_classes {
            return Err(Error::config("need at least one prototype per class"));
        }
        if self.feature_dim == 0 || self.batch_size == 0 || self.hidden.contains(&0) {
            return Err(Error::config(
                "encoder widths and batch size must be positive",
            ));
        }
        Ok(())
    }
}

/// The trainable half: anchor encoder and prototype bank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsnOnline {
    pub anchor: MlpParams,
    /// One prototype per row.
    pub prototypes: Tensor2,
}

impl MsnOnline {
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.fill(0.0);
        out
    }
}

impl ParamSet for MsnOnline {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.anchor.slices();
        out.push(self.prototypes.data());
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.anchor.slices_mut();
        out.push(self.prototypes.data_mut());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsnState {
    pub online: MsnOnline,
    /// EMA copy of the anchor encoder.
    pub target: MlpParams,
}

impl MsnState {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        num_classes: usize,
        cfg: &MsnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(num_classes)?;
        let mut dims = vec![input_dim];
        dims.extend(&cfg.hidden);
        dims.push(cfg.feature_dim);
        let anchor = MlpParams::new(&dims, cfg.activation, rng)?;
        let prototypes = Tensor2::glorot(cfg.num_prototypes(num_classes), cfg.feature_dim, rng);
        Ok(Self {
            target: anchor.clone(),
            online: MsnOnline { anchor, prototypes },
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.target.output_dim()
    }

    /// Fingerprint of everything the probe depends on (the target encoder).
    pub fn encoder_fingerprint(&self) -> String {
        self.target.fingerprint()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Views {
    pub anchors: Vec<Vec<f64>>,
    pub target: Vec<f64>,
}

/// `views` anchor views (jitter, then `⌈ρ·d⌉` coordinates zeroed) and one
/// jitter-only target view.
pub fn make_views<R: Rng + ?Sized>(x: &[f64], cfg: &MsnConfig, rng: &mut R) -> Views {
    let d = x.len();
    // Guard against ρ·d landing a hair above an integer.
    let masked = ((cfg.mask_ratio * d as f64) - 1e-9)
        .ceil()
        .clamp(0.0, d as f64) as usize;
    let jitter = |rng: &mut R| -> Vec<f64> {
        x.iter()
            .map(|v| v + cfg.noise_scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let anchors = (0..cfg.views)
        .map(|_| {
            let mut v = jitter(rng);
            for i in index::sample(rng, d, masked) {
                v[i] = 0.0;
            }
            v
        })
        .collect();
    let target = jitter(rng);
    Views { anchors, target }
}

fn unit(v: &[f64], what: &str) -> Result<(Vec<f64>, f64)> {
    let n = norm(v);
    if !n.is_finite() || n <= 0.0 {
        return Err(Error::numeric(format!(
            "{what} has zero or non-finite norm"
        )));
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

fn unit_prototypes(q: &Tensor2) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let mut rows = Vec::with_capacity(q.rows());
    let mut norms = Vec::with_capacity(q.rows());
    for (k, row) in q.iter_rows().enumerate() {
        let (u, n) = unit(row, &format!("prototype {k}"))?;
        rows.push(u);
        norms.push(n);
    }
    Ok((rows, norms))
}

/// Softmax over prototypes of `cos(feature, q_k) / τ`.
pub fn prototype_assignment(feature: &[f64], q: &Tensor2, tau: f64) -> Result<Vec<f64>> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::config("temperature must be positive"));
    }
    if feature.len() != q.cols() {
        return Err(Error::input("feature and prototype widths differ"));
    }
    let (f, _) = unit(feature, "feature")?;
    let (qn, _) = unit_prototypes(q)?;
    let logits: Vec<f64> = qn.iter().map(|qk| dot(&f, qk) / tau).collect();
    Ok(softmax(&logits))
}

/// `−Σ_k target_k · ln(pred_k)`, with `0 · ln 0 = 0`.
pub fn cross_entropy(target: &[f64], pred: &[f64]) -> f64 {
    target
        .iter()
        .zip(pred)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, p)| -t * p.ln())
        .sum()
}

pub fn entropy(p: &[f64]) -> f64 {
    cross_entropy(p, p)
}

/// Target-branch assignments for clean-ish target views at temperature τ′.
pub fn target_assignments(
    state: &MsnState,
    targets: &[Vec<f64>],
    cfg: &MsnConfig,
) -> Result<Vec<Vec<f64>>> {
    targets
        .iter()
        .map(|t| {
            prototype_assignment(
                &state.target.predict(t)?,
                &state.online.prototypes,
                cfg.tau_target,
            )
        })
        .collect()
}

struct AnchorPass {
    cache: MlpCache,
    unit_feature: Vec<f64>,
    feature_norm: f64,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

/// Loss and gradients for fixed anchor views and fixed target assignments.
///
/// `anchor_views[i]` are the views of item `i`, `target_probs[i]` its target
/// assignment. Target assignments are constants here, which is what keeps
/// gradients out of the target branch.
pub fn msn_loss_frozen(
    online: &MsnOnline,
    anchor_views: &[Vec<Vec<f64>>],
    target_probs: &[Vec<f64>],
    cfg: &MsnConfig,
) -> Result<(f64, MsnOnline)> {
    if anchor_views.is_empty() || anchor_views.len() != target_probs.len() {
        return Err(Error::input(
            "need one target assignment per item and a non-empty batch",
        ));
    }
    let num_views: usize = anchor_views.iter().map(Vec::len).sum();
    if num_views == 0 {
        return Err(Error::input("no anchor views"));
    }
    let protos = online.prototypes.rows();
    let (qn, q_norms) = unit_prototypes(&online.prototypes)?;
    let scale = 1.0 / num_views as f64;

    let mut passes = Vec::with_capacity(num_views);
    for views in anchor_views {
        for v in views {
            let (z, cache) = online.anchor.forward(v)?;
            let (unit_feature, feature_norm) = unit(&z, "anchor feature")?;
            let logits: Vec<f64> = qn
                .iter()
                .map(|qk| dot(&unit_feature, qk) / cfg.tau)
                .collect();
            let lse = log_sum_exp(&logits);
            let log_probs: Vec<f64> = logits.iter().map(|l| l - lse).collect();
            let probs = log_probs.iter().map(|l| l.exp()).collect();
            passes.push(AnchorPass {
                cache,
                unit_feature,
                feature_norm,
                probs,
                log_probs,
            });
        }
    }

    let mut mean_p = vec![0.0; protos];
    for pass in &passes {
        for (m, p) in mean_p.iter_mut().zip(&pass.probs) {
            *m += p * scale;
        }
    }
    let log_mean: Vec<f64> = mean_p
        .iter()
        .map(|m| if *m > 0.0 { m.ln() } else { 0.0 })
        .collect();

    let mut ce = 0.0;
    let mut pass_idx = 0;
    for (views, target) in anchor_views.iter().zip(target_probs) {
        if target.len() != protos {
            return Err(Error::input(
                "target assignment width differs from prototype count",
            ));
        }
        for _ in views {
            let lp = &passes[pass_idx].log_probs;
            ce -= scale * target.iter().zip(lp).map(|(t, l)| t * l).sum::<f64>();
            pass_idx += 1;
        }
    }
    let loss = ce - cfg.entropy_weight * entropy(&mean_p);
    if !loss.is_finite() {
        return Err(Error::Training(format!("non-finite prototype loss {loss}")));
    }

    let mut grads = online.zeros_like();
    let mut unit_q_grads = vec![vec![0.0; online.prototypes.cols()]; protos];
    let mut pass_idx = 0;
    for (views, target) in anchor_views.iter().zip(target_probs) {
        for _ in views {
            let pass = &passes[pass_idx];
            pass_idx += 1;
            let p = &pass.probs;
            let expected_log_mean: f64 = p.iter().zip(&log_mean).map(|(a, b)| a * b).sum();
            // dLoss/d(logit_k), then through the 1/τ scaling.
            let sim_grad: Vec<f64> = (0..protos)
                .map(|k| {
                    let d_ce = p[k] - target[k];
                    let d_ent = -cfg.entropy_weight * p[k] * (expected_log_mean - log_mean[k]);
                    scale * (d_ce + d_ent) / cfg.tau
                })
                .collect();
            let mut unit_f_grad = vec![0.0; pass.unit_feature.len()];
            for (k, g) in sim_grad.iter().enumerate() {
                for (uf, q) in unit_f_grad.iter_mut().zip(&qn[k]) {
                    *uf += g * q;
                }
                for (uq, f) in unit_q_grads[k].iter_mut().zip(&pass.unit_feature) {
                    *uq += g * f;
                }
            }
            let feature_grad =
                normalize_backward(&pass.unit_feature, pass.feature_norm, &unit_f_grad);
            online
                .anchor
                .backward_accumulate(&pass.cache, &feature_grad, &mut grads.anchor)?;
        }
    }
    for k in 0..protos {
        let g = normalize_backward(&qn[k], q_norms[k], &unit_q_grads[k]);
        grads.prototypes.row_mut(k).copy_from_slice(&g);
    }
    Ok((loss, grads))
}

/// Gradient through `u = v / ‖v‖`.
fn normalize_backward(u: &[f64], n: f64, grad_u: &[f64]) -> Vec<f64> {
    let proj = dot(u, grad_u);
    u.iter()
        .zip(grad_u)
        .map(|(ui, gi)| (gi - ui * proj) / n)
        .collect()
}

/// Draws views for every batch item, scores targets with the EMA encoder,
/// and returns the loss with gradients for the anchor encoder and prototypes.
pub fn msn_loss_and_grads<R: Rng + ?Sized>(
    state: &MsnState,
    batch: &[&[f64]],
    cfg: &MsnConfig,
    rng: &mut R,
) -> Result<(f64, MsnOnline)> {
    if batch.is_empty() {
        return Err(Error::input("empty batch"));
    }
    let views: Vec<Views> = batch.iter().map(|x| make_views(x, cfg, rng)).collect();
    let targets: Vec<Vec<f64>> = views.iter().map(|v| v.target.clone()).collect();
    let target_probs = target_assignments(state, &targets, cfg)?;
    let anchors: Vec<Vec<Vec<f64>>> = views.into_iter().map(|v| v.anchors).collect();
    msn_loss_frozen(&state.online, &anchors, &target_probs, cfg)
}

/// `target ← m · target + (1 − m) · online`, elementwise.
pub fn ema_update(target: &mut MlpParams, online: &MlpParams, decay: f64) -> Result<()> {
    let src = online.slices();
    let mut dst = target.slices_mut();
    if src.len() != dst.len() || src.iter().zip(&dst).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::input(
            "EMA target and online encoder differ in shape",
        ));
    }
    for (d, s) in dst.iter_mut().zip(&src) {
        for (t, o) in d.iter_mut().zip(s.iter()) {
            *t = decay * *t + (1.0 - decay) * o;
        }
    }
    Ok(())
}

/// Target-encoder outputs on clean inputs, one row per item.
pub fn extract_features<S: AsRef<[f64]> + Sync>(state: &MsnState, xs: &[S]) -> Result<Tensor2> {
    let rows: Vec<Vec<f64>> = xs
        .par_iter()
        .map(|x| state.target.predict(x.as_ref()))
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Ok(Tensor2::zeros(0, state.feature_dim()));
    }
    Tensor2::from_rows(&rows)
}

#[derive(Debug, Clone)]
pub struct TrainedMsn {
    pub state: MsnState,
    /// Mean loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Trains on unlabeled points. Initialization uses the `MSN_INIT` substream
/// of `seed`, shuffling and views the `MSN_TRAIN` substream.
pub fn train_msn(
    xs: &[&[f64]],
    num_classes: usize,
    cfg: &MsnConfig,
    seed: u64,
) -> Result<TrainedMsn> {
    let dim = xs
        .first()
        .map(|x| x.len())
        .ok_or_else(|| Error::input("no data for the encoder"))?;
    if xs.iter().any(|x| x.len() != dim) {
        return Err(Error::input("encoder inputs differ in dimension"));
    }
    let mut state = MsnState::new(dim, num_classes, cfg, &mut substream(seed, tags::MSN_INIT))?;
    let mut rng: StreamRng = substream(seed, tags::MSN_TRAIN);
    let mut adam = AdamState::new(cfg.adam, &state.online);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| xs[i]).collect();
            let (loss, grads) = msn_loss_and_grads(&state, &batch, cfg, &mut rng)?;
            adam.step(&mut state.online, &grads)?;
            ema_update(&mut state.target, &state.online.anchor, cfg.ema_decay)?;
            total += loss;
            batches += 1;
        }
        loss_trace.push(total / batches as f64);
    }
    Ok(TrainedMsn { state, loss_trace })
}
