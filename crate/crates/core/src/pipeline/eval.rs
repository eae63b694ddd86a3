use serde::{Deserialize, Serialize};

use crate::data::{
    generate_mixture, split_semi, BayesClassifier, HiddenTruth, LabeledData, MixtureSpec,
    SemiDataset,
};
use crate::diffusion::ConditionalDenoiser;
use crate::metrics::{
    confusion, generation_report, per_class_pr, ClassStats, ConfusionMatrix, GenerationReport,
};
use crate::rng::{substream, tags};
use crate::ssl::{extract_features, predict, LinearProbe, MsnState};
use crate::Result;

use super::config::RunConfig;
use super::stages::sample_classes;

/// Training mixture and its Bayes rule.
pub fn generate_dataset(cfg: &RunConfig) -> Result<(LabeledData, BayesClassifier)> {
    generate_mixture(&cfg.mixture, &mut substream(cfg.data_seed(), tags::MIXTURE))
}

/// An independent draw from the same mixture, `heldout_per_class` per class.
pub fn generate_heldout(cfg: &RunConfig) -> Result<LabeledData> {
    let spec = MixtureSpec {
        samples_per_class: cfg.pipeline.heldout_per_class,
        ..cfg.mixture.clone()
    };
    Ok(generate_mixture(&spec, &mut substream(cfg.data_seed(), tags::HELDOUT))?.0)
}

pub fn make_split(cfg: &RunConfig, data: &LabeledData) -> Result<(SemiDataset, HiddenTruth)> {
    split_semi(
        data,
        &cfg.split,
        &mut substream(cfg.split_seed(), tags::SPLIT),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeEval {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub class_stats: Vec<ClassStats>,
    pub predictions: Vec<usize>,
}

pub fn evaluate_probe<S: AsRef<[f64]> + Sync>(
    msn: &MsnState,
    probe: &LinearProbe,
    xs: &[S],
    truth: &[usize],
) -> Result<ProbeEval> {
    let (predictions, _) = predict(probe, &extract_features(msn, xs)?)?;
    let cm = confusion(truth, &predictions, probe.num_classes())?;
    Ok(ProbeEval {
        accuracy: cm.accuracy().unwrap_or(0.0),
        class_stats: per_class_pr(&cm),
        confusion: cm,
        predictions,
    })
}

/// Fréchet and agreement scores of `eval_samples_per_class` generated points
/// per class against held-out real data. S₂ is a prefix of these samples.
pub fn evaluate_generator(
    model: &ConditionalDenoiser,
    cfg: &RunConfig,
    heldout: &LabeledData,
    bayes: &BayesClassifier,
) -> Result<GenerationReport> {
    let generated = sample_classes(model, cfg, 0, cfg.pipeline.eval_samples_per_class)?;
    generation_report(heldout, &generated, |x| bayes.classify(x))
}
