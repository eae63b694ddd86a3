use std::collections::HashSet;

use crate::data::{CsvRow, Provenance, SemiDataset};
use crate::diffusion::{sample_range, train_denoiser, ConditionalDenoiser, TrainedDenoiser};
use crate::rng::{derive_seed, tags};
use crate::ssl::{
    extract_features, predict, train_msn, train_probe, LinearProbe, MsnState, TrainedMsn,
};
use crate::{Error, Result};

use super::config::RunConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeled {
    pub id: u64,
    pub x: Vec<f64>,
    pub label: usize,
}

/// S₁: every real item with the label the classifier assigned to it.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabeledSet {
    items: Vec<PseudoLabeled>,
    num_classes: usize,
}

impl PseudoLabeledSet {
    pub fn new(items: Vec<PseudoLabeled>, num_classes: usize) -> Result<Self> {
        let mut seen = HashSet::with_capacity(items.len());
        for item in &items {
            if !seen.insert(item.id) {
                return Err(Error::input(format!(
                    "duplicate id {} in pseudo-labeled set",
                    item.id
                )));
            }
            if item.label >= num_classes {
                return Err(Error::input(format!(
                    "pseudo label {} outside 0..{num_classes}",
                    item.label
                )));
            }
        }
        Ok(Self { items, num_classes })
    }

    pub fn items(&self) -> &[PseudoLabeled] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|i| i.label).collect()
    }

    pub fn pairs(&self) -> Vec<(&[f64], usize)> {
        self.items
            .iter()
            .map(|i| (i.x.as_slice(), i.label))
            .collect()
    }

    /// Classes that received no pseudo label at all.
    pub fn absent_classes(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for i in &self.items {
            counts[i.label] += 1;
        }
        (0..self.num_classes).filter(|&c| counts[c] == 0).collect()
    }

    pub fn to_rows(&self) -> Vec<CsvRow> {
        self.items
            .iter()
            .map(|i| CsvRow {
                id: i.id,
                label: Some(i.label),
                provenance: Provenance::Real,
                x: i.x.clone(),
            })
            .collect()
    }

    pub fn from_rows(rows: Vec<CsvRow>, num_classes: usize) -> Result<Self> {
        let items = rows
            .into_iter()
            .map(|r| {
                let label = r
                    .label
                    .ok_or_else(|| Error::input(format!("item {} has no pseudo label", r.id)))?;
                Ok(PseudoLabeled {
                    id: r.id,
                    x: r.x,
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(items, num_classes)
    }
}

/// S₂: exactly `k` generated points for every class.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoImageSet {
    per_class: Vec<Vec<Vec<f64>>>,
    k: usize,
}

impl PseudoImageSet {
    pub fn new(per_class: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let k = per_class.first().map_or(0, Vec::len);
        if per_class.iter().any(|c| c.len() != k) {
            return Err(Error::input(
                "pseudo sample set needs the same count for every class",
            ));
        }
        Ok(Self { per_class, k })
    }

    pub fn empty(num_classes: usize) -> Self {
        Self {
            per_class: vec![Vec::new(); num_classes],
            k: 0,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn len(&self) -> usize {
        self.k * self.per_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn per_class(&self) -> &[Vec<Vec<f64>>] {
        &self.per_class
    }

    /// The first `k` points of each class.
    pub fn prefix(&self, k: usize) -> Result<Self> {
        if k > self.k {
            return Err(Error::input(format!(
                "asked for {k} pseudo samples per class, only {} exist",
                self.k
            )));
        }
        Ok(Self {
            per_class: self.per_class.iter().map(|c| c[..k].to_vec()).collect(),
            k,
        })
    }

    /// Class-major `(x, class)` pairs.
    pub fn pairs(&self) -> Vec<(&[f64], usize)> {
        self.per_class
            .iter()
            .enumerate()
            .flat_map(|(y, pts)| pts.iter().map(move |x| (x.as_slice(), y)))
            .collect()
    }

    /// Ids run `0..K·C` in class-major order.
    pub fn to_rows(&self) -> Vec<CsvRow> {
        self.pairs()
            .into_iter()
            .enumerate()
            .map(|(id, (x, y))| CsvRow {
                id: id as u64,
                label: Some(y),
                provenance: Provenance::Pseudo,
                x: x.to_vec(),
            })
            .collect()
    }

    pub fn from_rows(rows: Vec<CsvRow>, num_classes: usize) -> Result<Self> {
        let mut per_class = vec![Vec::new(); num_classes];
        for r in rows {
            match r.label {
                Some(y) if y < num_classes => per_class[y].push(r.x),
                other => {
                    return Err(Error::input(format!(
                        "pseudo sample {} has label {other:?}",
                        r.id
                    )))
                }
            }
        }
        Self::new(per_class)
    }
}

/// The labeled part of `data` in item order: the probe's real training set.
pub fn labeled_training_set(data: &SemiDataset) -> (Vec<&[f64]>, Vec<usize>) {
    data.labeled()
        .map(|(item, y)| (item.x.as_slice(), y))
        .unzip()
}

fn require_all_classes_labeled(data: &SemiDataset) -> Result<()> {
    let counts = data.labels_per_class();
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::config(format!("class {c} has no labeled item")));
    }
    Ok(())
}

/// Self-supervised encoder on all of X, then a probe on the labeled subset.
pub fn train_classifier(data: &SemiDataset, cfg: &RunConfig) -> Result<(TrainedMsn, LinearProbe)> {
    require_all_classes_labeled(data)?;
    let msn = train_msn(&data.all_x(), data.num_classes(), &cfg.msn, cfg.seed)?;
    let (xs, ys) = labeled_training_set(data);
    let features = extract_features(&msn.state, &xs)?;
    let probe = train_probe(&features, &ys, data.num_classes(), &cfg.probe)?;
    Ok((msn, probe))
}

/// Probe predictions for every item, labeled ones included.
pub fn pseudo_label(
    data: &SemiDataset,
    msn: &MsnState,
    probe: &LinearProbe,
) -> Result<PseudoLabeledSet> {
    let features = extract_features(msn, &data.all_x())?;
    let (labels, _) = predict(probe, &features)?;
    let items = data
        .items()
        .iter()
        .zip(labels)
        .map(|(item, label)| PseudoLabeled {
            id: item.id,
            x: item.x.clone(),
            label,
        })
        .collect();
    PseudoLabeledSet::new(items, data.num_classes())
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub msn: TrainedMsn,
    pub probe: LinearProbe,
    pub s1: PseudoLabeledSet,
}

pub fn stage1_train_and_label(data: &SemiDataset, cfg: &RunConfig) -> Result<Stage1Output> {
    let (msn, probe) = train_classifier(data, cfg)?;
    let s1 = pseudo_label(data, &msn.state, &probe)?;
    Ok(Stage1Output { msn, probe, s1 })
}

/// Seed of the sampling substream; trajectory `i` of class `y` is fixed by it.
pub fn sample_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, tags::DIFFUSION_SAMPLE)
}

/// Conditional denoiser on the (x, ŷ) pairs of S₁; `init` continues training.
pub fn train_diffusion(
    s1: &PseudoLabeledSet,
    cfg: &RunConfig,
    init: Option<ConditionalDenoiser>,
) -> Result<TrainedDenoiser> {
    if s1.is_empty() {
        return Err(Error::input("pseudo-labeled set is empty"));
    }
    train_denoiser(
        &s1.pairs(),
        s1.num_classes(),
        &cfg.diffusion,
        cfg.seed,
        init,
    )
}

/// Points `start..start+count` of every class under a uniform class prior.
pub fn sample_classes(
    model: &ConditionalDenoiser,
    cfg: &RunConfig,
    start: usize,
    count: usize,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let sched = cfg.diffusion.schedule()?;
    let seed = sample_seed(cfg);
    (0..model.num_classes())
        .map(|y| {
            sample_range(
                model,
                Some(y),
                &sched,
                &cfg.diffusion.guidance,
                seed,
                start,
                count,
            )
        })
        .collect()
}

pub fn sample_pseudo(
    model: &ConditionalDenoiser,
    cfg: &RunConfig,
    k: usize,
) -> Result<PseudoImageSet> {
    PseudoImageSet::new(sample_classes(model, cfg, 0, k)?)
}

/// Grows `s2` to `k` per class; existing points are kept since they are the
/// same trajectories a fresh request would produce.
pub fn extend_pseudo(
    model: &ConditionalDenoiser,
    cfg: &RunConfig,
    s2: &PseudoImageSet,
    k: usize,
) -> Result<PseudoImageSet> {
    if k <= s2.k() {
        return s2.prefix(k);
    }
    let extra = sample_classes(model, cfg, s2.k(), k - s2.k())?;
    let per_class = s2.per_class().iter().cloned().zip(extra).map(|(mut a, b)| {
        a.extend(b);
        a
    });
    PseudoImageSet::new(per_class.collect())
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub denoiser: TrainedDenoiser,
    pub s2: PseudoImageSet,
    /// Classes with no pseudo-labeled training item; still sampled.
    pub absent_classes: Vec<usize>,
}

pub fn stage2_train_and_sample(
    s1: &PseudoLabeledSet,
    cfg: &RunConfig,
    k: usize,
) -> Result<Stage2Output> {
    let denoiser = train_diffusion(s1, cfg, None)?;
    let s2 = sample_pseudo(&denoiser.model, cfg, k)?;
    Ok(Stage2Output {
        denoiser,
        s2,
        absent_classes: s1.absent_classes(),
    })
}

/// Fresh probe on frozen features of S ∪ S₂, real labels first.
pub fn stage3_retrain(
    msn: &MsnState,
    data: &SemiDataset,
    s2: &PseudoImageSet,
    cfg: &RunConfig,
) -> Result<LinearProbe> {
    let (mut xs, mut ys) = labeled_training_set(data);
    for (x, y) in s2.pairs() {
        xs.push(x);
        ys.push(y);
    }
    let features = extract_features(msn, &xs)?;
    train_probe(&features, &ys, data.num_classes(), &cfg.probe)
}

/// Everything downstream of the frozen encoder.
#[derive(Debug, Clone)]
pub struct PipelineState {
    pub msn: MsnState,
    pub probe: LinearProbe,
    pub s1: PseudoLabeledSet,
    pub denoiser: ConditionalDenoiser,
    pub s2: PseudoImageSet,
}

/// One refinement round: relabel with the current probe, retrain the
/// denoiser, resample, retrain the probe.
pub fn refine_round(
    state: &PipelineState,
    data: &SemiDataset,
    cfg: &RunConfig,
) -> Result<PipelineState> {
    let s1 = pseudo_label(data, &state.msn, &state.probe)?;
    let init = cfg.pipeline.fine_tune.then(|| state.denoiser.clone());
    let denoiser = train_diffusion(&s1, cfg, init)?.model;
    let s2 = sample_pseudo(&denoiser, cfg, cfg.pipeline.k)?;
    let probe = stage3_retrain(&state.msn, data, &s2, cfg)?;
    Ok(PipelineState {
        msn: state.msn.clone(),
        probe,
        s1,
        denoiser,
        s2,
    })
}

pub fn stage4_refine(
    state: PipelineState,
    data: &SemiDataset,
    cfg: &RunConfig,
    rounds: usize,
) -> Result<PipelineState> {
    (0..rounds).try_fold(state, |s, _| refine_round(&s, data, cfg))
}
