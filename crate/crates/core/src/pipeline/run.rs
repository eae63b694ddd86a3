use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{
    read_rows_from_path, write_rows_to_path, BayesClassifier, CsvRow, HiddenTruth, LabeledData,
    Provenance, SemiDataset, SemiItem,
};
use crate::diffusion::ConditionalDenoiser;
use crate::metrics::{
    pr_delta, write_class_stats_csv, write_sorted_delta_csv, ClassStats, PrDeltaReport,
};
use crate::numcore::{load_checkpoint, save_checkpoint};
use crate::rng::{derive_seed, tags};
use crate::ssl::{LinearProbe, MsnState};
use crate::{Error, Result};

use super::config::RunConfig;
use super::eval::{
    evaluate_generator, evaluate_probe, generate_dataset, generate_heldout, make_split, ProbeEval,
};
use super::stages::{
    extend_pseudo, pseudo_label, refine_round, sample_pseudo, stage3_retrain, train_classifier,
    train_diffusion, PipelineState, PseudoImageSet, PseudoLabeledSet,
};

pub const MANIFEST_FORMAT: &str = "dpt-manifest";
pub const MANIFEST_VERSION: u32 = 1;

const KIND_MSN: &str = "msn-state";
const KIND_PROBE: &str = "linear-probe";
const KIND_DENOISER: &str = "conditional-denoiser";

/// Relative artifact locations inside a run directory.
pub mod paths {
    pub const TRAIN: &str = "data/train.csv";
    pub const TRUTH: &str = "data/truth.csv";
    pub const HELDOUT: &str = "data/heldout.csv";
    pub const MSN: &str = "stage1/msn.json";
    pub const PROBE1: &str = "stage1/probe.json";
    pub const S1: &str = "stage1/s1.csv";
    pub const DENOISER: &str = "stage2/denoiser.json";
    pub const S2: &str = "stage2/s2.csv";
    pub const PROBE3: &str = "stage3/probe.json";
    pub const MANIFEST: &str = "manifest.json";
    pub const TIMINGS: &str = "timings.json";

    pub fn grid_probe(k: usize) -> String {
        format!("stage3/k{k}/probe.json")
    }

    pub fn round(r: usize, file: &str) -> String {
        format!("stage4/round{r}/{file}")
    }

    pub fn summary(step: &str) -> String {
        format!("summaries/{step}.json")
    }
}

/// The stage boundaries, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    GenData,
    TrainClassifier,
    PseudoLabel,
    TrainDiffusion,
    Sample,
    RetrainProbe,
    Refine,
    Evaluate,
}

impl Step {
    pub const ALL: [Step; 8] = [
        Step::GenData,
        Step::TrainClassifier,
        Step::PseudoLabel,
        Step::TrainDiffusion,
        Step::Sample,
        Step::RetrainProbe,
        Step::Refine,
        Step::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Step::GenData => "gen-data",
            Step::TrainClassifier => "train-classifier",
            Step::PseudoLabel => "pseudo-label",
            Step::TrainDiffusion => "train-diffusion",
            Step::Sample => "sample",
            Step::RetrainProbe => "retrain-probe",
            Step::Refine => "refine",
            Step::Evaluate => "evaluate",
        }
    }
}

/// What a step left on disk, mirrored into `summaries/<step>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: String,
    /// Files written by the step, summary file last.
    pub artifacts: Vec<String>,
    pub metrics: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: RunConfig,
    /// Derived substream seeds by tag name.
    pub seeds: BTreeMap<String, u64>,
    /// Every file written by the run except the manifest itself, sorted.
    pub artifacts: Vec<String>,
    pub stages: Vec<StepSummary>,
    pub checks: Vec<Check>,
    pub checks_passed: bool,
}

/// A config bound to the directory its artifacts live in.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub cfg: RunConfig,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Skip steps whose summary already exists in the run directory.
    pub reuse_existing: bool,
}

impl RunContext {
    pub fn new(cfg: RunConfig, dir: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            dir: dir.into(),
        })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn write_json<T: Serialize>(
        &self,
        rel: &str,
        value: &T,
        written: &mut Vec<String>,
    ) -> Result<()> {
        let path = self.path(rel);
        ensure_parent(&path)?;
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(path, text)?;
        written.push(rel.to_string());
        Ok(())
    }

    fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<T> {
        let path = self.path(rel);
        let text = fs::read_to_string(&path).map_err(|e| not_found_as_missing(e, &path))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write_rows(&self, rel: &str, rows: &[CsvRow], written: &mut Vec<String>) -> Result<()> {
        write_rows_to_path(&self.path(rel), rows)?;
        written.push(rel.to_string());
        Ok(())
    }

    fn write_with<F>(&self, rel: &str, written: &mut Vec<String>, f: F) -> Result<()>
    where
        F: FnOnce(fs::File) -> Result<()>,
    {
        let path = self.path(rel);
        ensure_parent(&path)?;
        f(fs::File::create(path)?)?;
        written.push(rel.to_string());
        Ok(())
    }

    fn save<T: Serialize + DeserializeOwned + Clone>(
        &self,
        rel: &str,
        kind: &str,
        value: &T,
        written: &mut Vec<String>,
    ) -> Result<()> {
        save_checkpoint(&self.path(rel), kind, value)?;
        written.push(rel.to_string());
        Ok(())
    }

    pub fn load_semi(&self) -> Result<SemiDataset> {
        let rows = read_rows_from_path(&self.path(paths::TRAIN))?;
        let items = rows
            .into_iter()
            .map(|r| SemiItem {
                id: r.id,
                x: r.x,
                label: r.label,
            })
            .collect();
        SemiDataset::new(items, self.cfg.num_classes())
    }

    pub fn load_truth(&self) -> Result<HiddenTruth> {
        let rows = read_rows_from_path(&self.path(paths::TRUTH))?;
        let mut labels = vec![usize::MAX; rows.len()];
        for r in rows {
            match (labels.get_mut(r.id as usize), r.label) {
                (Some(slot), Some(l)) => *slot = l,
                _ => return Err(Error::input(format!("truth row {} is malformed", r.id))),
            }
        }
        Ok(HiddenTruth::new(labels))
    }

    pub fn load_heldout(&self) -> Result<LabeledData> {
        let rows = read_rows_from_path(&self.path(paths::HELDOUT))?;
        let (xs, labels) = rows
            .into_iter()
            .map(|r| {
                r.label
                    .map(|l| (r.x, l))
                    .ok_or_else(|| Error::input(format!("held-out row {} has no label", r.id)))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok(LabeledData {
            xs,
            labels,
            num_classes: self.cfg.num_classes(),
        })
    }

    pub fn load_msn(&self) -> Result<MsnState> {
        load_checkpoint(&self.path(paths::MSN), KIND_MSN)
    }

    pub fn load_probe(&self, rel: &str) -> Result<LinearProbe> {
        load_checkpoint(&self.path(rel), KIND_PROBE)
    }

    pub fn load_denoiser(&self, rel: &str) -> Result<ConditionalDenoiser> {
        load_checkpoint(&self.path(rel), KIND_DENOISER)
    }

    pub fn load_s1(&self, rel: &str) -> Result<PseudoLabeledSet> {
        PseudoLabeledSet::from_rows(
            read_rows_from_path(&self.path(rel))?,
            self.cfg.num_classes(),
        )
    }

    pub fn load_s2(&self, rel: &str) -> Result<PseudoImageSet> {
        PseudoImageSet::from_rows(
            read_rows_from_path(&self.path(rel))?,
            self.cfg.num_classes(),
        )
    }

    pub fn load_summary(&self, step: Step) -> Result<StepSummary> {
        self.read_json(&paths::summary(step.name()))
    }

    /// Probe, pseudo labels and generator after the last refinement round
    /// (stage 3 and stage 2 outputs when there is none).
    fn final_paths(&self) -> (String, String, String) {
        match self.cfg.pipeline.refinement_rounds {
            0 => (
                paths::PROBE3.into(),
                paths::S1.into(),
                paths::DENOISER.into(),
            ),
            r => (
                paths::round(r, "probe.json"),
                paths::round(r, "s1.csv"),
                paths::round(r, "denoiser.json"),
            ),
        }
    }

    /// Derived substream seeds, by tag name.
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        tags::TABLE
            .iter()
            .map(|&(name, tag)| {
                let base = match tag {
                    tags::MIXTURE | tags::HELDOUT => self.cfg.data_seed(),
                    tags::SPLIT => self.cfg.split_seed(),
                    _ => self.cfg.seed,
                };
                (name.to_string(), derive_seed(base, tag))
            })
            .collect()
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn not_found_as_missing(e: std::io::Error, path: &Path) -> Error {
    match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    }
}

fn finish(
    ctx: &RunContext,
    step: Step,
    mut written: Vec<String>,
    metrics: Value,
) -> Result<StepSummary> {
    let rel = paths::summary(step.name());
    written.push(rel.clone());
    let summary = StepSummary {
        step: step.name().into(),
        artifacts: written,
        metrics,
    };
    ctx.write_json(&rel, &summary, &mut Vec::new())?;
    Ok(summary)
}

/// Runs one step against the artifacts already in the run directory.
pub fn run_step(ctx: &RunContext, step: Step) -> Result<StepSummary> {
    let out = match step {
        Step::GenData => gen_data(ctx),
        Step::TrainClassifier => step_train_classifier(ctx),
        Step::PseudoLabel => step_pseudo_label(ctx),
        Step::TrainDiffusion => step_train_diffusion(ctx),
        Step::Sample => step_sample(ctx),
        Step::RetrainProbe => step_retrain_probe(ctx),
        Step::Refine => step_refine(ctx),
        Step::Evaluate => step_evaluate(ctx),
    };
    out.map_err(|e| e.in_stage(step.name()))
}

fn gen_data(ctx: &RunContext) -> Result<StepSummary> {
    let (data, _) = generate_dataset(&ctx.cfg)?;
    let (semi, truth) = make_split(&ctx.cfg, &data)?;
    let heldout = generate_heldout(&ctx.cfg)?;
    let mut written = Vec::new();
    let train_rows: Vec<CsvRow> = semi
        .items()
        .iter()
        .map(|i| CsvRow {
            id: i.id,
            label: i.label,
            provenance: Provenance::Real,
            x: i.x.clone(),
        })
        .collect();
    ctx.write_rows(paths::TRAIN, &train_rows, &mut written)?;
    let truth_rows: Vec<CsvRow> = semi
        .items()
        .iter()
        .zip(truth.for_items(&semi)?)
        .map(|(i, l)| CsvRow {
            id: i.id,
            label: Some(l),
            provenance: Provenance::Real,
            x: i.x.clone(),
        })
        .collect();
    ctx.write_rows(paths::TRUTH, &truth_rows, &mut written)?;
    let heldout_rows: Vec<CsvRow> = heldout
        .pairs()
        .into_iter()
        .enumerate()
        .map(|(id, (x, l))| CsvRow {
            id: id as u64,
            label: Some(l),
            provenance: Provenance::Real,
            x: x.to_vec(),
        })
        .collect();
    ctx.write_rows(paths::HELDOUT, &heldout_rows, &mut written)?;
    let metrics = json!({
        "items": semi.len(),
        "labeled": semi.num_labeled(),
        "unlabeled": semi.len() - semi.num_labeled(),
        "labels_per_class": semi.labels_per_class(),
        "heldout": heldout.len(),
    });
    finish(ctx, Step::GenData, written, metrics)
}

fn step_train_classifier(ctx: &RunContext) -> Result<StepSummary> {
    let semi = ctx.load_semi()?;
    let (msn, probe) = train_classifier(&semi, &ctx.cfg)?;
    let mut written = Vec::new();
    ctx.save(paths::MSN, KIND_MSN, &msn.state, &mut written)?;
    ctx.save(paths::PROBE1, KIND_PROBE, &probe, &mut written)?;
    let metrics = json!({
        "msn_loss_trace": msn.loss_trace,
        "encoder_fingerprint": msn.state.encoder_fingerprint(),
        "probe_train_size": semi.num_labeled(),
        "probe_iterations": probe.iterations,
        "probe_grad_norm": probe.grad_norm,
    });
    finish(ctx, Step::TrainClassifier, written, metrics)
}

fn label_metrics(s1: &PseudoLabeledSet, semi: &SemiDataset, truth: &HiddenTruth) -> Result<Value> {
    let true_labels = truth.for_items(semi)?;
    let labels = s1.labels();
    let correct = labels
        .iter()
        .zip(&true_labels)
        .filter(|(a, b)| a == b)
        .count();
    let overridden = semi
        .items()
        .iter()
        .zip(&labels)
        .filter(|(i, &l)| matches!(i.label, Some(g) if g != l))
        .count();
    let mut counts = vec![0usize; s1.num_classes()];
    for &l in &labels {
        counts[l] += 1;
    }
    Ok(json!({
        "size": s1.len(),
        "pseudo_label_accuracy": correct as f64 / labels.len().max(1) as f64,
        "labeled_items_relabeled": overridden,
        "class_counts": counts,
    }))
}

fn step_pseudo_label(ctx: &RunContext) -> Result<StepSummary> {
    let semi = ctx.load_semi()?;
    let truth = ctx.load_truth()?;
    let s1 = pseudo_label(&semi, &ctx.load_msn()?, &ctx.load_probe(paths::PROBE1)?)?;
    let mut written = Vec::new();
    ctx.write_rows(paths::S1, &s1.to_rows(), &mut written)?;
    let metrics = label_metrics(&s1, &semi, &truth)?;
    finish(ctx, Step::PseudoLabel, written, metrics)
}

fn step_train_diffusion(ctx: &RunContext) -> Result<StepSummary> {
    let s1 = ctx.load_s1(paths::S1)?;
    let trained = train_diffusion(&s1, &ctx.cfg, None)?;
    let mut written = Vec::new();
    ctx.save(paths::DENOISER, KIND_DENOISER, &trained.model, &mut written)?;
    let metrics = json!({
        "loss_trace": trained.loss_trace,
        "data_scale": trained.model.data_scale(),
        "absent_classes": s1.absent_classes(),
    });
    finish(ctx, Step::TrainDiffusion, written, metrics)
}

fn step_sample(ctx: &RunContext) -> Result<StepSummary> {
    let model = ctx.load_denoiser(paths::DENOISER)?;
    let s2 = sample_pseudo(&model, &ctx.cfg, ctx.cfg.pipeline.k)?;
    let mut written = Vec::new();
    ctx.write_rows(paths::S2, &s2.to_rows(), &mut written)?;
    let metrics = json!({ "k": s2.k(), "size": s2.len(), "classes": s2.num_classes() });
    finish(ctx, Step::Sample, written, metrics)
}

fn step_retrain_probe(ctx: &RunContext) -> Result<StepSummary> {
    let semi = ctx.load_semi()?;
    let msn = ctx.load_msn()?;
    let s2 = ctx.load_s2(paths::S2)?;
    let before = msn.encoder_fingerprint();
    let k = ctx.cfg.pipeline.k;
    let mut written = Vec::new();
    let probe = stage3_retrain(&msn, &semi, &s2.prefix(k)?, &ctx.cfg)?;
    ctx.save(paths::PROBE3, KIND_PROBE, &probe, &mut written)?;
    let mut grid = Vec::new();
    let needs_model = ctx.cfg.pipeline.k_grid.iter().any(|&g| g > s2.k());
    let model = if needs_model {
        Some(ctx.load_denoiser(paths::DENOISER)?)
    } else {
        None
    };
    for g in ctx.cfg.pipeline.all_k().into_iter().filter(|&g| g != k) {
        let pool = match &model {
            Some(m) => extend_pseudo(m, &ctx.cfg, &s2, g)?,
            None => s2.prefix(g)?,
        };
        let p = stage3_retrain(&msn, &semi, &pool, &ctx.cfg)?;
        let rel = paths::grid_probe(g);
        ctx.save(&rel, KIND_PROBE, &p, &mut written)?;
        grid.push(json!({ "k": g, "train_size": semi.num_labeled() + pool.len(), "probe": rel }));
    }
    let metrics = json!({
        "k": k,
        "train_size": semi.num_labeled() + s2.prefix(k)?.len(),
        "probe_iterations": probe.iterations,
        "probe_grad_norm": probe.grad_norm,
        "encoder_fingerprint_before": before,
        "encoder_fingerprint_after": msn.encoder_fingerprint(),
        "grid": grid,
    });
    finish(ctx, Step::RetrainProbe, written, metrics)
}

fn step_refine(ctx: &RunContext) -> Result<StepSummary> {
    let rounds = ctx.cfg.pipeline.refinement_rounds;
    let mut written = Vec::new();
    let mut per_round = Vec::new();
    if rounds > 0 {
        let semi = ctx.load_semi()?;
        let truth = ctx.load_truth()?;
        let mut state = PipelineState {
            msn: ctx.load_msn()?,
            probe: ctx.load_probe(paths::PROBE3)?,
            s1: ctx.load_s1(paths::S1)?,
            denoiser: ctx.load_denoiser(paths::DENOISER)?,
            s2: ctx.load_s2(paths::S2)?,
        };
        for r in 1..=rounds {
            let next = refine_round(&state, &semi, &ctx.cfg)?;
            let changed = next
                .s1
                .items()
                .iter()
                .zip(state.s1.items())
                .filter(|(a, b)| a.label != b.label)
                .count();
            ctx.write_rows(&paths::round(r, "s1.csv"), &next.s1.to_rows(), &mut written)?;
            ctx.save(
                &paths::round(r, "denoiser.json"),
                KIND_DENOISER,
                &next.denoiser,
                &mut written,
            )?;
            ctx.write_rows(&paths::round(r, "s2.csv"), &next.s2.to_rows(), &mut written)?;
            ctx.save(
                &paths::round(r, "probe.json"),
                KIND_PROBE,
                &next.probe,
                &mut written,
            )?;
            let mut m = label_metrics(&next.s1, &semi, &truth)?;
            m["round"] = json!(r);
            m["labels_changed"] = json!(changed);
            m["s2_size"] = json!(next.s2.len());
            per_round.push(m);
            state = next;
        }
    }
    let metrics = json!({ "rounds": rounds, "fine_tune": ctx.cfg.pipeline.fine_tune, "per_round": per_round });
    finish(ctx, Step::Refine, written, metrics)
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        passed,
        detail,
    }
}

fn confusion_check(name: &str, eval: &ProbeEval, truth: &[usize]) -> Check {
    let cm = &eval.confusion;
    let rows_ok = (0..cm.num_classes())
        .all(|c| cm.row_sum(c) == truth.iter().filter(|&&t| t == c).count() as u64);
    let cols_ok = (0..cm.num_classes())
        .all(|c| cm.col_sum(c) == eval.predictions.iter().filter(|&&p| p == c).count() as u64);
    check(
        &format!("confusion_totals_{name}"),
        cm.total() == truth.len() as u64 && rows_ok && cols_ok,
        format!("total {} over {} items", cm.total(), truth.len()),
    )
}

fn pr_check(name: &str, stats: &[ClassStats]) -> Check {
    let in_unit = |v: Option<f64>| v.is_none_or(|v| (0.0..=1.0).contains(&v));
    let bad: Vec<usize> = stats
        .iter()
        .filter(|s| !(in_unit(s.precision) && in_unit(s.recall)))
        .map(|s| s.class)
        .collect();
    check(
        &format!("pr_range_{name}"),
        bad.is_empty(),
        format!("classes out of range: {bad:?}"),
    )
}

fn s1_check(name: &str, s1: &PseudoLabeledSet, semi: &SemiDataset) -> Check {
    let ids: HashSet<u64> = semi.items().iter().map(|i| i.id).collect();
    let covered: HashSet<u64> = s1.items().iter().map(|i| i.id).collect();
    check(
        &format!("s1_size_{name}"),
        s1.len() == semi.len() && covered == ids,
        format!("|S1| = {}, N + M = {}", s1.len(), semi.len()),
    )
}

fn s2_check(name: &str, s2: &PseudoImageSet, k: usize, classes: usize) -> Check {
    let per_class_ok = s2.per_class().iter().all(|c| c.len() == k);
    check(
        &format!("s2_size_{name}"),
        s2.len() == k * classes && s2.num_classes() == classes && per_class_ok,
        format!("|S2| = {}, K*C = {}", s2.len(), k * classes),
    )
}

fn write_deltas(
    ctx: &RunContext,
    split: &str,
    report: &PrDeltaReport,
    written: &mut Vec<String>,
) -> Result<()> {
    ctx.write_with(&format!("eval/delta_recall_{split}.csv"), written, |f| {
        write_sorted_delta_csv(f, &report.recall_sorted)
    })?;
    ctx.write_with(&format!("eval/delta_precision_{split}.csv"), written, |f| {
        write_sorted_delta_csv(f, &report.precision_sorted)
    })
}

fn delta_json(report: &PrDeltaReport) -> Value {
    json!({
        "median_delta_recall": report.median_delta_recall(),
        "median_delta_precision": report.median_delta_precision(),
        "by_class": report.by_class,
    })
}

fn step_evaluate(ctx: &RunContext) -> Result<StepSummary> {
    let cfg = &ctx.cfg;
    let semi = ctx.load_semi()?;
    let truth = ctx.load_truth()?.for_items(&semi)?;
    let heldout = ctx.load_heldout()?;
    let msn = ctx.load_msn()?;
    let bayes = BayesClassifier::new(&cfg.mixture)?;
    let (final_probe_rel, final_s1_rel, final_denoiser_rel) = ctx.final_paths();
    let mut written = Vec::new();
    let mut checks = Vec::new();

    let all_x = semi.all_x();
    let probe1 = ctx.load_probe(paths::PROBE1)?;
    let probe3 = ctx.load_probe(paths::PROBE3)?;
    let final_probe = ctx.load_probe(&final_probe_rel)?;
    let h1 = evaluate_probe(&msn, &probe1, &heldout.xs, &heldout.labels)?;
    let h3 = evaluate_probe(&msn, &probe3, &heldout.xs, &heldout.labels)?;
    let hf = evaluate_probe(&msn, &final_probe, &heldout.xs, &heldout.labels)?;
    let t1 = evaluate_probe(&msn, &probe1, &all_x, &truth)?;
    let tf = evaluate_probe(&msn, &final_probe, &all_x, &truth)?;
    for (name, eval, labels) in [
        ("stage1_heldout", &h1, &heldout.labels),
        ("stage3_heldout", &h3, &heldout.labels),
        ("final_heldout", &hf, &heldout.labels),
        ("stage1_train", &t1, &truth),
        ("final_train", &tf, &truth),
    ] {
        checks.push(confusion_check(name, eval, labels));
        checks.push(pr_check(name, &eval.class_stats));
    }
    ctx.write_with("eval/class_stats_stage1_heldout.csv", &mut written, |f| {
        write_class_stats_csv(f, &h1.class_stats)
    })?;
    ctx.write_with("eval/class_stats_final_heldout.csv", &mut written, |f| {
        write_class_stats_csv(f, &hf.class_stats)
    })?;
    ctx.write_with("eval/class_stats_stage1_train.csv", &mut written, |f| {
        write_class_stats_csv(f, &t1.class_stats)
    })?;
    ctx.write_with("eval/class_stats_final_train.csv", &mut written, |f| {
        write_class_stats_csv(f, &tf.class_stats)
    })?;
    let delta_heldout = pr_delta(&h1.class_stats, &hf.class_stats)?;
    let delta_train = pr_delta(&t1.class_stats, &tf.class_stats)?;
    write_deltas(ctx, "heldout", &delta_heldout, &mut written)?;
    write_deltas(ctx, "train", &delta_train, &mut written)?;

    let mut grid = BTreeMap::new();
    grid.insert(cfg.pipeline.k, h3.accuracy);
    for g in cfg
        .pipeline
        .all_k()
        .into_iter()
        .filter(|&g| g != cfg.pipeline.k)
    {
        let p = ctx.load_probe(&paths::grid_probe(g))?;
        grid.insert(
            g,
            evaluate_probe(&msn, &p, &heldout.xs, &heldout.labels)?.accuracy,
        );
    }

    let s1 = ctx.load_s1(paths::S1)?;
    checks.push(s1_check("stage1", &s1, &semi));
    checks.push(s2_check(
        "stage2",
        &ctx.load_s2(paths::S2)?,
        cfg.pipeline.k,
        cfg.num_classes(),
    ));
    for r in 1..=cfg.pipeline.refinement_rounds {
        checks.push(s1_check(
            &format!("round{r}"),
            &ctx.load_s1(&paths::round(r, "s1.csv"))?,
            &semi,
        ));
        checks.push(s2_check(
            &format!("round{r}"),
            &ctx.load_s2(&paths::round(r, "s2.csv"))?,
            cfg.pipeline.k,
            cfg.num_classes(),
        ));
    }
    let recorded = ctx.load_summary(Step::TrainClassifier)?.metrics["encoder_fingerprint"].clone();
    let retrain = ctx.load_summary(Step::RetrainProbe)?.metrics;
    let now = json!(msn.encoder_fingerprint());
    checks.push(check(
        "encoder_frozen",
        recorded == now
            && retrain["encoder_fingerprint_before"] == now
            && retrain["encoder_fingerprint_after"] == now,
        format!("stage-1 fingerprint {recorded}"),
    ));

    let gen2 = evaluate_generator(&ctx.load_denoiser(paths::DENOISER)?, cfg, &heldout, &bayes)?;
    let gen_final = if cfg.pipeline.refinement_rounds > 0 {
        Some(evaluate_generator(
            &ctx.load_denoiser(&final_denoiser_rel)?,
            cfg,
            &heldout,
            &bayes,
        )?)
    } else {
        None
    };
    let final_s1 = ctx.load_s1(&final_s1_rel)?;
    let final_label_acc = final_s1
        .labels()
        .iter()
        .zip(&truth)
        .filter(|(a, b)| a == b)
        .count() as f64
        / truth.len() as f64;

    let passed = checks.iter().all(|c| c.passed);
    let metrics = json!({
        "heldout_accuracy": {
            "stage1": h1.accuracy,
            "stage3": h3.accuracy,
            "final": hf.accuracy,
            "by_k": grid,
        },
        "train_accuracy": { "stage1": t1.accuracy, "final": tf.accuracy },
        "pseudo_label_accuracy": { "stage1": t1.accuracy, "final": final_label_acc },
        "confusion": { "stage1_heldout": h1.confusion, "final_heldout": hf.confusion },
        "class_stats": { "stage1_heldout": h1.class_stats, "final_heldout": hf.class_stats },
        "pr_delta": { "heldout": delta_json(&delta_heldout), "train": delta_json(&delta_train) },
        "generation": { "stage2": gen2, "final": gen_final },
        "checks": checks,
        "checks_passed": passed,
    });
    finish(ctx, Step::Evaluate, written, metrics)
}

/// Runs every step in order and writes the manifest plus a separate
/// wall-time record, so the manifest itself is a pure function of the config.
pub fn run_pipeline(ctx: &RunContext, opts: RunOptions) -> Result<RunManifest> {
    fs::create_dir_all(&ctx.dir)?;
    let mut stages = Vec::new();
    let mut timings = BTreeMap::new();
    for step in Step::ALL {
        let started = Instant::now();
        let summary = match ctx.load_summary(step) {
            Ok(s) if opts.reuse_existing => s,
            _ => run_step(ctx, step)?,
        };
        timings.insert(step.name().to_string(), started.elapsed().as_secs_f64());
        stages.push(summary);
    }
    let mut artifacts: Vec<String> = stages
        .iter()
        .flat_map(|s| s.artifacts.iter().cloned())
        .collect();
    ctx.write_json(
        paths::TIMINGS,
        &json!({ "wall_seconds": timings }),
        &mut artifacts,
    )?;
    artifacts.sort();
    artifacts.dedup();
    let checks: Vec<Check> = serde_json::from_value(
        stages
            .last()
            .map_or(Value::Null, |s| s.metrics["checks"].clone()),
    )?;
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        config_hash: ctx.cfg.hash()?,
        config: ctx.cfg.clone(),
        seeds: ctx.seeds(),
        artifacts,
        checks_passed: checks.iter().all(|c| c.passed),
        checks,
        stages,
    };
    ctx.write_json(paths::MANIFEST, &manifest, &mut Vec::new())?;
    Ok(manifest)
}
