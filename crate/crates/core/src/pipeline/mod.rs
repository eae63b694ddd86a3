//! Stage drivers, on-disk layout, and the run manifest.
//!
//! The pure stage functions in [`stages`] work in memory. [`run`] wraps each
//! of them as a step that reads its inputs from and writes its outputs to a
//! run directory, so a run can be executed whole or one step at a time with
//! byte-identical results.

mod config;
mod eval;
mod run;
mod stages;

pub use config::{PipelineConfig, RunConfig};
pub use eval::{
    evaluate_generator, evaluate_probe, generate_dataset, generate_heldout, make_split, ProbeEval,
};
pub use run::{
    paths, run_pipeline, run_step, Check, RunContext, RunManifest, RunOptions, Step, StepSummary,
    MANIFEST_FORMAT, MANIFEST_VERSION,
};
pub use stages::{
    extend_pseudo, labeled_training_set, pseudo_label, refine_round, sample_classes, sample_pseudo,
    sample_seed, stage1_train_and_label, stage2_train_and_sample, stage3_retrain, stage4_refine,
    train_classifier, train_diffusion, PipelineState, PseudoImageSet, PseudoLabeled,
    PseudoLabeledSet, Stage1Output, Stage2Output,
};
