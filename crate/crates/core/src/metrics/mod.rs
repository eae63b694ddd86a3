//! Evaluation: accuracy, confusion matrices, per-class precision/recall and
//! their stage-to-stage changes, and the Fréchet distance between Gaussian
//! fits used to score generated samples.

mod classification;
mod frechet;
mod report;

pub use classification::{
    accuracy, confusion, per_class_pr, pr_delta, ClassDelta, ClassStats, ConfusionMatrix,
    PrDeltaReport,
};
pub use frechet::{fit_gaussian, frechet_distance, GaussianFit};
pub use report::{
    generation_report, write_class_stats_csv, write_sorted_delta_csv, ClassGeneration,
    GenerationReport,
};
