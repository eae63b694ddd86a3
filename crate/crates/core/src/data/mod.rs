//! Synthetic benchmarks, semi-supervised splits and CSV persistence.
//!
//! Ground truth for unlabeled items is split off into [`HiddenTruth`] at
//! split time. Training code only ever receives a [`SemiDataset`], which has
//! no path back to those labels.

mod csv_io;
mod mixture;
mod split;

pub use csv_io::{
    read_rows, read_rows_from_path, write_class_points, write_rows, write_rows_to_path, CsvRow,
    Provenance,
};
pub use mixture::{generate_mixture, BayesClassifier, LabeledData, MixtureSpec};
pub use split::{split_semi, HiddenTruth, SemiDataset, SemiItem, SplitSpec};
