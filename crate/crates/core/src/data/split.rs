use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::LabeledData;
use crate::rng::StreamRng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub labels_per_class: usize,
    /// Split seed; when absent the run's master seed is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            labels_per_class: 2,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemiItem {
    pub id: u64,
    pub x: Vec<f64>,
    /// Present only for the labeled subset.
    pub label: Option<usize>,
}

/// Partially labeled data: the labeled set `S` and the unlabeled set `D`
/// share one item list, in id order.
#[derive(Debug, Clone, PartialEq)]
pub struct SemiDataset {
    items: Vec<SemiItem>,
    num_classes: usize,
    dim: usize,
}

impl SemiDataset {
    pub fn new(items: Vec<SemiItem>, num_classes: usize) -> Result<Self> {
        let dim = items.first().map_or(0, |i| i.x.len());
        if dim == 0 {
            return Err(Error::input("semi-supervised dataset is empty"));
        }
        let mut seen = std::collections::HashSet::new();
        for item in &items {
            if item.x.len() != dim {
                return Err(Error::input(format!(
                    "item {} has the wrong dimension",
                    item.id
                )));
            }
            if !seen.insert(item.id) {
                return Err(Error::input(format!("duplicate item id {}", item.id)));
            }
            if matches!(item.label, Some(l) if l >= num_classes) {
                return Err(Error::input(format!(
                    "item {} has label out of range",
                    item.id
                )));
            }
        }
        Ok(Self {
            items,
            num_classes,
            dim,
        })
    }

    pub fn items(&self) -> &[SemiItem] {
        &self.items
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// The labeled set `S`, in id order.
    pub fn labeled(&self) -> impl Iterator<Item = (&SemiItem, usize)> {
        self.items.iter().filter_map(|i| i.label.map(|l| (i, l)))
    }

    /// The unlabeled set `D`, in id order.
    pub fn unlabeled(&self) -> impl Iterator<Item = &SemiItem> {
        self.items.iter().filter(|i| i.label.is_none())
    }

    pub fn num_labeled(&self) -> usize {
        self.labeled().count()
    }

    pub fn all_x(&self) -> Vec<&[f64]> {
        self.items.iter().map(|i| i.x.as_slice()).collect()
    }

    /// Labeled points per class.
    pub fn labels_per_class(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for (_, l) in self.labeled() {
            counts[l] += 1;
        }
        counts
    }
}

/// True labels of every item, indexed by id. Evaluation only.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTruth {
    labels: Vec<usize>,
}

impl HiddenTruth {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels }
    }

    pub fn label(&self, id: u64) -> Option<usize> {
        self.labels.get(id as usize).copied()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// True labels aligned with the dataset's item order.
    pub fn for_items(&self, data: &SemiDataset) -> Result<Vec<usize>> {
        data.items()
            .iter()
            .map(|i| {
                self.label(i.id)
                    .ok_or_else(|| Error::input(format!("no ground truth for item {}", i.id)))
            })
            .collect()
    }
}

/// Marks exactly `labels_per_class` items per class as labeled, chosen
/// uniformly without replacement; everything else becomes unlabeled.
pub fn split_semi(
    data: &LabeledData,
    spec: &SplitSpec,
    rng: &mut StreamRng,
) -> Result<(SemiDataset, HiddenTruth)> {
    let n_l = spec.labels_per_class;
    if n_l == 0 {
        return Err(Error::config("labels_per_class must be at least 1"));
    }
    let mut chosen = vec![false; data.len()];
    for y in 0..data.num_classes {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == y).collect();
        if members.len() < n_l {
            return Err(Error::config(format!(
                "class {y} has {} items, fewer than {n_l} labels per class",
                members.len()
            )));
        }
        members.shuffle(rng);
        for &i in &members[..n_l] {
            chosen[i] = true;
        }
    }
    let items = data
        .xs
        .iter()
        .zip(&data.labels)
        .zip(&chosen)
        .enumerate()
        .map(|(id, ((x, &l), &c))| SemiItem {
            id: id as u64,
            x: x.clone(),
            label: c.then_some(l),
        })
        .collect();
    Ok((
        SemiDataset::new(items, data.num_classes)?,
        HiddenTruth::new(data.labels.clone()),
    ))
}
