use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|y| self.get(y, y)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.num_classes).map(|t| self.get(t, predicted)).sum()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| self.trace() as f64 / total as f64)
    }
}

pub fn confusion(
    truth: &[usize],
    predicted: &[usize],
    num_classes: usize,
) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::input(format!(
            "{} true labels vs {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut counts = vec![0u64; num_classes * num_classes];
    for (i, (&t, &p)) in truth.iter().zip(predicted).enumerate() {
        if t >= num_classes || p >= num_classes {
            return Err(Error::input(format!(
                "item {i}: labels ({t}, {p}) outside 0..{num_classes}"
            )));
        }
        counts[t * num_classes + p] += 1;
    }
    Ok(ConfusionMatrix {
        num_classes,
        counts,
    })
}

pub fn accuracy(truth: &[usize], predicted: &[usize]) -> Result<f64> {
    if truth.len() != predicted.len() || truth.is_empty() {
        return Err(Error::input("accuracy needs equal, non-empty label lists"));
    }
    let hits = truth.iter().zip(predicted).filter(|(t, p)| t == p).count();
    Ok(hits as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: usize,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// `TP / (TP + FP)`; absent when the class is never predicted.
    pub precision: Option<f64>,
    /// `TP / (TP + FN)`; absent when the class never occurs.
    pub recall: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn per_class_pr(cm: &ConfusionMatrix) -> Vec<ClassStats> {
    (0..cm.num_classes())
        .map(|y| {
            let tp = cm.get(y, y);
            let fp = cm.col_sum(y) - tp;
            let fn_ = cm.row_sum(y) - tp;
            ClassStats {
                class: y,
                tp,
                fp,
                fn_,
                precision: ratio(tp, tp + fp),
                recall: ratio(tp, tp + fn_),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDelta {
    pub class: usize,
    pub delta_precision: Option<f64>,
    pub delta_recall: Option<f64>,
}

/// Per-class changes plus the two reporting orders: defined deltas sorted
/// descending, ties by class index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrDeltaReport {
    pub by_class: Vec<ClassDelta>,
    pub precision_sorted: Vec<(usize, f64)>,
    pub recall_sorted: Vec<(usize, f64)>,
}

impl PrDeltaReport {
    pub fn median_delta_recall(&self) -> Option<f64> {
        median(self.recall_sorted.iter().map(|(_, d)| *d).collect())
    }

    pub fn median_delta_precision(&self) -> Option<f64> {
        median(self.precision_sorted.iter().map(|(_, d)| *d).collect())
    }
}

pub(crate) fn median(mut values: Vec<f64>) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn sorted_desc(mut pairs: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    pairs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    pairs
}

pub fn pr_delta(before: &[ClassStats], after: &[ClassStats]) -> Result<PrDeltaReport> {
    if before.len() != after.len() {
        return Err(Error::input(format!(
            "class counts differ: {} before, {} after",
            before.len(),
            after.len()
        )));
    }
    let diff = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| b - a);
    let by_class: Vec<ClassDelta> = before
        .iter()
        .zip(after)
        .map(|(b, a)| ClassDelta {
            class: b.class,
            delta_precision: diff(b.precision, a.precision),
            delta_recall: diff(b.recall, a.recall),
        })
        .collect();
    let precision_sorted = sorted_desc(
        by_class
            .iter()
            .filter_map(|d| d.delta_precision.map(|v| (d.class, v)))
            .collect(),
    );
    let recall_sorted = sorted_desc(
        by_class
            .iter()
            .filter_map(|d| d.delta_recall.map(|v| (d.class, v)))
            .collect(),
    );
    Ok(PrDeltaReport {
        by_class,
        precision_sorted,
        recall_sorted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions_are_diagonal() {
        let cm = confusion(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                if t != p {
                    assert_eq!(cm.get(t, p), 0);
                }
            }
        }
        assert_eq!(cm.trace(), 4);
    }

    #[test]
    fn constant_predictor_fills_one_column() {
        let cm = confusion(&[0, 1, 2, 2], &[0, 0, 0, 0], 3).unwrap();
        assert_eq!(cm.col_sum(0), 4);
        assert_eq!(cm.col_sum(1) + cm.col_sum(2), 0);
    }

    #[test]
    fn small_enumeration() {
        let cm = confusion(&[0, 1, 1], &[0, 1, 0], 2).unwrap();
        assert_eq!(
            (cm.get(0, 0), cm.get(1, 1), cm.get(1, 0), cm.get(0, 1)),
            (1, 1, 1, 0)
        );
        assert!(confusion(&[0, 2], &[0, 1], 2).is_err());
        assert!(confusion(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn precision_and_recall_formulas() {
        // class 0: TP=3, FP=1, FN=9.
        let mut truth = vec![0; 12];
        let mut pred = vec![0, 0, 0];
        pred.extend(vec![1; 9]);
        truth.push(1);
        pred.push(0);
        let stats = per_class_pr(&confusion(&truth, &pred, 3).unwrap());
        assert_eq!((stats[0].tp, stats[0].fp, stats[0].fn_), (3, 1, 9));
        assert_eq!(stats[0].precision, Some(0.75));
        assert_eq!(stats[0].recall, Some(0.25));
        // class 2: never present, never predicted.
        assert_eq!(stats[2].precision, None);
        assert_eq!(stats[2].recall, None);
    }

    #[test]
    fn recall_change_from_point_two_four_to_point_eight_seven() {
        let s = |r| ClassStats {
            class: 0,
            tp: 0,
            fp: 0,
            fn_: 0,
            precision: None,
            recall: Some(r),
        };
        let rep = pr_delta(&[s(0.24)], &[s(0.87)]).unwrap();
        assert!((rep.by_class[0].delta_recall.unwrap() - 0.63).abs() < 1e-12);
    }

    #[test]
    fn identical_stats_give_zero_deltas_and_mismatch_errors() {
        let cm = confusion(&[0, 1, 1, 2], &[0, 1, 2, 2], 3).unwrap();
        let s = per_class_pr(&cm);
        let rep = pr_delta(&s, &s).unwrap();
        assert!(rep
            .by_class
            .iter()
            .all(|d| d.delta_precision == Some(0.0) && d.delta_recall == Some(0.0)));
        assert!(pr_delta(&s, &s[..2]).is_err());
    }

    proptest! {
        #[test]
        fn invariants_hold_for_random_labels(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200)) {
            let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            let cm = confusion(&truth, &pred, 5).unwrap();
            prop_assert_eq!(cm.total(), pairs.len() as u64);
            let stats = per_class_pr(&cm);
            prop_assert_eq!(stats.iter().map(|s| s.tp).sum::<u64>(), cm.trace());
            prop_assert_eq!(stats.iter().map(|s| s.tp + s.fn_).sum::<u64>(), cm.total());
            for s in &stats {
                for v in [s.precision, s.recall].into_iter().flatten() {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                prop_assert_eq!(cm.row_sum(s.class), truth.iter().filter(|&&t| t == s.class).count() as u64);
            }
        }

        #[test]
        fn sorting_is_a_permutation(before in prop::collection::vec(0.0f64..1.0, 6), after in prop::collection::vec(0.0f64..1.0, 6)) {
            let mk = |v: &Vec<f64>| v.iter().enumerate().map(|(c, &r)| ClassStats {
                class: c, tp: 0, fp: 0, fn_: 0, precision: Some(r), recall: Some(1.0 - r),
            }).collect::<Vec<_>>();
            let rep = pr_delta(&mk(&before), &mk(&after)).unwrap();
            let mut a: Vec<u64> = rep.by_class.iter().map(|d| d.delta_recall.unwrap().to_bits()).collect();
            let mut b: Vec<u64> = rep.recall_sorted.iter().map(|d| d.1.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
            prop_assert!(rep.precision_sorted.windows(2).all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)));
        }
    }
}
