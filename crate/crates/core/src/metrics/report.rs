use std::io::Write;

use serde::{Deserialize, Serialize};

use super::classification::ClassStats;
use super::frechet::{fit_gaussian, frechet_distance};
use crate::data::LabeledData;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGeneration {
    pub class: usize,
    pub real_count: usize,
    pub pseudo_count: usize,
    /// Fréchet distance between the real and generated Gaussian fits of the
    /// class; absent when either side has too few points.
    pub frechet: Option<f64>,
    /// Share of generated points of this class that the reference classifier
    /// assigns back to it.
    pub agreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub per_class: Vec<ClassGeneration>,
    pub pooled_frechet: Option<f64>,
    pub mean_class_frechet: Option<f64>,
    pub mean_agreement: Option<f64>,
}

/// Scores generated points against real data grouped by true class.
///
/// `pseudo[y]` holds the points generated for class `y`; `classify` is the
/// reference classifier (the analytic Bayes rule for synthetic mixtures).
pub fn generation_report<F>(
    real: &LabeledData,
    pseudo: &[Vec<Vec<f64>>],
    classify: F,
) -> Result<GenerationReport>
where
    F: Fn(&[f64]) -> usize,
{
    let dim = real.dim();
    let fd_or_absent = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Result<Option<f64>> {
        if a.len() <= dim || b.len() <= dim {
            return Ok(None);
        }
        Ok(Some(frechet_distance(
            &fit_gaussian(a)?,
            &fit_gaussian(b)?,
        )?))
    };
    let mut per_class = Vec::with_capacity(real.num_classes);
    for y in 0..real.num_classes {
        let real_y = real.class_points(y);
        let gen_y: &[Vec<f64>] = pseudo.get(y).map_or(&[], Vec::as_slice);
        let agreement = (!gen_y.is_empty())
            .then(|| gen_y.iter().filter(|x| classify(x) == y).count() as f64 / gen_y.len() as f64);
        per_class.push(ClassGeneration {
            class: y,
            real_count: real_y.len(),
            pseudo_count: gen_y.len(),
            frechet: fd_or_absent(&real_y, gen_y)?,
            agreement,
        });
    }
    let pooled: Vec<Vec<f64>> = pseudo.iter().flatten().cloned().collect();
    let pooled_frechet = fd_or_absent(&real.xs, &pooled)?;
    let mean_of =
        |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    Ok(GenerationReport {
        mean_class_frechet: mean_of(per_class.iter().filter_map(|c| c.frechet).collect()),
        mean_agreement: mean_of(per_class.iter().filter_map(|c| c.agreement).collect()),
        per_class,
        pooled_frechet,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:?}"))
}

/// One row per class: `class,tp,fp,fn,precision,recall`; absent ratios are empty.
pub fn write_class_stats_csv<W: Write>(writer: W, stats: &[ClassStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["class", "tp", "fp", "fn", "precision", "recall"])?;
    for s in stats {
        w.write_record([
            s.class.to_string(),
            s.tp.to_string(),
            s.fp.to_string(),
            s.fn_.to_string(),
            opt(s.precision),
            opt(s.recall),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Two columns, `class,delta`, in the given (already sorted) order.
pub fn write_sorted_delta_csv<W: Write>(writer: W, sorted: &[(usize, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["class", "delta"])?;
    for (class, delta) in sorted {
        w.write_record([class.to_string(), format!("{delta:?}")])?;
    }
    w.flush()?;
    Ok(())
}
