use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::numcore::argmax;
use crate::rng::StreamRng;
use crate::{Error, Result};

/// A Gaussian mixture with one component per class and equal class counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
    pub samples_per_class: usize,
    /// Data seed; when absent the run's master seed is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for MixtureSpec {
    /// The desk benchmark: 8 classes on a radius-4 circle, `Σ = 0.3·I`, 500 per class.
    fn default() -> Self {
        Self::ring(8, 4.0, 0.3, 500)
    }
}

impl MixtureSpec {
    /// `classes` isotropic 2-D components evenly spaced on a circle.
    pub fn ring(classes: usize, radius: f64, variance: f64, samples_per_class: usize) -> Self {
        let means = (0..classes)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / classes as f64;
                vec![radius * angle.cos(), radius * angle.sin()]
            })
            .collect();
        let cov = vec![vec![variance, 0.0], vec![0.0, variance]];
        Self {
            means,
            covariances: vec![cov; classes],
            samples_per_class,
            seed: None,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        self.factors().map(|_| ())
    }

    /// Cholesky factors of the covariances, validating shape and PSD-ness.
    fn factors(&self) -> Result<Vec<DMatrix<f64>>> {
        let c = self.num_classes();
        let d = self.dim();
        if c < 2 {
            return Err(Error::config(format!(
                "mixture needs at least 2 classes, got {c}"
            )));
        }
        if d == 0
            || self
                .means
                .iter()
                .any(|m| m.len() != d || m.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::config(
                "mixture means must share a positive dimension",
            ));
        }
        if self.covariances.len() != c {
            return Err(Error::config("one covariance per class required"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("samples_per_class must be positive"));
        }
        self.covariances
            .iter()
            .enumerate()
            .map(|(k, rows)| {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::config(format!("covariance {k} is not {d}x{d}")));
                }
                let m = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
                if (0..d).any(|i| (0..d).any(|j| (m[(i, j)] - m[(j, i)]).abs() > 1e-12)) {
                    return Err(Error::config(format!("covariance {k} is not symmetric")));
                }
                m.cholesky().map(|ch| ch.l()).ok_or_else(|| {
                    Error::config(format!("covariance {k} is not positive definite"))
                })
            })
            .collect()
    }
}

/// Points with their class labels; item ids are positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledData {
    pub xs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledData {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.xs.first().map_or(0, Vec::len)
    }

    pub fn pairs(&self) -> Vec<(&[f64], usize)> {
        self.xs
            .iter()
            .map(Vec::as_slice)
            .zip(self.labels.iter().copied())
            .collect()
    }

    /// Items of class `y`.
    pub fn class_points(&self, y: usize) -> Vec<Vec<f64>> {
        self.xs
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == y)
            .map(|(x, _)| x.clone())
            .collect()
    }
}

/// Closed-form posterior of a Gaussian mixture with equal class priors.
#[derive(Debug, Clone)]
pub struct BayesClassifier {
    means: Vec<DVector<f64>>,
    inverses: Vec<DMatrix<f64>>,
    half_log_dets: Vec<f64>,
}

impl BayesClassifier {
    pub fn new(spec: &MixtureSpec) -> Result<Self> {
        let factors = spec.factors()?;
        let mut inverses = Vec::new();
        let mut half_log_dets = Vec::new();
        for l in &factors {
            let d = l.nrows();
            let l_inv = l
                .clone()
                .solve_lower_triangular(&DMatrix::identity(d, d))
                .ok_or_else(|| Error::config("singular covariance"))?;
            inverses.push(l_inv.transpose() * l_inv);
            half_log_dets.push(l.diagonal().iter().map(|v| v.ln()).sum());
        }
        Ok(Self {
            means: spec
                .means
                .iter()
                .map(|m| DVector::from_column_slice(m))
                .collect(),
            inverses,
            half_log_dets,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    fn log_likelihoods(&self, x: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(x);
        self.means
            .iter()
            .zip(&self.inverses)
            .zip(&self.half_log_dets)
            .map(|((m, inv), hld)| {
                let diff = &x - m;
                -0.5 * diff.dot(&(inv * &diff)) - hld
            })
            .collect()
    }

    pub fn posterior(&self, x: &[f64]) -> Vec<f64> {
        crate::numcore::softmax(&self.log_likelihoods(x))
    }

    pub fn classify(&self, x: &[f64]) -> usize {
        argmax(&self.log_likelihoods(x))
    }
}

/// Draws `samples_per_class` points per component, class-major order.
pub fn generate_mixture(
    spec: &MixtureSpec,
    rng: &mut StreamRng,
) -> Result<(LabeledData, BayesClassifier)> {
    let factors = spec.factors()?;
    let d = spec.dim();
    let mut xs = Vec::with_capacity(spec.num_classes() * spec.samples_per_class);
    let mut labels = Vec::with_capacity(xs.capacity());
    for (k, (mean, l)) in spec.means.iter().zip(&factors).enumerate() {
        for _ in 0..spec.samples_per_class {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let offset = l * z;
            xs.push(mean.iter().zip(offset.iter()).map(|(m, o)| m + o).collect());
            labels.push(k);
        }
    }
    let bayes = BayesClassifier::new(spec)?;
    Ok((
        LabeledData {
            xs,
            labels,
            num_classes: spec.num_classes(),
        },
        bayes,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn default_benchmark_counts() {
        let (data, _) = generate_mixture(&MixtureSpec::default(), &mut substream(0, 1)).unwrap();
        assert_eq!(data.len(), 4000);
        for y in 0..8 {
            assert_eq!(data.labels.iter().filter(|&&l| l == y).count(), 500);
        }
    }

    #[test]
    fn same_seed_same_data() {
        let spec = MixtureSpec::ring(3, 2.0, 0.5, 20);
        let a = generate_mixture(&spec, &mut substream(4, 1)).unwrap().0;
        let b = generate_mixture(&spec, &mut substream(4, 1)).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn class_means_within_three_standard_errors() {
        let spec = MixtureSpec::default();
        let (data, _) = generate_mixture(&spec, &mut substream(1, 1)).unwrap();
        let se = (0.3f64 / 500.0).sqrt();
        for y in 0..8 {
            let pts = data.class_points(y);
            for j in 0..2 {
                let mean = pts.iter().map(|p| p[j]).sum::<f64>() / pts.len() as f64;
                assert!(
                    (mean - spec.means[y][j]).abs() < 3.0 * se,
                    "class {y} coord {j}"
                );
            }
        }
    }

    #[test]
    fn invalid_covariances_rejected() {
        let mut spec = MixtureSpec::ring(2, 1.0, 0.2, 5);
        spec.covariances[1] = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(matches!(
            generate_mixture(&spec, &mut substream(0, 0)),
            Err(Error::Config(_))
        ));
        spec.covariances[1] = vec![vec![1.0, 0.5], vec![0.0, 1.0]];
        assert!(matches!(
            generate_mixture(&spec, &mut substream(0, 0)),
            Err(Error::Config(_))
        ));
        let single = MixtureSpec::ring(1, 1.0, 0.2, 5);
        assert!(generate_mixture(&single, &mut substream(0, 0)).is_err());
    }

    #[test]
    fn bayes_classifier_picks_nearest_mean_for_isotropic_components() {
        let spec = MixtureSpec::ring(4, 3.0, 0.5, 1);
        let bayes = BayesClassifier::new(&spec).unwrap();
        assert_eq!(bayes.classify(&[2.9, 0.1]), 0);
        assert_eq!(bayes.classify(&[0.2, 3.5]), 1);
        assert_eq!(bayes.classify(&[0.0, -2.0]), 3);
        let p = bayes.posterior(&[0.0, 0.0]);
        for v in p {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }
}
