use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::numcore::Tensor2;
use crate::{Error, Result};

/// Eigenvalues above `-PSD_TOLERANCE · max(1, |λ|max)` count as rounding noise
/// and are clamped to zero; anything more negative is an error.
const PSD_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    pub cov: Tensor2,
    pub count: usize,
}

impl GaussianFit {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, self.cov.data())
    }
}

/// Sample mean and unbiased covariance, symmetrized as `(Σ + Σᵀ) / 2`.
pub fn fit_gaussian<S: AsRef<[f64]>>(samples: &[S]) -> Result<GaussianFit> {
    let d = samples.first().map_or(0, |s| s.as_ref().len());
    if d == 0 {
        return Err(Error::input("cannot fit a Gaussian to no samples"));
    }
    if samples.len() < d + 1 {
        return Err(Error::input(format!(
            "{} samples are too few for a {d}-dimensional fit",
            samples.len()
        )));
    }
    if samples.iter().any(|s| s.as_ref().len() != d) {
        return Err(Error::input("samples differ in dimension"));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s.as_ref()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; d * d];
    for s in samples {
        let s = s.as_ref();
        for i in 0..d {
            let di = s[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (s[j] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in 0..d {
            let v = 0.5 * (cov[i * d + j] + cov[j * d + i]) / (n - 1.0);
            cov[i * d + j] = v;
        }
    }
    Ok(GaussianFit {
        mean,
        cov: Tensor2::from_vec(d, d, cov)?,
        count: samples.len(),
    })
}

fn clamped_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = 0.5 * (m + m.transpose());
    let mut eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < -PSD_TOLERANCE * scale {
            return Err(Error::numeric(format!(
                "{what} is not positive semidefinite (eigenvalue {v})"
            )));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2 (Σ₁Σ₂)^{1/2})`.
///
/// The cross term is the trace of the square root of the symmetric matrix
/// `Σ₁^{1/2} Σ₂ Σ₁^{1/2}`, which shares its eigenvalues with `Σ₁Σ₂`.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::input(format!(
            "Gaussian fits differ in dimension ({} vs {})",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    let sa = a.cov_matrix();
    let sb = b.cov_matrix();

    let ea = clamped_eigen(&sa, "first covariance")?;
    let root_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt))
        * ea.eigenvectors.transpose();
    let inner = &root_a * &sb * &root_a;
    let cross: f64 = clamped_eigen(&inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum();
    // Validate the second covariance as well; the cross term alone would not.
    clamped_eigen(&sb, "second covariance")?;

    let fd = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(fd.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn fit(mean: Vec<f64>, cov: Vec<f64>) -> GaussianFit {
        let d = mean.len();
        GaussianFit {
            mean,
            cov: Tensor2::from_vec(d, d, cov).unwrap(),
            count: 100,
        }
    }

    #[test]
    fn identical_points_have_zero_covariance() {
        let pts = vec![vec![1.5, -2.0]; 5];
        let g = fit_gaussian(&pts).unwrap();
        assert_eq!(g.mean, vec![1.5, -2.0]);
        assert!(g.cov.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mirrored_cloud_recovers_mean_exactly() {
        let center = [0.5, -0.25];
        let offsets = [[1.0, 2.0], [0.5, -0.75], [-3.0, 0.125]];
        let mut pts = Vec::new();
        for o in offsets {
            pts.push(vec![center[0] + o[0], center[1] + o[1]]);
            pts.push(vec![center[0] - o[0], center[1] - o[1]]);
        }
        assert_eq!(fit_gaussian(&pts).unwrap().mean, center.to_vec());
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(fit_gaussian(&[vec![0.0, 1.0], vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn unit_gaussian_cloud_has_identity_covariance() {
        let mut rng = substream(3, 3);
        let pts: Vec<Vec<f64>> = (0..10_000)
            .map(|_| (0..3).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let g = fit_gaussian(&pts).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((g.cov.get(i, j) - target).abs() < 0.1);
            }
        }
    }

    #[test]
    fn diagonal_closed_form() {
        let a = fit(vec![1.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]);
        let b = fit(vec![0.0, 0.0], vec![4.0, 0.0, 0.0, 4.0]);
        // 1 + sum over dims of (sqrt(1) - sqrt(4))^2
        assert!((frechet_distance(&a, &b).unwrap() - 3.0).abs() < 1e-10);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-12);
    }

    #[test]
    fn symmetric_in_arguments() {
        let a = fit(vec![0.3, -1.0], vec![2.0, 0.7, 0.7, 1.0]);
        let b = fit(vec![-0.5, 0.2], vec![0.5, -0.1, -0.1, 3.0]);
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-10);
        assert!(ab > 0.0);
    }

    #[test]
    fn non_psd_and_dimension_errors() {
        let bad = fit(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, -1.0]);
        let ok = fit(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            frechet_distance(&bad, &ok),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            frechet_distance(&ok, &bad),
            Err(Error::Numeric(_))
        ));
        let one_d = fit(vec![0.0], vec![1.0]);
        assert!(matches!(
            frechet_distance(&ok, &one_d),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn singular_covariances_are_fine() {
        let a = fit(vec![0.0, 0.0], vec![1.0, 1.0, 1.0, 1.0]);
        let b = fit(vec![0.0, 0.0], vec![0.0, 0.0, 0.0, 0.0]);
        assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-10);
    }
}
