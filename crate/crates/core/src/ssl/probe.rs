use serde::{Deserialize, Serialize};

use crate::numcore::{argmax, softmax, Tensor2};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// L2 penalty on the weights (the bias is not penalized).
    pub l2: f64,
    pub max_iters: usize,
    /// Stop once the full gradient norm drops below this.
    pub grad_tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            max_iters: 2000,
            grad_tol: 1e-6,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::config("l2 must be a finite non-negative number"));
        }
        if self.grad_tol.is_nan() || self.grad_tol < 0.0 {
            return Err(Error::config("grad_tol must be non-negative"));
        }
        Ok(())
    }
}

/// Multinomial logistic regression on frozen features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    /// Shape `(classes, features)`.
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub l2: f64,
    /// Iterations actually run and the final gradient norm.
    pub iterations: usize,
    pub grad_norm: f64,
}

impl LinearProbe {
    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        let mut z = self.weight.matvec(feature);
        for (zi, b) in z.iter_mut().zip(&self.bias) {
            *zi += b;
        }
        z
    }

    pub fn weight_norm(&self) -> f64 {
        self.weight.data().iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}

/// Full-batch gradient descent on mean cross-entropy plus `l2/2 · ‖W‖²`.
///
/// The step size is `1/L` with `L = ½·mean‖[x, 1]‖² + l2`, an upper bound on
/// the curvature of the objective, so every step decreases it.
pub fn train_probe(
    features: &Tensor2,
    labels: &[usize],
    num_classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    let n = features.rows();
    if n == 0 || labels.len() != n {
        return Err(Error::input(format!(
            "{n} feature rows vs {} labels",
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::input(format!("label {l} outside 0..{num_classes}")));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::config("probe training needs at least two classes"));
    }
    cfg.validate()?;
    let f = features.cols();
    let inv_n = 1.0 / n as f64;
    let mean_sq = features
        .iter_rows()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>() + 1.0)
        .sum::<f64>()
        * inv_n;
    let lr = 1.0 / (0.5 * mean_sq + cfg.l2);

    let mut w = Tensor2::zeros(num_classes, f);
    let mut b = vec![0.0; num_classes];
    let mut gw = Tensor2::zeros(num_classes, f);
    let mut gb = vec![0.0; num_classes];
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    while iterations < cfg.max_iters {
        gw.data_mut().fill(0.0);
        gb.fill(0.0);
        for (x, &y) in features.iter_rows().zip(labels) {
            let mut z = w.matvec(x);
            for (zi, bi) in z.iter_mut().zip(&b) {
                *zi += bi;
            }
            let mut p = softmax(&z);
            p[y] -= 1.0;
            for (c, pc) in p.iter().enumerate() {
                let coef = pc * inv_n;
                gb[c] += coef;
                for (g, xi) in gw.row_mut(c).iter_mut().zip(x) {
                    *g += coef * xi;
                }
            }
        }
        for (g, wi) in gw.data_mut().iter_mut().zip(w.data()) {
            *g += cfg.l2 * wi;
        }
        grad_norm = (gw.data().iter().chain(&gb).map(|g| g * g).sum::<f64>()).sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Training("probe gradient is not finite".into()));
        }
        if grad_norm < cfg.grad_tol {
            break;
        }
        for (wi, g) in w.data_mut().iter_mut().zip(gw.data()) {
            *wi -= lr * g;
        }
        for (bi, g) in b.iter_mut().zip(&gb) {
            *bi -= lr * g;
        }
        iterations += 1;
    }
    Ok(LinearProbe {
        weight: w,
        bias: b,
        l2: cfg.l2,
        iterations,
        grad_norm,
    })
}

/// Argmax labels (ties to the lowest class) and softmax probabilities.
pub fn predict(probe: &LinearProbe, features: &Tensor2) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    if features.cols() != probe.feature_dim() && features.rows() > 0 {
        return Err(Error::input(format!(
            "probe expects {} features, got {}",
            probe.feature_dim(),
            features.cols()
        )));
    }
    let mut labels = Vec::with_capacity(features.rows());
    let mut probs = Vec::with_capacity(features.rows());
    for x in features.iter_rows() {
        let z = probe.logits(x);
        labels.push(argmax(&z));
        probs.push(softmax(&z));
    }
    Ok((labels, probs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_blobs() -> (Tensor2, Vec<usize>) {
        let rows = vec![
            vec![2.0, 1.0],
            vec![2.5, 0.5],
            vec![3.0, 1.5],
            vec![-2.0, -1.0],
            vec![-2.5, 0.0],
            vec![-3.0, -0.5],
        ];
        (Tensor2::from_rows(&rows).unwrap(), vec![0, 0, 0, 1, 1, 1])
    }

    #[test]
    fn separable_classes_are_fit_exactly() {
        let (x, y) = two_blobs();
        let probe = train_probe(&x, &y, 2, &ProbeConfig::default()).unwrap();
        let (pred, probs) = predict(&probe, &x).unwrap();
        assert_eq!(pred, y);
        for p in probs {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stronger_regularization_shrinks_weights() {
        let (x, y) = two_blobs();
        let norms: Vec<f64> = [1e-3, 1e-1, 1.0, 10.0]
            .iter()
            .map(|&l2| {
                train_probe(
                    &x,
                    &y,
                    2,
                    &ProbeConfig {
                        l2,
                        ..ProbeConfig::default()
                    },
                )
                .unwrap()
                .weight_norm()
            })
            .collect();
        assert!(norms.windows(2).all(|w| w[1] < w[0]), "{norms:?}");
    }

    #[test]
    fn single_class_is_a_config_error() {
        let (x, _) = two_blobs();
        let err = train_probe(&x, &[1; 6], 2, &ProbeConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(train_probe(&x, &[0, 0, 0, 1, 1, 2], 2, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn zero_probe_predicts_uniform_and_class_zero() {
        let probe = LinearProbe {
            weight: Tensor2::zeros(3, 2),
            bias: vec![0.0; 3],
            l2: 0.0,
            iterations: 0,
            grad_norm: 0.0,
        };
        let x = Tensor2::from_rows(&[vec![1.0, 2.0], vec![-4.0, 0.5]]).unwrap();
        let (labels, probs) = predict(&probe, &x).unwrap();
        assert_eq!(labels, vec![0, 0]);
        for p in probs {
            for v in p {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn logits_two_one_one_predict_zero() {
        let probe = LinearProbe {
            weight: Tensor2::zeros(3, 1),
            bias: vec![2.0, 1.0, 1.0],
            l2: 0.0,
            iterations: 0,
            grad_norm: 0.0,
        };
        let (labels, _) = predict(&probe, &Tensor2::from_rows(&[vec![0.0]]).unwrap()).unwrap();
        assert_eq!(labels, vec![0]);
    }

    #[test]
    fn training_is_deterministic() {
        let (x, y) = two_blobs();
        let a = train_probe(&x, &y, 2, &ProbeConfig::default()).unwrap();
        let b = train_probe(&x, &y, 2, &ProbeConfig::default()).unwrap();
        assert_eq!(a, b);
    }
}
