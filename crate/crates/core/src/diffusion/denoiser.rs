use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DiffusionConfig;
use crate::numcore::{time_embedding, EmbeddingTable, MlpCache, MlpParams, ParamSet};
use crate::{Error, Result};

/// Noise predictor `ε(x_t, c, t)`.
///
/// The trunk sees `[x_t, time features, class embedding]`. Inputs and targets
/// live in a model space where data is divided by `data_scale`, so the
/// forward process starts from roughly unit-variance coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DenoiserRepr")]
pub struct ConditionalDenoiser {
    trunk: MlpParams,
    classes: EmbeddingTable,
    data_dim: usize,
    time_dim: usize,
    timesteps: usize,
    data_scale: f64,
}

#[derive(Deserialize)]
struct DenoiserRepr {
    trunk: MlpParams,
    classes: EmbeddingTable,
    data_dim: usize,
    time_dim: usize,
    timesteps: usize,
    data_scale: f64,
}

impl TryFrom<DenoiserRepr> for ConditionalDenoiser {
    type Error = Error;

    fn try_from(r: DenoiserRepr) -> Result<Self> {
        let model = Self::from_parts(r.trunk, r.classes, r.time_dim, r.timesteps, r.data_scale)?;
        if model.data_dim != r.data_dim {
            return Err(Error::input("denoiser data_dim does not match its trunk"));
        }
        Ok(model)
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserCache {
    mlp: MlpCache,
    condition: usize,
}

impl ConditionalDenoiser {
    pub fn new<R: Rng + ?Sized>(
        data_dim: usize,
        num_classes: usize,
        data_scale: f64,
        cfg: &DiffusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if data_dim == 0 {
            return Err(Error::config("data dimension must be positive"));
        }
        if !(data_scale > 0.0 && data_scale.is_finite()) {
            return Err(Error::config(format!(
                "data scale must be positive, got {data_scale}"
            )));
        }
        cfg.validate()?;
        let mut dims = vec![data_dim + cfg.time_dim + cfg.class_dim];
        dims.extend(&cfg.hidden);
        dims.push(data_dim);
        let trunk = MlpParams::new(&dims, cfg.activation, rng)?;
        let classes = EmbeddingTable::new(num_classes, cfg.class_dim, rng)?;
        Ok(Self {
            trunk,
            classes,
            data_dim,
            time_dim: cfg.time_dim,
            timesteps: cfg.timesteps,
            data_scale,
        })
    }

    pub fn from_parts(
        trunk: MlpParams,
        classes: EmbeddingTable,
        time_dim: usize,
        timesteps: usize,
        data_scale: f64,
    ) -> Result<Self> {
        let data_dim = trunk.output_dim();
        if trunk.input_dim() != data_dim + time_dim + classes.dim() {
            return Err(Error::input(format!(
                "trunk input width {} != data {} + time {} + class {}",
                trunk.input_dim(),
                data_dim,
                time_dim,
                classes.dim()
            )));
        }
        if !(data_scale > 0.0 && data_scale.is_finite()) || timesteps < 2 {
            return Err(Error::input(
                "denoiser needs a positive data scale and at least 2 timesteps",
            ));
        }
        Ok(Self {
            trunk,
            classes,
            data_dim,
            time_dim,
            timesteps,
            data_scale,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.data_dim
    }

    pub fn num_classes(&self) -> usize {
        self.classes.num_classes()
    }

    pub fn null_class(&self) -> usize {
        self.classes.null_index()
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn data_scale(&self) -> f64 {
        self.data_scale
    }

    pub fn trunk(&self) -> &MlpParams {
        &self.trunk
    }

    pub fn trunk_mut(&mut self) -> &mut MlpParams {
        &mut self.trunk
    }

    pub fn classes(&self) -> &EmbeddingTable {
        &self.classes
    }

    pub fn classes_mut(&mut self) -> &mut EmbeddingTable {
        &mut self.classes
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.fill(0.0);
        out
    }

    fn input(&self, x: &[f64], t: usize, condition: usize) -> Result<Vec<f64>> {
        if x.len() != self.data_dim {
            return Err(Error::input(format!(
                "denoiser expects dimension {}, got {}",
                self.data_dim,
                x.len()
            )));
        }
        if t == 0 {
            return Err(Error::input("timestep must be at least 1"));
        }
        let mut input = Vec::with_capacity(self.trunk.input_dim());
        input.extend_from_slice(x);
        input.extend(time_embedding(t, self.time_dim, self.timesteps)?);
        input.extend_from_slice(self.classes.lookup(condition)?);
        Ok(input)
    }

    /// Predicted noise for model-space `x` at timestep `t`. `condition` is a
    /// class index or [`null_class`](Self::null_class).
    pub fn forward(
        &self,
        x: &[f64],
        t: usize,
        condition: usize,
    ) -> Result<(Vec<f64>, DenoiserCache)> {
        let input = self.input(x, t, condition)?;
        let (out, mlp) = self.trunk.forward(&input)?;
        Ok((out, DenoiserCache { mlp, condition }))
    }

    pub fn predict(&self, x: &[f64], t: usize, condition: usize) -> Result<Vec<f64>> {
        self.forward(x, t, condition).map(|(out, _)| out)
    }

    /// Adds parameter gradients into `grads` (same architecture as `self`).
    pub fn backward_accumulate(
        &self,
        cache: &DenoiserCache,
        output_grad: &[f64],
        grads: &mut ConditionalDenoiser,
    ) -> Result<()> {
        let input_grad =
            self.trunk
                .backward_accumulate(&cache.mlp, output_grad, &mut grads.trunk)?;
        let offset = self.data_dim + self.time_dim;
        let row = grads.classes.rows_mut().row_mut(cache.condition);
        for (g, d) in row.iter_mut().zip(&input_grad[offset..]) {
            *g += d;
        }
        Ok(())
    }
}

impl ParamSet for ConditionalDenoiser {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.trunk.slices();
        out.push(self.classes.rows().data());
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.trunk.slices_mut();
        out.push(self.classes.rows_mut().data_mut());
        out
    }
}
