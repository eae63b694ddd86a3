//! Multilayer perceptron with hand-written backpropagation.
//!
//! Hidden layers apply an activation, the output layer is affine. Shapes are
//! checked at every call and reported as [`Error::Input`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use super::ParamSet;
use crate::{Error, Result};

/// Hidden-layer nonlinearity. Both are smooth, so gradients exist everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    /// `x * sigmoid(x)`.
    SmoothRelu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::SmoothRelu => z / (1.0 + (-z).exp()),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::SmoothRelu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// Shape `(out, in)`.
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMlp")]
pub struct MlpParams {
    layers: Vec<Dense>,
    /// One per hidden layer, i.e. `layers.len() - 1` entries.
    activations: Vec<Activation>,
}

#[derive(Deserialize)]
struct RawMlp {
    layers: Vec<Dense>,
    activations: Vec<Activation>,
}

impl TryFrom<RawMlp> for MlpParams {
    type Error = Error;

    fn try_from(raw: RawMlp) -> Result<Self> {
        MlpParams::from_layers(raw.layers, raw.activations)
    }
}

/// Activations recorded by [`MlpParams::forward`] for an exact backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
}

impl MlpParams {
    /// Glorot-initialized network with widths `dims[0] -> dims[1] -> ... -> dims[n]`.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::config(format!("invalid layer widths {dims:?}")));
        }
        let layers = dims
            .windows(2)
            .map(|w| Dense {
                weight: Tensor2::glorot(w[1], w[0], rng),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Ok(Self {
            layers,
            activations: vec![activation; dims.len() - 2],
        })
    }

    pub fn from_layers(layers: Vec<Dense>, activations: Vec<Activation>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::input("network needs at least one layer"));
        }
        if activations.len() + 1 != layers.len() {
            return Err(Error::input(format!(
                "{} layers need {} activations, got {}",
                layers.len(),
                layers.len() - 1,
                activations.len()
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(Error::input(format!("layer {i}: bias length mismatch")));
            }
            if layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::input(format!("layer {i}: non-finite bias")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::input(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            activations,
        })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Same architecture, all parameters zero. Used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.fill(0.0);
        out
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        if input.len() != self.input_dim() {
            return Err(Error::input(format!(
                "network expects input of length {}, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let depth = self.layers.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth - 1);
        let mut h = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weight.matvec(&h);
            for (zi, b) in z.iter_mut().zip(&layer.bias) {
                *zi += b;
            }
            inputs.push(h);
            if i + 1 < depth {
                let act = self.activations[i];
                let a = z.iter().map(|&v| act.apply(v)).collect();
                pre.push(z);
                h = a;
            } else {
                h = z;
            }
        }
        Ok((h, MlpCache { inputs, pre }))
    }

    /// Output only; skips the cache.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Gradients of a scalar loss whose derivative w.r.t. the output is
    /// `output_grad`. Returns `(parameter gradients, input gradient)`.
    pub fn backward(&self, cache: &MlpCache, output_grad: &[f64]) -> Result<(MlpParams, Vec<f64>)> {
        let mut grads = self.zeros_like();
        let input_grad = self.backward_accumulate(cache, output_grad, &mut grads)?;
        Ok((grads, input_grad))
    }

    /// Like [`backward`](Self::backward) but adds into an existing gradient buffer.
    pub fn backward_accumulate(
        &self,
        cache: &MlpCache,
        output_grad: &[f64],
        grads: &mut MlpParams,
    ) -> Result<Vec<f64>> {
        if cache.inputs.len() != self.layers.len() || cache.pre.len() + 1 != self.layers.len() {
            return Err(Error::input("cache does not come from this network"));
        }
        if output_grad.len() != self.output_dim() {
            return Err(Error::input(format!(
                "output gradient has length {}, network outputs {}",
                output_grad.len(),
                self.output_dim()
            )));
        }
        if grads.layers.len() != self.layers.len()
            || grads
                .layers
                .iter()
                .zip(&self.layers)
                .any(|(g, l)| g.weight.shape() != l.weight.shape())
        {
            return Err(Error::input("gradient buffer shape mismatch"));
        }

        let mut delta = output_grad.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &cache.inputs[i];
            if input.len() != layer.in_dim() {
                return Err(Error::input("cache does not come from this network"));
            }
            let g = &mut grads.layers[i];
            for (r, &d) in delta.iter().enumerate() {
                g.bias[r] += d;
                if d != 0.0 {
                    for (gw, &x) in g.weight.row_mut(r).iter_mut().zip(input) {
                        *gw += d * x;
                    }
                }
            }
            let mut prev = vec![0.0; layer.in_dim()];
            for (r, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    for (p, &w) in prev.iter_mut().zip(layer.weight.row(r)) {
                        *p += d * w;
                    }
                }
            }
            if i > 0 {
                let act = self.activations[i - 1];
                for (p, &z) in prev.iter_mut().zip(&cache.pre[i - 1]) {
                    *p *= act.derivative(z);
                }
            }
            delta = prev;
        }
        Ok(delta)
    }
}

impl ParamSet for MlpParams {
    fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
            .collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
            .collect()
    }
}
