//! Dense numeric kernel shared by the denoiser and the encoders.

mod checkpoint;
mod embedding;
mod mlp;
mod optim;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use embedding::{time_embedding, EmbeddingTable, TIME_EMBEDDING_BASE};
pub use mlp::{Activation, Dense, MlpCache, MlpParams};
pub use optim::{AdamConfig, AdamState, Sgd};
pub use tensor::{argmax, dot, log_sum_exp, norm, softmax, Tensor2};

use sha2::{Digest, Sha256};

/// A bundle of parameter arrays that an optimizer can walk in a fixed order.
///
/// Gradient buffers use the same type as the parameters, so shapes line up
/// slice by slice.
pub trait ParamSet {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_params(), "flat parameter length");
        let mut offset = 0;
        for s in self.slices_mut() {
            s.copy_from_slice(&values[offset..offset + s.len()]);
            offset += s.len();
        }
    }

    fn fill(&mut self, value: f64) {
        for s in self.slices_mut() {
            s.fill(value);
        }
    }

    fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// SHA-256 over the little-endian bit patterns of every parameter.
    fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for s in self.slices() {
            hasher.update((s.len() as u64).to_le_bytes());
            for v in s {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

impl ParamSet for Tensor2 {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.data()]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.data_mut()]
    }
}
