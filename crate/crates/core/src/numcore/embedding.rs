use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor2;
use crate::{Error, Result};

/// Frequency base of the sinusoidal time features.
pub const TIME_EMBEDDING_BASE: f64 = 10_000.0;

/// Sinusoidal features of a timestep.
///
/// Entry `2k` is `sin(t * w_k)` and entry `2k + 1` is `cos(t * w_k)` with
/// `w_k = base^(-2k / dim)`. `t = 0` is accepted for probing; otherwise
/// `t` must lie in `1..=t_max`.
pub fn time_embedding(t: usize, dim: usize, t_max: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::config(format!(
            "time embedding dim must be even and positive, got {dim}"
        )));
    }
    if t > t_max {
        return Err(Error::input(format!("timestep {t} outside 1..={t_max}")));
    }
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let freq = TIME_EMBEDDING_BASE.powf(-((2 * k) as f64) / dim as f64);
        let arg = t as f64 * freq;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}

/// Learned class vectors. Row `num_classes` is the null condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawEmbeddingTable")]
pub struct EmbeddingTable {
    num_classes: usize,
    rows: Tensor2,
}

#[derive(Deserialize)]
struct RawEmbeddingTable {
    num_classes: usize,
    rows: Tensor2,
}

impl TryFrom<RawEmbeddingTable> for EmbeddingTable {
    type Error = Error;

    fn try_from(raw: RawEmbeddingTable) -> Result<Self> {
        EmbeddingTable::from_rows(raw.num_classes, raw.rows)
    }
}

impl EmbeddingTable {
    pub fn new<R: Rng + ?Sized>(num_classes: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::config(
                "embedding table needs classes and a positive dim",
            ));
        }
        Ok(Self {
            num_classes,
            rows: Tensor2::glorot(num_classes + 1, dim, rng),
        })
    }

    pub fn from_rows(num_classes: usize, rows: Tensor2) -> Result<Self> {
        if rows.rows() != num_classes + 1 {
            return Err(Error::input(format!(
                "embedding table for {num_classes} classes needs {} rows, got {}",
                num_classes + 1,
                rows.rows()
            )));
        }
        Ok(Self { num_classes, rows })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_entries(&self) -> usize {
        self.num_classes + 1
    }

    pub fn null_index(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn rows(&self) -> &Tensor2 {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut Tensor2 {
        &mut self.rows
    }

    pub fn lookup(&self, index: usize) -> Result<&[f64]> {
        if index > self.num_classes {
            return Err(Error::input(format!(
                "condition {index} outside 0..={} (null = {})",
                self.num_classes, self.num_classes
            )));
        }
        Ok(self.rows.row(index))
    }
}
