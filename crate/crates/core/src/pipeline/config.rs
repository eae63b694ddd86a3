use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{MixtureSpec, SplitSpec};
use crate::diffusion::DiffusionConfig;
use crate::ssl::{MsnConfig, ProbeConfig};
use crate::{Error, Result};

/// Knobs of the stage loop itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Pseudo samples per class fed to stage 3.
    pub k: usize,
    /// Extra K values evaluated from the same stage-1/2 artifacts.
    pub k_grid: Vec<usize>,
    pub refinement_rounds: usize,
    /// Stage-4 diffusion retraining continues from the previous model
    /// instead of starting over.
    pub fine_tune: bool,
    /// Generated points per class used for the Fréchet evaluation.
    pub eval_samples_per_class: usize,
    /// Size of the independently drawn evaluation set, per class.
    pub heldout_per_class: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            k: 128,
            k_grid: Vec::new(),
            refinement_rounds: 0,
            fine_tune: false,
            eval_samples_per_class: 500,
            heldout_per_class: 500,
        }
    }
}

impl PipelineConfig {
    /// The largest K any stage-3 probe needs; S₂ is sampled once at this size.
    pub fn max_k(&self) -> usize {
        self.k_grid
            .iter()
            .copied()
            .chain([self.k])
            .max()
            .unwrap_or(0)
    }

    /// `k` followed by the grid, deduplicated, in first-seen order.
    pub fn all_k(&self) -> Vec<usize> {
        let mut out = vec![self.k];
        for &k in &self.k_grid {
            if !out.contains(&k) {
                out.push(k);
            }
        }
        out
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.eval_samples_per_class <= dim || self.heldout_per_class <= dim {
            return Err(Error::config(format!(
                "eval_samples_per_class and heldout_per_class must exceed the data dimension {dim}"
            )));
        }
        Ok(())
    }
}

/// Everything one run needs; the JSON form is what `--config` reads.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub mixture: MixtureSpec,
    pub split: SplitSpec,
    pub msn: MsnConfig,
    pub probe: ProbeConfig,
    pub diffusion: DiffusionConfig,
    pub pipeline: PipelineConfig,
    /// Root under which run directories are created. Not part of the hash.
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn num_classes(&self) -> usize {
        self.mixture.num_classes()
    }

    pub fn validate(&self) -> Result<()> {
        self.mixture.validate()?;
        if self.split.labels_per_class == 0 {
            return Err(Error::config("split.labels_per_class must be at least 1"));
        }
        if self.split.labels_per_class > self.mixture.samples_per_class {
            return Err(Error::config(
                "split.labels_per_class exceeds mixture.samples_per_class",
            ));
        }
        self.msn.validate(self.num_classes())?;
        self.probe.validate()?;
        self.diffusion.validate()?;
        self.pipeline.validate(self.mixture.dim())
    }

    /// Seed for the mixture and held-out draws.
    pub fn data_seed(&self) -> u64 {
        self.mixture.seed.unwrap_or(self.seed)
    }

    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or(self.seed)
    }

    /// SHA-256 of the config with `seed` and `output_dir` blanked, as hex.
    pub fn hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.seed = 0;
        canonical.output_dir = None;
        let bytes = serde_json::to_vec(&canonical)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// `<root>/<first 12 hash chars>-seed<seed>`.
    pub fn run_dir(&self, root: &Path) -> Result<PathBuf> {
        Ok(root.join(format!("{}-seed{}", &self.hash()?[..12], self.seed)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = RunConfig::from_json(r#"{"seed": 1, "colour": 3}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = RunConfig::from_json(r#"{"pipeline": {"kk": 3}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 9, "pipeline": {"k": 12}}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.pipeline.k, 12);
        assert_eq!(cfg.msn, MsnConfig::default());
    }

    #[test]
    fn hash_ignores_seed_and_output_dir_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 77;
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.pipeline.k = 3;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert!(a
            .run_dir(Path::new("r"))
            .unwrap()
            .ends_with(format!("{}-seed0", &a.hash().unwrap()[..12])));
    }

    #[test]
    fn k_grid_helpers() {
        let p = PipelineConfig {
            k: 128,
            k_grid: vec![12, 128, 256],
            ..PipelineConfig::default()
        };
        assert_eq!(p.max_k(), 256);
        assert_eq!(p.all_k(), vec![128, 12, 256]);
    }

    #[test]
    fn too_many_labels_rejected() {
        let mut cfg = RunConfig::default();
        cfg.split.labels_per_class = 10_000;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
