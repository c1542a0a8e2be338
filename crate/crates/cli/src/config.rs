//! Run configuration: defaults, then the run directory's persisted config,
//! then an optional TOML file, then command-line flags.

use std::path::Path;

use layersep::debs::DebsConfig;
use layersep::denoiser::{DenoiserTrainConfig, PromptInit};
use layersep::depthnet::DepthTrainConfig;
use layersep::revae::{LossWeights, VaeTrainConfig};
use layersep::SceneParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_n: usize,
    pub test_n: usize,
    /// Global data seed; each split derives its own corpus seed from it.
    pub seed: u64,
    pub scene: SceneParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_n: 1024, test_n: 64, seed: 0, scene: SceneParams::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VaeSection {
    pub train: VaeTrainConfig,
    pub weights: LossWeights,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum VaeVariant {
    #[default]
    Equiv,
    Recon,
}

impl VaeVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Equiv => "equiv",
            Self::Recon => "recon",
        }
    }
}

/// Which trained models sampling and evaluation use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSelection {
    pub vae: VaeVariant,
    pub prompt: PromptInit,
}

impl Default for ModelSelection {
    fn default() -> Self {
        Self { vae: VaeVariant::Equiv, prompt: PromptInit::Learned }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Number of test samples; 0 means the whole split.
    pub n: usize,
    pub checkpoint_every: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n: 0, checkpoint_every: 250 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub vae: VaeSection,
    pub denoiser: DenoiserTrainConfig,
    pub depth: DepthTrainConfig,
    pub models: ModelSelection,
    pub sampling: DebsConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// Sampling is plain unless a branch count above one is requested.
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            vae: VaeSection::default(),
            denoiser: DenoiserTrainConfig::default(),
            depth: DepthTrainConfig::default(),
            models: ModelSelection::default(),
            sampling: DebsConfig { k: 1, ..DebsConfig::default() },
            eval: EvalConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_toml(path: &Path) -> CliResult<toml::Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

impl RunConfig {
    /// Layers each existing file over the defaults, in order.
    pub fn layered(files: &[&Path]) -> CliResult<Self> {
        let mut value = toml::Value::try_from(Self::default()).map_err(|e| CliError::Validation(e.to_string()))?;
        for f in files {
            merge(&mut value, read_toml(f)?);
        }
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| CliError::Validation(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.data.scene.validate()?;
        if self.data.train_n == 0 || self.data.test_n == 0 {
            return Err(CliError::Validation("data.train_n and data.test_n must be positive".into()));
        }
        if self.vae.train.arch.image_size != self.data.scene.image_size {
            return Err(CliError::Validation("vae.train.arch.image_size must equal data.scene.image_size".into()));
        }
        if self.depth.arch.image_size != self.data.scene.image_size {
            return Err(CliError::Validation("depth.arch.image_size must equal data.scene.image_size".into()));
        }
        if self.vae.train.arch.latent_channels != self.denoiser.arch.latent_channels {
            return Err(CliError::Validation("denoiser.arch.latent_channels must equal the autoencoder's".into()));
        }
        self.vae.train.arch.validate()?;
        self.vae.weights.validate()?;
        self.denoiser.validate()?;
        self.depth.arch.validate()?;
        self.sampling.validate()?;
        if self.eval.checkpoint_every == 0 {
            return Err(CliError::Validation("eval.checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn later_files_override_earlier_ones() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.toml");
        let b = dir.path().join("b.toml");
        std::fs::write(&a, "[data]\ntrain_n = 10\ntest_n = 3\n[sampling]\nk = 8\n").unwrap();
        std::fs::write(&b, "[data]\ntrain_n = 20\n").unwrap();
        let cfg = RunConfig::layered(&[&a, &b]).unwrap();
        assert_eq!((cfg.data.train_n, cfg.data.test_n, cfg.sampling.k), (20, 3, 8));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[sampling]\nkk = 8\n").unwrap();
        assert!(matches!(RunConfig::layered(&[&p]), Err(CliError::Validation(_))));
        std::fs::write(&p, "[sampling]\nk = 0\n").unwrap();
        assert!(matches!(RunConfig::layered(&[&p]), Err(CliError::Validation(_))));
    }
}
