use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Result, TrainError};
use crate::data::PreprocessConfig;
use crate::model::ModelConfig;

/// Optimization recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub total_steps: usize,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    /// Teacher-forcing ratio at step 0 and at `total_steps`, linear between.
    pub tf_start: f64,
    pub tf_end: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Scales every learning rate by one tenth.
    pub fine_tune: bool,
    pub hflip_prob: f64,
    /// Share of the manifest (taken from its end) held out for validation;
    /// zero disables validation and early stopping.
    pub val_fraction: f64,
    /// Steps between numbered checkpoints; zero writes only the final one.
    pub checkpoint_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_initial: 1e-3,
            total_steps: 10_000,
            clip_norm: 1.0,
            tf_start: 1.0,
            tf_end: 0.5,
            patience: 10,
            batch_size: 8,
            seed: 0,
            fine_tune: false,
            hflip_prob: 0.5,
            val_fraction: 0.1,
            checkpoint_every: 1000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.total_steps == 0 || self.batch_size == 0 {
            return fail("total_steps and batch_size must be positive");
        }
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) || !(self.clip_norm > 0.0) {
            return fail("lr_initial and clip_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.tf_end) || !(self.tf_end..=1.0).contains(&self.tf_start) {
            return fail("need 0 <= tf_end <= tf_start <= 1");
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) || !(0.0..1.0).contains(&self.val_fraction) {
            return fail("hflip_prob must lie in [0, 1] and val_fraction in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta1)
            || !(0.0..1.0).contains(&self.adam_beta2)
            || !(self.adam_eps > 0.0)
        {
            return fail("Adam decay rates must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }
}

/// Everything a training run is configured by: one TOML file with
/// `[model]`, `[train]` and `[data]` tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: PreprocessConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if d.n_mels != self.model.mel_channels {
            return Err(TrainError::Config(format!(
                "data.n_mels ({}) differs from model.mel_channels ({})",
                d.n_mels, self.model.mel_channels
            )));
        }
        if d.frame_size != self.model.frame_size {
            return Err(TrainError::Config(format!(
                "data.frame_size ({}) differs from model.frame_size ({})",
                d.frame_size, self.model.frame_size
            )));
        }
        if d.grayscale && self.model.input_channels != 1 {
            return Err(TrainError::Config(
                "grayscale input needs model.input_channels = 1".into(),
            ));
        }
        d.filterbank()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = RunConfig::from_toml("[train]\ntotal_steps = 5\n").unwrap();
        assert_eq!(partial.train.total_steps, 5);
        assert_eq!(partial.model, ModelConfig::default());
        assert!(RunConfig::from_toml("[train]\nbogus = 1\n").is_err());
    }

    #[test]
    fn cross_section_checks() {
        let mut cfg = RunConfig::default();
        cfg.data.n_mels = 40;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.train.tf_end = 0.9;
        cfg.train.tf_start = 0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
