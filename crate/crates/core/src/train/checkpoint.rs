//! Resumable training archives.
//!
//! A checkpoint is a tensor [`Archive`] whose config field holds the full
//! [`RunConfig`] as TOML (hashed into the header), whose meta field holds
//! the loop counters and RNG position as TOML, and whose entries are the
//! model parameters, batch-norm statistics and both optimizer moments
//! (`adam.m.<param>`, `adam.v.<param>`).

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Adam, Result, RunConfig, TrainError};
use crate::data::PreprocessConfig;
use crate::model::{Model, ModelConfig};
use crate::tensor::Archive;

/// Everything besides the model that the next step depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: usize,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_loss: Option<f64>,
    /// Validation loss at the end of each completed epoch.
    pub val_history: Vec<f64>,
    /// Training-clip order of the current epoch and the position in it.
    pub epoch_order: Vec<usize>,
    pub cursor: usize,
    pub rng: ChaCha8Rng,
    pub adam: Adam,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    step: usize,
    epoch: usize,
    best_val_loss: Option<f64>,
    val_history: Vec<f64>,
    epoch_order: Vec<usize>,
    cursor: usize,
    /// Hex seed, decimal stream and word position: TOML integers are
    /// signed 64-bit.
    rng_seed: String,
    rng_stream: String,
    rng_word_pos: String,
    adam_t: u64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub state: TrainState,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * i..2 * i + 2)?, 16).ok()?;
    }
    Some(out)
}

fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

/// Writes through a temporary sibling and renames, so an interrupted save
/// never leaves a truncated checkpoint behind.
pub fn save_checkpoint(
    path: &Path,
    config: &RunConfig,
    model: &Model,
    state: &TrainState,
) -> Result<()> {
    let rng = &state.rng;
    let meta = Meta {
        step: state.step,
        epoch: state.epoch,
        best_val_loss: state.best_val_loss,
        val_history: state.val_history.clone(),
        epoch_order: state.epoch_order.clone(),
        cursor: state.cursor,
        rng_seed: hex(&rng.get_seed()),
        rng_stream: rng.get_stream().to_string(),
        rng_word_pos: rng.get_word_pos().to_string(),
        adam_t: state.adam.t,
        adam_beta1: state.adam.beta1,
        adam_beta2: state.adam.beta2,
        adam_eps: state.adam.eps,
    };
    let text = config.to_toml();
    let mut a = Archive {
        config_hash: Sha256::digest(text.as_bytes()).into(),
        config: text,
        meta: toml::to_string(&meta).map_err(|e| corrupt(e.to_string()))?,
        ..Default::default()
    };
    model.write_entries(&mut a);
    let trainable = model
        .params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.name.clone());
    for ((name, m), v) in trainable.zip(&state.adam.m).zip(&state.adam.v) {
        a.push(&format!("adam.m.{name}"), m.clone());
        a.push(&format!("adam.v.{name}"), v.clone());
    }
    let tmp = path.with_extension("tmp");
    a.save(&tmp).map_err(|e| match e {
        crate::tensor::TensorError::Io(io) => TrainError::io(&tmp, io),
        other => other.into(),
    })?;
    std::fs::rename(&tmp, path).map_err(|e| TrainError::io(path, e))
}

fn read_archive(path: &Path) -> Result<Archive> {
    let file = std::fs::File::open(path).map_err(|e| TrainError::io(path, e))?;
    Ok(Archive::read_from(&mut std::io::BufReader::new(file))?)
}

/// Restores a checkpoint. With `expected` set, a checkpoint whose recorded
/// configuration hash differs is refused unless `allow_config_change`.
pub fn load_checkpoint(
    path: &Path,
    expected: Option<&RunConfig>,
    allow_config_change: bool,
) -> Result<Checkpoint> {
    let a = read_archive(path)?;
    let digest: [u8; 32] = Sha256::digest(a.config.as_bytes()).into();
    if digest != a.config_hash {
        return Err(corrupt(
            "embedded configuration does not match its recorded hash",
        ));
    }
    if let Some(exp) = expected {
        if exp.hash() != a.config_hash && !allow_config_change {
            return Err(TrainError::HashMismatch);
        }
    }
    let config = RunConfig::from_toml(&a.config)?;
    let model_cfg = expected
        .map(|e| e.model.clone())
        .unwrap_or_else(|| config.model.clone());
    let model = Model::from_entries(model_cfg, &a)?;
    let meta: Meta = toml::from_str(&a.meta).map_err(|e| corrupt(format!("meta: {e}")))?;

    let mut rng: ChaCha8Rng = rand::SeedableRng::from_seed(
        unhex(&meta.rng_seed).ok_or_else(|| corrupt("malformed rng seed"))?,
    );
    rng.set_stream(
        meta.rng_stream
            .parse()
            .map_err(|_| corrupt("malformed rng stream"))?,
    );
    rng.set_word_pos(
        meta.rng_word_pos
            .parse()
            .map_err(|_| corrupt("malformed rng position"))?,
    );

    let mut adam = Adam::new(
        &model.params,
        meta.adam_beta1,
        meta.adam_beta2,
        meta.adam_eps,
    );
    adam.t = meta.adam_t;
    let trainable: Vec<String> = model
        .params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.name.clone())
        .collect();
    for (i, name) in trainable.iter().enumerate() {
        for (kind, dst) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
            let key = format!("adam.{kind}.{name}");
            let t = a
                .get(&key)
                .ok_or_else(|| corrupt(format!("missing `{key}`")))?;
            if t.shape() != dst.shape() {
                return Err(corrupt(format!(
                    "`{key}` has shape {:?}, expected {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            *dst = t.clone();
        }
    }
    Ok(Checkpoint {
        config,
        model,
        state: TrainState {
            step: meta.step,
            epoch: meta.epoch,
            best_val_loss: meta.best_val_loss,
            val_history: meta.val_history,
            epoch_order: meta.epoch_order,
            cursor: meta.cursor,
            rng,
            adam,
        },
    })
}

/// Loads the model from either a training checkpoint or a standalone
/// model file.
pub fn load_model(path: &Path) -> Result<Model> {
    Ok(load_for_inference(path)?.0)
}

/// The model plus the preprocessing it was trained with. A standalone
/// model file carries no preprocessing section, so defaults matched to the
/// model's frame size and mel channels are returned.
pub fn load_for_inference(path: &Path) -> Result<(Model, PreprocessConfig)> {
    let a = read_archive(path)?;
    if let Ok(run) = toml::from_str::<RunConfig>(&a.config) {
        let digest: [u8; 32] = Sha256::digest(a.config.as_bytes()).into();
        if digest != a.config_hash {
            return Err(corrupt(
                "embedded configuration does not match its recorded hash",
            ));
        }
        run.validate()?;
        return Ok((Model::from_entries(run.model, &a)?, run.data));
    }
    let cfg = ModelConfig::from_toml(&a.config)?;
    if cfg.hash() != a.config_hash {
        return Err(corrupt(
            "embedded configuration does not match its recorded hash",
        ));
    }
    let data = PreprocessConfig {
        frame_size: cfg.frame_size,
        n_mels: cfg.mel_channels,
        grayscale: cfg.input_channels == 1,
        ..Default::default()
    };
    Ok((Model::from_entries(cfg, &a)?, data))
}
