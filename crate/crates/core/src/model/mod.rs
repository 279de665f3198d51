//! Video-to-mel network: a Conv3D + bidirectional LSTM encoder, a
//! location-sensitive attention decoder with prenet and linear projection,
//! and a residual Conv1D postnet.

pub mod checks;
mod config;
mod network;

pub use config::{ConvBlock, ModelConfig};
pub use network::{
    attention_step, decode_step, encode, infer, loss, postnet, prenet, teacher_forced,
    AttentionState, Bound, DecoderOutput, DecoderState, Mode, StopReason, TeacherForced,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{
    xavier_uniform, Archive, ParamStore, RunningStats, Tensor, TensorError, WeightLayout,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match the expected {expected}")]
    Input { got: Vec<usize>, expected: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Parameters, batch-norm statistics and the configuration that shaped
/// them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Encoder blocks first, then the postnet layers that carry batch norm.
    pub stats: Vec<RunningStats>,
}

pub(crate) fn lstm_names(prefix: &str) -> [String; 3] {
    [
        format!("{prefix}.w_ih"),
        format!("{prefix}.w_hh"),
        format!("{prefix}.bias"),
    ]
}

pub(crate) fn stat_names(cfg: &ModelConfig) -> Vec<String> {
    let mut v: Vec<String> = (0..cfg.conv_blocks.len())
        .map(|i| format!("encoder.bn{i}"))
        .collect();
    v.extend((0..cfg.postnet_layers - 1).map(|i| format!("postnet.bn{i}")));
    v
}

impl Model {
    /// Xavier-uniform weights, zero biases, unit batch-norm scales; seeded
    /// by `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut ps = ParamStore::new();
        let c = &config;
        let lin = |ps: &mut ParamStore,
                   name: &str,
                   shape: &[usize],
                   rng: &mut ChaCha8Rng|
         -> Result<()> {
            ps.add(
                name,
                xavier_uniform(shape, WeightLayout::Linear, 1.0, rng),
                true,
            )?;
            Ok(())
        };
        let conv = |ps: &mut ParamStore,
                    name: &str,
                    shape: &[usize],
                    rng: &mut ChaCha8Rng|
         -> Result<()> {
            ps.add(
                name,
                xavier_uniform(shape, WeightLayout::Conv, 1.0, rng),
                true,
            )?;
            Ok(())
        };
        let zeros = |ps: &mut ParamStore, name: &str, n: usize| -> Result<()> {
            ps.add(name, Tensor::zeros(&[n]), true)?;
            Ok(())
        };

        for i in 0..c.conv_blocks.len() {
            conv(
                &mut ps,
                &format!("encoder.conv{i}.weight"),
                &c.conv_spec(i).weight_shape(),
                &mut rng,
            )?;
            ps.add(
                &format!("encoder.bn{i}.gamma"),
                Tensor::ones(&[c.conv_blocks[i].channels]),
                true,
            )?;
            zeros(
                &mut ps,
                &format!("encoder.bn{i}.beta"),
                c.conv_blocks[i].channels,
            )?;
        }
        let h = c.encoder_lstm_size;
        for l in 0..c.encoder_lstm_layers {
            let d_in = if l == 0 { c.flatten_size()? } else { 2 * h };
            for dir in ["fwd", "bwd"] {
                let [wi, wh, b] = lstm_names(&format!("encoder.lstm{l}.{dir}"));
                lin(&mut ps, &wi, &[d_in, 4 * h], &mut rng)?;
                lin(&mut ps, &wh, &[h, 4 * h], &mut rng)?;
                zeros(&mut ps, &b, 4 * h)?;
            }
        }

        let d = c.encoder_dim();
        let ha = c.attention_lstm_size;
        let p_out = *c.prenet_sizes.last().unwrap();
        let [wi, wh, b] = lstm_names("attention.lstm");
        lin(&mut ps, &wi, &[d + p_out, 4 * ha], &mut rng)?;
        lin(&mut ps, &wh, &[ha, 4 * ha], &mut rng)?;
        zeros(&mut ps, &b, 4 * ha)?;
        lin(&mut ps, "attention.memory", &[d, c.attention_dim], &mut rng)?;
        lin(&mut ps, "attention.query", &[ha, c.attention_dim], &mut rng)?;
        let loc = c.location_spec();
        conv(
            &mut ps,
            "attention.location_conv",
            &[loc.out_channels, 2, c.location_kernel],
            &mut rng,
        )?;
        lin(
            &mut ps,
            "attention.location_fc",
            &[c.location_filters, c.attention_dim],
            &mut rng,
        )?;
        lin(&mut ps, "attention.energy", &[c.attention_dim, 1], &mut rng)?;

        let mut prev = c.mel_channels;
        for (i, &s) in c.prenet_sizes.iter().enumerate() {
            lin(
                &mut ps,
                &format!("prenet.fc{i}.weight"),
                &[prev, s],
                &mut rng,
            )?;
            zeros(&mut ps, &format!("prenet.fc{i}.bias"), s)?;
            prev = s;
        }

        let hd = c.decoder_lstm_size;
        let [wi, wh, b] = lstm_names("decoder.lstm");
        lin(&mut ps, &wi, &[d + ha, 4 * hd], &mut rng)?;
        lin(&mut ps, &wh, &[hd, 4 * hd], &mut rng)?;
        zeros(&mut ps, &b, 4 * hd)?;
        lin(
            &mut ps,
            "decoder.proj.weight",
            &[hd, c.mel_channels],
            &mut rng,
        )?;
        zeros(&mut ps, "decoder.proj.bias", c.mel_channels)?;

        let last = c.postnet_layers - 1;
        for i in 0..c.postnet_layers {
            let s = c.postnet_spec(i);
            let shape = [s.out_channels, s.in_channels, c.postnet_kernel];
            let name = format!("postnet.conv{i}.weight");
            if i == last && c.zero_init_postnet_output {
                ps.add(&name, Tensor::zeros(&shape), true)?;
            } else {
                conv(&mut ps, &name, &shape, &mut rng)?;
            }
            if i < last {
                ps.add(
                    &format!("postnet.bn{i}.gamma"),
                    Tensor::ones(&[s.out_channels]),
                    true,
                )?;
                zeros(&mut ps, &format!("postnet.bn{i}.beta"), s.out_channels)?;
            }
        }
        zeros(&mut ps, &format!("postnet.conv{last}.bias"), c.mel_channels)?;

        let mut stats: Vec<RunningStats> = c
            .conv_blocks
            .iter()
            .map(|b| RunningStats::new(b.channels))
            .collect();
        stats.extend((0..last).map(|_| RunningStats::new(c.postnet_channels)));
        Ok(Self {
            config,
            params: ps,
            stats,
        })
    }

    /// Total number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Appends every parameter and batch-norm statistic to `archive`.
    pub fn write_entries(&self, archive: &mut Archive) {
        for (_, p) in self.params.iter() {
            archive.push(&p.name, p.value.clone());
        }
        for (name, s) in stat_names(&self.config).iter().zip(&self.stats) {
            let n = s.mean.len();
            archive.push(
                &format!("{name}.running_mean"),
                Tensor::new(&[n], s.mean.clone()).unwrap(),
            );
            archive.push(
                &format!("{name}.running_var"),
                Tensor::new(&[n], s.var.clone()).unwrap(),
            );
        }
    }

    /// Rebuilds a model from archive entries written by
    /// [`Model::write_entries`].
    pub fn from_entries(config: ModelConfig, archive: &Archive) -> Result<Self> {
        let mut m = Model::new(config)?;
        let names: Vec<(String, Vec<usize>)> = m
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.shape().to_vec()))
            .collect();
        for (name, shape) in names {
            let t = archive.get(&name).ok_or_else(|| {
                ModelError::Config(format!("checkpoint lacks parameter `{name}`"))
            })?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Input {
                    got: t.shape().to_vec(),
                    expected: format!("{shape:?} for `{name}`"),
                });
            }
            m.params.set(&name, t.clone())?;
        }
        let snames = stat_names(&m.config);
        for (name, s) in snames.iter().zip(m.stats.iter_mut()) {
            for (suffix, dst) in [("running_mean", &mut s.mean), ("running_var", &mut s.var)] {
                let key = format!("{name}.{suffix}");
                let t = archive
                    .get(&key)
                    .ok_or_else(|| ModelError::Config(format!("checkpoint lacks `{key}`")))?;
                if t.len() != dst.len() {
                    return Err(ModelError::Config(format!(
                        "`{key}` has {} values, expected {}",
                        t.len(),
                        dst.len()
                    )));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok(m)
    }

    /// Standalone model file: config and weights only.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut a = Archive {
            config_hash: self.config.hash(),
            config: self.config.to_toml(),
            ..Default::default()
        };
        self.write_entries(&mut a);
        a.save(path)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let a = Archive::load(path)?;
        let config = ModelConfig::from_toml(&a.config)?;
        if config.hash() != a.config_hash {
            return Err(ModelError::Config(
                "embedded config does not match its recorded hash".into(),
            ));
        }
        Self::from_entries(config, &a)
    }
}
