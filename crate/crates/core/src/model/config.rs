use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelError, Result};
use crate::tensor::kernels::{output_len, ConvSpec};

/// One convolution block of the visual encoder: Conv3D, batch norm, ReLU,
/// max pooling, dropout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub pool_window: [usize; 3],
    pub pool_stride: [usize; 3],
}

/// Network dimensions. Field names follow each layer's role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// 1 for grayscale, 3 for RGB.
    pub input_channels: usize,
    /// Square input frame side in pixels.
    pub frame_size: usize,
    pub conv_blocks: Vec<ConvBlock>,
    /// Hidden units per direction of each bidirectional encoder layer.
    pub encoder_lstm_size: usize,
    pub encoder_lstm_layers: usize,
    pub attention_lstm_size: usize,
    /// Width of the query, memory and location projections.
    pub attention_dim: usize,
    pub location_filters: usize,
    /// Odd; padded by `kernel / 2` on each side.
    pub location_kernel: usize,
    pub prenet_sizes: Vec<usize>,
    pub decoder_lstm_size: usize,
    pub mel_channels: usize,
    pub postnet_channels: usize,
    pub postnet_layers: usize,
    /// Odd; padded by `kernel / 2` on each side.
    pub postnet_kernel: usize,
    pub encoder_dropout: f64,
    pub prenet_dropout: f64,
    /// Keep prenet dropout active during free-running inference.
    pub prenet_dropout_at_inference: bool,
    /// Start the last postnet layer at zero so the residual is the identity.
    pub zero_init_postnet_output: bool,
    pub max_decoder_steps: usize,
    /// Attention mass on the final encoder position that counts as
    /// reaching the visual period.
    pub stop_threshold: f64,
    /// Consecutive steps above `stop_threshold` that end decoding.
    pub stop_patience: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let block = |channels, stride: [usize; 3], padding| ConvBlock {
            channels,
            kernel: [5, 3, 3],
            stride,
            padding,
            pool_window: [1, 2, 2],
            pool_stride: [1, 2, 2],
        };
        Self {
            input_channels: 1,
            frame_size: 112,
            conv_blocks: vec![
                block(32, [1, 2, 2], [2, 0, 0]),
                block(64, [1, 2, 2], [2, 0, 0]),
                block(128, [1, 1, 1], [2, 0, 0]),
            ],
            encoder_lstm_size: 128,
            encoder_lstm_layers: 2,
            attention_lstm_size: 1024,
            attention_dim: 128,
            location_filters: 32,
            location_kernel: 31,
            prenet_sizes: vec![512, 256],
            decoder_lstm_size: 1024,
            mel_channels: 80,
            postnet_channels: 512,
            postnet_layers: 5,
            postnet_kernel: 5,
            encoder_dropout: 0.1,
            prenet_dropout: 0.5,
            prenet_dropout_at_inference: true,
            zero_init_postnet_output: true,
            max_decoder_steps: 1000,
            stop_threshold: 0.5,
            stop_patience: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Reduced network used for desk-scale overfitting runs: conv channels
    /// 8/16/32, 64 units per encoder direction, 128-unit decoder LSTMs and
    /// attention/prenet/postnet widths scaled by the same factor.
    pub fn reduced() -> Self {
        let mut c = Self::default();
        for (b, ch) in c.conv_blocks.iter_mut().zip([8, 16, 32]) {
            b.channels = ch;
        }
        c.encoder_lstm_size = 64;
        c.attention_lstm_size = 128;
        c.decoder_lstm_size = 128;
        c.attention_dim = 16;
        c.location_filters = 4;
        c.prenet_sizes = vec![64, 32];
        c.postnet_channels = 64;
        c
    }

    /// Smallest instance exercising every layer: 8×8 frames, channels
    /// 2/2/4, hidden sizes 8, no dropout.
    pub fn micro() -> Self {
        let block = |channels| ConvBlock {
            channels,
            kernel: [5, 3, 3],
            stride: [1, 1, 1],
            padding: [2, 1, 1],
            pool_window: [1, 2, 2],
            pool_stride: [1, 2, 2],
        };
        Self {
            input_channels: 1,
            frame_size: 8,
            conv_blocks: vec![block(2), block(2), block(4)],
            encoder_lstm_size: 8,
            encoder_lstm_layers: 2,
            attention_lstm_size: 8,
            attention_dim: 8,
            location_filters: 2,
            location_kernel: 3,
            prenet_sizes: vec![8, 8],
            decoder_lstm_size: 8,
            mel_channels: 80,
            postnet_channels: 8,
            postnet_layers: 5,
            postnet_kernel: 5,
            encoder_dropout: 0.0,
            prenet_dropout: 0.0,
            prenet_dropout_at_inference: false,
            zero_init_postnet_output: false,
            max_decoder_steps: 20,
            stop_threshold: 0.5,
            stop_patience: 3,
            seed: 7,
        }
    }

    /// `(H, W)` after each encoder block.
    pub fn spatial_trace(&self) -> Result<Vec<[usize; 2]>> {
        let mut hw = [self.frame_size, self.frame_size];
        let mut trace = vec![hw];
        for (i, b) in self.conv_blocks.iter().enumerate() {
            for step in 0..2 {
                for a in 0..2 {
                    let next = if step == 0 {
                        output_len(hw[a], b.kernel[a + 1], b.stride[a + 1], b.padding[a + 1])
                    } else {
                        output_len(hw[a], b.pool_window[a + 1], b.pool_stride[a + 1], 0)
                    };
                    hw[a] = next.ok_or_else(|| {
                        ModelError::Config(format!(
                            "encoder block {i} collapses the {}×{} input",
                            self.frame_size, self.frame_size
                        ))
                    })?;
                }
                trace.push(hw);
            }
        }
        Ok(trace)
    }

    /// Features per timestep entering the recurrent encoder.
    pub fn flatten_size(&self) -> Result<usize> {
        let [h, w] = *self.spatial_trace()?.last().unwrap();
        Ok(self
            .conv_blocks
            .last()
            .map_or(self.input_channels, |b| b.channels)
            * h
            * w)
    }

    pub fn encoder_dim(&self) -> usize {
        2 * self.encoder_lstm_size
    }

    pub fn conv_spec(&self, i: usize) -> ConvSpec {
        let b = &self.conv_blocks[i];
        let in_channels = if i == 0 {
            self.input_channels
        } else {
            self.conv_blocks[i - 1].channels
        };
        ConvSpec {
            kernel: b.kernel,
            stride: b.stride,
            padding: b.padding,
            in_channels,
            out_channels: b.channels,
        }
    }

    pub fn location_spec(&self) -> ConvSpec {
        ConvSpec::conv1d(
            2,
            self.location_filters,
            self.location_kernel,
            self.location_kernel / 2,
        )
    }

    pub fn postnet_spec(&self, i: usize) -> ConvSpec {
        let last = self.postnet_layers - 1;
        let cin = if i == 0 {
            self.mel_channels
        } else {
            self.postnet_channels
        };
        let cout = if i == last {
            self.mel_channels
        } else {
            self.postnet_channels
        };
        ConvSpec::conv1d(cin, cout, self.postnet_kernel, self.postnet_kernel / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_channels", self.input_channels),
            ("frame_size", self.frame_size),
            ("encoder_lstm_size", self.encoder_lstm_size),
            ("encoder_lstm_layers", self.encoder_lstm_layers),
            ("attention_lstm_size", self.attention_lstm_size),
            ("attention_dim", self.attention_dim),
            ("location_filters", self.location_filters),
            ("location_kernel", self.location_kernel),
            ("decoder_lstm_size", self.decoder_lstm_size),
            ("mel_channels", self.mel_channels),
            ("postnet_channels", self.postnet_channels),
            ("postnet_layers", self.postnet_layers),
            ("postnet_kernel", self.postnet_kernel),
            ("max_decoder_steps", self.max_decoder_steps),
            ("stop_patience", self.stop_patience),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.conv_blocks.is_empty()
            || self.prenet_sizes.is_empty()
            || self.prenet_sizes.contains(&0)
        {
            return Err(ModelError::Config(
                "need at least one conv block and positive prenet sizes".into(),
            ));
        }
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.channels == 0 || b.kernel.contains(&0) || b.stride.contains(&0) {
                return Err(ModelError::Config(format!(
                    "conv block {i} has a zero dimension"
                )));
            }
            if b.stride[0] != 1
                || b.kernel[0] != 2 * b.padding[0] + 1
                || b.pool_stride[0] != 1
                || b.pool_window[0] != 1
            {
                return Err(ModelError::Config(format!(
                    "conv block {i} must preserve the time axis (stride 1, kernel = 2·pad + 1, unit pooling)"
                )));
            }
        }
        if self.location_kernel.is_multiple_of(2) || self.postnet_kernel.is_multiple_of(2) {
            return Err(ModelError::Config(
                "location and postnet kernels must be odd".into(),
            ));
        }
        for (name, p) in [
            ("encoder_dropout", self.encoder_dropout),
            ("prenet_dropout", self.prenet_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(ModelError::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.stop_threshold) {
            return Err(ModelError::Config(
                "stop_threshold must lie in [0, 1]".into(),
            ));
        }
        self.flatten_size()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config always serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| ModelError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_trace_and_flatten() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        let trace: Vec<usize> = c.spatial_trace().unwrap().iter().map(|hw| hw[0]).collect();
        assert_eq!(trace, vec![112, 55, 27, 13, 6, 4, 2]);
        assert_eq!(c.flatten_size().unwrap(), 512);
        assert_eq!(c.encoder_dim(), 256);
    }

    #[test]
    fn reduced_and_micro_are_valid() {
        let r = ModelConfig::reduced();
        r.validate().unwrap();
        assert_eq!(r.flatten_size().unwrap(), 128);
        let m = ModelConfig::micro();
        m.validate().unwrap();
        let trace: Vec<usize> = m.spatial_trace().unwrap().iter().map(|hw| hw[0]).collect();
        assert_eq!(trace, vec![8, 8, 4, 4, 2, 2, 1]);
        assert_eq!(m.flatten_size().unwrap(), 4);
    }

    #[test]
    fn toml_round_trip_keeps_hash() {
        for c in [
            ModelConfig::default(),
            ModelConfig::reduced(),
            ModelConfig::micro(),
        ] {
            let back = ModelConfig::from_toml(&c.to_toml()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
        let other = ModelConfig {
            seed: 1,
            ..Default::default()
        };
        assert_ne!(other.hash(), ModelConfig::default().hash());
    }

    #[test]
    fn rejects_bad_configs() {
        let c = ModelConfig {
            frame_size: 20,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.conv_blocks[0].stride[0] = 2;
        assert!(c.validate().is_err());
        let c = ModelConfig {
            location_kernel: 30,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert!(ModelConfig::from_toml("bogus = 1").is_err());
    }
}
