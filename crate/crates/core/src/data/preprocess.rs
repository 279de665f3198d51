//! Clip preprocessing: frame scaling and period append on the visual side,
//! normalization and log-mel extraction on the audio side.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClipRecord, DataError, Manifest, Result, VideoClip};
use crate::dsp::{
    log_mel, normalize, resample, wav::read_wav, AudioSignal, MelFilterbank, StftConfig, LOG_FLOOR,
};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Collapse three-channel frames to luma.
    pub grayscale: bool,
    /// Frames are resampled to `frame_size × frame_size` when they differ.
    pub frame_size: usize,
    /// Silent frames appended to each mel target, during which the decoder
    /// is meant to attend to the period frame.
    pub stop_tail: usize,
    pub stft: StftConfig,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            grayscale: true,
            frame_size: 112,
            stop_tail: 4,
            stft: StftConfig::default(),
            n_mels: 80,
            f_min: 0.0,
            f_max: 8000.0,
        }
    }
}

impl PreprocessConfig {
    pub fn filterbank(&self) -> Result<MelFilterbank> {
        MelFilterbank::new(self.n_mels, &self.stft, self.f_min, self.f_max)
            .map_err(|e| DataError::Config(e.to_string()))
    }

    /// Channel count the model sees for a container with `channels`.
    pub fn model_channels(&self, channels: usize) -> usize {
        if self.grayscale {
            1
        } else {
            channels
        }
    }
}

/// Model-ready tensors for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedClip {
    pub id: String,
    /// `C × (T + 1) × S × S`, values in `[0, 1]`, last frame all ones.
    pub frames: Tensor,
    /// `(mel frames + stop_tail) × n_mels`.
    pub target: Tensor,
    /// Mel frames that come from audio, before the silent tail.
    pub audio_frames: usize,
    /// Peak-normalized audio at the STFT rate.
    pub audio: AudioSignal,
}

impl PreparedClip {
    pub fn frame_count(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn mel_count(&self) -> usize {
        self.target.shape()[0]
    }
}

fn resize_bilinear(src: &[Real], h: usize, w: usize, size: usize) -> Vec<Real> {
    let coord = |dst: usize, n: usize| -> (usize, usize, Real) {
        let x = ((dst as Real + 0.5) * n as Real / size as Real - 0.5).clamp(0.0, (n - 1) as Real);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, x - lo as Real)
    };
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let (y0, y1, fy) = coord(y, h);
        for x in 0..size {
            let (x0, x1, fx) = coord(x, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Scales intensities to `[0, 1]`, optionally converts to luma, resizes to
/// `frame_size`, and appends the all-ones period frame. Returns
/// `C × (T + 1) × S × S`.
pub fn frames_tensor(video: &VideoClip, cfg: &PreprocessConfig) -> Result<Tensor> {
    if video.frames == 0 {
        return Err(DataError::Container("clip has no frames".into()));
    }
    let c_in = video.channels;
    let c = cfg.model_channels(c_in);
    let s = cfg.frame_size;
    let (h, w) = (video.height, video.width);
    let t_out = video.frames + 1;
    let mut data = vec![1.0 as Real; c * t_out * s * s];
    let mut plane = vec![0.0 as Real; h * w];
    for t in 0..video.frames {
        let f = video.frame(t);
        for ch in 0..c {
            for (i, p) in plane.iter_mut().enumerate() {
                let px = &f[i * c_in..(i + 1) * c_in];
                *p = if c == c_in {
                    px[ch] as Real
                } else {
                    0.299 * px[0] as Real + 0.587 * px[1] as Real + 0.114 * px[2] as Real
                } / 255.0;
            }
            let dst = &mut data[(ch * t_out + t) * s * s..(ch * t_out + t + 1) * s * s];
            if h == s && w == s {
                dst.copy_from_slice(&plane);
            } else {
                dst.copy_from_slice(&resize_bilinear(&plane, h, w, s));
            }
        }
    }
    Ok(Tensor::new(&[c, t_out, s, s], data)?)
}

/// Peak-normalized audio at the STFT rate and its log-mel frames.
pub fn audio_features(
    audio: &AudioSignal,
    cfg: &PreprocessConfig,
    fb: &MelFilterbank,
) -> Result<(AudioSignal, Vec<Real>, usize)> {
    let dsp = |e: crate::dsp::DspError| DataError::Dsp(e.to_string());
    let audio = if audio.sample_rate != cfg.stft.sample_rate {
        resample(audio, cfg.stft.sample_rate).map_err(dsp)?
    } else {
        audio.clone()
    };
    let audio = normalize(&audio).map_err(dsp)?;
    let mel = log_mel(&audio.samples, &cfg.stft, fb).map_err(dsp)?;
    let data = mel.data.iter().map(|&v| v as Real).collect();
    Ok((audio, data, mel.frames))
}

fn prepare(
    manifest: &Manifest,
    record: &ClipRecord,
    cfg: &PreprocessConfig,
    fb: &MelFilterbank,
) -> Result<PreparedClip> {
    let video = VideoClip::load(&manifest.resolve(&record.video_path), record.fps)?;
    let expected = record.fps * record.duration;
    if (video.frames as f64 - expected).abs() > 1.0 + 1e-9 {
        return Err(DataError::Container(format!(
            "{} frames but fps × duration = {expected:.2}",
            video.frames
        )));
    }
    let frames = frames_tensor(&video, cfg)?;

    let wav = manifest.resolve(&record.audio_path);
    let raw = read_wav(&wav).map_err(|e| DataError::Dsp(format!("{}: {e}", wav.display())))?;
    let (audio, mut data, audio_frames) = audio_features(&raw, cfg, fb)?;
    let expected = cfg.stft.sample_rate as f64 * record.duration;
    if (audio.len() as f64 - expected).abs() > cfg.stft.hop as f64 {
        return Err(DataError::Dsp(format!(
            "{} samples but rate × duration = {expected:.0}",
            audio.len()
        )));
    }
    data.extend(std::iter::repeat_n(
        LOG_FLOOR as Real,
        cfg.stop_tail * cfg.n_mels,
    ));
    let target = Tensor::new(&[audio_frames + cfg.stop_tail, cfg.n_mels], data)?;
    Ok(PreparedClip {
        id: record.id.clone(),
        frames,
        target,
        audio_frames,
        audio,
    })
}

/// Loads and converts one clip; every failure is tagged with the clip id.
pub fn preprocess_clip(
    manifest: &Manifest,
    record: &ClipRecord,
    cfg: &PreprocessConfig,
) -> Result<PreparedClip> {
    let fb = cfg.filterbank()?;
    preprocess_with(manifest, record, cfg, &fb)
}

/// [`preprocess_clip`] with a prebuilt filterbank.
pub fn preprocess_with(
    manifest: &Manifest,
    record: &ClipRecord,
    cfg: &PreprocessConfig,
    fb: &MelFilterbank,
) -> Result<PreparedClip> {
    prepare(manifest, record, cfg, fb).map_err(|e| DataError::Clip {
        id: record.id.clone(),
        source: Box::new(e),
    })
}

/// Mirrors every frame of a `C × T × H × W` clip left to right with
/// probability `p`; one draw decides for the whole clip.
pub fn augment_hflip<R: Rng>(frames: &Tensor, p: f64, rng: &mut R) -> Tensor {
    let flip = rng.random::<f64>() < p;
    if flip {
        hflip(frames)
    } else {
        frames.clone()
    }
}

/// Unconditional left-right mirror of a `… × W` tensor.
pub fn hflip(frames: &Tensor) -> Tensor {
    let w = *frames.shape().last().unwrap_or(&1);
    let mut out = frames.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn period_frame_is_appended_and_values_scaled() {
        let v = VideoClip::new(2, 4, 4, 1, (0..32).map(|i| (i * 8) as u8).collect(), 25.0).unwrap();
        let cfg = PreprocessConfig {
            frame_size: 4,
            ..Default::default()
        };
        let t = frames_tensor(&v, &cfg).unwrap();
        assert_eq!(t.shape(), &[1, 3, 4, 4]);
        assert!(t.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert!(t.data()[32..].iter().all(|&x| x == 1.0));
        assert_eq!(t.data()[1], 8.0 / 255.0);
    }

    #[test]
    fn rgb_frames_become_luma_or_stay_rgb() {
        let px = vec![255, 0, 0, 0, 255, 0, 0, 0, 255, 10, 20, 30];
        let v = VideoClip::new(1, 2, 2, 3, px, 25.0).unwrap();
        let gray = frames_tensor(
            &v,
            &PreprocessConfig {
                frame_size: 2,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(gray.shape(), &[1, 2, 2, 2]);
        assert!((gray.data()[0] - 0.299).abs() < 1e-12);
        assert!(
            (gray.data()[3] - (0.299 * 10.0 + 0.587 * 20.0 + 0.114 * 30.0) / 255.0).abs() < 1e-12
        );
        let rgb = frames_tensor(
            &v,
            &PreprocessConfig {
                frame_size: 2,
                grayscale: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(rgb.shape(), &[3, 2, 2, 2]);
        // channel 2 (blue), frame 0, pixel 2
        assert_eq!(rgb.data()[2 * 8 + 2], 1.0);
    }

    #[test]
    fn resize_keeps_constant_images_constant() {
        let src = vec![0.25; 6 * 10];
        assert!(resize_bilinear(&src, 6, 10, 8)
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-15));
        let ramp: Vec<Real> = (0..16).map(|i| (i % 4) as Real).collect();
        let same = resize_bilinear(&ramp, 4, 4, 4);
        assert_eq!(same, ramp);
    }

    #[test]
    fn one_second_clip_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_clips: 1,
            min_duration: 1.0,
            max_duration: 1.0,
            frames_per_symbol: 5,
            frame_size: 16,
            ..Default::default()
        };
        synth_generate(&spec, dir.path()).unwrap();
        let m = crate::data::load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        let cfg = PreprocessConfig {
            frame_size: 16,
            stop_tail: 0,
            ..Default::default()
        };
        let p = preprocess_clip(&m, &m.records[0], &cfg).unwrap();
        assert_eq!(p.frame_count(), 26);
        assert_eq!(p.mel_count(), 16000 / 256 + 1);
        assert!(p.target.data().iter().all(|&v| v >= LOG_FLOOR as Real));

        let tail = PreprocessConfig {
            stop_tail: 3,
            ..cfg
        };
        let q = preprocess_clip(&m, &m.records[0], &tail).unwrap();
        assert_eq!(q.mel_count(), 66);
        assert_eq!(q.audio_frames, 63);
        assert!(q.target.data()[63 * 80..]
            .iter()
            .all(|&v| v == LOG_FLOOR as Real));
    }

    #[test]
    fn corrupt_container_names_the_clip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_clips: 1,
            frame_size: 16,
            ..Default::default()
        };
        let recs = synth_generate(&spec, dir.path()).unwrap();
        std::fs::write(dir.path().join(&recs[0].video_path), b"LSVFjunk").unwrap();
        let m = crate::data::load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        let err = preprocess_clip(&m, &m.records[0], &PreprocessConfig::default()).unwrap_err();
        assert!(err.to_string().contains(&recs[0].id), "{err}");
    }

    #[test]
    fn flip_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = 112;
        let data: Vec<Real> = (0..2 * w).map(|i| (i % w) as Real).collect();
        let t = Tensor::new(&[1, 1, 2, w], data).unwrap();
        assert_eq!(augment_hflip(&t, 0.0, &mut rng), t);
        let f = augment_hflip(&t, 1.0, &mut rng);
        for j in 0..w {
            assert_eq!(f.data()[j], (111 - j) as Real);
        }
        assert_eq!(hflip(&f), t);
    }
}
