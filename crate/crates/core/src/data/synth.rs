//! Synthetic audio-visual corpus: every symbol is shown as an ellipse pose
//! and sounded as a tone, so the video fully determines the audio.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_manifest, ClipRecord, DataError, Result, VideoClip};
use crate::dsp::{wav::write_wav, AudioSignal};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tone {
    pub frequency: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_clips: usize,
    pub fps: f64,
    pub sample_rate: u32,
    /// Seconds; clip lengths are whole symbols inside this range.
    pub min_duration: f64,
    pub max_duration: f64,
    pub frames_per_symbol: usize,
    pub frame_size: usize,
    /// Peak of the uniform pixel noise, in intensity levels.
    pub pixel_noise: u8,
    pub alphabet: Vec<Tone>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        // Tones sit on FFT bin centers close to distinct mel filter centers.
        let tone = |bin: f64, amplitude| Tone {
            frequency: bin * 15.625,
            amplitude,
        };
        Self {
            n_clips: 8,
            fps: 25.0,
            sample_rate: 16000,
            min_duration: 0.48,
            max_duration: 0.6,
            frames_per_symbol: 3,
            frame_size: 112,
            pixel_noise: 8,
            alphabet: vec![
                tone(27.0, 0.8),
                tone(47.0, 0.6),
                tone(73.0, 0.7),
                tone(97.0, 0.5),
            ],
            seed: 0,
        }
    }
}

const BACKGROUND: f64 = 30.0;
const FOREGROUND: f64 = 220.0;
/// Fade-in and fade-out length of each tone segment, seconds.
const FADE: f64 = 0.005;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DataError::Config(m));
        if self.alphabet.is_empty() {
            return fail("alphabet is empty".into());
        }
        if !(self.fps > 0.0)
            || self.sample_rate == 0
            || self.frames_per_symbol == 0
            || self.frame_size < 8
        {
            return fail(
                "fps, sample_rate, frames_per_symbol must be positive and frame_size at least 8"
                    .into(),
            );
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for t in &self.alphabet {
            if !(t.frequency > 0.0 && t.frequency < nyquist) || !(0.0..=1.0).contains(&t.amplitude)
            {
                return fail(format!(
                    "tone {t:?} outside (0, {nyquist}) Hz or amplitude [0, 1]"
                ));
            }
        }
        let (lo, hi) = self.symbol_range();
        if lo == 0 || lo > hi {
            return fail(format!(
                "duration range [{}, {}] s holds no whole number of {}-frame symbols",
                self.min_duration, self.max_duration, self.frames_per_symbol
            ));
        }
        let per = self.samples_per_symbol_exact();
        if (per - per.round()).abs() > 1e-9 {
            return fail(format!(
                "a symbol spans {per} audio samples; choose rates giving a whole number"
            ));
        }
        Ok(())
    }

    pub fn symbol_seconds(&self) -> f64 {
        self.frames_per_symbol as f64 / self.fps
    }

    fn samples_per_symbol_exact(&self) -> f64 {
        self.symbol_seconds() * self.sample_rate as f64
    }

    pub fn samples_per_symbol(&self) -> usize {
        self.samples_per_symbol_exact().round() as usize
    }

    /// Inclusive range of symbol counts per clip.
    pub fn symbol_range(&self) -> (usize, usize) {
        let s = self.symbol_seconds();
        let lo = (self.min_duration / s - 1e-9).ceil().max(1.0) as usize;
        let hi = (self.max_duration / s + 1e-9).floor() as usize;
        (lo, hi)
    }

    /// Vertical center and vertical semi-axis of symbol `k`'s ellipse, in
    /// pixels.
    pub fn pose(&self, k: usize) -> (f64, f64) {
        let s = self.frame_size as f64;
        let n = self.alphabet.len();
        let u = if n > 1 {
            k as f64 / (n - 1) as f64
        } else {
            0.5
        };
        (s * (0.32 + 0.36 * u), s * (0.05 + 0.12 * u))
    }

    pub fn symbol_name(k: usize) -> String {
        let mut s = String::new();
        let mut k = k;
        loop {
            s.insert(0, (b'a' + (k % 26) as u8) as char);
            if k < 26 {
                break;
            }
            k = k / 26 - 1;
        }
        s
    }

    /// Grayscale frame of symbol `k` plus uniform pixel noise.
    pub fn render_frame<R: Rng>(&self, k: usize, rng: &mut R) -> Vec<u8> {
        let s = self.frame_size;
        let (cy, ry) = self.pose(k);
        let cx = (s as f64 - 1.0) / 2.0;
        let rx = s as f64 * 0.24;
        let mut px = Vec::with_capacity(s * s);
        for y in 0..s {
            for x in 0..s {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                let base = if dx * dx + dy * dy <= 1.0 {
                    FOREGROUND
                } else {
                    BACKGROUND
                };
                let noise = if self.pixel_noise > 0 {
                    rng.random_range(-(self.pixel_noise as i32)..=self.pixel_noise as i32) as f64
                } else {
                    0.0
                };
                px.push((base + noise).clamp(0.0, 255.0) as u8);
            }
        }
        px
    }

    /// Tone segment of symbol `k` with short raised-cosine edges.
    pub fn render_tone(&self, k: usize) -> Vec<f64> {
        let n = self.samples_per_symbol();
        let sr = self.sample_rate as f64;
        let Tone {
            frequency,
            amplitude,
        } = self.alphabet[k];
        let fade = ((FADE * sr) as usize).min(n / 2).max(1);
        (0..n)
            .map(|i| {
                let edge = i.min(n - 1 - i);
                let env = if edge < fade {
                    0.5 - 0.5 * (PI * edge as f64 / fade as f64).cos()
                } else {
                    1.0
                };
                amplitude * env * (2.0 * PI * frequency * i as f64 / sr).sin()
            })
            .collect()
    }
}

/// A clip held in memory before it is written out.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthClip {
    pub symbols: Vec<usize>,
    pub video: VideoClip,
    pub audio: AudioSignal,
}

impl SynthClip {
    pub fn transcript(&self) -> String {
        self.symbols
            .iter()
            .map(|&k| SynthSpec::symbol_name(k))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Draws every clip of the corpus from one seeded stream.
pub fn synth_clips(spec: &SynthSpec) -> Result<Vec<SynthClip>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.symbol_range();
    let s = spec.frame_size;
    (0..spec.n_clips)
        .map(|_| {
            let n = rng.random_range(lo..=hi);
            let symbols: Vec<usize> = (0..n)
                .map(|_| rng.random_range(0..spec.alphabet.len()))
                .collect();
            let mut pixels = Vec::with_capacity(n * spec.frames_per_symbol * s * s);
            let mut samples = Vec::with_capacity(n * spec.samples_per_symbol());
            for &k in &symbols {
                for _ in 0..spec.frames_per_symbol {
                    pixels.extend(spec.render_frame(k, &mut rng));
                }
                samples.extend(spec.render_tone(k));
            }
            let video = VideoClip::new(n * spec.frames_per_symbol, s, s, 1, pixels, spec.fps)?;
            Ok(SynthClip {
                symbols,
                video,
                audio: AudioSignal::new(samples, spec.sample_rate),
            })
        })
        .collect()
}

/// Writes `video/<id>.lsvf`, `audio/<id>.wav` and `manifest.jsonl` under
/// `out`, returning the records.
pub fn synth_generate(spec: &SynthSpec, out: &Path) -> Result<Vec<ClipRecord>> {
    let clips = synth_clips(spec)?;
    for sub in ["video", "audio"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| DataError::io(&d, e))?;
    }
    let width = clips.len().saturating_sub(1).to_string().len().max(4);
    let mut records = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let id = format!("clip{i:0width$}");
        let video_path = Path::new("video").join(format!("{id}.lsvf"));
        let audio_path = Path::new("audio").join(format!("{id}.wav"));
        clip.video.save(&out.join(&video_path))?;
        let wav = out.join(&audio_path);
        write_wav(&wav, &clip.audio).map_err(|e| DataError::Dsp(e.to_string()))?;
        records.push(ClipRecord {
            id,
            video_path,
            audio_path,
            transcript: Some(clip.transcript()),
            fps: spec.fps,
            duration: clip.symbols.len() as f64 * spec.symbol_seconds(),
        });
    }
    write_manifest(&out.join("manifest.jsonl"), &records)?;
    Ok(records)
}

/// Reads symbols back from frames: each symbol-length group of frames is
/// thresholded and the bright region's centroid row and half-height are
/// matched to the nearest pose.
pub fn decode_video_symbols(video: &VideoClip, spec: &SynthSpec) -> Vec<usize> {
    let mid = (BACKGROUND + FOREGROUND) / 2.0;
    let (h, w, c) = (video.height, video.width, video.channels);
    let groups = video.frames / spec.frames_per_symbol;
    (0..groups)
        .map(|gi| {
            let (mut sum_y, mut count, mut top, mut bottom) = (0.0, 0.0, usize::MAX, 0);
            for t in gi * spec.frames_per_symbol..(gi + 1) * spec.frames_per_symbol {
                let f = video.frame(t);
                for y in 0..h {
                    for x in 0..w {
                        let v =
                            (0..c).map(|ch| f[(y * w + x) * c + ch] as f64).sum::<f64>() / c as f64;
                        if v > mid {
                            sum_y += y as f64;
                            count += 1.0;
                            top = top.min(y);
                            bottom = bottom.max(y);
                        }
                    }
                }
            }
            if count == 0.0 {
                return 0;
            }
            let cy = sum_y / count;
            let ry = (bottom - top + 1) as f64 / 2.0;
            nearest(spec.alphabet.len(), |k| {
                let (py, pr) = spec.pose(k);
                (cy - py).powi(2) + (ry - pr).powi(2)
            })
        })
        .collect()
}

/// Reads symbols back from audio: each symbol segment's interior is
/// correlated against every alphabet tone and the best amplitude match at
/// the strongest frequency wins.
pub fn decode_audio_symbols(audio: &AudioSignal, spec: &SynthSpec) -> Vec<usize> {
    let n = spec.samples_per_symbol();
    let sr = audio.sample_rate as f64;
    let margin = ((FADE * sr) as usize).min(n / 4);
    audio
        .samples
        .chunks_exact(n)
        .map(|seg| {
            let body = &seg[margin..n - margin];
            let amp = |f: f64| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, &x) in body.iter().enumerate() {
                    let ph = 2.0 * PI * f * (i + margin) as f64 / sr;
                    re += x * ph.cos();
                    im += x * ph.sin();
                }
                2.0 * (re * re + im * im).sqrt() / body.len() as f64
            };
            let measured: Vec<f64> = spec.alphabet.iter().map(|t| amp(t.frequency)).collect();
            let strongest = nearest(measured.len(), |k| -measured[k]);
            let f = spec.alphabet[strongest].frequency;
            nearest(spec.alphabet.len(), |k| {
                let t = spec.alphabet[k];
                if t.frequency == f {
                    (t.amplitude - measured[k]).abs()
                } else {
                    f64::INFINITY
                }
            })
        })
        .collect()
}

fn nearest(n: usize, cost: impl Fn(usize) -> f64) -> usize {
    (0..n).fold(0, |best, k| if cost(k) < cost(best) { k } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{log_mel, MelFilterbank, StftConfig};

    fn small() -> SynthSpec {
        SynthSpec {
            n_clips: 3,
            frame_size: 32,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(
            synth_clips(&small()).unwrap(),
            synth_clips(&small()).unwrap()
        );
        let other = SynthSpec { seed: 1, ..small() };
        assert_ne!(synth_clips(&small()).unwrap(), synth_clips(&other).unwrap());
    }

    #[test]
    fn lengths_follow_symbol_counts() {
        let spec = small();
        let (lo, hi) = spec.symbol_range();
        assert_eq!((lo, hi), (4, 5));
        for c in synth_clips(&spec).unwrap() {
            let n = c.symbols.len();
            assert!((lo..=hi).contains(&n));
            assert_eq!(c.video.frames, 3 * n);
            assert_eq!(c.audio.len(), 1920 * n);
        }
    }

    #[test]
    fn single_symbol_alphabet_gives_shifted_copies() {
        let spec = SynthSpec {
            alphabet: vec![Tone {
                frequency: 500.0,
                amplitude: 0.5,
            }],
            n_clips: 6,
            ..small()
        };
        let clips = synth_clips(&spec).unwrap();
        let tone = spec.render_tone(0);
        for c in &clips {
            for (i, seg) in c.audio.samples.chunks(tone.len()).enumerate() {
                assert_eq!(seg, &tone[..], "segment {i}");
            }
        }
    }

    #[test]
    fn both_streams_decode_to_the_same_symbols() {
        let spec = SynthSpec {
            n_clips: 6,
            ..small()
        };
        for c in synth_clips(&spec).unwrap() {
            assert_eq!(decode_video_symbols(&c.video, &spec), c.symbols);
            assert_eq!(decode_audio_symbols(&c.audio, &spec), c.symbols);
        }
    }

    #[test]
    fn mel_peak_sits_in_each_tones_band() {
        let spec = SynthSpec {
            n_clips: 4,
            ..small()
        };
        let cfg = StftConfig::default();
        let fb = MelFilterbank::standard(&cfg).unwrap();
        // Band of a frequency: the filter with the largest triangle weight
        // at that frequency, computed from the filter edges directly.
        let band = |f: f64| -> usize {
            let mel = |x: f64| 2595.0 * (1.0 + x / 700.0).log10();
            let step = mel(8000.0) / 81.0;
            let pos = mel(f) / step - 1.0;
            pos.round().clamp(0.0, 79.0) as usize
        };
        for c in synth_clips(&spec).unwrap() {
            let m = log_mel(&c.audio.samples, &cfg, &fb).unwrap();
            let hop_per_symbol = spec.samples_per_symbol() as f64 / cfg.hop as f64;
            for (i, &k) in c.symbols.iter().enumerate() {
                // A frame well inside the symbol, away from both edges.
                let t = ((i as f64 + 0.5) * hop_per_symbol).round() as usize;
                let row = m.frame(t);
                let peak = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                assert_eq!(
                    peak,
                    band(spec.alphabet[k].frequency),
                    "clip symbol {i} tone {k}"
                );
            }
        }
    }

    #[test]
    fn generate_writes_loadable_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        let recs = synth_generate(&spec, dir.path()).unwrap();
        assert_eq!(recs.len(), 3);
        let m = super::super::load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(m.records, recs);
        let v = VideoClip::load(&m.resolve(&recs[0].video_path), 25.0).unwrap();
        assert_eq!(v.frames as f64, (recs[0].duration * 25.0).round());
        let words = recs[0].transcript.as_ref().unwrap().split(' ').count();
        assert_eq!(words * 3, v.frames);
    }

    #[test]
    fn symbol_names_are_unique() {
        let names: std::collections::HashSet<String> =
            (0..800).map(SynthSpec::symbol_name).collect();
        assert_eq!(names.len(), 800);
        assert_eq!(SynthSpec::symbol_name(0), "a");
        assert_eq!(SynthSpec::symbol_name(26), "aa");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SynthSpec {
            alphabet: vec![],
            ..small()
        }
        .validate()
        .is_err());
        assert!(SynthSpec {
            min_duration: 0.5,
            max_duration: 0.55,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SynthSpec {
            fps: 7.0,
            ..small()
        }
        .validate()
        .is_err());
    }
}
