//! End-to-end synthesis: frames → decoded log-mel → linear magnitude →
//! Griffin–Lim waveform, and clip-level scoring against a reference.

use rand::Rng;

use crate::data::{frames_tensor, PreprocessConfig, VideoClip};
use crate::dsp::{griffin_lim, log_mel, mel_to_linear, AudioSignal, MelFilterbank, MelSpectrogram};
use crate::metrics::{estoi, mel_mse, wer_cer, EvalRecord, EvalStatus, Unit};
use crate::model::{infer, DecoderOutput, Model};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Synthesis {
    pub decoded: DecoderOutput,
    /// Refined log-mel frames.
    pub mel: MelSpectrogram,
    pub audio: AudioSignal,
}

/// Converts log-mel frames to a peak-normalized waveform.
pub fn mel_to_audio(
    mel: &MelSpectrogram,
    cfg: &PreprocessConfig,
    fb: &MelFilterbank,
    iters: usize,
) -> Result<AudioSignal> {
    let bins = cfg.stft.bins();
    let mut mag = Vec::with_capacity(mel.frames * bins);
    for t in 0..mel.frames {
        let energies: Vec<f64> = mel.frame(t).iter().map(|v| v.exp()).collect();
        mag.extend(mel_to_linear(&energies, fb));
    }
    Ok(griffin_lim(&mag, mel.frames, &cfg.stft, iters, None)?)
}

/// Free-running decode of a prepared `C × (T + 1) × S × S` frame tensor
/// followed by phase reconstruction.
pub fn synthesize<R: Rng>(
    model: &Model,
    frames: &Tensor,
    cfg: &PreprocessConfig,
    fb: &MelFilterbank,
    gl_iters: usize,
    rng: &mut R,
) -> Result<Synthesis> {
    let decoded = infer(model, frames, rng)?;
    let n = cfg.n_mels;
    let data: Vec<f64> = decoded.o_post.data().iter().map(|&v| v as f64).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("decoded mel frames".into()));
    }
    let mel = MelSpectrogram::new(data.len() / n, n, data)?;
    let audio = mel_to_audio(&mel, cfg, fb, gl_iters)?;
    Ok(Synthesis {
        decoded,
        mel,
        audio,
    })
}

/// [`synthesize`] straight from a decoded container.
pub fn synthesize_video<R: Rng>(
    model: &Model,
    video: &VideoClip,
    cfg: &PreprocessConfig,
    gl_iters: usize,
    rng: &mut R,
) -> Result<Synthesis> {
    let fb = cfg.filterbank()?;
    let frames = frames_tensor(video, cfg)?;
    synthesize(model, &frames, cfg, &fb, gl_iters, rng)
}

/// Zero-pads or truncates `audio` to `len` samples.
pub fn fit_length(audio: &AudioSignal, len: usize) -> AudioSignal {
    let mut samples = audio.samples.clone();
    samples.resize(len, 0.0);
    AudioSignal::new(samples, audio.sample_rate)
}

/// Scores one hypothesis waveform (and optional transcript) against the
/// reference. The hypothesis is resampled to the reference rate if needed
/// and fitted to its length; a length change marks the row truncated.
pub fn score_clip(
    id: &str,
    reference: &AudioSignal,
    hypothesis: &AudioSignal,
    cfg: &PreprocessConfig,
    fb: &MelFilterbank,
    transcripts: Option<(&str, &str)>,
) -> EvalRecord {
    let mut rec = EvalRecord {
        clip_id: id.to_string(),
        estoi: None,
        mel_mse: None,
        wer: None,
        cer: None,
        status: EvalStatus::Ok,
    };
    let hyp = if hypothesis.sample_rate != reference.sample_rate {
        match crate::dsp::resample(hypothesis, reference.sample_rate) {
            Ok(h) => h,
            Err(_) => {
                rec.status = EvalStatus::Failed;
                return rec;
            }
        }
    } else {
        hypothesis.clone()
    };
    if hyp.len() != reference.len() {
        rec.status = EvalStatus::Truncated;
    }
    let hyp = fit_length(&hyp, reference.len());
    match estoi(reference, &hyp) {
        Ok(v) => rec.estoi = Some(v),
        Err(_) => rec.status = EvalStatus::Failed,
    }
    let mels = (
        log_mel(&reference.samples, &cfg.stft, fb),
        log_mel(&hyp.samples, &cfg.stft, fb),
    );
    if let (Ok(a), Ok(b)) = mels {
        rec.mel_mse = mel_mse(&a, &b).ok().map(|m| m.value);
    }
    if let Some((r, h)) = transcripts {
        rec.wer = wer_cer(r, h, Unit::Word).ok();
        rec.cer = wer_cer(r, h, Unit::Char).ok();
    }
    rec
}
