//! Mono 16-bit PCM WAV input and output.

use std::path::Path;

use super::{AudioSignal, DspError, Result};

/// Reads a WAV file, averaging channels to mono and scaling integer
/// samples to `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<AudioSignal> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
    };
    if channels == 0 {
        return Err(DspError::Format("WAV header declares zero channels".into()));
    }
    let samples = interleaved
        .chunks_exact(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok(AudioSignal::new(samples, spec.sample_rate))
}

/// Writes mono 16-bit PCM, clipping to `[-1, 1]`.
pub fn write_wav(path: &Path, audio: &AudioSignal) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in &audio.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}
