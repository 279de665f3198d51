use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EvaluateArgs, GendataArgs, GradcheckArgs, InspectArgs, SynthesizeArgs, TrainArgs};
use crate::data::{load_manifest, synth_generate, PreprocessConfig, SynthSpec, VideoClip};
use crate::dsp::wav::{read_wav, write_wav};
use crate::dsp::{normalize, resample, MelSpectrogram};
use crate::metrics::{write_report, EvalRecord, EvalStatus};
use crate::model::{ModelConfig, StopReason};
use crate::pipeline::{score_clip, synthesize_video};
use crate::tensor::{Archive, Tensor};
use crate::train::{load_clips, load_for_inference, RunConfig, RunOptions, StopCause};
use crate::{Error, Result};

pub const GRADCHECK_SEED: u64 = 11;

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn gendata(a: &GendataArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => toml::from_str::<SynthSpec>(&read_text(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => SynthSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.clips {
        spec.n_clips = n;
    }
    spec.validate()?;
    create_dir(&a.out)?;
    let records = synth_generate(&spec, &a.out)?;
    let total: f64 = records.iter().map(|r| r.duration).sum();
    let (lo, hi) = spec.symbol_range();
    let expected = spec.n_clips as f64 * (lo + hi) as f64 / 2.0 * spec.symbol_seconds();
    println!(
        "generated {} clips, {total:.3} s of audio (expected about {expected:.3} s) in {}",
        records.len(),
        a.out.display()
    );
    Ok(())
}

fn run_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = read_text(p)?;
            toml::from_str::<RunConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.steps {
        t.total_steps = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr_initial = v;
    }
    if let Some(v) = a.checkpoint_every {
        t.checkpoint_every = v;
    }
    if a.fine_tune {
        t.fine_tune = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = run_config(a)?;
    let manifest = load_manifest(&a.data)?;
    if manifest.records.is_empty() {
        return Err(Error::Config(format!(
            "{} lists no clips",
            a.data.display()
        )));
    }
    let workers = a.workers.unwrap_or_else(|| {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    });
    let clips = load_clips(&manifest, &cfg.data, workers)?;
    create_dir(&a.out)?;
    let cfg_path = a.out.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let opts = RunOptions {
        resume: a.resume.clone(),
        init_from: a.init_from.clone(),
        allow_config_change: a.allow_config_change,
        stop_after: a.stop_after,
        progress_every: a.progress,
    };
    let s = crate::train::train(&cfg, &clips, &a.out, &opts)?;
    let why = match s.cause {
        StopCause::TotalSteps => "reached total_steps",
        StopCause::EarlyStop => "validation loss stopped improving",
        StopCause::StopAfter => "stopped on request",
    };
    let last = s
        .log
        .last()
        .map(|r| format!(", last loss {:.6}", r.train_loss))
        .unwrap_or_default();
    println!(
        "ran {} steps (now at step {}){last}; {why}; checkpoint {}",
        s.steps_run,
        s.state.step,
        s.checkpoint.display()
    );
    Ok(())
}

/// Writes attention weights as text, one decoder step per line.
pub fn write_alignment(path: &Path, alignments: &Tensor) -> Result<()> {
    let n = alignments.shape()[1];
    let mut out = String::new();
    for row in alignments.data().chunks(n) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn synthesize(a: &SynthesizeArgs) -> Result<()> {
    let (model, data) = load_for_inference(&a.checkpoint)?;
    if !(a.fps > 0.0) {
        return Err(Error::Config("--fps must be positive".into()));
    }
    let video = VideoClip::load(&a.video, a.fps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let s = synthesize_video(&model, &video, &data, a.gl_iters, &mut rng)?;
    write_wav(&a.out_wav, &s.audio).map_err(|e| match e {
        crate::dsp::DspError::Wav(hound::Error::IoError(io)) => Error::io(&a.out_wav, io),
        other => other.into(),
    })?;
    if let Some(p) = &a.out_mel {
        s.mel.save(p).map_err(|e| match e {
            crate::dsp::DspError::Io(io) => Error::io(p, io),
            other => other.into(),
        })?;
    }
    if let Some(p) = &a.out_alignment {
        write_alignment(p, &s.decoded.alignments)?;
    }
    println!(
        "{} decoder steps ({}), {:.3} s of audio written to {}",
        s.decoded.frames(),
        s.decoded.stop_reason,
        s.audio.duration(),
        a.out_wav.display()
    );
    if s.decoded.stop_reason == StopReason::MaxSteps {
        if a.strict {
            return Err(Error::MaxSteps);
        }
        eprintln!("warning: decoding stopped at the step cap");
    }
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let data = match &a.config {
        Some(p) => {
            let text = read_text(p)?;
            toml::from_str::<RunConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                .data
        }
        None => PreprocessConfig::default(),
    };
    let fb = data.filterbank()?;
    let manifest = load_manifest(&a.manifest)?;
    let mut records = Vec::with_capacity(manifest.records.len());
    let mut failed = Vec::new();
    for r in &manifest.records {
        let reference = read_wav(&manifest.resolve(&r.audio_path))?;
        let reference = normalize(&resample(&reference, data.stft.sample_rate)?)?;
        let hyp_path = a.hyp_dir.join(format!("{}.wav", r.id));
        let hypothesis = match read_wav(&hyp_path)
            .map_err(Error::from)
            .and_then(|h| Ok(normalize(&resample(&h, data.stft.sample_rate)?)?))
        {
            Ok(h) => h,
            Err(e) => {
                eprintln!("warning: clip `{}`: {}: {e}", r.id, hyp_path.display());
                failed.push(r.id.clone());
                records.push(EvalRecord {
                    clip_id: r.id.clone(),
                    estoi: None,
                    mel_mse: None,
                    wer: None,
                    cer: None,
                    status: EvalStatus::Failed,
                });
                continue;
            }
        };
        let hyp_text = std::fs::read_to_string(a.hyp_dir.join(format!("{}.txt", r.id))).ok();
        let transcripts = match (&r.transcript, &hyp_text) {
            (Some(rt), Some(ht)) => Some((rt.as_str(), ht.trim())),
            _ => None,
        };
        let rec = score_clip(&r.id, &reference, &hypothesis, &data, &fb, transcripts);
        if rec.status == EvalStatus::Failed {
            eprintln!("warning: clip `{}` could not be scored", r.id);
            failed.push(r.id.clone());
        }
        records.push(rec);
    }
    let mut buf = Vec::new();
    write_report(&mut buf, &records).expect("writing to memory");
    std::fs::write(&a.report, buf).map_err(|e| Error::io(&a.report, e))?;
    let s = EvalRecord::summary(&records);
    let show = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    println!(
        "{} clips, {} failed; mean estoi {}, mel_mse {}, wer {}, cer {}",
        records.len(),
        failed.len(),
        show(s.estoi),
        show(s.mel_mse),
        show(s.wer),
        show(s.cer)
    );
    if a.strict && !failed.is_empty() {
        return Err(Error::Strict(format!(
            "unscored clips: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    if std::mem::size_of::<crate::tensor::Real>() != 8 {
        return Err(Error::Config(
            "gradient checks need the 64-bit build".into(),
        ));
    }
    let fault: Option<&'static str> = match &a.inject_fault {
        Some(k) => Some(
            crate::tensor::OP_KINDS
                .iter()
                .copied()
                .find(|&n| n == k)
                .ok_or_else(|| Error::Config(format!("unknown op kind `{k}`")))?,
        ),
        None => None,
    };
    let cfg = match &a.micro_config {
        Some(p) => ModelConfig::from_toml(&read_text(p)?)?,
        None => ModelConfig::micro(),
    };
    let mut rows = crate::tensor::checks::primitive_suite(a.seed, fault)?;
    rows.push(crate::model::checks::full_model_check_with(
        cfg, a.seed, fault,
    )?);
    println!("{:<16} {:>14}  result", "check", "max rel. error");
    for r in &rows {
        println!(
            "{:<16} {:>14.3e}  {}",
            r.name,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(failed.join(", ")))
    }
}

pub fn inspect(a: &InspectArgs) -> Result<()> {
    let bytes = std::fs::read(&a.path).map_err(|e| Error::io(&a.path, e))?;
    let out = &mut std::io::stdout().lock();
    let w = |out: &mut std::io::StdoutLock, s: String| {
        let _ = writeln!(out, "{s}");
    };
    match bytes.get(..4) {
        Some(b"LMCK") => {
            let arc = Archive::read_from(&mut bytes.as_slice())?;
            let hash: String = arc.config_hash.iter().map(|b| format!("{b:02x}")).collect();
            let scalars: usize = arc.entries.iter().map(|e| e.tensor.len()).sum();
            let is_run = toml::from_str::<RunConfig>(&arc.config).is_ok();
            w(
                out,
                format!(
                    "archive: {}",
                    if is_run {
                        "training checkpoint"
                    } else {
                        "model"
                    }
                ),
            );
            w(out, format!("config hash: {hash}"));
            w(
                out,
                format!("entries: {} ({scalars} values)", arc.entries.len()),
            );
            if !arc.meta.is_empty() {
                w(out, format!("state:\n{}", arc.meta.trim_end()));
            }
            w(out, format!("config:\n{}", arc.config.trim_end()));
        }
        Some(b"LSVF") => {
            let v = VideoClip::read_from(&mut bytes.as_slice(), 25.0)?;
            w(
                out,
                format!(
                    "frame container: {} frames of {}×{}×{}",
                    v.frames, v.height, v.width, v.channels
                ),
            );
        }
        Some(b"RIFF") => {
            let s = read_wav(&a.path)?;
            w(
                out,
                format!(
                    "wav: {} samples at {} Hz ({:.3} s), peak {:.4}",
                    s.len(),
                    s.sample_rate,
                    s.duration(),
                    s.peak()
                ),
            );
        }
        _ => {
            if let Ok(m) = MelSpectrogram::read_from(&mut bytes.as_slice()) {
                if 12 + m.data.len() * 4 == bytes.len() {
                    w(
                        out,
                        format!(
                            "mel spectrogram: {} frames × {} channels",
                            m.frames, m.channels
                        ),
                    );
                    return Ok(());
                }
            }
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::Config("unrecognized file format".into()))?;
            if let Ok(recs) = crate::data::parse_manifest(&text) {
                let total: f64 = recs.iter().map(|r| r.duration).sum();
                w(out, format!("manifest: {} clips, {total:.3} s", recs.len()));
            } else if let Ok(cfg) = toml::from_str::<RunConfig>(&text) {
                cfg.validate()?;
                let params = crate::model::Model::new(cfg.model.clone())?.num_parameters();
                w(
                    out,
                    format!("run configuration: {params} trainable parameters"),
                );
            } else {
                return Err(Error::Config("unrecognized file format".into()));
            }
        }
    }
    Ok(())
}
