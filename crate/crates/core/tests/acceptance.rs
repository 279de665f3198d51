//! End-to-end acceptance checks. Prints one line per criterion and exits
//! non-zero if any fails.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use lipmel::data::{load_manifest, synth_clips, synth_generate, PreparedClip, SynthSpec};
use lipmel::dsp::wav::write_wav;
use lipmel::dsp::{
    griffin_lim_raw, istft, log_mel, magnitude, normalize, spectral_convergence, stft, AudioSignal,
    StftConfig,
};
use lipmel::metrics::{edit_distance, estoi, wer_cer, write_report, EvalRecord, Unit};
use lipmel::model::checks::{full_model_check, micro_instance};
use lipmel::model::{Bound, Mode, ModelConfig, StopReason};
use lipmel::pipeline::{fit_length, score_clip, synthesize};
use lipmel::tensor::checks::primitive_suite;
use lipmel::tensor::{Graph, Real, Tensor};
use lipmel::train::{
    cosine_lr, load_clips, teacher_forced_loss, train, LogRecord, RunConfig, RunOptions,
    RunSummary, TrainConfig,
};

const SEED: u64 = 0;

#[derive(Clone)]
struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, budget_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s < budget_s, format!("{s:.1} s of {budget_s:.0} s"))
}

fn criterion_1() -> Verdict {
    let t0 = Instant::now();
    let mut rows = primitive_suite(11, None).expect("primitive suite");
    rows.push(full_model_check(11, None).expect("full model check"));
    let (fast, time) = within(t0.elapsed(), 120.0);
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, Real::max);
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    verdict(
        failed.is_empty() && fast,
        format!(
            "{} checks, worst relative error {worst:.2e}, failed {failed:?}, {time}",
            rows.len()
        ),
    )
}

fn criterion_2() -> Verdict {
    let t0 = Instant::now();
    let cfg = ModelConfig::default();
    let trace: Vec<usize> = cfg.spatial_trace().unwrap().iter().map(|s| s[0]).collect();
    let square = cfg.spatial_trace().unwrap().iter().all(|s| s[0] == s[1]);
    let flatten = cfg.flatten_size().unwrap();
    let mut ok = trace == [112, 55, 27, 13, 6, 4, 2] && square && flatten == 512;

    // Alignment and postnet shapes on the full-size network.
    let (t, m) = (3, 4);
    let mut model = lipmel::model::Model::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let s = cfg.frame_size;
    let ch = cfg.input_channels;
    let mut frames = vec![0.5; ch * (t + 1) * s * s];
    let last = t * s * s;
    for c in 0..ch {
        let base = c * (t + 1) * s * s;
        frames[base + last..base + last + s * s].fill(1.0);
    }
    let frames = Tensor::new(&[ch, t + 1, s, s], frames).unwrap();
    let target = Tensor::new(&[m, cfg.mel_channels], vec![-2.0; m * cfg.mel_channels]).unwrap();
    let mut g = Graph::new();
    let p = Bound::bind(&mut g, &cfg, &model.params).unwrap();
    let tf = lipmel::model::teacher_forced(
        &mut g,
        &cfg,
        &p,
        &mut model.stats,
        &frames,
        &target,
        1.0,
        Mode::Eval,
        &mut rng,
    )
    .unwrap();
    let out = tf.to_output(&g).unwrap();
    ok &= out.alignments.shape() == [m, t + 1];
    ok &= out.o_dec.shape() == [m, 80] && out.o_post.shape() == [m, 80];
    let (fast, time) = within(t0.elapsed(), 10.0);
    verdict(
        ok && fast,
        format!(
            "trace {trace:?}, flatten {flatten}, alignments {:?}, postnet {:?} -> {:?}, {time}",
            out.alignments.shape(),
            out.o_dec.shape(),
            out.o_post.shape()
        ),
    )
}

fn criterion_3() -> Verdict {
    let (mut model, frames, _) = micro_instance(5, 6, 1).unwrap();
    let cfg = model.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let target: Vec<Real> = (0..100 * 80)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let target = Tensor::new(&[100, 80], target).unwrap();
    let mut g = Graph::new();
    let p = Bound::bind(&mut g, &cfg, &model.params).unwrap();
    // Half the steps feed back the model's own frames.
    let tf = lipmel::model::teacher_forced(
        &mut g,
        &cfg,
        &p,
        &mut model.stats,
        &frames,
        &target,
        0.5,
        Mode::Train,
        &mut rng,
    )
    .unwrap();
    let n = frames.shape()[1];
    let mut running = vec![0.0; n];
    let mut worst: Real = 0.0;
    let mut non_negative = true;
    for &a in &tf.alignments {
        let row = g.value(a).data();
        non_negative &= row.iter().all(|&w| w >= 0.0);
        worst = worst.max((row.iter().sum::<Real>() - 1.0).abs());
        for (r, &w) in running.iter_mut().zip(row) {
            *r += w;
        }
    }
    let exact = g.value(tf.a_cum).data() == running.as_slice();
    verdict(
        tf.alignments.len() == 100 && worst <= 1e-6 && non_negative && exact,
        format!(
            "{} steps, worst row-sum error {worst:.1e}, non-negative {non_negative}, cumulative exact {exact}",
            tf.alignments.len()
        ),
    )
}

struct DspOutcome {
    verdict: Verdict,
    /// Griffin–Lim outputs, for the determinism comparison.
    signals: Vec<Vec<f64>>,
}

fn criterion_4(seed: u64) -> DspOutcome {
    let t0 = Instant::now();
    let cfg = StftConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..8000).map(|_| StandardNormal.sample(&mut rng)).collect();
    let y = istft(&stft(&x, &cfg).unwrap(), &cfg, Some(x.len())).unwrap();
    let round_trip = x
        .iter()
        .zip(&y)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let fb = lipmel::dsp::MelFilterbank::standard(&cfg).unwrap();
    let silent = log_mel(&vec![0.0; 4000], &cfg, &fb).unwrap();
    let floor = (1e-5f64).ln();
    let floor_ok = silent.data.iter().all(|&v| v == floor);

    let spec = SynthSpec {
        n_clips: 5,
        seed,
        ..Default::default()
    };
    let mut improved = 0;
    let mut signals = Vec::new();
    let mut ratios = Vec::new();
    for clip in synth_clips(&spec).unwrap() {
        let audio = lipmel::dsp::resample(&clip.audio, cfg.sample_rate).unwrap();
        let spec = stft(&audio.samples, &cfg).unwrap();
        let mag = magnitude(&spec);
        let frames = spec.frames;
        let one = griffin_lim_raw(&mag, frames, &cfg, 1, Some(audio.len())).unwrap();
        let sixty = griffin_lim_raw(&mag, frames, &cfg, 60, Some(audio.len())).unwrap();
        let (e1, e60) = (
            spectral_convergence(&one, &mag, &cfg).unwrap(),
            spectral_convergence(&sixty, &mag, &cfg).unwrap(),
        );
        improved += usize::from(e60 < e1);
        ratios.push(format!("{e1:.3}->{e60:.3}"));
        signals.push(sixty);
    }
    let (fast, time) = within(t0.elapsed(), 60.0);
    DspOutcome {
        verdict: verdict(
            round_trip < 1e-6 && floor_ok && improved == 5 && fast,
            format!(
                "istft error {round_trip:.1e}, silence floor {floor_ok}, convergence {} ({improved}/5 improved), {time}",
                ratios.join(" ")
            ),
        ),
        signals,
    }
}

fn overfit_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig::reduced(),
        ..Default::default()
    };
    cfg.model.max_decoder_steps = 120;
    cfg.train.seed = seed;
    cfg.train.total_steps = 3000;
    cfg.train.batch_size = 2;
    cfg.train.val_fraction = 0.0;
    cfg.train.checkpoint_every = 0;
    cfg.train.tf_end = 0.5;
    cfg
}

struct Run {
    config: RunConfig,
    clips: Vec<PreparedClip>,
    summary: RunSummary,
    elapsed: Duration,
    synthesized: Vec<AudioSignal>,
    decoded: Vec<lipmel::model::DecoderOutput>,
    noise: Vec<AudioSignal>,
    records: Vec<EvalRecord>,
    checkpoint: Vec<u8>,
    wavs: Vec<Vec<u8>>,
    report: Vec<u8>,
    dsp: DspOutcome,
}

/// Criteria 4 to 6 in one pass, keeping every artifact.
fn full_run(dir: &Path, seed: u64) -> Run {
    let dsp = criterion_4(seed);
    let config = overfit_config(seed);
    synth_generate(&SynthSpec::default(), &dir.join("data")).unwrap();
    let manifest = load_manifest(&dir.join("data/manifest.jsonl")).unwrap();
    let clips = load_clips(&manifest, &config.data, 1).unwrap();
    let t0 = Instant::now();
    let summary = train(&config, &clips, &dir.join("run"), &RunOptions::default()).unwrap();
    let elapsed = t0.elapsed();

    let fb = config.data.filterbank().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut synthesized, mut decoded, mut noise, mut records, mut wavs) =
        (vec![], vec![], vec![], vec![], vec![]);
    for clip in &clips {
        let s = synthesize(
            &summary.model,
            &clip.frames,
            &config.data,
            &fb,
            lipmel::dsp::DEFAULT_GL_ITERS,
            &mut rng,
        )
        .unwrap();
        let wav = dir.join(format!("{}.wav", clip.id));
        write_wav(&wav, &s.audio).unwrap();
        wavs.push(std::fs::read(&wav).unwrap());
        records.push(score_clip(
            &clip.id,
            &clip.audio,
            &s.audio,
            &config.data,
            &fb,
            None,
        ));
        let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
        let white: Vec<f64> = (0..clip.audio.len())
            .map(|_| StandardNormal.sample(&mut noise_rng))
            .collect();
        noise.push(normalize(&AudioSignal::new(white, clip.audio.sample_rate)).unwrap());
        synthesized.push(fit_length(&s.audio, clip.audio.len()));
        decoded.push(s.decoded);
    }
    let mut report = Vec::new();
    write_report(&mut report, &records).unwrap();
    let checkpoint = std::fs::read(&summary.checkpoint).unwrap();
    Run {
        config,
        clips,
        summary,
        elapsed,
        synthesized,
        decoded,
        noise,
        records,
        checkpoint,
        wavs,
        report,
        dsp,
    }
}

fn criterion_5(run: &Run) -> Verdict {
    let refs: Vec<&PreparedClip> = run.clips.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let first = run.summary.log[0].train_loss;
    let final_loss = teacher_forced_loss(&run.summary.model, &refs, &mut rng).unwrap();
    let ratio = final_loss / first;
    let periods = run
        .decoded
        .iter()
        .filter(|d| d.stop_reason == StopReason::PeriodDetected)
        .count();
    let monotone: Vec<f64> = run
        .decoded
        .iter()
        .map(|d| {
            let path = d.alignment_path();
            let pairs = path.len().saturating_sub(1).max(1);
            path.windows(2).filter(|w| w[1] >= w[0]).count() as f64 / pairs as f64
        })
        .collect();
    let worst_monotone = monotone.iter().cloned().fold(1.0, f64::min);
    let lengths_ok = run
        .decoded
        .iter()
        .zip(&run.clips)
        .filter(|(d, c)| {
            (d.frames() as f64 - c.audio_frames as f64).abs() <= 0.2 * c.audio_frames as f64
        })
        .count();
    let (fast, time) = within(run.elapsed, 1800.0);
    verdict(
        run.summary.steps_run <= 3000 && ratio < 0.1 && periods == run.clips.len() && worst_monotone >= 0.9 && fast,
        format!(
            "{} steps, loss {first:.3} -> {final_loss:.4} (ratio {ratio:.4}), period stop {periods}/{}, \
             worst monotone fraction {worst_monotone:.3}, length within 20% {lengths_ok}/{}, {time}",
            run.summary.steps_run,
            run.clips.len(),
            run.clips.len()
        ),
    )
}

fn criterion_6(run: &Run) -> Verdict {
    let mut margins = Vec::new();
    for ((clip, synth), noise) in run.clips.iter().zip(&run.synthesized).zip(&run.noise) {
        let s = estoi(&clip.audio, synth).unwrap();
        let n = estoi(&clip.audio, noise).unwrap();
        margins.push(s - n);
    }
    let worst = margins.iter().cloned().fold(f64::INFINITY, f64::min);
    let listed: Vec<String> = margins.iter().map(|m| format!("{m:.3}")).collect();
    verdict(
        worst >= 0.1,
        format!(
            "margins over noise [{}], worst {worst:.3}",
            listed.join(", ")
        ),
    )
}

/// Shortest edit script by breadth-first search over all strings up to one
/// symbol longer than either input.
fn bfs_distances(source: &[u8], alphabet: &[u8], max_len: usize) -> HashMap<Vec<u8>, usize> {
    let mut dist = HashMap::from([(source.to_vec(), 0)]);
    let mut queue = VecDeque::from([source.to_vec()]);
    while let Some(s) = queue.pop_front() {
        let d = dist[&s];
        let mut next = Vec::new();
        for i in 0..s.len() {
            let mut del = s.clone();
            del.remove(i);
            next.push(del);
            for &c in alphabet {
                let mut sub = s.clone();
                sub[i] = c;
                next.push(sub);
            }
        }
        if s.len() < max_len {
            for i in 0..=s.len() {
                for &c in alphabet {
                    let mut ins = s.clone();
                    ins.insert(i, c);
                    next.push(ins);
                }
            }
        }
        for t in next {
            if !dist.contains_key(&t) {
                dist.insert(t.clone(), d + 1);
                queue.push_back(t);
            }
        }
    }
    dist
}

fn all_strings(alphabet: &[u8], max_len: usize) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s: &Vec<u8>| {
                alphabet.iter().map(move |&c| {
                    let mut t = s.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

fn criterion_7() -> Verdict {
    let alphabet = b"abc";
    let strings = all_strings(alphabet, 4);
    let mut mismatches = 0;
    let mut pairs = 0;
    for a in &strings {
        let oracle = bfs_distances(a, alphabet, 5);
        for b in &strings {
            pairs += 1;
            if edit_distance(a, b).distance() != oracle[b] {
                mismatches += 1;
            }
        }
    }
    let clip = &synth_clips(&SynthSpec {
        n_clips: 1,
        ..Default::default()
    })
    .unwrap()[0];
    let self_score = estoi(&clip.audio, &clip.audio).unwrap();
    let wer = wer_cer(&clip.transcript(), &clip.transcript(), Unit::Word).unwrap();
    verdict(
        mismatches == 0 && (self_score - 1.0).abs() <= 1e-6 && wer == 0.0,
        format!("{mismatches}/{pairs} edit-distance mismatches, estoi(x, x) = {self_score:.9}, wer = {wer}"),
    )
}

fn criterion_8(a: &Run, b: &Run) -> Verdict {
    let checkpoint = a.checkpoint == b.checkpoint;
    let wavs = a.wavs == b.wavs;
    let report = a.report == b.report;
    let dsp = a.dsp.signals == b.dsp.signals;
    let records = a.records == b.records;
    verdict(
        checkpoint && wavs && report && dsp && records,
        format!("checkpoint {checkpoint}, wavs {wavs}, report {report}, griffin-lim {dsp}"),
    )
}

fn criterion_9(run: &Run, dir: &Path) -> Verdict {
    let lr0 = cosine_lr(0, &TrainConfig::default());
    let clip_norm = run.config.train.clip_norm;
    let worst_clipped = run
        .summary
        .log
        .iter()
        .map(|r| r.clipped_grad_norm)
        .fold(0.0, f64::max);
    let mut ft_cfg = run.config.clone();
    ft_cfg.train.fine_tune = true;
    let ft_steps = 50;
    let ft = train(
        &ft_cfg,
        &run.clips,
        &dir.join("fine_tune"),
        &RunOptions {
            init_from: Some(run.summary.checkpoint.clone()),
            stop_after: Some(ft_steps),
            ..Default::default()
        },
    )
    .unwrap();
    let exact = |f: &LogRecord, b: &LogRecord| f.step == b.step && f.lr == b.lr / 10.0;
    let tenth = ft.log.len() == ft_steps
        && ft
            .log
            .iter()
            .zip(&run.summary.log)
            .all(|(f, b)| exact(f, b));
    verdict(
        lr0 == 0.001 && clip_norm == 1.0 && worst_clipped <= 1.0 + 1e-6 && tenth,
        format!(
            "cosine_lr(0) = {lr0}, worst clipped norm {worst_clipped:.9} over {} steps, fine-tune lr a tenth on {} steps: {tenth}",
            run.summary.log.len(),
            ft.log.len()
        ),
    )
}

fn main() {
    // Under `cargo test -- <filter>` only run when the filter names this target.
    let args: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    let root = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, Verdict)> = Vec::new();
    let mut report = |n: usize, v: Verdict| {
        println!(
            "criterion {n}: {} ({})",
            if v.pass { "pass" } else { "FAIL" },
            v.detail
        );
        results.push((n, v));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    let first = full_run(&root.path().join("a"), SEED);
    let second = full_run(&root.path().join("b"), SEED);
    report(4, first.dsp.verdict.clone());
    report(5, criterion_5(&first));
    report(6, criterion_6(&first));
    report(7, criterion_7());
    report(8, criterion_8(&first, &second));
    report(9, criterion_9(&first, root.path()));
    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, v)| !v.pass)
        .map(|(n, _)| *n)
        .collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
