use std::path::{Path, PathBuf};
use std::process::Command;

use lipmel::cli::run;
use lipmel::data::{SynthSpec, VideoClip};
use lipmel::dsp::wav::read_wav;
use lipmel::dsp::MelSpectrogram;
use lipmel::metrics::{EvalRecord, EvalStatus, REPORT_HEADER};
use lipmel::model::ModelConfig;
use lipmel::train::{RunConfig, LOG_FILE};
use sha2::{Digest, Sha256};

fn lipmel(args: &[&str]) -> i32 {
    run(std::iter::once("lipmel").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn micro_run_config(dir: &Path, steps: usize) -> PathBuf {
    let mut cfg = RunConfig {
        model: ModelConfig::micro(),
        ..Default::default()
    };
    cfg.model.max_decoder_steps = 25;
    cfg.data.frame_size = 8;
    cfg.train.total_steps = steps;
    cfg.train.batch_size = 2;
    cfg.train.val_fraction = 0.0;
    cfg.train.checkpoint_every = 0;
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn gendata(dir: &Path, clips: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("data{seed}"));
    assert_eq!(
        lipmel(&[
            "gendata",
            "--out",
            s(&out),
            "--clips",
            &clips.to_string(),
            "--seed",
            &seed.to_string()
        ]),
        0
    );
    out
}

fn tree_hash(dir: &Path) -> Vec<u8> {
    let mut files: Vec<PathBuf> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p)
            } else {
                files.push(p)
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_str().unwrap().as_bytes());
        h.update(std::fs::read(&f).unwrap());
    }
    h.finalize().to_vec()
}

#[test]
fn gendata_writes_one_line_per_clip_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = gendata(dir.path(), 10, 4);
    let manifest = std::fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 10);
    let again = dir.path().join("again");
    assert_eq!(
        lipmel(&[
            "gendata",
            "--out",
            s(&again),
            "--clips",
            "10",
            "--seed",
            "4"
        ]),
        0
    );
    assert_eq!(tree_hash(&a), tree_hash(&again));
}

#[test]
fn gendata_total_duration_matches_spec_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    // Fixed-length clips: five symbols of three frames at 25 fps.
    let spec = SynthSpec {
        n_clips: 6,
        min_duration: 0.6,
        max_duration: 0.6,
        ..Default::default()
    };
    let spec_path = dir.path().join("spec.toml");
    std::fs::write(&spec_path, toml::to_string(&spec).unwrap()).unwrap();
    let out = dir.path().join("data");
    assert_eq!(
        lipmel(&["gendata", "--spec", s(&spec_path), "--out", s(&out)]),
        0
    );
    let total: f64 = lipmel::data::load_manifest(&out.join("manifest.jsonl"))
        .unwrap()
        .records
        .iter()
        .map(|r| r.duration)
        .sum();
    let expected = 6.0 * 0.6;
    assert!((total - expected).abs() <= 0.01 * expected, "{total}");
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "fps = 7.0\n").unwrap();
    assert_eq!(
        lipmel(&[
            "gendata",
            "--spec",
            s(&bad),
            "--out",
            s(&dir.path().join("x"))
        ]),
        2
    );
}

#[test]
fn train_logs_every_step_and_resume_at_the_end_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let data = gendata(dir.path(), 3, 0);
    let cfg = micro_run_config(dir.path(), 3);
    let out = dir.path().join("run");
    let manifest = data.join("manifest.jsonl");
    assert_eq!(
        lipmel(&[
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&manifest),
            "--out",
            s(&out),
            "--progress",
            "0"
        ]),
        0
    );
    let log = out.join(LOG_FILE);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 3);
    let ck = out.join("last.lmck");
    let before = std::fs::read(&ck).unwrap();
    assert_eq!(
        lipmel(&[
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&manifest),
            "--out",
            s(&out),
            "--resume",
            s(&ck)
        ]),
        0
    );
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 3);
    assert_eq!(std::fs::read(&ck).unwrap(), before);

    // A different seed changes the configuration hash.
    let code = lipmel(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&manifest),
        "--out",
        s(&out),
        "--resume",
        s(&ck),
        "--seed",
        "9",
    ]);
    assert_eq!(code, 2);
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(
        lipmel(&[
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&missing),
            "--out",
            s(&out)
        ]),
        3
    );
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nclip_norm = -1.0\n").unwrap();
    assert_eq!(
        lipmel(&[
            "train",
            "--config",
            s(&bad),
            "--data",
            s(&manifest),
            "--out",
            s(&out)
        ]),
        2
    );
}

#[test]
fn synthesize_writes_pcm_mel_and_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let data = gendata(dir.path(), 2, 1);
    let cfg = micro_run_config(dir.path(), 1);
    let out = dir.path().join("run");
    let manifest = data.join("manifest.jsonl");
    assert_eq!(
        lipmel(&[
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&manifest),
            "--out",
            s(&out),
            "--progress",
            "0"
        ]),
        0
    );
    let ck = out.join("last.lmck");
    let video = data.join("video/clip0000.lsvf");
    let (wav, mel, align) = (out.join("s.wav"), out.join("s.mel"), out.join("a.txt"));
    let args = [
        "synthesize",
        "--checkpoint",
        s(&ck),
        "--video",
        s(&video),
        "--out-wav",
        s(&wav),
        "--out-mel",
        s(&mel),
        "--out-alignment",
        s(&align),
    ];
    assert_eq!(lipmel(&args), 0);
    let reader = hound::WavReader::open(&wav).unwrap();
    let spec = reader.spec();
    assert_eq!(
        (spec.sample_rate, spec.channels, spec.bits_per_sample),
        (16000, 1, 16)
    );
    let m = MelSpectrogram::load(&mel).unwrap();
    assert_eq!(m.channels, 80);
    let text = std::fs::read_to_string(&align).unwrap();
    assert_eq!(text.lines().count(), m.frames);
    let clip = VideoClip::read_from(&mut std::fs::File::open(&video).unwrap(), 25.0).unwrap();
    // One column per video frame plus the period frame.
    for line in text.lines() {
        let row: Vec<f64> = line.split(' ').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row.len(), clip.frames + 1);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    // One untrained step never finds the period, so the step cap is hit.
    assert_eq!(m.frames, 25);
    let mut strict = args.to_vec();
    strict.push("--strict");
    assert_eq!(lipmel(&strict), 5);
}

fn report_rows(path: &Path) -> (String, Vec<EvalRecord>) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    (
        header,
        lines.map(|l| serde_json::from_str(l).unwrap()).collect(),
    )
}

#[test]
fn evaluating_ground_truth_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let data = gendata(dir.path(), 3, 2);
    let manifest = lipmel::data::load_manifest(&data.join("manifest.jsonl")).unwrap();
    let hyp = dir.path().join("hyp");
    std::fs::create_dir(&hyp).unwrap();
    for r in &manifest.records {
        std::fs::copy(
            manifest.resolve(&r.audio_path),
            hyp.join(format!("{}.wav", r.id)),
        )
        .unwrap();
        std::fs::write(
            hyp.join(format!("{}.txt", r.id)),
            r.transcript.as_ref().unwrap(),
        )
        .unwrap();
    }
    let report = dir.path().join("report.jsonl");
    let mpath = data.join("manifest.jsonl");
    assert_eq!(
        lipmel(&[
            "evaluate",
            "--manifest",
            s(&mpath),
            "--hyp-dir",
            s(&hyp),
            "--report",
            s(&report)
        ]),
        0
    );
    let (header, rows) = report_rows(&report);
    assert_eq!(header, REPORT_HEADER);
    assert_eq!(rows.len(), 4);
    for r in &rows[..3] {
        assert_eq!(r.status, EvalStatus::Ok);
        assert!((r.estoi.unwrap() - 1.0).abs() < 1e-6);
        assert_eq!(r.wer, Some(0.0));
        assert_eq!(r.cer, Some(0.0));
        assert!(r.mel_mse.unwrap() < 1e-20);
    }

    // Perturb one hypothesis so the means are non-trivial, then recompute.
    let first = &manifest.records[0];
    let mut audio = read_wav(&hyp.join(format!("{}.wav", first.id))).unwrap();
    for (i, v) in audio.samples.iter_mut().enumerate() {
        *v = 0.5 * *v + 0.01 * ((i * 7919) % 13) as f64 / 13.0;
    }
    lipmel::dsp::wav::write_wav(&hyp.join(format!("{}.wav", first.id)), &audio).unwrap();
    std::fs::write(hyp.join(format!("{}.txt", first.id)), "x").unwrap();
    assert_eq!(
        lipmel(&[
            "evaluate",
            "--manifest",
            s(&mpath),
            "--hyp-dir",
            s(&hyp),
            "--report",
            s(&report)
        ]),
        0
    );
    let (_, rows) = report_rows(&report);
    let (clips, summary) = rows.split_at(3);
    let mean =
        |f: fn(&EvalRecord) -> Option<f64>| clips.iter().map(|r| f(r).unwrap()).sum::<f64>() / 3.0;
    assert!((summary[0].estoi.unwrap() - mean(|r| r.estoi)).abs() < 1e-9);
    assert!((summary[0].mel_mse.unwrap() - mean(|r| r.mel_mse)).abs() < 1e-9);
    assert!((summary[0].wer.unwrap() - mean(|r| r.wer)).abs() < 1e-9);
    assert!(summary[0].wer.unwrap() > 0.0);

    // A missing hypothesis is a failed row, fatal only under --strict.
    std::fs::remove_file(hyp.join(format!("{}.wav", first.id))).unwrap();
    assert_eq!(
        lipmel(&[
            "evaluate",
            "--manifest",
            s(&mpath),
            "--hyp-dir",
            s(&hyp),
            "--report",
            s(&report)
        ]),
        0
    );
    let (_, rows) = report_rows(&report);
    assert_eq!(rows[0].status, EvalStatus::Failed);
    let strict = [
        "evaluate",
        "--manifest",
        s(&mpath),
        "--hyp-dir",
        s(&hyp),
        "--report",
        s(&report),
        "--strict",
    ];
    assert_ne!(lipmel(&strict), 0);
}

#[test]
fn empty_manifest_gives_header_only_report() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("empty.jsonl");
    std::fs::write(&m, "").unwrap();
    let report = dir.path().join("r.jsonl");
    assert_eq!(
        lipmel(&[
            "evaluate",
            "--manifest",
            s(&m),
            "--hyp-dir",
            s(dir.path()),
            "--report",
            s(&report)
        ]),
        0
    );
    assert_eq!(
        std::fs::read_to_string(&report).unwrap(),
        format!("{REPORT_HEADER}\n")
    );
}

fn binary(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_lipmel"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8(out.stdout).unwrap(),
    )
}

#[cfg(not(feature = "f32"))]
#[test]
fn gradcheck_table_and_fault_injection() {
    let (code, table) = binary(&["gradcheck"]);
    assert_eq!(code, 0, "{table}");
    let rows: Vec<&str> = table.lines().skip(1).collect();
    let primitives = lipmel::tensor::checks::primitive_names();
    assert_eq!(rows.len(), primitives.len() + 1);
    assert!(rows.last().unwrap().starts_with("full_model"));
    assert!(rows.iter().all(|r| r.ends_with("pass")));

    let (code, table) = binary(&["gradcheck", "--inject-fault", "lstm"]);
    assert_eq!(code, 6);
    let failed: Vec<&str> = table.lines().filter(|l| l.ends_with("FAIL")).collect();
    assert!(failed.iter().any(|l| l.starts_with("lstm")), "{table}");
    assert!(
        failed.iter().any(|l| l.starts_with("full_model")),
        "{table}"
    );
}

#[test]
fn inspect_recognizes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = gendata(dir.path(), 1, 3);
    let (code, text) = binary(&["inspect", s(&data.join("manifest.jsonl"))]);
    assert_eq!(code, 0);
    assert!(text.starts_with("manifest: 1 clips"));
    let (code, text) = binary(&["inspect", s(&data.join("video/clip0000.lsvf"))]);
    assert_eq!(code, 0);
    assert!(text.contains("112×112×1"), "{text}");
    let (code, _) = binary(&["inspect", s(&dir.path().join("nothing"))]);
    assert_eq!(code, 3);
}
