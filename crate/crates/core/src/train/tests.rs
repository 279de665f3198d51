#![cfg_attr(feature = "f32", allow(unused_imports, dead_code))]

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{augment_hflip, load_manifest, synth_generate, PreparedClip, SynthSpec};
use crate::model::{teacher_forced, Bound, Mode, Model, ModelConfig};
use crate::tensor::{Graph, Real, Tensor};

fn micro_config(total_steps: usize) -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig::micro(),
        ..Default::default()
    };
    cfg.model.max_decoder_steps = 60;
    cfg.data.frame_size = 8;
    cfg.train.total_steps = total_steps;
    cfg.train.batch_size = 2;
    cfg.train.val_fraction = 0.0;
    cfg.train.checkpoint_every = 0;
    cfg
}

fn micro_clips(dir: &Path, n: usize) -> Vec<PreparedClip> {
    let spec = SynthSpec {
        n_clips: n,
        frame_size: 8,
        min_duration: 0.36,
        max_duration: 0.36,
        ..Default::default()
    };
    synth_generate(&spec, dir).unwrap();
    let manifest = load_manifest(&dir.join("manifest.jsonl")).unwrap();
    load_clips(&manifest, &micro_config(1).data, 2).unwrap()
}

fn params_of(m: &Model) -> Vec<Tensor> {
    m.params.iter().map(|(_, p)| p.value.clone()).collect()
}

#[test]
fn steps_are_deterministic_and_clipped() {
    let dir = tempfile::tempdir().unwrap();
    let clips = micro_clips(dir.path(), 2);
    let refs: Vec<&PreparedClip> = clips.iter().collect();
    let cfg = micro_config(4);
    let run = || {
        let mut model = Model::new(cfg.model.clone()).unwrap();
        let mut adam = Adam::new(&model.params, 0.9, 0.999, 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reports: Vec<StepReport> = (0..3)
            .map(|s| train_step(&mut model, &mut adam, &refs, s, &cfg.train, &mut rng).unwrap())
            .collect();
        (reports, params_of(&model))
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    for r in &a {
        assert!(r.clipped_grad_norm <= cfg.train.clip_norm + 1e-6);
        assert!(r.loss.is_finite() && r.loss > 0.0);
    }
}

#[cfg(not(feature = "f32"))]
#[test]
fn zero_target_with_identity_postnet_gives_equal_terms() {
    let dir = tempfile::tempdir().unwrap();
    let mut clip = micro_clips(dir.path(), 1).remove(0);
    clip.target = Tensor::zeros(clip.target.shape());
    let mut cfg = micro_config(1);
    cfg.model.zero_init_postnet_output = true;
    let mut model = Model::new(cfg.model.clone()).unwrap();
    let mut adam = Adam::new(&model.params, 0.9, 0.999, 1e-8);

    // Oracle: replay the same draws and take twice the mean square of the
    // decoder output.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut oracle_rng = rng.clone();
    let mut stats = model.stats.clone();
    let frames = augment_hflip(&clip.frames, cfg.train.hflip_prob, &mut oracle_rng);
    let mut g = Graph::new();
    let p = Bound::bind(&mut g, &model.config, &model.params).unwrap();
    let out = teacher_forced(
        &mut g,
        &model.config,
        &p,
        &mut stats,
        &frames,
        &clip.target,
        1.0,
        Mode::Train,
        &mut oracle_rng,
    )
    .unwrap();
    assert_eq!(g.value(out.o_dec), g.value(out.o_post));
    let dec = g.value(out.o_dec).data();
    let mse: f64 = dec.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / dec.len() as f64;

    let r = train_step(&mut model, &mut adam, &[&clip], 0, &cfg.train, &mut rng).unwrap();
    assert!(
        (r.loss - 2.0 * mse).abs() <= 1e-12 * r.loss,
        "{} vs {}",
        r.loss,
        2.0 * mse
    );
}

#[test]
fn non_finite_loss_names_the_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut clip = micro_clips(dir.path(), 1).remove(0);
    clip.target.data_mut()[0] = Real::NAN;
    let cfg = micro_config(1);
    let mut model = Model::new(cfg.model.clone()).unwrap();
    let mut adam = Adam::new(&model.params, 0.9, 0.999, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    match train_step(&mut model, &mut adam, &[&clip], 0, &cfg.train, &mut rng) {
        Err(TrainError::NonFiniteLoss { step: 0, ids }) => assert_eq!(ids, vec![clip.id.clone()]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_is_byte_identical_and_hash_checked() {
    let dir = tempfile::tempdir().unwrap();
    let clips = micro_clips(&dir.path().join("data"), 2);
    let cfg = micro_config(3);
    let out = dir.path().join("run");
    let summary = train(&cfg, &clips, &out, &RunOptions::default()).unwrap();
    let first = std::fs::read(&summary.checkpoint).unwrap();

    let ck = load_checkpoint(&summary.checkpoint, Some(&cfg), false).unwrap();
    assert_eq!(ck.state, summary.state);
    let again = dir.path().join("again.lmck");
    save_checkpoint(&again, &ck.config, &ck.model, &ck.state).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), first);

    let mut other = cfg.clone();
    other.train.seed = 99;
    assert!(matches!(
        load_checkpoint(&again, Some(&other), false),
        Err(TrainError::HashMismatch)
    ));
    assert!(load_checkpoint(&again, Some(&other), true).is_ok());

    let model = load_model(&again).unwrap();
    assert_eq!(params_of(&model), params_of(&summary.model));
}

#[test]
fn split_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let clips = micro_clips(&dir.path().join("data"), 3);
    let cfg = micro_config(10);

    let full = train(
        &cfg,
        &clips,
        &dir.path().join("full"),
        &RunOptions::default(),
    )
    .unwrap();
    assert_eq!(full.steps_run, 10);
    assert_eq!(full.cause, StopCause::TotalSteps);

    let part = dir.path().join("part");
    let first = train(
        &cfg,
        &clips,
        &part,
        &RunOptions {
            stop_after: Some(5),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(first.cause, StopCause::StopAfter);
    let resumed = train(
        &cfg,
        &clips,
        &part,
        &RunOptions {
            resume: Some(first.checkpoint.clone()),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.steps_run, 5);
    assert_eq!(params_of(&resumed.model), params_of(&full.model));
    assert_eq!(resumed.model.stats, full.model.stats);
    assert_eq!(
        std::fs::read(full.checkpoint).unwrap(),
        std::fs::read(&resumed.checkpoint).unwrap()
    );
    let log = |p: &Path| std::fs::read_to_string(p.join(LOG_FILE)).unwrap();
    assert_eq!(log(&part), log(&dir.path().join("full")));
    assert_eq!(log(&part).lines().count(), 10);

    // Resuming a finished run does nothing.
    let done = train(
        &cfg,
        &clips,
        &part,
        &RunOptions {
            resume: Some(resumed.checkpoint.clone()),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(done.steps_run, 0);
    assert_eq!(log(&part).lines().count(), 10);
}

#[test]
fn fine_tune_logs_a_tenth_of_the_base_rate() {
    let dir = tempfile::tempdir().unwrap();
    let clips = micro_clips(&dir.path().join("data"), 2);
    let base_cfg = micro_config(4);
    let mut ft_cfg = base_cfg.clone();
    ft_cfg.train.fine_tune = true;
    let base = train(
        &base_cfg,
        &clips,
        &dir.path().join("base"),
        &RunOptions::default(),
    )
    .unwrap();
    let ft = train(
        &ft_cfg,
        &clips,
        &dir.path().join("ft"),
        &RunOptions {
            init_from: Some(base.checkpoint.clone()),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(base.log.len(), ft.log.len());
    for (b, f) in base.log.iter().zip(&ft.log) {
        assert_eq!(f.lr, b.lr / 10.0);
    }
}

#[test]
fn validation_split_and_early_stop() {
    let dir = tempfile::tempdir().unwrap();
    let clips = micro_clips(&dir.path().join("data"), 3);
    let mut cfg = micro_config(50);
    cfg.train.val_fraction = 0.34;
    cfg.train.patience = 0;
    let s = train(
        &cfg,
        &clips,
        &dir.path().join("run"),
        &RunOptions::default(),
    )
    .unwrap();
    // Two training clips and batch size two: one step per epoch, and zero
    // patience stops after the first validation.
    assert_eq!(s.cause, StopCause::EarlyStop);
    assert_eq!(s.steps_run, 1);
    assert_eq!(s.state.val_history.len(), 1);
    assert!(s.log[0].val_loss.is_some());
    assert_eq!(split_validation(10, 0.1), 1);
    assert_eq!(split_validation(10, 0.0), 0);
    assert_eq!(split_validation(1, 0.5), 0);
}
