//! The training loop: epoch shuffling, periodic validation, early stopping,
//! a line-delimited JSON log and numbered checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    early_stop, load_checkpoint, load_model, save_checkpoint, teacher_forced_loss, train_step,
    Adam, Result, RunConfig, TrainError, TrainState, MIN_IMPROVEMENT,
};
use crate::data::{preprocess_with, Manifest, PreparedClip, PreprocessConfig};
use crate::model::Model;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.lmck";

/// One line of the training log per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Steps completed including this one.
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub tf_ratio: f64,
    pub train_loss: f64,
    /// Present on the step that closes an epoch when a validation split
    /// exists.
    pub val_loss: Option<f64>,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint (its configuration hash must match).
    pub resume: Option<PathBuf>,
    /// Start from these weights with a fresh optimizer and step counter.
    pub init_from: Option<PathBuf>,
    /// Resume even when the checkpoint's configuration differs.
    pub allow_config_change: bool,
    /// Return after this many steps in this invocation.
    pub stop_after: Option<usize>,
    /// Print a progress line to stderr every this many steps; zero is
    /// silent.
    pub progress_every: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopCause {
    TotalSteps,
    EarlyStop,
    StopAfter,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub model: Model,
    pub state: TrainState,
    pub steps_run: usize,
    pub cause: StopCause,
    pub checkpoint: PathBuf,
    pub log: Vec<LogRecord>,
}

/// Number of clips held out from the end of the manifest.
pub fn split_validation(n: usize, fraction: f64) -> usize {
    if fraction <= 0.0 || n < 2 {
        return 0;
    }
    ((n as f64 * fraction).floor() as usize).clamp(1, n - 1)
}

/// Preprocesses every manifest clip on a worker pool; results come back
/// through a bounded queue and are stored in manifest order.
pub fn load_clips(
    manifest: &Manifest,
    cfg: &PreprocessConfig,
    workers: usize,
) -> Result<Vec<PreparedClip>> {
    let fb = cfg.filterbank()?;
    let n = manifest.records.len();
    let workers = workers.clamp(1, n.max(1));
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<PreparedClip>> = (0..n).map(|_| None).collect();
    let mut first_err = None;
    std::thread::scope(|s| {
        let (tx, rx) = mpsc::sync_channel(2 * workers);
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, fb) = (&next, &fb);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = preprocess_with(manifest, &manifest.records[i], cfg, fb);
                if tx.send((i, r)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, r) in rx {
            match r {
                Ok(c) => slots[i] = Some(c),
                Err(e) => {
                    next.store(n, Ordering::Relaxed);
                    first_err.get_or_insert((i, e));
                }
            }
        }
    });
    if let Some((_, e)) = first_err {
        return Err(e.into());
    }
    Ok(slots
        .into_iter()
        .map(|c| c.expect("every slot filled"))
        .collect())
}

fn validation_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    rng
}

/// Trains on `clips` (the last [`split_validation`] of them validate) and
/// writes the log and checkpoints under `out`.
pub fn train(
    config: &RunConfig,
    clips: &[PreparedClip],
    out: &Path,
    opts: &RunOptions,
) -> Result<RunSummary> {
    config.validate()?;
    let tc = &config.train;
    if clips.is_empty() {
        return Err(TrainError::Config("no training clips".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| TrainError::io(out, e))?;
    let n_val = split_validation(clips.len(), tc.val_fraction);
    let n_train = clips.len() - n_val;
    let val: Vec<&PreparedClip> = clips[n_train..].iter().collect();

    let (mut model, mut state) = match &opts.resume {
        Some(path) => {
            let ck = load_checkpoint(path, Some(config), opts.allow_config_change)?;
            if ck.state.epoch_order.iter().any(|&i| i >= n_train) {
                return Err(TrainError::Config(
                    "checkpoint refers to more training clips than supplied".into(),
                ));
            }
            (ck.model, ck.state)
        }
        None => {
            let model = match &opts.init_from {
                Some(path) => {
                    let m = load_model(path)?;
                    if m.config != config.model {
                        return Err(TrainError::Config(format!(
                            "{} holds a model of a different configuration",
                            path.display()
                        )));
                    }
                    m
                }
                None => Model::new(config.model.clone())?,
            };
            let adam = Adam::new(&model.params, tc.adam_beta1, tc.adam_beta2, tc.adam_eps);
            let state = TrainState {
                step: 0,
                epoch: 0,
                best_val_loss: None,
                val_history: Vec::new(),
                epoch_order: Vec::new(),
                cursor: 0,
                rng: ChaCha8Rng::seed_from_u64(tc.seed),
                adam,
            };
            (model, state)
        }
    };

    let log_path = out.join(LOG_FILE);
    let log_file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(opts.resume.is_some())
        .truncate(opts.resume.is_none())
        .open(&log_path)
        .map_err(|e| TrainError::io(&log_path, e))?;
    let mut log_writer = std::io::BufWriter::new(log_file);
    let mut log = Vec::new();

    let stopped_early =
        |state: &TrainState| !val.is_empty() && early_stop(&state.val_history, tc.patience);
    let mut cause = StopCause::TotalSteps;
    let mut steps_run = 0;
    while state.step < tc.total_steps {
        if stopped_early(&state) {
            cause = StopCause::EarlyStop;
            break;
        }
        if opts.stop_after.is_some_and(|k| steps_run >= k) {
            cause = StopCause::StopAfter;
            break;
        }
        if state.cursor >= state.epoch_order.len() {
            state.epoch_order = (0..n_train).collect();
            state.epoch_order.shuffle(&mut state.rng);
            state.cursor = 0;
        }
        let end = (state.cursor + tc.batch_size).min(state.epoch_order.len());
        let batch: Vec<&PreparedClip> = state.epoch_order[state.cursor..end]
            .iter()
            .map(|&i| &clips[i])
            .collect();
        state.cursor = end;
        let report = train_step(
            &mut model,
            &mut state.adam,
            &batch,
            state.step,
            tc,
            &mut state.rng,
        )?;
        state.step += 1;
        steps_run += 1;

        let mut val_loss = None;
        if state.cursor >= state.epoch_order.len() {
            state.epoch += 1;
            if !val.is_empty() {
                let v =
                    teacher_forced_loss(&model, &val, &mut validation_rng(tc.seed, state.epoch))?;
                if state.best_val_loss.is_none_or(|b| v < b - MIN_IMPROVEMENT) {
                    state.best_val_loss = Some(v);
                }
                state.val_history.push(v);
                val_loss = Some(v);
            }
        }
        let rec = LogRecord {
            step: state.step,
            epoch: state.epoch,
            lr: report.lr,
            tf_ratio: report.tf_ratio,
            train_loss: report.loss,
            val_loss,
            grad_norm: report.grad_norm,
            clipped_grad_norm: report.clipped_grad_norm,
        };
        let line = serde_json::to_string(&rec).expect("log record serializes");
        writeln!(log_writer, "{line}")
            .and_then(|_| log_writer.flush())
            .map_err(|e| TrainError::io(&log_path, e))?;
        if opts.progress_every > 0 && state.step % opts.progress_every == 0 {
            eprintln!(
                "step {:>6}  lr {:.3e}  tf {:.3}  loss {:.5}  |g| {:.3}",
                rec.step, rec.lr, rec.tf_ratio, rec.train_loss, rec.grad_norm
            );
        }
        log.push(rec);
        if tc.checkpoint_every > 0 && state.step % tc.checkpoint_every == 0 {
            let path = out.join(format!("checkpoint-{:06}.lmck", state.step));
            save_checkpoint(&path, config, &model, &state)?;
        }
    }
    let checkpoint = out.join(LAST_CHECKPOINT);
    save_checkpoint(&checkpoint, config, &model, &state)?;
    Ok(RunSummary {
        model,
        state,
        steps_run,
        cause,
        checkpoint,
        log,
    })
}
