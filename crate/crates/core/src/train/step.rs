use rand::Rng;

use super::{clip_gradients, cosine_lr, tf_ratio, Adam, Result, TrainConfig, TrainError};
use crate::data::{augment_hflip, batch_collate, PreparedClip};
use crate::model::{teacher_forced, Bound, Mode, Model};
use crate::tensor::{Graph, Real};

/// What one optimizer update did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub lr: f64,
    pub tf_ratio: f64,
    /// Global gradient norm before and after clipping.
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
}

/// One update on a minibatch. Clips are decoded one at a time against the
/// shared parameters; the loss is the squared error of both the pre- and
/// post-refinement frames summed over every real target entry, divided by
/// the count of those entries, so padding never contributes.
pub fn train_step<R: Rng>(
    model: &mut Model,
    adam: &mut Adam,
    clips: &[&PreparedClip],
    step: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepReport> {
    let batch = batch_collate(clips)?;
    let lr = cosine_lr(step, cfg);
    let tf = tf_ratio(step, cfg);
    let entries: usize = batch.mel_lens.iter().sum::<usize>() * batch.targets.shape()[2];
    let inv = 1.0 / entries as Real;
    model.params.zero_grad();
    let mut loss = 0.0f64;
    for i in 0..batch.len() {
        let (frames, target) = batch.clip(i)?;
        let frames = augment_hflip(&frames, cfg.hflip_prob, rng);
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, &model.config, &model.params)?;
        let out = teacher_forced(
            &mut g,
            &model.config,
            &p,
            &mut model.stats,
            &frames,
            &target,
            tf,
            Mode::Train,
            rng,
        )?;
        let tgt = g.constant(target);
        let a = g.squared_error(out.o_dec, tgt)?;
        let b = g.squared_error(out.o_post, tgt)?;
        let sum = g.add(a, b)?;
        let scaled = g.scale(sum, inv);
        loss += g.value(scaled).data()[0] as f64;
        g.backward(scaled)?.accumulate_into(&g, &mut model.params);
    }
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step,
            ids: batch.ids.clone(),
        });
    }
    let grad_norm = clip_gradients(&mut model.params, cfg.clip_norm)?;
    let clipped_grad_norm = super::grad_norm(&model.params);
    adam.step(&mut model.params, lr);
    Ok(StepReport {
        loss,
        lr,
        tf_ratio: tf,
        grad_norm,
        clipped_grad_norm,
    })
}

/// The training objective under full teacher forcing with running
/// batch-norm statistics and no augmentation, averaged over the real
/// entries of all `clips`.
pub fn teacher_forced_loss<R: Rng>(
    model: &Model,
    clips: &[&PreparedClip],
    rng: &mut R,
) -> Result<f64> {
    let mut stats = model.stats.clone();
    let (mut sse, mut count) = (0.0f64, 0usize);
    for clip in clips {
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, &model.config, &model.params)?;
        let out = teacher_forced(
            &mut g,
            &model.config,
            &p,
            &mut stats,
            &clip.frames,
            &clip.target,
            1.0,
            Mode::Eval,
            rng,
        )?;
        let tgt = g.constant(clip.target.clone());
        let a = g.squared_error(out.o_dec, tgt)?;
        let b = g.squared_error(out.o_post, tgt)?;
        sse += (g.value(a).data()[0] + g.value(b).data()[0]) as f64;
        count += clip.target.len();
    }
    if count == 0 {
        return Err(TrainError::Config("no clips to evaluate".into()));
    }
    Ok(sse / count as f64)
}
