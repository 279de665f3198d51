//! Zero-padded minibatches with validity masks.

use super::{DataError, PreparedClip, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `B × C × T_max × H × W`.
    pub frames: Tensor,
    /// `B × m_max × n_mels`.
    pub targets: Tensor,
    pub frame_lens: Vec<usize>,
    pub mel_lens: Vec<usize>,
    /// `B × T_max`, true on real frames.
    pub frame_mask: Vec<bool>,
    /// `B × m_max`, true on real mel frames.
    pub mel_mask: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn max_frames(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn max_mels(&self) -> usize {
        self.targets.shape()[1]
    }

    /// Unpadded frames (`C × T_i × H × W`) and target (`m_i × n_mels`) of
    /// clip `i`.
    pub fn clip(&self, i: usize) -> Result<(Tensor, Tensor)> {
        let s = self.frames.shape();
        let (c, t_max, plane) = (s[1], s[2], s[3] * s[4]);
        let t = self.frame_lens[i];
        let per_clip = c * t_max * plane;
        let mut frames = Vec::with_capacity(c * t * plane);
        for ch in 0..c {
            let start = i * per_clip + ch * t_max * plane;
            frames.extend_from_slice(&self.frames.data()[start..start + t * plane]);
        }
        let (m_max, mels) = (self.targets.shape()[1], self.targets.shape()[2]);
        let m = self.mel_lens[i];
        let start = i * m_max * mels;
        let target = self.targets.data()[start..start + m * mels].to_vec();
        Ok((
            Tensor::new(&[c, t, s[3], s[4]], frames)?,
            Tensor::new(&[m, mels], target)?,
        ))
    }
}

/// Pads clips to the batch maxima and sorts them by descending target
/// length (stable, so ties keep input order).
pub fn batch_collate(clips: &[&PreparedClip]) -> Result<Batch> {
    let first = clips
        .first()
        .ok_or_else(|| DataError::Config("cannot collate an empty batch".into()))?;
    let fs = first.frames.shape();
    let (c, h, w) = (fs[0], fs[2], fs[3]);
    let mels = first.target.shape()[1];
    for p in clips {
        let s = p.frames.shape();
        if s[0] != c || s[2] != h || s[3] != w || p.target.shape()[1] != mels {
            return Err(DataError::Config(format!(
                "clip `{}` has frames {:?} and {} mel channels; batch expects [{c}, _, {h}, {w}] and {mels}",
                p.id,
                s,
                p.target.shape()[1]
            )));
        }
    }
    let mut order: Vec<usize> = (0..clips.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(clips[i].mel_count()));
    let b = clips.len();
    let t_max = clips.iter().map(|p| p.frame_count()).max().unwrap();
    let m_max = clips.iter().map(|p| p.mel_count()).max().unwrap();
    let plane = h * w;
    let mut frames = vec![0.0 as Real; b * c * t_max * plane];
    let mut targets = vec![0.0 as Real; b * m_max * mels];
    let mut frame_mask = vec![false; b * t_max];
    let mut mel_mask = vec![false; b * m_max];
    let mut ids = Vec::with_capacity(b);
    let (mut frame_lens, mut mel_lens) = (Vec::with_capacity(b), Vec::with_capacity(b));
    for (slot, &i) in order.iter().enumerate() {
        let p = clips[i];
        let (t, m) = (p.frame_count(), p.mel_count());
        for ch in 0..c {
            let src = &p.frames.data()[ch * t * plane..(ch + 1) * t * plane];
            let dst = (slot * c + ch) * t_max * plane;
            frames[dst..dst + t * plane].copy_from_slice(src);
        }
        targets[slot * m_max * mels..slot * m_max * mels + m * mels]
            .copy_from_slice(p.target.data());
        frame_mask[slot * t_max..slot * t_max + t]
            .iter_mut()
            .for_each(|v| *v = true);
        mel_mask[slot * m_max..slot * m_max + m]
            .iter_mut()
            .for_each(|v| *v = true);
        ids.push(p.id.clone());
        frame_lens.push(t);
        mel_lens.push(m);
    }
    Ok(Batch {
        ids,
        frames: Tensor::new(&[b, c, t_max, h, w], frames)?,
        targets: Tensor::new(&[b, m_max, mels], targets)?,
        frame_lens,
        mel_lens,
        frame_mask,
        mel_mask,
    })
}

/// Mean squared error over the rows of `B × m × n` tensors whose mask entry
/// is true; the denominator counts only those entries.
pub fn masked_mse(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Real {
    let n = *pred.shape().last().unwrap();
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((p, t), &keep) in pred.data().chunks(n).zip(target.data().chunks(n)).zip(mask) {
        if keep {
            sum += p
                .iter()
                .zip(t)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<Real>();
            count += n;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as Real
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::AudioSignal;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn clip(id: &str, t: usize, m: usize, rng: &mut ChaCha8Rng) -> PreparedClip {
        let frames = Tensor::new(
            &[1, t, 3, 2],
            (0..t * 6).map(|_| rng.random::<Real>()).collect(),
        )
        .unwrap();
        let target =
            Tensor::new(&[m, 4], (0..m * 4).map(|_| rng.random::<Real>()).collect()).unwrap();
        PreparedClip {
            id: id.into(),
            frames,
            target,
            audio_frames: m,
            audio: AudioSignal::new(vec![], 16000),
        }
    }

    #[test]
    fn single_clip_masks_are_all_true() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = clip("a", 3, 5, &mut rng);
        let b = batch_collate(&[&a]).unwrap();
        assert!(b.frame_mask.iter().all(|&v| v));
        assert!(b.mel_mask.iter().all(|&v| v));
    }

    #[test]
    fn padding_and_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = clip("short", 3, 3, &mut rng);
        let b = clip("long", 5, 5, &mut rng);
        let batch = batch_collate(&[&a, &b]).unwrap();
        assert_eq!(batch.ids, vec!["long", "short"]);
        assert_eq!(batch.max_frames(), 5);
        assert_eq!(&batch.mel_mask[5..], &[true, true, true, false, false]);
        assert_eq!(&batch.frame_mask[5..], &[true, true, true, false, false]);
        assert!(batch_collate(&[]).is_err());
    }

    #[test]
    fn masked_loss_matches_weighted_per_clip_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clips: Vec<PreparedClip> = (0..4)
            .map(|i| clip(&format!("c{i}"), 2 + i, 3 + 2 * i, &mut rng))
            .collect();
        let refs: Vec<&PreparedClip> = clips.iter().collect();
        let batch = batch_collate(&refs).unwrap();
        let pred = Tensor::new(
            batch.targets.shape(),
            (0..batch.targets.len())
                .map(|_| rng.random::<Real>())
                .collect(),
        )
        .unwrap();
        let got = masked_mse(&pred, &batch.targets, &batch.mel_mask);
        // Loop oracle: each clip's unpadded MSE weighted by its entry count.
        let (m_max, n) = (batch.max_mels(), 4);
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..batch.len() {
            let m = batch.mel_lens[i];
            let mut mse = 0.0;
            for r in 0..m {
                for c in 0..n {
                    let k = (i * m_max + r) * n + c;
                    mse += (pred.data()[k] - batch.targets.data()[k]).powi(2);
                }
            }
            mse /= (m * n) as Real;
            num += mse * (m * n) as Real;
            den += (m * n) as Real;
        }
        assert!((got - num / den).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn collate_then_unpad_is_lossless(lens in proptest::collection::vec((1usize..6, 1usize..7), 1..5), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let clips: Vec<PreparedClip> =
                lens.iter().enumerate().map(|(i, &(t, m))| clip(&format!("c{i}"), t, m, &mut rng)).collect();
            let refs: Vec<&PreparedClip> = clips.iter().collect();
            let batch = batch_collate(&refs).unwrap();
            for (slot, id) in batch.ids.iter().enumerate() {
                let orig = clips.iter().find(|c| &c.id == id).unwrap();
                let (f, t) = batch.clip(slot).unwrap();
                prop_assert_eq!(&f, &orig.frames);
                prop_assert_eq!(&t, &orig.target);
            }
            prop_assert!(batch.mel_lens.windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
