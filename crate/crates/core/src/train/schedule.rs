use std::f64::consts::PI;

use super::TrainConfig;

/// Fine-tuning divides every learning rate by this.
pub const FINE_TUNE_DIVISOR: f64 = 10.0;

/// Minimum decrease of the validation loss that counts as progress.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

/// Cosine decay from `lr_initial` at step 0 to zero at `total_steps`;
/// steps past the end clamp to the end value.
pub fn cosine_lr(step: usize, cfg: &TrainConfig) -> f64 {
    let s = step.min(cfg.total_steps) as f64;
    let lr = cfg.lr_initial * 0.5 * (1.0 + (PI * s / cfg.total_steps as f64).cos());
    if cfg.fine_tune {
        lr / FINE_TUNE_DIVISOR
    } else {
        lr
    }
}

/// Linear anneal from `tf_start` to `tf_end` over `total_steps`.
pub fn tf_ratio(step: usize, cfg: &TrainConfig) -> f64 {
    let s = step.min(cfg.total_steps) as f64 / cfg.total_steps as f64;
    cfg.tf_start + (cfg.tf_end - cfg.tf_start) * s
}

/// True once the best validation loss is `patience` epochs old, where only
/// decreases larger than [`MIN_IMPROVEMENT`] renew it.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let Some(&first) = history.first() else {
        return false;
    };
    let mut best = first;
    let mut since = 0;
    for &v in &history[1..] {
        if v < best - MIN_IMPROVEMENT {
            best = v;
            since = 0;
        } else {
            since += 1;
        }
    }
    since >= patience
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(total: usize) -> TrainConfig {
        TrainConfig {
            total_steps: total,
            ..Default::default()
        }
    }

    #[test]
    fn cosine_landmarks() {
        let c = cfg(1000);
        assert_eq!(cosine_lr(0, &c), 0.001);
        assert!(cosine_lr(1000, &c).abs() < 1e-18);
        assert!((cosine_lr(500, &c) - 0.0005).abs() < 1e-15);
        assert_eq!(cosine_lr(5000, &c), cosine_lr(1000, &c));
    }

    #[test]
    fn fine_tune_is_a_tenth() {
        let base = cfg(77);
        let ft = TrainConfig {
            fine_tune: true,
            ..base.clone()
        };
        for s in 0..=77 {
            assert_eq!(cosine_lr(s, &ft), cosine_lr(s, &base) / 10.0);
        }
    }

    #[test]
    fn teacher_forcing_endpoints() {
        let c = cfg(10);
        assert_eq!(tf_ratio(0, &c), 1.0);
        assert_eq!(tf_ratio(10, &c), 0.5);
        assert_eq!(tf_ratio(5, &c), 0.75);
    }

    #[test]
    fn early_stop_cases() {
        assert!(!early_stop(&[5.0, 4.0, 3.0, 2.0, 1.0], 3));
        assert!(early_stop(&[1.0; 4], 3));
        assert!(!early_stop(&[1.0; 3], 3));
        let h = [1.0, 0.9, 0.91, 0.92, 0.93];
        let first = (1..=h.len()).find(|&n| early_stop(&h[..n], 3));
        assert_eq!(first, Some(5));
        assert!(!early_stop(&[], 1));
    }

    proptest! {
        #[test]
        fn lr_non_increasing(total in 1usize..5000) {
            let c = cfg(total);
            let mut prev = f64::INFINITY;
            for s in (0..=total).step_by((total / 97).max(1)) {
                let lr = cosine_lr(s, &c);
                prop_assert!(lr <= prev);
                prev = lr;
            }
        }

        #[test]
        fn tf_monotone_between_endpoints(total in 1usize..5000, s in 0usize..6000) {
            let c = cfg(total);
            let r = tf_ratio(s, &c);
            prop_assert!((0.5..=1.0).contains(&r));
            prop_assert!(tf_ratio(s + 1, &c) <= r);
        }
    }
}
