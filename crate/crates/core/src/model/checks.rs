//! Finite-difference check of the whole network on a micro instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{teacher_forced, Bound, Mode, Model, ModelConfig, Result};
use crate::tensor::checks::CheckRow;
use crate::tensor::{gradient_check_per_param, Graph, Real, Tensor};

/// Finite-difference step for the whole-network check. Thirteen layers of
/// rounding put a floor near 1e-16 under every evaluation of the scalar; at
/// a step of 1e-5 that floor is already 1e-11 in the derivative, which is the
/// size of the smallest true gradient coordinates. Truncation error at this
/// step stays below 1e-9 relative.
pub const FULL_MODEL_EPS: Real = 1e-4;

/// Micro model plus a random input clip of `n` encoder positions (the last
/// one being the all-ones period frame) and an `m`-frame target.
pub fn micro_instance(seed: u64, n: usize, m: usize) -> Result<(Model, Tensor, Tensor)> {
    micro_instance_with(ModelConfig::micro(), seed, n, m)
}

/// [`micro_instance`] for an arbitrary (small) configuration.
pub fn micro_instance_with(
    mut cfg: ModelConfig,
    seed: u64,
    n: usize,
    m: usize,
) -> Result<(Model, Tensor, Tensor)> {
    cfg.seed = seed;
    let mut model = Model::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Zero-initialized biases would put ReLU inputs exactly on the kink for
    // the all-zero go frame; give every hidden bias and shift a generic value.
    // Output biases stay zero so the outputs, and their rounding, stay small.
    for p in model.params.iter_mut() {
        let output_bias = p.name == "decoder.proj.bias"
            || p.name.starts_with("postnet.conv") && p.name.ends_with("bias");
        if (p.name.ends_with("bias") || p.name.ends_with("beta")) && !output_bias {
            for v in p.value.data_mut() {
                *v = rng.random_range(-0.1..0.1) as Real;
            }
        }
    }
    let c = &model.config;
    let side = c.frame_size;
    let per = side * side;
    let mut frames = Vec::with_capacity(n * per);
    for t in 0..n {
        for _ in 0..per {
            frames.push(if t + 1 == n {
                1.0
            } else {
                rng.random_range(0.0..1.0) as Real
            });
        }
    }
    let frames = Tensor::new(&[1, n, side, side], frames)?;
    let target = Tensor::new(
        &[m, c.mel_channels],
        (0..m * c.mel_channels)
            .map(|_| rng.random_range(-2.0..1.0) as Real)
            .collect(),
    )?;
    Ok((model, frames, target))
}

/// Max relative error of the output gradients with respect to every
/// trainable parameter of the micro instance (running batch-norm
/// statistics, full teacher forcing). `fault` corrupts one op kind's
/// backward rule.
pub fn full_model_check(seed: u64, fault: Option<&'static str>) -> Result<CheckRow> {
    full_model_check_with(ModelConfig::micro(), seed, fault)
}

/// [`full_model_check`] on a caller-supplied configuration; dropout is
/// switched off.
pub fn full_model_check_with(
    cfg: ModelConfig,
    seed: u64,
    fault: Option<&'static str>,
) -> Result<CheckRow> {
    let rows = full_model_errors_with(cfg, seed, fault)?;
    let worst = rows.iter().fold(
        0.0,
        |m: Real, (_, e)| if e.is_nan() || *e > m { *e } else { m },
    );
    Ok(CheckRow::new("full_model", worst))
}

/// Worst relative error per parameter tensor of the micro instance.
///
/// The checked scalar is a fixed random projection of both decoder outputs,
/// taken relative to their values at the unperturbed parameters. Keeping it
/// near zero keeps rounding in the final sum far below the perturbation
/// signal, which a loss of order one would swamp for the smallest gradients.
pub fn full_model_errors(seed: u64, fault: Option<&'static str>) -> Result<Vec<(String, Real)>> {
    full_model_errors_with(ModelConfig::micro(), seed, fault)
}

fn full_model_errors_with(
    mut cfg: ModelConfig,
    seed: u64,
    fault: Option<&'static str>,
) -> Result<Vec<(String, Real)>> {
    cfg.encoder_dropout = 0.0;
    cfg.prenet_dropout = 0.0;
    let (mut model, frames, target) = micro_instance_with(cfg, seed, 3, 2)?;
    let cfg = model.config.clone();
    let stats = model.stats.clone();
    let forward = |g: &mut Graph,
                   ps: &crate::tensor::ParamStore|
     -> Result<(crate::tensor::Var, crate::tensor::Var)> {
        let p = Bound::bind(g, &cfg, ps)?;
        let mut st = stats.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tf = teacher_forced(
            g,
            &cfg,
            &p,
            &mut st,
            &frames,
            &target,
            1.0,
            Mode::Eval,
            &mut rng,
        )?;
        Ok((tf.o_dec, tf.o_post))
    };
    let (base_dec, base_post) = {
        let mut g = Graph::new();
        let (d, p) = forward(&mut g, &model.params)?;
        (g.value(d).clone(), g.value(p).clone())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xface);
    let mut weights = || {
        let data = (0..base_dec.len())
            .map(|_| rng.random_range(-1.0..1.0) as Real)
            .collect();
        Tensor::new(base_dec.shape(), data)
    };
    let (w_dec, w_post) = (weights()?, weights()?);
    let f = |g: &mut Graph,
             ps: &crate::tensor::ParamStore|
     -> crate::tensor::Result<crate::tensor::Var> {
        if let Some(kind) = fault {
            g.inject_fault(kind);
        }
        let mut run = || -> Result<crate::tensor::Var> {
            let (d, p) = forward(g, ps)?;
            let mut terms = Vec::with_capacity(2);
            for (out, base, w) in [(d, &base_dec, &w_dec), (p, &base_post, &w_post)] {
                let base = g.constant(base.clone());
                let w = g.constant(w.clone());
                let delta = g.sub(out, base)?;
                let weighted = g.mul(delta, w)?;
                terms.push(g.sum(weighted));
            }
            Ok(g.add(terms[0], terms[1])?)
        };
        run().map_err(|e| match e {
            super::ModelError::Tensor(t) => t,
            other => crate::tensor::TensorError::Config(other.to_string()),
        })
    };
    Ok(gradient_check_per_param(
        &mut model.params,
        f,
        FULL_MODEL_EPS,
    )?)
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let row = full_model_check(3, None).unwrap();
        assert!(row.passed, "max relative error {}", row.max_rel_error);
    }

    #[test]
    fn corrupted_lstm_rule_is_caught() {
        let row = full_model_check(3, Some("lstm")).unwrap();
        assert!(!row.passed);
    }
}
