use crate::tensor::{ParamStore, Real, Tensor};

use super::{Result, TrainError};

/// Global L2 norm of all trainable gradients; when it exceeds `threshold`
/// every gradient is scaled by `threshold / norm`. Returns the norm before
/// clipping.
pub fn clip_gradients(params: &mut ParamStore, threshold: f64) -> Result<f64> {
    let mut sq = 0.0f64;
    for (_, p) in params.iter().filter(|(_, p)| p.trainable) {
        let s: f64 = p.grad.data().iter().map(|&g| (g as f64) * (g as f64)).sum();
        if !s.is_finite() {
            return Err(TrainError::NonFiniteGradient(p.name.clone()));
        }
        sq += s;
    }
    let norm = sq.sqrt();
    if norm > threshold {
        let scale = (threshold / norm) as Real;
        for p in params.iter_mut().filter(|p| p.trainable) {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= scale);
        }
    }
    Ok(norm)
}

/// Global L2 norm of the trainable gradients.
pub fn grad_norm(params: &ParamStore) -> f64 {
    params
        .iter()
        .filter(|(_, p)| p.trainable)
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub t: u64,
    /// First and second moments, one per trainable parameter in store
    /// order.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as Real, self.beta2 as Real);
        let step = (lr / c1) as Real;
        let c2 = c2 as Real;
        let eps = self.eps as Real;
        for ((p, m), v) in params
            .iter_mut()
            .filter(|p| p.trainable)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let (w, g) = (p.value.data_mut(), p.grad.data());
            for i in 0..w.len() {
                let gi = g[i];
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (1.0 - b1) * gi;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                w[i] -= step * *mi / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}
