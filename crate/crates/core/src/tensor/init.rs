use rand::Rng;

use super::{Real, Tensor};

/// How fan-in and fan-out are read off a weight shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightLayout {
    /// `in × out`, applied as `x · W`.
    Linear,
    /// `out × in × k…`; the receptive field multiplies both fans.
    Conv,
}

impl WeightLayout {
    pub fn fans(self, shape: &[usize]) -> (usize, usize) {
        match self {
            WeightLayout::Linear => (shape[0], shape.get(1).copied().unwrap_or(1)),
            WeightLayout::Conv => {
                let rf: usize = shape[2..].iter().product();
                (shape[1] * rf, shape[0] * rf)
            }
        }
    }
}

/// Xavier-uniform initialization: samples from `±gain·√(6/(fan_in+fan_out))`.
pub fn xavier_uniform<R: Rng>(
    shape: &[usize],
    layout: WeightLayout,
    gain: Real,
    rng: &mut R,
) -> Tensor {
    let (fan_in, fan_out) = layout.fans(shape);
    let bound = gain * (6.0 / (fan_in + fan_out) as Real).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            (2.0 * u as Real - 1.0) * bound
        })
        .collect();
    Tensor::new(shape, data).expect("shape product matches sample count")
}
