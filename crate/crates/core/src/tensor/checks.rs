//! Finite-difference verification of every layer primitive on small random
//! inputs. Shared by the test suite and the `gradcheck` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    gradient_check_with, BatchNormMode, ConvSpec, Graph, Real, Result, RunningStats, Tensor, Var,
};

pub const GRAD_EPS: Real = 1e-5;
pub const GRAD_TOLERANCE: Real = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: Real,
    pub passed: bool,
}

impl CheckRow {
    pub fn new(name: &str, err: Real) -> Self {
        Self {
            name: name.to_string(),
            max_rel_error: err,
            passed: err.is_finite() && err < GRAD_TOLERANCE,
        }
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n)
            .map(|_| rng.random_range(-1.0..1.0) as Real)
            .collect(),
    )
    .unwrap()
}

/// Values bounded away from zero so ReLU kinks stay outside `±eps`.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

/// Contracts an output with a fixed random tensor so every output
/// coordinate carries a distinct weight in the scalar.
fn project(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone().reshape(g.shape(out))?);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

type Primitive = (
    &'static str,
    Box<dyn Fn(&mut ChaCha8Rng, Option<&'static str>) -> Result<Real>>,
);

fn primitives() -> Vec<Primitive> {
    let mut v: Vec<Primitive> = Vec::new();
    v.push((
        "matmul",
        Box::new(|rng, fault| {
            let (a, b, r) = (
                random(&[3, 4], rng),
                random(&[4, 2], rng),
                random(&[3, 2], rng),
            );
            gradient_check_with(
                |g, x| {
                    let y = g.matmul(x[0], x[1])?;
                    project(g, y, &r)
                },
                &[a, b],
                GRAD_EPS,
                hook(fault),
            )
        }),
    ));
    v.push((
        "linear",
        Box::new(|rng, fault| {
            let (x, w, b, r) = (
                random(&[2, 5], rng),
                random(&[5, 3], rng),
                random(&[3], rng),
                random(&[2, 3], rng),
            );
            gradient_check_with(
                |g, v| {
                    let y = g.matmul(v[0], v[1])?;
                    let y = g.add_row(y, v[2])?;
                    project(g, y, &r)
                },
                &[x, w, b],
                GRAD_EPS,
                hook(fault),
            )
        }),
    ));
    v.push((
        "conv3d",
        Box::new(|rng, fault| {
            let spec = ConvSpec {
                kernel: [3, 3, 3],
                stride: [1, 2, 2],
                padding: [1, 0, 1],
                in_channels: 2,
                out_channels: 3,
            };
            let x = random(&[2, 3, 7, 6], rng);
            let w = random(&spec.weight_shape(), rng);
            let b = random(&[3], rng);
            let out = spec.output_dims([3, 7, 6])?;
            let r = random(&[3, out[0], out[1], out[2]], rng);
            gradient_check_with(
                |g, v| {
                    let y = g.conv3d(v[0], v[1], Some(v[2]), &spec)?;
                    project(g, y, &r)
                },
                &[x, w, b],
                GRAD_EPS,
                hook(fault),
            )
        }),
    ));
    v.push((
        "conv1d",
        Box::new(|rng, fault| {
            let spec = ConvSpec::conv1d(3, 4, 5, 2);
            let (x, w, b, r) = (
                random(&[3, 7], rng),
                random(&[4, 3, 5], rng),
                random(&[4], rng),
                random(&[4, 7], rng),
            );
            gradient_check_with(
                |g, v| {
                    let y = g.conv1d(v[0], v[1], Some(v[2]), &spec)?;
                    project(g, y, &r)
                },
                &[x, w, b],
                GRAD_EPS,
                hook(fault),
            )
        }),
    ));
    v.push((
        "maxpool3d",
        Box::new(|rng, fault| {
            let x = random(&[2, 2, 6, 7], rng);
            let r = random(&[2, 2, 3, 3], rng);
            gradient_check_with(
                |g, v| {
                    let y = g.maxpool3d(v[0], [1, 2, 2], [1, 2, 2])?;
                    project(g, y, &r)
                },
                &[x],
                GRAD_EPS,
                hook(fault),
            )
        }),
    ));
    v.push((
        "batchnorm_train",
        Box::new(|rng, fault| {
            let (x, gamma, beta, r) = (
                random(&[3, 2, 4], rng),
                random(&[3], rng),
                random(&[3], rng),
                random(&[3, 2, 4], rng),
            );
            gradient_check_with(
                |g, v| {
                    let mut stats = RunningStats::new(3);
                    let y = g.batchnorm(v[0], v[1], v[2], BatchNormMode::Train, &mut stats)?;
                    project(g, y, &r)
                },
                &[x, gamma, beta],
                GRAD_EPS,
                hook(fault),
            )
        }),
    ));
    v.push((
        "lstm_cell",
        Box::new(|rng, fault| {
            let (x, h, c) = (
                random(&[2, 3], rng),
                random(&[2, 4], rng),
                random(&[2, 4], rng),
            );
            let (wi, wh, b) = (
                random(&[3, 16], rng),
                random(&[4, 16], rng),
                random(&[16], rng),
            );
            gradient_check_with(
                |g, v| {
                    let (h1, c1) = g.lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5])?;
                    let hh = g.mul(h1, h1)?;
                    let a = g.sum(hh);
                    let cs = g.sum(c1);
                    g.add(a, cs)
                },
                &[x, h, c, wi, wh, b],
                GRAD_EPS,
                hook(fault),
            )
        }),
    ));
    v.push((
        "activations",
        Box::new(|rng, fault| {
            let x = away_from_zero(&[3, 5], rng);
            let r = random(&[3, 5], rng);
            gradient_check_with(
                |g, v| {
                    let a = g.relu(v[0]);
                    let b = g.tanh(v[0]);
                    let c = g.sigmoid(v[0]);
                    let d = g.softmax(v[0]);
                    let s = g.add(a, b)?;
                    let s = g.add(s, c)?;
                    let s = g.add(s, d)?;
                    project(g, s, &r)
                },
                &[x],
                GRAD_EPS,
                hook(fault),
            )
        }),
    ));
    v
}

fn hook(fault: Option<&'static str>) -> impl Fn(&mut Graph) {
    move |g: &mut Graph| {
        if let Some(kind) = fault {
            g.inject_fault(kind);
        }
    }
}

/// Names of the primitives covered by [`primitive_suite`], in run order.
pub fn primitive_names() -> Vec<&'static str> {
    primitives().into_iter().map(|(n, _)| n).collect()
}

/// Gradient-checks every primitive. `fault` names an op kind whose backward
/// rule is deliberately corrupted (see [`Graph::inject_fault`]).
pub fn primitive_suite(seed: u64, fault: Option<&'static str>) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for (i, (name, check)) in primitives().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        rows.push(CheckRow::new(name, check(&mut rng, fault)?));
    }
    Ok(rows)
}
