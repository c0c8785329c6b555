//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{Padding, PoolKind};
use super::tape::{OpKind, Tape, Var};
use super::{Real, Shape, Tensor};
use crate::error::Result;

pub type BuildFn<T> = Box<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var> + Send + Sync>;

/// One gradient-check instance: differentiable inputs plus a scalar-valued graph over them.
pub struct GradCase<T: Real> {
    pub name: String,
    pub inputs: Vec<Tensor<T>>,
    pub build: BuildFn<T>,
    /// Check at most this many coordinates per input (all when `None`).
    pub max_coords: Option<usize>,
}

impl<T: Real> GradCase<T> {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor<T>>,
        build: impl Fn(&mut Tape<T>, &[Var]) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        GradCase {
            name: name.into(),
            inputs,
            build: Box::new(build),
            max_coords: None,
        }
    }

    pub fn sampled(mut self, max_coords: usize) -> Self {
        self.max_coords = Some(max_coords);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckResult {
    pub name: String,
    /// ||analytic - numeric|| / max(||analytic||, ||numeric||) over checked coordinates.
    pub rel_error: f64,
    /// Coordinates compared.
    pub coords: usize,
    /// Coordinates left out because the difference stencil crossed a ReLU or
    /// max-pool kink, where the one-sided slopes disagree.
    pub skipped: usize,
}

/// Compare the tape gradient of `case` against central differences with the given step.
///
/// A coordinate is compared only when both perturbed evaluations take the
/// same ReLU and max-pool branches as the unperturbed one; elsewhere the
/// central difference averages two different slopes and says nothing about
/// the backward rule.
pub fn check<T: Real>(case: &GradCase<T>, step: f64, fault: Option<OpKind>, seed: u64) -> Result<GradCheckResult> {
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = (case.build)(&mut tape, &vars)?;
    let base = tape.branch_signature();
    let grads = tape.backward(loss)?;

    let eval = |inputs: &[Tensor<T>]| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
        let l = (case.build)(&mut t, &vs)?;
        Ok((t.scalar(l).to_f64(), t.branch_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = case.inputs.clone();
    let (mut diff2, mut a2, mut n2) = (0.0f64, 0.0f64, 0.0f64);
    let (mut coords, mut skipped) = (0usize, 0usize);
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var, &tape)?;
        let len = inputs[k].len();
        let picks: Vec<usize> = match case.max_coords {
            Some(m) if m < len => {
                let mut v = sample(&mut rng, len, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..len).collect(),
        };
        for i in picks {
            let orig = inputs[k].data()[i];
            inputs[k].data_mut()[i] = T::from_f64(orig.to_f64() + step);
            let (plus, sp) = eval(&inputs)?;
            inputs[k].data_mut()[i] = T::from_f64(orig.to_f64() - step);
            let (minus, sm) = eval(&inputs)?;
            inputs[k].data_mut()[i] = orig;
            if sp != base || sm != base {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.data()[i].to_f64();
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
            coords += 1;
        }
    }
    let scale = a2.sqrt().max(n2.sqrt());
    let rel_error = if scale < 1e-12 { diff2.sqrt() } else { diff2.sqrt() / scale };
    Ok(GradCheckResult {
        name: case.name.clone(),
        rel_error,
        coords,
        skipped,
    })
}

/// Uniform values in [-1, 1).
pub fn random_tensor<T: Real>(rng: &mut impl Rng, shape: Shape) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-1.0..1.0)))
}

/// Uniform values in [-1, 1) kept at least `margin` away from zero, so a
/// finite-difference step cannot cross a ReLU kink.
pub fn random_tensor_away_from_zero<T: Real>(rng: &mut impl Rng, shape: Shape, margin: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(margin..1.0);
        T::from_f64(if rng.random_bool(0.5) { v } else { -v })
    })
}

/// Distinct values spaced at least `gap` apart, in random order, so max
/// pooling has a stable winner under small perturbations.
pub fn random_distinct_tensor<T: Real>(rng: &mut impl Rng, shape: Shape, gap: f64) -> Tensor<T> {
    let n = shape.numel();
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    let span = gap * n as f64;
    Tensor::from_fn(shape, |i| T::from_f64(order[i] as f64 * gap - span / 2.0))
}

/// Gradient cases for every primitive tape operation in isolation.
pub fn primitive_cases<T: Real>(seed: u64) -> Vec<GradCase<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();

    let s = Shape::new(2, 3, 5, 4);
    let target: Tensor<T> = random_tensor(&mut rng, s);
    let t = target.clone();
    cases.push(GradCase::new(
        "relu",
        vec![random_tensor_away_from_zero(&mut rng, s, 0.05)],
        move |tape, v| {
            let y = tape.relu(v[0])?;
            let c = tape.constant(t.clone());
            tape.mse(y, c)
        },
    ));
    let t = target.clone();
    cases.push(GradCase::new(
        "sigmoid",
        vec![random_tensor::<T>(&mut rng, s).map(|v| v * T::from_f64(3.0))],
        move |tape, v| {
            let y = tape.sigmoid(v[0])?;
            let c = tape.constant(t.clone());
            tape.mse(y, c)
        },
    ));
    let t = target.clone();
    cases.push(GradCase::new(
        "add",
        vec![random_tensor(&mut rng, s), random_tensor(&mut rng, s)],
        move |tape, v| {
            let y = tape.add(v[0], v[1])?;
            let c = tape.constant(t.clone());
            tape.mse(y, c)
        },
    ));
    let t = target.clone();
    cases.push(GradCase::new("scale", vec![random_tensor(&mut rng, s)], move |tape, v| {
        let y = tape.scale(v[0], T::from_f64(-1.7))?;
        let c = tape.constant(t.clone());
        tape.mse(y, c)
    }));
    cases.push(GradCase::new(
        "mse",
        vec![random_tensor(&mut rng, s), random_tensor(&mut rng, s)],
        |tape, v| tape.mse(v[0], v[1]),
    ));

    let cat_target: Tensor<T> = random_tensor(&mut rng, Shape::new(2, 6, 3, 3));
    cases.push(GradCase::new(
        "concat_channels",
        vec![
            random_tensor(&mut rng, Shape::new(2, 1, 3, 3)),
            random_tensor(&mut rng, Shape::new(2, 3, 3, 3)),
            random_tensor(&mut rng, Shape::new(2, 2, 3, 3)),
        ],
        move |tape, v| {
            let y = tape.concat_channels(v)?;
            let c = tape.constant(cat_target.clone());
            tape.mse(y, c)
        },
    ));
    let slice_target: Tensor<T> = random_tensor(&mut rng, Shape::new(2, 2, 5, 4));
    cases.push(GradCase::new("slice_channels", vec![random_tensor(&mut rng, s)], move |tape, v| {
        let y = tape.slice_channels(v[0], 1, 2)?;
        let c = tape.constant(slice_target.clone());
        tape.mse(y, c)
    }));

    for kind in [PoolKind::Avg, PoolKind::Max] {
        let gp_target: Tensor<T> = random_tensor(&mut rng, Shape::new(2, 3, 1, 1));
        let name = format!("global_pool_{}", pool_name(kind));
        cases.push(GradCase::new(name, vec![random_distinct_tensor(&mut rng, s, 0.02)], move |tape, v| {
            let y = tape.global_pool(v[0], kind)?;
            let c = tape.constant(gp_target.clone());
            tape.mse(y, c)
        }));
        let cp_target: Tensor<T> = random_tensor(&mut rng, Shape::new(2, 1, 5, 4));
        let name = format!("channel_pool_{}", pool_name(kind));
        cases.push(GradCase::new(name, vec![random_distinct_tensor(&mut rng, s, 0.02)], move |tape, v| {
            let y = tape.channel_pool(v[0], kind)?;
            let c = tape.constant(cp_target.clone());
            tape.mse(y, c)
        }));
    }

    for (name, map_shape) in [
        ("broadcast_mul_channel", Shape::new(2, 3, 1, 1)),
        ("broadcast_mul_pixel", Shape::new(2, 1, 5, 4)),
    ] {
        let t = target.clone();
        cases.push(GradCase::new(
            name,
            vec![random_tensor(&mut rng, s), random_tensor(&mut rng, map_shape)],
            move |tape, v| {
                let y = tape.broadcast_mul(v[0], v[1])?;
                let c = tape.constant(t.clone());
                tape.mse(y, c)
            },
        ));
    }

    let dense_target: Tensor<T> = random_tensor(&mut rng, Shape::new(3, 4, 1, 1));
    cases.push(GradCase::new(
        "dense",
        vec![
            random_tensor(&mut rng, Shape::new(3, 5, 1, 1)),
            random_tensor(&mut rng, Shape::new(4, 5, 1, 1)),
            random_tensor(&mut rng, Shape::new(4, 1, 1, 1)),
        ],
        move |tape, v| {
            let y = tape.dense(v[0], v[1], v[2])?;
            let c = tape.constant(dense_target.clone());
            tape.mse(y, c)
        },
    ));

    for k in [3usize, 4, 5, 7] {
        let conv_target: Tensor<T> = random_tensor(&mut rng, Shape::new(2, 2, 6, 5));
        cases.push(GradCase::new(
            format!("conv2d_{k}x{k}"),
            vec![
                random_tensor(&mut rng, Shape::new(2, 3, 6, 5)),
                random_tensor(&mut rng, Shape::new(2, 3, k, k)),
                random_tensor(&mut rng, Shape::new(2, 1, 1, 1)),
            ],
            move |tape, v| {
                let y = tape.conv2d(v[0], v[1], v[2], Padding::same(k, k))?;
                let c = tape.constant(conv_target.clone());
                tape.mse(y, c)
            },
        ));
    }
    let conv_target: Tensor<T> = random_tensor(&mut rng, Shape::new(1, 2, 3, 5));
    cases.push(GradCase::new(
        "conv2d_asymmetric",
        vec![
            random_tensor(&mut rng, Shape::new(1, 2, 4, 4)),
            random_tensor(&mut rng, Shape::new(2, 2, 3, 2)),
            random_tensor(&mut rng, Shape::new(2, 1, 1, 1)),
        ],
        move |tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2], Padding::new(0, 1, 0, 2))?;
            let c = tape.constant(conv_target.clone());
            tape.mse(y, c)
        },
    ));
    let fused_target: Tensor<T> = random_tensor(&mut rng, Shape::new(2, 6, 5, 6));
    cases.push(GradCase::new(
        "conv2d_fused",
        vec![
            random_tensor(&mut rng, Shape::new(2, 2, 5, 6)),
            random_tensor(&mut rng, Shape::new(3, 2, 3, 3)),
            random_tensor(&mut rng, Shape::new(3, 1, 1, 1)),
            random_tensor(&mut rng, Shape::new(2, 2, 4, 4)),
            random_tensor(&mut rng, Shape::new(2, 1, 1, 1)),
            random_tensor(&mut rng, Shape::new(1, 2, 5, 5)),
            random_tensor(&mut rng, Shape::new(1, 1, 1, 1)),
        ],
        move |tape, v| {
            let y = tape.conv2d_fused(
                v[0],
                &[
                    (v[1], v[2], Padding::same(3, 3)),
                    (v[3], v[4], Padding::same(4, 4)),
                    (v[5], v[6], Padding::same(5, 5)),
                ],
            )?;
            let c = tape.constant(fused_target.clone());
            tape.mse(y, c)
        },
    ));
    cases
}

fn pool_name(kind: PoolKind) -> &'static str {
    match kind {
        PoolKind::Avg => "avg",
        PoolKind::Max => "max",
    }
}
