//! Central finite-difference verification of the tape's analytic gradients.
//!
//! Checks run entirely in `f64`: the perturbed forward passes only use op
//! forward evaluations, never the backward rules being verified.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{RunningStats, Tape, Tensor, Var};
use crate::error::Result;

/// Finite-difference step.
pub const EPS: f64 = 1e-4;
/// Maximum accepted relative error.
pub const TOLERANCE: f64 = 1e-3;
/// Denominator floor for the relative error so vanishing gradients compare
/// absolutely.
const REL_FLOOR: f64 = 1e-2;

/// A scalar-valued function of the input leaves, recorded on an f64 tape.
pub type ForwardFn = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

type Forward = Box<ForwardFn>;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub elements_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic and central-difference gradients of
/// `sum(f(inputs) ⊙ r)` for a fixed random projection `r`, with respect to
/// every element of every input.
pub fn check(op: &str, inputs: &[Tensor<f64>], f: &ForwardFn, seed: u64) -> Result<GradCheckReport> {
    let eval = |inputs: &[Tensor<f64>], want_grads: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let proj = Tensor::rand_uniform(tape.value(out).dims(), -1.0, 1.0, &mut rng);
        let proj = tape.constant(proj);
        let weighted = tape.mul(out, proj)?;
        let loss = tape.sum(weighted)?;
        let value = tape.value(loss).item()?;
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let mut grads = tape.backward(loss)?;
        let grads = vars
            .iter()
            .map(|&v| grads.take(v).expect("every input is a trainable leaf"))
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        for j in 0..probe[i].numel() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + EPS;
            let (plus, _) = eval(&probe, false)?;
            probe[i].data_mut()[j] = orig - EPS;
            let (minus, _) = eval(&probe, false)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * EPS);
            worst = worst.max(relative_error(grad.data()[j], numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        op: op.to_string(),
        max_rel_error: worst,
        elements_checked: checked,
    })
}

fn uniform(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(dims, -1.0, 1.0, rng)
}

/// Values bounded away from zero so kinks (relu, abs) are never straddled
/// by a finite-difference step.
fn off_kink(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| {
        let mag = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// The standard case list: every differentiable op on randomized tensors of
/// at most 64 elements.
pub fn standard_cases(seed: u64) -> Vec<(String, Vec<Tensor<f64>>, Forward)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases: Vec<(String, Vec<Tensor<f64>>, Forward)> = Vec::new();
    let mut add = |name: &str, inputs: Vec<Tensor<f64>>, f: Forward| cases.push((name.to_string(), inputs, f));

    add(
        "conv2d",
        vec![
            uniform(&[1, 2, 5, 5], &mut rng),
            uniform(&[3, 2, 3, 3], &mut rng),
            uniform(&[3], &mut rng),
        ],
        Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
    );
    add(
        "conv2d_k4s2p1",
        vec![uniform(&[2, 1, 4, 4], &mut rng), uniform(&[2, 1, 4, 4], &mut rng)],
        Box::new(|t, v| t.conv2d(v[0], v[1], None, 2, 1)),
    );
    add(
        "conv_transpose2d",
        vec![
            uniform(&[1, 3, 3, 3], &mut rng),
            uniform(&[3, 2, 3, 3], &mut rng),
            uniform(&[2], &mut rng),
        ],
        Box::new(|t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)),
    );
    add(
        "conv_transpose2d_k4s2p1",
        vec![uniform(&[2, 2, 2, 2], &mut rng), uniform(&[2, 1, 4, 4], &mut rng)],
        Box::new(|t, v| t.conv_transpose2d(v[0], v[1], None, 2, 1)),
    );
    add(
        "batch_norm2d_train",
        vec![uniform(&[2, 3, 3, 3], &mut rng), uniform(&[3], &mut rng), uniform(&[3], &mut rng)],
        Box::new(|t, v| {
            let mut stats = RunningStats::new(3);
            t.batch_norm2d(v[0], v[1], v[2], &mut stats, true)
        }),
    );
    add(
        "batch_norm2d_eval",
        vec![uniform(&[2, 3, 2, 2], &mut rng), uniform(&[3], &mut rng), uniform(&[3], &mut rng)],
        Box::new(|t, v| {
            let mut stats = RunningStats::new(3);
            stats.mean = vec![0.1, -0.2, 0.3];
            stats.var = vec![0.5, 1.5, 2.0];
            t.batch_norm2d(v[0], v[1], v[2], &mut stats, false)
        }),
    );
    add(
        "instance_norm2d",
        vec![uniform(&[2, 2, 3, 3], &mut rng), uniform(&[2], &mut rng), uniform(&[2], &mut rng)],
        Box::new(|t, v| t.instance_norm2d(v[0], v[1], v[2], 1e-5)),
    );
    add(
        "leaky_relu",
        vec![off_kink(&[2, 3, 2, 2], &mut rng)],
        Box::new(|t, v| t.leaky_relu(v[0], 0.2)),
    );
    add("relu", vec![off_kink(&[2, 3, 2, 2], &mut rng)], Box::new(|t, v| t.relu(v[0])));
    add("tanh", vec![uniform(&[2, 3, 2, 2], &mut rng)], Box::new(|t, v| t.tanh(v[0])));
    add("sigmoid", vec![uniform(&[2, 3, 2, 2], &mut rng)], Box::new(|t, v| t.sigmoid(v[0])));
    let drop_seed = rng.random::<u64>();
    add(
        "dropout",
        vec![uniform(&[4, 4, 2, 2], &mut rng)],
        Box::new(move |t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(drop_seed);
            t.dropout(v[0], 0.5, Some(&mut r))
        }),
    );
    add(
        "concat_channels",
        vec![uniform(&[2, 1, 3, 3], &mut rng), uniform(&[2, 2, 3, 3], &mut rng)],
        Box::new(|t, v| t.concat_channels(v[0], v[1])),
    );
    add(
        "add",
        vec![uniform(&[3, 4], &mut rng), uniform(&[3, 4], &mut rng)],
        Box::new(|t, v| t.add(v[0], v[1])),
    );
    add(
        "sub",
        vec![uniform(&[3, 4], &mut rng), uniform(&[3, 4], &mut rng)],
        Box::new(|t, v| t.sub(v[0], v[1])),
    );
    add(
        "mul",
        vec![uniform(&[3, 4], &mut rng), uniform(&[3, 4], &mut rng)],
        Box::new(|t, v| t.mul(v[0], v[1])),
    );
    add("scale", vec![uniform(&[3, 4], &mut rng)], Box::new(|t, v| t.scale(v[0], -2.5)));
    add("abs", vec![off_kink(&[3, 4], &mut rng)], Box::new(|t, v| t.abs(v[0])));
    add("sum", vec![uniform(&[3, 4], &mut rng)], Box::new(|t, v| t.sum(v[0])));
    add("mean", vec![uniform(&[3, 4], &mut rng)], Box::new(|t, v| t.mean(v[0])));
    add(
        "bce_with_logits_real",
        vec![Tensor::rand_uniform(&[2, 1, 3, 3], -4.0, 4.0, &mut rng)],
        Box::new(|t, v| t.bce_with_logits(v[0], 1.0)),
    );
    add(
        "bce_with_logits_fake",
        vec![Tensor::rand_uniform(&[2, 1, 3, 3], -4.0, 4.0, &mut rng)],
        Box::new(|t, v| t.bce_with_logits(v[0], 0.0)),
    );
    let (a, b) = (uniform(&[1, 3, 3, 3], &mut rng), off_kink(&[1, 3, 3, 3], &mut rng));
    let b = Tensor::from_fn(a.dims(), |i| a.data()[i] + b.data()[i]);
    add(
        "l1_mean",
        vec![a, b],
        Box::new(|t, v| {
            let d = t.sub(v[0], v[1])?;
            let a = t.abs(d)?;
            t.mean(a)
        }),
    );
    cases
}

/// Runs every standard case.
pub fn run_all(seed: u64) -> Result<Vec<GradCheckReport>> {
    standard_cases(seed)
        .into_iter()
        .enumerate()
        .map(|(i, (name, inputs, f))| check(&name, &inputs, f.as_ref(), seed.wrapping_add(i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::from_fn(&[4], |i| i as f64 + 1.0);
        let broken: &ForwardFn = &|t, v| {
            // value of x·x but gradient only sees one factor
            let c = t.constant(t.value(v[0]).clone());
            t.mul(v[0], c)
        };
        let report = check("broken", &[x], broken, 7).unwrap();
        assert!(!report.passed(), "{report:?}");
    }

    #[test]
    fn relative_error_floors_small_gradients() {
        assert!(relative_error(1e-9, 0.0) < 1e-6);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
