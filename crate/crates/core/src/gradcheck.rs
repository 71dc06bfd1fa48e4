//! Central finite-difference checks of the tape's reverse-mode gradients.
//!
//! Every case builds a small random instance of one operation in `f64`,
//! reduces its output to a scalar with random weights, and compares the
//! analytic gradient of every leaf against `(f(x + h) - f(x - h)) / 2h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::{Architecture, CnnClassifier};
use crate::composition::{compose_tape, Strategy};
use crate::dataset::DataKind;
use crate::error::Result;
use crate::tensor::{ConvSpec, FrameGeom, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;

/// Operations with a gradient case, in report order.
pub const OPS: [&str; 16] = [
    "conv2d",
    "conv3d",
    "max_pool2d",
    "global_avg_pool",
    "linear",
    "relu",
    "sigmoid",
    "softmax_cross_entropy",
    "frame",
    "resize_bilinear",
    "crop",
    "compose:vanilla",
    "compose:frame-resize",
    "compose:resize-frame",
    "compose:occlude",
    "compose:clip",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Outcome {
    /// Relative error `|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)`.
    Checked(f64),
    /// The numeric estimate itself moves with the step size: the instance
    /// straddles a non-differentiable point and says nothing about the code.
    NearKink,
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Compares analytic and numeric gradients of `build` with respect to every input.
pub fn check(build: &Build<'_>, inputs: &[Tensor<f64>], step: f64) -> Result<Outcome> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|&v| grads.take(v).map(Tensor::into_data).unwrap_or_default())
        .collect();

    let eval = |which: usize, at: usize, delta: f64| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut t = t.clone();
                if i == which {
                    t.data_mut()[at] += delta;
                }
                tape.constant(t)
            })
            .collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };
    let numeric_with = |h: f64| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(analytic.len());
        for (i, t) in inputs.iter().enumerate() {
            for j in 0..t.len() {
                out.push((eval(i, j, h)? - eval(i, j, -h)?) / (2.0 * h));
            }
        }
        Ok(out)
    };
    let numeric = numeric_with(step)?;
    let err = relative_error(&analytic, &numeric);
    if err <= 1e-4 {
        return Ok(Outcome::Checked(err));
    }
    let finer = numeric_with(step / 10.0)?;
    if relative_error(&numeric, &finer) > 1e-4 {
        return Ok(Outcome::NearKink);
    }
    Ok(Outcome::Checked(err))
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

fn unit(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()).expect("positive extents")
}

/// Reduces `y` to a scalar with fixed random weights.
fn project(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    tape.weighted_sum(y, weights)
}

/// Runs the case for `op` on the instance drawn from `seed`.
pub fn check_op(op: &str, seed: u64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    match op {
        "conv2d" => {
            let (n, c, o) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=3));
            let k = [1, 2, 3][r.random_range(0..3)];
            let (stride, pad) = (r.random_range(1..=2), r.random_range(0..=1));
            let (h, w) = (r.random_range(k..=6), r.random_range(k..=6));
            let inputs = [random(r, &[n, c, h, w], 1.0), random(r, &[o, c, k, k], 1.0), random(r, &[o], 1.0)];
            let oh = (h + 2 * pad - k) / stride + 1;
            let ow = (w + 2 * pad - k) / stride + 1;
            let wts = random(r, &[n, o, oh, ow], 1.0);
            check(&|t, v| {
                let y = t.conv2d(v[0], v[1], v[2], stride, pad)?;
                project(t, y, &wts)
            }, &inputs, STEP)
        }
        "conv3d" => {
            let (c, o) = (r.random_range(1..=2), r.random_range(1..=2));
            let (kt, k) = (r.random_range(1..=2), r.random_range(1..=3));
            let spec = ConvSpec::volumetric([1, r.random_range(1..=2), r.random_range(1..=2)], [r.random_range(0..=1), 1, 0]);
            let (d, h, w) = (r.random_range(kt..=3), r.random_range(k..=5), r.random_range(k..=5));
            let inputs = [random(r, &[1, c, d, h, w], 1.0), random(r, &[o, c, kt, k, k], 1.0), random(r, &[o], 1.0)];
            let out = |len: usize, i: usize, kk: usize| (len + 2 * spec.padding[i] - kk) / spec.stride[i] + 1;
            let wts = random(r, &[1, o, out(d, 0, kt), out(h, 1, k), out(w, 2, k)], 1.0);
            check(&|t, v| {
                let y = t.conv3d(v[0], v[1], v[2], spec)?;
                project(t, y, &wts)
            }, &inputs, STEP)
        }
        "max_pool2d" => {
            let k = r.random_range(1..=3);
            let (n, c, h, w) = (r.random_range(1..=2), r.random_range(1..=2), r.random_range(k..=7), r.random_range(k..=7));
            let inputs = [random(r, &[n, c, h, w], 1.0)];
            let wts = random(r, &[n, c, h / k, w / k], 1.0);
            check(&|t, v| {
                let y = t.max_pool2d(v[0], k)?;
                project(t, y, &wts)
            }, &inputs, STEP)
        }
        "global_avg_pool" => {
            let mut shape = vec![r.random_range(1..=3), r.random_range(1..=3)];
            for _ in 0..r.random_range(1..=3) {
                shape.push(r.random_range(1..=4));
            }
            let wts = random(r, &shape[..2], 1.0);
            let inputs = [random(r, &shape, 1.0)];
            check(&|t, v| {
                let y = t.global_avg_pool(v[0])?;
                project(t, y, &wts)
            }, &inputs, STEP)
        }
        "linear" => {
            let (n, i, o) = (r.random_range(1..=4), r.random_range(1..=6), r.random_range(1..=5));
            let inputs = [random(r, &[n, i], 1.0), random(r, &[o, i], 1.0), random(r, &[o], 1.0)];
            let wts = random(r, &[n, o], 1.0);
            check(&|t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                project(t, y, &wts)
            }, &inputs, STEP)
        }
        "relu" | "sigmoid" => {
            let shape = [r.random_range(1..=4), r.random_range(1..=6)];
            let inputs = [random(r, &shape, 4.0)];
            let wts = random(r, &shape, 1.0);
            let relu = op == "relu";
            check(&|t, v| {
                let y = if relu { t.relu(v[0])? } else { t.sigmoid(v[0])? };
                project(t, y, &wts)
            }, &inputs, STEP)
        }
        "softmax_cross_entropy" => {
            let (n, c) = (r.random_range(1..=5), r.random_range(2..=6));
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
            let inputs = [random(r, &[n, c], 3.0)];
            check(&|t, v| t.softmax_cross_entropy(v[0], &labels), &inputs, STEP)
        }
        "frame" => {
            let clip = r.random_bool(0.5);
            let channels = if r.random_bool(0.5) { 3 } else { 1 };
            let geom = FrameGeom {
                width: r.random_range(1..=2),
                interior_h: r.random_range(1..=4),
                interior_w: r.random_range(1..=4),
                channels,
            };
            let mut shape = vec![r.random_range(1..=2), 3];
            if clip {
                shape.push(r.random_range(1..=3));
            }
            shape.extend([geom.interior_h, geom.interior_w]);
            let mut out = shape.clone();
            let (oh, ow) = geom.outer();
            let rank = out.len();
            out[rank - 2] = oh;
            out[rank - 1] = ow;
            let inputs = [unit(r, &shape), unit(r, &[geom.border_len()])];
            let wts = random(r, &out, 1.0);
            check(&|t, v| {
                let y = t.frame(v[0], v[1], geom)?;
                project(t, y, &wts)
            }, &inputs, STEP)
        }
        "resize_bilinear" => {
            let (c, h, w) = (r.random_range(1..=3), r.random_range(1..=7), r.random_range(1..=7));
            let (oh, ow) = (r.random_range(1..=9), r.random_range(1..=9));
            let inputs = [unit(r, &[1, c, h, w])];
            let wts = random(r, &[1, c, oh, ow], 1.0);
            check(&|t, v| {
                let y = t.resize_bilinear(v[0], oh, ow)?;
                project(t, y, &wts)
            }, &inputs, STEP)
        }
        "crop" => {
            let (h, w) = (r.random_range(1..=6), r.random_range(1..=6));
            let (ch, cw) = (r.random_range(1..=h), r.random_range(1..=w));
            let (top, left) = (r.random_range(0..=h - ch), r.random_range(0..=w - cw));
            let inputs = [unit(r, &[1, 2, h, w])];
            let wts = random(r, &[1, 2, ch, cw], 1.0);
            check(&|t, v| {
                let y = t.crop(v[0], (top, left), (ch, cw))?;
                project(t, y, &wts)
            }, &inputs, STEP)
        }
        _ => {
            let Some(name) = op.strip_prefix("compose:") else {
                return Err(crate::Error::InvalidArgument(format!("no gradient case for {op:?}")));
            };
            compose_case(name, r)
        }
    }
}

/// Framing parameters through sigmoid, composition and a small classifier
/// into the attack loss, with gradients taken for the parameters and inputs.
fn compose_case(name: &str, r: &mut ChaCha8Rng) -> Result<Outcome> {
    let clip = name == "clip";
    let strategy: Strategy = if clip { Strategy::Vanilla } else { name.parse()? };
    let width = r.random_range(1..=2);
    let (h, w) = (r.random_range(5..=8), r.random_range(5..=8));
    let classes = 3;
    let kind = if clip { DataKind::Clip } else { DataKind::Image };
    let model = CnnClassifier::init(Architecture::with_widths(kind, classes, [3, 3, 4, 4]), r.random());
    let (ih, iw) = strategy.framing_interior(width, (h, w))?;
    let geom = FrameGeom { width, interior_h: ih, interior_w: iw, channels: 3 };
    let n = r.random_range(1..=2);
    let mut shape = vec![n, 3];
    if clip {
        shape.push(r.random_range(2..=3));
    }
    shape.extend([h, w]);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
    let untargeted = r.random_bool(0.5);
    let inputs = [unit(r, &shape), random(r, &[geom.border_len()], 2.0)];
    check(&|t, v| {
        let border = t.sigmoid(v[1])?;
        let x = compose_tape(t, v[0], border, geom, strategy)?;
        let logits = model.forward_tape(t, x, false)?.logits;
        let ce = t.softmax_cross_entropy(logits, &labels)?;
        if untargeted {
            t.scale(ce, -1.0)
        } else {
            Ok(ce)
        }
    }, &inputs, STEP)
}

/// Result of running one operation over many seeded instances.
#[derive(Clone, Debug, PartialEq)]
pub struct OpSummary {
    pub op: &'static str,
    pub checked: usize,
    pub near_kink: usize,
    pub worst: f64,
}

/// Checks `op` until `instances` non-kink instances have been compared
/// (seeds `base, base + 1, ...`), giving up after `4 * instances` draws.
pub fn run_op(op: &'static str, instances: usize, base: u64) -> Result<OpSummary> {
    let mut s = OpSummary { op, checked: 0, near_kink: 0, worst: 0.0 };
    let mut seed = base;
    while s.checked < instances && seed < base + 4 * instances as u64 {
        match check_op(op, seed)? {
            Outcome::Checked(e) => {
                s.checked += 1;
                s.worst = s.worst.max(e);
            }
            Outcome::NearKink => s.near_kink += 1,
        }
        seed += 1;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrong_gradient_is_detected() {
        // y = x^2 via linear(x, x) but with the input duplicated as a constant:
        // the analytic gradient only sees one factor.
        let x = Tensor::new(vec![1, 1], vec![1.5]).unwrap();
        let out = check(
            &|t, v| {
                let c = t.constant(Tensor::new(vec![1, 1], vec![t.value(v[0]).item()]).unwrap());
                let b = t.constant(Tensor::zeros(&[1]));
                let y = t.linear(v[0], c, b)?;
                t.sum(y)
            },
            &[x],
            STEP,
        )
        .unwrap();
        match out {
            Outcome::Checked(e) => assert!(e > 0.1),
            Outcome::NearKink => panic!("smooth function flagged as kink"),
        }
    }

    #[test]
    fn every_op_has_a_case() {
        for op in OPS {
            check_op(op, 0).unwrap();
        }
    }
}
