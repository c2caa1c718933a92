//! Central finite-difference checks of every backward pass, in f64.
//!
//! Each op is checked on several random instances. The scalar probed is
//! `sum(R * f(inputs))` for a fixed random `R` (the loss itself for
//! `softmax_xent`), and every input element is perturbed by `+-h`. The error
//! reported per element is `|analytic - numeric| / max(|analytic|,
//! |numeric|, 1e-6)`; an op passes when the maximum over all its instances
//! stays within tolerance.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::{AgeMode, ModelConfig, Network, Tape};
use crate::ops::{self, ConvGrads, ConvSpec, Mode, RunningStats};
use crate::rng::{Rng, Stream, StreamRng};
use crate::tensor::{Init, Tensor};

pub const STEP: f64 = 1e-3;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
const FLOOR: f64 = 1e-6;

pub type ConvBackward = fn(&Tensor<f64>, &Tensor<f64>, &Tensor<f64>, &ConvSpec) -> Result<ConvGrads<f64>>;

/// Backward implementations under test; swappable so a deliberately broken
/// one can demonstrate that the harness catches it.
#[derive(Clone, Copy)]
pub struct Backwards {
    pub conv3d: ConvBackward,
}

impl Default for Backwards {
    fn default() -> Self {
        Self {
            conv3d: ops::conv3d_backward::<f64>,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Draws rejected for straddling a non-differentiable point.
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<16} instances={:<3} skipped={:<3} max_rel_err={:.3e} tol={:.0e} {}",
            self.name,
            self.instances,
            self.skipped,
            self.max_rel_error,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_error(a, n)).fold(0.0, f64::max)
}

fn uniform(shape: &[usize], r: &mut StreamRng) -> Tensor<f64> {
    Tensor::init(Init::Uniform(-1.0, 1.0), shape, r).expect("valid shape")
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Central differences of `f` with respect to every element of `inputs[which]`.
fn numeric_grad(inputs: &[Tensor<f64>], which: usize, f: &dyn Fn(&[Tensor<f64>]) -> f64) -> Vec<f64> {
    let mut work = inputs.to_vec();
    (0..inputs[which].len())
        .map(|i| {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + STEP;
            let up = f(&work);
            work[which].data_mut()[i] = orig - STEP;
            let down = f(&work);
            work[which].data_mut()[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// Compare analytic gradients (one per input) with central differences.
fn compare(inputs: &[Tensor<f64>], analytic: &[Tensor<f64>], f: &dyn Fn(&[Tensor<f64>]) -> f64) -> f64 {
    analytic
        .iter()
        .enumerate()
        .map(|(i, a)| max_rel(a.data(), &numeric_grad(inputs, i, f)))
        .fold(0.0, f64::max)
}

fn result(name: &str, errors: Vec<f64>, tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        instances: errors.len(),
        max_rel_error: errors.into_iter().fold(0.0, f64::max),
        tolerance,
        skipped: 0,
    }
}

fn check_conv(r: &mut StreamRng, bw: &Backwards) -> Result<CheckResult> {
    let cases = [
        ([2, 2, 5, 5, 5], ConvSpec { k: 3, c_out: 3, p: 0, s: 1, d: 1 }),
        ([1, 3, 7, 6, 5], ConvSpec { k: 3, c_out: 2, p: 1, s: 2, d: 1 }),
        ([2, 1, 9, 9, 9], ConvSpec { k: 3, c_out: 2, p: 0, s: 1, d: 2 }),
        ([1, 2, 6, 6, 6], ConvSpec { k: 2, c_out: 2, p: 1, s: 1, d: 1 }),
        ([1, 2, 8, 7, 9], ConvSpec { k: 5, c_out: 2, p: 2, s: 1, d: 2 }),
        ([2, 1, 5, 5, 5], ConvSpec { k: 1, c_out: 2, p: 0, s: 1, d: 1 }),
    ];
    let mut errs = Vec::new();
    for (xs, spec) in cases {
        let x = uniform(&xs, r);
        let w = uniform(&[spec.c_out, xs[1], spec.k, spec.k, spec.k], r);
        let b = uniform(&[spec.c_out], r);
        let y = ops::conv3d_forward(&x, &w, &b, &spec)?;
        let proj = uniform(y.shape(), r);
        let g = (bw.conv3d)(&proj, &x, &w, &spec)?;
        let f = |v: &[Tensor<f64>]| dot(&proj, &ops::conv3d_forward(&v[0], &v[1], &v[2], &spec).expect("valid conv"));
        errs.push(compare(&[x, w, b], &[g.x, g.w, g.b], &f));
    }
    Ok(result("conv3d", errs, OP_TOLERANCE))
}

/// Values on a 0.01 grid, shuffled, so every pooling window has a unique
/// maximum separated from the runner-up by more than `2h`.
fn distinct(shape: &[usize], r: &mut StreamRng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    v.shuffle(r);
    Tensor::new(shape, v).expect("valid shape")
}

fn check_pool(r: &mut StreamRng) -> Result<CheckResult> {
    let cases = [([2, 2, 6, 6, 6], 3, 2), ([1, 1, 5, 5, 5], 2, 1), ([2, 3, 7, 7, 7], 3, 3), ([1, 2, 9, 9, 9], 5, 2), ([1, 1, 4, 4, 4], 4, 1)];
    let mut errs = Vec::new();
    for (xs, k, s) in cases {
        let x = distinct(&xs, r);
        let out = ops::maxpool3d_forward(&x, k, s)?;
        let proj = uniform(out.y.shape(), r);
        let gx = ops::maxpool3d_backward(&proj, &out.argmax, x.shape())?;
        let f = |v: &[Tensor<f64>]| dot(&proj, &ops::maxpool3d_forward(&v[0], k, s).expect("valid pool").y);
        errs.push(compare(&[x], &[gx], &f));
    }
    Ok(result("maxpool3d", errs, OP_TOLERANCE))
}

fn check_instance_norm(r: &mut StreamRng) -> Result<CheckResult> {
    let mut errs = Vec::new();
    for xs in [[2, 3, 4, 4, 4], [1, 2, 3, 5, 4], [2, 1, 3, 3, 3], [3, 2, 2, 3, 2], [1, 4, 4, 4, 4]] {
        let x = uniform(&xs, r);
        let g = uniform(&[xs[1]], r);
        let b = uniform(&[xs[1]], r);
        let (y, state) = ops::instance_norm_forward(&x, &g, &b, ops::norm::DEFAULT_EPS)?;
        let proj = uniform(y.shape(), r);
        let ng = ops::norm_backward(&proj, &state)?;
        let f = |v: &[Tensor<f64>]| {
            dot(&proj, &ops::instance_norm_forward(&v[0], &v[1], &v[2], ops::norm::DEFAULT_EPS).expect("valid norm").0)
        };
        errs.push(compare(&[x, g, b], &[ng.x, ng.gamma, ng.beta], &f));
    }
    Ok(result("instance_norm", errs, OP_TOLERANCE))
}

fn check_batch_norm(r: &mut StreamRng) -> Result<CheckResult> {
    let mut errs = Vec::new();
    for xs in [[2, 3, 3, 3, 3], [4, 2, 2, 2, 2], [3, 1, 3, 2, 4], [2, 2, 4, 4, 4], [5, 3, 2, 2, 2]] {
        let x = uniform(&xs, r);
        let g = uniform(&[xs[1]], r);
        let b = uniform(&[xs[1]], r);
        let fwd = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
            let mut rs = RunningStats::new(xs[1]).expect("channels >= 1");
            ops::batch_norm_forward(x, g, b, &mut rs, Mode::Train, ops::norm::DEFAULT_BN_MOMENTUM, ops::norm::DEFAULT_EPS)
        };
        let (y, state) = fwd(&x, &g, &b)?;
        let proj = uniform(y.shape(), r);
        let ng = ops::norm_backward(&proj, &state)?;
        let f = |v: &[Tensor<f64>]| dot(&proj, &fwd(&v[0], &v[1], &v[2]).expect("valid norm").0);
        errs.push(compare(&[x, g, b], &[ng.x, ng.gamma, ng.beta], &f));
    }
    Ok(result("batch_norm", errs, OP_TOLERANCE))
}

fn check_layer_norm(r: &mut StreamRng) -> Result<CheckResult> {
    let mut errs = Vec::new();
    for xs in [[2, 8], [1, 5], [3, 16], [4, 3], [2, 32]] {
        let x = uniform(&xs, r);
        let g = uniform(&[xs[1]], r);
        let b = uniform(&[xs[1]], r);
        let (y, state) = ops::layer_norm_forward(&x, &g, &b, ops::norm::DEFAULT_EPS)?;
        let proj = uniform(y.shape(), r);
        let ng = ops::norm_backward(&proj, &state)?;
        let f = |v: &[Tensor<f64>]| {
            dot(&proj, &ops::layer_norm_forward(&v[0], &v[1], &v[2], ops::norm::DEFAULT_EPS).expect("valid norm").0)
        };
        errs.push(compare(&[x, g, b], &[ng.x, ng.gamma, ng.beta], &f));
    }
    Ok(result("layer_norm", errs, OP_TOLERANCE))
}

fn check_relu(r: &mut StreamRng) -> Result<CheckResult> {
    let mut errs = Vec::new();
    for xs in [vec![10], vec![3, 4], vec![2, 2, 3, 3, 3], vec![1, 1, 5, 5, 5], vec![7, 2]] {
        // keep every element at least 0.05 away from the kink
        let x = uniform(&xs, r).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 });
        let proj = uniform(&xs, r);
        let gx = ops::relu_backward(&proj, &x)?;
        let f = |v: &[Tensor<f64>]| dot(&proj, &ops::relu(&v[0]));
        errs.push(compare(&[x], &[gx], &f));
    }
    Ok(result("relu", errs, OP_TOLERANCE))
}

fn check_linear(r: &mut StreamRng) -> Result<CheckResult> {
    let mut errs = Vec::new();
    for (n, fin, fout) in [(2, 5, 3), (1, 8, 4), (4, 3, 3), (3, 16, 2), (2, 1, 6)] {
        let x = uniform(&[n, fin], r);
        let w = uniform(&[fout, fin], r);
        let b = uniform(&[fout], r);
        let proj = uniform(&[n, fout], r);
        let g = ops::linear_backward(&proj, &x, &w)?;
        let f = |v: &[Tensor<f64>]| dot(&proj, &ops::linear_forward(&v[0], &v[1], &v[2]).expect("valid linear"));
        errs.push(compare(&[x, w, b], &[g.x, g.w, g.b], &f));
    }
    Ok(result("linear", errs, OP_TOLERANCE))
}

fn check_softmax_xent(r: &mut StreamRng) -> Result<CheckResult> {
    let mut errs = Vec::new();
    let weights = [0.5, 2.0, 1.25];
    for (n, weighted) in [(1, false), (3, false), (4, true), (6, false), (5, true)] {
        let scores = uniform(&[n, 3], r).scale(3.0);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let w = weighted.then_some(&weights[..]);
        let out = ops::softmax_xent(&scores, &labels, w)?;
        let f = |v: &[Tensor<f64>]| ops::softmax_xent(&v[0], &labels, w).expect("valid xent").loss;
        errs.push(compare(&[scores], &[out.grad], &f));
    }
    Ok(result("softmax_xent", errs, OP_TOLERANCE))
}

/// Every op check, in a fixed order.
pub fn check_ops(seed: u64, backwards: &Backwards) -> Result<Vec<CheckResult>> {
    let rng = Rng::new(seed);
    let r = |i| rng.stream(Stream::Gradcheck, i);
    Ok(vec![
        check_conv(&mut r(0), backwards)?,
        check_pool(&mut r(1))?,
        check_instance_norm(&mut r(2))?,
        check_batch_norm(&mut r(3))?,
        check_layer_norm(&mut r(4))?,
        check_relu(&mut r(5))?,
        check_linear(&mut r(6))?,
        check_softmax_xent(&mut r(7))?,
    ])
}

/// Configuration of the end-to-end check: the smallest crop the backbone
/// accepts, with the age head enabled so its parameters are covered too.
pub fn model_check_config() -> ModelConfig {
    ModelConfig {
        crop_extent: 87,
        age_mode: AgeMode::Encoded,
        ..Default::default()
    }
}

/// Finite-difference check of the full network's loss gradient for
/// `n_params` randomly chosen parameter elements (tensor chosen uniformly,
/// then an element within it). A draw whose `+-h` probes change any pooling
/// choice or ReLU sign straddles a kink and is redrawn; `skipped` counts them.
pub fn check_model(seed: u64, config: &ModelConfig, n_params: usize) -> Result<CheckResult> {
    let rng = Rng::new(seed);
    let mut r = rng.stream(Stream::Gradcheck, 100);
    let mut net = Network::<f64>::build(config, &rng)?;
    let c = config.crop_extent;
    let batch = if config.norm == ops::NormVariant::Batch { 2 } else { 1 };
    let x = uniform(&[batch, 1, c, c, c], &mut r);
    let ages: Vec<f64> = (0..batch).map(|_| r.random_range(55.0..95.0)).collect();
    let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..config.num_classes)).collect();
    let ages_arg = (config.age_mode != AgeMode::None).then_some(ages.as_slice());
    let loss = |net: &Network<f64>| -> Result<(f64, Tape<f64>, Tensor<f64>)> {
        let (logits, tape) = net.forward(&x, ages_arg, Mode::Train)?;
        let out = ops::softmax_xent(&logits, &labels, None)?;
        Ok((out.loss, tape, out.grad))
    };
    let (_, tape, grad) = loss(&net)?;
    let grads = net.backward(&tape, &grad)?;
    let names: Vec<String> = net.params().keys().cloned().collect();
    let mut errs = Vec::with_capacity(n_params);
    let mut skipped = 0;
    while errs.len() < n_params {
        if skipped > 20 * n_params {
            return Err(Error::Numeric(format!("model check: {skipped} draws straddled a kink")));
        }
        let name = names[r.random_range(0..names.len())].clone();
        let len = net.params()[&name].len();
        let i = r.random_range(0..len);
        let orig = net.params()[&name].clone();
        let mut probe = |delta: f64| -> Result<(f64, Tape<f64>)> {
            let mut t = orig.clone();
            t.data_mut()[i] += delta;
            net.set_tensor(&name, t)?;
            let (l, tape, _) = loss(&net)?;
            Ok((l, tape))
        };
        let (up, tape_up) = probe(STEP)?;
        let (down, tape_down) = probe(-STEP)?;
        net.set_tensor(&name, orig)?;
        if !tape.same_routing(&tape_up) || !tape.same_routing(&tape_down) {
            log::debug!("{name}[{i}] straddles a kink, redrawing");
            skipped += 1;
            continue;
        }
        let analytic = grads.params[&name].data()[i];
        let numeric = (up - down) / (2.0 * STEP);
        log::debug!("{name}[{i}]: analytic {analytic:e} numeric {numeric:e}");
        errs.push(rel_error(analytic, numeric));
    }
    let mut res = result("model", errs, MODEL_TOLERANCE);
    res.skipped = skipped;
    Ok(res)
}
