//! Instance, batch and layer normalization with exact backward passes.
//!
//! All three share one shape of computation: split the input into
//! normalization groups, standardize each group with its (biased) mean and
//! variance, then apply a per-feature affine map. They differ only in how
//! groups and affine features are laid out:
//!
//! | variant  | input          | group               | affine index |
//! |----------|----------------|---------------------|--------------|
//! | Instance | `[N,C,spatial]`| one `(n, c)` block  | `c`          |
//! | Batch    | `[N,C,spatial]`| channel `c` over N  | `c`          |
//! | Layer    | `[rows, F]`    | one row             | feature      |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormVariant {
    Instance,
    Batch,
    Layer,
}

impl std::fmt::Display for NormVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormVariant::Instance => "instance",
            NormVariant::Batch => "batch",
            NormVariant::Layer => "layer",
        })
    }
}

impl std::str::FromStr for NormVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "instance" | "in" => Ok(NormVariant::Instance),
            "batch" | "bn" => Ok(NormVariant::Batch),
            "layer" | "ln" => Ok(NormVariant::Layer),
            other => Err(Error::invalid(format!("unknown norm kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormKind {
    pub variant: NormVariant,
    pub eps: f64,
    pub affine: bool,
}

impl NormKind {
    pub fn new(variant: NormVariant) -> Self {
        Self {
            variant,
            eps: DEFAULT_EPS,
            affine: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::invalid(format!("norm eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm running statistics, one entry per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            mean: Tensor::zeros(&[channels])?,
            var: Tensor::ones(&[channels])?,
        })
    }
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct NormState<T: Scalar> {
    variant: NormVariant,
    shape: Vec<usize>,
    xhat: Vec<T>,
    /// One entry per group.
    inv_std: Vec<T>,
    gamma: Vec<T>,
    /// Batch norm in eval mode: statistics are constants.
    frozen_stats: bool,
    /// Batch statistics of a train-mode batch-norm call (mean, biased var).
    batch_stats: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> NormState<T> {
    pub fn variant(&self) -> NormVariant {
        self.variant
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Normalized input before the affine map.
    pub fn normalized(&self) -> Tensor<T> {
        Tensor::from_parts(self.shape.clone(), self.xhat.clone())
    }

    /// Per-channel batch mean and biased variance (train-mode batch norm only).
    pub fn batch_stats(&self) -> Option<(&[T], &[T])> {
        self.batch_stats.as_ref().map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

#[derive(Debug, Clone)]
pub struct NormGrads<T: Scalar> {
    pub x: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Layout `[N, C, S]` of a channel-first tensor, `S` the spatial volume.
fn ncs(shape: &[usize], op: &str) -> Result<(usize, usize, usize)> {
    if shape.len() < 3 {
        return Err(Error::invalid(format!(
            "{op} expects [N,C,spatial...], got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn check_affine<T: Scalar>(gamma: &Tensor<T>, beta: &Tensor<T>, features: usize, op: &'static str) -> Result<()> {
    for t in [gamma, beta] {
        if t.shape() != [features] {
            return Err(Error::ShapeMismatch {
                op,
                left: t.shape().to_vec(),
                right: vec![features],
            });
        }
    }
    Ok(())
}

/// Mean and biased variance of the values produced by `idx`, two-pass.
fn moments<T: Scalar>(x: &[T], idx: impl Iterator<Item = usize> + Clone, count: usize) -> (T, T) {
    let m = T::of(count as f64);
    let mean = idx.clone().map(|i| x[i]).sum::<T>() / m;
    let var = idx.map(|i| (x[i] - mean) * (x[i] - mean)).sum::<T>() / m;
    (mean, var)
}

/// Per-(sample, channel) normalization over spatial positions. Train and
/// eval behave identically, so there is no mode argument.
pub fn instance_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormState<T>)> {
    let (n, c, s) = ncs(x.shape(), "instance_norm")?;
    check_affine(gamma, beta, c, "instance_norm affine")?;
    let eps = T::of(eps);
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = Vec::with_capacity(n * c);
    for g in 0..n * c {
        let ch = g % c;
        let r = g * s..(g + 1) * s;
        let (mean, var) = moments(xd, r.clone(), s);
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for i in r {
            let h = (xd[i] - mean) * is;
            xhat[i] = h;
            y[i] = gamma.data()[ch] * h + beta.data()[ch];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        NormState {
            variant: NormVariant::Instance,
            shape: x.shape().to_vec(),
            xhat,
            inv_std,
            gamma: gamma.data().to_vec(),
            frozen_stats: false,
            batch_stats: None,
        },
    ))
}

/// Per-channel normalization over batch and spatial positions. In train
/// mode the running statistics are updated in place with
/// `r <- (1 - momentum) r + momentum * batch_stat` (unbiased variance for the
/// running estimate); eval mode normalizes with the running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &mut RunningStats<T>,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor<T>, NormState<T>)> {
    let (n, c, s) = ncs(x.shape(), "batch_norm")?;
    check_affine(gamma, beta, c, "batch_norm affine")?;
    check_affine(&running.mean, &running.var, c, "batch_norm running stats")?;
    if mode == Mode::Train && n < 2 {
        return Err(Error::invalid(format!(
            "batch_norm in train mode needs a batch of at least 2, got {n}"
        )));
    }
    let eps_t = T::of(eps);
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = Vec::with_capacity(c);
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    let count = n * s;
    for ch in 0..c {
        let idx = (0..n).flat_map(move |b| (b * c + ch) * s..(b * c + ch + 1) * s);
        let (mean, var) = match mode {
            Mode::Train => moments(xd, idx.clone(), count),
            Mode::Eval => (running.mean.data()[ch], running.var.data()[ch]),
        };
        means.push(mean);
        vars.push(var);
        let is = T::one() / (var + eps_t).sqrt();
        inv_std.push(is);
        for i in idx {
            let h = (xd[i] - mean) * is;
            xhat[i] = h;
            y[i] = gamma.data()[ch] * h + beta.data()[ch];
        }
    }
    let batch_stats = if mode == Mode::Train {
        let m = T::of(momentum);
        let unbias = T::of(count as f64 / (count - 1).max(1) as f64);
        for ch in 0..c {
            let rm = &mut running.mean.data_mut()[ch];
            *rm = (T::one() - m) * *rm + m * means[ch];
            let rv = &mut running.var.data_mut()[ch];
            *rv = (T::one() - m) * *rv + m * vars[ch] * unbias;
        }
        Some((means, vars))
    } else {
        None
    };
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        NormState {
            variant: NormVariant::Batch,
            shape: x.shape().to_vec(),
            xhat,
            inv_std,
            gamma: gamma.data().to_vec(),
            frozen_stats: mode == Mode::Eval,
            batch_stats,
        },
    ))
}

/// Normalize each row of a `[rows, F]` tensor over its features.
pub fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormState<T>)> {
    let f = *x.shape().last().expect("tensors have rank >= 1");
    check_affine(gamma, beta, f, "layer_norm affine")?;
    let rows = x.len() / f;
    let eps = T::of(eps);
    let xd = x.data();
    let mut y = vec![T::zero(); xd.len()];
    let mut xhat = vec![T::zero(); xd.len()];
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let range = r * f..(r + 1) * f;
        let (mean, var) = moments(xd, range.clone(), f);
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        for (j, i) in range.enumerate() {
            let h = (xd[i] - mean) * is;
            xhat[i] = h;
            y[i] = gamma.data()[j] * h + beta.data()[j];
        }
    }
    Ok((
        Tensor::from_parts(x.shape().to_vec(), y),
        NormState {
            variant: NormVariant::Layer,
            shape: x.shape().to_vec(),
            xhat,
            inv_std,
            gamma: gamma.data().to_vec(),
            frozen_stats: false,
            batch_stats: None,
        },
    ))
}

/// Backward for all three variants, including the dependence of the group
/// statistics on `x` (unless they were frozen running statistics).
///
/// Per group of size `m` with `dh = g * gamma`:
/// `dx = inv_std / m * (m*dh - sum(dh) - xhat * sum(dh * xhat))`.
pub fn norm_backward<T: Scalar>(grad_out: &Tensor<T>, state: &NormState<T>) -> Result<NormGrads<T>> {
    if grad_out.shape() != state.shape.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "norm_backward (state from a different forward call)",
            left: grad_out.shape().to_vec(),
            right: state.shape.clone(),
        });
    }
    let g = grad_out.data();
    let xh = &state.xhat;
    let features = state.gamma.len();
    let mut dgamma = vec![T::zero(); features];
    let mut dbeta = vec![T::zero(); features];
    let mut dx = vec![T::zero(); g.len()];

    // (group index iterator, affine feature of element) per variant
    let shape = &state.shape;
    match state.variant {
        NormVariant::Instance => {
            let (n, c, s) = ncs(shape, "instance_norm")?;
            for grp in 0..n * c {
                let ch = grp % c;
                group_backward(g, xh, grp * s..(grp + 1) * s, s, state.inv_std[grp], |_| ch, &state.gamma, false, &mut dx, &mut dgamma, &mut dbeta);
            }
        }
        NormVariant::Batch => {
            let (n, c, s) = ncs(shape, "batch_norm")?;
            for ch in 0..c {
                let idx = (0..n).flat_map(move |b| (b * c + ch) * s..(b * c + ch + 1) * s);
                group_backward(g, xh, idx, n * s, state.inv_std[ch], |_| ch, &state.gamma, state.frozen_stats, &mut dx, &mut dgamma, &mut dbeta);
            }
        }
        NormVariant::Layer => {
            let f = features;
            for r in 0..g.len() / f {
                group_backward(g, xh, r * f..(r + 1) * f, f, state.inv_std[r], |i| i % f, &state.gamma, false, &mut dx, &mut dgamma, &mut dbeta);
            }
        }
    }
    Ok(NormGrads {
        x: Tensor::from_parts(shape.clone(), dx),
        gamma: Tensor::from_parts(vec![features], dgamma),
        beta: Tensor::from_parts(vec![features], dbeta),
    })
}

#[allow(clippy::too_many_arguments)]
fn group_backward<T: Scalar>(
    g: &[T],
    xhat: &[T],
    idx: impl Iterator<Item = usize> + Clone,
    count: usize,
    inv_std: T,
    feature_of: impl Fn(usize) -> usize,
    gamma: &[T],
    frozen: bool,
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) {
    let mut sum_dh = T::zero();
    let mut sum_dh_xh = T::zero();
    for i in idx.clone() {
        let f = feature_of(i);
        dgamma[f] = dgamma[f] + g[i] * xhat[i];
        dbeta[f] = dbeta[f] + g[i];
        let dh = g[i] * gamma[f];
        sum_dh = sum_dh + dh;
        sum_dh_xh = sum_dh_xh + dh * xhat[i];
    }
    if frozen {
        for i in idx {
            dx[i] = g[i] * gamma[feature_of(i)] * inv_std;
        }
        return;
    }
    let m = T::of(count as f64);
    let scale = inv_std / m;
    for i in idx {
        let dh = g[i] * gamma[feature_of(i)];
        dx[i] = scale * (m * dh - sum_dh - xhat[i] * sum_dh_xh);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Rng, Stream};
    use crate::tensor::Init;

    fn random(shape: &[usize], idx: u64) -> Tensor<f64> {
        Tensor::init(Init::Uniform(-2.0, 3.0), shape, &mut Rng::new(5).stream(Stream::Test, idx)).unwrap()
    }

    fn ones(c: usize) -> Tensor<f64> {
        Tensor::ones(&[c]).unwrap()
    }

    fn zeros(c: usize) -> Tensor<f64> {
        Tensor::zeros(&[c]).unwrap()
    }

    /// Direct per-group mean / biased variance, computed independently.
    fn group_stats(vals: &[f64]) -> (f64, f64) {
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        (m, vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64)
    }

    #[test]
    fn instance_norm_constant_channel_is_zero() {
        let x = Tensor::<f64>::full(&[1, 2, 3, 3, 3], 4.5).unwrap();
        let (y, _) = instance_norm_forward(&x, &ones(2), &zeros(2), DEFAULT_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn instance_norm_standardizes() {
        let x = random(&[2, 3, 4, 4, 4], 0);
        let (y, state) = instance_norm_forward(&x, &ones(3), &zeros(3), DEFAULT_EPS).unwrap();
        assert_eq!(state.normalized(), y);
        for grp in y.data().chunks(64) {
            let (m, v) = group_stats(grp);
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn instance_norm_gamma_zero_gives_beta() {
        let x = random(&[1, 2, 3, 3, 3], 1);
        let beta = Tensor::from_f64(&[2], &[0.5, -1.5]).unwrap();
        let (y, _) = instance_norm_forward(&x, &zeros(2), &beta, DEFAULT_EPS).unwrap();
        assert!(y.data()[..27].iter().all(|&v| v == 0.5));
        assert!(y.data()[27..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn instance_norm_affine_invariance() {
        let x = random(&[2, 2, 3, 4, 5], 2);
        let (y, _) = instance_norm_forward(&x, &ones(2), &zeros(2), DEFAULT_EPS).unwrap();
        let shifted = x.scale(3.7).add_scalar(-11.0);
        let (y2, _) = instance_norm_forward(&shifted, &ones(2), &zeros(2), DEFAULT_EPS).unwrap();
        for (a, b) in y.data().iter().zip(y2.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_constant_channels_are_zero() {
        let mut v = vec![0.0; 2 * 2 * 8];
        for b in 0..2 {
            for c in 0..2 {
                for s in 0..8 {
                    v[(b * 2 + c) * 8 + s] = if c == 0 { 1.25 } else { -3.0 };
                }
            }
        }
        let x = Tensor::from_f64(&[2, 2, 2, 2, 2], &v).unwrap();
        let mut rs = RunningStats::new(2).unwrap();
        let (y, _) = batch_norm_forward(&x, &ones(2), &zeros(2), &mut rs, Mode::Train, 0.1, DEFAULT_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_eval_with_unit_stats_is_identity() {
        let x = random(&[2, 3, 2, 2, 2], 3);
        let mut rs = RunningStats::new(3).unwrap();
        let (y, _) = batch_norm_forward(&x, &ones(3), &zeros(3), &mut rs, Mode::Eval, 0.1, DEFAULT_EPS).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
    }

    #[test]
    fn batch_norm_train_stats_match_direct_oracle() {
        let x = random(&[3, 2, 2, 3, 2], 4);
        let mut rs = RunningStats::new(2).unwrap();
        let (_, state) = batch_norm_forward(&x, &ones(2), &zeros(2), &mut rs, Mode::Train, 0.1, DEFAULT_EPS).unwrap();
        let (means, vars) = state.batch_stats().unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| x.data()[(b * 2 + c) * 12..(b * 2 + c + 1) * 12].to_vec()).collect();
            let (m, v) = group_stats(&vals);
            assert!((means[c] - m).abs() < 1e-6);
            assert!((vars[c] - v).abs() < 1e-6);
            let unbiased = v * 36.0 / 35.0;
            assert!((rs.mean.data()[c] - 0.1 * m).abs() < 1e-12);
            assert!((rs.var.data()[c] - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_rejects_singleton_train_batch() {
        let x = random(&[1, 2, 2, 2, 2], 5);
        let mut rs = RunningStats::new(2).unwrap();
        assert!(batch_norm_forward(&x, &ones(2), &zeros(2), &mut rs, Mode::Train, 0.1, DEFAULT_EPS).is_err());
        assert!(batch_norm_forward(&x, &ones(2), &zeros(2), &mut rs, Mode::Eval, 0.1, DEFAULT_EPS).is_ok());
    }

    #[test]
    fn train_eval_behaviour() {
        let x = random(&[2, 2, 3, 3, 3], 6);
        let (a, _) = instance_norm_forward(&x, &ones(2), &zeros(2), DEFAULT_EPS).unwrap();
        let (b, _) = instance_norm_forward(&x, &ones(2), &zeros(2), DEFAULT_EPS).unwrap();
        assert_eq!(a, b);

        let mut rs = RunningStats::new(2).unwrap();
        let (t, _) = batch_norm_forward(&x, &ones(2), &zeros(2), &mut rs, Mode::Train, 0.1, DEFAULT_EPS).unwrap();
        let (e, _) = batch_norm_forward(&x, &ones(2), &zeros(2), &mut rs, Mode::Eval, 0.1, DEFAULT_EPS).unwrap();
        assert_ne!(t, e);
    }

    #[test]
    fn layer_norm_rows() {
        let x = Tensor::<f64>::from_f64(&[2, 4], &[2.0, 2.0, 2.0, 2.0, 1.0, 5.0, -3.0, 0.5]).unwrap();
        let (y, _) = layer_norm_forward(&x, &ones(4), &zeros(4), DEFAULT_EPS).unwrap();
        assert!(y.data()[..4].iter().all(|&v| v == 0.0));
        assert!(y.data()[4..].iter().sum::<f64>().abs() < 1e-5);

        // an already standardized row passes through up to the eps effect
        let row = [1.0, -1.0, 1.0, -1.0];
        let x = Tensor::<f64>::from_f64(&[1, 4], &row).unwrap();
        let (y, _) = layer_norm_forward(&x, &ones(4), &zeros(4), DEFAULT_EPS).unwrap();
        for (a, b) in y.data().iter().zip(row) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_simple_properties() {
        let x = random(&[2, 3, 2, 2, 2], 7);
        let (_, state) = instance_norm_forward(&x, &ones(3), &zeros(3), DEFAULT_EPS).unwrap();
        let zero = Tensor::<f64>::zeros(x.shape()).unwrap();
        let g0 = norm_backward(&zero, &state).unwrap();
        assert!(g0.x.data().iter().chain(g0.gamma.data()).chain(g0.beta.data()).all(|&v| v == 0.0));

        let g = random(x.shape(), 8);
        let grads = norm_backward(&g, &state).unwrap();
        for c in 0..3 {
            let s: f64 = (0..2).map(|b| g.data()[(b * 3 + c) * 8..(b * 3 + c + 1) * 8].iter().sum::<f64>()).sum();
            assert!((grads.beta.data()[c] - s).abs() < 1e-12);
        }
        let wrong = Tensor::<f64>::zeros(&[2, 3, 2, 2, 1]).unwrap();
        assert!(norm_backward(&wrong, &state).is_err());
    }
}
