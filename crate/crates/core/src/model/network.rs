use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::model::{infer_shapes, layer_stack, AgeMode, Layer, LayerKind, ModelConfig, AGE_HIDDEN, FC1_WIDTH};
use crate::ops::{self, Mode, NormState, NormVariant, RunningStats};
use crate::rng::{name_index, Rng, Stream};
use crate::tensor::{Init, Scalar, Tensor};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// A built backbone: layer list, named parameters and (batch-norm) buffers.
///
/// Parameter names are `<layer>.weight` / `<layer>.bias` for convolution,
/// normalization (gamma / beta) and linear layers, e.g. `block2.conv.weight`,
/// `block3.norm.bias`, `fc1.weight`, `age.fc1.weight`, `age.norm.weight`.
/// Batch-norm running statistics live in `buffers` as
/// `<layer>.running_mean` / `<layer>.running_var`.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar = f32> {
    config: ModelConfig,
    layers: Vec<Layer>,
    shapes: Vec<(String, Vec<usize>)>,
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
    id: u64,
    version: u64,
}

/// Per-layer saved state.
#[derive(Debug, Clone)]
enum Saved<T: Scalar> {
    Conv { input: Tensor<T> },
    Norm { state: NormState<T>, update: Option<RunningStats<T>> },
    Relu { input: Tensor<T> },
    Pool { argmax: Vec<usize>, input_shape: Vec<usize> },
    Flatten { shape: Vec<usize> },
    ConcatAge { features: usize },
    Linear { input: Tensor<T> },
    AgeHead { enc: Tensor<T>, norm: NormState<T>, normed: Tensor<T> },
}

/// Intermediate state recorded by [`Network::forward`].
#[derive(Debug, Clone)]
pub struct Tape<T: Scalar> {
    net_id: u64,
    version: u64,
    input_shape: Vec<usize>,
    saved: Vec<Saved<T>>,
    shapes: Vec<(String, Vec<usize>)>,
}

impl<T: Scalar> Tape<T> {
    /// Output shape of every layer as observed in the forward pass,
    /// including the batch axis.
    pub fn observed_shapes(&self) -> &[(String, Vec<usize>)] {
        &self.shapes
    }

    /// True when both passes took the same piecewise-linear branch: every
    /// pooling window picked the same element and every ReLU input has the
    /// same sign.
    pub fn same_routing(&self, other: &Tape<T>) -> bool {
        self.saved.len() == other.saved.len()
            && self.saved.iter().zip(&other.saved).all(|pair| match pair {
                (Saved::Pool { argmax: a, .. }, Saved::Pool { argmax: b, .. }) => a == b,
                (Saved::Relu { input: a }, Saved::Relu { input: b }) => {
                    a.data().iter().zip(b.data()).all(|(x, y)| (*x > T::zero()) == (*y > T::zero()))
                }
                _ => true,
            })
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    pub params: BTreeMap<String, Tensor<T>>,
    /// Gradient with respect to the input volume batch.
    pub input: Tensor<T>,
}

fn weight(name: &str) -> String {
    format!("{name}.weight")
}

fn bias(name: &str) -> String {
    format!("{name}.bias")
}

impl<T: Scalar> Network<T> {
    /// Build and initialize: Kaiming-uniform weights, zero biases, unit
    /// gamma, zero beta. Each tensor draws from its own stream keyed by its
    /// name, so adding or removing a layer never changes another layer's
    /// initial values.
    pub fn build(config: &ModelConfig, rng: &Rng) -> Result<Self> {
        Self::build_with(config, |name, shape, init| {
            Tensor::init(init, shape, &mut rng.stream(Stream::Init, name_index(name)))
        })
    }

    pub(crate) fn build_with(
        config: &ModelConfig,
        mut make: impl FnMut(&str, &[usize], Init) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        let shapes = infer_shapes(config)?;
        let layers = layer_stack(config);
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let mut in_shape = vec![1usize, config.crop_extent, config.crop_extent, config.crop_extent];
        for (layer, (_, out_shape)) in layers.iter().zip(&shapes) {
            let name = layer.name.as_str();
            match &layer.kind {
                LayerKind::Conv(spec) => {
                    let k = spec.k;
                    let ws = [spec.c_out, in_shape[0], k, k, k];
                    params.insert(weight(name), make(&weight(name), &ws, Init::KaimingUniform)?);
                    params.insert(bias(name), make(&bias(name), &[spec.c_out], Init::Zeros)?);
                }
                LayerKind::Norm(kind) => {
                    let c = in_shape[0];
                    let target = if kind.affine { &mut params } else { &mut buffers };
                    target.insert(weight(name), make(&weight(name), &[c], Init::Ones)?);
                    target.insert(bias(name), make(&bias(name), &[c], Init::Zeros)?);
                    if kind.variant == NormVariant::Batch {
                        buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[c])?);
                        buffers.insert(format!("{name}.running_var"), Tensor::ones(&[c])?);
                    }
                }
                LayerKind::Linear { out } => {
                    params.insert(weight(name), make(&weight(name), &[*out, in_shape[0]], Init::KaimingUniform)?);
                    params.insert(bias(name), make(&bias(name), &[*out], Init::Zeros)?);
                }
                LayerKind::AddAgeHead => {
                    let d = config.d_model;
                    for (n, shape, init) in [
                        ("age.fc1.weight", vec![AGE_HIDDEN, d], Init::KaimingUniform),
                        ("age.fc1.bias", vec![AGE_HIDDEN], Init::Zeros),
                        ("age.norm.weight", vec![AGE_HIDDEN], Init::Ones),
                        ("age.norm.bias", vec![AGE_HIDDEN], Init::Zeros),
                        ("age.fc2.weight", vec![FC1_WIDTH, AGE_HIDDEN], Init::KaimingUniform),
                        ("age.fc2.bias", vec![FC1_WIDTH], Init::Zeros),
                    ] {
                        params.insert(n.to_string(), make(n, &shape, init)?);
                    }
                }
                LayerKind::Relu | LayerKind::MaxPool { .. } | LayerKind::Flatten | LayerKind::ConcatAge => {}
            }
            in_shape = out_shape.clone();
        }
        Ok(Self {
            config: config.clone(),
            layers,
            shapes,
            params,
            buffers,
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Shape-inference result, one entry per layer (no batch axis).
    pub fn layer_shapes(&self) -> &[(String, Vec<usize>)] {
        &self.shapes
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Incremented by every parameter mutation; tapes from older versions
    /// are rejected by [`Network::backward`].
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Replace one parameter or buffer; the shape must not change.
    pub fn set_tensor(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .or_else(|| self.buffers.get_mut(name))
            .ok_or_else(|| Error::invalid(format!("no parameter or buffer named `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_tensor",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        self.version += 1;
        Ok(())
    }

    /// Mutate every parameter in place (name order).
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, &mut [T])) {
        for (name, t) in self.params.iter_mut() {
            f(name, t.data_mut());
        }
        self.version += 1;
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        self.version += 1;
        &mut self.params
    }

    /// Same network with every tensor converted to `U`.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            config: self.config.clone(),
            layers: self.layers.clone(),
            shapes: self.shapes.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            version: 0,
        }
    }

    fn p(&self, name: &str) -> &Tensor<T> {
        self.params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .unwrap_or_else(|| panic!("parameter `{name}` exists by construction"))
    }

    fn check_inputs(&self, x: &Tensor<T>, ages: Option<&[f64]>) -> Result<usize> {
        let c = self.config.crop_extent;
        let xs = x.shape();
        if xs.len() != 5 || xs[1..] != [1, c, c, c] {
            return Err(Error::ShapeMismatch {
                op: "network input (expects [N,1,c,c,c])",
                left: xs.to_vec(),
                right: vec![xs.first().copied().unwrap_or(0), 1, c, c, c],
            });
        }
        let n = xs[0];
        if self.config.age_mode != AgeMode::None {
            let ages = ages.ok_or_else(|| {
                Error::invalid(format!("age mode `{}` requires one age per sample", self.config.age_mode))
            })?;
            if ages.len() != n {
                return Err(Error::invalid(format!("{} ages for a batch of {n}", ages.len())));
            }
        }
        Ok(n)
    }

    /// Pre-softmax class scores plus the tape needed by [`Network::backward`].
    /// `ages` is required unless the age mode is `none` (where it is ignored).
    pub fn forward(&self, x: &Tensor<T>, ages: Option<&[f64]>, mode: Mode) -> Result<(Tensor<T>, Tape<T>)> {
        let mut saved = Vec::with_capacity(self.layers.len());
        let mut shapes = Vec::with_capacity(self.layers.len());
        let logits = self.run(x, ages, mode, Some((&mut saved, &mut shapes)))?;
        Ok((
            logits,
            Tape {
                net_id: self.id,
                version: self.version,
                input_shape: x.shape().to_vec(),
                saved,
                shapes,
            },
        ))
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, x: &Tensor<T>, ages: Option<&[f64]>) -> Result<Tensor<T>> {
        self.run(x, ages, Mode::Eval, None)
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        x: &Tensor<T>,
        ages: Option<&[f64]>,
        mode: Mode,
        mut record: Option<(&mut Vec<Saved<T>>, &mut Vec<(String, Vec<usize>)>)>,
    ) -> Result<Tensor<T>> {
        let n = self.check_inputs(x, ages)?;
        let mut h = x.clone();
        for layer in &self.layers {
            let name = layer.name.as_str();
            let (out, save) = match &layer.kind {
                LayerKind::Conv(spec) => {
                    let y = ops::conv3d_forward(&h, self.p(&weight(name)), self.p(&bias(name)), spec)?;
                    (y, Saved::Conv { input: h })
                }
                LayerKind::Norm(kind) => {
                    let (g, b) = (self.p(&weight(name)), self.p(&bias(name)));
                    match kind.variant {
                        NormVariant::Instance => {
                            let (y, state) = ops::instance_norm_forward(&h, g, b, kind.eps)?;
                            (y, Saved::Norm { state, update: None })
                        }
                        NormVariant::Batch => {
                            let mut rs = RunningStats {
                                mean: self.p(&format!("{name}.running_mean")).clone(),
                                var: self.p(&format!("{name}.running_var")).clone(),
                            };
                            let (y, state) = ops::batch_norm_forward(
                                &h,
                                g,
                                b,
                                &mut rs,
                                mode,
                                ops::norm::DEFAULT_BN_MOMENTUM,
                                kind.eps,
                            )?;
                            let update = (mode == Mode::Train).then_some(rs);
                            (y, Saved::Norm { state, update })
                        }
                        NormVariant::Layer => {
                            let (y, state) = ops::layer_norm_forward(&h, g, b, kind.eps)?;
                            (y, Saved::Norm { state, update: None })
                        }
                    }
                }
                LayerKind::Relu => (ops::relu(&h), Saved::Relu { input: h }),
                LayerKind::MaxPool { k, s } => {
                    let out = ops::maxpool3d_forward(&h, *k, *s)?;
                    let input_shape = h.shape().to_vec();
                    (out.y, Saved::Pool { argmax: out.argmax, input_shape })
                }
                LayerKind::Flatten => {
                    let shape = h.shape().to_vec();
                    let feat = h.len() / n;
                    (h.reshape(&[n, feat])?, Saved::Flatten { shape })
                }
                LayerKind::ConcatAge => {
                    let ages = ages.expect("checked in check_inputs");
                    let f = h.shape()[1];
                    let mut data = Vec::with_capacity(n * (f + 1));
                    for (row, &age) in h.data().chunks(f).zip(ages) {
                        if !(0.0..=ops::age::MAX_AGE).contains(&age) {
                            return Err(Error::invalid(format!("age {age} outside [0, 120]")));
                        }
                        data.extend_from_slice(row);
                        data.push(T::of(age / ops::age::MAX_AGE));
                    }
                    (Tensor::from_parts(vec![n, f + 1], data), Saved::ConcatAge { features: f })
                }
                LayerKind::Linear { .. } => {
                    let y = ops::linear_forward(&h, self.p(&weight(name)), self.p(&bias(name)))?;
                    (y, Saved::Linear { input: h })
                }
                LayerKind::AddAgeHead => {
                    let ages = ages.expect("checked in check_inputs");
                    let d = self.config.d_model;
                    let mut enc = Vec::with_capacity(n * d);
                    for &age in ages {
                        enc.extend_from_slice(ops::age_encode::<T>(age, d)?.data());
                    }
                    let enc = Tensor::from_parts(vec![n, d], enc);
                    let a1 = ops::linear_forward(&enc, self.p("age.fc1.weight"), self.p("age.fc1.bias"))?;
                    let eps = ops::norm::DEFAULT_EPS;
                    let (normed, norm) =
                        ops::layer_norm_forward(&a1, self.p("age.norm.weight"), self.p("age.norm.bias"), eps)?;
                    let a2 = ops::linear_forward(&normed, self.p("age.fc2.weight"), self.p("age.fc2.bias"))?;
                    (h.add(&a2)?, Saved::AgeHead { enc, norm, normed })
                }
            };
            if let Some((saved, shapes)) = record.as_mut() {
                shapes.push((layer.name.clone(), out.shape().to_vec()));
                saved.push(save);
            }
            h = out;
        }
        Ok(h)
    }

    /// Gradients of `sum(grad_logits * logits)` with respect to every
    /// parameter and to the input batch.
    pub fn backward(&self, tape: &Tape<T>, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        if tape.net_id != self.id || tape.version != self.version {
            return Err(Error::StaleTape {
                tape: tape.version,
                network: self.version,
            });
        }
        let n = tape.input_shape[0];
        let out_shape = &tape.shapes.last().expect("non-empty network").1;
        if grad_logits.shape() != out_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "backward grad_logits",
                left: grad_logits.shape().to_vec(),
                right: out_shape.clone(),
            });
        }
        let mut grads = BTreeMap::new();
        let mut g = grad_logits.clone();
        for (layer, save) in self.layers.iter().zip(&tape.saved).rev() {
            let name = layer.name.as_str();
            g = match (&layer.kind, save) {
                (LayerKind::Conv(spec), Saved::Conv { input }) => {
                    let cg = ops::conv3d_backward(&g, input, self.p(&weight(name)), spec)?;
                    grads.insert(weight(name), cg.w);
                    grads.insert(bias(name), cg.b);
                    cg.x
                }
                (LayerKind::Norm(kind), Saved::Norm { state, .. }) => {
                    let ng = ops::norm_backward(&g, state)?;
                    if kind.affine {
                        grads.insert(weight(name), ng.gamma);
                        grads.insert(bias(name), ng.beta);
                    }
                    ng.x
                }
                (LayerKind::Relu, Saved::Relu { input }) => ops::relu_backward(&g, input)?,
                (LayerKind::MaxPool { .. }, Saved::Pool { argmax, input_shape }) => {
                    ops::maxpool3d_backward(&g, argmax, input_shape)?
                }
                (LayerKind::Flatten, Saved::Flatten { shape }) => g.reshape(shape)?,
                (LayerKind::ConcatAge, Saved::ConcatAge { features }) => {
                    let f = *features;
                    let data = g.data().chunks(f + 1).flat_map(|row| row[..f].to_vec()).collect();
                    Tensor::from_parts(vec![n, f], data)
                }
                (LayerKind::Linear { .. }, Saved::Linear { input }) => {
                    let lg = ops::linear_backward(&g, input, self.p(&weight(name)))?;
                    grads.insert(weight(name), lg.w);
                    grads.insert(bias(name), lg.b);
                    lg.x
                }
                (LayerKind::AddAgeHead, Saved::AgeHead { enc, norm, normed }) => {
                    let g2 = ops::linear_backward(&g, normed, self.p("age.fc2.weight"))?;
                    let gn = ops::norm_backward(&g2.x, norm)?;
                    let g1 = ops::linear_backward(&gn.x, enc, self.p("age.fc1.weight"))?;
                    grads.insert("age.fc2.weight".into(), g2.w);
                    grads.insert("age.fc2.bias".into(), g2.b);
                    grads.insert("age.norm.weight".into(), gn.gamma);
                    grads.insert("age.norm.bias".into(), gn.beta);
                    grads.insert("age.fc1.weight".into(), g1.w);
                    grads.insert("age.fc1.bias".into(), g1.b);
                    g
                }
                _ => unreachable!("tape entries mirror the layer list"),
            };
        }
        Ok(Gradients { params: grads, input: g })
    }

    /// Fold the batch-norm running statistics of a train-mode forward pass
    /// into the network.
    pub fn commit_running_stats(&mut self, tape: &Tape<T>) -> Result<()> {
        if tape.net_id != self.id {
            return Err(Error::StaleTape {
                tape: tape.version,
                network: self.version,
            });
        }
        for (layer, save) in self.layers.iter().zip(&tape.saved) {
            if let Saved::Norm { update: Some(rs), .. } = save {
                self.buffers.insert(format!("{}.running_mean", layer.name), rs.mean.clone());
                self.buffers.insert(format!("{}.running_var", layer.name), rs.var.clone());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig { crop_extent: 87, ..Default::default() }
    }

    fn volume(n: usize, c: usize, seed: u64) -> Tensor<f32> {
        Tensor::init(Init::Uniform(-1.0, 1.0), &[n, 1, c, c, c], &mut Rng::new(seed).stream(Stream::Test, 0)).unwrap()
    }

    #[test]
    fn logits_shape_and_observed_shapes_match_inference() {
        let cfg = small_cfg();
        let net = Network::<f32>::build(&cfg, &Rng::new(1)).unwrap();
        let (logits, tape) = net.forward(&volume(2, 87, 2), None, Mode::Train).unwrap();
        assert_eq!(logits.shape(), &[2, 3]);
        for ((n1, s1), (n2, s2)) in net.layer_shapes().iter().zip(tape.observed_shapes()) {
            assert_eq!(n1, n2);
            assert_eq!(s1.as_slice(), &s2[1..]);
            assert_eq!(s2[0], 2);
        }
    }

    #[test]
    fn widening_doubles_conv_channels() {
        let a = Network::<f32>::build(&ModelConfig { widening_factor: 1, ..small_cfg() }, &Rng::new(0)).unwrap();
        let b = Network::<f32>::build(&ModelConfig { widening_factor: 2, ..small_cfg() }, &Rng::new(0)).unwrap();
        for blk in 1..=4 {
            let wa = a.param(&format!("block{blk}.conv.weight")).unwrap().shape();
            let wb = b.param(&format!("block{blk}.conv.weight")).unwrap().shape();
            assert_eq!(wb[0], 2 * wa[0]);
            if blk > 1 {
                assert_eq!(wb[1], 2 * wa[1]);
            }
        }
        assert!(b.num_parameters() > a.num_parameters());
    }

    #[test]
    fn zero_parameters_give_constant_logits() {
        let mut net = Network::<f32>::build(&small_cfg(), &Rng::new(3)).unwrap();
        net.for_each_param_mut(|_, d| d.fill(0.0));
        let l = net.predict(&volume(3, 87, 4), None).unwrap();
        assert_eq!(&l.data()[0..3], &l.data()[3..6]);
        assert_eq!(&l.data()[0..3], &l.data()[6..9]);
    }

    #[test]
    fn gradient_keys_and_zero_upstream() {
        let net = Network::<f32>::build(&ModelConfig { age_mode: AgeMode::Encoded, ..small_cfg() }, &Rng::new(5)).unwrap();
        let (_, tape) = net.forward(&volume(1, 87, 6), Some(&[70.0]), Mode::Train).unwrap();
        let g = net.backward(&tape, &Tensor::zeros(&[1, 3]).unwrap()).unwrap();
        assert_eq!(g.params.keys().collect::<Vec<_>>(), net.params().keys().collect::<Vec<_>>());
        for (k, t) in &g.params {
            assert_eq!(t.shape(), net.param(k).unwrap().shape());
            assert!(t.data().iter().all(|&v| v == 0.0), "{k}");
        }
    }

    #[test]
    fn stale_tape_rejected() {
        let mut net = Network::<f32>::build(&small_cfg(), &Rng::new(7)).unwrap();
        let (_, tape) = net.forward(&volume(1, 87, 8), None, Mode::Train).unwrap();
        net.for_each_param_mut(|_, _| {});
        assert!(matches!(
            net.backward(&tape, &Tensor::ones(&[1, 3]).unwrap()),
            Err(Error::StaleTape { .. })
        ));
    }

    #[test]
    fn missing_ages_rejected() {
        for mode in [AgeMode::Encoded, AgeMode::Concat] {
            let net = Network::<f32>::build(&ModelConfig { age_mode: mode, ..small_cfg() }, &Rng::new(9)).unwrap();
            assert!(net.predict(&volume(1, 87, 1), None).is_err());
            assert!(net.predict(&volume(1, 87, 1), Some(&[60.0])).is_ok());
        }
    }

    #[test]
    fn batch_norm_running_stats_commit() {
        let cfg = ModelConfig { norm: NormVariant::Batch, ..small_cfg() };
        let mut net = Network::<f32>::build(&cfg, &Rng::new(10)).unwrap();
        let before = net.buffers()["block1.norm.running_mean"].clone();
        let (_, tape) = net.forward(&volume(2, 87, 11), None, Mode::Train).unwrap();
        assert_eq!(net.buffers()["block1.norm.running_mean"], before);
        net.commit_running_stats(&tape).unwrap();
        assert_ne!(net.buffers()["block1.norm.running_mean"], before);
        assert!(net.forward(&volume(1, 87, 11), None, Mode::Train).is_err());
    }
}
