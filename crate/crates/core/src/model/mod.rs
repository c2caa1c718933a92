//! The backbone network: layer stack, shape inference, forward/backward and
//! checkpoints.
//!
//! Layer stack for widening factor `f` (per-sample shapes `[C, D, H, W]`):
//!
//! ```text
//! block1  conv k1-c4f-p0-s1-d1 (or the first-layer variant), norm, relu, pool k3-s2
//! block2  conv k3-c32f-p0-s1-d2,                            norm, relu, pool k3-s2
//! block3  conv k5-c64f-p2-s1-d2,                            norm, relu, pool k3-s2
//! block4  conv k3-c64f-p1-s1-d2,                            norm, relu, pool k5-s2
//! extraN  conv k3-c64f-p1-s1-d1, instance norm, relu        (extra_blocks times)
//! flatten [+ age/120 feature]  fc1 -> 1024  [+ age head]  relu  fc2 -> classes
//! ```
//!
//! The final pool follows the printed layer spec; on a 96^3 crop it yields a
//! 1^3 map (the floor formula on a 6^3 input), and fc1's input size is taken
//! from the computed shape.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{load, load_expecting, save, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{AgeMode, FirstLayer, ModelConfig, AGE_HIDDEN, FC1_WIDTH};
pub use network::{Gradients, Network, Tape};

use crate::error::{Error, Result};
use crate::ops::{conv_out_extent, pool_out_extent, ConvSpec, NormKind, NormVariant};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv(ConvSpec),
    Norm(NormKind),
    Relu,
    MaxPool { k: usize, s: usize },
    Flatten,
    /// Append `age / 120` as one extra feature.
    ConcatAge,
    Linear { out: usize },
    /// Add the age-encoder output (Linear - LayerNorm - Linear).
    AddAgeHead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

/// Ordered layer list for a configuration (no shape checks).
pub fn layer_stack(config: &ModelConfig) -> Vec<Layer> {
    let f = config.widening_factor;
    let norm = NormKind::new(config.norm);
    let convs = [
        (config.first_layer.conv_spec(4 * f), (3, 2)),
        (ConvSpec { k: 3, c_out: 32 * f, p: 0, s: 1, d: 2 }, (3, 2)),
        (ConvSpec { k: 5, c_out: 64 * f, p: 2, s: 1, d: 2 }, (3, 2)),
        (ConvSpec { k: 3, c_out: 64 * f, p: 1, s: 1, d: 2 }, (5, 2)),
    ];
    let mut layers = Vec::new();
    for (i, (spec, (k, s))) in convs.into_iter().enumerate() {
        let b = format!("block{}", i + 1);
        layers.push(Layer::new(format!("{b}.conv"), LayerKind::Conv(spec)));
        layers.push(Layer::new(format!("{b}.norm"), LayerKind::Norm(norm)));
        layers.push(Layer::new(format!("{b}.relu"), LayerKind::Relu));
        layers.push(Layer::new(format!("{b}.pool"), LayerKind::MaxPool { k, s }));
    }
    for j in 0..config.extra_blocks {
        let b = format!("extra{}", j + 1);
        let spec = ConvSpec { k: 3, c_out: 64 * f, p: 1, s: 1, d: 1 };
        layers.push(Layer::new(format!("{b}.conv"), LayerKind::Conv(spec)));
        layers.push(Layer::new(format!("{b}.norm"), LayerKind::Norm(NormKind::new(NormVariant::Instance))));
        layers.push(Layer::new(format!("{b}.relu"), LayerKind::Relu));
    }
    layers.push(Layer::new("flatten", LayerKind::Flatten));
    if config.age_mode == AgeMode::Concat {
        layers.push(Layer::new("age_concat", LayerKind::ConcatAge));
    }
    layers.push(Layer::new("fc1", LayerKind::Linear { out: FC1_WIDTH }));
    if config.age_mode == AgeMode::Encoded {
        layers.push(Layer::new("age", LayerKind::AddAgeHead));
    }
    layers.push(Layer::new("fc1.relu", LayerKind::Relu));
    layers.push(Layer::new("fc2", LayerKind::Linear { out: config.num_classes }));
    layers
}

/// Per-layer output shapes (without the batch axis) for a single-channel
/// cubic crop, computed without running the network.
pub fn infer_shapes(config: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>> {
    config.validate()?;
    shapes_for(&layer_stack(config), config.crop_extent)
}

pub(crate) fn shapes_for(layers: &[Layer], crop: usize) -> Result<Vec<(String, Vec<usize>)>> {
    let mut shape = vec![1, crop, crop, crop];
    let mut out = Vec::with_capacity(layers.len());
    let fail = |layer: &Layer, reason: String| Error::ShapeInference {
        layer: layer.name.clone(),
        reason,
    };
    for layer in layers {
        shape = match &layer.kind {
            LayerKind::Conv(spec) => {
                let mut s = vec![spec.c_out];
                for &e in &shape[1..] {
                    let o = conv_out_extent(e, spec.k, spec.p, spec.s, spec.d).ok_or_else(|| {
                        fail(
                            layer,
                            format!(
                                "{spec} needs an input extent of at least {} (after padding), got {e}",
                                spec.effective_kernel().saturating_sub(2 * spec.p).max(1)
                            ),
                        )
                    })?;
                    s.push(o);
                }
                s
            }
            LayerKind::MaxPool { k, s } => {
                let mut o = vec![shape[0]];
                for &e in &shape[1..] {
                    o.push(pool_out_extent(e, *k, *s).ok_or_else(|| {
                        fail(layer, format!("window k{k}-s{s} larger than input extent {e}"))
                    })?);
                }
                o
            }
            LayerKind::Norm(_) | LayerKind::Relu | LayerKind::AddAgeHead => shape.clone(),
            LayerKind::Flatten => vec![shape.iter().product()],
            LayerKind::ConcatAge => vec![shape[0] + 1],
            LayerKind::Linear { out } => vec![*out],
        };
        out.push((layer.name.clone(), shape.clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spatial(shapes: &[(String, Vec<usize>)], name: &str) -> usize {
        shapes.iter().find(|(n, _)| n == name).unwrap().1[1]
    }

    #[test]
    fn backbone_progression_at_96() {
        for f in [1, 2, 4, 8] {
            let cfg = ModelConfig { widening_factor: f, ..Default::default() };
            let shapes = infer_shapes(&cfg).unwrap();
            let got: Vec<usize> = ["block1.conv", "block1.pool", "block2.conv", "block2.pool", "block3.conv", "block3.pool", "block4.conv", "block4.pool"]
                .iter()
                .map(|n| spatial(&shapes, n))
                .collect();
            assert_eq!(got, vec![96, 47, 43, 21, 17, 8, 6, 1]);
            let channels: Vec<usize> = (1..=4).map(|b| shapes.iter().find(|(n, _)| *n == format!("block{b}.conv")).unwrap().1[0]).collect();
            assert_eq!(channels, vec![4 * f, 32 * f, 64 * f, 64 * f]);
            assert_eq!(shapes.iter().find(|(n, _)| n == "flatten").unwrap().1, vec![64 * f]);
        }
    }

    #[test]
    fn extra_blocks_preserve_extent() {
        let cfg = ModelConfig { extra_blocks: 2, ..Default::default() };
        let shapes = infer_shapes(&cfg).unwrap();
        assert_eq!(shapes.iter().find(|(n, _)| n == "extra1.conv").unwrap().1, vec![64, 1, 1, 1]);
        assert_eq!(shapes.iter().find(|(n, _)| n == "extra2.relu").unwrap().1, vec![64, 1, 1, 1]);
        let extra_norms = layer_stack(&cfg)
            .into_iter()
            .filter(|l| l.name.starts_with("extra") && matches!(l.kind, LayerKind::Norm(k) if k.variant == NormVariant::Instance))
            .count();
        assert_eq!(extra_norms, 2);
    }

    #[test]
    fn extra_blocks_use_instance_norm_under_batch_config() {
        let cfg = ModelConfig { norm: NormVariant::Batch, extra_blocks: 1, ..Default::default() };
        let layers = layer_stack(&cfg);
        let kind = |n: &str| layers.iter().find(|l| l.name == n).unwrap().kind.clone();
        assert!(matches!(kind("block1.norm"), LayerKind::Norm(k) if k.variant == NormVariant::Batch));
        assert!(matches!(kind("extra1.norm"), LayerKind::Norm(k) if k.variant == NormVariant::Instance));
    }

    #[test]
    fn too_small_crop_names_failing_layer() {
        let cfg = ModelConfig { crop_extent: 32, ..Default::default() };
        match infer_shapes(&cfg) {
            Err(Error::ShapeInference { layer, .. }) => assert_eq!(layer, "block3.pool"),
            other => panic!("expected shape inference failure, got {other:?}"),
        }
        // smallest crop the default backbone accepts
        assert!(infer_shapes(&ModelConfig { crop_extent: 87, ..Default::default() }).is_ok());
        assert!(infer_shapes(&ModelConfig { crop_extent: 86, ..Default::default() }).is_err());
    }

    #[test]
    fn age_modes_change_feature_sizes() {
        let cfg = ModelConfig { age_mode: AgeMode::Concat, ..Default::default() };
        let shapes = infer_shapes(&cfg).unwrap();
        assert_eq!(shapes.iter().find(|(n, _)| n == "age_concat").unwrap().1, vec![65]);
        let cfg = ModelConfig { age_mode: AgeMode::Encoded, ..Default::default() };
        let shapes = infer_shapes(&cfg).unwrap();
        assert_eq!(shapes.iter().find(|(n, _)| n == "age").unwrap().1, vec![FC1_WIDTH]);
        assert_eq!(shapes.last().unwrap().1, vec![3]);
    }
}
