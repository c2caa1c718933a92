use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{ConvSpec, NormVariant};

/// First convolution of block 1: the small-kernel default and the two
/// early-downsampling alternatives used in the kernel ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FirstLayer {
    K1S1,
    K3S2,
    K7S4,
}

impl FirstLayer {
    pub fn conv_spec(self, c_out: usize) -> ConvSpec {
        let (k, p, s) = match self {
            FirstLayer::K1S1 => (1, 0, 1),
            FirstLayer::K3S2 => (3, 0, 2),
            FirstLayer::K7S4 => (7, 3, 4),
        };
        ConvSpec { k, c_out, p, s, d: 1 }
    }
}

impl std::fmt::Display for FirstLayer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FirstLayer::K1S1 => "k1s1",
            FirstLayer::K3S2 => "k3s2",
            FirstLayer::K7S4 => "k7s4",
        })
    }
}

impl std::str::FromStr for FirstLayer {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "k1s1" => Ok(FirstLayer::K1S1),
            "k3s2" => Ok(FirstLayer::K3S2),
            "k7s4" => Ok(FirstLayer::K7S4),
            other => Err(Error::invalid(format!("unknown first layer `{other}` (k1s1, k3s2, k7s4)"))),
        }
    }
}

/// How (and whether) patient age enters the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgeMode {
    None,
    /// Sinusoidal encoding through Linear(512) - LayerNorm - Linear(1024),
    /// added to the FC1 output.
    Encoded,
    /// `age / 120` appended as one extra feature before FC1.
    Concat,
}

impl std::fmt::Display for AgeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AgeMode::None => "none",
            AgeMode::Encoded => "encoded",
            AgeMode::Concat => "concat",
        })
    }
}

impl std::str::FromStr for AgeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(AgeMode::None),
            "encoded" => Ok(AgeMode::Encoded),
            "concat" | "concatbaseline" | "baseline" => Ok(AgeMode::Concat),
            other => Err(Error::invalid(format!("unknown age mode `{other}` (none, encoded, concat)"))),
        }
    }
}

pub const FC1_WIDTH: usize = 1024;
pub const AGE_HIDDEN: usize = 512;

/// The full ablation space of the backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widening_factor: usize,
    pub norm: NormVariant,
    pub first_layer: FirstLayer,
    pub extra_blocks: usize,
    pub age_mode: AgeMode,
    pub crop_extent: usize,
    pub num_classes: usize,
    pub d_model: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widening_factor: 1,
            norm: NormVariant::Instance,
            first_layer: FirstLayer::K1S1,
            extra_blocks: 0,
            age_mode: AgeMode::None,
            crop_extent: 96,
            num_classes: 3,
            d_model: crate::ops::age::DEFAULT_D_MODEL,
        }
    }
}

impl ModelConfig {
    /// Field-level checks; whether the crop survives the layer stack is
    /// decided by shape inference.
    pub fn validate(&self) -> Result<()> {
        if self.widening_factor == 0 {
            return Err(Error::invalid("widening_factor must be >= 1"));
        }
        if self.norm == NormVariant::Layer {
            return Err(Error::invalid("backbone norm must be instance or batch"));
        }
        if self.crop_extent == 0 {
            return Err(Error::invalid("crop_extent must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be >= 2"));
        }
        if self.age_mode == AgeMode::Encoded && (self.d_model == 0 || self.d_model % 2 != 0) {
            return Err(Error::invalid(format!("d_model must be even and positive, got {}", self.d_model)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigText(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
