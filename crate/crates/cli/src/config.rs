//! Flat run configuration: one TOML table covering data, model, training,
//! evaluation, saliency and synthetic-data settings.

use std::path::{Path, PathBuf};

use neurovol::data::{Split, SynthConfig};
use neurovol::metrics::BootstrapConfig;
use neurovol::model::{AgeMode, FirstLayer, ModelConfig};
use neurovol::ops::NormVariant;
use neurovol::optim::TrainConfig;
use neurovol::saliency::{View, DEFAULT_SMOOTHING, DEFAULT_VIEWS};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; `None` uses every core.
    pub threads: Option<usize>,
    pub out_dir: PathBuf,
    /// Run directory name; defaults to `<timestamp>-seed<seed>`.
    pub run_name: Option<String>,

    pub manifest: Option<PathBuf>,
    pub normalize: bool,
    pub allow_leakage: bool,
    /// Fraction of training subjects kept per class.
    pub subsample: f64,

    pub widening_factor: usize,
    pub norm: NormVariant,
    pub first_layer: FirstLayer,
    pub extra_blocks: usize,
    pub age_mode: AgeMode,
    pub crop_extent: usize,
    pub d_model: usize,

    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: Option<usize>,
    pub max_epochs: usize,
    pub class_weights: bool,
    pub augment: bool,
    pub blur_sigma_max: f64,
    pub stop_at_train_accuracy: Option<f64>,
    pub log_timing: bool,

    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub bootstrap_resamples: usize,
    pub ci_alpha: f64,

    pub views: Vec<String>,
    pub smoothing: f64,

    pub n_per_class: usize,
    pub synth_extent: usize,
    pub synth_noise: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let boot = BootstrapConfig::default();
        let synth = SynthConfig::default();
        Self {
            seed: 0,
            threads: None,
            out_dir: "runs".into(),
            run_name: None,
            manifest: None,
            normalize: true,
            allow_leakage: false,
            subsample: 1.0,
            widening_factor: model.widening_factor,
            norm: model.norm,
            first_layer: model.first_layer,
            extra_blocks: model.extra_blocks,
            age_mode: model.age_mode,
            crop_extent: model.crop_extent,
            d_model: model.d_model,
            learning_rate: train.learning_rate,
            momentum: train.momentum,
            batch_size: train.batch_size,
            max_epochs: train.max_epochs,
            class_weights: train.class_weights,
            augment: train.augment,
            blur_sigma_max: train.blur_sigma_max,
            stop_at_train_accuracy: train.stop_at_train_accuracy,
            log_timing: false,
            checkpoint: None,
            split: Split::Test,
            bootstrap_resamples: boot.resamples,
            ci_alpha: boot.alpha,
            views: DEFAULT_VIEWS.iter().map(|v| v.to_string()).collect(),
            smoothing: DEFAULT_SMOOTHING,
            n_per_class: synth.n_per_class,
            synth_extent: synth.extent,
            synth_noise: synth.noise,
        }
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Parse one override value: TOML syntax first (numbers, booleans, quoted
/// strings, arrays), falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Turn `--key value` / `--key=value` pairs into (key, value) tuples.
/// Dashes in keys map to underscores.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| config_err(format!("expected `--key value`, found `{a}`")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| config_err(format!("`--{key}` needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

fn from_table(table: toml::Table) -> Result<RunConfig, CliError> {
    let cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    /// Defaults, then the file (if any), then the overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| config_err(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (k, v) in overrides {
            table.insert(k.clone(), parse_value(v));
        }
        from_table(table)
    }

    /// This config with `overrides` applied, revalidated.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut table: toml::Table = self.to_toml().parse().expect("serialized config parses");
        for (k, v) in overrides {
            table.insert(k.clone(), parse_value(v));
        }
        from_table(table)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model().validate().map_err(|e| config_err(e.to_string()))?;
        self.train().validate(self.norm).map_err(|e| config_err(e.to_string()))?;
        if !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(config_err(format!("subsample must be in (0, 1], got {}", self.subsample)));
        }
        if self.threads == Some(0) {
            return Err(config_err("threads must be >= 1"));
        }
        if self.bootstrap_resamples == 0 || !(self.ci_alpha > 0.0 && self.ci_alpha < 1.0) {
            return Err(config_err("bootstrap_resamples must be >= 1 and ci_alpha in (0, 1)"));
        }
        if !(self.smoothing >= 0.0) {
            return Err(config_err("smoothing must be >= 0"));
        }
        self.parsed_views()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            widening_factor: self.widening_factor,
            norm: self.norm,
            first_layer: self.first_layer,
            extra_blocks: self.extra_blocks,
            age_mode: self.age_mode,
            crop_extent: self.crop_extent,
            d_model: self.d_model,
            ..ModelConfig::default()
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            seed: self.seed,
            checkpoint: None,
            class_weights: self.class_weights,
            augment: self.augment,
            blur_sigma_max: self.blur_sigma_max,
            stop_at_train_accuracy: self.stop_at_train_accuracy,
            log_timing: self.log_timing,
        }
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            resamples: self.bootstrap_resamples,
            alpha: self.ci_alpha,
            ..BootstrapConfig::default()
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_per_class: self.n_per_class,
            extent: self.synth_extent,
            noise: self.synth_noise,
        }
    }

    pub fn parsed_views(&self) -> Result<Vec<View>, CliError> {
        self.views
            .iter()
            .map(|v| v.parse().map_err(|e: neurovol::Error| config_err(e.to_string())))
            .collect()
    }

    pub fn manifest_path(&self) -> Result<&Path, CliError> {
        self.manifest.as_deref().ok_or_else(|| config_err("no manifest given (set `manifest`)"))
    }

    pub fn checkpoint_path(&self) -> Result<&Path, CliError> {
        self.checkpoint.as_deref().ok_or_else(|| config_err("no checkpoint given (set `checkpoint`)"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[&str]) -> Vec<(String, String)> {
        parse_overrides(&pairs.iter().map(|s| s.to_string()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, c.to_toml()).unwrap();
        assert_eq!(RunConfig::load(Some(&p), &[]).unwrap(), c);
    }

    #[test]
    fn overrides_are_typed() {
        let c = RunConfig::load(
            None,
            &ov(&["--seed", "7", "--norm", "batch", "--learning-rate=0.001", "--views", "[\"axial3\"]", "--manifest", "data/m.csv"]),
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.norm, NormVariant::Batch);
        assert_eq!(c.learning_rate, 0.001);
        assert_eq!(c.views, vec!["axial3".to_string()]);
        assert_eq!(c.manifest, Some(PathBuf::from("data/m.csv")));
        assert_eq!(c.train().effective_batch_size(c.norm), 16);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(RunConfig::load(None, &ov(&["--sed", "1"])), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::load(None, &ov(&["--widening_factor", "0"])), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::load(None, &ov(&["--subsample", "1.5"])), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::load(None, &ov(&["--views", "[\"oblique2\"]"])), Err(CliError::Config(_))));
        assert!(parse_overrides(&["seed".to_string()]).is_err());
        assert!(parse_overrides(&["--seed".to_string()]).is_err());
    }
}
