//! SGD with momentum and the training loop: seeded shuffling, blur + crop
//! augmentation, per-epoch validation and best-validation-loss
//! checkpointing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{center_crop, gaussian_blur, random_crop, Split, VolumeSample};
use crate::error::{Error, Result};
use crate::metrics::{balanced_accuracy, SampleRecord, NUM_CLASSES};
use crate::model::{self, AgeMode, Network};
use crate::ops::{softmax_xent, Mode, NormVariant};
use crate::rng::{Rng, Stream};
use crate::tensor::Tensor;

/// Classical momentum: `v = momentum * v + g; p -= lr * v`, for every key.
/// The three maps must have identical key sets and matching shapes.
pub fn sgd_step(
    params: &mut BTreeMap<String, Tensor<f32>>,
    grads: &BTreeMap<String, Tensor<f32>>,
    velocity: &mut BTreeMap<String, Tensor<f32>>,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    let keys = |m: &BTreeMap<String, Tensor<f32>>| m.keys().cloned().collect::<BTreeSet<_>>();
    let (pk, gk, vk) = (keys(params), keys(grads), keys(velocity));
    if pk != gk || pk != vk {
        let diff: Vec<&String> = pk.symmetric_difference(&gk).chain(pk.symmetric_difference(&vk)).collect();
        return Err(Error::KeyMismatch(format!("params / grads / velocity differ on {diff:?}")));
    }
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let v = velocity.get_mut(name).expect("key sets checked");
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let (lr, m) = (lr as f32, momentum as f32);
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = m * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Zero momentum buffers for every parameter.
pub fn zero_velocity(net: &Network<f32>) -> BTreeMap<String, Tensor<f32>> {
    net.params()
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()).expect("parameter shape is valid")))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// `None` picks 4, or 16 for batch-normalized models.
    pub batch_size: Option<usize>,
    pub max_epochs: usize,
    pub seed: u64,
    /// Best checkpoint destination; `None` keeps it in memory only.
    pub checkpoint: Option<PathBuf>,
    /// Inverse-frequency class weights in the training loss.
    pub class_weights: bool,
    /// Blur + random crop for training samples (center crop otherwise).
    pub augment: bool,
    pub blur_sigma_max: f64,
    /// Stop once a checkpointed epoch reaches this (eval-mode, center-crop)
    /// training accuracy. Training accuracy is only computed when set.
    pub stop_at_train_accuracy: Option<f64>,
    /// Record wall time per epoch; when off the `seconds` column is 0 so
    /// reruns produce byte-identical logs.
    pub log_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: None,
            max_epochs: 100,
            seed: 0,
            checkpoint: None,
            class_weights: false,
            augment: true,
            blur_sigma_max: 1.5,
            stop_at_train_accuracy: None,
            log_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn effective_batch_size(&self, norm: NormVariant) -> usize {
        self.batch_size.unwrap_or(if norm == NormVariant::Batch { 16 } else { 4 })
    }

    pub fn validate(&self, norm: NormVariant) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        let b = self.effective_batch_size(norm);
        if b == 0 || (norm == NormVariant::Batch && b < 2) {
            return Err(Error::invalid(format!("batch_size {b} is invalid for {norm} normalization")));
        }
        if !(self.blur_sigma_max >= 0.0) {
            return Err(Error::invalid("blur_sigma_max must be >= 0"));
        }
        if let Some(a) = self.stop_at_train_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::invalid("stop_at_train_accuracy must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_bal_acc: f64,
    pub seconds: f64,
    pub checkpointed: bool,
    /// Only when `stop_at_train_accuracy` is set; not part of the CSV.
    #[serde(skip)]
    pub train_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,train_loss,val_loss,val_bal_acc,seconds,checkpointed";

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.3},{}",
            self.epoch, self.train_loss, self.val_loss, self.val_bal_acc, self.seconds, self.checkpointed
        )
    }
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRAIN_LOG_HEADER}\n");
        for r in &self.epochs {
            let _ = writeln!(s, "{}", r.csv_line());
        }
        s
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.epochs.iter().map(|r| r.val_loss).min_by(f64::total_cmp)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Network of the best (lowest validation loss) epoch.
    pub network: Network<f32>,
    pub velocity: BTreeMap<String, Tensor<f32>>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub log: TrainLog,
}

fn stack(volumes: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut shape = vec![volumes.len()];
    shape.extend_from_slice(volumes[0].shape());
    let mut data = Vec::with_capacity(volumes.len() * volumes[0].len());
    for v in volumes {
        data.extend_from_slice(v.data());
    }
    Tensor::new(&shape, data)
}

fn ages_for(net: &Network<f32>, samples: &[&VolumeSample]) -> Option<Vec<f64>> {
    (net.config().age_mode != AgeMode::None).then(|| samples.iter().map(|s| s.age).collect())
}

/// Inverse-frequency weights `N / (K * n_c)` (0 for absent classes).
pub fn inverse_frequency_weights(samples: &[VolumeSample]) -> Vec<f64> {
    let mut counts = [0usize; NUM_CLASSES];
    for s in samples {
        counts[s.label.index()] += 1;
    }
    let n = samples.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n / (NUM_CLASSES as f64 * c as f64) })
        .collect()
}

/// Eval-mode predictions on center crops plus the mean cross-entropy.
pub fn predict(net: &Network<f32>, samples: &[VolumeSample], batch_size: usize) -> Result<(Vec<SampleRecord>, f64)> {
    let crop = net.config().crop_extent;
    let mut records = Vec::with_capacity(samples.len());
    let mut loss_sum = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let vols = chunk
            .iter()
            .map(|s| center_crop(&s.volume, crop).map(|c| c.0))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&VolumeSample> = chunk.iter().collect();
        let ages = ages_for(net, &refs);
        let logits = net.predict(&stack(&vols)?, ages.as_deref())?;
        let labels: Vec<usize> = chunk.iter().map(|s| s.label.index()).collect();
        let out = softmax_xent(&logits, &labels, None)?;
        loss_sum += out.loss * chunk.len() as f64;
        for (i, s) in chunk.iter().enumerate() {
            let row = &out.probs.data()[i * NUM_CLASSES..(i + 1) * NUM_CLASSES];
            let probs = [f64::from(row[0]), f64::from(row[1]), f64::from(row[2])];
            records.push(SampleRecord::new(s.subject_id.clone(), s.label.index(), probs));
        }
    }
    Ok((records, loss_sum / samples.len() as f64))
}

fn check_sets(train: &[VolumeSample], val: &[VolumeSample]) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be non-empty"));
    }
    for (set, want) in [(train, Split::Train), (val, Split::Val)] {
        if let Some(s) = set.iter().find(|s| s.split != want) {
            return Err(Error::SplitViolation(format!(
                "sample `{}` tagged `{}` passed as {want} data",
                s.subject_id, s.split
            )));
        }
    }
    let train_ids: BTreeSet<&str> = train.iter().map(|s| s.subject_id.as_str()).collect();
    let mut leaks: Vec<String> = val
        .iter()
        .filter(|s| train_ids.contains(s.subject_id.as_str()))
        .map(|s| s.subject_id.clone())
        .collect();
    leaks.dedup();
    if !leaks.is_empty() {
        return Err(Error::Leakage(leaks));
    }
    Ok(())
}

/// Augmented (or center-cropped) training input for one sample. The
/// randomness comes from the augmentation stream at `counter`.
fn training_view(sample: &VolumeSample, crop: usize, cfg: &TrainConfig, rng: &Rng, counter: u64) -> Result<Tensor<f32>> {
    if !cfg.augment {
        return Ok(center_crop(&sample.volume, crop)?.0);
    }
    let mut r = rng.stream(Stream::Augment, counter);
    let sigma = if cfg.blur_sigma_max > 0.0 { r.random_range(0.0..cfg.blur_sigma_max) } else { 0.0 };
    let blurred = gaussian_blur(&sample.volume, sigma)?;
    Ok(random_crop(&blurred, crop, &mut r)?.0)
}

/// Train `net` on `train` with per-epoch validation on `val`.
///
/// The checkpoint (if configured) is rewritten whenever the validation loss
/// strictly improves; the returned network is that best one. A non-finite
/// training loss aborts with the epoch and batch.
pub fn train(net: Network<f32>, train: &[VolumeSample], val: &[VolumeSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(net, train, val, cfg, |_| {})
}

/// [`train`] with a callback after every epoch (for progress output).
pub fn train_with(
    mut net: Network<f32>,
    train: &[VolumeSample],
    val: &[VolumeSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let norm = net.config().norm;
    cfg.validate(norm)?;
    check_sets(train, val)?;
    for s in train.iter().chain(val) {
        s.validate()?;
    }
    let batch_size = cfg.effective_batch_size(norm);
    let crop = net.config().crop_extent;
    let weights = cfg.class_weights.then(|| inverse_frequency_weights(train));
    let rng = Rng::new(cfg.seed);
    let mut velocity = zero_velocity(&net);
    let mut best: Option<(f64, usize, Network<f32>, BTreeMap<String, Tensor<f32>>)> = None;
    let mut log = TrainLog::default();

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng.stream(Stream::Shuffle, epoch as u64));
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (b, batch) in order.chunks(batch_size).enumerate() {
            if norm == NormVariant::Batch && batch.len() < 2 {
                // batch statistics are undefined for a single sample
                continue;
            }
            let base = ((epoch - 1) * train.len() + b * batch_size) as u64;
            let views = batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| training_view(&train[i], crop, cfg, &rng, base + k as u64))
                .collect::<Result<Vec<_>>>()?;
            let samples: Vec<&VolumeSample> = batch.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = samples.iter().map(|s| s.label.index()).collect();
            let ages = ages_for(&net, &samples);
            let (logits, tape) = net.forward(&stack(&views)?, ages.as_deref(), Mode::Train)?;
            let out = softmax_xent(&logits, &labels, weights.as_deref())?;
            if !out.loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}, batch {}", b + 1)));
            }
            let grads = net.backward(&tape, &out.grad)?;
            net.commit_running_stats(&tape)?;
            sgd_step(net.params_mut(), &grads.params, &mut velocity, cfg.learning_rate, cfg.momentum)?;
            loss_sum += out.loss * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = loss_sum / seen.max(1) as f64;

        let (records, val_loss) = predict(&net, val, batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss at epoch {epoch}")));
        }
        let preds: Vec<usize> = records.iter().map(|r| r.pred).collect();
        let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
        let val_bal_acc = balanced_accuracy(&preds, &labels)?;

        let improved = best.as_ref().is_none_or(|b| val_loss < b.0);
        if improved {
            if let Some(path) = &cfg.checkpoint {
                model::save(path, &net, &velocity, val_loss)?;
            }
            best = Some((val_loss, epoch, net.clone(), velocity.clone()));
        }
        let train_accuracy = match cfg.stop_at_train_accuracy {
            Some(_) => {
                let (recs, _) = predict(&net, train, batch_size)?;
                Some(recs.iter().filter(|r| r.pred == r.label).count() as f64 / recs.len() as f64)
            }
            None => None,
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_bal_acc,
            seconds: if cfg.log_timing { start.elapsed().as_secs_f64() } else { 0.0 },
            checkpointed: improved,
            train_accuracy,
        };
        on_epoch(&record);
        log.epochs.push(record);
        if let (Some(target), Some(acc)) = (cfg.stop_at_train_accuracy, train_accuracy) {
            if improved && acc >= target {
                break;
            }
        }
    }
    let (best_val_loss, best_epoch, network, velocity) = best.ok_or_else(|| Error::invalid("max_epochs must be >= 1"))?;
    Ok(TrainOutcome {
        network,
        velocity,
        best_val_loss,
        best_epoch,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Label, SynthConfig};
    use crate::model::ModelConfig;

    fn map(pairs: &[(&str, f32)]) -> BTreeMap<String, Tensor<f32>> {
        pairs.iter().map(|(k, v)| (k.to_string(), Tensor::from_f64(&[1], &[f64::from(*v)]).unwrap())).collect()
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = map(&[("w", 1.0)]);
        let mut v = map(&[("w", 0.0)]);
        sgd_step(&mut p, &map(&[("w", 0.5)]), &mut v, 1.0, 0.0).unwrap();
        assert_eq!(p["w"].data(), &[0.5]);
    }

    #[test]
    fn zero_gradient_and_zero_lr_leave_params() {
        let mut p = map(&[("a", 0.3), ("b", -2.0)]);
        let before = p.clone();
        let mut v = map(&[("a", 0.0), ("b", 0.0)]);
        sgd_step(&mut p, &map(&[("a", 0.0), ("b", 0.0)]), &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p, before);
        let mut v = map(&[("a", 0.0), ("b", 0.0)]);
        sgd_step(&mut p, &map(&[("a", 5.0), ("b", 1.0)]), &mut v, 0.0, 0.9).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_recurrence() {
        let (p0, g) = (1.0f32, 0.5f32);
        let mut p = map(&[("w", p0)]);
        let mut v = map(&[("w", 0.0)]);
        let grads = map(&[("w", g)]);
        sgd_step(&mut p, &grads, &mut v, 0.01, 0.9).unwrap();
        sgd_step(&mut p, &grads, &mut v, 0.01, 0.9).unwrap();
        let want = f64::from(p0) - 0.01 * f64::from(g) - 0.01 * 1.9 * f64::from(g);
        assert!((f64::from(p["w"].data()[0]) - want).abs() < 1e-6);
    }

    #[test]
    fn key_mismatch_rejected() {
        let mut p = map(&[("a", 1.0)]);
        let mut v = map(&[("a", 0.0)]);
        assert!(matches!(sgd_step(&mut p, &map(&[("b", 1.0)]), &mut v, 0.1, 0.9), Err(Error::KeyMismatch(_))));
        let mut v = map(&[]);
        assert!(matches!(sgd_step(&mut p, &map(&[("a", 1.0)]), &mut v, 0.1, 0.9), Err(Error::KeyMismatch(_))));
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.momentum), (0.01, 0.9));
        assert_eq!(c.effective_batch_size(NormVariant::Instance), 4);
        assert_eq!(c.effective_batch_size(NormVariant::Batch), 16);
        assert!(TrainConfig { batch_size: Some(1), ..c.clone() }.validate(NormVariant::Batch).is_err());
        assert!(TrainConfig { batch_size: Some(1), ..c.clone() }.validate(NormVariant::Instance).is_ok());
        assert!(TrainConfig { momentum: 1.0, ..c.clone() }.validate(NormVariant::Instance).is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..c }.validate(NormVariant::Instance).is_err());
    }

    #[test]
    fn log_csv_format() {
        let log = TrainLog {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 1.5,
                val_loss: 1.25,
                val_bal_acc: 0.5,
                seconds: 0.0,
                checkpointed: true,
                train_accuracy: None,
            }],
        };
        assert_eq!(log.to_csv(), "epoch,train_loss,val_loss,val_bal_acc,seconds,checkpointed\n1,1.5,1.25,0.5,0.000,true\n");
    }

    fn tiny_sets(split_val: Split) -> (Vec<VolumeSample>, Vec<VolumeSample>) {
        let cfg = SynthConfig { n_per_class: 2, extent: 16, noise: 0.1 };
        let make = |seed, split: Split, tag: &str| {
            generate_synthetic(&cfg, &Rng::new(seed))
                .unwrap()
                .into_iter()
                .map(|s| VolumeSample {
                    volume: s.volume,
                    label: s.label,
                    age: s.age,
                    subject_id: format!("{tag}{}", s.subject_id),
                    split,
                })
                .collect::<Vec<_>>()
        };
        (make(1, Split::Train, "t"), make(2, split_val, "v"))
    }

    #[test]
    fn split_tags_and_leakage_enforced() {
        let (train_set, val) = tiny_sets(Split::Test);
        let net = Network::<f32>::build(&ModelConfig { crop_extent: 87, ..Default::default() }, &Rng::new(0)).unwrap();
        let cfg = TrainConfig { max_epochs: 1, ..Default::default() };
        assert!(matches!(train(net.clone(), &train_set, &val, &cfg), Err(Error::SplitViolation(_))));
        let (train_set, mut val) = tiny_sets(Split::Val);
        val[0].subject_id = train_set[3].subject_id.clone();
        assert!(matches!(train(net, &train_set, &val, &cfg), Err(Error::Leakage(v)) if v == vec![train_set[3].subject_id.clone()]));
    }

    #[test]
    fn inverse_frequency() {
        let (mut t, _) = tiny_sets(Split::Val);
        t.retain(|s| s.label != Label::AD || s.subject_id.ends_with('0'));
        // 2 CN, 2 MCI, 1 AD
        assert_eq!(inverse_frequency_weights(&t), vec![5.0 / 6.0, 5.0 / 6.0, 5.0 / 3.0]);
    }
}
