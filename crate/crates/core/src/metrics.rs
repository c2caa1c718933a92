//! Classification metrics: accuracy, balanced accuracy, one-vs-rest ROC/AUC
//! with micro and macro averaging, percentile bootstrap intervals, and the
//! report / CSV writers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};

pub const NUM_CLASSES: usize = 3;

fn check_pairs(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(Error::UndefinedMetric("metric of an empty sample".into()));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pairs(preds.len(), labels.len())?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// `matrix[true][pred]`.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    check_pairs(preds.len(), labels.len())?;
    let mut m = vec![vec![0; classes]; classes];
    for (&p, &l) in preds.iter().zip(labels) {
        if p >= classes || l >= classes {
            return Err(Error::invalid(format!("class index {} out of range", p.max(l))));
        }
        m[l][p] += 1;
    }
    Ok(m)
}

/// Unweighted mean of per-class recall over the classes present in
/// `labels`; absent classes are skipped with a warning.
pub fn balanced_accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    let m = confusion_matrix(preds, labels, NUM_CLASSES)?;
    balanced_from_confusion(&m, true)
}

fn balanced_from_confusion(m: &[Vec<usize>], warn: bool) -> Result<f64> {
    let mut sum = 0.0;
    let mut present = 0;
    for (c, row) in m.iter().enumerate() {
        let n: usize = row.iter().sum();
        if n == 0 {
            if warn {
                log::warn!("class {c} absent from labels; excluded from balanced accuracy");
            }
            continue;
        }
        sum += row[c] as f64 / n as f64;
        present += 1;
    }
    Ok(sum / present as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` count as positive. The first point uses
    /// `+inf` and the last `-inf` (serialized as `null` in JSON).
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Roc {
    pub auc: f64,
    pub points: Vec<RocPoint>,
}

/// AUC via the Mann-Whitney rank statistic (ties get average ranks, i.e.
/// half credit) and the ROC curve over every unique threshold, bracketed by
/// `(0, 0)` at `+inf` and `(1, 1)` at `-inf`.
pub fn roc_auc(scores: &[f64], positive: &[bool]) -> Result<Roc> {
    check_pairs(scores.len(), positive.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!("AUC undefined with {p} positives and {n} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // ascending pass: twice the rank sum of the positives, in integers, so
    // the only rounding is the final division
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average rank of the tie group is (i + j) / 2 + 1
        let pos_in_group = order[i..=j].iter().filter(|&&k| positive[k]).count() as u64;
        twice_rank_sum += (i + j + 2) as u64 * pos_in_group;
        i = j + 1;
    }
    let twice_u = twice_rank_sum - (p * (p + 1)) as u64;
    let auc = twice_u as f64 / (2 * p * n) as f64;

    // descending pass: one point per unique threshold
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = order.len();
    while i > 0 {
        let t = scores[order[i - 1]];
        while i > 0 && scores[order[i - 1]] == t {
            if positive[order[i - 1]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i -= 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n as f64,
            tpr: tp as f64 / p as f64,
            threshold: t,
        });
    }
    points.push(RocPoint { fpr: 1.0, tpr: 1.0, threshold: f64::NEG_INFINITY });
    Ok(Roc { auc, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassAuc {
    /// One-vs-rest AUC per class; `None` where the class is absent (or is
    /// the only class present).
    pub per_class: Vec<Option<f64>>,
    pub micro: f64,
    /// Mean of the defined per-class AUCs.
    pub macro_: f64,
    pub curves: Vec<Option<Roc>>,
}

/// One-vs-rest AUCs for `probs` rows (each summing to 1 within 1e-4).
pub fn multiclass_auc(probs: &[[f64; NUM_CLASSES]], labels: &[usize]) -> Result<MulticlassAuc> {
    multiclass_auc_impl(probs, labels, true)
}

fn multiclass_auc_impl(probs: &[[f64; NUM_CLASSES]], labels: &[usize], warn: bool) -> Result<MulticlassAuc> {
    check_pairs(probs.len(), labels.len())?;
    for (i, row) in probs.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!("probability row {i} sums to {s}")));
        }
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
        return Err(Error::invalid(format!("label {l} out of range")));
    }
    let mut per_class = Vec::with_capacity(NUM_CLASSES);
    let mut curves = Vec::with_capacity(NUM_CLASSES);
    for c in 0..NUM_CLASSES {
        let scores: Vec<f64> = probs.iter().map(|r| r[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        match roc_auc(&scores, &pos) {
            Ok(roc) => {
                per_class.push(Some(roc.auc));
                curves.push(Some(roc));
            }
            Err(Error::UndefinedMetric(why)) => {
                if warn {
                    log::warn!("class {c}: {why}; excluded from macro AUC");
                }
                per_class.push(None);
                curves.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("no class has a defined one-vs-rest AUC".into()));
    }
    let macro_ = defined.iter().sum::<f64>() / defined.len() as f64;
    let pooled: Vec<f64> = probs.iter().flat_map(|r| r.iter().copied()).collect();
    let pooled_pos: Vec<bool> = labels.iter().flat_map(|&l| (0..NUM_CLASSES).map(move |c| c == l)).collect();
    let micro = roc_auc(&pooled, &pooled_pos)?.auc;
    Ok(MulticlassAuc {
        per_class,
        micro,
        macro_,
        curves,
    })
}

/// Percentile interval of `metric` over `n_resamples` with-replacement
/// resamples of `records`. Resample `b` draws from its own stream; a
/// resample whose metric is undefined is redrawn from that stream, at most
/// `max_redraws` times in total across all resamples.
pub fn bootstrap_ci<R, F>(
    records: &[R],
    metric: F,
    n_resamples: usize,
    alpha: f64,
    rng: &Rng,
    max_redraws: usize,
) -> Result<(f64, f64)>
where
    R: Clone + Sync,
    F: Fn(&[R]) -> Result<f64> + Sync,
{
    if n_resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    if records.is_empty() {
        return Err(Error::UndefinedMetric("bootstrap of an empty sample".into()));
    }
    let n = records.len();
    let draws: Vec<(Option<f64>, usize)> = (0..n_resamples)
        .into_par_iter()
        .map(|b| {
            let mut r = rng.stream(Stream::Bootstrap, b as u64);
            let mut redraws = 0;
            loop {
                let sample: Vec<R> = (0..n).map(|_| records[r.random_range(0..n)].clone()).collect();
                match metric(&sample) {
                    Ok(v) => return (Some(v), redraws),
                    Err(Error::UndefinedMetric(_)) if redraws < max_redraws => redraws += 1,
                    Err(_) => return (None, redraws),
                }
            }
        })
        .collect();
    let total_redraws: usize = draws.iter().map(|d| d.1).sum();
    if draws.iter().any(|d| d.0.is_none()) || total_redraws > max_redraws {
        return Err(Error::UndefinedMetric(format!(
            "bootstrap gave up: {total_redraws} redraws for undefined resamples (cap {max_redraws}) over {n_resamples} resamples of {n} records"
        )));
    }
    let mut values: Vec<f64> = draws.into_iter().filter_map(|d| d.0).collect();
    values.sort_by(f64::total_cmp);
    Ok((quantile(&values, alpha / 2.0), quantile(&values, 1.0 - alpha / 2.0)))
}

/// Linear interpolation between order statistics (`(n - 1) q` position).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// One evaluated scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub subject_id: String,
    pub label: usize,
    pub probs: [f64; NUM_CLASSES],
    pub pred: usize,
}

impl SampleRecord {
    /// Prediction is the arg-max probability (first on ties).
    pub fn new(subject_id: impl Into<String>, label: usize, probs: [f64; NUM_CLASSES]) -> Self {
        let pred = (0..NUM_CLASSES).fold(0, |best, c| if probs[c] > probs[best] { c } else { best });
        Self {
            subject_id: subject_id.into(),
            label,
            probs,
            pred,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub alpha: f64,
    pub max_redraws: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 1000,
            alpha: 0.05,
            max_redraws: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

/// Everything `eval` reports. JSON keys: `n`, `accuracy`,
/// `balanced_accuracy`, `auc_per_class` (CN, MCI, AD; `null` if
/// undefined), `micro_auc`, `macro_auc`, `confusion` (`[true][pred]`),
/// `ci` (metric name to `{lo, hi}`), `bootstrap`, `records`, `roc`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub auc_per_class: Vec<Option<f64>>,
    pub micro_auc: f64,
    pub macro_auc: f64,
    pub confusion: Vec<Vec<usize>>,
    pub ci: BTreeMap<String, Interval>,
    pub bootstrap: BootstrapConfig,
    pub records: Vec<SampleRecord>,
    pub roc: Vec<Option<Vec<RocPoint>>>,
}

fn split_records(records: &[SampleRecord]) -> (Vec<usize>, Vec<usize>, Vec<[f64; NUM_CLASSES]>) {
    (
        records.iter().map(|r| r.pred).collect(),
        records.iter().map(|r| r.label).collect(),
        records.iter().map(|r| r.probs).collect(),
    )
}

fn metric_fns() -> [(&'static str, fn(&[SampleRecord]) -> Result<f64>); 4] {
    fn acc(r: &[SampleRecord]) -> Result<f64> {
        let (p, l, _) = split_records(r);
        accuracy(&p, &l)
    }
    fn bal(r: &[SampleRecord]) -> Result<f64> {
        let (p, l, _) = split_records(r);
        balanced_from_confusion(&confusion_matrix(&p, &l, NUM_CLASSES)?, false)
    }
    fn micro(r: &[SampleRecord]) -> Result<f64> {
        let (_, l, pr) = split_records(r);
        Ok(multiclass_auc_impl(&pr, &l, false)?.micro)
    }
    fn macro_(r: &[SampleRecord]) -> Result<f64> {
        let (_, l, pr) = split_records(r);
        // resamples missing a class are redrawn rather than averaged over fewer classes
        let m = multiclass_auc_impl(&pr, &l, false)?;
        if m.per_class.iter().any(Option::is_none) {
            return Err(Error::UndefinedMetric("resample lacks a class".into()));
        }
        Ok(m.macro_)
    }
    [("accuracy", acc), ("balanced_accuracy", bal), ("micro_auc", micro), ("macro_auc", macro_)]
}

impl EvalReport {
    pub fn new(records: Vec<SampleRecord>, bootstrap: BootstrapConfig, rng: &Rng) -> Result<Self> {
        let (preds, labels, probs) = split_records(&records);
        let auc = multiclass_auc(&probs, &labels)?;
        let mut ci = BTreeMap::new();
        for (i, (name, f)) in metric_fns().into_iter().enumerate() {
            let (lo, hi) = bootstrap_ci(&records, f, bootstrap.resamples, bootstrap.alpha, &rng.child(i as u64), bootstrap.max_redraws)?;
            ci.insert(name.to_string(), Interval { lo, hi });
        }
        Ok(Self {
            n: records.len(),
            accuracy: accuracy(&preds, &labels)?,
            balanced_accuracy: balanced_accuracy(&preds, &labels)?,
            auc_per_class: auc.per_class,
            micro_auc: auc.micro,
            macro_auc: auc.macro_,
            confusion: confusion_matrix(&preds, &labels, NUM_CLASSES)?,
            ci,
            bootstrap,
            records,
            roc: auc.curves.into_iter().map(|c| c.map(|r| r.points)).collect(),
        })
    }

    /// The four headline metrics with their intervals, one per line.
    pub fn headline(&self) -> String {
        let mut s = String::new();
        for (name, key, v) in [
            ("Accuracy", "accuracy", self.accuracy),
            ("Balanced Acc", "balanced_accuracy", self.balanced_accuracy),
            ("Micro-AUC", "micro_auc", self.micro_auc),
            ("Macro-AUC", "macro_auc", self.macro_auc),
        ] {
            let ci = self.ci[key];
            let _ = writeln!(s, "{name:<13} {:5.1}%  [{:5.1}%, {:5.1}%]", 100.0 * v, 100.0 * ci.lo, 100.0 * ci.hi);
        }
        let per: Vec<String> = Label::ALL
            .iter()
            .zip(&self.auc_per_class)
            .map(|(l, a)| match a {
                Some(a) => format!("{l} {:.1}%", 100.0 * a),
                None => format!("{l} n/a"),
            })
            .collect();
        let _ = writeln!(s, "{:<13} {}", "AUC per class", per.join(", "));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// One `<prefix>_<class>.csv` per class with a defined curve (header
/// `fpr,tpr,threshold`). Returns the files written.
pub fn export_roc(report: &EvalReport, prefix: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (label, curve) in Label::ALL.iter().zip(&report.roc) {
        let Some(points) = curve else { continue };
        let path = PathBuf::from(format!("{}_{}.csv", prefix.display(), label.to_string().to_lowercase()));
        let mut s = String::from("fpr,tpr,threshold\n");
        for p in points {
            let _ = writeln!(s, "{},{},{}", p.fpr, p.tpr, p.threshold);
        }
        fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Per-sample CSV: `subject_id,label,p_cn,p_mci,p_ad,pred` with class
/// names for `label` and `pred`.
pub fn write_logits_csv(records: &[SampleRecord], path: &Path) -> Result<()> {
    let mut s = String::from("subject_id,label,p_cn,p_mci,p_ad,pred\n");
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.subject_id,
            Label::from_index(r.label)?,
            r.probs[0],
            r.probs[1],
            r.probs[2],
            Label::from_index(r.pred)?
        );
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    pub(crate) fn brute_auc(scores: &[f64], pos: &[bool]) -> f64 {
        let mut num = 0.0;
        let (mut p, mut n) = (0usize, 0usize);
        for i in 0..scores.len() {
            if pos[i] {
                p += 1;
            } else {
                n += 1;
            }
        }
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if pos[i] && !pos[j] {
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / (p * n) as f64
    }

    #[test]
    fn accuracy_examples() {
        let l = [0, 1, 2, 0, 1, 2];
        assert_eq!(accuracy(&l, &l).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&l, &l).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[0; 6], &l).unwrap(), 1.0 / 3.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn balanced_from_confusion_counts() {
        // diag (8, 5, 9), ten per class
        let mut labels = Vec::new();
        let mut preds = Vec::new();
        for (c, hits) in [(0usize, 8usize), (1, 5), (2, 9)] {
            for k in 0..10 {
                labels.push(c);
                preds.push(if k < hits { c } else { (c + 1) % 3 });
            }
        }
        assert_eq!(balanced_accuracy(&preds, &labels).unwrap(), (0.8 + 0.5 + 0.9) / 3.0);
        assert_eq!(accuracy(&preds, &labels).unwrap(), 22.0 / 30.0);
    }

    #[test]
    fn balanced_skips_absent_class() {
        assert_eq!(balanced_accuracy(&[0, 1, 1], &[0, 1, 1]).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[0, 0, 1], &[0, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn roc_examples() {
        let r = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(r.auc, 1.0);
        let distinct: Vec<(f64, f64)> = r.points.iter().map(|p| (p.fpr, p.tpr)).fold(Vec::new(), |mut v, p| {
            if v.last() != Some(&p) {
                v.push(p);
            }
            v
        });
        assert_eq!(distinct, vec![(0.0, 0.0), (0.0, 0.5), (0.0, 1.0), (0.5, 1.0), (1.0, 1.0)]);
        let two = roc_auc(&[1.0, 0.0], &[true, false]).unwrap();
        assert_eq!(two.points.iter().map(|p| (p.fpr, p.tpr)).collect::<Vec<_>>(), vec![(0.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, 1.0)]);
        let tied = roc_auc(&[0.3; 5], &[true, false, true, false, false]).unwrap();
        assert_eq!(tied.auc, 0.5);
        assert_eq!(tied.points.len(), 3);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn rank_auc_equals_pairwise_count() {
        for seed in 0..200u64 {
            let mut r = Rng::new(seed).stream(Stream::Test, 0);
            let n = r.random_range(2..60);
            // coarse scores so ties occur
            let scores: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..12u8)) / 11.0).collect();
            let mut pos: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
            pos[0] = true;
            pos[1] = false;
            let got = roc_auc(&scores, &pos).unwrap();
            assert!((got.auc - brute_auc(&scores, &pos)).abs() < 1e-12);
            assert_eq!(got.points.len(), {
                let mut s = scores.clone();
                s.sort_by(f64::total_cmp);
                s.dedup();
                s.len() + 2
            });
            assert!(got.points.windows(2).all(|w| w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr));
        }
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_maps(raw in proptest::collection::vec((0u8..20, any::<bool>()), 2..40), a in 0.1f64..5.0, b in -3.0f64..3.0) {
            let mut pos: Vec<bool> = raw.iter().map(|x| x.1).collect();
            pos[0] = true;
            pos[1] = false;
            let s: Vec<f64> = raw.iter().map(|x| f64::from(x.0)).collect();
            let base = roc_auc(&s, &pos).unwrap().auc;
            let mapped: Vec<f64> = s.iter().map(|v| (a * v + b).exp()).collect();
            prop_assert_eq!(roc_auc(&mapped, &pos).unwrap().auc, base);
            let cubed: Vec<f64> = s.iter().map(|v| v.powi(3) - 7.0).collect();
            prop_assert_eq!(roc_auc(&cubed, &pos).unwrap().auc, base);
            let flipped: Vec<bool> = pos.iter().map(|b| !b).collect();
            prop_assert!((roc_auc(&s, &flipped).unwrap().auc - (1.0 - base)).abs() <= f64::EPSILON);
        }
    }

    #[test]
    fn multiclass_examples() {
        let labels = [0, 1, 2, 0, 1, 2];
        let onehot: Vec<[f64; 3]> = labels.iter().map(|&l| { let mut r = [0.0; 3]; r[l] = 1.0; r }).collect();
        let m = multiclass_auc(&onehot, &labels).unwrap();
        assert_eq!(m.per_class, vec![Some(1.0); 3]);
        assert_eq!((m.micro, m.macro_), (1.0, 1.0));
        let uniform = vec![[1.0 / 3.0; 3]; 6];
        let m = multiclass_auc(&uniform, &labels).unwrap();
        assert_eq!(m.per_class, vec![Some(0.5); 3]);
        assert_eq!((m.micro, m.macro_), (0.5, 0.5));
        assert!(multiclass_auc(&[[0.5, 0.2, 0.2]], &[0]).is_err());
    }

    #[test]
    fn micro_matches_pooled_pairwise_count() {
        let mut r = Rng::new(11).stream(Stream::Test, 0);
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..30 {
            let raw = [r.random::<f64>(), r.random::<f64>(), r.random::<f64>()];
            let s: f64 = raw.iter().sum();
            probs.push(raw.map(|v| v / s));
            labels.push(i % 3);
        }
        let m = multiclass_auc(&probs, &labels).unwrap();
        let pooled: Vec<f64> = probs.iter().flatten().copied().collect();
        let pos: Vec<bool> = labels.iter().flat_map(|&l| (0..3).map(move |c| c == l)).collect();
        assert!((m.micro - brute_auc(&pooled, &pos)).abs() < 1e-12);
        let defined: Vec<f64> = m.per_class.iter().flatten().copied().collect();
        assert_eq!(m.macro_, defined.iter().sum::<f64>() / 3.0);
    }

    #[test]
    fn micro_differs_from_macro_when_imbalanced() {
        let labels = [0, 0, 0, 0, 0, 0, 1, 2];
        let probs = [
            [0.8, 0.1, 0.1],
            [0.7, 0.2, 0.1],
            [0.6, 0.3, 0.1],
            [0.5, 0.3, 0.2],
            [0.4, 0.4, 0.2],
            [0.3, 0.4, 0.3],
            [0.5, 0.3, 0.2],
            [0.2, 0.3, 0.5],
        ];
        let m = multiclass_auc(&probs, &labels).unwrap();
        assert!((m.micro - m.macro_).abs() > 0.01, "{} vs {}", m.micro, m.macro_);
    }

    #[test]
    fn absent_class_excluded_from_macro_only() {
        let probs = [[0.7, 0.2, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1]];
        let m = multiclass_auc(&probs, &[0, 1, 0]).unwrap();
        assert_eq!(m.per_class[2], None);
        assert_eq!(m.macro_, (m.per_class[0].unwrap() + m.per_class[1].unwrap()) / 2.0);
    }

    fn records(n: usize, seed: u64) -> Vec<SampleRecord> {
        let mut r = Rng::new(seed).stream(Stream::Test, 1);
        (0..n)
            .map(|i| {
                let label = i % 3;
                let mut p = [r.random::<f64>(), r.random::<f64>(), r.random::<f64>()];
                p[label] += 0.8;
                let s: f64 = p.iter().sum();
                SampleRecord::new(format!("s{i}"), label, p.map(|v| v / s))
            })
            .collect()
    }

    #[test]
    fn bootstrap_contracts() {
        let recs = records(100, 3);
        let constant = bootstrap_ci(&recs, |_| Ok(0.25), 50, 0.05, &Rng::new(1), 10).unwrap();
        assert_eq!(constant, (0.25, 0.25));
        let acc = |r: &[SampleRecord]| {
            let (p, l, _) = split_records(r);
            accuracy(&p, &l)
        };
        let a = bootstrap_ci(&recs, acc, 1000, 0.05, &Rng::new(9), 10).unwrap();
        let b = bootstrap_ci(&recs, acc, 1000, 0.05, &Rng::new(9), 10).unwrap();
        assert_eq!(a, b);
        let point = acc(&recs).unwrap();
        assert!(a.0 <= point && point <= a.1, "{a:?} {point}");
        assert!(a.0 < a.1);
        assert!(bootstrap_ci(&recs, acc, 0, 0.05, &Rng::new(9), 10).is_err());
        assert!(bootstrap_ci(&recs, acc, 10, 1.0, &Rng::new(9), 10).is_err());
    }

    #[test]
    fn bootstrap_redraw_cap() {
        let recs = records(9, 1);
        let never = |_: &[SampleRecord]| Err(Error::UndefinedMetric("never".into()));
        let err = bootstrap_ci(&recs, never, 5, 0.05, &Rng::new(1), 20).unwrap_err();
        assert!(err.to_string().contains("cap 20"));
    }

    #[test]
    fn report_and_exports() {
        let recs = records(30, 5);
        let rep = EvalReport::new(recs.clone(), BootstrapConfig { resamples: 200, ..Default::default() }, &Rng::new(2)).unwrap();
        let defined: Vec<f64> = rep.auc_per_class.iter().flatten().copied().collect();
        assert!((rep.macro_auc - defined.iter().sum::<f64>() / defined.len() as f64).abs() < 1e-12);
        for k in ["accuracy", "balanced_accuracy", "micro_auc", "macro_auc"] {
            let ci = rep.ci[k];
            assert!(0.0 <= ci.lo && ci.lo <= ci.hi && ci.hi <= 1.0);
        }
        assert!(rep.headline().contains("Balanced Acc"));
        let again = EvalReport::new(recs, BootstrapConfig { resamples: 200, ..Default::default() }, &Rng::new(2)).unwrap();
        assert_eq!(rep.to_json(), again.to_json());
        let json: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        for k in ["n", "accuracy", "balanced_accuracy", "auc_per_class", "micro_auc", "macro_auc", "confusion", "ci", "records", "roc"] {
            assert!(json.get(k).is_some(), "{k}");
        }

        let dir = tempfile::tempdir().unwrap();
        let files = export_roc(&rep, &dir.path().join("roc")).unwrap();
        assert_eq!(files.len(), 3);
        let text = fs::read_to_string(&files[0]).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("fpr,tpr,threshold"));
        let fprs: Vec<f64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
        assert!(fprs.windows(2).all(|w| w[0] <= w[1]));
        let logits = dir.path().join("logits.csv");
        write_logits_csv(&rep.records, &logits).unwrap();
        let text = fs::read_to_string(&logits).unwrap();
        assert!(text.starts_with("subject_id,label,p_cn,p_mci,p_ad,pred\ns0,CN,"));
        assert_eq!(text.lines().count(), 31);
    }
}
