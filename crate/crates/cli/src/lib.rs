//! Subcommand implementations behind the `neurovol` binary.

pub mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use neurovol::data::{self, Label, Manifest, Split, VolumeSample};
use neurovol::gradcheck::{self, Backwards, CheckResult};
use neurovol::metrics::{export_roc, write_logits_csv, EvalReport};
use neurovol::model::{self, Network};
use neurovol::optim::{self, EpochRecord, TrainConfig};
use neurovol::saliency::{self, SaliencyMap};
use neurovol::{Error, Rng};
use rayon::prelude::*;

pub use config::{parse_overrides, RunConfig};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
    /// A verification or one of several sub-runs failed.
    pub const CHECK: i32 = 5;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Check(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Check(_) => exit::CHECK,
            CliError::Io { .. } => exit::DATA,
            CliError::Core(e) => match e {
                Error::InvalidArgument(_) | Error::ConfigText(_) | Error::ConfigMismatch(_) | Error::ShapeInference { .. } => {
                    exit::CONFIG
                }
                Error::Manifest { .. }
                | Error::Leakage(_)
                | Error::SplitViolation(_)
                | Error::BadMagic { .. }
                | Error::UnsupportedVersion { .. }
                | Error::UnsupportedDatatype(_)
                | Error::UnsupportedRank(_)
                | Error::Truncated { .. }
                | Error::InvalidShape { .. }
                | Error::Io { .. } => exit::DATA,
                Error::Numeric(_) | Error::UndefinedMetric(_) => exit::NUMERIC,
                _ => exit::INTERNAL,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(io_err(path))
}

/// Create the per-run output directory, echo the effective config to stdout
/// and save it there as `config.toml`.
pub fn prepare_run(cfg: &RunConfig, extra: &str) -> CliResult<PathBuf> {
    let name = cfg
        .run_name
        .clone()
        .unwrap_or_else(|| format!("{}-seed{}", chrono::Local::now().format("%Y%m%d-%H%M%S"), cfg.seed));
    let dir = cfg.out_dir.join(name);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut text = cfg.to_toml();
    if !extra.is_empty() {
        text.push('\n');
        for line in extra.lines() {
            let _ = writeln!(text, "# {line}");
        }
    }
    println!("# effective configuration ({})\n{text}", dir.display());
    write_file(&dir.join("config.toml"), &text)?;
    Ok(dir)
}

fn load_manifest(cfg: &RunConfig) -> CliResult<Manifest> {
    let m = Manifest::load(cfg.manifest_path()?, cfg.allow_leakage)?;
    if cfg.subsample < 1.0 {
        Ok(data::subsample(&m, cfg.subsample, &Rng::new(cfg.seed))?)
    } else {
        Ok(m)
    }
}

/// Derived settings echoed with a training config.
fn run_notes(cfg: &RunConfig, manifest: &Manifest) -> String {
    format!(
        "effective batch size {}\n{}",
        cfg.train().effective_batch_size(cfg.norm),
        manifest.counts_table()
    )
}

fn samples(m: &Manifest, split: Split, cfg: &RunConfig) -> CliResult<Vec<VolumeSample>> {
    if !m.has_split(split) {
        return Err(Error::SplitViolation(format!("manifest has no `{split}` rows")).into());
    }
    Ok(data::load_samples(m, split, cfg.normalize)?)
}

fn progress(r: &EpochRecord, elapsed: f64) {
    log::info!(
        "epoch {:>3}  train_loss {:.4}  val_loss {:.4}  val_bal_acc {:.3}{}{}  ({elapsed:.1}s)",
        r.epoch,
        r.train_loss,
        r.val_loss,
        r.val_bal_acc,
        r.train_accuracy.map(|a| format!("  train_acc {a:.3}")).unwrap_or_default(),
        if r.checkpointed { "  *" } else { "" },
    );
}

/// Outcome of one training run inside a run directory.
pub struct Trained {
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub final_train_accuracy: Option<f64>,
}

fn train_in(cfg: &RunConfig, manifest: &Manifest, dir: &Path) -> CliResult<Trained> {
    let train = samples(manifest, Split::Train, cfg)?;
    let val = samples(manifest, Split::Val, cfg)?;
    let net = Network::<f32>::build(&cfg.model(), &Rng::new(cfg.seed))?;
    let checkpoint = dir.join("best.ckpt");
    let tc = TrainConfig {
        checkpoint: Some(checkpoint.clone()),
        ..cfg.train()
    };
    log::info!(
        "training on {} scans, validating on {}, batch size {}",
        train.len(),
        val.len(),
        tc.effective_batch_size(cfg.norm)
    );
    let start = Instant::now();
    let mut last_acc = None;
    let out = optim::train_with(net, &train, &val, &tc, |r| {
        last_acc = r.train_accuracy.or(last_acc);
        progress(r, start.elapsed().as_secs_f64());
    })?;
    write_file(&dir.join("train_log.csv"), out.log.to_csv())?;
    Ok(Trained {
        checkpoint,
        best_epoch: out.best_epoch,
        best_val_loss: out.best_val_loss,
        final_train_accuracy: last_acc,
    })
}

pub fn cmd_train(cfg: &RunConfig) -> CliResult<Trained> {
    let manifest = load_manifest(cfg)?;
    let dir = prepare_run(cfg, &run_notes(cfg, &manifest))?;
    let t = train_in(cfg, &manifest, &dir)?;
    println!(
        "best epoch {} (val loss {:.4}); checkpoint {}",
        t.best_epoch,
        t.best_val_loss,
        t.checkpoint.display()
    );
    if let Some(a) = t.final_train_accuracy {
        println!("final train accuracy {:.1}%", 100.0 * a);
    }
    Ok(t)
}

fn eval_in(cfg: &RunConfig, manifest: &Manifest, checkpoint: &Path, dir: &Path) -> CliResult<EvalReport> {
    let ckpt = model::load_expecting(checkpoint, &cfg.model())?;
    let set = samples(manifest, cfg.split, cfg)?;
    let batch = cfg.train().effective_batch_size(cfg.norm);
    let (records, _) = optim::predict(&ckpt.network, &set, batch)?;
    let report = EvalReport::new(records, cfg.bootstrap(), &Rng::new(cfg.seed))?;
    report.write_json(&dir.join("report.json"))?;
    write_logits_csv(&report.records, &dir.join("logits.csv"))?;
    export_roc(&report, &dir.join("roc"))?;
    Ok(report)
}

pub fn cmd_eval(cfg: &RunConfig) -> CliResult<EvalReport> {
    let checkpoint = cfg.checkpoint_path()?.to_path_buf();
    let manifest = Manifest::load(cfg.manifest_path()?, cfg.allow_leakage)?;
    let dir = prepare_run(cfg, "")?;
    let report = eval_in(cfg, &manifest, &checkpoint, &dir)?;
    println!("{} split, {} scans", cfg.split, report.n);
    print!("{}", report.headline());
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    Width,
    Depth,
    Norm,
    FirstLayer,
    Subsample,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Width => "widening_factor",
            Axis::Depth => "extra_blocks",
            Axis::Norm => "norm",
            Axis::FirstLayer => "first_layer",
            Axis::Subsample => "subsample",
        }
    }
}

pub const ABLATION_HEADER: &str = "value,status,accuracy,balanced_accuracy,micro_auc,macro_auc,\
accuracy_lo,accuracy_hi,balanced_accuracy_lo,balanced_accuracy_hi,micro_auc_lo,micro_auc_hi,macro_auc_lo,macro_auc_hi";

fn summary_row(value: &str, result: &CliResult<EvalReport>) -> String {
    match result {
        Ok(r) => {
            let mut s = format!(
                "{value},ok,{:.6},{:.6},{:.6},{:.6}",
                r.accuracy, r.balanced_accuracy, r.micro_auc, r.macro_auc
            );
            for key in ["accuracy", "balanced_accuracy", "micro_auc", "macro_auc"] {
                let ci = r.ci[key];
                let _ = write!(s, ",{:.6},{:.6}", ci.lo, ci.hi);
            }
            s
        }
        Err(e) => format!("{value},failed: {}{}", e.to_string().replace([',', '\n'], ";"), ",".repeat(12)),
    }
}

/// Train and evaluate once per value of `axis`; every other setting is
/// shared. Batch size follows the norm unless set explicitly. Each run gets
/// its own subdirectory; `summary.csv` is rewritten after every run.
pub fn cmd_ablate(cfg: &RunConfig, axis: Axis, values: &[String]) -> CliResult<PathBuf> {
    if values.is_empty() {
        return Err(CliError::Config("ablate needs at least one value".into()));
    }
    let dir = prepare_run(cfg, &format!("ablation over {} = {}", axis.name(), values.join(", ")))?;
    let mut rows = vec![ABLATION_HEADER.to_string()];
    let mut failures = Vec::new();
    for value in values {
        let over = [
            (axis.name().to_string(), value.clone()),
            ("run_name".to_string(), format!("{}-{value}", axis.name())),
        ];
        let result = cfg.with_overrides(&over).and_then(|mut sub| {
            sub.out_dir = dir.clone();
            println!("== {} = {value}", axis.name());
            let manifest = load_manifest(&sub)?;
            let sub_dir = prepare_run(&sub, &run_notes(&sub, &manifest))?;
            let trained = train_in(&sub, &manifest, &sub_dir)?;
            let report = eval_in(&sub, &manifest, &trained.checkpoint, &sub_dir)?;
            print!("{}", report.headline());
            Ok(report)
        });
        if let Err(e) = &result {
            log::error!("{} = {value} failed: {e}", axis.name());
            failures.push(format!("{value}: {e}"));
        }
        rows.push(summary_row(value, &result));
        write_file(&dir.join("summary.csv"), rows.join("\n") + "\n")?;
    }
    println!("summary: {}", dir.join("summary.csv").display());
    if failures.is_empty() {
        Ok(dir)
    } else {
        Err(CliError::Check(format!("{} of {} runs failed: {}", failures.len(), values.len(), failures.join("; "))))
    }
}

/// Slices of every per-sample true-class map (smoothed) and of their
/// aggregate, plus the aggregate as a 3D volume. Returns the files written.
pub fn cmd_saliency(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let views = cfg.parsed_views()?;
    let ckpt = model::load_expecting(cfg.checkpoint_path()?, &cfg.model())?;
    let manifest = Manifest::load(cfg.manifest_path()?, cfg.allow_leakage)?;
    let set = samples(&manifest, cfg.split, cfg)?;
    let dir = prepare_run(cfg, "")?;
    let net = &ckpt.network;
    let crop = cfg.crop_extent;
    let use_age = cfg.age_mode != model::AgeMode::None;
    let maps = set
        .par_iter()
        .map(|s| {
            let (x, _) = data::center_crop(&s.volume, crop)?;
            saliency::saliency(net, &x, use_age.then_some(s.age), s.label.index())
        })
        .collect::<neurovol::Result<Vec<SaliencyMap>>>()?;
    let mut written = Vec::new();
    let per_sample = dir.join("samples");
    for (s, m) in set.iter().zip(&maps) {
        let smoothed = saliency::smooth(m, cfg.smoothing)?;
        written.extend(saliency::export_slices(&smoothed, &views, &per_sample.join(&s.subject_id))?);
    }
    let agg = saliency::aggregate(&maps)?;
    written.extend(saliency::export_map(&agg, &views, &dir.join("aggregate"))?);
    let by_class: BTreeMap<Label, usize> = set.iter().fold(BTreeMap::new(), |mut acc, s| {
        *acc.entry(s.label).or_insert(0) += 1;
        acc
    });
    println!(
        "{} maps ({}), {} files under {}",
        maps.len(),
        by_class.iter().map(|(l, n)| format!("{l} {n}")).collect::<Vec<_>>().join(", "),
        written.len(),
        dir.display()
    );
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Scope {
    Ops,
    Model,
    All,
}

pub fn run_gradcheck(scope: Scope, seed: u64, backwards: &Backwards) -> CliResult<Vec<CheckResult>> {
    let mut results = Vec::new();
    if matches!(scope, Scope::Ops | Scope::All) {
        results.extend(gradcheck::check_ops(seed, backwards)?);
    }
    if matches!(scope, Scope::Model | Scope::All) {
        results.push(gradcheck::check_model(seed, &gradcheck::model_check_config(), 20)?);
    }
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(CliError::Check(format!("gradient check failed for: {}", failed.join(", "))))
    }
}

pub fn cmd_gradcheck(cfg: &RunConfig, scope: Scope) -> CliResult<Vec<CheckResult>> {
    let dir = prepare_run(cfg, "")?;
    let result = run_gradcheck(scope, cfg.seed, &Backwards::default());
    if let Ok(rs) = &result {
        let table: String = rs.iter().map(|r| format!("{r}\n")).collect();
        write_file(&dir.join("gradcheck.txt"), table)?;
    }
    result
}

pub fn cmd_synth(cfg: &RunConfig) -> CliResult<Manifest> {
    let dir = prepare_run(cfg, "")?;
    let rng = Rng::new(cfg.seed);
    let set = data::generate_synthetic(&cfg.synth(), &rng)?;
    let manifest = data::write_synthetic(&set, &dir, &rng)?;
    print!("{}", manifest.counts_table());
    println!("manifest: {}", dir.join("manifest.csv").display());
    Ok(manifest)
}
