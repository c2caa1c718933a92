use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Label, Split};
use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};

pub const MANIFEST_HEADER: [&str; 5] = ["subject_id", "path", "label", "age", "split"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub label: Label,
    pub age: f64,
    pub split: Split,
}

/// Per-class subject and scan counts for one split.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub subjects: [usize; 3],
    pub scans: [usize; 3],
}

/// A validated manifest. Construction checks subject disjointness across
/// splits; a leaking manifest only exists if the override was requested.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    rows: Vec<ManifestRow>,
    base_dir: PathBuf,
    leaks: Vec<String>,
}

/// Every subject that appears in more than one split, sorted.
pub fn check_leakage(rows: &[ManifestRow]) -> Vec<String> {
    let mut splits: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    for r in rows {
        splits.entry(&r.subject_id).or_default().insert(r.split);
    }
    splits
        .into_iter()
        .filter(|(_, s)| s.len() > 1)
        .map(|(id, _)| id.to_string())
        .collect()
}

#[derive(Deserialize)]
struct RawRow {
    subject_id: String,
    path: String,
    label: String,
    age: String,
    split: String,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, base_dir: impl Into<PathBuf>, allow_leakage: bool) -> Result<Self> {
        for r in &rows {
            if r.subject_id.is_empty() {
                return Err(Error::invalid("empty subject_id"));
            }
            if !(0.0..=crate::ops::age::MAX_AGE).contains(&r.age) {
                return Err(Error::invalid(format!("subject `{}`: age {} outside [0, 120]", r.subject_id, r.age)));
            }
        }
        let leaks = check_leakage(&rows);
        if !leaks.is_empty() {
            if !allow_leakage {
                return Err(Error::Leakage(leaks));
            }
            for id in &leaks {
                log::warn!("leakage override: subject `{id}` appears in more than one split");
            }
        }
        Ok(Self {
            rows,
            base_dir: base_dir.into(),
            leaks,
        })
    }

    /// Parse a manifest CSV with header `subject_id,path,label,age,split`.
    pub fn load(path: &Path, allow_leakage: bool) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| csv_error(path, 1, e))?;
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| csv_error(path, 1, e))?
            .iter()
            .map(str::to_string)
            .collect();
        if header != MANIFEST_HEADER {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("header must be `{}`, found `{}`", MANIFEST_HEADER.join(","), header.join(",")),
            });
        }
        let mut rows = Vec::new();
        for (i, rec) in reader.deserialize::<RawRow>().enumerate() {
            let line = i + 2;
            let raw = rec.map_err(|e| csv_error(path, line, e))?;
            let bad = |reason: String| Error::Manifest {
                path: path.to_path_buf(),
                line,
                reason,
            };
            let age: f64 = raw.age.parse().map_err(|_| bad(format!("age `{}` is not a number", raw.age)))?;
            if !(0.0..=crate::ops::age::MAX_AGE).contains(&age) {
                return Err(bad(format!("age {age} outside [0, 120]")));
            }
            if raw.subject_id.is_empty() {
                return Err(bad("empty subject_id".into()));
            }
            rows.push(ManifestRow {
                label: raw.label.parse().map_err(|e: Error| bad(e.to_string()))?,
                split: raw.split.parse().map_err(|e: Error| bad(e.to_string()))?,
                subject_id: raw.subject_id,
                path: PathBuf::from(raw.path),
                age,
            });
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(rows, base, allow_leakage)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, 0, e))?;
        w.write_record(MANIFEST_HEADER).map_err(|e| csv_error(path, 0, e))?;
        for r in &self.rows {
            w.write_record([
                r.subject_id.as_str(),
                &r.path.to_string_lossy(),
                &r.label.to_string(),
                &r.age.to_string(),
                &r.split.to_string(),
            ])
            .map_err(|e| csv_error(path, 0, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    /// Subjects found in more than one split (non-empty only under the
    /// override).
    pub fn leaks(&self) -> &[String] {
        &self.leaks
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn has_split(&self, split: Split) -> bool {
        self.rows.iter().any(|r| r.split == split)
    }

    pub fn counts(&self) -> BTreeMap<Split, ClassCounts> {
        let mut subjects: BTreeMap<Split, [BTreeSet<&str>; 3]> = BTreeMap::new();
        let mut out: BTreeMap<Split, ClassCounts> = BTreeMap::new();
        for r in &self.rows {
            let c = r.label.index();
            out.entry(r.split).or_default().scans[c] += 1;
            subjects.entry(r.split).or_default()[c].insert(&r.subject_id);
        }
        for (split, sets) in subjects {
            let e = out.entry(split).or_default();
            for c in 0..3 {
                e.subjects[c] = sets[c].len();
            }
        }
        out
    }

    /// Human-readable per-split class counts.
    pub fn counts_table(&self) -> String {
        let mut s = String::from("split  class  subjects  scans\n");
        for (split, c) in self.counts() {
            for l in Label::ALL {
                s.push_str(&format!(
                    "{:<6} {:<6} {:>8}  {:>5}\n",
                    split.to_string(),
                    l.to_string(),
                    c.subjects[l.index()],
                    c.scans[l.index()]
                ));
            }
        }
        s
    }
}

fn csv_error(path: &Path, line: usize, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(line);
    Error::Manifest {
        path: path.to_path_buf(),
        line,
        reason: e.to_string(),
    }
}

/// Keep `rate` of the training subjects per class (all of each kept
/// subject's scans); validation and test rows are untouched. A subject's
/// class is the label of its first training row. Per-class counts are
/// `round(rate * n)`.
pub fn subsample(manifest: &Manifest, rate: f64, rng: &Rng) -> Result<Manifest> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::invalid(format!("subsampling rate {rate} outside (0, 1]")));
    }
    if rate == 1.0 {
        return Ok(manifest.clone());
    }
    let mut by_class: [Vec<&str>; 3] = Default::default();
    let mut seen = BTreeSet::new();
    for r in manifest.rows().iter().filter(|r| r.split == Split::Train) {
        if seen.insert(r.subject_id.as_str()) {
            by_class[r.label.index()].push(&r.subject_id);
        }
    }
    let mut keep = BTreeSet::new();
    for (c, subjects) in by_class.iter_mut().enumerate() {
        if subjects.is_empty() {
            continue;
        }
        subjects.sort_unstable();
        let k = (rate * subjects.len() as f64).round() as usize;
        if k == 0 {
            return Err(Error::invalid(format!(
                "rate {rate} keeps no {} subjects (of {})",
                Label::ALL[c],
                subjects.len()
            )));
        }
        subjects.shuffle(&mut rng.stream(Stream::Subsample, c as u64));
        keep.extend(subjects[..k].iter().copied());
    }
    let rows = manifest
        .rows()
        .iter()
        .filter(|r| r.split != Split::Train || keep.contains(r.subject_id.as_str()))
        .cloned()
        .collect();
    Manifest::new(rows, manifest.base_dir(), !manifest.leaks().is_empty())
}
