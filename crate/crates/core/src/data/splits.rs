//! Subject-wise split files and the published splits of the public
//! gait corpora.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::training::SplitSpec;

/// Subject ids may be written as numbers or strings.
#[derive(Deserialize)]
#[serde(untagged)]
enum SubjectId {
    Number(u64),
    Text(String),
}

impl SubjectId {
    fn into_string(self) -> String {
        match self {
            SubjectId::Number(n) => n.to_string(),
            SubjectId::Text(s) => s,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    train: Vec<SubjectId>,
    #[serde(default)]
    val: Vec<SubjectId>,
    test: Vec<SubjectId>,
}

fn to_strings(v: Vec<SubjectId>) -> Vec<String> {
    v.into_iter().map(SubjectId::into_string).collect()
}

/// Parses `{"train": [...], "val": [...], "test": [...]}`.
pub fn parse_split(text: &str) -> Result<SplitSpec> {
    let f: SplitFile = serde_json::from_str(text)?;
    SplitSpec::new(&to_strings(f.train), &to_strings(f.val), &to_strings(f.test))
}

pub fn load_split(path: &Path) -> Result<SplitSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_split(&text).map_err(|e| match e {
        Error::Split(msg) => Error::Split(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Loads a split file; when it lists no validation subjects (as with
/// corpora published with train/test splits only), `val_fraction` of the
/// test subjects are carved out with [`carve_validation`].
pub fn load_split_with_validation(path: &Path, val_fraction: f64, seed: u64) -> Result<SplitSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: SplitFile = serde_json::from_str(&text)?;
    let result = if f.val.is_empty() {
        carve_validation(&to_strings(f.train), &to_strings(f.test), val_fraction, seed)
    } else {
        SplitSpec::new(&to_strings(f.train), &to_strings(f.val), &to_strings(f.test))
    };
    result.map_err(|e| match e {
        Error::Split(msg) => Error::Split(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn split_to_json(split: &SplitSpec) -> serde_json::Value {
    serde_json::json!({
        "train": split.train,
        "val": split.val,
        "test": split.test,
    })
}

type Published = (&'static str, [&'static [u32]; 3]);

/// Published subject splits, three per corpus.
const PUBLISHED: &[Published] = &[
    ("mmgs-1", [&[2, 3, 7, 8, 9, 11, 13, 14, 15, 19, 21], &[1, 6, 10, 17, 18], &[4, 5, 12, 16, 20, 22]]),
    ("mmgs-2", [&[2, 5, 8, 10, 11, 13, 14, 15, 16, 19, 20], &[1, 4, 17, 18, 21], &[3, 6, 7, 9, 12, 22]]),
    ("mmgs-3", [&[2, 3, 8, 10, 12, 13, 16, 17], &[5, 6, 9, 11, 21], &[1, 4, 7, 14, 15, 18, 19, 20, 22]]),
    ("walking-gait-1", [&[1, 3, 5, 6, 9], &[4, 8], &[2, 7]]),
    ("walking-gait-2", [&[1, 3, 5, 6, 9], &[2, 7], &[4, 8]]),
    ("walking-gait-3", [&[1, 3, 5, 6, 9], &[2, 4], &[7, 8]]),
    ("pathological-gait-1", [&[1, 2, 4, 7, 8, 10], &[3, 6], &[5, 9]]),
    ("pathological-gait-2", [&[1, 2, 6, 7, 9, 10], &[3, 5], &[4, 8]]),
    ("pathological-gait-3", [&[1, 3, 5, 7, 9, 10], &[4, 8], &[2, 6]]),
];

pub fn builtin_split_names() -> Vec<&'static str> {
    PUBLISHED.iter().map(|(n, _)| *n).collect()
}

/// A published split by name, e.g. `mmgs-1` or `walking-gait-3`.
pub fn builtin_split(name: &str) -> Option<SplitSpec> {
    let norm = name.to_ascii_lowercase().replace('_', "-");
    PUBLISHED.iter().find(|(n, _)| *n == norm).map(|(_, [tr, va, te])| {
        SplitSpec::new(tr, va, te).expect("published splits are disjoint")
    })
}

/// A built-in split name or a path to a split file.
pub fn resolve_split(spec: &str) -> Result<SplitSpec> {
    match builtin_split(spec) {
        Some(s) => Ok(s),
        None => load_split(Path::new(spec)),
    }
}

/// Builds a three-way split from a train/test split that has no
/// validation part: a seeded shuffle of the test subjects sends
/// `val_fraction` of them (rounded, at least one) to validation.
pub fn carve_validation<S: ToString>(train: &[S], test: &[S], val_fraction: f64, seed: u64) -> Result<SplitSpec> {
    if !(0.0..1.0).contains(&val_fraction) || test.len() < 2 {
        return Err(Error::Split(
            "need at least two test subjects and a validation fraction in [0, 1)".into(),
        ));
    }
    let mut subjects: Vec<String> = test.iter().map(ToString::to_string).collect();
    subjects.sort();
    subjects.shuffle(&mut Pcg64::seed_from_u64(seed));
    let n_val = ((subjects.len() as f64 * val_fraction).round() as usize).clamp(1, subjects.len() - 1);
    let (val, rest) = subjects.split_at(n_val);
    let train: Vec<String> = train.iter().map(ToString::to_string).collect();
    SplitSpec::new(&train, val, rest)
}
