//! Turns command-line flags and an optional JSON configuration file into a
//! validated [`RunConfig`]. Fields present in the file override flags.

use std::path::{Path, PathBuf};

use amsgcn_core::data::{builtin_split, load_split_with_validation};
use amsgcn_core::run::RunConfig;
use amsgcn_core::training::{SplitSpec, TrainConfig};
use amsgcn_core::{Error, Result};
use serde_json::Value;

use crate::RunFlags;

/// Recursively replaces values of `base` by those of `over`; nested
/// objects merge key by key.
fn overlay(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Configuration from flags alone.
fn from_flags(flags: &RunFlags) -> RunConfig {
    let mut cfg = RunConfig::default();
    if let Some(epochs) = flags.epochs {
        cfg.train = TrainConfig::default().with_epochs(epochs);
    }
    if let Some(seed) = flags.seed {
        cfg.train.seed = seed;
    }
    if let Some(m) = &flags.manifest {
        cfg.manifest = m.clone();
    }
    cfg.layout = flags.layout.clone().or(cfg.layout);
    if let Some(s) = flags.split.clone().or_else(|| flags.splits.first().cloned()) {
        cfg.split = s;
    }
    if !flags.features.is_empty() {
        cfg.features = flags.features.clone();
    }
    if !flags.graphs.is_empty() {
        cfg.graphs = flags.graphs.clone();
    }
    if let Some(f) = flags.fusion {
        cfg.fusion = f;
    }
    if let Some(v) = flags.vote_scope {
        cfg.vote_scope = v;
    }
    if let Some(a) = flags.aggregation {
        cfg.aggregation = a;
    }
    if let Some(v) = flags.val_fraction {
        cfg.val_fraction = v;
    }
    if let Some(w) = flags.workers {
        cfg.workers = w;
    }
    if let Some(o) = &flags.out {
        cfg.out = o.clone();
    }
    cfg
}

/// The run configuration the flags and configuration file describe, with
/// the splits to iterate over: `--splits` when given, unless the file sets
/// a split of its own.
pub fn run_config(flags: &RunFlags) -> Result<(RunConfig, Vec<String>)> {
    let mut cfg = from_flags(flags);
    let mut splits = flags.splits.clone();
    if let Some(path) = &flags.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !file.is_object() {
            return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
        }
        if file.get("split").is_some() {
            splits.clear();
        }
        let mut merged = serde_json::to_value(&cfg)?;
        overlay(&mut merged, file);
        cfg = serde_json::from_value(merged).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    if cfg.manifest.as_os_str().is_empty() {
        return Err(Error::Config("no dataset manifest given (--manifest)".into()));
    }
    if splits.is_empty() {
        splits.push(cfg.split.clone());
    }
    if splits.iter().any(|s| s.is_empty()) {
        return Err(Error::Config("no split given (--split or --splits)".into()));
    }
    Ok((cfg.normalized()?, splits))
}

/// A built-in split, or a split file whose missing validation part is
/// carved from its test subjects with `seed`.
pub fn resolve_split(spec: &str, val_fraction: f64, seed: u64) -> Result<SplitSpec> {
    match builtin_split(spec) {
        Some(s) => Ok(s),
        None => load_split_with_validation(Path::new(spec), val_fraction, seed),
    }
}

/// Short directory-friendly label of a split: its name or file stem.
pub fn split_label(spec: &str) -> String {
    let stem = Path::new(spec).file_stem().map_or_else(|| spec.into(), |s| s.to_string_lossy().into_owned());
    stem.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// `path` made absolute against the working directory, so a run
/// directory can be evaluated from anywhere.
pub fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| Error::io(path, e))
}
