//! Mean and standard deviation of report metrics across runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use amsgcn_core::metrics::{mean_std, MetricReport};
use amsgcn_core::{Error, Result};
use serde::Serialize;

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Self> {
        (!values.is_empty()).then(|| {
            let (mean, std) = mean_std(values);
            Stat { mean, std }
        })
    }
}

/// Aggregate of one partition over runs. AUROC and AUPRC average only the
/// runs where they are defined.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionSummary {
    pub runs: usize,
    pub weighted_f1: Stat,
    pub accuracy: Stat,
    pub auroc: Option<Stat>,
    pub auprc: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunEntry {
    pub run: String,
    pub partition: String,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
}

/// Pooled statistics over every run, plus the same statistics within each
/// split so per-split spread can be told apart from spread across splits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub partitions: BTreeMap<String, PartitionSummary>,
    pub by_split: BTreeMap<String, BTreeMap<String, PartitionSummary>>,
    pub runs: Vec<RunEntry>,
}

/// Split part of a run label: the label without its `_seed<n>` suffix.
pub fn split_group(label: &str) -> &str {
    match label.rsplit_once("_seed") {
        Some((head, seed)) if !seed.is_empty() && seed.bytes().all(|b| b.is_ascii_digit()) => head,
        _ => label,
    }
}

fn per_partition<'a>(reports: impl Iterator<Item = &'a (String, String, MetricReport)>) -> BTreeMap<String, PartitionSummary> {
    let mut by_partition: BTreeMap<&str, Vec<&MetricReport>> = BTreeMap::new();
    for (_, p, r) in reports {
        by_partition.entry(p.as_str()).or_default().push(r);
    }
    by_partition
        .into_iter()
        .map(|(p, rs)| {
            let pick = |f: fn(&MetricReport) -> Option<f64>| rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>();
            let summary = PartitionSummary {
                runs: rs.len(),
                weighted_f1: Stat::of(&pick(|r| Some(r.weighted_f1))).expect("at least one run"),
                accuracy: Stat::of(&pick(|r| Some(r.accuracy))).expect("at least one run"),
                auroc: Stat::of(&pick(|r| r.auroc)),
                auprc: Stat::of(&pick(|r| r.auprc)),
            };
            (p.to_string(), summary)
        })
        .collect()
}

/// Summary of `(run label, partition, report)` triples.
pub fn summarize(reports: &[(String, String, MetricReport)]) -> Summary {
    let partitions = per_partition(reports.iter());
    let groups: std::collections::BTreeSet<&str> = reports.iter().map(|(l, _, _)| split_group(l)).collect();
    let by_split = groups
        .into_iter()
        .map(|g| (g.to_string(), per_partition(reports.iter().filter(|(l, _, _)| split_group(l) == g))))
        .collect();
    let runs = reports
        .iter()
        .map(|(run, partition, r)| RunEntry {
            run: run.clone(),
            partition: partition.clone(),
            weighted_f1: r.weighted_f1,
            accuracy: r.accuracy,
            auroc: r.auroc,
            auprc: r.auprc,
        })
        .collect();
    Summary {
        partitions,
        by_split,
        runs,
    }
}

fn fmt_stat(s: &Option<Stat>) -> String {
    s.as_ref().map_or_else(|| "n/a".into(), |s| format!("{:.3} +- {:.3}", s.mean, s.std))
}

fn table(partitions: &BTreeMap<String, PartitionSummary>) -> String {
    let mut out = format!("{:<10} {:>5}  {:<18} {:<18} {:<18} {:<18}\n", "partition", "runs", "weighted F1", "accuracy", "AUROC", "AUPRC");
    for (p, s) in partitions {
        out.push_str(&format!(
            "{:<10} {:>5}  {:<18} {:<18} {:<18} {:<18}\n",
            p,
            s.runs,
            fmt_stat(&Some(s.weighted_f1.clone())),
            fmt_stat(&Some(s.accuracy.clone())),
            fmt_stat(&s.auroc),
            fmt_stat(&s.auprc)
        ));
    }
    out
}

/// Human-readable tables of a summary: all runs pooled, then one table per
/// split when there is more than one.
pub fn render(summary: &Summary) -> String {
    let mut out = table(&summary.partitions);
    if summary.by_split.len() > 1 {
        for (split, partitions) in &summary.by_split {
            out.push_str(&format!("\nsplit {split}\n"));
            out.push_str(&table(partitions));
        }
    }
    out
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Every `report_<partition>.json` below `root`, in path order, with the
/// partition name. The report schema file is skipped.
pub fn find_reports(root: &Path) -> Result<Vec<(PathBuf, String)>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if let Some(partition) = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("report_"))
                .and_then(|n| n.strip_suffix(".json"))
                .filter(|p| *p != "schema")
            {
                found.push((path.clone(), partition.to_string()));
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn read_report(path: &Path) -> Result<MetricReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line() as u64, format!("invalid report: {e}")))
}
