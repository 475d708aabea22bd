//! The subcommands. Each returns a core error whose class picks the exit
//! code.

use std::path::{Path, PathBuf};

use amsgcn_core::data::{
    builtin_split, generate_synthetic, load_dataset, split_to_json, DatasetManifest, LoadedDataset, SyntheticGaitSpec,
};
use amsgcn_core::ensemble::{FittedFusion, FusionStrategy};
use amsgcn_core::graph::JointLayout;
use amsgcn_core::metrics::{report_schema, MetricReport};
use amsgcn_core::preprocess::FeatureKind;
use amsgcn_core::run::{
    evaluate, load_run, report_file_name, train_run, write_report, Aggregation, PreparedData, RunConfig, RunModel,
    RUN_CONFIG_FILE,
};
use amsgcn_core::training::SplitSpec;
use amsgcn_core::{Error, Result};

use crate::config::{absolute, resolve_split, run_config, split_label};
use crate::plots::{confusion_svg, f1_bars_svg};
use crate::summary::{find_reports, read_report, render, summarize, write_summary, SUMMARY_FILE};
use crate::RunFlags;

pub const SCHEMA_FILE: &str = "report_schema.json";
pub const ABLATION_FILE: &str = "ablation.csv";
const PARTITIONS: [&str; 2] = ["val", "test"];

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes a partition's report with its confusion matrix and F1 plots.
fn write_outputs(dir: &Path, partition: &str, report: &MetricReport) -> Result<()> {
    write_report(&dir.join(report_file_name(partition)), report)?;
    write_plots(dir, partition, report)
}

fn write_plots(dir: &Path, partition: &str, report: &MetricReport) -> Result<()> {
    write_text(
        &dir.join(format!("confusion_{partition}.svg")),
        &confusion_svg(report, &format!("Confusion matrix ({partition})")),
    )?;
    write_text(
        &dir.join(format!("f1_{partition}.svg")),
        &f1_bars_svg(report, &format!("Per-class F1 ({partition})")),
    )
}

fn write_schema(dir: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&report_schema())?;
    write_text(&dir.join(SCHEMA_FILE), &(text + "\n"))
}

/// Evaluates `partitions` of `data` and writes their outputs into `dir`.
fn evaluate_partitions(
    model: &mut RunModel,
    data: &PreparedData,
    partitions: &[String],
    aggregation: Aggregation,
    dir: &Path,
) -> Result<Vec<(String, MetricReport)>> {
    let mut out = Vec::new();
    for p in partitions {
        let part = data.partition(p)?;
        let report = evaluate(&model.predict(part)?, part, &data.class_names, aggregation)?;
        write_outputs(dir, p, &report)?;
        out.push((p.clone(), report));
    }
    write_schema(dir)?;
    Ok(out)
}

fn resolve_layout(spec: Option<&str>) -> Result<Option<JointLayout>> {
    spec.map(JointLayout::resolve).transpose()
}

/// Path-valued settings made absolute, so the stored run configuration
/// stays valid from any working directory.
fn absolutize(cfg: &mut RunConfig) -> Result<()> {
    cfg.manifest = absolute(&cfg.manifest)?;
    if let Some(l) = &cfg.layout {
        if JointLayout::builtin(l).is_none() {
            cfg.layout = Some(absolute(Path::new(l))?.to_string_lossy().into_owned());
        }
    }
    Ok(())
}

fn absolute_split(spec: &str) -> Result<String> {
    if builtin_split(spec).is_some() {
        Ok(spec.to_string())
    } else {
        Ok(absolute(Path::new(spec))?.to_string_lossy().into_owned())
    }
}

fn load(cfg: &RunConfig, cache: Option<&Path>) -> Result<LoadedDataset> {
    let layout = resolve_layout(cfg.layout.as_deref())?;
    load_dataset(&cfg.manifest, layout.as_ref(), cache)
}

fn prepare(dataset: &LoadedDataset, split: &SplitSpec, features: &[FeatureKind]) -> Result<PreparedData> {
    PreparedData::from_dataset(dataset, split, features)
}

/// One training job of a multi-run protocol.
struct Job {
    split: String,
    seed: u64,
    dir: PathBuf,
    label: String,
}

fn jobs(cfg: &RunConfig, splits: &[String], runs: usize, root: &Path) -> Result<Vec<Job>> {
    if runs == 0 {
        return Err(Error::Config("--runs must be at least 1".into()));
    }
    let single = splits.len() == 1 && runs == 1;
    let labels: Vec<String> = splits.iter().map(|s| split_label(s)).collect();
    let unique = labels.iter().collect::<std::collections::BTreeSet<_>>().len() == labels.len();
    let mut out = Vec::new();
    for (i, (split, name)) in splits.iter().zip(&labels).enumerate() {
        for r in 0..runs as u64 {
            let seed = cfg.train.seed + r;
            let label = if unique {
                format!("{name}_seed{seed}")
            } else {
                format!("split{}_{name}_seed{seed}", i + 1)
            };
            let dir = if single { root.to_path_buf() } else { root.join(&label) };
            out.push(Job {
                split: absolute_split(split)?,
                seed,
                dir,
                label,
            });
        }
    }
    Ok(out)
}

fn job_config(cfg: &RunConfig, job: &Job) -> RunConfig {
    let mut c = cfg.clone();
    c.split = job.split.clone();
    c.train.seed = job.seed;
    c
}

pub fn preprocess(manifest: &Path, layout: Option<&str>, out: &Path) -> Result<()> {
    let name = file_safe(&DatasetManifest::load(manifest)?.name);
    create_dir(out)?;
    let cache = out.join(format!("{name}.clips"));
    let layout = resolve_layout(layout)?;
    let ds = load_dataset(manifest, layout.as_ref(), Some(&cache))?;
    if ds.cache_hit {
        println!("cache hit: {} is up to date", cache.display());
    } else {
        println!(
            "preprocessed {} recordings into {}",
            ds.manifest.recordings.len(),
            cache.display()
        );
    }
    println!("{:<20} {:>10} {:>9} {:>7} {:>8}", "class", "recordings", "subjects", "clips", "skipped");
    for s in &ds.cache.summary {
        println!("{:<20} {:>10} {:>9} {:>7} {:>8}", s.class, s.recordings, s.subjects, s.clips, s.skipped);
    }
    let total: usize = ds.cache.summary.iter().map(|s| s.clips).sum();
    println!("{total} clips of {} frames", ds.manifest.clip_frames);
    let summary = serde_json::json!({
        "dataset": ds.manifest.name,
        "cache_key": ds.cache.key,
        "layout": ds.layout.name(),
        "clip_frames": ds.manifest.clip_frames,
        "overlap": ds.manifest.overlap,
        "classes": ds.cache.summary,
    });
    let text = serde_json::to_string_pretty(&summary)?;
    write_text(&out.join(format!("{name}.summary.json")), &(text + "\n"))
}

pub fn train(flags: &RunFlags) -> Result<()> {
    let (mut cfg, splits) = run_config(flags)?;
    absolutize(&mut cfg)?;
    let dataset = load(&cfg, flags.cache.as_deref())?;
    let jobs = jobs(&cfg, &splits, flags.runs, &cfg.out)?;
    let mut reports = Vec::new();
    for job in &jobs {
        let run_cfg = job_config(&cfg, job);
        let split = resolve_split(&run_cfg.split, run_cfg.val_fraction, job.seed)?;
        let data = prepare(&dataset, &split, &run_cfg.features)?;
        log::info!("training {} experts into {}", run_cfg.keys().len(), job.dir.display());
        let mut trained = train_run(&run_cfg, &data, &job.dir)?;
        let parts: Vec<String> = PARTITIONS.iter().map(|s| s.to_string()).collect();
        let evaluated = evaluate_partitions(&mut trained.model, &data, &parts, run_cfg.aggregation, &job.dir)?;
        let f1 = |p: &str| evaluated.iter().find(|(q, _)| q == p).map_or(f64::NAN, |(_, r)| r.weighted_f1);
        println!(
            "{}: {} experts, val F1 {:.3}, test F1 {:.3}",
            job.dir.display(),
            trained.manifest.experts.len(),
            f1("val"),
            f1("test")
        );
        reports.extend(evaluated.into_iter().map(|(p, r)| (job.label.clone(), p, r)));
    }
    if jobs.len() > 1 {
        let summary = summarize(&reports);
        print!("{}", render(&summary));
        write_summary(&cfg.out.join(SUMMARY_FILE), &summary)?;
    }
    Ok(())
}

pub struct EvalOptions {
    pub run: PathBuf,
    pub partitions: Vec<String>,
    pub manifest: Option<PathBuf>,
    pub split: Option<String>,
    pub aggregation: Option<Aggregation>,
    pub cache: Option<PathBuf>,
}

pub fn eval(opts: &EvalOptions) -> Result<()> {
    let cfg_path = opts.run.join(RUN_CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let mut cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::parse(&cfg_path, e.line() as u64, format!("invalid run configuration: {e}")))?;
    if let Some(m) = &opts.manifest {
        cfg.manifest = m.clone();
    }
    if let Some(s) = &opts.split {
        cfg.split = s.clone();
    }
    let aggregation = opts.aggregation.unwrap_or(cfg.aggregation);
    let (manifest, layout, mut model) = load_run(&opts.run)?;
    let dataset = load_dataset(&cfg.manifest, Some(&layout), opts.cache.as_deref())?;
    if dataset.manifest.class_names != manifest.class_names {
        return Err(Error::Label(format!(
            "dataset classes {:?} differ from the committee's {:?}",
            dataset.manifest.class_names, manifest.class_names
        )));
    }
    let split = resolve_split(&cfg.split, cfg.val_fraction, cfg.train.seed)?;
    let data = prepare(&dataset, &split, &manifest.features())?;
    for (p, r) in evaluate_partitions(&mut model, &data, &opts.partitions, aggregation, &opts.run)? {
        println!(
            "{p}: weighted F1 {:.3}, accuracy {:.3}, AUROC {}, {} samples -> {}",
            r.weighted_f1,
            r.accuracy,
            r.auroc.map_or_else(|| "n/a".into(), |a| format!("{a:.3}")),
            r.samples,
            opts.run.join(report_file_name(&p)).display()
        );
    }
    Ok(())
}

/// Every subset of `features` with 1 to `max_size` members, by size and
/// then in feature order.
pub fn feature_subsets(features: &[FeatureKind], max_size: usize) -> Vec<Vec<FeatureKind>> {
    let n = features.len();
    let mut out: Vec<Vec<FeatureKind>> = Vec::new();
    for size in 1..=max_size.min(n) {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            out.push(idx.iter().map(|&i| features[i]).collect());
            let Some(pos) = (0..size).rev().find(|&i| idx[i] != i + n - size) else {
                break;
            };
            idx[pos] += 1;
            for j in pos + 1..size {
                idx[j] = idx[j - 1] + 1;
            }
        }
    }
    out
}

/// One ablation table row.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub features: Vec<FeatureKind>,
    pub val_f1: Vec<f64>,
    pub test_f1: Vec<f64>,
}

impl AblationRow {
    fn label(&self) -> String {
        self.features.iter().map(|f| f.short()).collect::<Vec<_>>().join("+")
    }
}

/// CSV of ablation rows sorted by mean test F1, with the best and worst
/// subset of every size marked.
pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mean = |v: &[f64]| amsgcn_core::metrics::mean_std(v);
    let mut rows: Vec<&AblationRow> = rows.iter().collect();
    rows.sort_by(|a, b| {
        mean(&b.test_f1)
            .0
            .total_cmp(&mean(&a.test_f1).0)
            .then(a.features.len().cmp(&b.features.len()))
            .then(a.features.cmp(&b.features))
    });
    let mut marks = vec![String::new(); rows.len()];
    let max_size = rows.iter().map(|r| r.features.len()).max().unwrap_or(0);
    for size in 1..=max_size {
        let of_size: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].features.len() == size).collect();
        if let (Some(&best), Some(&worst)) = (of_size.first(), of_size.last()) {
            marks[best] = "best".into();
            if worst != best {
                marks[worst] = "worst".into();
            }
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Config(format!("cannot format ablation table: {e}"));
    w.write_record(["size", "features", "val_f1_mean", "val_f1_std", "test_f1_mean", "test_f1_std", "runs", "mark"])
        .map_err(io)?;
    for (row, mark) in rows.iter().zip(&marks) {
        let (vm, vs) = mean(&row.val_f1);
        let (tm, ts) = mean(&row.test_f1);
        w.write_record([
            row.features.len().to_string(),
            row.label(),
            format!("{vm:.4}"),
            format!("{vs:.4}"),
            format!("{tm:.4}"),
            format!("{ts:.4}"),
            row.test_f1.len().to_string(),
            mark.clone(),
        ])
        .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("cannot format ablation table: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
}

pub fn ablate(flags: &RunFlags, max_size: usize) -> Result<()> {
    let (mut cfg, splits) = run_config(flags)?;
    if cfg.fusion == FusionStrategy::Joint {
        return Err(Error::Config("ablation needs a score-level fusion, not joint training".into()));
    }
    if max_size == 0 {
        return Err(Error::Config("--max-size must be at least 1".into()));
    }
    absolutize(&mut cfg)?;
    let dataset = load(&cfg, flags.cache.as_deref())?;
    let runs_root = cfg.out.join("ablation_runs");
    let mut rows: Vec<AblationRow> = feature_subsets(&cfg.features, max_size)
        .into_iter()
        .map(|features| AblationRow {
            features,
            val_f1: Vec::new(),
            test_f1: Vec::new(),
        })
        .collect();
    let jobs = jobs(&cfg, &splits, flags.runs, &runs_root)?;
    for job in &jobs {
        let run_cfg = job_config(&cfg, job);
        let split = resolve_split(&run_cfg.split, run_cfg.val_fraction, job.seed)?;
        let data = prepare(&dataset, &split, &run_cfg.features)?;
        let mut trained = train_run(&run_cfg, &data, &job.dir)?;
        let missing = || Error::Config("ablation needs per-expert scores".into());
        let val = trained.model.scores(&data.val)?.ok_or_else(missing)?;
        let test = trained.model.scores(&data.test)?.ok_or_else(missing)?;
        for row in &mut rows {
            let (v, t) = (val.restrict(&row.features)?, test.restrict(&row.features)?);
            let fusion = FittedFusion::fit(run_cfg.fusion, run_cfg.vote_scope, &v, &data.val.labels, &run_cfg.stacking)?;
            let score = |s, part| evaluate(&fusion.predict(s)?, part, &data.class_names, run_cfg.aggregation);
            row.val_f1.push(score(&v, &data.val)?.weighted_f1);
            row.test_f1.push(score(&t, &data.test)?.weighted_f1);
        }
        println!("{}: scored {} feature subsets", job.dir.display(), rows.len());
    }
    let table = ablation_csv(&rows)?;
    create_dir(&cfg.out)?;
    let path = cfg.out.join(ABLATION_FILE);
    write_text(&path, &table)?;
    print!("{table}");
    println!("wrote {}", path.display());
    Ok(())
}

/// Subject-disjoint split of `n` synthetic subjects: two thirds train,
/// a sixth validation (at least one), the rest test.
pub fn synthetic_split(n: usize) -> Result<SplitSpec> {
    if n < 3 {
        return Err(Error::Config("a synthetic split needs at least 3 subjects".into()));
    }
    let ids: Vec<String> = (0..n).map(SyntheticGaitSpec::subject_id).collect();
    let n_val = ((n as f64 / 6.0).round() as usize).max(1);
    let n_train = ((n as f64 * 2.0 / 3.0).round() as usize).min(n - n_val - 1).max(1);
    SplitSpec::new(&ids[..n_train], &ids[n_train..n_train + n_val], &ids[n_train + n_val..])
}

pub fn synthesize(out: &Path, subjects: usize, frames: usize, walks: usize, seed: u64, spec: Option<&Path>) -> Result<()> {
    let spec = match spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<SyntheticGaitSpec>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => SyntheticGaitSpec {
            walks,
            ..SyntheticGaitSpec::benchmark(subjects, frames, seed)
        },
    };
    let split = synthetic_split(spec.subjects)?;
    let dataset = generate_synthetic(&spec)?;
    dataset.write(out)?;
    let text = serde_json::to_string_pretty(&split_to_json(&split))?;
    write_text(&out.join("split.json"), &(text + "\n"))?;
    println!(
        "wrote {} recordings of {} subjects ({} classes) to {}",
        dataset.recordings.len(),
        spec.subjects,
        spec.classes.len(),
        out.display()
    );
    println!(
        "split.json: {} train, {} val, {} test subjects",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

pub fn report(dirs: &[PathBuf], out: Option<&Path>, plots: bool) -> Result<()> {
    let mut reports = Vec::new();
    for root in dirs {
        for (path, partition) in find_reports(root)? {
            let report = read_report(&path)?;
            let run_dir = path.parent().unwrap_or(root);
            let label = match run_dir.strip_prefix(root) {
                Ok(rel) if !rel.as_os_str().is_empty() => rel.to_string_lossy().into_owned(),
                _ => root.file_name().map_or_else(|| root.to_string_lossy().into_owned(), |n| n.to_string_lossy().into_owned()),
            };
            if plots {
                write_plots(run_dir, &partition, &report)?;
            }
            reports.push((label, partition, report));
        }
    }
    if reports.is_empty() {
        return Err(Error::Io {
            path: dirs[0].clone(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no report files found"),
        });
    }
    let summary = summarize(&reports);
    print!("{}", render(&summary));
    let dest = out.unwrap_or(&dirs[0]);
    create_dir(dest)?;
    write_summary(&dest.join(SUMMARY_FILE), &summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_counts_are_binomial() {
        let all = FeatureKind::ALL;
        assert_eq!(feature_subsets(&all, 4).len(), 30);
        assert_eq!(feature_subsets(&all, 1).len(), 5);
        assert_eq!(feature_subsets(&all, 5).len(), 31);
        let two = feature_subsets(&all, 2);
        assert_eq!(two[5], vec![FeatureKind::Coordinates, FeatureKind::Velocity]);
        assert_eq!(two.last().unwrap(), &vec![FeatureKind::BoneVectors, FeatureKind::BoneAngles]);
    }

    #[test]
    fn ablation_table_marks_best_and_worst_per_size() {
        let row = |f: &[FeatureKind], t: f64| AblationRow {
            features: f.to_vec(),
            val_f1: vec![t],
            test_f1: vec![t],
        };
        use FeatureKind::*;
        let rows = vec![
            row(&[Coordinates], 0.5),
            row(&[Velocity], 0.9),
            row(&[BoneAngles], 0.7),
            row(&[Coordinates, Velocity], 0.8),
        ];
        let csv = ablation_csv(&rows).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("1,Vel,") && lines[1].ends_with(",best"));
        assert!(lines[2].starts_with("2,Joint+Vel,") && lines[2].ends_with(",best"));
        assert!(lines[3].starts_with("1,boneA,") && lines[3].ends_with(','));
        assert!(lines[4].starts_with("1,Joint,") && lines[4].ends_with(",worst"));
    }

    #[test]
    fn synthetic_split_of_twelve_is_eight_two_two() {
        let s = synthetic_split(12).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 2, 2));
        let s = synthetic_split(3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (1, 1, 1));
        assert!(synthetic_split(2).is_err());
    }
}
