//! Acceptance suite: prints one PASS, FAIL or SKIP line per criterion and
//! exits non-zero if any criterion fails.
//!
//! The synthetic runs train five full committees serially plus one in
//! parallel, which takes about an hour on one core. Setting
//! `AMSGCN_PDWALK_MANIFEST` (and `AMSGCN_PDWALK_SPLITS`, a comma-separated
//! list of train/test split files) enables the PD-Walk reproduction.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use amsgcn_core::data::{load_dataset, load_split_with_validation};
use amsgcn_core::ensemble::ExpertKey;
use amsgcn_core::metrics::{mean_std, MetricReport};
use amsgcn_core::run::{
    evaluate, expert_reports, report_file_name, train_run, write_report, Aggregation, PreparedData, RunConfig,
    TrainedRun, RUN_CONFIG_FILE,
};
use amsgcn_core::training::TrainConfig;
use common::suites::{self, Outcome};

/// Epoch budget of the synthetic runs; the criterion allows up to 50.
const SYNTH_EPOCHS: usize = 30;
const SYNTH_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

struct Line {
    name: &'static str,
    status: &'static str,
    detail: String,
    elapsed: Duration,
}

fn timed(name: &'static str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Line {
    let start = Instant::now();
    let outcome = f();
    let elapsed = start.elapsed();
    let outcome = match (outcome, limit) {
        (Ok(d), Some(l)) if elapsed > l => Err(format!("{d}; took {elapsed:.1?}, limit {l:?}")),
        (o, _) => o,
    };
    let line = match outcome {
        Ok(detail) => Line { name, status: "PASS", detail, elapsed },
        Err(detail) => Line { name, status: "FAIL", detail, elapsed },
    };
    println!("{:4}  {} ({:.1?}): {}", line.status, line.name, line.elapsed, line.detail);
    line
}

/// Scores of one trained synthetic committee.
struct SynthRun {
    seed: u64,
    dir: PathBuf,
    val: MetricReport,
    test: MetricReport,
    expert_test_f1: BTreeMap<ExpertKey, f64>,
    slowest_expert: Duration,
    epochs: usize,
}

fn synth_config(seed: u64, workers: usize) -> RunConfig {
    RunConfig {
        train: TrainConfig {
            seed,
            ..TrainConfig::default().with_epochs(SYNTH_EPOCHS)
        },
        workers,
        ..RunConfig::default()
    }
}

fn finish_run(trained: TrainedRun, data: &PreparedData, seed: u64) -> Result<SynthRun, String> {
    let TrainedRun { dir, mut model, reports, .. } = trained;
    let err = |e: amsgcn_core::Error| e.to_string();
    let mut partition = |name: &str| -> Result<MetricReport, String> {
        let part = data.partition(name).map_err(err)?;
        let preds = model.predict(part).map_err(err)?;
        let report = evaluate(&preds, part, &data.class_names, Aggregation::Clip).map_err(err)?;
        write_report(&dir.join(report_file_name(name)), &report).map_err(err)?;
        Ok(report)
    };
    let val = partition("val")?;
    let test = partition("test")?;
    let scores = model.scores(&data.test).map_err(err)?.ok_or("committee has no expert scores")?;
    let expert_test_f1 = expert_reports(&scores, &data.test, &data.class_names, Aggregation::Clip)
        .map_err(err)?
        .into_iter()
        .map(|(k, r)| (k, r.weighted_f1))
        .collect();
    Ok(SynthRun {
        seed,
        dir,
        val,
        test,
        expert_test_f1,
        slowest_expert: reports.iter().map(|(_, r)| r.elapsed).max().unwrap_or_default(),
        epochs: reports.iter().map(|(_, r)| r.history.len()).max().unwrap_or(0),
    })
}

fn synth_run(data: &PreparedData, seed: u64, workers: usize, root: &Path) -> Result<SynthRun, String> {
    let dir = root.join(format!("seed{seed}_workers{workers}"));
    let trained = train_run(&synth_config(seed, workers), data, &dir).map_err(|e| e.to_string())?;
    finish_run(trained, data, seed)
}

fn end_to_end(run: &Result<SynthRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let f1 = run.test.weighted_f1;
    let detail = format!(
        "10 experts, seed {}, test weighted F1 {f1:.3} (val {:.3}) after at most {} epochs; slowest expert {:.1?}",
        run.seed, run.val.weighted_f1, run.epochs, run.slowest_expert
    );
    if f1 < 0.90 {
        return Err(format!("{detail}; needs >= 0.90"));
    }
    if run.epochs > 50 {
        return Err(format!("{detail}; exceeded 50 epochs"));
    }
    if run.slowest_expert >= Duration::from_secs(15 * 60) {
        return Err(format!("{detail}; an expert took 15 minutes or more"));
    }
    Ok(detail)
}

fn dominance(runs: &[Result<SynthRun, String>]) -> Outcome {
    let runs: Vec<&SynthRun> = runs.iter().map(|r| r.as_ref().map_err(Clone::clone)).collect::<Result<_, _>>()?;
    let test: Vec<f64> = runs.iter().map(|r| r.test.weighted_f1).collect();
    let val: Vec<f64> = runs.iter().map(|r| r.val.weighted_f1).collect();
    let (mean_test, sd_test) = mean_std(&test);
    let (mean_val, _) = mean_std(&val);
    let mut best = (String::new(), f64::NEG_INFINITY);
    for key in runs[0].expert_test_f1.keys() {
        let f1s: Vec<f64> = runs.iter().map(|r| r.expert_test_f1[key]).collect();
        let (m, _) = mean_std(&f1s);
        if m > best.1 {
            best = (key.to_string(), m);
        }
    }
    let gap = mean_val - mean_test;
    let detail = format!(
        "{} seeds: AMS-GCN test F1 {mean_test:.3} +- {sd_test:.3}, best expert {} {:.3}, val-test gap {gap:+.3}",
        runs.len(),
        best.0,
        best.1
    );
    if mean_test < best.1 - 0.02 {
        return Err(format!("{detail}; ensemble trails the best expert by more than 0.02"));
    }
    if gap.abs() > 0.05 {
        return Err(format!("{detail}; gap exceeds 0.05"));
    }
    Ok(detail)
}

/// Every file under `dir` with its bytes, keyed by relative path.
fn tree(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), bytes);
            }
        }
    }
    Ok(out)
}

fn determinism(serial: &Result<SynthRun, String>, parallel: &Result<SynthRun, String>) -> Outcome {
    let (a, b) = (serial.as_ref().map_err(Clone::clone)?, parallel.as_ref().map_err(Clone::clone)?);
    let (ta, tb) = (tree(&a.dir)?, tree(&b.dir)?);
    let names = |t: &BTreeMap<PathBuf, Vec<u8>>| t.keys().cloned().collect::<Vec<_>>();
    if names(&ta) != names(&tb) {
        return Err(format!("file sets differ: {:?} vs {:?}", names(&ta), names(&tb)));
    }
    let mut compared = 0;
    for (path, bytes) in &ta {
        // The run configuration records the worker count, the one intended difference.
        if path == Path::new(RUN_CONFIG_FILE) {
            continue;
        }
        if &tb[path] != bytes {
            return Err(format!("{} differs between serial and parallel runs", path.display()));
        }
        compared += 1;
    }
    let checkpoints = ta.keys().filter(|p| p.ends_with("checkpoint")).count();
    Ok(format!("{compared} files identical ({checkpoints} checkpoints, histories, manifest, reports), 1 vs 4 workers"))
}

fn pdwalk() -> Option<Outcome> {
    let manifest = std::env::var_os("AMSGCN_PDWALK_MANIFEST")?;
    Some((|| {
        let splits = std::env::var("AMSGCN_PDWALK_SPLITS").map_err(|_| "AMSGCN_PDWALK_SPLITS is not set")?;
        let dataset = load_dataset(Path::new(&manifest), None, None).map_err(|e| e.to_string())?;
        let root = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (mut f1s, mut aurocs) = (Vec::new(), Vec::new());
        for (s, split_path) in splits.split(',').enumerate() {
            for seed in 0..5u64 {
                let split = load_split_with_validation(Path::new(split_path.trim()), 0.4, seed).map_err(|e| e.to_string())?;
                let data = PreparedData::from_dataset(&dataset, &split, &amsgcn_core::preprocess::FeatureKind::ALL)
                    .map_err(|e| e.to_string())?;
                let cfg = RunConfig {
                    train: TrainConfig { seed, ..TrainConfig::default() },
                    ..RunConfig::default()
                };
                let dir = root.path().join(format!("split{s}_seed{seed}"));
                let trained = train_run(&cfg, &data, &dir).map_err(|e| e.to_string())?;
                let run = finish_run(trained, &data, seed)?;
                f1s.push(run.test.weighted_f1);
                aurocs.push(run.test.auroc.ok_or("test AUROC undefined")?);
            }
        }
        let (f1, f1_sd) = mean_std(&f1s);
        let (auc, _) = mean_std(&aurocs);
        let detail = format!("{} runs: test F1 {:.1} +- {:.1}, AUROC {auc:.3}", f1s.len(), 100.0 * f1, 100.0 * f1_sd);
        if (100.0 * f1 - 85.4).abs() > 5.0 || (auc - 0.94).abs() > 0.05 {
            return Err(format!("{detail}; expected F1 85.4 +- 5 and AUROC 0.94 +- 0.05"));
        }
        Ok(detail)
    })())
}

fn main() {
    let mut lines = vec![
        timed("gradient oracle", Some(Duration::from_secs(60)), suites::gradient_oracle),
        timed("preprocessing suite", Some(Duration::from_secs(10)), suites::preprocessing_suite),
        timed("fusion suite", None, suites::fusion_suite),
        timed("metric oracles", None, suites::metric_oracles),
    ];

    let root = tempfile::tempdir().expect("temporary directory");
    let data = common::synthetic_benchmark(1);
    let mut runs = Vec::new();
    for seed in SYNTH_SEEDS {
        let start = Instant::now();
        let run = synth_run(&data, seed, 1, root.path());
        eprintln!("trained synthetic committee for seed {seed} in {:.1?}", start.elapsed());
        runs.push(run);
    }
    lines.push(timed("synthetic end-to-end", None, || end_to_end(&runs[0])));
    lines.push(timed("ensemble dominance", None, || dominance(&runs)));
    lines.push(timed("determinism", None, || {
        let parallel = synth_run(&data, SYNTH_SEEDS[0], 4, root.path());
        determinism(&runs[0], &parallel)
    }));
    match pdwalk() {
        Some(outcome) => lines.push(timed("PD-Walk reproduction", None, || outcome)),
        None => println!("SKIP  PD-Walk reproduction: no user-supplied data (set AMSGCN_PDWALK_MANIFEST)"),
    }

    let failed: Vec<&str> = lines.iter().filter(|l| l.status == "FAIL").map(|l| l.name).collect();
    println!("{} passed, {} failed", lines.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
