//! Whole runs: split a preprocessed dataset, train a committee, fit its
//! fusion on validation data, write the run directory and evaluate.
//!
//! Run directory:
//! `expert_<feature>_<graph>/{checkpoint, history.csv}` per expert,
//! `committee.json`, `run_config.json`, plus `stacking.json` or
//! `joint/{checkpoint, history.csv}` for those fusions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::LoadedDataset;
use crate::dataset::FeatureDataset;
use crate::ensemble::{
    keys_for, CommitteeManifest, EnsemblePrediction, ExpertCommittee, ExpertKey, ExpertScores,
    FittedFusion, FusionStrategy, GbdtConfig, JointCommittee, ManifestExpert, StackingModel,
    VoteMode, VoteScope, MANIFEST_VERSION,
};
use crate::error::{Error, Result};
use crate::expert::ExpertNetwork;
use crate::graph::{build_graph, GraphKind, JointLayout};
use crate::metrics::MetricReport;
use crate::model::Classifier;
use crate::preprocess::{ClipConfig, FeatureKind, GaitClip};
use crate::tensor::{read_checkpoint, write_checkpoint};
use crate::training::{
    assert_subject_disjoint, save_experts, train_committee, train_model, SplitSpec, TrainConfig,
    TrainReport, CHECKPOINT_FILE, EVAL_BATCH, HISTORY_FILE, MANIFEST_FILE,
};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const STACKING_FILE: &str = "stacking.json";
pub const JOINT_DIR: &str = "joint";
pub const LAYOUT_FILE: &str = "layout.json";

/// Unit that one prediction is scored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Every clip counts once.
    #[default]
    Clip,
    /// Clips of one subject and class are pooled by majority vote.
    Subject,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "clip" => Ok(Aggregation::Clip),
            "subject" => Ok(Aggregation::Subject),
            _ => Err(Error::Config(format!("unknown aggregation {s:?}"))),
        }
    }
}

/// Everything that defines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest.
    pub manifest: PathBuf,
    /// Layout name or file replacing the manifest's layout.
    pub layout: Option<String>,
    /// Built-in split name or split file.
    pub split: String,
    /// Share of the test subjects moved to validation when the split file
    /// lists no validation subjects.
    pub val_fraction: f64,
    pub train: TrainConfig,
    pub features: Vec<FeatureKind>,
    pub graphs: Vec<GraphKind>,
    pub fusion: FusionStrategy,
    pub vote_scope: VoteScope,
    pub stacking: GbdtConfig,
    pub aggregation: Aggregation,
    /// Experts trained at the same time.
    pub workers: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            manifest: PathBuf::new(),
            layout: None,
            split: String::new(),
            val_fraction: 0.4,
            train: TrainConfig::default(),
            features: FeatureKind::ALL.to_vec(),
            graphs: GraphKind::ALL.to_vec(),
            fusion: FusionStrategy::Amsgcn,
            vote_scope: VoteScope::Experts,
            stacking: GbdtConfig::default(),
            aggregation: Aggregation::Clip,
            workers: 1,
            out: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Sorts and deduplicates the feature and graph sets and checks the rest.
    pub fn normalized(mut self) -> Result<Self> {
        self.features.sort();
        self.features.dedup();
        self.graphs.sort();
        self.graphs.dedup();
        if self.features.is_empty() {
            return Err(Error::Config("at least one feature is required".into()));
        }
        if self.graphs.is_empty() {
            return Err(Error::Config("at least one graph is required".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("validation fraction {} must lie in [0, 1)", self.val_fraction)));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.train.validate()?;
        Ok(self)
    }

    pub fn keys(&self) -> Vec<ExpertKey> {
        keys_for(&self.features, &self.graphs)
    }
}

/// A dataset cut into subject-disjoint partitions, with the context a run
/// directory needs to describe it.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub class_names: Vec<String>,
    pub layout: JointLayout,
    pub clip: ClipConfig,
    pub split: SplitSpec,
    pub train: FeatureDataset,
    pub val: FeatureDataset,
    pub test: FeatureDataset,
}

impl PreparedData {
    pub fn from_clips(
        clips: &[GaitClip],
        class_names: &[String],
        layout: &JointLayout,
        clip: ClipConfig,
        split: &SplitSpec,
        kinds: &[FeatureKind],
    ) -> Result<Self> {
        let subjects: Vec<String> = clips.iter().map(|c| c.subject_id.clone()).collect();
        let part = split.partition(&subjects)?;
        let parents = layout.selected_parents()?;
        let build = |idx: &[usize]| {
            let picked: Vec<GaitClip> = idx.iter().map(|&i| clips[i].clone()).collect();
            FeatureDataset::from_clips(&picked, &parents, kinds)
        };
        let (train, val, test) = (build(&part.train)?, build(&part.val)?, build(&part.test)?);
        assert_subject_disjoint(&train, &val, &test)?;
        Ok(PreparedData {
            class_names: class_names.to_vec(),
            layout: layout.clone(),
            clip,
            split: split.clone(),
            train,
            val,
            test,
        })
    }

    pub fn from_dataset(dataset: &LoadedDataset, split: &SplitSpec, kinds: &[FeatureKind]) -> Result<Self> {
        Self::from_clips(
            &dataset.cache.clips,
            &dataset.manifest.class_names,
            &dataset.layout,
            dataset.manifest.clip_config(),
            split,
            kinds,
        )
    }

    pub fn partition(&self, name: &str) -> Result<&FeatureDataset> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            _ => Err(Error::Config(format!("unknown partition {name:?}; use train, val or test"))),
        }
    }
}

/// A trained model ready to predict: either experts with a fitted fusion,
/// or a jointly trained committee.
#[derive(Debug, Clone)]
pub enum RunModel {
    Committee {
        committee: ExpertCommittee,
        fusion: FittedFusion,
    },
    Joint(JointCommittee),
}

impl RunModel {
    /// Expert logits over `data`; `None` for a joint committee, whose
    /// experts have no heads of their own.
    pub fn scores(&mut self, data: &FeatureDataset) -> Result<Option<ExpertScores>> {
        match self {
            RunModel::Committee { committee, .. } => committee.score(data, EVAL_BATCH).map(Some),
            RunModel::Joint(_) => Ok(None),
        }
    }

    pub fn predict(&mut self, data: &FeatureDataset) -> Result<Vec<EnsemblePrediction>> {
        match self {
            RunModel::Committee { committee, fusion } => fusion.predict(&committee.score(data, EVAL_BATCH)?),
            RunModel::Joint(joint) => {
                let indices: Vec<usize> = (0..data.len()).collect();
                let kinds = joint.features();
                let mut out = Vec::with_capacity(data.len());
                for chunk in indices.chunks(EVAL_BATCH) {
                    let logits = joint.predict_logits(&data.batch(chunk, &kinds)?)?;
                    let probs = crate::tensor::softmax(&logits)?;
                    out.extend(
                        probs
                            .rows()
                            .map(|r| EnsemblePrediction::from_probabilities(r.to_vec(), Vec::new())),
                    );
                }
                Ok(out)
            }
        }
    }
}

/// Outcome of [`train_run`].
pub struct TrainedRun {
    pub dir: PathBuf,
    pub manifest: CommitteeManifest,
    pub model: RunModel,
    /// Training record per expert, or one entry per expert key sharing the
    /// joint committee's record.
    pub reports: Vec<(ExpertKey, TrainReport)>,
}

fn layout_reference(layout: &JointLayout, run_dir: &Path) -> Result<String> {
    if JointLayout::builtin(layout.name()).as_ref() == Some(layout) {
        return Ok(layout.name().to_string());
    }
    let path = run_dir.join(LAYOUT_FILE);
    let text = serde_json::to_string_pretty(&layout.to_file())?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(LAYOUT_FILE.to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Trains the committee `cfg` describes on `data` and writes it to
/// `run_dir`. Score-level fusions are fitted on the validation partition.
pub fn train_run(cfg: &RunConfig, data: &PreparedData, run_dir: &Path) -> Result<TrainedRun> {
    let cfg = cfg.clone().normalized()?;
    std::fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let classes = data.class_names.len();
    let keys = cfg.keys();
    let mut manifest = CommitteeManifest {
        format_version: MANIFEST_VERSION,
        class_names: data.class_names.clone(),
        layout: layout_reference(&data.layout, run_dir)?,
        clip_frames: data.clip.frames,
        clip_overlap: data.clip.overlap,
        range_scope: data.clip.scope,
        fusion: cfg.fusion,
        vote_scope: cfg.vote_scope,
        experts: Vec::new(),
        voter_weights: None,
        stacking_model: None,
        joint_checkpoint: None,
    };
    let (model, reports) = if cfg.fusion == FusionStrategy::Joint {
        let mut joint = JointCommittee::new(&data.layout, &keys, classes, cfg.train.seed)?;
        let report = train_model(&mut joint, &data.train, &data.val, &cfg.train)?;
        let dir = run_dir.join(JOINT_DIR);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_checkpoint(&dir.join(CHECKPOINT_FILE), &joint.checkpoint())?;
        report.write_history(&dir.join(HISTORY_FILE))?;
        let rel = Path::new(JOINT_DIR).join(CHECKPOINT_FILE);
        manifest.joint_checkpoint = Some(rel.clone());
        manifest.experts = keys
            .iter()
            .map(|k| ManifestExpert {
                feature: k.feature,
                graph: k.graph,
                checkpoint: rel.clone(),
            })
            .collect();
        let reports = keys.iter().map(|&k| (k, report.clone())).collect();
        (RunModel::Joint(joint), reports)
    } else {
        let committee = ExpertCommittee::new(&cfg.features, &cfg.graphs, classes)?;
        let mut run = train_committee(&data.layout, committee, &data.train, &data.val, &cfg.train, cfg.workers)?;
        let saved = save_experts(run_dir, &run)?;
        manifest.experts = saved
            .into_iter()
            .map(|(k, checkpoint)| ManifestExpert {
                feature: k.feature,
                graph: k.graph,
                checkpoint,
            })
            .collect();
        let val_scores = run.committee.score(&data.val, EVAL_BATCH)?;
        let fusion = FittedFusion::fit(cfg.fusion, cfg.vote_scope, &val_scores, &data.val.labels, &cfg.stacking)?;
        match &fusion {
            FittedFusion::Vote { weights, .. } => manifest.voter_weights = Some(weights.clone()),
            FittedFusion::Stacking(model) => {
                write_json(&run_dir.join(STACKING_FILE), model)?;
                manifest.stacking_model = Some(PathBuf::from(STACKING_FILE));
            }
            FittedFusion::Amsgcn => {}
        }
        run.committee.fusion = cfg.fusion;
        let model = RunModel::Committee {
            committee: run.committee,
            fusion,
        };
        (model, run.reports)
    };
    manifest.save(&run_dir.join(MANIFEST_FILE))?;
    write_json(&run_dir.join(RUN_CONFIG_FILE), &cfg)?;
    Ok(TrainedRun {
        dir: run_dir.to_path_buf(),
        manifest,
        model,
        reports,
    })
}

/// Loads a run directory written by [`train_run`].
pub fn load_run(run_dir: &Path) -> Result<(CommitteeManifest, JointLayout, RunModel)> {
    let manifest_path = run_dir.join(MANIFEST_FILE);
    let manifest = CommitteeManifest::load(&manifest_path)?;
    let layout = match JointLayout::builtin(&manifest.layout) {
        Some(l) => l,
        None => JointLayout::load(&run_dir.join(&manifest.layout))?,
    };
    let classes = manifest.class_names.len();
    let keys = keys_for(&manifest.features(), &manifest.graphs());
    let model = if manifest.fusion == FusionStrategy::Joint {
        let rel = manifest
            .joint_checkpoint
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("joint committee manifest names no checkpoint".into()))?;
        let mut joint = JointCommittee::new(&layout, &keys, classes, 0)?;
        joint.restore(&read_checkpoint(&run_dir.join(rel))?)?;
        RunModel::Joint(joint)
    } else {
        let mut committee = ExpertCommittee::new(&manifest.features(), &manifest.graphs(), classes)?;
        committee.fusion = manifest.fusion;
        for e in &manifest.experts {
            let key = ExpertKey::new(e.feature, e.graph);
            let path = run_dir.join(&e.checkpoint);
            let expert = read_checkpoint(&path)
                .and_then(|ck| ExpertNetwork::from_checkpoint(&ck, build_graph(&layout, e.graph)?))
                .map_err(|err| Error::Expert {
                    expert: key.to_string(),
                    source: Box::new(err),
                })?;
            committee.insert(expert)?;
        }
        committee.check_complete()?;
        let fusion = match manifest.fusion {
            FusionStrategy::Amsgcn => FittedFusion::Amsgcn,
            FusionStrategy::HardVote | FusionStrategy::SoftVote => FittedFusion::Vote {
                mode: if manifest.fusion == FusionStrategy::HardVote {
                    VoteMode::Hard
                } else {
                    VoteMode::Soft
                },
                scope: manifest.vote_scope,
                weights: manifest
                    .voter_weights
                    .clone()
                    .ok_or_else(|| Error::Checkpoint("voting manifest carries no voter weights".into()))?,
            },
            FusionStrategy::Stacking => {
                let rel = manifest
                    .stacking_model
                    .as_ref()
                    .ok_or_else(|| Error::Checkpoint("stacking manifest names no meta-model".into()))?;
                let path = run_dir.join(rel);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let model: StackingModel = serde_json::from_str(&text)?;
                FittedFusion::Stacking(model)
            }
            FusionStrategy::Joint => unreachable!("handled above"),
        };
        RunModel::Committee { committee, fusion }
    };
    Ok((manifest, layout, model))
}

/// Probability rows and labels at the chosen aggregation level. Subject
/// aggregation replaces each subject-and-class group by the fraction of its
/// clips voting for each class, so the argmax is the majority vote with
/// ties going to the lower class index.
pub fn aggregate(
    probabilities: &[Vec<f64>],
    data: &FeatureDataset,
    aggregation: Aggregation,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if probabilities.len() != data.len() {
        return Err(Error::Evaluation(format!(
            "{} predictions for {} samples",
            probabilities.len(),
            data.len()
        )));
    }
    match aggregation {
        Aggregation::Clip => Ok((probabilities.to_vec(), data.labels.clone())),
        Aggregation::Subject => {
            let classes = probabilities.first().map_or(0, Vec::len);
            let mut groups: BTreeMap<(&str, usize), Vec<f64>> = BTreeMap::new();
            for (i, p) in probabilities.iter().enumerate() {
                let votes = groups
                    .entry((data.subjects[i].as_str(), data.labels[i]))
                    .or_insert_with(|| vec![0.0; classes]);
                votes[crate::tensor::argmax(p)] += 1.0;
            }
            Ok(groups
                .into_iter()
                .map(|((_, label), votes)| {
                    let n: f64 = votes.iter().sum();
                    (votes.iter().map(|v| v / n).collect(), label)
                })
                .unzip())
        }
    }
}

/// Metric report of fused predictions over `data`.
pub fn evaluate(
    predictions: &[EnsemblePrediction],
    data: &FeatureDataset,
    class_names: &[String],
    aggregation: Aggregation,
) -> Result<MetricReport> {
    let probs: Vec<Vec<f64>> = predictions.iter().map(|p| p.probabilities.clone()).collect();
    let (rows, labels) = aggregate(&probs, data, aggregation)?;
    MetricReport::from_scores(&rows, &labels, class_names)
}

/// One report per expert, each expert scored on its own.
pub fn expert_reports(
    scores: &ExpertScores,
    data: &FeatureDataset,
    class_names: &[String],
    aggregation: Aggregation,
) -> Result<Vec<(ExpertKey, MetricReport)>> {
    scores
        .keys
        .iter()
        .map(|&key| {
            let (rows, labels) = aggregate(&scores.expert_probabilities(key)?, data, aggregation)?;
            Ok((key, MetricReport::from_scores(&rows, &labels, class_names)?))
        })
        .collect()
}

/// File name of the report for one partition, e.g. `report_test.json`.
pub fn report_file_name(partition: &str) -> String {
    format!("report_{partition}.json")
}

pub fn write_report(path: &Path, report: &MetricReport) -> Result<()> {
    write_json(path, report)
}
