//! Expert committees and the ways their outputs are combined: per-feature
//! softmax fusion of local and global logits, weighted-majority voting,
//! gradient-boosted stacking and jointly trained fusion.

mod gbdt;
mod joint;
mod manifest;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use gbdt::{stacking_fit, GbdtConfig, StackingModel};
pub use joint::JointCommittee;
pub use manifest::{load_committee, CommitteeManifest, ManifestExpert, MANIFEST_VERSION};

use crate::dataset::FeatureDataset;
use crate::error::{Error, Result};
use crate::expert::ExpertNetwork;
use crate::graph::GraphKind;
use crate::model::Classifier;
use crate::preprocess::FeatureKind;
use crate::tensor::{argmax, softmax_row};

/// Multiplicative penalty applied to voters that err alongside the ensemble.
pub const VOTER_BETA: f64 = 0.5;

/// Identifies one expert: the stream it reads and the graph it convolves over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ExpertKey {
    pub feature: FeatureKind,
    pub graph: GraphKind,
}

impl ExpertKey {
    pub fn new(feature: FeatureKind, graph: GraphKind) -> Self {
        ExpertKey { feature, graph }
    }

    /// Every (feature, graph) pair, features outermost.
    pub fn all() -> Vec<ExpertKey> {
        keys_for(&FeatureKind::ALL, &GraphKind::ALL)
    }

    /// Seed for this expert, derived from a run-level base seed so that
    /// experts differ from each other but not between runs.
    pub fn seed(self, base: u64) -> u64 {
        let digest = Sha256::digest(format!("{base}:{}:{}", self.feature, self.graph).as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Directory name of this expert inside a run directory.
    pub fn dir_name(self) -> String {
        format!("expert_{}_{}", self.feature, self.graph)
    }
}

impl fmt::Display for ExpertKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.feature, self.graph)
    }
}

/// Cartesian product of `features` and `graphs`, features outermost.
pub fn keys_for(features: &[FeatureKind], graphs: &[GraphKind]) -> Vec<ExpertKey> {
    features
        .iter()
        .flat_map(|&f| graphs.iter().map(move |&g| ExpertKey::new(f, g)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Softmax of summed local and global logits per feature, averaged over features.
    #[default]
    Amsgcn,
    HardVote,
    SoftVote,
    Stacking,
    Joint,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 5] = [
        FusionStrategy::Amsgcn,
        FusionStrategy::HardVote,
        FusionStrategy::SoftVote,
        FusionStrategy::Stacking,
        FusionStrategy::Joint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::Amsgcn => "amsgcn",
            FusionStrategy::HardVote => "hard_vote",
            FusionStrategy::SoftVote => "soft_vote",
            FusionStrategy::Stacking => "stacking",
            FusionStrategy::Joint => "joint",
        }
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        let alias = match norm.as_str() {
            "hard_weighted" | "hard_weighted_majority" => Some(FusionStrategy::HardVote),
            "soft_weighted" | "soft_weighted_majority" => Some(FusionStrategy::SoftVote),
            "xgboost" | "gbdt" => Some(FusionStrategy::Stacking),
            "joint_training" => Some(FusionStrategy::Joint),
            _ => None,
        };
        alias
            .or_else(|| FusionStrategy::ALL.into_iter().find(|f| f.as_str() == norm))
            .ok_or_else(|| Error::Config(format!("unknown fusion strategy {s:?}")))
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Who votes under the weighted-majority schemes: every expert, or every
/// feature's fused local+global score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteScope {
    #[default]
    Experts,
    Features,
}

impl FromStr for VoteScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "experts" | "expert" => Ok(VoteScope::Experts),
            "features" | "feature" => Ok(VoteScope::Features),
            _ => Err(Error::Config(format!("unknown vote scope {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMode {
    Hard,
    Soft,
}

/// Fused class distribution for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    pub probabilities: Vec<f64>,
    pub predicted_class: usize,
    /// One probability vector per feature, in committee feature order.
    /// Empty for fusions that do not go through features.
    pub per_feature_scores: Vec<Vec<f64>>,
}

impl EnsemblePrediction {
    pub fn from_probabilities(probabilities: Vec<f64>, per_feature_scores: Vec<Vec<f64>>) -> Self {
        EnsemblePrediction {
            predicted_class: argmax(&probabilities),
            probabilities,
            per_feature_scores,
        }
    }
}

fn softmax_vec(row: &[f64]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(row.len());
    softmax_row(row, &mut out)?;
    Ok(out)
}

/// Equal-weight fusion: each entry holds one feature's branch logits
/// (already summed over its graphs); each is turned into a distribution
/// with one softmax and the distributions are averaged.
pub fn fuse_feature_logits(feature_logits: &[Vec<f64>]) -> Result<EnsemblePrediction> {
    let first = feature_logits
        .first()
        .ok_or_else(|| Error::CommitteeIncomplete("no feature scores to fuse".into()))?;
    let c = first.len();
    if feature_logits.iter().any(|l| l.len() != c) {
        return Err(Error::Shape("feature logits disagree on class count".into()));
    }
    let per_feature = feature_logits
        .iter()
        .map(|l| softmax_vec(l))
        .collect::<Result<Vec<_>>>()?;
    let n = per_feature.len() as f64;
    let probabilities = (0..c)
        .map(|k| per_feature.iter().map(|p| p[k]).sum::<f64>() / n)
        .collect();
    Ok(EnsemblePrediction::from_probabilities(probabilities, per_feature))
}

/// Per-model voting weights, all starting at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoterWeights {
    pub weights: Vec<f64>,
    pub beta: f64,
}

impl VoterWeights {
    pub fn new(models: usize) -> Self {
        VoterWeights {
            weights: vec![1.0; models],
            beta: VOTER_BETA,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// After a wrong ensemble prediction every model that was also wrong is
    /// scaled by beta. A correct ensemble prediction changes nothing.
    pub fn update(&mut self, ensemble_wrong: bool, model_correct: &[bool]) -> Result<()> {
        if model_correct.len() != self.weights.len() {
            return Err(Error::Shape(format!(
                "{} correctness flags for {} voters",
                model_correct.len(),
                self.weights.len()
            )));
        }
        if ensemble_wrong {
            for (w, &ok) in self.weights.iter_mut().zip(model_correct) {
                if !ok {
                    *w *= self.beta;
                }
            }
        }
        Ok(())
    }

    /// One pass over validation samples in order. `voter_probs` is indexed
    /// `[voter][sample][class]`.
    pub fn fit(voter_probs: &[Vec<Vec<f64>>], labels: &[usize], mode: VoteMode) -> Result<Self> {
        let mut vw = VoterWeights::new(voter_probs.len());
        if voter_probs.iter().any(|v| v.len() != labels.len()) {
            return Err(Error::Shape("voter scores and labels differ in length".into()));
        }
        for (s, &label) in labels.iter().enumerate() {
            let rows: Vec<&[f64]> = voter_probs.iter().map(|v| v[s].as_slice()).collect();
            let votes: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
            let ensemble = match mode {
                VoteMode::Hard => hard_weighted_vote(&vw.weights, &votes, rows[0].len())?,
                VoteMode::Soft => soft_weighted_vote(&vw.weights, &rows)?.predicted_class,
            };
            let correct: Vec<bool> = votes.iter().map(|&v| v == label).collect();
            vw.update(ensemble != label, &correct)?;
        }
        Ok(vw)
    }
}

/// Class whose voters' weights sum highest; ties go to the lowest index.
pub fn hard_weighted_vote(weights: &[f64], predictions: &[usize], classes: usize) -> Result<usize> {
    if weights.len() != predictions.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} votes",
            weights.len(),
            predictions.len()
        )));
    }
    let mut tally = vec![0.0; classes];
    for (&w, &p) in weights.iter().zip(predictions) {
        *tally
            .get_mut(p)
            .ok_or_else(|| Error::Label(format!("vote {p} outside {classes} classes")))? += w;
    }
    Ok(argmax(&tally))
}

/// Weighted sum of model distributions, renormalized.
pub fn soft_weighted_vote(weights: &[f64], probabilities: &[&[f64]]) -> Result<EnsemblePrediction> {
    if weights.len() != probabilities.len() || probabilities.is_empty() {
        return Err(Error::Shape(format!(
            "{} weights for {} probability vectors",
            weights.len(),
            probabilities.len()
        )));
    }
    let c = probabilities[0].len();
    let mut score = vec![0.0; c];
    for (&w, p) in weights.iter().zip(probabilities) {
        if p.len() != c {
            return Err(Error::Shape("probability vectors disagree on class count".into()));
        }
        score.iter_mut().zip(*p).for_each(|(s, &x)| *s += w * x);
    }
    let total: f64 = score.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Evaluation("voter weights sum to zero".into()));
    }
    score.iter_mut().for_each(|s| *s /= total);
    Ok(EnsemblePrediction::from_probabilities(score, Vec::new()))
}

/// Raw expert logits over a set of samples, one `samples x classes` matrix
/// per expert in committee key order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertScores {
    pub keys: Vec<ExpertKey>,
    pub features: Vec<FeatureKind>,
    pub classes: usize,
    pub logits: Vec<Vec<Vec<f64>>>,
}

impl ExpertScores {
    pub fn samples(&self) -> usize {
        self.logits.first().map_or(0, Vec::len)
    }

    fn logits_of(&self, key: ExpertKey) -> Option<&Vec<Vec<f64>>> {
        self.keys.iter().position(|&k| k == key).map(|i| &self.logits[i])
    }

    /// Per feature and sample, the logits summed over that feature's graphs.
    fn feature_logits(&self) -> Vec<Vec<Vec<f64>>> {
        self.features
            .iter()
            .map(|&f| {
                let branches: Vec<&Vec<Vec<f64>>> = self
                    .keys
                    .iter()
                    .zip(&self.logits)
                    .filter(|(k, _)| k.feature == f)
                    .map(|(_, l)| l)
                    .collect();
                (0..self.samples())
                    .map(|s| {
                        (0..self.classes)
                            .map(|c| branches.iter().map(|b| b[s][c]).sum())
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Equal-weight per-feature fusion for every sample.
    pub fn amsgcn(&self) -> Result<Vec<EnsemblePrediction>> {
        let per_feature = self.feature_logits();
        (0..self.samples())
            .map(|s| {
                let rows: Vec<Vec<f64>> = per_feature.iter().map(|f| f[s].clone()).collect();
                fuse_feature_logits(&rows)
            })
            .collect()
    }

    /// Class distributions of each voter, indexed `[voter][sample][class]`.
    pub fn voter_probabilities(&self, scope: VoteScope) -> Result<Vec<Vec<Vec<f64>>>> {
        let source = match scope {
            VoteScope::Experts => self.logits.clone(),
            VoteScope::Features => self.feature_logits(),
        };
        source
            .iter()
            .map(|v| v.iter().map(|row| softmax_vec(row)).collect())
            .collect()
    }

    /// Stacking inputs: every expert's class distribution, concatenated
    /// per sample in key order.
    pub fn stacking_inputs(&self) -> Result<Vec<Vec<f64>>> {
        let probs = self.voter_probabilities(VoteScope::Experts)?;
        Ok((0..self.samples())
            .map(|s| probs.iter().flat_map(|v| v[s].iter().copied()).collect())
            .collect())
    }

    /// The scores of the experts whose feature is in `features`, as if a
    /// committee of just those features had been scored.
    pub fn restrict(&self, features: &[FeatureKind]) -> Result<ExpertScores> {
        let mut kept: Vec<FeatureKind> = Vec::new();
        for &f in features {
            if !self.features.contains(&f) {
                return Err(Error::CommitteeIncomplete(format!("no scores for feature {f}")));
            }
            if !kept.contains(&f) {
                kept.push(f);
            }
        }
        kept.sort();
        let (keys, logits) = self
            .keys
            .iter()
            .zip(&self.logits)
            .filter(|(k, _)| kept.contains(&k.feature))
            .map(|(k, l)| (*k, l.clone()))
            .unzip();
        Ok(ExpertScores {
            keys,
            features: kept,
            classes: self.classes,
            logits,
        })
    }

    /// Single-expert distributions, for comparing experts individually.
    pub fn expert_probabilities(&self, key: ExpertKey) -> Result<Vec<Vec<f64>>> {
        self.logits_of(key)
            .ok_or_else(|| Error::CommitteeIncomplete(format!("no scores for expert {key}")))?
            .iter()
            .map(|row| softmax_vec(row))
            .collect()
    }
}

/// A score-level fusion with whatever it learned from validation data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum FittedFusion {
    Amsgcn,
    Vote {
        mode: VoteMode,
        scope: VoteScope,
        weights: VoterWeights,
    },
    Stacking(StackingModel),
}

impl FittedFusion {
    /// Fits `strategy` on validation scores. Joint training is a model of
    /// its own and cannot be fitted from expert scores.
    pub fn fit(
        strategy: FusionStrategy,
        scope: VoteScope,
        val: &ExpertScores,
        labels: &[usize],
        gbdt: &GbdtConfig,
    ) -> Result<Self> {
        Ok(match strategy {
            FusionStrategy::Amsgcn => FittedFusion::Amsgcn,
            FusionStrategy::HardVote | FusionStrategy::SoftVote => {
                let mode = if strategy == FusionStrategy::HardVote {
                    VoteMode::Hard
                } else {
                    VoteMode::Soft
                };
                let probs = val.voter_probabilities(scope)?;
                FittedFusion::Vote {
                    mode,
                    scope,
                    weights: VoterWeights::fit(&probs, labels, mode)?,
                }
            }
            FusionStrategy::Stacking => {
                FittedFusion::Stacking(stacking_fit(&val.stacking_inputs()?, labels, val.classes, gbdt)?)
            }
            FusionStrategy::Joint => {
                return Err(Error::Config(
                    "joint fusion is trained end to end, not fitted on expert scores".into(),
                ))
            }
        })
    }

    /// Fused predictions for every sample. A hard vote puts all mass on
    /// the winning class.
    pub fn predict(&self, scores: &ExpertScores) -> Result<Vec<EnsemblePrediction>> {
        match self {
            FittedFusion::Amsgcn => scores.amsgcn(),
            FittedFusion::Vote { mode, scope, weights } => {
                let probs = scores.voter_probabilities(*scope)?;
                if probs.len() != weights.len() {
                    return Err(Error::Shape(format!(
                        "{} voter weights for {} voters",
                        weights.len(),
                        probs.len()
                    )));
                }
                (0..scores.samples())
                    .map(|s| {
                        let rows: Vec<&[f64]> = probs.iter().map(|v| v[s].as_slice()).collect();
                        match mode {
                            VoteMode::Soft => soft_weighted_vote(&weights.weights, &rows),
                            VoteMode::Hard => {
                                let votes: Vec<usize> = rows.iter().map(|r| argmax(r)).collect();
                                let c = hard_weighted_vote(&weights.weights, &votes, scores.classes)?;
                                let mut p = vec![0.0; scores.classes];
                                p[c] = 1.0;
                                Ok(EnsemblePrediction::from_probabilities(p, Vec::new()))
                            }
                        }
                    })
                    .collect()
            }
            FittedFusion::Stacking(model) => scores
                .stacking_inputs()?
                .iter()
                .map(|row| Ok(EnsemblePrediction::from_probabilities(model.predict_proba(row)?, Vec::new())))
                .collect(),
        }
    }
}

/// A set of trained experts covering every pair of the chosen features and
/// graphs. The full committee has ten.
#[derive(Debug, Clone)]
pub struct ExpertCommittee {
    features: Vec<FeatureKind>,
    graphs: Vec<GraphKind>,
    classes: usize,
    pub fusion: FusionStrategy,
    experts: BTreeMap<ExpertKey, ExpertNetwork>,
}

impl ExpertCommittee {
    pub fn new(features: &[FeatureKind], graphs: &[GraphKind], classes: usize) -> Result<Self> {
        let mut features = features.to_vec();
        let mut graphs = graphs.to_vec();
        features.sort();
        features.dedup();
        graphs.sort();
        graphs.dedup();
        if features.is_empty() || graphs.is_empty() {
            return Err(Error::Config("a committee needs at least one feature and one graph".into()));
        }
        Ok(ExpertCommittee {
            features,
            graphs,
            classes,
            fusion: FusionStrategy::Amsgcn,
            experts: BTreeMap::new(),
        })
    }

    /// All five features on both graphs.
    pub fn full(classes: usize) -> Self {
        ExpertCommittee::new(&FeatureKind::ALL, &GraphKind::ALL, classes).expect("non-empty")
    }

    pub fn features(&self) -> &[FeatureKind] {
        &self.features
    }

    pub fn graphs(&self) -> &[GraphKind] {
        &self.graphs
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn keys(&self) -> Vec<ExpertKey> {
        keys_for(&self.features, &self.graphs)
    }

    pub fn insert(&mut self, expert: ExpertNetwork) -> Result<()> {
        let cfg = expert.config();
        let key = ExpertKey::new(cfg.feature, cfg.graph);
        if !self.features.contains(&key.feature) || !self.graphs.contains(&key.graph) {
            return Err(Error::Config(format!("expert {key} is not part of this committee")));
        }
        if cfg.classes != self.classes {
            return Err(Error::Config(format!(
                "expert {key} predicts {} classes, committee has {}",
                cfg.classes, self.classes
            )));
        }
        if expert.graph().kind() != key.graph {
            return Err(Error::Config(format!(
                "expert {key} was built on a {} graph",
                expert.graph().kind()
            )));
        }
        self.experts.insert(key, expert);
        Ok(())
    }

    pub fn get(&self, key: ExpertKey) -> Option<&ExpertNetwork> {
        self.experts.get(&key)
    }

    pub fn get_mut(&mut self, key: ExpertKey) -> Option<&mut ExpertNetwork> {
        self.experts.get_mut(&key)
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn missing(&self) -> Vec<ExpertKey> {
        self.keys()
            .into_iter()
            .filter(|k| !self.experts.contains_key(k))
            .collect()
    }

    pub fn check_complete(&self) -> Result<()> {
        let missing = self.missing();
        if missing.is_empty() {
            Ok(())
        } else {
            let names: Vec<String> = missing.iter().map(ToString::to_string).collect();
            Err(Error::CommitteeIncomplete(format!("missing experts: {}", names.join(", "))))
        }
    }

    /// Eval-mode logits of every expert over `data`, in batches.
    pub fn score(&mut self, data: &FeatureDataset, batch_size: usize) -> Result<ExpertScores> {
        self.check_complete()?;
        let keys = self.keys();
        let indices: Vec<usize> = (0..data.len()).collect();
        let mut logits = Vec::with_capacity(keys.len());
        for &key in &keys {
            let expert = self.experts.get_mut(&key).expect("complete committee");
            let mut rows = Vec::with_capacity(data.len());
            for chunk in indices.chunks(batch_size.max(1)) {
                let batch = data.batch(chunk, &[key.feature])?;
                let out = expert
                    .predict_logits(&batch)
                    .map_err(|e| Error::Expert {
                        expert: key.to_string(),
                        source: Box::new(e),
                    })?;
                rows.extend(out.rows().map(<[f64]>::to_vec));
            }
            logits.push(rows);
        }
        Ok(ExpertScores {
            keys,
            features: self.features.clone(),
            classes: self.classes,
            logits,
        })
    }

    /// Equal-weight fused predictions for every sample of `data`.
    pub fn amsgcn_predict(&mut self, data: &FeatureDataset) -> Result<Vec<EnsemblePrediction>> {
        self.score(data, 64)?.amsgcn()
    }
}
