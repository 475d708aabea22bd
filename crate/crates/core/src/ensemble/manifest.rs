//! On-disk description of a trained committee.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ExpertCommittee, ExpertKey, FusionStrategy, VoteScope, VoterWeights};
use crate::error::{Error, Result};
use crate::expert::ExpertNetwork;
use crate::graph::{build_graph, GraphKind, JointLayout};
use crate::preprocess::{FeatureKind, RangeScope};
use crate::tensor::read_checkpoint;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestExpert {
    pub feature: FeatureKind,
    pub graph: GraphKind,
    /// Relative paths resolve against the manifest's directory.
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitteeManifest {
    pub format_version: u32,
    pub class_names: Vec<String>,
    /// Built-in layout name or path to a layout file.
    pub layout: String,
    pub clip_frames: usize,
    pub clip_overlap: usize,
    #[serde(default)]
    pub range_scope: RangeScope,
    pub fusion: FusionStrategy,
    #[serde(default)]
    pub vote_scope: VoteScope,
    pub experts: Vec<ManifestExpert>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voter_weights: Option<VoterWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stacking_model: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_checkpoint: Option<PathBuf>,
}

impl CommitteeManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: CommitteeManifest = serde_json::from_str(&text)?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Config(format!(
                "{}: committee manifest version {} is not supported",
                path.display(),
                m.format_version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn features(&self) -> Vec<FeatureKind> {
        let mut f: Vec<FeatureKind> = self.experts.iter().map(|e| e.feature).collect();
        f.sort();
        f.dedup();
        f
    }

    pub fn graphs(&self) -> Vec<GraphKind> {
        let mut g: Vec<GraphKind> = self.experts.iter().map(|e| e.graph).collect();
        g.sort();
        g.dedup();
        g
    }

    pub fn checkpoint_of(&self, key: ExpertKey) -> Option<&Path> {
        self.experts
            .iter()
            .find(|e| e.feature == key.feature && e.graph == key.graph)
            .map(|e| e.checkpoint.as_path())
    }
}

/// Resolves `p` against `base` unless it is absolute.
pub(crate) fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads the manifest at `path` and every expert checkpoint it lists.
pub fn load_committee(path: &Path) -> Result<(CommitteeManifest, JointLayout, ExpertCommittee)> {
    let manifest = CommitteeManifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let layout = match JointLayout::builtin(&manifest.layout) {
        Some(l) => l,
        None => JointLayout::load(&resolve(base, Path::new(&manifest.layout)))?,
    };
    let mut committee = ExpertCommittee::new(
        &manifest.features(),
        &manifest.graphs(),
        manifest.class_names.len(),
    )?;
    committee.fusion = manifest.fusion;
    for e in &manifest.experts {
        let ck = read_checkpoint(&resolve(base, &e.checkpoint))?;
        let graph = build_graph(&layout, e.graph)?;
        committee.insert(ExpertNetwork::from_checkpoint(&ck, graph)?)?;
    }
    committee.check_complete()?;
    Ok((manifest, layout, committee))
}
