//! Skeleton joint layouts and the local (anatomical) and global (star)
//! graphs built over the selected joints.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A rooted joint tree plus the subset of joints fed to the models.
///
/// Joint references are indices into `joints`. The model joint order is the
/// order of `selected`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointLayout {
    name: String,
    joints: Vec<String>,
    parent: Vec<Option<usize>>,
    root: usize,
    selected: Vec<usize>,
    hub: usize,
    center: Vec<usize>,
}

/// JSON form of a layout definition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutFile {
    pub name: String,
    pub joints: Vec<String>,
    /// child -> parent; every joint except `root` appears as a key.
    pub parents: BTreeMap<String, String>,
    pub root: String,
    pub selected: Vec<String>,
    /// Center of the global (star) graph; must be selected.
    pub hub: String,
    /// Joints whose per-frame mean is subtracted during centering.
    pub center: Vec<String>,
}

const KINECT25: [(&str, Option<&str>); 25] = [
    ("SpineBase", None),
    ("SpineMid", Some("SpineBase")),
    ("Neck", Some("SpineShoulder")),
    ("Head", Some("Neck")),
    ("ShoulderLeft", Some("SpineShoulder")),
    ("ElbowLeft", Some("ShoulderLeft")),
    ("WristLeft", Some("ElbowLeft")),
    ("HandLeft", Some("WristLeft")),
    ("ShoulderRight", Some("SpineShoulder")),
    ("ElbowRight", Some("ShoulderRight")),
    ("WristRight", Some("ElbowRight")),
    ("HandRight", Some("WristRight")),
    ("HipLeft", Some("SpineBase")),
    ("KneeLeft", Some("HipLeft")),
    ("AnkleLeft", Some("KneeLeft")),
    ("FootLeft", Some("AnkleLeft")),
    ("HipRight", Some("SpineBase")),
    ("KneeRight", Some("HipRight")),
    ("AnkleRight", Some("KneeRight")),
    ("FootRight", Some("AnkleRight")),
    ("SpineShoulder", Some("SpineMid")),
    ("HandTipLeft", Some("HandLeft")),
    ("ThumbLeft", Some("WristLeft")),
    ("HandTipRight", Some("HandRight")),
    ("ThumbRight", Some("WristRight")),
];

const KINECT_REMOVED: [&str; 6] = [
    "HandTipLeft",
    "ThumbLeft",
    "HandTipRight",
    "ThumbRight",
    "SpineMid",
    "Head",
];

const PDWALK: [(&str, Option<&str>); 13] = [
    ("Head", Some("ShoulderLeft")),
    ("ShoulderLeft", Some("HipLeft")),
    ("ShoulderRight", Some("HipRight")),
    ("ElbowLeft", Some("ShoulderLeft")),
    ("ElbowRight", Some("ShoulderRight")),
    ("WristLeft", Some("ElbowLeft")),
    ("WristRight", Some("ElbowRight")),
    ("HipLeft", None),
    ("HipRight", Some("HipLeft")),
    ("KneeLeft", Some("HipLeft")),
    ("KneeRight", Some("HipRight")),
    ("AnkleLeft", Some("KneeLeft")),
    ("AnkleRight", Some("KneeRight")),
];

fn table_layout(
    name: &str,
    table: &[(&str, Option<&str>)],
    removed: &[&str],
    hub: &str,
    center: &[&str],
) -> LayoutFile {
    let root = table.iter().find(|(_, p)| p.is_none()).unwrap().0;
    LayoutFile {
        name: name.into(),
        joints: table.iter().map(|(j, _)| j.to_string()).collect(),
        parents: table
            .iter()
            .filter_map(|(j, p)| p.map(|p| (j.to_string(), p.to_string())))
            .collect(),
        root: root.into(),
        selected: table
            .iter()
            .map(|(j, _)| *j)
            .filter(|j| !removed.contains(j))
            .map(String::from)
            .collect(),
        hub: hub.into(),
        center: center.iter().map(|s| s.to_string()).collect(),
    }
}

impl JointLayout {
    /// Kinect v2 body: 25 joints, 19 selected (hand tips, thumbs, SpineMid
    /// and Head removed), centered on SpineMid, star hub SpineBase.
    pub fn kinect25() -> Self {
        let file = table_layout("kinect25", &KINECT25, &KINECT_REMOVED, "SpineBase", &["SpineMid"]);
        Self::from_file(file).expect("built-in kinect25 layout is valid")
    }

    /// PD-Walk body: head plus shoulders, elbows, wrists, hips, knees and
    /// ankles; the 12 limb joints are selected. Centered on the hip midpoint.
    pub fn pdwalk12() -> Self {
        let file = table_layout("pdwalk12", &PDWALK, &["Head"], "HipLeft", &["HipLeft", "HipRight"]);
        Self::from_file(file).expect("built-in pdwalk12 layout is valid")
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "kinect25" => Some(Self::kinect25()),
            "pdwalk12" => Some(Self::pdwalk12()),
            _ => None,
        }
    }

    /// A built-in layout id or a path to a layout JSON file.
    pub fn resolve(spec: &str) -> Result<Self> {
        match Self::builtin(spec) {
            Some(l) => Ok(l),
            None => Self::load(Path::new(spec)),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: LayoutFile = serde_json::from_str(&text)?;
        Self::from_file(file)
    }

    pub fn from_file(file: LayoutFile) -> Result<Self> {
        let n = file.joints.len();
        let index = |name: &str| -> Result<usize> {
            file.joints
                .iter()
                .position(|j| j == name)
                .ok_or_else(|| Error::Layout(format!("unknown joint {name:?}")))
        };
        for (i, j) in file.joints.iter().enumerate() {
            if file.joints[..i].contains(j) {
                return Err(Error::Layout(format!("duplicate joint {j:?}")));
            }
        }
        let root = index(&file.root)?;
        let mut parent = vec![None; n];
        for (child, par) in &file.parents {
            let c = index(child)?;
            if c == root {
                return Err(Error::Layout(format!("root {child:?} cannot have a parent")));
            }
            parent[c] = Some(index(par)?);
        }
        for (i, p) in parent.iter().enumerate() {
            if i != root && p.is_none() {
                return Err(Error::Layout(format!("joint {:?} has no parent", file.joints[i])));
            }
        }
        // Every joint must reach the root within n steps.
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while let Some(p) = parent[cur] {
                cur = p;
                steps += 1;
                if steps > n {
                    return Err(Error::Layout(format!(
                        "cycle in parent map through {:?}",
                        file.joints[start]
                    )));
                }
            }
        }
        let mut selected = Vec::with_capacity(file.selected.len());
        for s in &file.selected {
            let i = index(s)?;
            if selected.contains(&i) {
                return Err(Error::Layout(format!("joint {s:?} selected twice")));
            }
            selected.push(i);
        }
        if selected.is_empty() {
            return Err(Error::Layout("no joints selected".into()));
        }
        let hub = index(&file.hub)?;
        if !selected.contains(&hub) {
            return Err(Error::Layout(format!("hub {:?} is not a selected joint", file.hub)));
        }
        if file.center.is_empty() {
            return Err(Error::Layout("centering reference is empty".into()));
        }
        let center = file.center.iter().map(|c| index(c)).collect::<Result<Vec<_>>>()?;
        let layout = JointLayout {
            name: file.name,
            joints: file.joints,
            parent,
            root,
            selected,
            hub,
            center,
        };
        layout.selected_parents()?;
        Ok(layout)
    }

    pub fn to_file(&self) -> LayoutFile {
        LayoutFile {
            name: self.name.clone(),
            joints: self.joints.clone(),
            parents: self
                .parent
                .iter()
                .enumerate()
                .filter_map(|(c, p)| p.map(|p| (self.joints[c].clone(), self.joints[p].clone())))
                .collect(),
            root: self.joints[self.root].clone(),
            selected: self.selected_names(),
            hub: self.joints[self.hub].clone(),
            center: self.center.iter().map(|&c| self.joints[c].clone()).collect(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joints
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j == name)
    }

    pub fn selected(&self) -> &[usize] {
        &self.selected
    }

    pub fn selected_count(&self) -> usize {
        self.selected.len()
    }

    pub fn selected_names(&self) -> Vec<String> {
        self.selected.iter().map(|&i| self.joints[i].clone()).collect()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parent[joint]
    }

    pub fn hub(&self) -> usize {
        self.hub
    }

    pub fn center_joints(&self) -> &[usize] {
        &self.center
    }

    /// For each selected joint (in model order), the model index of its
    /// nearest selected ancestor. Exactly one selected joint has none; more
    /// than one means the selection is disconnected.
    pub fn selected_parents(&self) -> Result<Vec<Option<usize>>> {
        let pos = |j: usize| self.selected.iter().position(|&s| s == j);
        let mut out = Vec::with_capacity(self.selected.len());
        let mut tops = Vec::new();
        for &j in &self.selected {
            let mut cur = self.parent[j];
            let mut found = None;
            while let Some(p) = cur {
                if let Some(i) = pos(p) {
                    found = Some(i);
                    break;
                }
                cur = self.parent[p];
            }
            if found.is_none() {
                tops.push(self.joints[j].clone());
            }
            out.push(found);
        }
        if tops.len() > 1 {
            return Err(Error::Layout(format!(
                "selection is disconnected: {tops:?} have no selected ancestor"
            )));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Local,
    Global,
}

impl GraphKind {
    pub const ALL: [GraphKind; 2] = [GraphKind::Local, GraphKind::Global];

    pub fn as_str(self) -> &'static str {
        match self {
            GraphKind::Local => "local",
            GraphKind::Global => "global",
        }
    }
}

impl std::str::FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local" => Ok(GraphKind::Local),
            "global" => Ok(GraphKind::Global),
            other => Err(Error::Config(format!("unknown graph kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for GraphKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Undirected graph over the selected joints with its symmetric
/// normalization `D^-1/2 (A + I) D^-1/2` precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    kind: GraphKind,
    joints: usize,
    adjacency: Vec<u8>,
    normalized: Arc<[f64]>,
}

impl SkeletonGraph {
    /// Builds a graph from an edge list over `joints` nodes.
    pub fn from_edges(kind: GraphKind, joints: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adjacency = vec![0u8; joints * joints];
        for &(a, b) in edges {
            if a >= joints || b >= joints || a == b {
                return Err(Error::Layout(format!("invalid edge ({a}, {b}) for {joints} joints")));
            }
            adjacency[a * joints + b] = 1;
            adjacency[b * joints + a] = 1;
        }
        Ok(normalize_adjacency(SkeletonGraph {
            kind,
            joints,
            adjacency,
            normalized: Arc::from(Vec::new()),
        }))
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn adjacency(&self) -> &[u8] {
        &self.adjacency
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a * self.joints + b] == 1
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&a| a == 1).count() / 2
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node * self.joints..(node + 1) * self.joints]
            .iter()
            .filter(|&&a| a == 1)
            .count()
    }

    pub fn normalized(&self) -> &Arc<[f64]> {
        &self.normalized
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let v = self.joints;
        let mut seen = vec![false; v];
        if perm.len() != v || perm.iter().any(|&p| p >= v || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Layout("not a permutation of the graph's nodes".into()));
        }
        let mut edges = Vec::new();
        for i in 0..v {
            for j in i + 1..v {
                if self.has_edge(perm[i], perm[j]) {
                    edges.push((i, j));
                }
            }
        }
        Self::from_edges(self.kind, v, &edges)
    }
}

/// Anatomical graph: each selected joint linked to its nearest selected
/// ancestor, so deselected joints are bridged over.
pub fn build_local_graph(layout: &JointLayout) -> Result<SkeletonGraph> {
    let parents = layout.selected_parents()?;
    let edges: Vec<(usize, usize)> = parents
        .iter()
        .enumerate()
        .filter_map(|(i, p)| p.map(|p| (i, p)))
        .collect();
    SkeletonGraph::from_edges(GraphKind::Local, layout.selected_count(), &edges)
}

/// Star graph: every selected joint linked to `hub`.
pub fn build_global_graph(layout: &JointLayout, hub: &str) -> Result<SkeletonGraph> {
    let hub_joint = layout
        .joint_index(hub)
        .ok_or_else(|| Error::Layout(format!("unknown hub joint {hub:?}")))?;
    let h = layout
        .selected()
        .iter()
        .position(|&s| s == hub_joint)
        .ok_or_else(|| Error::Layout(format!("hub {hub:?} is not a selected joint")))?;
    let edges: Vec<(usize, usize)> = (0..layout.selected_count())
        .filter(|&j| j != h)
        .map(|j| (j, h))
        .collect();
    SkeletonGraph::from_edges(GraphKind::Global, layout.selected_count(), &edges)
}

/// Both graphs of a layout; the global one uses the layout's own hub.
pub fn build_graph(layout: &JointLayout, kind: GraphKind) -> Result<SkeletonGraph> {
    match kind {
        GraphKind::Local => build_local_graph(layout),
        GraphKind::Global => build_global_graph(layout, &layout.joint_names()[layout.hub()]),
    }
}

/// Recomputes `D^-1/2 (A + I) D^-1/2`, with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(mut g: SkeletonGraph) -> SkeletonGraph {
    let v = g.joints;
    let inv_sqrt: Vec<f64> = (0..v).map(|i| 1.0 / ((g.degree(i) + 1) as f64).sqrt()).collect();
    let mut norm = vec![0.0; v * v];
    for i in 0..v {
        for j in 0..v {
            let a = if i == j { 1.0 } else { f64::from(g.adjacency[i * v + j]) };
            if a != 0.0 {
                // Same operand order for (i, j) and (j, i) keeps the result bitwise symmetric.
                let (lo, hi) = if i < j { (i, j) } else { (j, i) };
                norm[i * v + j] = inv_sqrt[lo] * inv_sqrt[hi] * a;
            }
        }
    }
    g.normalized = Arc::from(norm);
    g
}
