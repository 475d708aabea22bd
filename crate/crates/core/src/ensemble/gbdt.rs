//! Gradient-boosted decision trees for stacking: softmax objective with
//! second-order leaf weights, exact greedy splits and L2 leaf regularization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, softmax_row};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtConfig {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// L2 penalty on leaf weights.
    pub lambda: f64,
    /// Minimum hessian sum on each side of a split.
    pub min_child_weight: f64,
    /// Minimum loss reduction for a split to be kept.
    pub min_split_gain: f64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig {
            rounds: 100,
            max_depth: 3,
            learning_rate: 0.1,
            lambda: 1.0,
            min_child_weight: 1.0,
            min_split_gain: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    i = if row[feature] < threshold { left } else { right };
                }
            }
        }
    }
}

/// Boosted multiclass meta-classifier over concatenated expert scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackingModel {
    pub config: GbdtConfig,
    pub classes: usize,
    pub inputs: usize,
    /// Log class priors of the training labels.
    base_scores: Vec<f64>,
    /// `rounds x classes` trees.
    trees: Vec<Vec<Tree>>,
}

impl StackingModel {
    pub fn raw_scores(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.inputs {
            return Err(Error::Shape(format!(
                "stacking model takes {} inputs, got {}",
                self.inputs,
                row.len()
            )));
        }
        let mut score = self.base_scores.clone();
        for round in &self.trees {
            for (s, tree) in score.iter_mut().zip(round) {
                *s += self.config.learning_rate * tree.predict(row);
            }
        }
        Ok(score)
    }

    pub fn predict_proba(&self, row: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.classes);
        softmax_row(&self.raw_scores(row)?, &mut out)?;
        Ok(out)
    }

    pub fn predict(&self, row: &[f64]) -> Result<usize> {
        Ok(argmax(&self.raw_scores(row)?))
    }

    pub fn tree_count(&self) -> usize {
        self.trees.iter().map(Vec::len).sum()
    }
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    grad: &'a [f64],
    hess: &'a [f64],
    config: &'a GbdtConfig,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn leaf_value(&self, idx: &[usize]) -> f64 {
        let (g, h) = self.sums(idx);
        -g / (h + self.config.lambda)
    }

    fn sums(&self, idx: &[usize]) -> (f64, f64) {
        idx.iter()
            .fold((0.0, 0.0), |(g, h), &i| (g + self.grad[i], h + self.hess[i]))
    }

    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.config.lambda)
    }

    /// Best (gain, feature, threshold) over all features, first wins ties.
    fn best_split(&self, idx: &[usize]) -> Option<(f64, usize, f64)> {
        let (g_all, h_all) = self.sums(idx);
        let parent = self.score(g_all, h_all);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = idx.to_vec();
        for f in 0..self.x[0].len() {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            let (mut gl, mut hl) = (0.0, 0.0);
            for w in 0..order.len() - 1 {
                let i = order[w];
                gl += self.grad[i];
                hl += self.hess[i];
                let (lo, hi) = (self.x[i][f], self.x[order[w + 1]][f]);
                if lo == hi {
                    continue;
                }
                let (gr, hr) = (g_all - gl, h_all - hl);
                if hl < self.config.min_child_weight || hr < self.config.min_child_weight {
                    continue;
                }
                let gain = 0.5 * (self.score(gl, hl) + self.score(gr, hr) - parent);
                if gain > self.config.min_split_gain && best.is_none_or(|b| gain > b.0) {
                    best = Some((gain, f, lo + (hi - lo) / 2.0));
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: &[usize], depth: usize) -> usize {
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { value: self.leaf_value(idx) });
        if depth >= self.config.max_depth || idx.len() < 2 {
            return at;
        }
        if let Some((_, feature, threshold)) = self.best_split(idx) {
            let (l, r): (Vec<usize>, Vec<usize>) =
                idx.iter().partition(|&&i| self.x[i][feature] < threshold);
            let left = self.grow(&l, depth + 1);
            let right = self.grow(&r, depth + 1);
            self.nodes[at] = Node::Split { feature, threshold, left, right };
        }
        at
    }
}

/// Fits the meta-classifier on validation-set expert scores.
pub fn stacking_fit(
    x: &[Vec<f64>],
    labels: &[usize],
    classes: usize,
    config: &GbdtConfig,
) -> Result<StackingModel> {
    if x.len() != labels.len() || x.is_empty() {
        return Err(Error::Shape(format!("{} rows for {} labels", x.len(), labels.len())));
    }
    let inputs = x[0].len();
    if inputs == 0 || x.iter().any(|r| r.len() != inputs) {
        return Err(Error::Shape("stacking rows must share a positive width".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label(format!("label {l} outside {classes} classes")));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::DegenerateFit(format!(
            "all {} stacking samples belong to class {}",
            labels.len(),
            labels[0]
        )));
    }
    if x.len() < classes * 10 {
        log::warn!(
            "stacking on {} samples, fewer than the recommended {}",
            x.len(),
            classes * 10
        );
    }
    let n = x.len();
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    // absent classes get a large negative prior instead of minus infinity
    let base_scores: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 { -30.0 } else { (c as f64 / n as f64).ln() })
        .collect();
    let mut scores: Vec<Vec<f64>> = vec![base_scores.clone(); n];
    let mut trees = Vec::with_capacity(config.rounds);
    let all: Vec<usize> = (0..n).collect();
    let mut probs = Vec::with_capacity(classes);
    for _ in 0..config.rounds {
        let mut grad = vec![vec![0.0; n]; classes];
        let mut hess = vec![vec![0.0; n]; classes];
        for i in 0..n {
            probs.clear();
            softmax_row(&scores[i], &mut probs)?;
            for c in 0..classes {
                let p = probs[c];
                grad[c][i] = p - f64::from(u8::from(labels[i] == c));
                hess[c][i] = (2.0 * p * (1.0 - p)).max(1e-16);
            }
        }
        let mut round = Vec::with_capacity(classes);
        for c in 0..classes {
            let mut b = Builder {
                x,
                grad: &grad[c],
                hess: &hess[c],
                config,
                nodes: Vec::new(),
            };
            b.grow(&all, 0);
            let tree = Tree { nodes: b.nodes };
            for (i, row) in x.iter().enumerate() {
                scores[i][c] += config.learning_rate * tree.predict(row);
            }
            round.push(tree);
        }
        trees.push(round);
    }
    Ok(StackingModel {
        config: config.clone(),
        classes,
        inputs,
        base_scores,
        trees,
    })
}
