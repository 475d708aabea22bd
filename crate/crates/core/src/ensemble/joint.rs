//! Jointly trained committee: every expert's pooled embedding is concatenated
//! and one linear layer maps the result to class logits.

use rand::SeedableRng;
use rand_pcg::Pcg64;

use super::ExpertKey;
use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::expert::{he_uniform, ExpertConfig, ExpertNetwork};
use crate::graph::{build_graph, JointLayout};
use crate::model::{check_architecture, restore_params, Classifier, Forward};
use crate::preprocess::FeatureKind;
use crate::tensor::{Checkpoint, ParamSet, Tape, Tensor};

/// Parameter-name prefix of the fusion layer.
pub const FUSION_PREFIX: &str = "fusion.";

#[derive(Debug, Clone)]
pub struct JointCommittee {
    keys: Vec<ExpertKey>,
    classes: usize,
    experts: Vec<ExpertNetwork>,
    /// All expert parameters (prefixed by expert) followed by the fusion layer.
    params: ParamSet,
    /// Start of each expert's parameters inside `params`.
    offsets: Vec<usize>,
    fusion_w: usize,
    fusion_b: usize,
}

fn prefix(key: ExpertKey) -> String {
    format!("{}.", key.dir_name())
}

impl JointCommittee {
    /// Fresh standard experts for `keys`, each seeded from `seed` and its key.
    /// The experts' own classification heads are frozen: only the fusion
    /// layer produces logits.
    pub fn new(layout: &JointLayout, keys: &[ExpertKey], classes: usize, seed: u64) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::Config("a joint committee needs at least one expert".into()));
        }
        let joints = layout.selected_count();
        let mut experts = Vec::with_capacity(keys.len());
        for &key in keys {
            let config = ExpertConfig::standard(key.feature, key.graph, joints, classes);
            let graph = build_graph(layout, key.graph)?;
            experts.push(ExpertNetwork::new(config, graph, key.seed(seed))?);
        }
        let mut params = ParamSet::new();
        let mut offsets = Vec::with_capacity(keys.len());
        let mut width = 0;
        for (&key, expert) in keys.iter().zip(&experts) {
            offsets.push(params.len());
            let p = prefix(key);
            for (name, t) in expert.params().iter() {
                params.add(format!("{p}{name}"), t.clone());
            }
            params.set_trainable(&format!("{p}head."), false);
            width += expert.config().embedding_width();
        }
        let mut rng = Pcg64::seed_from_u64(seed ^ 0x6a6f_696e_745f_6675);
        let fusion_w = params.add(
            format!("{FUSION_PREFIX}weight"),
            he_uniform(&mut rng, &[width, classes], width),
        );
        let fusion_b = params.add(format!("{FUSION_PREFIX}bias"), Tensor::zeros(&[classes]));
        Ok(JointCommittee {
            keys: keys.to_vec(),
            classes,
            experts,
            params,
            offsets,
            fusion_w,
            fusion_b,
        })
    }

    pub fn keys(&self) -> &[ExpertKey] {
        &self.keys
    }

    /// Width of the concatenated embedding.
    pub fn embedding_width(&self) -> usize {
        self.experts.iter().map(|e| e.config().embedding_width()).sum()
    }

    /// Freezes (or unfreezes) every expert trunk, leaving only the fusion layer.
    pub fn freeze_experts(&mut self, frozen: bool) {
        for &key in &self.keys {
            self.params.set_trainable(&prefix(key), !frozen);
            self.params.set_trainable(&format!("{}head.", prefix(key)), false);
        }
    }

    fn architecture(&self) -> String {
        let experts: Vec<serde_json::Value> = self
            .experts
            .iter()
            .map(|e| serde_json::from_str(&e.config().architecture()).expect("valid json"))
            .collect();
        serde_json::json!({
            "kind": "joint_committee",
            "classes": self.classes,
            "experts": experts,
        })
        .to_string()
    }
}

impl Classifier for JointCommittee {
    fn features(&self) -> Vec<FeatureKind> {
        let mut f: Vec<FeatureKind> = self.keys.iter().map(|k| k.feature).collect();
        f.sort();
        f.dedup();
        f
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&mut self, tape: &mut Tape, batch: &Batch, training: bool) -> Result<Forward> {
        let bound = self.params.bind(tape);
        let mut embeddings = Vec::with_capacity(self.experts.len());
        for (i, expert) in self.experts.iter_mut().enumerate() {
            let start = self.offsets[i];
            let end = self.offsets.get(i + 1).copied().unwrap_or(self.fusion_w);
            embeddings.push(expert.embed(tape, &bound[start..end], batch, training)?);
        }
        let joint = tape.concat(&embeddings)?;
        let z = tape.matmul(joint, bound[self.fusion_w])?;
        let logits = tape.add_row_bias(z, bound[self.fusion_b])?;
        Ok(Forward { logits, bound })
    }

    fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| {
                let mut t = t.clone();
                t.set_requires_grad(false);
                (n.to_string(), t)
            })
            .collect();
        for (&key, expert) in self.keys.iter().zip(&self.experts) {
            tensors.extend(expert.buffers(&prefix(key)));
        }
        Checkpoint::new(self.architecture(), tensors)
    }

    fn restore(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        check_architecture(checkpoint, &self.architecture())?;
        restore_params(&mut self.params, checkpoint)?;
        for (&key, expert) in self.keys.iter().zip(&mut self.experts) {
            expert.restore_buffers(checkpoint, &prefix(key))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::keys_for;
    use crate::graph::GraphKind;
    use rand::Rng;

    fn chain_layout() -> JointLayout {
        let file: crate::graph::LayoutFile = serde_json::from_value(serde_json::json!({
            "name": "chain5",
            "joints": ["a", "b", "c", "d", "e"],
            "parents": {"b": "a", "c": "b", "d": "c", "e": "c"},
            "root": "a",
            "selected": ["a", "b", "c", "d", "e"],
            "hub": "b",
            "center": ["a"]
        }))
        .unwrap();
        JointLayout::from_file(file).unwrap()
    }

    fn random_batch(n: usize, frames: usize, seed: u64) -> Batch {
        let mut rng = Pcg64::seed_from_u64(seed);
        let labels = (0..n).map(|i| i % 3).collect();
        let mut batch = Batch::new(labels);
        for k in FeatureKind::ALL {
            let data = (0..n * 3 * frames * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
            batch = batch.with_input(k, Tensor::new(vec![n, 3, frames, 5], data).unwrap());
        }
        batch
    }

    #[test]
    fn output_is_samples_by_classes_and_reaches_every_expert() {
        let layout = chain_layout();
        let keys = keys_for(&FeatureKind::ALL, &GraphKind::ALL);
        let mut jc = JointCommittee::new(&layout, &keys, 3, 1).unwrap();
        assert_eq!(jc.embedding_width(), 640);
        let batch = random_batch(4, 6, 2);
        let mut tape = Tape::new();
        let out = jc.forward(&mut tape, &batch, true).unwrap();
        assert_eq!(tape.shape(out.logits), &[4, 3]);
        let loss = tape.cross_entropy(out.logits, &batch.labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        for &key in &keys {
            let i = jc.params().index_of(&format!("{}block1.gcn.weight", prefix(key))).unwrap();
            let g = grads.get(out.bound[i]).expect("gradient reaches expert");
            assert!(g.iter().any(|&v| v != 0.0), "{key} first block got a zero gradient");
        }
    }

    #[test]
    fn checkpoint_restores_predictions() {
        let layout = chain_layout();
        let keys = keys_for(&[FeatureKind::Velocity], &GraphKind::ALL);
        let mut a = JointCommittee::new(&layout, &keys, 3, 5).unwrap();
        let batch = random_batch(3, 6, 9);
        let mut tape = Tape::new();
        a.forward(&mut tape, &batch, true).unwrap();
        let mut b = JointCommittee::new(&layout, &keys, 3, 6).unwrap();
        b.restore(&a.checkpoint()).unwrap();
        assert_eq!(
            a.predict_logits(&batch).unwrap().data(),
            b.predict_logits(&batch).unwrap().data()
        );
    }
}
