//! Single-stream STGCN classifier: residual spatio-temporal blocks, global
//! average pooling over frames and joints, and a linear head.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::graph::{GraphKind, SkeletonGraph};
use crate::model::{check_architecture, restore_params, Classifier, Forward};
use crate::preprocess::FeatureKind;
use crate::tensor::{BatchNormStats, Checkpoint, Padding, ParamSet, Tape, Tensor, Var};

pub const STANDARD_CHANNELS: usize = 64;
pub const DEFAULT_TEMPORAL_KERNEL: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub feature: FeatureKind,
    pub graph: GraphKind,
    pub in_channels: usize,
    /// Output channels of each block.
    pub channels: Vec<usize>,
    pub temporal_kernel: usize,
    pub joints: usize,
    pub classes: usize,
    pub residual: bool,
}

impl ExpertConfig {
    /// Three 64-channel blocks, temporal kernel 9, residual connections.
    pub fn standard(feature: FeatureKind, graph: GraphKind, joints: usize, classes: usize) -> Self {
        ExpertConfig {
            feature,
            graph,
            in_channels: 3,
            channels: vec![STANDARD_CHANNELS; 3],
            temporal_kernel: DEFAULT_TEMPORAL_KERNEL,
            joints,
            classes,
            residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 3 {
            return Err(Error::Config(format!(
                "an expert has exactly 3 blocks, got {}",
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal kernel must be odd, got {}",
                self.temporal_kernel
            )));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.joints == 0 {
            return Err(Error::Config("need at least one joint".into()));
        }
        Ok(())
    }

    pub fn embedding_width(&self) -> usize {
        *self.channels.last().unwrap()
    }

    /// Canonical descriptor stored in checkpoint headers.
    pub fn architecture(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v["kind"] = "stgcn_expert".into();
        v.to_string()
    }
}

/// He-style uniform init: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub(crate) fn he_uniform(rng: &mut Pcg64, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

#[derive(Debug, Clone, Copy)]
struct BlockParams {
    gcn_w: usize,
    gcn_b: usize,
    bn1_g: usize,
    bn1_b: usize,
    tcn_w: usize,
    tcn_b: usize,
    bn2_g: usize,
    bn2_b: usize,
    /// 1x1 projection when input and output widths differ.
    res: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
struct Block {
    in_channels: usize,
    out_channels: usize,
    p: BlockParams,
    bn1: BatchNormStats,
    bn2: BatchNormStats,
}

/// Pre-activation sum and block output, both `N x C' x T x V`.
pub struct BlockOutput {
    pub pre_activation: Var,
    pub output: Var,
}

/// `y = w . (x . A)`: every frame's joint features mixed by the normalized
/// adjacency, then a `C' x C` channel map.
pub fn spatial_graph_conv(tape: &mut Tape, x: Var, graph: &SkeletonGraph, w: Var) -> Result<Var> {
    let sx = tape.shape(x).to_vec();
    if sx.len() != 4 || sx[3] != graph.joints() {
        return Err(Error::Shape(format!(
            "graph has {} joints, input shape {sx:?}",
            graph.joints()
        )));
    }
    let sw = tape.shape(w).to_vec();
    if sw.len() != 2 || sw[1] != sx[1] {
        return Err(Error::Shape(format!("graph conv weight {sw:?} for input {sx:?}")));
    }
    let mixed = tape.joint_mix(x, Arc::clone(graph.normalized()))?;
    let w4 = tape.reshape(w, &[sw[0], sw[1], 1, 1])?;
    tape.conv_time(mixed, w4, 1, Padding::Same)
}

fn conv1x1(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let sw = tape.shape(w).to_vec();
    let w4 = tape.reshape(w, &[sw[0], sw[1], 1, 1])?;
    tape.conv_time(x, w4, 1, Padding::Same)
}

#[derive(Debug, Clone)]
pub struct ExpertNetwork {
    config: ExpertConfig,
    graph: SkeletonGraph,
    params: ParamSet,
    blocks: Vec<Block>,
    head_w: usize,
    head_b: usize,
}

impl ExpertNetwork {
    pub fn new(config: ExpertConfig, graph: SkeletonGraph, seed: u64) -> Result<Self> {
        config.validate()?;
        if graph.joints() != config.joints {
            return Err(Error::Config(format!(
                "graph has {} joints, expert configured for {}",
                graph.joints(),
                config.joints
            )));
        }
        let mut rng = Pcg64::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut blocks = Vec::with_capacity(config.channels.len());
        let kt = config.temporal_kernel;
        let mut c_in = config.in_channels;
        for (i, &c_out) in config.channels.iter().enumerate() {
            let name = |s: &str| format!("block{}.{s}", i + 1);
            let gcn_w = params.add(name("gcn.weight"), he_uniform(&mut rng, &[c_out, c_in], c_in));
            let gcn_b = params.add(name("gcn.bias"), Tensor::zeros(&[c_out]));
            let bn1_g = params.add(name("bn1.gamma"), Tensor::full(&[c_out], 1.0));
            let bn1_b = params.add(name("bn1.beta"), Tensor::zeros(&[c_out]));
            let tcn_w = params.add(
                name("tcn.weight"),
                he_uniform(&mut rng, &[c_out, c_out, kt, 1], c_out * kt),
            );
            let tcn_b = params.add(name("tcn.bias"), Tensor::zeros(&[c_out]));
            let bn2_g = params.add(name("bn2.gamma"), Tensor::full(&[c_out], 1.0));
            let bn2_b = params.add(name("bn2.beta"), Tensor::zeros(&[c_out]));
            let res = (config.residual && c_in != c_out).then(|| {
                let w = params.add(name("residual.weight"), he_uniform(&mut rng, &[c_out, c_in], c_in));
                let b = params.add(name("residual.bias"), Tensor::zeros(&[c_out]));
                (w, b)
            });
            blocks.push(Block {
                in_channels: c_in,
                out_channels: c_out,
                p: BlockParams {
                    gcn_w,
                    gcn_b,
                    bn1_g,
                    bn1_b,
                    tcn_w,
                    tcn_b,
                    bn2_g,
                    bn2_b,
                    res,
                },
                bn1: BatchNormStats::new(c_out),
                bn2: BatchNormStats::new(c_out),
            });
            c_in = c_out;
        }
        let width = config.embedding_width();
        let head_w = params.add("head.weight", he_uniform(&mut rng, &[width, config.classes], width));
        let head_b = params.add("head.bias", Tensor::zeros(&[config.classes]));
        Ok(ExpertNetwork {
            config,
            graph,
            params,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ExpertConfig {
        &self.config
    }

    pub fn graph(&self) -> &SkeletonGraph {
        &self.graph
    }

    /// Replaces the graph, e.g. with a relabeled one of the same size.
    pub fn set_graph(&mut self, graph: SkeletonGraph) -> Result<()> {
        if graph.joints() != self.config.joints {
            return Err(Error::Config("replacement graph has a different joint count".into()));
        }
        self.graph = graph;
        Ok(())
    }

    /// Toggles the residual path. Only valid on blocks that do not need a
    /// projection, or when the projection parameters already exist.
    pub fn set_residual(&mut self, on: bool) {
        self.config.residual = on;
    }

    /// One block on already-bound parameters.
    pub fn block_forward(
        &mut self,
        index: usize,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        training: bool,
    ) -> Result<BlockOutput> {
        let residual = self.config.residual;
        let graph = &self.graph;
        let block = &mut self.blocks[index];
        let p = block.p;
        let sx = tape.shape(x).to_vec();
        if sx.len() != 4 || sx[1] != block.in_channels {
            return Err(Error::Shape(format!(
                "block {} expects {} input channels, got shape {sx:?}",
                index + 1,
                block.in_channels
            )));
        }
        let h = spatial_graph_conv(tape, x, graph, vars[p.gcn_w])?;
        let h = tape.add_channel_bias(h, vars[p.gcn_b])?;
        let h = tape.batch_norm(h, vars[p.bn1_g], vars[p.bn1_b], &mut block.bn1, training)?;
        let h = tape.relu(h)?;
        let h = tape.conv_time(h, vars[p.tcn_w], 1, Padding::Same)?;
        let h = tape.add_channel_bias(h, vars[p.tcn_b])?;
        let mut h = tape.batch_norm(h, vars[p.bn2_g], vars[p.bn2_b], &mut block.bn2, training)?;
        if residual {
            let r = match p.res {
                Some((w, b)) => {
                    let r = conv1x1(tape, x, vars[w])?;
                    tape.add_channel_bias(r, vars[b])?
                }
                None if block.in_channels == block.out_channels => x,
                None => {
                    return Err(Error::Config(format!(
                        "block {} has no residual projection",
                        index + 1
                    )))
                }
            };
            h = tape.add(h, r)?;
        }
        let output = tape.relu(h)?;
        Ok(BlockOutput {
            pre_activation: h,
            output,
        })
    }

    /// Input tensor for this expert's stream, checked against the config.
    fn input(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        let t = batch.input(self.config.feature)?;
        let s = t.shape();
        if s.len() != 4 || s[1] != self.config.in_channels || s[3] != self.config.joints {
            return Err(Error::Shape(format!(
                "expert expects N x {} x T x {}, got {s:?}",
                self.config.in_channels, self.config.joints
            )));
        }
        Ok(tape.constant(t.clone()))
    }

    /// GAP embedding (`N x 64`) on already-bound parameters.
    pub fn embed(&mut self, tape: &mut Tape, vars: &[Var], batch: &Batch, training: bool) -> Result<Var> {
        let mut h = self.input(tape, batch)?;
        for i in 0..self.blocks.len() {
            h = self.block_forward(i, tape, vars, h, training)?.output;
        }
        tape.mean_pool(h)
    }

    pub fn head(&self, tape: &mut Tape, vars: &[Var], embedding: Var) -> Result<Var> {
        let z = tape.matmul(embedding, vars[self.head_w])?;
        tape.add_row_bias(z, vars[self.head_b])
    }

    /// Normalization running statistics, named with `prefix`.
    pub(crate) fn buffers(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (tag, s) in [("bn1", &b.bn1), ("bn2", &b.bn2)] {
                let c = s.mean.len();
                out.push((
                    format!("{prefix}block{}.{tag}.running_mean", i + 1),
                    Tensor::new(vec![c], s.mean.clone()).unwrap(),
                ));
                out.push((
                    format!("{prefix}block{}.{tag}.running_var", i + 1),
                    Tensor::new(vec![c], s.var.clone()).unwrap(),
                ));
            }
        }
        out
    }

    pub(crate) fn restore_buffers(&mut self, checkpoint: &Checkpoint, prefix: &str) -> Result<()> {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (tag, s) in [("bn1", &mut b.bn1), ("bn2", &mut b.bn2)] {
                for (field, dst) in [("running_mean", &mut s.mean), ("running_var", &mut s.var)] {
                    let name = format!("{prefix}block{}.{tag}.{field}", i + 1);
                    let src = checkpoint
                        .get(&name)
                        .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {name}")))?;
                    if src.numel() != dst.len() {
                        return Err(Error::Checkpoint(format!("{name} has wrong length")));
                    }
                    dst.copy_from_slice(src.data());
                }
            }
        }
        Ok(())
    }

    /// Rebuilds an expert from a checkpoint, reading its configuration from
    /// the architecture header.
    pub fn from_checkpoint(checkpoint: &Checkpoint, graph: SkeletonGraph) -> Result<Self> {
        let mut v: serde_json::Value = serde_json::from_str(&checkpoint.header.architecture)?;
        if v.get("kind").and_then(|k| k.as_str()) != Some("stgcn_expert") {
            return Err(Error::Checkpoint("checkpoint does not hold an STGCN expert".into()));
        }
        v.as_object_mut().expect("object").remove("kind");
        let config: ExpertConfig = serde_json::from_value(v)?;
        let mut expert = ExpertNetwork::new(config, graph, 0)?;
        expert.restore(checkpoint)?;
        Ok(expert)
    }
}

impl Classifier for ExpertNetwork {
    fn features(&self) -> Vec<FeatureKind> {
        vec![self.config.feature]
    }

    fn classes(&self) -> usize {
        self.config.classes
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&mut self, tape: &mut Tape, batch: &Batch, training: bool) -> Result<Forward> {
        let bound = self.params.bind(tape);
        let emb = self.embed(tape, &bound, batch, training)?;
        let logits = self.head(tape, &bound, emb)?;
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
        tensors.extend(self.buffers(""));
        Checkpoint::new(self.config.architecture(), tensors)
    }

    fn restore(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        check_architecture(checkpoint, &self.config.architecture())?;
        restore_params(&mut self.params, checkpoint)?;
        self.restore_buffers(checkpoint, "")
    }
}

/// Scalar-parameter count of an expert, from the architecture alone.
pub fn parameter_count(config: &ExpertConfig) -> usize {
    let kt = config.temporal_kernel;
    let mut total = 0;
    let mut c_in = config.in_channels;
    for &c in &config.channels {
        total += c * c_in + c; // graph conv
        total += 2 * c; // bn1
        total += c * c * kt + c; // temporal conv
        total += 2 * c; // bn2
        if config.residual && c_in != c {
            total += c * c_in + c;
        }
        c_in = c;
    }
    total + c_in * config.classes + config.classes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, JointLayout};

    fn random_batch(n: usize, t: usize, v: usize, seed: u64) -> Batch {
        let mut rng = Pcg64::seed_from_u64(seed);
        let data = (0..n * 3 * t * v).map(|_| rng.random_range(-1.0..1.0)).collect();
        Batch::new(vec![0; n]).with_input(
            FeatureKind::Coordinates,
            Tensor::new(vec![n, 3, t, v], data).unwrap(),
        )
    }

    fn small_expert(residual: bool) -> ExpertNetwork {
        let graph = SkeletonGraph::from_edges(GraphKind::Local, 4, &[(0, 1), (1, 2), (1, 3)]).unwrap();
        let cfg = ExpertConfig {
            channels: vec![6, 6, 6],
            temporal_kernel: 3,
            residual,
            ..ExpertConfig::standard(FeatureKind::Coordinates, GraphKind::Local, 4, 3)
        };
        ExpertNetwork::new(cfg, graph, 11).unwrap()
    }

    #[test]
    fn spatial_graph_conv_examples() {
        let mut tape = Tape::new();
        let single = SkeletonGraph::from_edges(GraphKind::Local, 1, &[]).unwrap();
        let x = tape.leaf(&Tensor::new(vec![1, 2, 1, 1], vec![3.0, -4.0]).unwrap());
        let eye = tape.leaf(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = spatial_graph_conv(&mut tape, x, &single, eye).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, -4.0]);

        let pair = SkeletonGraph::from_edges(GraphKind::Local, 2, &[(0, 1)]).unwrap();
        let x = tape.leaf(&Tensor::new(vec![1, 1, 1, 2], vec![2.0, 6.0]).unwrap());
        let one = tape.leaf(&Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let y = spatial_graph_conv(&mut tape, x, &pair, one).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 4.0).abs() < 1e-12);
        }

        let zero = tape.leaf(&Tensor::zeros(&[3, 1]));
        let y = spatial_graph_conv(&mut tape, x, &pair, zero).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        assert!(matches!(spatial_graph_conv(&mut tape, x, &single, one), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_input_gives_zero_block_output() {
        let mut net = small_expert(true);
        let mut tape = Tape::new();
        let vars = net.params.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(&[2, 3, 5, 4]));
        let out = net.block_forward(0, &mut tape, &vars, x, true).unwrap();
        assert!(tape.value(out.output).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_shifts_pre_activation_by_residual() {
        let mut net = small_expert(true);
        let batch = random_batch(2, 5, 4, 3);
        for block in [0, 1] {
            let mut tape = Tape::new();
            let vars = net.params.bind(&mut tape);
            let mut x = tape.constant(batch.input(FeatureKind::Coordinates).unwrap().clone());
            for b in 0..block {
                x = net.block_forward(b, &mut tape, &vars, x, false).unwrap().output;
            }
            net.set_residual(true);
            let on = net.block_forward(block, &mut tape, &vars, x, false).unwrap().pre_activation;
            net.set_residual(false);
            let off = net.block_forward(block, &mut tape, &vars, x, false).unwrap().pre_activation;
            net.set_residual(true);
            let residual: Vec<f64> = if block == 0 {
                let p = net.blocks[0].p.res.unwrap();
                let r = conv1x1(&mut tape, x, vars[p.0]).unwrap();
                let r = tape.add_channel_bias(r, vars[p.1]).unwrap();
                tape.value(r).data().to_vec()
            } else {
                tape.value(x).data().to_vec()
            };
            let (a, b) = (tape.value(on).data(), tape.value(off).data());
            for i in 0..a.len() {
                assert!((a[i] - b[i] - residual[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_output_shape() {
        let layout = JointLayout::kinect25();
        let graph = build_graph(&layout, GraphKind::Global).unwrap();
        let cfg = ExpertConfig::standard(FeatureKind::Coordinates, GraphKind::Global, 19, 3);
        let mut net = ExpertNetwork::new(cfg, graph, 0).unwrap();
        let batch = random_batch(2, 12, 19, 1);
        let mut tape = Tape::new();
        let vars = net.params.bind(&mut tape);
        let x = tape.constant(batch.input(FeatureKind::Coordinates).unwrap().clone());
        let out = net.block_forward(0, &mut tape, &vars, x, true).unwrap();
        assert_eq!(tape.shape(out.output), &[2, 64, 12, 19]);
        let emb = net.embed(&mut tape, &vars, &batch, false).unwrap();
        assert_eq!(tape.shape(emb), &[2, 64]);
    }

    #[test]
    fn identical_clips_give_identical_logits() {
        let mut net = small_expert(true);
        let one = random_batch(1, 6, 4, 9);
        let x = one.input(FeatureKind::Coordinates).unwrap();
        let mut data = x.data().to_vec();
        data.extend_from_slice(x.data());
        data.extend_from_slice(x.data());
        let batch = Batch::new(vec![0; 3])
            .with_input(FeatureKind::Coordinates, Tensor::new(vec![3, 3, 6, 4], data).unwrap());
        let logits = net.predict_logits(&batch).unwrap();
        let rows: Vec<&[f64]> = logits.rows().collect();
        assert_eq!(rows[0], rows[1]);
        assert_eq!(rows[1], rows[2]);
    }

    #[test]
    fn standard_parameter_count() {
        for classes in [2, 3, 6, 9] {
            let cfg = ExpertConfig::standard(FeatureKind::BoneAngles, GraphKind::Local, 19, classes);
            let graph = build_graph(&JointLayout::kinect25(), GraphKind::Local).unwrap();
            let net = ExpertNetwork::new(cfg.clone(), graph, 0).unwrap();
            assert_eq!(net.params().numel(), parameter_count(&cfg));
            assert_eq!(net.params().numel(), 120_384 + 65 * classes);
        }
    }

    #[test]
    fn config_validation() {
        let base = ExpertConfig::standard(FeatureKind::Velocity, GraphKind::Local, 4, 3);
        assert!(ExpertConfig { temporal_kernel: 4, ..base.clone() }.validate().is_err());
        assert!(ExpertConfig { channels: vec![64; 2], ..base.clone() }.validate().is_err());
        assert!(ExpertConfig { classes: 1, ..base.clone() }.validate().is_err());
        let graph = SkeletonGraph::from_edges(GraphKind::Local, 5, &[]).unwrap();
        assert!(matches!(ExpertNetwork::new(base, graph, 0), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_restore_round_trip() {
        let mut a = small_expert(true);
        let batch = random_batch(3, 5, 4, 2);
        // move the running statistics away from their initial values
        let mut tape = Tape::new();
        a.forward(&mut tape, &batch, true).unwrap();
        let mut b = small_expert(true);
        b.params_mut().get_mut(0).data_mut()[0] += 1.0;
        b.restore(&a.checkpoint()).unwrap();
        assert_eq!(a.predict_logits(&batch).unwrap(), b.predict_logits(&batch).unwrap());

        let mut other = ExpertNetwork::new(
            ExpertConfig { classes: 4, ..a.config().clone() },
            a.graph().clone(),
            0,
        )
        .unwrap();
        assert!(matches!(other.restore(&a.checkpoint()), Err(Error::Checkpoint(_))));
    }
}
