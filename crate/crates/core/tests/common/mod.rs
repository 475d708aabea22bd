//! Helpers shared by the integration tests.
#![allow(dead_code)]

use amsgcn_core::data::{generate_synthetic, SyntheticGaitSpec};
use amsgcn_core::expert::{ExpertConfig, ExpertNetwork};
use amsgcn_core::graph::{GraphKind, JointLayout, SkeletonGraph};
use amsgcn_core::model::Classifier;
use amsgcn_core::preprocess::FeatureKind;
use amsgcn_core::run::PreparedData;
use amsgcn_core::tensor::{Tape, Tensor, Var};
use amsgcn_core::training::SplitSpec;
use amsgcn_core::dataset::Batch;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared on an absolute scale, since
/// their relative error is dominated by rounding in the difference quotient.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

pub fn random_tensor(rng: &mut Pcg64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Worst relative error between the tape's gradients and central
/// differences for every element of every input. `f` builds any output
/// from the input leaves; it is reduced to a scalar by a fixed random
/// weighting so every output element contributes.
pub fn check_op(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut rng = Pcg64::seed_from_u64(99);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        random_tensor(&mut rng, tape.shape(out))
    };
    let eval = |tensors: &[Tensor], grad: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| if grad { tape.leaf(&t.clone().param()) } else { tape.constant(t.clone()) })
            .collect();
        let out = f(&mut tape, &vars);
        let loss = if tape.shape(out).is_empty() {
            out
        } else {
            let w = tape.constant(probe.clone());
            let prod = tape.mul(out, w).unwrap();
            tape.sum(prod).unwrap()
        };
        (tape.value(loss).item().unwrap(), grad.then(|| {
            let g = tape.backward(loss).unwrap();
            vars.iter()
                .zip(tensors)
                .map(|(&v, t)| g.get(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
                .collect::<Vec<_>>()
        }))
    };
    let analytic = eval(inputs, true).1.unwrap();
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

/// Five-joint chain graph.
pub fn chain_graph(kind: GraphKind) -> SkeletonGraph {
    SkeletonGraph::from_edges(kind, 5, &[(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap()
}

/// The gradient-oracle expert: 5 joints, 8 frames, 3 classes and 8
/// channels per block.
pub fn tiny_expert(seed: u64) -> ExpertNetwork {
    let config = ExpertConfig {
        channels: vec![8; 3],
        ..ExpertConfig::standard(FeatureKind::Coordinates, GraphKind::Local, 5, 3)
    };
    ExpertNetwork::new(config, chain_graph(GraphKind::Local), seed).unwrap()
}

pub fn tiny_batch(seed: u64, samples: usize) -> Batch {
    let mut rng = Pcg64::seed_from_u64(seed);
    let x = random_tensor(&mut rng, &[samples, 3, 8, 5]);
    Batch::new((0..samples).map(|i| i % 3).collect()).with_input(FeatureKind::Coordinates, x)
}

fn training_loss<M: Classifier>(model: &mut M, batch: &Batch) -> f64 {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, batch, true).unwrap();
    let loss = tape.cross_entropy(out.logits, &batch.labels).unwrap();
    tape.value(loss).item().unwrap()
}

/// Worst relative gradient error over every parameter of `model` on the
/// training-mode cross-entropy of `batch`, and the number of entries checked.
pub fn model_grad_check<M: Classifier + Clone>(model: &M, batch: &Batch) -> (f64, usize) {
    let mut m = model.clone();
    let mut tape = Tape::new();
    let out = m.forward(&mut tape, batch, true).unwrap();
    let loss = tape.cross_entropy(out.logits, &batch.labels).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (i, &var) in out.bound.iter().enumerate() {
        let Some(analytic) = grads.get(var).map(<[f64]>::to_vec) else {
            continue;
        };
        for j in 0..analytic.len() {
            let shifted = |delta: f64| {
                let mut m = model.clone();
                m.params_mut().get_mut(i).data_mut()[j] += delta;
                training_loss(&mut m, batch)
            };
            let numeric = (shifted(FD_STEP) - shifted(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[j], numeric));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Frames per synthetic walk: three 48-frame clips with the default overlap.
pub const SYNTH_FRAMES: usize = 64;

/// Subject-disjoint 8/2/2 split of the 12 synthetic subjects.
pub fn synthetic_split() -> SplitSpec {
    let ids: Vec<String> = (1..=12).map(|i| i.to_string()).collect();
    SplitSpec::new(&ids[..8], &ids[8..10], &ids[10..]).unwrap()
}

/// The 3-class, 12-subject synthetic benchmark, preprocessed and split.
pub fn synthetic_benchmark(seed: u64) -> PreparedData {
    let d = generate_synthetic(&SyntheticGaitSpec::benchmark(12, SYNTH_FRAMES, seed)).unwrap();
    let layout = JointLayout::kinect25();
    let (clips, _) = d.manifest.clips(&d.recordings, &layout).unwrap();
    PreparedData::from_clips(
        &clips,
        &d.manifest.class_names,
        &layout,
        d.manifest.clip_config(),
        &synthetic_split(),
        &FeatureKind::ALL,
    )
    .unwrap()
}
pub mod suites;
