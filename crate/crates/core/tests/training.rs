//! Training loop, early stopping and committee scheduling.

mod common;

use amsgcn_core::data::{generate_synthetic, SyntheticGaitSpec};
use amsgcn_core::dataset::FeatureDataset;
use amsgcn_core::ensemble::{ExpertCommittee, ExpertKey};
use amsgcn_core::expert::{ExpertConfig, ExpertNetwork};
use amsgcn_core::graph::{GraphKind, JointLayout};
use amsgcn_core::model::Classifier;
use amsgcn_core::preprocess::{FeatureKind, GaitClip};
use amsgcn_core::run::PreparedData;
use amsgcn_core::tensor::write_checkpoint;
use amsgcn_core::training::{
    assert_subject_disjoint, evaluate_loss, read_history, save_experts, train_committee, train_model, SplitSpec,
    TrainConfig, CHECKPOINT_FILE, HISTORY_FILE,
};
use amsgcn_core::Error;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;

const CHAIN_PARENTS: [Option<usize>; 5] = [None, Some(0), Some(1), Some(2), Some(3)];

/// Two classes whose joints drift in opposite directions over 8 frames,
/// plus Gaussian noise of `noise`.
fn drifting_clips(subjects: std::ops::Range<usize>, per_subject: usize, noise: f64, seed: u64) -> Vec<GaitClip> {
    let mut rng = Pcg64::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise).unwrap();
    let mut clips = Vec::new();
    for s in subjects {
        for i in 0..per_subject {
            let class = i % 2;
            let dir = if class == 0 { 1.0 } else { -1.0 };
            let base: Vec<f64> = (0..15).map(|_| rng.random_range(0.3..0.7)).collect();
            let mut data = Vec::with_capacity(8 * 5 * 3);
            for t in 0..8 {
                for j in 0..5 {
                    for a in 0..3 {
                        data.push(base[j * 3 + a] + dir * 0.04 * t as f64 + normal.sample(&mut rng));
                    }
                }
            }
            clips.push(GaitClip {
                subject_id: format!("s{s}"),
                gait_class: class,
                start: 0,
                frames: 8,
                joints: 5,
                data,
            });
        }
    }
    clips
}

fn dataset(clips: &[GaitClip]) -> FeatureDataset {
    FeatureDataset::from_clips(clips, &CHAIN_PARENTS, &[FeatureKind::Coordinates]).unwrap()
}

fn tiny_two_class(seed: u64) -> ExpertNetwork {
    let config = ExpertConfig {
        channels: vec![8; 3],
        ..ExpertConfig::standard(FeatureKind::Coordinates, GraphKind::Local, 5, 2)
    };
    ExpertNetwork::new(config, common::chain_graph(GraphKind::Local), seed).unwrap()
}

fn params_of(m: &impl Classifier) -> Vec<Vec<f64>> {
    m.params().iter().map(|(_, t)| t.data().to_vec()).collect()
}

fn small_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        seed,
        ..TrainConfig::default().with_epochs(epochs)
    }
}

#[test]
fn null_optimizer_leaves_parameters_unchanged() {
    let train = dataset(&drifting_clips(0..4, 4, 0.02, 1));
    let val = dataset(&drifting_clips(4..6, 4, 0.02, 2));
    let mut net = tiny_two_class(3);
    let before = params_of(&net);
    let cfg = TrainConfig {
        base_lr: 0.0,
        weight_decay: 0.0,
        batch_size: train.len(),
        patience: None,
        ..small_cfg(4, 5)
    };
    let report = train_model(&mut net, &train, &val, &cfg).unwrap();
    assert_eq!(params_of(&net), before, "parameters moved with a zero learning rate");
    // One full batch per epoch: the training loss cannot change either.
    let first = report.history[0].train_loss;
    for r in &report.history {
        assert!((r.train_loss - first).abs() <= 1e-12, "{} vs {first}", r.train_loss);
        assert_eq!(r.lr, 0.0);
    }
}

#[test]
fn separable_two_class_data_reaches_low_validation_loss() {
    let train = dataset(&drifting_clips(0..8, 6, 0.01, 11));
    let val = dataset(&drifting_clips(8..11, 6, 0.01, 12));
    let mut net = tiny_two_class(4);
    let report = train_model(&mut net, &train, &val, &small_cfg(50, 6)).unwrap();
    assert!(report.history.len() <= 50);
    assert!(report.best_val_loss < 0.1, "best validation loss {}", report.best_val_loss);
}

#[test]
fn same_seed_gives_bitwise_identical_history_and_weights() {
    let train = dataset(&drifting_clips(0..4, 4, 0.05, 1));
    let val = dataset(&drifting_clips(4..6, 4, 0.05, 2));
    let run = || {
        let mut net = tiny_two_class(8);
        let report = train_model(&mut net, &train, &val, &small_cfg(6, 9)).unwrap();
        (report.history, net.checkpoint())
    };
    let (h1, c1) = run();
    let (h2, c2) = run();
    let bits = |h: &[amsgcn_core::training::EpochRecord]| -> Vec<[u64; 3]> {
        h.iter().map(|r| [r.train_loss.to_bits(), r.val_loss.to_bits(), r.val_f1.to_bits()]).collect()
    };
    assert_eq!(bits(&h1), bits(&h2));
    assert_eq!(c1, c2);
}

#[test]
fn restored_weights_reproduce_the_minimum_validation_loss() {
    // Noisy labels make the validation loss wander, so the best epoch is
    // rarely the last one.
    let mut clips = drifting_clips(0..6, 4, 0.3, 21);
    for c in clips.iter_mut().step_by(3) {
        c.gait_class = 1 - c.gait_class;
    }
    let train = dataset(&clips);
    let val = dataset(&drifting_clips(6..9, 4, 0.3, 22));
    let mut net = tiny_two_class(2);
    let cfg = TrainConfig {
        patience: Some(3),
        ..small_cfg(15, 7)
    };
    let report = train_model(&mut net, &train, &val, &cfg).unwrap();
    let min = report.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(report.best_val_loss, min);
    assert_eq!(report.history[report.best_epoch].val_loss, min);
    let (restored, _) = evaluate_loss(&mut net, &val).unwrap();
    assert_eq!(restored.to_bits(), min.to_bits(), "restored {restored} vs minimum {min}");
}

#[test]
fn empty_partitions_and_subject_leakage_are_hard_errors() {
    let train = dataset(&drifting_clips(0..2, 2, 0.0, 1));
    let val = dataset(&drifting_clips(2..3, 2, 0.0, 2));
    let empty = train.subset(&[]);
    let mut net = tiny_two_class(1);
    let err = train_model(&mut net, &empty, &val, &small_cfg(1, 0)).unwrap_err();
    assert!(matches!(err, Error::Split(_)), "{err}");
    let leaky = dataset(&drifting_clips(1..3, 2, 0.0, 3));
    let err = assert_subject_disjoint(&train, &val, &leaky).unwrap_err();
    assert!(matches!(err, Error::Split(_)), "{err}");
    assert!(assert_subject_disjoint(&train, &val, &dataset(&drifting_clips(5..6, 2, 0.0, 4))).is_ok());
}

/// Six synthetic subjects split 4/1/1, every feature stream.
fn small_synthetic() -> (JointLayout, PreparedData) {
    let d = generate_synthetic(&SyntheticGaitSpec::benchmark(6, 48, 4)).unwrap();
    let layout = JointLayout::kinect25();
    let (clips, _) = d.manifest.clips(&d.recordings, &layout).unwrap();
    let split = SplitSpec::new(&["1", "2", "3", "4"], &["5"], &["6"]).unwrap();
    let data = PreparedData::from_clips(
        &clips,
        &d.manifest.class_names,
        &layout,
        d.manifest.clip_config(),
        &split,
        &FeatureKind::ALL,
    )
    .unwrap();
    (layout, data)
}

#[test]
fn serial_and_parallel_committees_are_identical_and_write_ten_histories() {
    let (layout, data) = small_synthetic();
    let cfg = TrainConfig {
        batch_size: 8,
        ..TrainConfig::default().with_epochs(1)
    };
    let committee = || ExpertCommittee::new(&FeatureKind::ALL, &GraphKind::ALL, 3).unwrap();
    let serial = train_committee(&layout, committee(), &data.train, &data.val, &cfg, 1).unwrap();
    let parallel = train_committee(&layout, committee(), &data.train, &data.val, &cfg, 4).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let saved_a = save_experts(dirs[0].path(), &serial).unwrap();
    let saved_b = save_experts(dirs[1].path(), &parallel).unwrap();
    assert_eq!(saved_a.len(), 10);
    assert_eq!(saved_a, saved_b);
    for (key, rel) in &saved_a {
        let a = std::fs::read(dirs[0].path().join(rel)).unwrap();
        let b = std::fs::read(dirs[1].path().join(rel)).unwrap();
        assert!(a == b, "checkpoint of {key} differs");
        let hist = rel.with_file_name(HISTORY_FILE);
        assert_eq!(
            std::fs::read(dirs[0].path().join(&hist)).unwrap(),
            std::fs::read(dirs[1].path().join(&hist)).unwrap()
        );
        assert_eq!(read_history(&dirs[0].path().join(&hist)).unwrap().len(), 1);
        assert_eq!(rel.file_name().unwrap(), CHECKPOINT_FILE);
    }
    for ((ka, ra), (kb, rb)) in serial.reports.iter().zip(&parallel.reports) {
        assert_eq!(ka, kb);
        assert_eq!(ra.history[0].train_loss.to_bits(), rb.history[0].train_loss.to_bits());
    }
    // Checkpoints serialize identically through the public writer too.
    let key = ExpertKey::new(FeatureKind::Velocity, GraphKind::Global);
    let path = dirs[0].path().join("again");
    write_checkpoint(&path, &serial.committee.get(key).unwrap().checkpoint()).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(dirs[1].path().join(saved_b.iter().find(|(k, _)| *k == key).unwrap().1.clone())).unwrap()
    );
}

#[test]
fn a_failing_expert_is_named() {
    let (layout, data) = small_synthetic();
    // Two classes for three-class labels: every expert rejects the data.
    let committee = ExpertCommittee::new(&[FeatureKind::BoneAngles], &[GraphKind::Local], 2).unwrap();
    let err = match train_committee(&layout, committee, &data.train, &data.val, &small_cfg(1, 0), 1) {
        Err(e) => e,
        Ok(_) => panic!("training with out-of-range labels succeeded"),
    };
    assert!(matches!(err, Error::Expert { .. }), "{err}");
    assert!(err.to_string().contains("bone_angles/local"), "{err}");
}
