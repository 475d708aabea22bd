//! Skeleton graph construction, normalization and relabeling.

mod common;

use amsgcn_core::dataset::Batch;
use amsgcn_core::graph::{build_graph, GraphKind, JointLayout, SkeletonGraph};
use amsgcn_core::model::Classifier;
use amsgcn_core::preprocess::FeatureKind;
use amsgcn_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64;

fn layouts() -> [JointLayout; 2] {
    [JointLayout::kinect25(), JointLayout::pdwalk12()]
}

fn matvec(m: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|i| (0..n).map(|j| m[i * n + j] * v[j]).sum()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest eigenvalue by power iteration on `M + I`, whose spectrum is the
/// spectrum of `M` shifted to be non-negative, then a Rayleigh quotient.
fn top_eigenvalue(m: &[f64], n: usize) -> f64 {
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
    for _ in 0..20_000 {
        let mv = matvec(m, &v);
        let w: Vec<f64> = mv.iter().zip(&v).map(|(a, b)| a + b).collect();
        let s = norm(&w);
        v = w.into_iter().map(|x| x / s).collect();
    }
    let mv = matvec(m, &v);
    mv.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() / v.iter().map(|x| x * x).sum::<f64>()
}

#[test]
fn normalized_adjacency_has_unit_spectral_radius() {
    for layout in layouts() {
        for kind in GraphKind::ALL {
            let g = build_graph(&layout, kind).unwrap();
            let n = g.joints();
            let m = g.normalized();
            let lambda = top_eigenvalue(m, n);
            assert!((lambda - 1.0).abs() <= 1e-9, "{} {kind}: top eigenvalue {lambda}", layout.name());
            // The eigenvector is known in closed form: sqrt(degree + 1).
            let d: Vec<f64> = (0..n).map(|i| ((g.degree(i) + 1) as f64).sqrt()).collect();
            let md = matvec(m, &d);
            for (a, b) in md.iter().zip(&d) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn normalized_adjacency_is_bitwise_symmetric() {
    for layout in layouts() {
        for kind in GraphKind::ALL {
            let g = build_graph(&layout, kind).unwrap();
            let (n, m) = (g.joints(), g.normalized());
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(m[i * n + j].to_bits(), m[j * n + i].to_bits());
                    assert_eq!(m[i * n + j] != 0.0, i == j || g.has_edge(i, j));
                }
            }
        }
    }
}

#[test]
fn edge_counts_match_the_skeletons() {
    let kinect = JointLayout::kinect25();
    assert_eq!(kinect.selected_count(), 19);
    let local = build_graph(&kinect, GraphKind::Local).unwrap();
    assert_eq!(local.edge_count(), 18);
    let pd = JointLayout::pdwalk12();
    for layout in [&kinect, &pd] {
        let v = layout.selected_count();
        for kind in GraphKind::ALL {
            let g = build_graph(layout, kind).unwrap();
            assert_eq!(g.edge_count(), v - 1, "{} {kind}", layout.name());
        }
        // The star graph connects every joint to the hub and nothing else.
        let star = build_graph(layout, GraphKind::Global).unwrap();
        let hub = (0..v).max_by_key(|&i| star.degree(i)).unwrap();
        assert_eq!(star.degree(hub), v - 1);
        assert!((0..v).filter(|&i| i != hub).all(|i| star.degree(i) == 1));
    }
}

#[test]
fn invalid_edges_are_rejected() {
    assert!(SkeletonGraph::from_edges(GraphKind::Local, 3, &[(0, 3)]).is_err());
    assert!(SkeletonGraph::from_edges(GraphKind::Local, 3, &[(1, 1)]).is_err());
    let g = common::chain_graph(GraphKind::Local);
    assert!(g.permuted(&[0, 1, 2, 3, 3]).is_err());
    assert!(g.permuted(&[0, 1, 2]).is_err());
}

/// Copies an `N x C x T x V` tensor with joint `i` of the result taken from
/// joint `perm[i]` of the input.
fn permute_joints(t: &Tensor, perm: &[usize]) -> Tensor {
    let s = t.shape().to_vec();
    let v = s[3];
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for row in 0..src.len() / v {
        for (i, &p) in perm.iter().enumerate() {
            out[row * v + i] = src[row * v + p];
        }
    }
    Tensor::new(s, out).unwrap()
}

#[test]
fn expert_output_is_invariant_to_joint_relabeling() {
    let mut rng = Pcg64::seed_from_u64(17);
    for trial in 0..4 {
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut rng);
        let batch = common::tiny_batch(trial, 6);
        let x = batch.input(FeatureKind::Coordinates).unwrap();
        let permuted_batch = Batch::new(batch.labels.clone()).with_input(FeatureKind::Coordinates, permute_joints(x, &perm));
        for training in [false, true] {
            let mut net = common::tiny_expert(trial + 1);
            let mut relabeled = net.clone();
            relabeled.set_graph(net.graph().permuted(&perm).unwrap()).unwrap();
            let logits = |m: &mut amsgcn_core::expert::ExpertNetwork, b: &Batch| {
                let mut tape = amsgcn_core::tensor::Tape::new();
                let out = m.forward(&mut tape, b, training).unwrap();
                tape.value(out.logits).data().to_vec()
            };
            let a = logits(&mut net, &batch);
            let b = logits(&mut relabeled, &permuted_batch);
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() <= 1e-9, "trial {trial}: {p} vs {q}");
            }
        }
    }
}
