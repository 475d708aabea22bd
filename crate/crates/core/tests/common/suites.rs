//! Property suites behind the acceptance criteria. Each returns a short
//! summary on success and a description of the first violation otherwise.

use amsgcn_core::ensemble::{
    fuse_feature_logits, hard_weighted_vote, soft_weighted_vote, ExpertKey, ExpertScores, VoterWeights,
};
use amsgcn_core::graph::GraphKind;
use amsgcn_core::metrics::{
    auprc, auroc, binary_auroc, binary_average_precision, weighted_f1, ConfusionMatrix,
};
use amsgcn_core::preprocess::{
    clip_count, derive_features, range_normalize, split_into_clips, FeatureKind, GaitClip, RangeScope,
    RawRecording,
};
use amsgcn_core::tensor::argmax;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;

use super::{model_grad_check, tiny_batch, tiny_expert};

pub type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn gradient_oracle() -> Outcome {
    let (err, checked) = model_grad_check(&tiny_expert(5), &tiny_batch(6, 4));
    ensure(err <= 1e-4, || format!("max relative error {err:.3e} over {checked} entries"))?;
    Ok(format!("max relative error {err:.2e} over {checked} parameters"))
}

pub fn random_clip(rng: &mut Pcg64, frames: usize, joints: usize) -> GaitClip {
    let scale = rng.random_range(0.1..3.0);
    GaitClip {
        subject_id: "s".into(),
        gait_class: 0,
        start: 0,
        frames,
        joints,
        data: (0..frames * joints * 3).map(|_| rng.random_range(-1.0..1.0) * scale).collect(),
    }
}

/// Parents of a random tree over `joints` nodes rooted at 0.
pub fn random_parents(rng: &mut Pcg64, joints: usize) -> Vec<Option<usize>> {
    (0..joints).map(|j| (j > 0).then(|| rng.random_range(0..j))).collect()
}

/// Exhaustive count of windows `[s, s + clip)` inside `frames` with `s` a
/// multiple of the stride.
pub fn enumerate_windows(frames: usize, clip: usize, stride: usize) -> usize {
    (0..frames).step_by(stride).filter(|s| s + clip <= frames).count()
}

pub fn preprocessing_suite() -> Outcome {
    let mut rng = Pcg64::seed_from_u64(11);
    let mut clips_checked = 0;
    for case in 0..300 {
        let frames = rng.random_range(3..60);
        let joints = rng.random_range(2..26);
        let clip = random_clip(&mut rng, frames, joints);
        for scope in [RangeScope::Pooled, RangeScope::PerJoint] {
            let norm = range_normalize(&clip, scope);
            let groups: Vec<Vec<usize>> = match scope {
                RangeScope::Pooled => (0..3).map(|a| (0..frames * joints).map(|p| p * 3 + a).collect()).collect(),
                RangeScope::PerJoint => (0..joints)
                    .flat_map(|j| (0..3).map(move |a| (0..frames).map(|t| (t * joints + j) * 3 + a).collect()))
                    .collect(),
            };
            for g in groups {
                let lo = g.iter().map(|&i| norm.data[i]).fold(f64::INFINITY, f64::min);
                let hi = g.iter().map(|&i| norm.data[i]).fold(f64::NEG_INFINITY, f64::max);
                ensure(lo == 0.0 && hi == 1.0, || format!("case {case} {scope:?}: range [{lo}, {hi}]"))?;
            }
        }
        let norm = range_normalize(&clip, RangeScope::Pooled);
        let parents = random_parents(&mut rng, joints);
        let fs = derive_features(&norm, &parents).map_err(|e| e.to_string())?;
        let vel = fs.stream(FeatureKind::Velocity);
        let width = joints * 3;
        for i in 0..width {
            let total: f64 = (0..frames).map(|t| vel[t * width + i]).sum();
            let disp = norm.data[(frames - 1) * width + i] - norm.data[i];
            ensure((total - disp).abs() <= 1e-12, || {
                format!("case {case}: velocity sum {total} vs displacement {disp}")
            })?;
        }
        let (bones, angles) = (fs.stream(FeatureKind::BoneVectors), fs.stream(FeatureKind::BoneAngles));
        for p in 0..frames * joints {
            let b = &bones[p * 3..p * 3 + 3];
            let a = &angles[p * 3..p * 3 + 3];
            let norm_b = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
            for k in 0..3 {
                ensure((0.0..=std::f64::consts::PI).contains(&a[k]), || {
                    format!("case {case}: angle {} outside [0, pi]", a[k])
                })?;
                if norm_b > 0.0 {
                    let err = (a[k].cos() - b[k] / norm_b).abs();
                    ensure(err <= 1e-12, || format!("case {case}: cosine misses unit vector by {err}"))?;
                }
            }
        }
        clips_checked += 1;
    }
    let mut lengths = 0;
    for frames in 1..=200usize {
        for (clip, overlap) in [(48, 40), (48, 0), (10, 9), (1, 0), (30, 15), (200, 199)] {
            let stride = clip - overlap;
            let expected = enumerate_windows(frames, clip, stride);
            ensure(clip_count(frames, clip, stride) == expected, || {
                format!("clip_count({frames}, {clip}, {stride}) != {expected}")
            })?;
            let rec = RawRecording::new("s", 0, 1, vec![0.5; frames * 3]).map_err(|e| e.to_string())?;
            let got = split_into_clips(&rec, clip, overlap).map_err(|e| e.to_string())?;
            ensure(got.len() == expected, || format!("split of {frames} frames gave {} clips", got.len()))?;
            lengths += 1;
        }
    }
    Ok(format!("{clips_checked} random clips, {lengths} length/window combinations"))
}

fn random_scores(rng: &mut Pcg64, features: &[FeatureKind], classes: usize, samples: usize) -> ExpertScores {
    let keys: Vec<ExpertKey> = features
        .iter()
        .flat_map(|&f| GraphKind::ALL.map(|g| ExpertKey::new(f, g)))
        .collect();
    let logits = keys
        .iter()
        .map(|_| {
            (0..samples)
                .map(|_| (0..classes).map(|_| rng.random_range(-6.0..6.0)).collect())
                .collect()
        })
        .collect();
    ExpertScores {
        keys,
        features: features.to_vec(),
        classes,
        logits,
    }
}

fn is_simplex(p: &[f64]) -> bool {
    p.iter().all(|&v| (0.0..=1.0).contains(&v)) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-12
}

pub fn fusion_suite() -> Outcome {
    let mut rng = Pcg64::seed_from_u64(21);
    let mut worst_shift: f64 = 0.0;
    for case in 0..200 {
        let classes = rng.random_range(2..6);
        let scores = random_scores(&mut rng, &FeatureKind::ALL, classes, 8);
        let fused = scores.amsgcn().map_err(|e| e.to_string())?;
        for p in &fused {
            ensure(is_simplex(&p.probabilities), || format!("case {case}: {:?} is not a simplex", p.probabilities))?;
        }
        let mut shifted = scores.clone();
        for expert in shifted.logits.iter_mut() {
            for row in expert.iter_mut() {
                let c = rng.random_range(-50.0..50.0);
                row.iter_mut().for_each(|v| *v += c);
            }
        }
        let again = shifted.amsgcn().map_err(|e| e.to_string())?;
        for (a, b) in fused.iter().zip(&again) {
            for (x, y) in a.probabilities.iter().zip(&b.probabilities) {
                worst_shift = worst_shift.max((x - y).abs());
            }
        }
    }
    ensure(worst_shift <= 1e-9, || format!("logit shift moved the output by {worst_shift:e}"))?;
    let direct = fuse_feature_logits(&[vec![0.3, -0.2], vec![1.0, 2.0]]).map_err(|e| e.to_string())?;
    ensure(is_simplex(&direct.probabilities), || "direct fusion is not a simplex".into())?;

    for case in 0..1000 {
        let models = rng.random_range(2..11);
        let classes = rng.random_range(2..6);
        let probs: Vec<Vec<f64>> = (0..models)
            .map(|_| {
                let raw: Vec<f64> = (0..classes).map(|_| rng.random::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let w = rng.random_range(0.1..2.0);
        let rows: Vec<&[f64]> = probs.iter().map(Vec::as_slice).collect();
        let soft = soft_weighted_vote(&vec![w; models], &rows).map_err(|e| e.to_string())?;
        let mean: Vec<f64> = (0..classes)
            .map(|c| probs.iter().map(|p| p[c]).sum::<f64>() / models as f64)
            .collect();
        ensure(soft.predicted_class == argmax(&mean), || {
            format!("case {case}: soft vote {} vs average {}", soft.predicted_class, argmax(&mean))
        })?;
        let votes: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let mut counts = vec![0usize; classes];
        votes.iter().for_each(|&v| counts[v] += 1);
        let plurality = counts.iter().enumerate().fold(0, |best, (c, &n)| if n > counts[best] { c } else { best });
        let hard = hard_weighted_vote(&vec![w; models], &votes, classes).map_err(|e| e.to_string())?;
        ensure(hard == plurality, || format!("case {case}: hard vote {hard} vs plurality {plurality}"))?;
    }

    for k in 0..60u32 {
        let mut vw = VoterWeights::new(3);
        for _ in 0..k {
            vw.update(true, &[false, true, true]).map_err(|e| e.to_string())?;
        }
        let expected = 0.5f64.powi(k as i32);
        ensure(vw.weights[0] == expected && vw.weights[1] == 1.0, || {
            format!("after {k} penalties weight is {}", vw.weights[0])
        })?;
        ensure(vw.weights[0] > 0.0 && vw.weights[0] <= 1.0, || "weight left (0, 1]".into())?;
    }
    Ok(format!(
        "200 fused batches, max shift deviation {worst_shift:.1e}, 1000 vote cases, 0.5^k for k < 60"
    ))
}

/// Pairwise AUROC: wins plus half the ties over all positive/negative pairs.
pub fn brute_auroc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &pi) in positive.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, &pj) in positive.iter().enumerate() {
            if pj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// Expected average precision of a uniformly random ranking of `n` items
/// with `p` positives: the mean over positives `r` of `E[r / K_r]`, where
/// `K_r`, the position of the r-th positive, is negative-hypergeometric.
pub fn random_ranking_ap(n: usize, p: usize) -> f64 {
    let ln_fact: Vec<f64> = std::iter::once(0.0)
        .chain((1..=n).scan(0.0, |acc, k| {
            *acc += (k as f64).ln();
            Some(*acc)
        }))
        .collect();
    let ln_choose = |a: usize, b: usize| ln_fact[a] - ln_fact[b] - ln_fact[a - b];
    let mut total = 0.0;
    for r in 1..=p {
        for k in r..=n - (p - r) {
            let prob = (ln_choose(k - 1, r - 1) + ln_choose(n - k, p - r) - ln_choose(n, p)).exp();
            total += prob * r as f64 / k as f64;
        }
    }
    total / p as f64
}

pub fn metric_oracles() -> Outcome {
    let mut rng = Pcg64::seed_from_u64(31);
    for case in 0..100 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(2..30);
        let mut positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        positive[0] = true;
        positive[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let fast = binary_auroc(&scores, &positive).map_err(|e| e.to_string())?;
        let brute = brute_auroc(&scores, &positive);
        ensure(fast == brute, || format!("case {case}: AUROC {fast} vs pairwise {brute}"))?;

        let classes = 3;
        let mut labels: Vec<usize> = (0..n.max(3)).map(|_| rng.random_range(0..classes)).collect();
        labels[..3].copy_from_slice(&[0, 1, 2]);
        let rows: Vec<Vec<f64>> = labels
            .iter()
            .map(|_| (0..classes).map(|_| rng.random_range(0..levels) as f64).collect())
            .collect();
        let macro_fast = auroc(&rows, &labels).map_err(|e| e.to_string())?;
        let macro_brute = (0..classes)
            .map(|c| {
                let s: Vec<f64> = rows.iter().map(|r| r[c]).collect();
                let p: Vec<bool> = labels.iter().map(|&l| l == c).collect();
                brute_auroc(&s, &p)
            })
            .sum::<f64>()
            / classes as f64;
        ensure(macro_fast == macro_brute, || format!("case {case}: macro AUROC {macro_fast} vs {macro_brute}"))?;
    }

    let cm = ConfusionMatrix::from_counts(2, vec![5, 0, 5, 0]).map_err(|e| e.to_string())?;
    let f1 = cm.per_class_f1();
    let w = weighted_f1(&cm).map_err(|e| e.to_string())?;
    ensure(f1[0] == 2.0 / 3.0 && f1[1] == 0.0, || format!("per-class F1 {f1:?}"))?;
    ensure((w - 1.0 / 3.0).abs() <= 1e-15, || format!("weighted F1 {w}"))?;
    let perfect = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 2, 0, 0, 0, 7]).map_err(|e| e.to_string())?;
    ensure(weighted_f1(&perfect).map_err(|e| e.to_string())? == 1.0, || "perfect matrix".into())?;
    let pair = auroc(&[vec![0.1, 0.9], vec![0.2, 0.8], vec![0.7, 0.3], vec![0.9, 0.1]], &[1, 0, 1, 0])
        .map_err(|e| e.to_string())?;
    ensure(pair == 0.75, || format!("worked AUROC example gave {pair}"))?;

    let (n, p, trials) = (200usize, 60usize, 1000);
    let prevalence = p as f64 / n as f64;
    let mut aps = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut positive = vec![false; n];
        positive[..p].iter_mut().for_each(|v| *v = true);
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        aps.push(binary_average_precision(&scores, &positive).map_err(|e| e.to_string())?);
    }
    let (mean, sd) = amsgcn_core::metrics::mean_std(&aps);
    ensure((mean - prevalence).abs() <= 3.0 * sd, || {
        format!("mean AUPRC {mean:.4} is more than 3 sd ({sd:.4}) from prevalence {prevalence}")
    })?;
    let exact = random_ranking_ap(n, p);
    let se = sd / (trials as f64).sqrt();
    ensure((mean - exact).abs() <= 3.0 * se, || {
        format!("mean AUPRC {mean:.5} vs exact expectation {exact:.5} (se {se:.5})")
    })?;
    let single = auprc(&[vec![0.9, 0.1], vec![0.2, 0.8], vec![0.7, 0.3]], &[0, 1, 0]).map_err(|e| e.to_string())?;
    ensure(single == 1.0, || format!("single top-ranked positive gave {single}"))?;
    Ok(format!(
        "100 exact AUROC instances, weighted F1 1/3, random AUPRC {mean:.4} vs prevalence {prevalence} (sd {sd:.4})"
    ))
}
