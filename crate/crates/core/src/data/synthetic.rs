//! Synthetic pathological gait on the Kinect-25 body.
//!
//! A treadmill walker drives sinusoidal hip, knee and ankle trajectories
//! through planar leg kinematics, with counter-phase arm swing and small
//! trunk sway. Pathologies act on the left leg: stride asymmetry shrinks
//! its joint amplitudes, a knee clamp caps its flexion and a swing-velocity
//! scale warps its phase so the swing slows while the cycle length stays.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::{DatasetManifest, RecordingEntry};
use super::recording::write_recording;
use crate::error::{Error, Result};
use crate::graph::JointLayout;
use crate::preprocess::{RangeScope, RawRecording};

/// Frames per second of generated walks.
pub const SYNTHETIC_FPS: f64 = 30.0;

/// Pathology parameters of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClass {
    pub name: String,
    /// Stride asymmetry: the left leg's amplitudes scale by `1 - asymmetry`.
    pub asymmetry: f64,
    /// Maximum left-knee flexion in degrees; `None` leaves the knee free.
    pub knee_clamp_deg: Option<f64>,
    /// Left-leg swing speed relative to normal; 1 is unchanged.
    pub swing_scale: f64,
    /// Standard deviation of Gaussian noise added to every coordinate, in meters.
    pub noise: f64,
}

impl SyntheticClass {
    pub fn normal(name: &str, noise: f64) -> Self {
        SyntheticClass {
            name: name.into(),
            asymmetry: 0.0,
            knee_clamp_deg: None,
            swing_scale: 1.0,
            noise,
        }
    }

    fn same_parameters(&self, other: &Self) -> bool {
        self.asymmetry == other.asymmetry
            && self.knee_clamp_deg == other.knee_clamp_deg
            && self.swing_scale == other.swing_scale
            && self.noise == other.noise
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGaitSpec {
    pub subjects: usize,
    pub classes: Vec<SyntheticClass>,
    /// Frames per walk.
    pub frames: usize,
    /// Walks recorded per subject and class.
    #[serde(default = "one")]
    pub walks: usize,
    pub seed: u64,
    /// Permits classes with identical parameters, for null-effect controls.
    #[serde(default)]
    pub allow_identical_classes: bool,
}

fn one() -> usize {
    1
}

impl SyntheticGaitSpec {
    /// Three pathologies (limp, stiff knee, slowed swing) with 5 mm noise.
    pub fn benchmark(subjects: usize, frames: usize, seed: u64) -> Self {
        let noise = 0.005;
        SyntheticGaitSpec {
            subjects,
            classes: vec![
                SyntheticClass {
                    asymmetry: 0.4,
                    ..SyntheticClass::normal("asymmetric", noise)
                },
                SyntheticClass {
                    knee_clamp_deg: Some(20.0),
                    ..SyntheticClass::normal("stiff_knee", noise)
                },
                SyntheticClass {
                    swing_scale: 0.6,
                    ..SyntheticClass::normal("slow_swing", noise)
                },
            ],
            frames,
            walks: 1,
            seed,
            allow_identical_classes: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.frames == 0 || self.walks == 0 {
            return Err(Error::Config("subjects, frames and walks must be positive".into()));
        }
        if self.classes.len() < 2 {
            return Err(Error::Config("need at least two synthetic classes".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if !(c.noise >= 0.0) {
                return Err(Error::Config(format!("class {}: noise must be non-negative", c.name)));
            }
            if !(0.0..=1.0).contains(&c.asymmetry) {
                return Err(Error::Config(format!("class {}: asymmetry must lie in [0, 1]", c.name)));
            }
            if !(c.swing_scale > 0.0 && c.swing_scale <= 2.0) {
                return Err(Error::Config(format!("class {}: swing scale must lie in (0, 2]", c.name)));
            }
            if c.knee_clamp_deg.is_some_and(|d| !(d >= 0.0)) {
                return Err(Error::Config(format!("class {}: knee clamp must be non-negative", c.name)));
            }
            for other in &self.classes[..i] {
                if other.name == c.name {
                    return Err(Error::Config(format!("class name {} appears twice", c.name)));
                }
                if !self.allow_identical_classes && other.same_parameters(c) {
                    return Err(Error::Config(format!(
                        "classes {} and {} have identical parameters",
                        other.name, c.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn subject_id(index: usize) -> String {
        (index + 1).to_string()
    }
}

/// Generated recordings with a manifest that points at their files.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub recordings: Vec<RawRecording>,
}

impl SyntheticDataset {
    /// Writes the recordings and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let layout = JointLayout::kinect25();
        for (entry, rec) in self.manifest.recordings.iter().zip(&self.recordings) {
            write_recording(&dir.join(&entry.path), rec, &layout)?;
        }
        self.manifest.save(&dir.join("manifest.json"))
    }
}

fn derived_seed(parts: &str) -> u64 {
    let digest = Sha256::digest(parts.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Per-subject body and gait variation.
struct Subject {
    height: f64,
    /// Gait cycles per frame.
    cadence: f64,
    amplitude: f64,
    arm_swing: f64,
    stride_width: f64,
}

impl Subject {
    fn draw(rng: &mut Pcg64) -> Self {
        Subject {
            height: rng.random_range(0.9..1.1),
            cadence: rng.random_range(0.9..1.1) / SYNTHETIC_FPS,
            amplitude: rng.random_range(0.9..1.1),
            arm_swing: rng.random_range(0.8..1.2),
            stride_width: rng.random_range(0.9..1.1),
        }
    }
}

struct Joints {
    idx: [usize; 25],
}

const NAMES: [&str; 25] = [
    "SpineBase", "SpineMid", "Neck", "Head", "ShoulderLeft", "ElbowLeft", "WristLeft", "HandLeft",
    "ShoulderRight", "ElbowRight", "WristRight", "HandRight", "HipLeft", "KneeLeft", "AnkleLeft",
    "FootLeft", "HipRight", "KneeRight", "AnkleRight", "FootRight", "SpineShoulder", "HandTipLeft",
    "ThumbLeft", "HandTipRight", "ThumbRight",
];

impl Joints {
    fn new(layout: &JointLayout) -> Self {
        let mut idx = [0; 25];
        for (slot, name) in idx.iter_mut().zip(NAMES) {
            *slot = layout.joint_index(name).expect("kinect25 joint");
        }
        Joints { idx }
    }
}

type P = [f64; 3];

fn offset(p: P, d: P) -> P {
    [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
}

/// Unit vector in the sagittal plane, `angle` radians forward of straight down.
fn down(angle: f64, len: f64) -> P {
    [0.0, -angle.cos() * len, angle.sin() * len]
}

struct Leg {
    hip: P,
    knee: P,
    ankle: P,
    foot: P,
}

fn leg(hip: P, h: f64, hip_angle: f64, knee_flexion: f64, ankle_angle: f64) -> Leg {
    let knee = offset(hip, down(hip_angle, 0.45 * h));
    let shank = hip_angle - knee_flexion;
    let ankle = offset(knee, down(shank, 0.43 * h));
    let toe = shank + ankle_angle;
    let foot = offset(ankle, [0.0, toe.sin() * 0.12 * h, toe.cos() * 0.12 * h]);
    Leg { hip, knee, ankle, foot }
}

fn walk(
    subject: &Subject,
    class: &SyntheticClass,
    frames: usize,
    rng: &mut Pcg64,
    joints: &Joints,
) -> Vec<f64> {
    let h = subject.height;
    let a = subject.amplitude;
    let phase0 = rng.random_range(0.0..std::f64::consts::TAU);
    let clamp = class.knee_clamp_deg.map(f64::to_radians);
    let warp = 0.8 * (class.swing_scale - 1.0);
    let noise = (class.noise > 0.0).then(|| Normal::new(0.0, class.noise).expect("valid sigma"));
    let mut out = vec![0.0; frames * 25 * 3];
    for t in 0..frames {
        let phi = std::f64::consts::TAU * subject.cadence * t as f64 + phase0;
        let mut pts = [[0.0; 3]; 25];
        let sway = 0.02 * h * phi.sin();
        let base = [sway * 0.5, 0.95 * h + 0.015 * h * (2.0 * phi).cos(), 0.0];
        pts[0] = base;
        let spine_mid = offset(base, [sway * 0.5, 0.25 * h, 0.01 * h]);
        let spine_shoulder = offset(base, [sway, 0.5 * h, 0.02 * h]);
        pts[1] = spine_mid;
        pts[20] = spine_shoulder;
        pts[2] = offset(spine_shoulder, [0.0, 0.08 * h, 0.0]);
        pts[3] = offset(spine_shoulder, [0.0, 0.2 * h, 0.01 * h]);
        for (side, sign) in [(0usize, 1.0f64), (1, -1.0)] {
            let leg_phase = phi + side as f64 * std::f64::consts::PI;
            let affected = side == 0;
            // swing (cos > 0) slows when warp < 0; the cycle length is unchanged
            let psi = if affected { leg_phase + warp * leg_phase.sin() } else { leg_phase };
            let scale = a * if affected { 1.0 - class.asymmetry } else { 1.0 };
            let hip_angle = 0.44 * scale * psi.sin();
            let mut knee = 0.08 + 1.0 * scale * (1.0 - (psi + 1.0).cos()) / 2.0;
            if affected {
                if let Some(c) = clamp {
                    knee = knee.min(c);
                }
            }
            let ankle = 0.2 * scale * (psi - 0.8).sin();
            let hip = offset(base, [sign * 0.1 * h * subject.stride_width, -0.05 * h, 0.0]);
            let l = leg(hip, h, hip_angle, knee, ankle);
            let (hi, ki, ai, fi) = if affected { (12, 13, 14, 15) } else { (16, 17, 18, 19) };
            pts[hi] = l.hip;
            pts[ki] = l.knee;
            pts[ai] = l.ankle;
            pts[fi] = l.foot;
            // arms swing against the leg on the same side
            let swing = -0.35 * subject.arm_swing * leg_phase.sin();
            let elbow_flex = 0.35 + 0.15 * (1.0 - leg_phase.sin());
            let shoulder = offset(spine_shoulder, [sign * 0.18 * h, -0.02 * h, 0.0]);
            let elbow = offset(shoulder, down(swing, 0.3 * h));
            let fore = swing + elbow_flex;
            let wrist = offset(elbow, down(fore, 0.26 * h));
            let hand = offset(wrist, down(fore, 0.07 * h));
            let tip = offset(hand, down(fore, 0.06 * h));
            let thumb = offset(hand, [-sign * 0.03 * h, 0.0, 0.02 * h]);
            let ids = if affected { [4, 5, 6, 7, 21, 22] } else { [8, 9, 10, 11, 23, 24] };
            for (k, p) in ids.into_iter().zip([shoulder, elbow, wrist, hand, tip, thumb]) {
                pts[k] = p;
            }
        }
        for (k, p) in pts.iter().enumerate() {
            let j = joints.idx[k];
            for (c, &v) in p.iter().enumerate() {
                let n = noise.map_or(0.0, |d| d.sample(&mut *rng));
                out[(t * 25 + j) * 3 + c] = v + n;
            }
        }
    }
    out
}

/// Generates every subject walking every class. Subject variation depends
/// only on the seed and subject, walk variation on the seed, subject, class
/// and walk, so subsets regenerate identically.
pub fn generate_synthetic(spec: &SyntheticGaitSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let layout = JointLayout::kinect25();
    let joints = Joints::new(&layout);
    let mut recordings = Vec::new();
    let mut entries = Vec::new();
    for s in 0..spec.subjects {
        let sid = SyntheticGaitSpec::subject_id(s);
        let subject = Subject::draw(&mut Pcg64::seed_from_u64(derived_seed(&format!("{}:subject:{sid}", spec.seed))));
        for (c, class) in spec.classes.iter().enumerate() {
            for w in 0..spec.walks {
                let mut rng = Pcg64::seed_from_u64(derived_seed(&format!(
                    "{}:walk:{sid}:{}:{w}",
                    spec.seed, class.name
                )));
                let coords = walk(&subject, class, spec.frames, &mut rng, &joints);
                recordings.push(RawRecording::new(sid.clone(), c, 25, coords)?);
                entries.push(RecordingEntry {
                    subject: sid.clone(),
                    class: class.name.clone(),
                    path: format!("subject{sid}_{}_{w}.csv", class.name).into(),
                });
            }
        }
    }
    let manifest = DatasetManifest {
        name: format!("synthetic-{}", spec.seed),
        layout: layout.name().to_string(),
        class_names: spec.classes.iter().map(|c| c.name.clone()).collect(),
        clip_frames: 48,
        overlap: 40,
        range_scope: RangeScope::Pooled,
        frame_rate: Some(SYNTHETIC_FPS),
        recordings: entries,
    };
    Ok(SyntheticDataset { manifest, recordings })
}
