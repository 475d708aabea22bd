//! Raw skeleton recordings to normalized fixed-length clips and the five
//! derived feature streams.
//!
//! Pipeline order: center on the layout's reference joints, keep the
//! selected joints, cut overlapping windows, range-normalize each window,
//! then derive velocity, acceleration and bone features from the normalized
//! coordinates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::JointLayout;

/// A whole walk: `frames x joints x 3` coordinates, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub subject_id: String,
    pub gait_class: usize,
    pub frames: usize,
    pub joints: usize,
    pub coords: Vec<f64>,
}

impl RawRecording {
    pub fn new(
        subject_id: impl Into<String>,
        gait_class: usize,
        joints: usize,
        coords: Vec<f64>,
    ) -> Result<Self> {
        if joints == 0 || coords.is_empty() || coords.len() % (joints * 3) != 0 {
            return Err(Error::Shape(format!(
                "{} coordinates do not form whole frames of {joints} joints",
                coords.len()
            )));
        }
        if let Some(i) = coords.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite coordinate at index {i}")));
        }
        Ok(RawRecording {
            subject_id: subject_id.into(),
            gait_class,
            frames: coords.len() / (joints * 3),
            joints,
            coords,
        })
    }

    #[inline]
    pub fn point(&self, t: usize, j: usize) -> [f64; 3] {
        let i = (t * self.joints + j) * 3;
        [self.coords[i], self.coords[i + 1], self.coords[i + 2]]
    }
}

/// Subtracts, frame by frame, the mean position of `reference` joints.
pub fn center_on_reference(rec: &RawRecording, reference: &[usize]) -> Result<RawRecording> {
    if reference.is_empty() || reference.iter().any(|&r| r >= rec.joints) {
        return Err(Error::Layout(format!(
            "reference joints {reference:?} not present in a {}-joint recording",
            rec.joints
        )));
    }
    let mut out = rec.clone();
    let k = reference.len() as f64;
    for t in 0..rec.frames {
        let mut origin = [0.0; 3];
        for &r in reference {
            let p = rec.point(t, r);
            (0..3).for_each(|a| origin[a] += p[a]);
        }
        if reference.len() > 1 {
            origin.iter_mut().for_each(|o| *o /= k);
        }
        let frame = &mut out.coords[t * rec.joints * 3..(t + 1) * rec.joints * 3];
        for (i, v) in frame.iter_mut().enumerate() {
            *v -= origin[i % 3];
        }
    }
    Ok(out)
}

/// Keeps only `joints`, in the given order.
pub fn select_joints(rec: &RawRecording, joints: &[usize]) -> Result<RawRecording> {
    if joints.iter().any(|&j| j >= rec.joints) {
        return Err(Error::Layout(format!(
            "selection {joints:?} out of range for {} joints",
            rec.joints
        )));
    }
    let mut coords = Vec::with_capacity(rec.frames * joints.len() * 3);
    for t in 0..rec.frames {
        for &j in joints {
            coords.extend_from_slice(&rec.point(t, j));
        }
    }
    RawRecording::new(rec.subject_id.clone(), rec.gait_class, joints.len(), coords)
}

/// Fixed-length window of `frames x joints x 3` coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitClip {
    pub subject_id: String,
    pub gait_class: usize,
    /// First frame of the window within its recording.
    pub start: usize,
    pub frames: usize,
    pub joints: usize,
    pub data: Vec<f64>,
}

/// Number of full windows of length `clip` with the given stride.
pub fn clip_count(raw_frames: usize, clip: usize, stride: usize) -> usize {
    if raw_frames < clip {
        0
    } else {
        (raw_frames - clip) / stride + 1
    }
}

/// Cuts full-length windows starting at multiples of `clip - overlap`.
pub fn split_into_clips(rec: &RawRecording, clip: usize, overlap: usize) -> Result<Vec<GaitClip>> {
    if clip == 0 || overlap >= clip {
        return Err(Error::Config(format!(
            "overlap {overlap} must be smaller than clip length {clip}"
        )));
    }
    let stride = clip - overlap;
    let n = clip_count(rec.frames, clip, stride);
    if n == 0 {
        log::warn!(
            "skipping recording of subject {} ({} frames < clip length {clip})",
            rec.subject_id,
            rec.frames
        );
    }
    let width = rec.joints * 3;
    Ok((0..n)
        .map(|i| {
            let start = i * stride;
            GaitClip {
                subject_id: rec.subject_id.clone(),
                gait_class: rec.gait_class,
                start,
                frames: clip,
                joints: rec.joints,
                data: rec.coords[start * width..(start + clip) * width].to_vec(),
            }
        })
        .collect())
}

/// Which values share one min/max range during normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RangeScope {
    /// One range per axis over all frames and joints of the clip.
    #[default]
    Pooled,
    /// One range per axis per joint, over the clip's frames.
    PerJoint,
}

/// Maps each axis to `[0, 1]` via `(k - k_min) / (k_max - k_min)`; a
/// constant axis maps to 0.
pub fn range_normalize(clip: &GaitClip, scope: RangeScope) -> GaitClip {
    let mut out = clip.clone();
    let groups: Vec<Vec<usize>> = match scope {
        RangeScope::Pooled => (0..3)
            .map(|a| (0..clip.frames * clip.joints).map(|p| p * 3 + a).collect())
            .collect(),
        RangeScope::PerJoint => (0..clip.joints)
            .flat_map(|j| {
                (0..3).map(move |a| (0..clip.frames).map(|t| (t * clip.joints + j) * 3 + a).collect())
            })
            .collect(),
    };
    for idx in groups {
        let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
            (lo.min(clip.data[i]), hi.max(clip.data[i]))
        });
        let range = hi - lo;
        for i in idx {
            out.data[i] = if range > 0.0 { (clip.data[i] - lo) / range } else { 0.0 };
        }
    }
    out
}

/// The five input streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Coordinates,
    Velocity,
    Acceleration,
    BoneVectors,
    BoneAngles,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 5] = [
        FeatureKind::Coordinates,
        FeatureKind::Velocity,
        FeatureKind::Acceleration,
        FeatureKind::BoneVectors,
        FeatureKind::BoneAngles,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureKind::Coordinates => "coordinates",
            FeatureKind::Velocity => "velocity",
            FeatureKind::Acceleration => "acceleration",
            FeatureKind::BoneVectors => "bone_vectors",
            FeatureKind::BoneAngles => "bone_angles",
        }
    }

    /// Short label used in ablation tables.
    pub fn short(self) -> &'static str {
        match self {
            FeatureKind::Coordinates => "Joint",
            FeatureKind::Velocity => "Vel",
            FeatureKind::Acceleration => "Acc",
            FeatureKind::BoneVectors => "boneL",
            FeatureKind::BoneAngles => "boneA",
        }
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "coordinates" | "coords" | "joint" | "joints" => FeatureKind::Coordinates,
            "velocity" | "vel" => FeatureKind::Velocity,
            "acceleration" | "acc" => FeatureKind::Acceleration,
            "bone_vectors" | "bone" | "bones" | "bonel" => FeatureKind::BoneVectors,
            "bone_angles" | "bonea" => FeatureKind::BoneAngles,
            _ => return Err(Error::Config(format!("unknown feature {s:?}"))),
        })
    }
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Five `frames x joints x 3` streams derived from one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub frames: usize,
    pub joints: usize,
    streams: [Vec<f64>; 5],
}

impl FeatureSet {
    pub fn stream(&self, kind: FeatureKind) -> &[f64] {
        &self.streams[kind.index()]
    }

    /// The stream reordered to `3 x frames x joints`, the network input layout.
    pub fn channels_first(&self, kind: FeatureKind) -> Vec<f64> {
        let s = self.stream(kind);
        let (t, v) = (self.frames, self.joints);
        let mut out = vec![0.0; 3 * t * v];
        for ti in 0..t {
            for j in 0..v {
                for a in 0..3 {
                    out[(a * t + ti) * v + j] = s[(ti * v + j) * 3 + a];
                }
            }
        }
        out
    }
}

/// Velocity and acceleration as forward differences (zero-padded at the
/// end), bone vectors against each joint's parent, and bone angles as the
/// arccos of the unit bone vector's components.
///
/// `parents[j]` is the model index of joint `j`'s parent; `None` marks the
/// root, whose bone vector and angles are zero.
pub fn derive_features(clip: &GaitClip, parents: &[Option<usize>]) -> Result<FeatureSet> {
    let (t, v) = (clip.frames, clip.joints);
    if parents.len() != v {
        return Err(Error::Shape(format!(
            "{} parent entries for a {v}-joint clip",
            parents.len()
        )));
    }
    let x = &clip.data;
    let width = v * 3;
    let mut vel = vec![0.0; t * width];
    for ti in 0..t.saturating_sub(1) {
        for i in 0..width {
            vel[ti * width + i] = x[(ti + 1) * width + i] - x[ti * width + i];
        }
    }
    let mut acc = vec![0.0; t * width];
    for ti in 0..t.saturating_sub(2) {
        for i in 0..width {
            acc[ti * width + i] = vel[(ti + 1) * width + i] - vel[ti * width + i];
        }
    }
    let mut bones = vec![0.0; t * width];
    let mut angles = vec![0.0; t * width];
    for ti in 0..t {
        for (j, parent) in parents.iter().enumerate() {
            let Some(p) = *parent else { continue };
            let o = ti * width + j * 3;
            let po = ti * width + p * 3;
            let b = [x[o] - x[po], x[o + 1] - x[po + 1], x[o + 2] - x[po + 2]];
            bones[o..o + 3].copy_from_slice(&b);
            let norm = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
            if norm > 0.0 {
                for a in 0..3 {
                    angles[o + a] = (b[a] / norm).clamp(-1.0, 1.0).acos();
                }
            }
        }
    }
    Ok(FeatureSet {
        frames: t,
        joints: v,
        streams: [x.clone(), vel, acc, bones, angles],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub frames: usize,
    pub overlap: usize,
    pub scope: RangeScope,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            frames: 48,
            overlap: 40,
            scope: RangeScope::Pooled,
        }
    }
}

/// Runs the whole pipeline on one full-layout recording.
pub fn preprocess_recording(
    rec: &RawRecording,
    layout: &JointLayout,
    cfg: &ClipConfig,
) -> Result<Vec<GaitClip>> {
    if rec.joints != layout.joint_count() {
        return Err(Error::Layout(format!(
            "recording has {} joints, layout {} expects {}",
            rec.joints,
            layout.name(),
            layout.joint_count()
        )));
    }
    let centered = center_on_reference(rec, layout.center_joints())?;
    let selected = select_joints(&centered, layout.selected())?;
    Ok(split_into_clips(&selected, cfg.frames, cfg.overlap)?
        .iter()
        .map(|c| range_normalize(c, cfg.scope))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(frames: usize, joints: usize, f: impl Fn(usize, usize, usize) -> f64) -> GaitClip {
        let mut data = Vec::new();
        for t in 0..frames {
            for j in 0..joints {
                for a in 0..3 {
                    data.push(f(t, j, a));
                }
            }
        }
        GaitClip {
            subject_id: "s".into(),
            gait_class: 0,
            start: 0,
            frames,
            joints,
            data,
        }
    }

    fn rec(frames: usize, joints: usize) -> RawRecording {
        let coords = (0..frames * joints * 3).map(|i| (i as f64 * 0.7).sin()).collect();
        RawRecording::new("s1", 1, joints, coords).unwrap()
    }

    #[test]
    fn centering_zeroes_reference_and_removes_translation() {
        let r = rec(5, 3);
        let c = center_on_reference(&r, &[1]).unwrap();
        for t in 0..5 {
            assert_eq!(c.point(t, 1), [0.0; 3]);
        }
        let mut shifted = r.clone();
        for (i, v) in shifted.coords.iter_mut().enumerate() {
            *v += [4.0, -2.0, 0.5][i % 3];
        }
        let cs = center_on_reference(&shifted, &[1]).unwrap();
        for (a, b) in c.coords.iter().zip(&cs.coords) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(center_on_reference(&r, &[3]), Err(Error::Layout(_))));
    }

    #[test]
    fn constant_offset_survives_centering() {
        let mut coords = Vec::new();
        for t in 0..4 {
            let base = [t as f64, 2.0 * t as f64, -1.0];
            coords.extend_from_slice(&base);
            coords.extend_from_slice(&[base[0] + 1.0, base[1] + 2.0, base[2] + 3.0]);
        }
        let r = RawRecording::new("s", 0, 2, coords).unwrap();
        let c = center_on_reference(&r, &[0]).unwrap();
        for t in 0..4 {
            assert_eq!(c.point(t, 1), [1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn clip_counts() {
        assert_eq!(split_into_clips(&rec(56, 1), 48, 40).unwrap().len(), 2);
        let clips = split_into_clips(&rec(128, 1), 48, 40).unwrap();
        assert_eq!(clips.len(), 11);
        assert_eq!(clips.iter().map(|c| c.start).collect::<Vec<_>>(), (0..=80).step_by(8).collect::<Vec<_>>());
        for overlap in [0, 10, 47] {
            assert_eq!(split_into_clips(&rec(48, 1), 48, overlap).unwrap().len(), 1);
        }
        assert!(split_into_clips(&rec(47, 1), 48, 40).unwrap().is_empty());
        assert!(matches!(split_into_clips(&rec(60, 1), 48, 48), Err(Error::Config(_))));
    }

    #[test]
    fn clips_copy_the_right_frames() {
        let r = rec(20, 2);
        let clips = split_into_clips(&r, 8, 3).unwrap();
        for c in &clips {
            assert_eq!(c.data[..], r.coords[c.start * 6..(c.start + 8) * 6]);
            assert_eq!(c.subject_id, "s1");
            assert_eq!(c.gait_class, 1);
        }
    }

    #[test]
    fn range_normalization() {
        let c = clip(3, 1, |t, _, a| if a == 0 { 2.0 + 2.0 * t as f64 } else if a == 1 { 5.0 } else { -(t as f64) });
        let n = range_normalize(&c, RangeScope::Pooled);
        let axis = |a: usize| (0..3).map(|t| n.data[t * 3 + a]).collect::<Vec<_>>();
        assert_eq!(axis(0), vec![0.0, 0.5, 1.0]);
        assert_eq!(axis(1), vec![0.0; 3]);
        assert_eq!(axis(2), vec![1.0, 0.5, 0.0]);
    }

    #[test]
    fn per_joint_scope_normalizes_each_joint() {
        let c = clip(4, 2, |t, j, _| (t as f64 + 1.0) * (j as f64 + 1.0) * 10.0);
        let n = range_normalize(&c, RangeScope::PerJoint);
        for j in 0..2 {
            let vals: Vec<f64> = (0..4).map(|t| n.data[(t * 2 + j) * 3]).collect();
            assert_eq!(vals.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
            assert_eq!(vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
        }
    }

    #[test]
    fn linear_motion_has_constant_velocity() {
        let c = clip(6, 1, |t, _, a| if a == 0 { 0.25 * t as f64 } else { 0.0 });
        let f = derive_features(&c, &[None]).unwrap();
        let v = f.stream(FeatureKind::Velocity);
        let a = f.stream(FeatureKind::Acceleration);
        for t in 0..5 {
            assert_eq!(&v[t * 3..t * 3 + 3], &[0.25, 0.0, 0.0]);
        }
        assert_eq!(&v[15..18], &[0.0; 3]);
        assert!(a.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bone_angles_are_direction_cosines() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let cases = [([1.0, 0.0, 0.0], [0.0, 0.5, 0.5]), ([s, s, 0.0], [0.25, 0.25, 0.5])];
        for (bone, expect) in cases {
            let c = clip(1, 2, |_, j, a| if j == 1 { bone[a] } else { 0.0 });
            let f = derive_features(&c, &[None, Some(0)]).unwrap();
            let ang = f.stream(FeatureKind::BoneAngles);
            assert_eq!(&ang[..3], &[0.0; 3]);
            for a in 0..3 {
                assert!((ang[3 + a] - expect[a] * std::f64::consts::PI).abs() < 1e-12);
            }
            assert_eq!(&f.stream(FeatureKind::BoneVectors)[3..6], &bone);
        }
    }

    #[test]
    fn zero_length_bone_has_zero_angles() {
        let c = clip(2, 2, |_, _, _| 0.3);
        let f = derive_features(&c, &[None, Some(0)]).unwrap();
        assert!(f.stream(FeatureKind::BoneAngles).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn channels_first_transposes() {
        let c = clip(2, 3, |t, j, a| (100 * a + 10 * t + j) as f64);
        let f = derive_features(&c, &[None, Some(0), Some(0)]).unwrap();
        let cf = f.channels_first(FeatureKind::Coordinates);
        for a in 0..3 {
            for t in 0..2 {
                for j in 0..3 {
                    assert_eq!(cf[(a * 2 + t) * 3 + j], (100 * a + 10 * t + j) as f64);
                }
            }
        }
    }

    #[test]
    fn feature_names_parse() {
        for k in FeatureKind::ALL {
            assert_eq!(k.as_str().parse::<FeatureKind>().unwrap(), k);
            assert_eq!(k.short().parse::<FeatureKind>().unwrap(), k);
        }
        assert!("speed".parse::<FeatureKind>().is_err());
    }

    #[test]
    fn pipeline_checks_joint_count() {
        let layout = JointLayout::kinect25();
        let bad = rec(60, 3);
        assert!(matches!(
            preprocess_recording(&bad, &layout, &ClipConfig::default()),
            Err(Error::Layout(_))
        ));
        let good = rec(60, 25);
        let clips = preprocess_recording(&good, &layout, &ClipConfig::default()).unwrap();
        assert_eq!(clips.len(), 2);
        assert_eq!(clips[0].joints, 19);
    }
}
