//! Dataset manifest: binds recording files to subjects and classes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::recording::load_recording;
use crate::error::{Error, Result};
use crate::graph::JointLayout;
use crate::preprocess::{clip_count, preprocess_recording, ClipConfig, GaitClip, RangeScope, RawRecording};

fn default_clip_frames() -> usize {
    48
}

fn default_overlap() -> usize {
    40
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordingEntry {
    pub subject: String,
    pub class: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    /// Built-in layout name or path to a layout file.
    pub layout: String,
    pub class_names: Vec<String>,
    #[serde(default = "default_clip_frames")]
    pub clip_frames: usize,
    /// Frames shared by consecutive clips; 0 for non-overlapping clips.
    #[serde(default = "default_overlap")]
    pub overlap: usize,
    #[serde(default)]
    pub range_scope: RangeScope,
    /// Recorded but unused: velocities are per-frame differences.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_rate: Option<f64>,
    pub recordings: Vec<RecordingEntry>,
}

/// Clip bookkeeping per class after preprocessing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: String,
    pub recordings: usize,
    pub subjects: usize,
    pub clips: usize,
    /// Recordings too short for a single clip.
    pub skipped: usize,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| {
            Error::parse(path, e.line() as u64, format!("invalid dataset manifest: {e}"))
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(Error::Config("a dataset needs at least two classes".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.class_names {
            if !seen.insert(c) {
                return Err(Error::Config(format!("class name {c:?} appears twice")));
            }
        }
        if self.overlap >= self.clip_frames {
            return Err(Error::Config(format!(
                "overlap {} must be below the clip length {}",
                self.overlap, self.clip_frames
            )));
        }
        for (i, r) in self.recordings.iter().enumerate() {
            if r.subject.trim().is_empty() {
                return Err(Error::Label(format!("recording {i} has an empty subject id")));
            }
            self.class_index(&r.class)?;
        }
        if self.recordings.is_empty() {
            return Err(Error::Config("the manifest lists no recordings".into()));
        }
        Ok(())
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.class_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Label(format!("class {name:?} is not one of {:?}", self.class_names)))
    }

    pub fn clip_config(&self) -> ClipConfig {
        ClipConfig {
            frames: self.clip_frames,
            overlap: self.overlap,
            scope: self.range_scope,
        }
    }

    pub fn resolve_layout(&self, base: &Path) -> Result<JointLayout> {
        match JointLayout::builtin(&self.layout) {
            Some(l) => Ok(l),
            None => JointLayout::load(&base.join(&self.layout)),
        }
    }

    /// Reads every recording, in manifest order.
    pub fn load_recordings(&self, base: &Path, layout: &JointLayout) -> Result<Vec<RawRecording>> {
        self.recordings
            .par_iter()
            .map(|r| {
                let path = base.join(&r.path);
                load_recording(&path, layout, &r.subject, self.class_index(&r.class)?)
            })
            .collect()
    }

    /// Preprocesses recordings into clips and checks each recording's clip
    /// count against the sliding-window formula.
    pub fn clips(&self, recordings: &[RawRecording], layout: &JointLayout) -> Result<(Vec<GaitClip>, Vec<ClassSummary>)> {
        let cfg = self.clip_config();
        let per_recording: Vec<Vec<GaitClip>> = recordings
            .par_iter()
            .map(|r| preprocess_recording(r, layout, &cfg))
            .collect::<Result<_>>()?;
        let stride = cfg.frames - cfg.overlap;
        let mut summary: Vec<ClassSummary> = self
            .class_names
            .iter()
            .map(|c| ClassSummary {
                class: c.clone(),
                recordings: 0,
                subjects: 0,
                clips: 0,
                skipped: 0,
            })
            .collect();
        let mut subjects: BTreeMap<usize, std::collections::BTreeSet<&str>> = BTreeMap::new();
        for (rec, clips) in recordings.iter().zip(&per_recording) {
            let expected = clip_count(rec.frames, cfg.frames, stride);
            if clips.len() != expected {
                return Err(Error::Shape(format!(
                    "subject {} produced {} clips, expected {expected}",
                    rec.subject_id,
                    clips.len()
                )));
            }
            let s = &mut summary[rec.gait_class];
            s.recordings += 1;
            s.clips += clips.len();
            s.skipped += usize::from(clips.is_empty());
            subjects.entry(rec.gait_class).or_default().insert(&rec.subject_id);
        }
        for (c, set) in subjects {
            summary[c].subjects = set.len();
        }
        Ok((per_recording.into_iter().flatten().collect(), summary))
    }
}
