//! In-memory, network-ready clip collections.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::preprocess::{derive_features, FeatureKind, GaitClip};
use crate::tensor::Tensor;

/// Clips with their feature streams stored channels-first
/// (`samples x 3 x frames x joints`) for the requested feature kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub frames: usize,
    pub joints: usize,
    pub labels: Vec<usize>,
    pub subjects: Vec<String>,
    streams: [Option<Vec<f64>>; 5],
}

/// One mini-batch: the requested streams as `N x 3 x T x V` tensors.
#[derive(Debug, Clone)]
pub struct Batch {
    pub labels: Vec<usize>,
    inputs: [Option<Tensor>; 5],
}

impl Batch {
    pub fn new(labels: Vec<usize>) -> Self {
        Batch {
            labels,
            inputs: Default::default(),
        }
    }

    pub fn with_input(mut self, kind: FeatureKind, t: Tensor) -> Self {
        self.inputs[kind.index()] = Some(t);
        self
    }

    pub fn input(&self, kind: FeatureKind) -> Result<&Tensor> {
        self.inputs[kind.index()]
            .as_ref()
            .ok_or_else(|| Error::Config(format!("batch carries no {kind} stream")))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl FeatureDataset {
    /// Derives features for every clip and keeps the `kinds` streams.
    pub fn from_clips(
        clips: &[GaitClip],
        parents: &[Option<usize>],
        kinds: &[FeatureKind],
    ) -> Result<Self> {
        let first = clips
            .first()
            .ok_or_else(|| Error::Split("no clips to build a dataset from".into()))?;
        let (frames, joints) = (first.frames, first.joints);
        let mut streams: [Option<Vec<f64>>; 5] = Default::default();
        for &k in kinds {
            streams[k.index()] = Some(Vec::with_capacity(clips.len() * 3 * frames * joints));
        }
        let mut labels = Vec::with_capacity(clips.len());
        let mut subjects = Vec::with_capacity(clips.len());
        for clip in clips {
            if clip.frames != frames || clip.joints != joints {
                return Err(Error::Shape(format!(
                    "clip of {}x{} among clips of {frames}x{joints}",
                    clip.frames, clip.joints
                )));
            }
            let fs = derive_features(clip, parents)?;
            for k in FeatureKind::ALL {
                if let Some(buf) = &mut streams[k.index()] {
                    buf.extend(fs.channels_first(k));
                }
            }
            labels.push(clip.gait_class);
            subjects.push(clip.subject_id.clone());
        }
        Ok(FeatureDataset {
            frames,
            joints,
            labels,
            subjects,
            streams,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn kinds(&self) -> Vec<FeatureKind> {
        FeatureKind::ALL
            .into_iter()
            .filter(|k| self.streams[k.index()].is_some())
            .collect()
    }

    pub fn subject_set(&self) -> BTreeSet<&str> {
        self.subjects.iter().map(String::as_str).collect()
    }

    fn sample_len(&self) -> usize {
        3 * self.frames * self.joints
    }

    pub fn sample(&self, kind: FeatureKind, index: usize) -> Option<&[f64]> {
        let len = self.sample_len();
        self.streams[kind.index()]
            .as_ref()
            .map(|s| &s[index * len..(index + 1) * len])
    }

    /// Gathers `indices` into a batch carrying `kinds`.
    pub fn batch(&self, indices: &[usize], kinds: &[FeatureKind]) -> Result<Batch> {
        let len = self.sample_len();
        let mut batch = Batch::new(indices.iter().map(|&i| self.labels[i]).collect());
        for &k in kinds {
            let stream = self.streams[k.index()]
                .as_ref()
                .ok_or_else(|| Error::Config(format!("dataset was built without the {k} stream")))?;
            let mut data = Vec::with_capacity(indices.len() * len);
            for &i in indices {
                data.extend_from_slice(&stream[i * len..(i + 1) * len]);
            }
            let t = Tensor::new(vec![indices.len(), 3, self.frames, self.joints], data)?;
            batch = batch.with_input(k, t);
        }
        Ok(batch)
    }

    /// Sub-dataset of the given sample indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let len = self.sample_len();
        let mut streams: [Option<Vec<f64>>; 5] = Default::default();
        for (dst, src) in streams.iter_mut().zip(&self.streams) {
            if let Some(src) = src {
                let mut buf = Vec::with_capacity(indices.len() * len);
                for &i in indices {
                    buf.extend_from_slice(&src[i * len..(i + 1) * len]);
                }
                *dst = Some(buf);
            }
        }
        FeatureDataset {
            frames: self.frames,
            joints: self.joints,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            streams,
        }
    }
}
