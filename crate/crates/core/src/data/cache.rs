//! Versioned binary cache of preprocessed clips, keyed by a hash of every
//! input that affects them.
//!
//! Layout: magic `AMSGCLIP`, little-endian `u32` header length, JSON
//! header, then each clip's `frames x joints x 3` values as little-endian
//! `f64` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::{ClassSummary, DatasetManifest};
use crate::error::{Error, Result};
use crate::graph::JointLayout;
use crate::preprocess::GaitClip;

const MAGIC: &[u8; 8] = b"AMSGCLIP";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ClipEntry {
    subject: String,
    class: usize,
    start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheHeader {
    format_version: u32,
    key: String,
    frames: usize,
    joints: usize,
    class_names: Vec<String>,
    summary: Vec<ClassSummary>,
    clips: Vec<ClipEntry>,
}

/// Preprocessed clips of a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipCache {
    pub key: String,
    pub class_names: Vec<String>,
    pub summary: Vec<ClassSummary>,
    pub clips: Vec<GaitClip>,
}

/// Hash of the manifest, the resolved layout and every recording's bytes.
pub fn cache_key(manifest: &DatasetManifest, base: &Path, layout: &JointLayout) -> Result<String> {
    let mut h = Sha256::new();
    h.update(format!("clip-cache-v{CACHE_VERSION}\n"));
    h.update(serde_json::to_vec(manifest)?);
    h.update(serde_json::to_vec(&layout.to_file())?);
    for r in &manifest.recordings {
        let path = base.join(&r.path);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(format!("{:x}", h.finalize()))
}

impl ClipCache {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (frames, joints) = self.clips.first().map_or((0, 0), |c| (c.frames, c.joints));
        let header = CacheHeader {
            format_version: CACHE_VERSION,
            key: self.key.clone(),
            frames,
            joints,
            class_names: self.class_names.clone(),
            summary: self.summary.clone(),
            clips: self
                .clips
                .iter()
                .map(|c| ClipEntry {
                    subject: c.subject_id.clone(),
                    class: c.gait_class,
                    start: c.start,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + self.clips.len() * frames * joints * 24);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for c in &self.clips {
            if (c.frames, c.joints) != (frames, joints) {
                return Err(Error::Shape("clips in one cache must share a shape".into()));
            }
            c.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("clip cache: {m}"));
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a clip cache"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
        let header: CacheHeader = serde_json::from_slice(json)?;
        if header.format_version != CACHE_VERSION {
            return Err(bad(&format!("unsupported version {}", header.format_version)));
        }
        let per_clip = header.frames * header.joints * 3;
        let payload = &bytes[12 + len..];
        if payload.len() != header.clips.len() * per_clip * 8 {
            return Err(bad("payload size does not match header"));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let clips = header
            .clips
            .into_iter()
            .map(|e| GaitClip {
                subject_id: e.subject,
                gait_class: e.class,
                start: e.start,
                frames: header.frames,
                joints: header.joints,
                data: values.by_ref().take(per_clip).collect(),
            })
            .collect();
        Ok(ClipCache {
            key: header.key,
            class_names: header.class_names,
            summary: header.summary,
            clips,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// A dataset loaded for training: its manifest, layout and clips.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub layout: JointLayout,
    pub cache: ClipCache,
    /// True when the clips came from an up-to-date cache file.
    pub cache_hit: bool,
}

/// Loads and preprocesses the dataset behind `manifest_path`. When
/// `cache_path` holds a cache with a matching key it is used as is;
/// otherwise clips are rebuilt and the cache (if a path is given) rewritten.
/// `layout_override` replaces the manifest's layout.
pub fn load_dataset(
    manifest_path: &Path,
    layout_override: Option<&JointLayout>,
    cache_path: Option<&Path>,
) -> Result<LoadedDataset> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let layout = match layout_override {
        Some(l) => l.clone(),
        None => manifest.resolve_layout(base)?,
    };
    let key = cache_key(&manifest, base, &layout)?;
    if let Some(p) = cache_path.filter(|p| p.exists()) {
        match ClipCache::read(p) {
            Ok(cache) if cache.key == key => {
                return Ok(LoadedDataset {
                    manifest,
                    layout,
                    cache,
                    cache_hit: true,
                })
            }
            Ok(_) => log::info!("clip cache {} is stale, rebuilding", p.display()),
            Err(e) => log::warn!("ignoring unreadable clip cache {}: {e}", p.display()),
        }
    }
    let recordings = manifest.load_recordings(base, &layout)?;
    let (clips, summary) = manifest.clips(&recordings, &layout)?;
    let cache = ClipCache {
        key,
        class_names: manifest.class_names.clone(),
        summary,
        clips,
    };
    if let Some(p) = cache_path {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        cache.write(p)?;
    }
    Ok(LoadedDataset {
        manifest,
        layout,
        cache,
        cache_hit: false,
    })
}
