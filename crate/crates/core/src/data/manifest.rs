//! Dataset manifest (JSON) and the label-only view handed to training.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::{read_feature_header, read_features};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const DEFAULT_SNIPPET_FRAMES: usize = 16;

/// Start time in seconds of snippet `index` (also the end time of snippet
/// `index - 1`).
pub fn snippet_to_seconds(index: f64, snippet_frames: usize, fps: f64) -> f64 {
    index * snippet_frames as f64 / fps
}

/// Snippet containing time `seconds`.
pub fn seconds_to_snippet(seconds: f64, snippet_frames: usize, fps: f64) -> usize {
    (seconds * fps / snippet_frames as f64).floor().max(0.0) as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtSegment {
    pub class_id: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub id: String,
    pub fps: f64,
    pub num_snippets: usize,
    pub rgb_path: PathBuf,
    pub flow_path: PathBuf,
    /// Video-level class ids.
    pub labels: Vec<usize>,
    pub subset: Subset,
    /// Evaluation only.
    #[serde(default)]
    pub gt_segments: Vec<GtSegment>,
}

impl VideoRecord {
    pub fn label_vector(&self, num_classes: usize) -> Vec<bool> {
        let mut y = vec![false; num_classes];
        for &c in &self.labels {
            y[c] = true;
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub videos: Vec<VideoRecord>,
    #[serde(default = "default_snippet_frames")]
    pub snippet_frames: usize,
    /// Directory feature paths are relative to; set on load.
    #[serde(skip)]
    pub root: PathBuf,
}

fn default_snippet_frames() -> usize {
    DEFAULT_SNIPPET_FRAMES
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Parses and structurally validates a manifest; feature files are not
    /// touched (see [`DatasetManifest::check_files`]).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for name in &self.classes {
            if !names.insert(name) {
                return Err(Error::Manifest(format!("duplicate class name `{name}`")));
            }
        }
        if self.classes.is_empty() {
            return Err(Error::Manifest("no classes".into()));
        }
        if self.snippet_frames == 0 {
            return Err(Error::Manifest("snippet_frames must be positive".into()));
        }
        let c = self.classes.len();
        let mut ids = HashSet::new();
        for v in &self.videos {
            let bad = |detail: String| Error::Manifest(format!("video `{}`: {detail}", v.id));
            if !ids.insert(&v.id) {
                return Err(bad("duplicate id".into()));
            }
            if !(v.fps.is_finite() && v.fps > 0.0) {
                return Err(bad(format!("fps {} must be positive", v.fps)));
            }
            if v.num_snippets == 0 {
                return Err(bad("no snippets".into()));
            }
            if let Some(&k) = v.labels.iter().find(|&&k| k >= c) {
                return Err(bad(format!("unknown class id {k}")));
            }
            if v.subset == Subset::Train && v.labels.is_empty() {
                return Err(bad("training video without labels".into()));
            }
            for g in &v.gt_segments {
                if g.class_id >= c {
                    return Err(bad(format!("segment with unknown class id {}", g.class_id)));
                }
                if !v.labels.contains(&g.class_id) {
                    return Err(bad(format!("segment class {} not among labels", g.class_id)));
                }
                if !(g.start >= 0.0 && g.start < g.end && g.end.is_finite()) {
                    return Err(bad(format!("segment [{}, {}] is empty or negative", g.start, g.end)));
                }
            }
        }
        Ok(())
    }

    /// Confirms every feature file exists with header `(num_snippets, d)`
    /// and a common `d`, which is returned.
    pub fn check_files(&self) -> Result<usize> {
        let mut dim = None;
        for v in &self.videos {
            for rel in [&v.rgb_path, &v.flow_path] {
                let (s, d) = read_feature_header(&self.resolve(rel))?;
                if s != v.num_snippets {
                    return Err(Error::Manifest(format!(
                        "video `{}`: {} has {s} snippets, manifest says {}",
                        v.id,
                        rel.display(),
                        v.num_snippets
                    )));
                }
                match dim {
                    None => dim = Some(d),
                    Some(d0) if d0 != d => {
                        return Err(Error::Manifest(format!(
                            "video `{}`: {} has dimension {d}, expected {d0}",
                            v.id,
                            rel.display()
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        dim.ok_or_else(|| Error::Manifest("no videos".into()))
    }

    pub fn videos_in(&self, subset: Subset) -> impl Iterator<Item = &VideoRecord> {
        self.videos.iter().filter(move |v| v.subset == subset)
    }

    pub fn video(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.id == id)
    }

    /// Both streams of one video as `s × d` matrices.
    pub fn load_streams(&self, video: &VideoRecord) -> Result<(Matrix, Matrix)> {
        let load = |rel: &Path| -> Result<Matrix> {
            let f = read_features(&self.resolve(rel))?;
            if f.snippets != video.num_snippets {
                return Err(Error::Manifest(format!(
                    "video `{}`: {} has {} snippets, manifest says {}",
                    video.id,
                    rel.display(),
                    f.snippets,
                    video.num_snippets
                )));
            }
            Ok(f.to_matrix())
        };
        let rgb = load(&video.rgb_path)?;
        let flow = load(&video.flow_path)?;
        if rgb.cols() != flow.cols() {
            return Err(Error::Manifest(format!(
                "video `{}`: stream widths differ ({} vs {})",
                video.id,
                rgb.cols(),
                flow.cols()
            )));
        }
        Ok((rgb, flow))
    }
}

/// A training video: features and video-level labels only.
#[derive(Clone, Debug)]
pub struct TrainVideo {
    pub id: String,
    pub rgb: Matrix,
    pub flow: Matrix,
    /// Multi-hot label vector.
    pub labels: Vec<bool>,
}

/// Everything training may see. Ground-truth segments are not carried.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub videos: Vec<TrainVideo>,
}

impl TrainingSet {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        let feature_dim = manifest.check_files()?;
        let c = manifest.num_classes();
        let videos = manifest
            .videos_in(Subset::Train)
            .map(|v| {
                let (rgb, flow) = manifest.load_streams(v)?;
                Ok(TrainVideo {
                    id: v.id.clone(),
                    rgb,
                    flow,
                    labels: v.label_vector(c),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if videos.is_empty() {
            return Err(Error::Manifest("no training videos".into()));
        }
        Ok(Self {
            num_classes: c,
            feature_dim,
            videos,
        })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}
