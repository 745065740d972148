//! Synthetic two-stream dataset with planted action instances.
//!
//! Each class gets a random unit prototype, plus one more for background.
//! Snippets inside an instance sit at their class prototype, all others at
//! the background prototype, and both streams add independent Gaussian noise.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::features::{write_features, FeatureMatrix};
use super::manifest::{
    snippet_to_seconds, DatasetManifest, GtSegment, Subset, VideoRecord, DEFAULT_SNIPPET_FRAMES,
};
use crate::error::{Error, Result};

pub const SYNTH_FPS: f64 = 25.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_train: usize,
    pub num_test: usize,
    /// Inclusive range of snippets per video.
    pub snippets_range: [usize; 2],
    pub feature_dim: usize,
    /// Inclusive range of planted instances per video.
    pub instances_range: [usize; 2],
    /// Inclusive range of instance lengths in snippets.
    pub instance_len_range: [usize; 2],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            num_train: 60,
            num_test: 20,
            snippets_range: [40, 96],
            feature_dim: 32,
            instances_range: [1, 5],
            instance_len_range: [3, 10],
            noise_sigma: 0.4,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |r: [usize; 2]| r[0] >= 1 && r[0] <= r[1];
        let problems = [
            (self.num_classes >= 2, "num_classes must be at least 2"),
            (self.num_train >= 1, "num_train must be at least 1"),
            (
                self.feature_dim >= 2 && self.feature_dim.is_multiple_of(2),
                "feature_dim must be even and at least 2",
            ),
            (range_ok(self.snippets_range), "snippets_range must be a nonempty positive range"),
            (range_ok(self.instances_range), "instances_range must be a nonempty positive range"),
            (
                range_ok(self.instance_len_range),
                "instance_len_range must be a nonempty positive range",
            ),
            (
                self.snippets_range[0] >= self.instance_len_range[1],
                "shortest video must fit the longest instance",
            ),
            (
                self.noise_sigma.is_finite() && self.noise_sigma >= 0.0,
                "noise_sigma must be finite and non-negative",
            ),
        ];
        match problems.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config(format!("synth: {msg}"))),
            None => Ok(()),
        }
    }
}

/// One planted instance, inclusive snippet indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlantedInstance {
    pub class_id: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug)]
pub struct SyntheticVideo {
    pub record: VideoRecord,
    pub rgb: FeatureMatrix,
    pub flow: FeatureMatrix,
    pub instances: Vec<PlantedInstance>,
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    /// Rows `0..C` are class prototypes, row `C` is background.
    pub prototypes: Vec<Vec<f32>>,
    pub classes: Vec<String>,
    pub videos: Vec<SyntheticVideo>,
}

impl SyntheticDataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            classes: self.classes.clone(),
            videos: self.videos.iter().map(|v| v.record.clone()).collect(),
            snippet_frames: DEFAULT_SNIPPET_FRAMES,
            root: PathBuf::new(),
        }
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

fn place_instances(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    s: usize,
    classes: &[usize],
) -> Vec<PlantedInstance> {
    let n = rng.random_range(cfg.instances_range[0]..=cfg.instances_range[1]);
    let [lmin, lmax] = cfg.instance_len_range;
    let mut lens: Vec<usize> = (0..n).map(|_| rng.random_range(lmin..=lmax)).collect();
    // Keep at least one background snippet between consecutive instances.
    while lens.len() > 1 && lens.iter().sum::<usize>() + lens.len() - 1 > s {
        lens.pop();
    }
    let n = lens.len();
    let mut kinds: Vec<usize> = (0..n).map(|i| classes[i % classes.len()]).collect();
    for i in (1..n).rev() {
        kinds.swap(i, rng.random_range(0..=i));
    }
    let slack = s - lens.iter().sum::<usize>() - (n - 1);
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(n);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for i in 0..n {
        let start = cursor + (cuts[i] - prev_cut);
        let end = start + lens[i] - 1;
        out.push(PlantedInstance {
            class_id: kinds[i],
            start,
            end,
        });
        prev_cut = cuts[i];
        cursor = end + 2;
    }
    out
}

fn synth_video(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    prototypes: &[Vec<f32>],
    id: String,
    subset: Subset,
) -> Result<SyntheticVideo> {
    let s = rng.random_range(cfg.snippets_range[0]..=cfg.snippets_range[1]);
    let max_instances = cfg.instances_range[1];
    let num_video_classes = if rng.random::<f64>() < 0.25 && max_instances > 1 { 2 } else { 1 };
    let video_classes = index::sample(rng, cfg.num_classes, num_video_classes).into_vec();
    let instances = place_instances(rng, cfg, s, &video_classes);

    let background = cfg.num_classes;
    let mut owner = vec![background; s];
    for inst in &instances {
        owner[inst.start..=inst.end].fill(inst.class_id);
    }
    let d = cfg.feature_dim;
    let normal = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| Error::Config(format!("synth: noise_sigma: {e}")))?;
    let stream = |rng: &mut ChaCha8Rng| -> Result<FeatureMatrix> {
        let mut values = Vec::with_capacity(s * d);
        for &k in &owner {
            for &p in &prototypes[k] {
                values.push(if cfg.noise_sigma == 0.0 {
                    p
                } else {
                    (f64::from(p) + normal.sample(rng)) as f32
                });
            }
        }
        FeatureMatrix::new(s, d, values)
    };
    let rgb = stream(rng)?;
    let flow = stream(rng)?;

    let mut labels: Vec<usize> = instances.iter().map(|i| i.class_id).collect();
    labels.sort_unstable();
    labels.dedup();
    let frames = DEFAULT_SNIPPET_FRAMES;
    let gt_segments = instances
        .iter()
        .map(|i| GtSegment {
            class_id: i.class_id,
            start: snippet_to_seconds(i.start as f64, frames, SYNTH_FPS),
            end: snippet_to_seconds((i.end + 1) as f64, frames, SYNTH_FPS),
        })
        .collect();
    let record = VideoRecord {
        rgb_path: PathBuf::from(format!("features/{id}_rgb.d2ft")),
        flow_path: PathBuf::from(format!("features/{id}_flow.d2ft")),
        id,
        fps: SYNTH_FPS,
        num_snippets: s,
        labels,
        subset,
        gt_segments,
    };
    Ok(SyntheticVideo {
        record,
        rgb,
        flow,
        instances,
    })
}

/// Builds the dataset in memory. Same config, same bytes.
pub fn synthesize(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes: Vec<Vec<f32>> = (0..=cfg.num_classes)
        .map(|_| unit_vector(&mut rng, cfg.feature_dim))
        .collect();
    let classes = (0..cfg.num_classes).map(|c| format!("class_{c}")).collect();
    let mut videos = Vec::with_capacity(cfg.num_train + cfg.num_test);
    for (subset, count, prefix) in [
        (Subset::Train, cfg.num_train, "train"),
        (Subset::Test, cfg.num_test, "test"),
    ] {
        for i in 0..count {
            videos.push(synth_video(
                &mut rng,
                cfg,
                &prototypes,
                format!("{prefix}_{i:03}"),
                subset,
            )?);
        }
    }
    Ok(SyntheticDataset {
        prototypes,
        classes,
        videos,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `manifest.json` and `features/*.d2ft` under `out_dir`.
///
/// Files are staged next to `out_dir` and moved in only once all of them
/// were written, so a failed run leaves nothing behind.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let data = synthesize(cfg)?;
    let parent = match out_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let staging = tempfile::Builder::new()
        .prefix(".synth-")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(&parent, e))?;
    let features = staging.path().join("features");
    fs::create_dir(&features).map_err(|e| Error::io(&features, e))?;
    for v in &data.videos {
        write_features(&staging.path().join(&v.record.rgb_path), &v.rgb)?;
        write_features(&staging.path().join(&v.record.flow_path), &v.flow)?;
    }
    let mut manifest = data.manifest();
    manifest.save(&staging.path().join(MANIFEST_FILE))?;

    let final_features = out_dir.join("features");
    fs::create_dir_all(&final_features).map_err(|e| Error::io(&final_features, e))?;
    for v in &data.videos {
        for rel in [&v.record.rgb_path, &v.record.flow_path] {
            let (from, to) = (staging.path().join(rel), out_dir.join(rel));
            fs::rename(&from, &to).map_err(|e| Error::io(&to, e))?;
        }
    }
    let target = out_dir.join(MANIFEST_FILE);
    fs::rename(staging.path().join(MANIFEST_FILE), &target).map_err(|e| Error::io(&target, e))?;
    manifest.root = out_dir.to_path_buf();
    Ok(manifest)
}
