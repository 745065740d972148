//! Feature files, manifests, the synthetic generator and batch sampling.

pub mod features;
pub mod manifest;
pub mod synth;

use rand::seq::index;
use rand::Rng;

pub use features::{read_feature_header, read_features, write_features, FeatureMatrix};
pub use manifest::{
    seconds_to_snippet, snippet_to_seconds, DatasetManifest, GtSegment, Subset, TrainVideo,
    TrainingSet, VideoRecord,
};
pub use synth::{generate_synthetic, synthesize, SynthConfig, SyntheticDataset, MANIFEST_FILE};

use crate::error::{Error, Result};

/// Indices of `batch_size` distinct training videos, uniformly at random.
pub fn sample_indices<R: Rng + ?Sized>(
    num_videos: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if batch_size == 0 || batch_size > num_videos {
        return Err(Error::Config(format!(
            "batch size {batch_size} with {num_videos} training videos"
        )));
    }
    Ok(index::sample(rng, num_videos, batch_size).into_vec())
}

pub fn sample_batch<'a, R: Rng + ?Sized>(
    set: &'a TrainingSet,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<&'a TrainVideo>> {
    Ok(sample_indices(set.len(), batch_size, rng)?
        .into_iter()
        .map(|i| &set.videos[i])
        .collect())
}
