//! Trains briefly, saves a checkpoint, reloads it and shows that a damaged
//! header is rejected with its byte offset.
//!
//! cargo run --release --example checkpoint_roundtrip

use wtal::checkpoint::Checkpoint;
use wtal::data::{generate_synthetic, SynthConfig, TrainingSet};
use wtal::model::ModelConfig;
use wtal::train::{train, TrainConfig, CHECKPOINT_FILE};

fn main() -> wtal::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| wtal::Error::io("tempdir", e))?;
    let manifest = generate_synthetic(&SynthConfig::default(), &dir.path().join("data"))?;
    let set = TrainingSet::from_manifest(&manifest)?;
    let cfg = TrainConfig {
        iterations: 20,
        ..TrainConfig::default()
    };
    let out = train(&set, &ModelConfig::default(), &cfg, Some(dir.path()))?;

    let path = dir.path().join(CHECKPOINT_FILE);
    let loaded = Checkpoint::load(&path)?;
    println!("reloaded checkpoint at iteration {}: identical = {}", loaded.iteration, loaded == out.checkpoint);

    let mut bytes = std::fs::read(&path).map_err(|e| wtal::Error::io(&path, e))?;
    bytes[4] = 9;
    match Checkpoint::decode(&bytes, &path) {
        Err(e) => println!("damaged version field: {e}"),
        Ok(_) => println!("unexpectedly accepted"),
    }
    bytes.truncate(100);
    bytes[4] = 1;
    if let Err(e) = Checkpoint::decode(&bytes, &path) {
        println!("truncated file: {e}");
    }
    Ok(())
}
