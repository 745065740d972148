//! Generate the default synthetic dataset, train the full model, detect
//! actions in the test videos and score them.
//!
//! cargo run --release --example train_and_evaluate -- [iterations] [seed]

use std::time::Instant;

use wtal::data::{generate_synthetic, Subset, SynthConfig, TrainingSet};
use wtal::eval::{evaluate_manifest, standard_ious};
use wtal::infer::{infer_manifest, InferConfig};
use wtal::model::ModelConfig;
use wtal::train::{train, TrainConfig};

fn main() -> wtal::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map_or(2000, |a| a.parse().expect("iterations"));
    let seed: u64 = args.next().map_or(0, |a| a.parse().expect("seed"));

    let dir = tempfile::tempdir().map_err(|e| wtal::Error::io("tempdir", e))?;
    let manifest = generate_synthetic(&SynthConfig::default(), dir.path())?;
    let set = TrainingSet::from_manifest(&manifest)?;

    let model = ModelConfig {
        seed,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        iterations,
        seed,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let outcome = train(&set, &model, &cfg, None)?;
    println!("trained {iterations} iterations in {:.1?}", start.elapsed());
    let (first, last) = (outcome.log[0].losses.total, outcome.log.last().unwrap().losses.total);
    println!("total loss {first:.4} -> {last:.4}");

    let ck = &outcome.checkpoint;
    let dets = infer_manifest(&manifest, Subset::Test, &ck.model, &ck.params, &ck.ema, &InferConfig::default())?;
    let mut ious = vec![0.1, 0.2, 0.3, 0.4];
    ious.extend(standard_ious());
    let report = evaluate_manifest(&dets, &manifest, &ious)?;
    println!("{} detections on the test split", dets.len());
    print!("{}", report.to_table());
    Ok(())
}
