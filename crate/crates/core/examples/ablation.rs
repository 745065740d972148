//! The four-row loss ladder (cross-entropy, focal, discriminative, full)
//! on the default synthetic benchmark.
//!
//! cargo run --release --example ablation -- [iterations] [seeds]

use wtal::ablation::{run_ablation, Variant};
use wtal::data::{generate_synthetic, SynthConfig};
use wtal::infer::InferConfig;
use wtal::model::ModelConfig;
use wtal::train::TrainConfig;

fn main() -> wtal::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut args = std::env::args().skip(1);
    let iterations = args.next().map_or(500, |a| a.parse().expect("iterations"));
    let num_seeds: u64 = args.next().map_or(1, |a| a.parse().expect("seed count"));

    let dir = tempfile::tempdir().map_err(|e| wtal::Error::io("tempdir", e))?;
    let manifest = generate_synthetic(&SynthConfig::default(), dir.path())?;
    let seeds: Vec<u64> = (0..num_seeds).collect();
    let train = TrainConfig {
        iterations,
        ..TrainConfig::default()
    };
    let report = run_ablation(
        &manifest,
        &Variant::LADDER,
        &seeds,
        &ModelConfig::default(),
        &train,
        &InferConfig::default(),
    )?;
    print!("{}", report.to_table());
    Ok(())
}
