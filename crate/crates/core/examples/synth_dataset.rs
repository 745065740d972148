//! Generates the synthetic benchmark, reads a feature file back and shows
//! what a video and its annotations look like.
//!
//! cargo run --example synth_dataset -- [out_dir]

use std::path::PathBuf;

use wtal::data::{generate_synthetic, read_feature_header, read_features, Subset, SynthConfig};

fn main() -> wtal::Result<()> {
    let tmp = tempfile::tempdir().map_err(|e| wtal::Error::io("tempdir", e))?;
    let out = std::env::args().nth(1).map_or_else(|| tmp.path().join("synth"), PathBuf::from);

    let cfg = SynthConfig::default();
    let manifest = generate_synthetic(&cfg, &out)?;
    println!(
        "{} classes, {} train / {} test videos in {}",
        manifest.classes.len(),
        manifest.videos_in(Subset::Train).count(),
        manifest.videos_in(Subset::Test).count(),
        out.display()
    );

    let v = manifest.videos_in(Subset::Test).next().expect("a test video");
    let rgb_path = manifest.resolve(&v.rgb_path);
    let (s, d) = read_feature_header(&rgb_path)?;
    println!("\n{}: {s} snippets x {d} dims, labels {:?}", v.id, v.labels);
    for g in &v.gt_segments {
        println!("  {} from {:.2}s to {:.2}s", manifest.classes[g.class_id], g.start, g.end);
    }
    let rgb = read_features(&rgb_path)?;
    let first: Vec<String> = rgb.values[..6].iter().map(|x| format!("{x:.3}")).collect();
    println!("  first rgb values {}", first.join(" "));

    let bytes = std::fs::read(&rgb_path).map_err(|e| wtal::Error::io(&rgb_path, e))?;
    println!("  header bytes {:?}", &bytes[..16]);
    Ok(())
}
