//! Samples random snippet-level joint distributions and relates their log
//! condition number to log |det|.
//!
//! cargo run --release --example pdmi_study -- [samples] [out.csv]

use std::path::Path;

use wtal::study::{run_study, StudyConfig};

fn main() -> wtal::Result<()> {
    let mut args = std::env::args().skip(1);
    let num_samples = args.next().map_or(10_000, |a| a.parse().expect("sample count"));
    let cfg = StudyConfig {
        num_samples,
        plant_identity: true,
        ..StudyConfig::default()
    };
    let result = run_study(&cfg)?;
    println!("{} samples, pearson = {:.4}", result.samples.len(), result.pearson);
    println!("planted optimum: {:?}", result.samples[0]);

    // Coarse histogram of log|det| per log-eta bucket.
    let mut buckets = [(0usize, 0.0f64); 6];
    for s in &result.samples {
        let b = ((s.log_eta / 1.5) as usize).min(buckets.len() - 1);
        buckets[b].0 += 1;
        buckets[b].1 += s.log_abs_det;
    }
    for (i, (n, sum)) in buckets.iter().enumerate() {
        if *n > 0 {
            println!(
                "log eta in [{:.1}, {:.1}): {n:>5} samples, mean log|det| {:.3}",
                1.5 * i as f64,
                1.5 * (i + 1) as f64,
                sum / *n as f64
            );
        }
    }
    if let Some(path) = args.next() {
        result.write_csv(Path::new(&path))?;
        println!("wrote {path}");
    }
    Ok(())
}
