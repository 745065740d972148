//! Proposal generation on a hand-made activation map: refinement, multi-
//! threshold proposals, outer-inner scoring, class-wise NMS.
//!
//! cargo run --example inference_walkthrough

use std::path::PathBuf;

use wtal::data::{Subset, VideoRecord};
use wtal::infer::{class_proposals, class_scores, detect, nms, refine, InferConfig};
use wtal::Matrix;

fn main() -> wtal::Result<()> {
    // 12 snippets, 2 classes; class 0 fires on 2..=5, class 1 weakly on 8..=9.
    let c0 = [0.1, 0.2, 0.8, 0.9, 0.85, 0.7, 0.2, 0.1, 0.1, 0.1, 0.1, 0.1];
    let c1 = [0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.2, 0.6, 0.5, 0.1, 0.1];
    let rows: Vec<[f64; 2]> = c0.iter().zip(&c1).map(|(&a, &b)| [a, b]).collect();
    let tcam = Matrix::from_rows(&rows);
    let lambda_prime = vec![0.9; 12];

    let cfg = InferConfig::default();
    let p = class_scores(&tcam)?;
    println!("video-level scores {p:?}");

    let r = refine(&tcam.column(0), &lambda_prime)?;
    let props = class_proposals(&r, 0, &cfg);
    println!("\nclass 0: {} distinct proposals over {} thresholds", props.len(), cfg.thresholds.len());
    for q in nms(&props, cfg.nms_iou) {
        println!("  kept [{}, {}] score {:.3}", q.start, q.end, q.score);
    }

    let record = VideoRecord {
        id: "demo".into(),
        fps: 25.0,
        num_snippets: 12,
        rgb_path: PathBuf::from("unused"),
        flow_path: PathBuf::from("unused"),
        labels: vec![0, 1],
        subset: Subset::Test,
        gt_segments: Vec::new(),
    };
    println!("\ndetections (seconds at 16 frames per snippet, 25 fps):");
    for d in detect(&tcam, &lambda_prime, &p, &record, 16, &cfg)? {
        println!(
            "  class {} [{:.2}, {:.2}) score {:.3}",
            d.class_id, d.start_sec, d.end_sec, d.score
        );
    }
    Ok(())
}
