//! Feature files and checkpoints: bit-exact round trips and precise
//! rejection of damaged files.

use std::fs;

use wtal::checkpoint::Checkpoint;
use wtal::data::{read_features, write_features, FeatureMatrix};
use wtal::losses::EmaRef;
use wtal::model::{ModelConfig, ModelParams};
use wtal::train::OptimizerState;
use wtal::Error;

fn checkpoint() -> Checkpoint {
    let model = ModelConfig {
        feature_dim: 4,
        num_classes: 2,
        ..ModelConfig::default()
    };
    Checkpoint {
        params: ModelParams::init(&model).unwrap(),
        optimizer: OptimizerState::new(&model),
        ema: EmaRef::new(2),
        iteration: 7,
        model,
    }
}

fn format_offset(e: Error) -> (u64, String) {
    match e {
        Error::Format { offset, detail, .. } => (offset, detail),
        other => panic!("expected a format error, got {other}"),
    }
}

#[test]
fn features_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.d2ft");
    let values: Vec<f32> = (0..21).map(|i| (i as f32).sin() * 1e3).collect();
    let f = FeatureMatrix::new(7, 3, values).unwrap();
    write_features(&p, &f).unwrap();
    let back = read_features(&p).unwrap();
    assert_eq!(back, f);
    assert_eq!(fs::read(&p).unwrap(), f.encode());
}

#[test]
fn damaged_feature_headers_are_located() {
    let f = FeatureMatrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let good = f.encode();
    let p = std::path::Path::new("f.d2ft");

    let mut bad = good.clone();
    bad[1] = b'X';
    assert_eq!(format_offset(FeatureMatrix::decode(&bad, p).unwrap_err()).0, 0);

    let mut bad = good.clone();
    bad[4] = 2;
    assert_eq!(format_offset(FeatureMatrix::decode(&bad, p).unwrap_err()).0, 4);

    let mut bad = good.clone();
    bad[8..12].copy_from_slice(&0u32.to_le_bytes());
    assert_eq!(format_offset(FeatureMatrix::decode(&bad, p).unwrap_err()).0, 8);

    let (off, detail) = format_offset(FeatureMatrix::decode(&good[..good.len() - 1], p).unwrap_err());
    assert_eq!(off as usize, good.len() - 1);
    assert!(detail.contains("truncated"), "{detail}");

    let mut long = good.clone();
    long.push(0);
    assert_eq!(format_offset(FeatureMatrix::decode(&long, p).unwrap_err()).0 as usize, good.len());
}

#[test]
fn checkpoints_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.d2ck");
    let ck = checkpoint();
    ck.save(&p).unwrap();
    let back = Checkpoint::load(&p).unwrap();
    assert_eq!(back, ck);
    assert_eq!(fs::read(&p).unwrap(), ck.encode());
}

#[test]
fn damaged_checkpoints_are_located() {
    let good = checkpoint().encode();
    let p = std::path::Path::new("m.d2ck");

    let mut bad = good.clone();
    bad[0] = b'X';
    let (off, detail) = format_offset(Checkpoint::decode(&bad, p).unwrap_err());
    assert_eq!(off, 0);
    assert!(detail.contains("magic"));

    let mut bad = good.clone();
    bad[4] = 3;
    assert_eq!(format_offset(Checkpoint::decode(&bad, p).unwrap_err()).0, 4);

    // Odd feature width fails config validation at the config offset.
    let mut bad = good.clone();
    bad[8..12].copy_from_slice(&5u32.to_le_bytes());
    let (off, detail) = format_offset(Checkpoint::decode(&bad, p).unwrap_err());
    assert_eq!(off, 8);
    assert!(detail.contains("feature_dim"), "{detail}");

    // First parameter array claims the wrong row count.
    let mut bad = good.clone();
    let first_array = 8 + 4 * 4 + 8 + 8 + 4;
    bad[first_array..first_array + 4].copy_from_slice(&99u32.to_le_bytes());
    let (off, detail) = format_offset(Checkpoint::decode(&bad, p).unwrap_err());
    assert_eq!(off as usize, first_array);
    assert!(detail.contains("shape"), "{detail}");

    let (off, _) = format_offset(Checkpoint::decode(&good[..50], p).unwrap_err());
    assert_eq!(off, 50);

    let mut long = good.clone();
    long.extend_from_slice(&[0, 0]);
    let (off, detail) = format_offset(Checkpoint::decode(&long, p).unwrap_err());
    assert_eq!(off as usize, good.len());
    assert!(detail.contains("trailing"));
}
