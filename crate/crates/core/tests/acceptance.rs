//! One line per acceptance criterion, then a single verdict.
//!
//! Lines go straight to stderr so they show up without `--nocapture`.

mod common;

use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use common::*;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wtal::ablation::{run_ablation, Variant};
use wtal::checkpoint::Checkpoint;
use wtal::data::{generate_synthetic, synthesize, FeatureMatrix, Subset, SynthConfig, VideoRecord};
use wtal::eval::{evaluate, GroundTruth};
use wtal::gradcheck::{run_suites, SuiteConfig};
use wtal::infer::{class_scores, detect, nms, InferConfig};
use wtal::linalg::DEFAULT_RANK_TOL;
use wtal::losses::{discriminative_loss, EmaRef, LossConfig, VideoLossState};
use wtal::model::{ForwardOutput, ModelConfig, ModelParams};
use wtal::study::{run_study, StudyConfig};
use wtal::train::{OptimizerState, TrainConfig};
use wtal::{svd_small, Matrix, Tape};

/// Full-model mAP@0.5 floor. The nearest-prototype oracle, which knows the
/// class prototypes, reaches 0.968 on the default synthetic test split; the
/// floor asks the weakly supervised model for about half of that.
const FULL_MAP_FLOOR: f64 = 0.5;
const FULL_OVER_FOCAL_MARGIN: f64 = 0.02;
const ABLATION_SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    hard_failures: Vec<String>,
}

impl Verdict {
    fn report(&mut self, name: &str, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        let _ = writeln!(std::io::stderr(), "[{tag}] {name}: {detail}");
        if !pass {
            self.hard_failures.push(name.to_string());
        }
    }

    fn soft(&mut self, name: &str, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "SOFT-FAIL (logged)" };
        let _ = writeln!(std::io::stderr(), "[{tag}] {name}: {detail}");
    }
}

fn gradient_suite(v: &mut Verdict) {
    let start = Instant::now();
    let results = run_suites(&SuiteConfig::default()).unwrap();
    let elapsed = start.elapsed();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let components = ["loss/discriminative", "loss/pdmi_snippet", "loss/pdmi_video", "loss/total_end_to_end"];
    let covered = components
        .iter()
        .all(|c| results.iter().any(|r| r.name == *c && r.seeds == 3 && r.coordinates >= 20));
    v.report(
        "gradient suite",
        failed.is_empty() && covered && elapsed < Duration::from_secs(60),
        format!(
            "{} checks x 3 seeds x 20 coords, worst rel err {worst:.2e} (< 1e-4), failed {failed:?}, {elapsed:.1?}",
            results.len()
        ),
    );
}

fn pdmi_optimum_and_trend(v: &mut Verdict) {
    let start = Instant::now();
    let mut tape = Tape::new();
    let mut exact = true;
    for n in [2, 3] {
        for c in [0.5, 1.0, 3.0] {
            let x = tape.constant(Matrix::identity(n).scale(c));
            let eta = tape.log_condition_number(x, DEFAULT_RANK_TOL).unwrap();
            exact &= tape.scalar(eta) == 0.0;
        }
    }
    let study = run_study(&StudyConfig::default()).unwrap();
    let elapsed = start.elapsed();
    v.report(
        "pDMI optimum and trend",
        exact && study.samples.len() == 10_000 && study.pearson <= -0.5 && elapsed < Duration::from_secs(30),
        format!(
            "log cond(cI) == 0 exactly: {exact}; pearson over {} samples {:.4} (<= -0.5); {elapsed:.1?}",
            study.samples.len(),
            study.pearson
        ),
    );
}

/// Embeddings for foreground snippets live in the first two dimensions and
/// background ones in the last two, so every foreground/background cosine is
/// exactly zero and so is the `w_fb` penalty.
fn chain_batch(rng: &mut ChaCha8Rng, tape: &mut Tape, cfg: &LossConfig) -> (Vec<VideoLossState>, Vec<usize>) {
    let n = rng.random_range(2..7);
    let c = rng.random_range(2..6);
    let mut batch = Vec::new();
    for _ in 0..n {
        let s = rng.random_range(4..20);
        let mut tcam = Matrix::zeros(s, c);
        for t in 0..s {
            for k in 0..c {
                tcam[(t, k)] = rng.random_range(0.02..0.98);
            }
        }
        tcam[(0, 0)] = 0.9;
        for k in 0..c {
            tcam[(1, k)] = rng.random_range(0.02..0.3);
        }
        let mut emb = Matrix::zeros(s, 4);
        for t in 0..s {
            let fg = tcam.row(t).iter().cloned().fold(0.0, f64::max) > 0.5;
            let off = if fg { 0 } else { 2 };
            emb[(t, off)] = rng.random_range(0.1..1.0);
            emb[(t, off + 1)] = rng.random_range(0.1..1.0);
        }
        let mut labels: Vec<bool> = (0..c).map(|_| rng.random_bool(0.4)).collect();
        labels[rng.random_range(0..c)] = true;
        let forward = ForwardOutput {
            embeddings: tape.leaf(emb),
            tcam: tape.leaf(tcam),
        };
        let ema = EmaRef::new(4);
        batch.push(VideoLossState::new(tape, forward, labels, &ema, cfg).unwrap());
    }
    let pairing = (0..n).map(|i| (i + 1) % n).collect();
    (batch, pairing)
}

/// Plain per-video focal loss from the pooled predictions.
fn focal_oracle(tape: &Tape, batch: &[VideoLossState], beta: f64) -> f64 {
    let mut total = 0.0;
    for v in batch {
        let p = tape.value(v.prediction).as_slice();
        for (&pc, &y) in p.iter().zip(&v.labels) {
            total -= if y {
                (1.0 - pc).powf(beta) * pc.ln()
            } else {
                pc.powf(beta) * (1.0 - pc).ln()
            };
        }
    }
    total / batch.len() as f64
}

fn bce_oracle(tape: &Tape, batch: &[VideoLossState]) -> f64 {
    let mut total = 0.0;
    for v in batch {
        for (&pc, &y) in tape.value(v.prediction).as_slice().iter().zip(&v.labels) {
            let yf = f64::from(u8::from(y));
            total -= yf * pc.ln() + (1.0 - yf) * (1.0 - pc).ln();
        }
    }
    total / batch.len() as f64
}

fn loss_reduction_chain(v: &mut Verdict) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut tape = Tape::new();
        let dis = LossConfig {
            gamma: 0.0,
            ..LossConfig::discriminative_only()
        };
        let (batch, pairing) = chain_batch(&mut rng, &mut tape, &dis);
        let l_dis = discriminative_loss(&mut tape, &batch, &pairing, &dis).unwrap();
        let l_dis = tape.scalar(l_dis);
        let focal = LossConfig {
            gamma: 0.0,
            ..LossConfig::focal()
        };
        let l_focal = discriminative_loss(&mut tape, &batch, &pairing, &focal).unwrap();
        let l_focal = tape.scalar(l_focal);
        let oracle_focal = focal_oracle(&tape, &batch, dis.beta);

        let dis0 = LossConfig { beta: 0.0, ..dis.clone() };
        let l_dis0 = discriminative_loss(&mut tape, &batch, &pairing, &dis0).unwrap();
        let l_dis0 = tape.scalar(l_dis0);
        let l_ce = discriminative_loss(&mut tape, &batch, &pairing, &LossConfig::cross_entropy()).unwrap();
        let l_ce = tape.scalar(l_ce);
        let oracle_bce = bce_oracle(&tape, &batch);
        for (a, b) in [(l_dis, l_focal), (l_dis, oracle_focal), (l_dis0, l_ce), (l_dis0, oracle_bce)] {
            worst = worst.max((a - b).abs());
        }
    }
    v.report(
        "loss-reduction chain",
        worst <= 1e-12,
        format!("100 batches, max |difference| {worst:.2e} (<= 1e-12)"),
    );
}

fn svd_correctness(v: &mut Verdict) {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (mut recon, mut rel): (f64, f64) = (0.0, 0.0);
    for _ in 0..1000 {
        let (m, n) = (rng.random_range(1..=20), rng.random_range(1..=20));
        let a = Matrix::new(m, n, (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let svd = svd_small(&a, DEFAULT_RANK_TOL).unwrap();
        recon = recon.max(svd.reconstruct().max_abs_diff(&a) / a.frobenius_norm().max(1.0));
        let na = DMatrix::from_row_slice(m, n, a.as_slice());
        let gram = if m >= n { na.transpose() * &na } else { &na * na.transpose() };
        let mut eig: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(|x, y| y.total_cmp(x));
        for (i, s) in svd.singular_values.iter().enumerate() {
            rel = rel.max((s * s - eig[i]).abs() / eig[i].abs());
        }
    }
    v.report(
        "SVD correctness",
        recon <= 1e-10 && rel < 1e-9,
        format!("1000 matrices up to 20x20: reconstruction {recon:.2e}·max(1,|U|_F) (<= 1e-10), sigma^2 rel err {rel:.2e} (< 1e-9)"),
    );
}

fn evaluation_oracle(v: &mut Verdict) {
    let fixtures = eval_fixtures();
    let mismatches: Vec<String> = fixtures.iter().filter_map(|f| check_fixture(f).err()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let ious: Vec<f64> = (1..20).map(|i| f64::from(i) / 20.0).collect();
    let mut monotone = true;
    for _ in 0..200 {
        let gts: Vec<_> = (0..rng.random_range(1..10))
            .map(|_| {
                let s = rng.random_range(0.0..80.0);
                gt_instance("v", rng.random_range(0..3), s, s + rng.random_range(1.0..20.0))
            })
            .collect();
        let dets: Vec<_> = (0..rng.random_range(0..20))
            .map(|_| {
                let s = rng.random_range(0.0..80.0);
                det("v", rng.random_range(0..3), s, s + rng.random_range(1.0..20.0), rng.random_range(0.0..1.0))
            })
            .collect();
        let r = evaluate(&dets, &ground_truth(3, &["v"], gts), &ious).unwrap();
        let maps: Vec<f64> = ious.iter().map(|&t| r.map_at(t).unwrap()).collect();
        monotone &= maps.windows(2).all(|w| w[1] <= w[0]);
    }
    v.report(
        "evaluation oracle",
        mismatches.is_empty() && fixtures.len() == 10 && monotone,
        format!("{} hand fixtures, mismatches {mismatches:?}; mAP non-increasing in IoU on 200 random sets: {monotone}", fixtures.len()),
    );
}

fn inference_properties(v: &mut Verdict) {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = InferConfig::default();
    let mut deterministic = true;
    let mut separated = true;
    for i in 0..50 {
        let (s, c) = (rng.random_range(5..60), rng.random_range(2..6));
        let tcam = Matrix::new(s, c, (0..s * c).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let lp: Vec<f64> = (0..s).map(|_| rng.random_range(0.0..1.0)).collect();
        let record = VideoRecord {
            id: format!("v{i}"),
            fps: 25.0,
            num_snippets: s,
            rgb_path: "r".into(),
            flow_path: "f".into(),
            labels: vec![0],
            subset: Subset::Test,
            gt_segments: Vec::new(),
        };
        let p = class_scores(&tcam).unwrap();
        let a = detect(&tcam, &lp, &p, &record, 16, &cfg).unwrap();
        let b = detect(&tcam.clone(), &lp.clone(), &p, &record, 16, &cfg).unwrap();
        let bits = |d: &[wtal::infer::Detection]| -> Vec<(usize, u64, u64, u64)> {
            d.iter()
                .map(|x| (x.class_id, x.start_sec.to_bits(), x.end_sec.to_bits(), x.score.to_bits()))
                .collect()
        };
        deterministic &= bits(&a) == bits(&b);
        for (j, x) in a.iter().enumerate() {
            for y in &a[j + 1..] {
                if x.class_id == y.class_id {
                    let o = wtal::eval::tiou((x.start_sec, x.end_sec), (y.start_sec, y.end_sec)).unwrap();
                    separated &= o <= cfg.nms_iou + 1e-12;
                }
            }
        }
    }
    let mut idempotent = true;
    for _ in 0..1000 {
        let n = rng.random_range(0..25);
        let props = random_proposals(&mut rng, n, 50);
        let once = nms(&props, 0.5);
        idempotent &= nms(&once, 0.5) == once;
        for (j, a) in once.iter().enumerate() {
            for b in &once[j + 1..] {
                separated &= snippet_iou(a, b) <= 0.5;
            }
        }
    }
    v.report(
        "inference determinism and NMS",
        deterministic && idempotent && separated,
        format!("detect bit-identical: {deterministic}; NMS idempotent on 1000 sets: {idempotent}; post-NMS same-class tIoU <= 0.5: {separated}"),
    );
}

fn round_trip_io(v: &mut Verdict) {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let values: Vec<f32> = (0..12 * 32).map(|_| rng.random_range(-3.0f32..3.0)).collect();
    let f = FeatureMatrix::new(12, 32, values).unwrap();
    let fp = dir.path().join("x.d2ft");
    wtal::data::write_features(&fp, &f).unwrap();
    let features_ok = wtal::data::read_features(&fp).unwrap() == f
        && std::fs::read(&fp).unwrap() == f.encode();

    let model = ModelConfig::default();
    let mut ema = EmaRef::new(model.embedding_dim());
    ema.x_ref.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    let ck = Checkpoint {
        params: ModelParams::init(&model).unwrap(),
        optimizer: OptimizerState::new(&model),
        ema,
        iteration: 2000,
        model,
    };
    let cp = dir.path().join("m.d2ck");
    ck.save(&cp).unwrap();
    let ck_ok = Checkpoint::load(&cp).unwrap() == ck && std::fs::read(&cp).unwrap() == ck.encode();

    let located = |r: wtal::Result<()>, want: u64| matches!(r, Err(wtal::Error::Format { offset, .. }) if offset == want);
    let mut bad = f.encode();
    bad[0] = 0;
    let mut diagnostics = located(FeatureMatrix::decode(&bad, Path::new("x")).map(|_| ()), 0);
    let mut bad = f.encode();
    bad[4] = 7;
    diagnostics &= located(FeatureMatrix::decode(&bad, Path::new("x")).map(|_| ()), 4);
    let mut bad = ck.encode();
    bad[3] = 0;
    diagnostics &= located(Checkpoint::decode(&bad, Path::new("m")).map(|_| ()), 0);
    let mut bad = ck.encode();
    bad[4] = 2;
    diagnostics &= located(Checkpoint::decode(&bad, Path::new("m")).map(|_| ()), 4);
    let good = ck.encode();
    diagnostics &= located(Checkpoint::decode(&good[..40], Path::new("m")).map(|_| ()), 40);
    v.report(
        "round-trip I/O",
        features_ok && ck_ok && diagnostics,
        format!("features bit-exact: {features_ok}; checkpoint bit-exact: {ck_ok}; damaged headers located: {diagnostics}"),
    );
}

fn ablation(v: &mut Verdict) {
    let oracle = {
        let data = synthesize(&SynthConfig::default()).unwrap();
        let gt = GroundTruth::from_manifest(&data.manifest(), Subset::Test);
        evaluate(&nearest_prototype_detections(&data), &gt, &[0.5]).unwrap().map_at(0.5).unwrap()
    };
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic(&SynthConfig::default(), dir.path()).unwrap();
    let train = TrainConfig::default();
    assert_eq!(train.iterations, 2000);
    let model = ModelConfig::default();
    let infer = InferConfig::default();

    let start = Instant::now();
    let ladder = run_ablation(&manifest, &Variant::LADDER, &ABLATION_SEEDS, &model, &train, &infer).unwrap();
    let elapsed = start.elapsed();
    for line in ladder.to_table().lines() {
        let _ = writeln!(std::io::stderr(), "       {line}");
    }
    let m = |x| ladder.mean_map(x).unwrap();
    let (ce, focal, dis, full) = (
        m(Variant::CrossEntropy),
        m(Variant::Focal),
        m(Variant::Discriminative),
        m(Variant::Full),
    );
    let checks = [
        ("CE <= focal", ce <= focal),
        ("focal <= L_Dis", focal <= dis),
        ("L_Dis <= full", dis <= full),
        ("full >= focal + 0.02", full >= focal + FULL_OVER_FOCAL_MARGIN),
        ("full >= floor", full >= FULL_MAP_FLOOR),
        ("runtime < 15 min", elapsed < Duration::from_secs(15 * 60)),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    v.report(
        "ablation trend",
        failed.is_empty(),
        format!(
            "mean mAP@0.5 CE {ce:.4}, focal {focal:.4}, L_Dis {dis:.4}, full {full:.4}; floor {FULL_MAP_FLOOR} (oracle {oracle:.3}); {elapsed:.1?}; failed {failed:?}"
        ),
    );

    let denoisers = run_ablation(&manifest, &[Variant::L1, Variant::Bce], &ABLATION_SEEDS, &model, &train, &infer).unwrap();
    let (l1, bce) = (denoisers.mean_map(Variant::L1).unwrap(), denoisers.mean_map(Variant::Bce).unwrap());
    v.soft(
        "denoising-variant sanity",
        full >= l1 && full >= bce,
        format!("mean mAP@0.5 pDMI {full:.4}, l1 {l1:.4}, bce {bce:.4}"),
    );
}

#[test]
fn acceptance() {
    let mut v = Verdict {
        hard_failures: Vec::new(),
    };
    gradient_suite(&mut v);
    pdmi_optimum_and_trend(&mut v);
    loss_reduction_chain(&mut v);
    svd_correctness(&mut v);
    evaluation_oracle(&mut v);
    inference_properties(&mut v);
    round_trip_io(&mut v);
    ablation(&mut v);
    assert!(v.hard_failures.is_empty(), "failed criteria: {:?}", v.hard_failures);
}
