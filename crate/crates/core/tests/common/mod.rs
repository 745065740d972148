//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use wtal::data::{Subset, SyntheticDataset};
use wtal::eval::{GroundTruth, GtInstance};
use wtal::infer::{Detection, Proposal};

pub fn det(video: &str, class_id: usize, s: f64, e: f64, score: f64) -> Detection {
    Detection {
        video_id: video.into(),
        class_id,
        start_sec: s,
        end_sec: e,
        score,
    }
}

pub fn gt_instance(video: &str, class_id: usize, s: f64, e: f64) -> GtInstance {
    GtInstance {
        video_id: video.into(),
        class_id,
        start: s,
        end: e,
    }
}

pub fn ground_truth(num_classes: usize, videos: &[&str], instances: Vec<GtInstance>) -> GroundTruth {
    GroundTruth {
        classes: (0..num_classes).map(|c| format!("c{c}")).collect(),
        videos: videos.iter().map(|v| v.to_string()).collect::<BTreeSet<_>>(),
        instances,
    }
}

/// A hand-scored evaluation case. `maps` holds `(iou, expected mAP)`.
pub struct EvalFixture {
    pub name: &'static str,
    pub gt: GroundTruth,
    pub dets: Vec<Detection>,
    pub maps: Vec<(f64, f64)>,
    pub f1: f64,
}

/// Ten small cases with values worked out by hand (see each comment).
pub fn eval_fixtures() -> Vec<EvalFixture> {
    vec![
        // One perfect hit.
        EvalFixture {
            name: "perfect_hit",
            gt: ground_truth(1, &["v"], vec![gt_instance("v", 0, 0.0, 10.0)]),
            dets: vec![det("v", 0, 0.0, 10.0, 0.9)],
            maps: vec![(0.5, 1.0), (0.95, 1.0)],
            f1: 1.0,
        },
        // Disjoint detection: tp 0, fp 1, fn 1.
        EvalFixture {
            name: "complete_miss",
            gt: ground_truth(1, &["v"], vec![gt_instance("v", 0, 0.0, 10.0)]),
            dets: vec![det("v", 0, 20.0, 30.0, 0.9)],
            maps: vec![(0.5, 0.0)],
            f1: 0.0,
        },
        // FP ranked first: precisions 0, 1/2, 2/3 at recalls 0, 1/2, 1;
        // envelope 2/3 everywhere so AP = 2/3. F1 = 4/5.
        EvalFixture {
            name: "false_positive_first",
            gt: ground_truth(
                1,
                &["v"],
                vec![gt_instance("v", 0, 0.0, 10.0), gt_instance("v", 0, 20.0, 30.0)],
            ),
            dets: vec![
                det("v", 0, 40.0, 50.0, 0.9),
                det("v", 0, 0.0, 10.0, 0.8),
                det("v", 0, 20.0, 30.0, 0.7),
            ],
            maps: vec![(0.5, 2.0 / 3.0)],
            f1: 0.8,
        },
        // Second detection of the same instance is an FP after full recall.
        EvalFixture {
            name: "duplicate_detection",
            gt: ground_truth(1, &["v"], vec![gt_instance("v", 0, 0.0, 10.0)]),
            dets: vec![det("v", 0, 0.0, 10.0, 0.9), det("v", 0, 1.0, 10.0, 0.8)],
            maps: vec![(0.5, 1.0)],
            f1: 2.0 / 3.0,
        },
        // tIoU 0.6: a hit at 0.5 and 0.6, a miss at 0.7.
        EvalFixture {
            name: "threshold_boundary",
            gt: ground_truth(1, &["v"], vec![gt_instance("v", 0, 0.0, 10.0)]),
            dets: vec![det("v", 0, 0.0, 6.0, 0.9)],
            maps: vec![(0.5, 1.0), (0.6, 1.0), (0.7, 0.0)],
            f1: 1.0,
        },
        // Class 0 perfect, class 1 at tIoU 1/3: mAP 1/2, F1 2/4.
        EvalFixture {
            name: "two_classes",
            gt: ground_truth(
                2,
                &["v"],
                vec![gt_instance("v", 0, 0.0, 10.0), gt_instance("v", 1, 0.0, 10.0)],
            ),
            dets: vec![det("v", 0, 0.0, 10.0, 0.9), det("v", 1, 5.0, 15.0, 0.8)],
            maps: vec![(0.5, 0.5), (0.3, 1.0)],
            f1: 0.5,
        },
        // Class 1 has detections but no ground truth: excluded from mAP,
        // but its detection is a pooled FP (F1 2/3).
        EvalFixture {
            name: "class_without_ground_truth",
            gt: ground_truth(2, &["v"], vec![gt_instance("v", 0, 0.0, 10.0)]),
            dets: vec![det("v", 0, 0.0, 10.0, 0.9), det("v", 1, 0.0, 10.0, 0.95)],
            maps: vec![(0.5, 1.0)],
            f1: 2.0 / 3.0,
        },
        // Right span, wrong video.
        EvalFixture {
            name: "wrong_video",
            gt: ground_truth(1, &["a", "b"], vec![gt_instance("a", 0, 0.0, 10.0)]),
            dets: vec![det("b", 0, 0.0, 10.0, 0.9)],
            maps: vec![(0.5, 0.0)],
            f1: 0.0,
        },
        // First detection overlaps A by 3/19 and B by 11/13, so it takes B;
        // the second then takes A (tIoU 0.9). AP 1.
        EvalFixture {
            name: "best_overlap_wins",
            gt: ground_truth(
                1,
                &["v"],
                vec![gt_instance("v", 0, 0.0, 10.0), gt_instance("v", 0, 8.0, 20.0)],
            ),
            dets: vec![det("v", 0, 7.0, 19.0, 0.9), det("v", 0, 0.0, 9.0, 0.8)],
            maps: vec![(0.5, 1.0)],
            f1: 1.0,
        },
        // TP, FP, FP, TP against 3 gts: precisions 1, 1/2, 1/3, 1/2 at
        // recalls 1/3, 1/3, 1/3, 2/3. AP = 1/3·1 + 1/3·1/2 = 1/2. F1 = 4/7.
        EvalFixture {
            name: "interpolated_envelope",
            gt: ground_truth(
                1,
                &["v"],
                vec![
                    gt_instance("v", 0, 0.0, 10.0),
                    gt_instance("v", 0, 20.0, 30.0),
                    gt_instance("v", 0, 40.0, 50.0),
                ],
            ),
            dets: vec![
                det("v", 0, 0.0, 10.0, 0.9),
                det("v", 0, 60.0, 70.0, 0.8),
                det("v", 0, 80.0, 90.0, 0.7),
                det("v", 0, 20.0, 30.0, 0.6),
            ],
            maps: vec![(0.5, 0.5)],
            f1: 4.0 / 7.0,
        },
    ]
}

/// Checks one fixture; returns a description of the first mismatch.
pub fn check_fixture(f: &EvalFixture) -> Result<(), String> {
    let ious: Vec<f64> = f.maps.iter().map(|&(t, _)| t).collect();
    let report = wtal::eval::evaluate(&f.dets, &f.gt, &ious).map_err(|e| e.to_string())?;
    for &(iou, want) in &f.maps {
        let got = report.map_at(iou).ok_or("missing IoU")?;
        if (got - want).abs() > 1e-12 {
            return Err(format!("{}: mAP@{iou} = {got}, expected {want}", f.name));
        }
    }
    if (report.f1_at_05 - f.f1).abs() > 1e-12 {
        return Err(format!("{}: F1 = {}, expected {}", f.name, report.f1_at_05, f.f1));
    }
    Ok(())
}

fn interval_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    inter / ((a.1 - a.0) + (b.1 - b.0) - inter)
}

/// AP by summing, at every true positive, `max precision at or beyond it`
/// divided by the number of ground truths. Matching scans detections in
/// score order and picks the best still-free instance.
pub fn ap_oracle(dets: &[Detection], gts: &[GtInstance], iou: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.video_id.cmp(&b.video_id))
            .then_with(|| a.start_sec.partial_cmp(&b.start_sec).unwrap())
    });
    let mut taken = vec![false; gts.len()];
    let mut hits = Vec::new();
    for d in &order {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(j, g)| !taken[*j] && g.video_id == d.video_id && g.class_id == d.class_id)
            .map(|(j, g)| (j, interval_iou((d.start_sec, d.end_sec), (g.start, g.end))))
            .filter(|&(_, o)| o >= iou)
            .fold(None::<(usize, f64)>, |acc, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            });
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        hits.push(best.is_some());
    }
    let n = hits.len();
    let precision: Vec<f64> = (0..n)
        .map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
        .collect();
    (0..n)
        .filter(|&k| hits[k])
        .map(|k| precision[k..].iter().cloned().fold(0.0, f64::max) / gts.len() as f64)
        .sum()
}

/// Brute-force NMS: repeatedly take the best remaining proposal and drop
/// everything overlapping it by more than `thr`.
pub fn nms_oracle(props: &[Proposal], thr: f64) -> Vec<Proposal> {
    let mut left: Vec<Proposal> = props.to_vec();
    let mut kept = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            let (a, b) = (&left[i], &left[best]);
            let better = a.score > b.score
                || (a.score == b.score && a.start < b.start)
                || (a.score == b.score && a.start == b.start && a.end > b.end);
            if better {
                best = i;
            }
        }
        let top = left.swap_remove(best);
        left.retain(|p| snippet_iou(p, &top) <= thr);
        kept.push(top);
    }
    kept
}

pub fn snippet_iou(a: &Proposal, b: &Proposal) -> f64 {
    let inter = (a.end.min(b.end) as i64 - a.start.max(b.start) as i64 + 1).max(0) as f64;
    let union = (a.end - a.start + 1 + b.end - b.start + 1) as f64 - inter;
    inter / union
}

pub fn random_proposals<R: Rng>(rng: &mut R, n: usize, len: usize) -> Vec<Proposal> {
    (0..n)
        .map(|_| {
            let start = rng.random_range(0..len);
            let end = rng.random_range(start..len);
            Proposal {
                class_id: 0,
                start,
                end,
                // Coarse scores so ties actually occur.
                score: f64::from(rng.random_range(0..20u32)) / 20.0,
                threshold: 0.5,
            }
        })
        .collect()
}

/// Labels every snippet of every test video with its nearest prototype
/// (by the mean of both streams) and reports maximal same-class runs.
pub fn nearest_prototype_detections(data: &SyntheticDataset) -> Vec<Detection> {
    let background = data.prototypes.len() - 1;
    let mut out = Vec::new();
    for v in data.videos.iter().filter(|v| v.record.subset == Subset::Test) {
        let (s, d) = (v.rgb.snippets, v.rgb.dim);
        let mut owner = Vec::with_capacity(s);
        for t in 0..s {
            let x: Vec<f64> = (0..d)
                .map(|k| 0.5 * (f64::from(v.rgb.values[t * d + k]) + f64::from(v.flow.values[t * d + k])))
                .collect();
            let dist = |p: &Vec<f32>| -> f64 {
                x.iter().zip(p).map(|(a, &b)| (a - f64::from(b)).powi(2)).sum()
            };
            let best = (0..data.prototypes.len())
                .min_by(|&a, &b| dist(&data.prototypes[a]).total_cmp(&dist(&data.prototypes[b])))
                .unwrap();
            owner.push(best);
        }
        let sec = |i: usize| wtal::data::snippet_to_seconds(i as f64, 16, v.record.fps);
        let mut t = 0;
        while t < s {
            let k = owner[t];
            let mut e = t;
            while e + 1 < s && owner[e + 1] == k {
                e += 1;
            }
            if k != background {
                out.push(det(&v.record.id, k, sec(t), sec(e + 1), (e - t + 1) as f64));
            }
            t = e + 1;
        }
    }
    out
}
