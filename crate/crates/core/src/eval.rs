//! Temporal detection metrics: tIoU, AP, mAP over IoU thresholds, the
//! 0.5:0.05:0.95 average and pooled F1 at IoU 0.5.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Subset};
use crate::error::{Error, Result};
use crate::infer::Detection;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn standard_ious() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

// `!(s < e)` also rejects NaN endpoints.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for (s, e) in [a, b] {
        if !(s < e) {
            return Err(Error::Usage(format!("degenerate interval [{s}, {e}]")));
        }
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    Ok(inter / union)
}

/// One ground-truth instance.
#[derive(Clone, Debug, PartialEq)]
pub struct GtInstance {
    pub video_id: String,
    pub class_id: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GroundTruth {
    pub classes: Vec<String>,
    pub videos: BTreeSet<String>,
    pub instances: Vec<GtInstance>,
}

impl GroundTruth {
    pub fn from_manifest(manifest: &DatasetManifest, subset: Subset) -> Self {
        let mut gt = GroundTruth {
            classes: manifest.classes.clone(),
            ..Default::default()
        };
        for v in manifest.videos_in(subset) {
            gt.videos.insert(v.id.clone());
            gt.instances.extend(v.gt_segments.iter().map(|g| GtInstance {
                video_id: v.id.clone(),
                class_id: g.class_id,
                start: g.start,
                end: g.end,
            }));
        }
        gt
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn check(&self, dets: &[Detection]) -> Result<()> {
        for d in dets {
            if d.class_id >= self.classes.len() {
                return Err(Error::Usage(format!(
                    "detection in `{}` has unknown class id {}",
                    d.video_id, d.class_id
                )));
            }
            if !self.videos.contains(&d.video_id) {
                return Err(Error::Usage(format!(
                    "detection for unknown video `{}`",
                    d.video_id
                )));
            }
            if !(d.start_sec < d.end_sec) || !d.score.is_finite() {
                return Err(Error::Usage(format!(
                    "malformed detection in `{}`: [{}, {}] score {}",
                    d.video_id, d.start_sec, d.end_sec, d.score
                )));
            }
        }
        Ok(())
    }
}

fn ranked<'a>(dets: impl IntoIterator<Item = &'a Detection>) -> Vec<&'a Detection> {
    let mut v: Vec<&Detection> = dets.into_iter().collect();
    v.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.video_id.cmp(&b.video_id))
            .then(a.start_sec.total_cmp(&b.start_sec))
    });
    v
}

/// Greedy score-order matching. Each detection takes the unmatched ground
/// truth in its video (and class) with the highest tIoU, if that reaches
/// `iou_thr`. Returns one TP flag per detection in the given order.
fn match_greedy(dets: &[&Detection], gts: &[&GtInstance], iou_thr: f64) -> Result<Vec<bool>> {
    let mut used = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] || g.video_id != d.video_id || g.class_id != d.class_id {
                continue;
            }
            let o = tiou((d.start_sec, d.end_sec), (g.start, g.end))?;
            if o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
        }
        flags.push(best.is_some());
    }
    Ok(flags)
}

/// All-points interpolated AP of one class. `None` when there are neither
/// detections nor ground truths.
pub fn average_precision(
    dets: &[&Detection],
    gts: &[&GtInstance],
    iou_thr: f64,
) -> Result<Option<f64>> {
    if gts.is_empty() {
        return Ok((!dets.is_empty()).then_some(0.0));
    }
    let order = ranked(dets.iter().copied());
    let flags = match_greedy(&order, gts, iou_thr)?;
    Ok(Some(ap_from_flags(&flags, gts.len())))
}

fn ap_from_flags(flags: &[bool], num_gt: usize) -> f64 {
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &hit) in flags.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..flags.len() {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    ap
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchCounts {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub class_name: String,
    pub iou: f64,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// mAP keyed by IoU threshold formatted with two decimals.
    pub per_iou_map: BTreeMap<String, f64>,
    pub per_class_ap: Vec<ClassAp>,
    /// Mean of mAP over 0.50:0.05:0.95.
    pub avg_map: f64,
    pub f1_at_05: f64,
    pub counts: MatchCounts,
}

pub fn iou_key(iou: f64) -> String {
    format!("{iou:.2}")
}

impl EvalReport {
    pub fn map_at(&self, iou: f64) -> Option<f64> {
        self.per_iou_map.get(&iou_key(iou)).copied()
    }

    /// Aligned plain-text table: one mAP column per requested IoU, then AVG
    /// and F1@0.5.
    pub fn to_table(&self) -> String {
        let mut header = format!("{:<10}", "mAP@IoU");
        let mut row = format!("{:<10}", "");
        for (k, v) in &self.per_iou_map {
            let _ = write!(header, "{k:>8}");
            let _ = write!(row, "{:>8.1}", 100.0 * v);
        }
        let _ = write!(header, "{:>8}{:>9}", "AVG", "F1@0.5");
        let _ = write!(row, "{:>8.1}{:>9.1}", 100.0 * self.avg_map, 100.0 * self.f1_at_05);
        format!("{header}\n{row}\n")
    }
}

fn mean_ap(
    by_class: &[Vec<&Detection>],
    gt_by_class: &[Vec<&GtInstance>],
    iou: f64,
) -> Result<(f64, Vec<(usize, f64)>)> {
    let mut per_class = Vec::new();
    let mut sum = 0.0;
    let mut counted = 0;
    for c in 0..by_class.len() {
        if let Some(ap) = average_precision(&by_class[c], &gt_by_class[c], iou)? {
            per_class.push((c, ap));
            if !gt_by_class[c].is_empty() {
                sum += ap;
                counted += 1;
            }
        }
    }
    let map = if counted == 0 { 0.0 } else { sum / counted as f64 };
    Ok((map, per_class))
}

/// Pooled TP/FP/FN over all classes at `iou_thr`.
pub fn match_counts(dets: &[Detection], gt: &GroundTruth, iou_thr: f64) -> Result<MatchCounts> {
    let order = ranked(dets);
    let gts: Vec<&GtInstance> = gt.instances.iter().collect();
    let flags = match_greedy(&order, &gts, iou_thr)?;
    let tp = flags.iter().filter(|&&f| f).count();
    Ok(MatchCounts {
        tp,
        fp: flags.len() - tp,
        fn_: gts.len() - tp,
    })
}

pub fn evaluate(dets: &[Detection], gt: &GroundTruth, ious: &[f64]) -> Result<EvalReport> {
    gt.check(dets)?;
    let c = gt.classes.len();
    let mut by_class: Vec<Vec<&Detection>> = vec![Vec::new(); c];
    for d in dets {
        by_class[d.class_id].push(d);
    }
    let mut gt_by_class: Vec<Vec<&GtInstance>> = vec![Vec::new(); c];
    for g in &gt.instances {
        gt_by_class[g.class_id].push(g);
    }

    let mut all_ious: Vec<f64> = ious.to_vec();
    for iou in standard_ious() {
        if !all_ious.iter().any(|&x| iou_key(x) == iou_key(iou)) {
            all_ious.push(iou);
        }
    }
    let results = all_ious
        .par_iter()
        .map(|&iou| mean_ap(&by_class, &gt_by_class, iou).map(|r| (iou, r)))
        .collect::<Result<Vec<_>>>()?;

    let mut per_iou_map = BTreeMap::new();
    let mut per_class_ap = Vec::new();
    let mut avg = 0.0;
    for (iou, (map, per_class)) in &results {
        if standard_ious().iter().any(|&s| iou_key(s) == iou_key(*iou)) {
            avg += map / 10.0;
        }
        if ious.iter().any(|&x| iou_key(x) == iou_key(*iou)) {
            per_iou_map.insert(iou_key(*iou), *map);
            per_class_ap.extend(per_class.iter().map(|&(class_id, ap)| ClassAp {
                class_id,
                class_name: gt.classes[class_id].clone(),
                iou: *iou,
                ap,
            }));
        }
    }
    let counts = match_counts(dets, gt, 0.5)?;
    Ok(EvalReport {
        per_iou_map,
        per_class_ap,
        avg_map: avg,
        f1_at_05: counts.f1(),
        counts,
    })
}

/// [`evaluate`] against the manifest's test videos.
pub fn evaluate_manifest(
    dets: &[Detection],
    manifest: &DatasetManifest,
    ious: &[f64],
) -> Result<EvalReport> {
    evaluate(dets, &GroundTruth::from_manifest(manifest, Subset::Test), ious)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(video: &str, class_id: usize, s: f64, e: f64, score: f64) -> Detection {
        Detection {
            video_id: video.into(),
            class_id,
            start_sec: s,
            end_sec: e,
            score,
        }
    }

    fn gt(video: &str, class_id: usize, s: f64, e: f64) -> GtInstance {
        GtInstance {
            video_id: video.into(),
            class_id,
            start: s,
            end: e,
        }
    }

    #[test]
    fn tiou_examples() {
        assert_eq!(tiou((1.0, 4.0), (1.0, 4.0)).unwrap(), 1.0);
        assert_eq!(tiou((0.0, 1.0), (2.0, 3.0)).unwrap(), 0.0);
        assert_eq!(tiou((0.0, 2.0), (1.0, 3.0)).unwrap(), 1.0 / 3.0);
        assert!(matches!(tiou((1.0, 1.0), (0.0, 2.0)), Err(Error::Usage(_))));
    }

    #[test]
    fn ap_hand_case() {
        let g = [gt("v", 0, 0.0, 1.0), gt("v", 0, 5.0, 6.0)];
        let d = [
            det("v", 0, 0.0, 1.0, 0.9),
            det("v", 0, 2.0, 3.0, 0.8),
            det("v", 0, 5.0, 6.0, 0.7),
        ];
        let dr: Vec<&Detection> = d.iter().collect();
        let gr: Vec<&GtInstance> = g.iter().collect();
        let ap = average_precision(&dr, &gr, 0.5).unwrap().unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&dr, &[], 0.5).unwrap(), Some(0.0));
        assert_eq!(average_precision(&[], &[], 0.5).unwrap(), None);
        assert_eq!(average_precision(&[], &gr, 0.5).unwrap(), Some(0.0));
    }

    #[test]
    fn unknown_video_is_usage_error() {
        let gt = GroundTruth {
            classes: vec!["a".into()],
            videos: ["v".to_string()].into(),
            instances: vec![],
        };
        let err = evaluate(&[det("w", 0, 0.0, 1.0, 1.0)], &gt, &[0.5]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
