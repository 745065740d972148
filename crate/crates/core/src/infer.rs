//! Turning a TCAM and bottom-up attention into scored temporal detections.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{snippet_to_seconds, DatasetManifest, Subset, VideoRecord};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::losses::{bottomup_attention, video_prediction, EmaRef};
use crate::model::{predict, ModelConfig, ModelParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub thresholds: Vec<f64>,
    pub nms_iou: f64,
    /// Proposals scoring at most this fraction of the video's best are dropped.
    pub s_th_fraction: f64,
    /// Width of each outer window relative to the proposal length.
    pub inflation_fraction: f64,
    /// Classes scoring below this fraction of the top class are ignored.
    pub p_th_fraction: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            thresholds: (1..=20).map(|i| f64::from(i) * 0.025).collect(),
            nms_iou: 0.5,
            s_th_fraction: 0.1,
            inflation_fraction: 0.25,
            p_th_fraction: 0.5,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty()
            || self.thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0))
            || self.thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "infer thresholds must be strictly increasing in (0, 1), got {:?}",
                self.thresholds
            )));
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.nms_iou)
            || !unit(self.s_th_fraction)
            || !unit(self.p_th_fraction)
            || !(self.inflation_fraction.is_finite() && self.inflation_fraction >= 0.0)
        {
            return Err(Error::Config(format!("infer fractions out of range: {self:?}")));
        }
        Ok(())
    }
}

/// A scored segment in snippet units, inclusive on both ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub class_id: usize,
    pub start: usize,
    pub end: usize,
    pub score: f64,
    /// Lowest threshold that produced this span.
    pub threshold: f64,
}

impl Proposal {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    pub video_id: String,
    pub class_id: usize,
    pub start_sec: f64,
    pub end_sec: f64,
    pub score: f64,
}

/// `{c : p[c] ≥ fraction · max(p)}`.
pub fn relevant_classes(p: &[f64], fraction: f64) -> Vec<usize> {
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..p.len()).filter(|&c| p[c] >= fraction * max).collect()
}

pub fn refine(tcam_column: &[f64], lambda_prime: &[f64]) -> Result<Vec<f64>> {
    if tcam_column.len() != lambda_prime.len() {
        return Err(Error::shape(
            "refine",
            format!("{} activations vs {} attention values", tcam_column.len(), lambda_prime.len()),
        ));
    }
    Ok(tcam_column.iter().zip(lambda_prime).map(|(t, l)| t * l).collect())
}

/// Maximal runs with `r[t] > thr`, as inclusive `(start, end)` pairs.
pub fn segments_at_threshold(r: &[f64], thr: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut open = None;
    for (t, &v) in r.iter().enumerate() {
        match (v > thr, open) {
            (true, None) => open = Some(t),
            (false, Some(s)) => {
                out.push((s, t - 1));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        out.push((s, r.len() - 1));
    }
    out
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Outer-inner contrast `S_i − S_o`.
pub fn score_proposal(r: &[f64], segment: (usize, usize), inflation_fraction: f64) -> f64 {
    let (start, end) = segment;
    let len = end - start + 1;
    let width = ((inflation_fraction * len as f64 + 0.5).floor() as usize).max(1);
    let inner = mean(r[start..=end].iter().copied()).unwrap_or(0.0);
    let left = start.saturating_sub(width)..start;
    let right = (end + 1)..(end + 1 + width).min(r.len());
    let outer = mean(r[left].iter().chain(&r[right]).copied()).unwrap_or(0.0);
    inner - outer
}

/// tIoU of inclusive snippet intervals, each snippet one unit long.
pub fn snippet_tiou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    let inter = if hi >= lo { hi - lo + 1 } else { 0 };
    let union = (a.1 - a.0 + 1) + (b.1 - b.0 + 1) - inter;
    inter as f64 / union as f64
}

fn proposal_order(a: &Proposal, b: &Proposal) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.cmp(&b.start))
        .then(b.len().cmp(&a.len()))
}

/// Greedy NMS within one class.
pub fn nms(proposals: &[Proposal], iou_thr: f64) -> Vec<Proposal> {
    let mut sorted = proposals.to_vec();
    sorted.sort_by(proposal_order);
    let mut kept: Vec<Proposal> = Vec::new();
    for p in sorted {
        if kept
            .iter()
            .all(|k| snippet_tiou((k.start, k.end), (p.start, p.end)) <= iou_thr)
        {
            kept.push(p);
        }
    }
    kept
}

/// All thresholded runs of `r` for one class, scored, one per distinct span.
pub fn class_proposals(r: &[f64], class_id: usize, cfg: &InferConfig) -> Vec<Proposal> {
    let mut out: Vec<Proposal> = Vec::new();
    for &thr in &cfg.thresholds {
        for (start, end) in segments_at_threshold(r, thr) {
            let score = score_proposal(r, (start, end), cfg.inflation_fraction);
            match out.iter_mut().find(|p| p.start == start && p.end == end) {
                Some(existing) => existing.score = existing.score.max(score),
                None => out.push(Proposal {
                    class_id,
                    start,
                    end,
                    score,
                    threshold: thr,
                }),
            }
        }
    }
    out
}

/// Per-class top-k mean of the TCAM, `p`.
pub fn class_scores(tcam: &Matrix) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let t = tape.constant(tcam.clone());
    let p = video_prediction(&mut tape, t)?;
    Ok(tape.value(p).as_slice().to_vec())
}

/// Detections for one video, sorted by score descending.
pub fn detect(
    tcam: &Matrix,
    lambda_prime: &[f64],
    p: &[f64],
    record: &VideoRecord,
    snippet_frames: usize,
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    let (s, c) = tcam.shape();
    if lambda_prime.len() != s || p.len() != c || s == 0 {
        return Err(Error::shape(
            "detect",
            format!(
                "TCAM {s}x{c}, {} attention values, {} class scores",
                lambda_prime.len(),
                p.len()
            ),
        ));
    }
    let mut per_class = Vec::new();
    for class in relevant_classes(p, cfg.p_th_fraction) {
        let r = refine(&tcam.column(class), lambda_prime)?;
        per_class.push(class_proposals(&r, class, cfg));
    }
    let best = per_class
        .iter()
        .flatten()
        .map(|p| p.score)
        .fold(f64::NEG_INFINITY, f64::max);
    let cutoff = cfg.s_th_fraction * best;
    let mut out: Vec<Detection> = per_class
        .iter()
        .flat_map(|props| nms(props, cfg.nms_iou))
        .filter(|p| p.score > cutoff)
        .map(|p| Detection {
            video_id: record.id.clone(),
            class_id: p.class_id,
            start_sec: snippet_to_seconds(p.start as f64, snippet_frames, record.fps),
            end_sec: snippet_to_seconds((p.end + 1) as f64, snippet_frames, record.fps),
            score: p.score,
        })
        .collect();
    sort_detections(&mut out);
    Ok(out)
}

/// Video id ascending, then score descending (class and start break ties).
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then(b.score.total_cmp(&a.score))
            .then(a.class_id.cmp(&b.class_id))
            .then(a.start_sec.total_cmp(&b.start_sec))
    });
}

/// Runs the model and [`detect`] on one video.
#[allow(clippy::too_many_arguments)]
pub fn infer_video(
    model: &ModelConfig,
    params: &ModelParams,
    reference: &EmaRef,
    record: &VideoRecord,
    rgb: &Matrix,
    flow: &Matrix,
    snippet_frames: usize,
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    let (embeddings, tcam) = predict(model, params, rgb, flow)?;
    let lambda_prime = bottomup_attention(&embeddings, &reference.x_ref);
    let p = class_scores(&tcam)?;
    detect(&tcam, &lambda_prime, &p, record, snippet_frames, cfg)
}

/// Detections for every video of `subset`, computed in parallel.
pub fn infer_manifest(
    manifest: &DatasetManifest,
    subset: Subset,
    model: &ModelConfig,
    params: &ModelParams,
    reference: &EmaRef,
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let videos: Vec<&VideoRecord> = manifest.videos_in(subset).collect();
    let per_video = videos
        .par_iter()
        .map(|v| {
            let (rgb, flow) = manifest.load_streams(v)?;
            infer_video(model, params, reference, v, &rgb, &flow, manifest.snippet_frames, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut all: Vec<Detection> = per_video.into_iter().flatten().collect();
    sort_detections(&mut all);
    Ok(all)
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    let text = serde_json::to_string_pretty(detections)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
