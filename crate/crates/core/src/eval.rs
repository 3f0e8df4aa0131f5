//! Class-agnostic video instance segmentation metrics.
//!
//! Follows the COCO / YouTube-VIS protocol with a single category:
//! spatiotemporal track IoU, greedy confidence-ordered matching,
//! 101-point interpolated AP over IoU thresholds 0.50:0.05:0.95, size
//! strata by the ground-truth track's mean present-frame area, and AR@10
//! averaged over the same ten thresholds.
//!
//! A stratum without ground truth scores 1.0 when it also has no
//! (non-ignored) predictions and 0.0 otherwise.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Detection, DetectionId, TrainingDataset, VideoId};
use crate::exec::{self, Execution};
use crate::mask::{AreaCategory, MaskError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("VideoMismatch: detection {left} (video {left_video}, {left_frames} frames) vs detection {right} (video {right_video}, {right_frames} frames)")]
    VideoMismatch {
        left: DetectionId,
        left_video: VideoId,
        left_frames: usize,
        right: DetectionId,
        right_video: VideoId,
        right_frames: usize,
    },
    #[error("VideoSetMismatch: prediction and ground-truth datasets cover different videos")]
    VideoSetMismatch,
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Number of IoU thresholds (0.50, 0.55, ..., 0.95).
pub const N_THRESHOLDS: usize = 10;

pub fn iou_thresholds() -> [f64; N_THRESHOLDS] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Detections kept per video for AR@10.
pub const AR_MAX_DETS: usize = 10;

/// Spatiotemporal IoU: summed intersections over summed unions, with absent
/// frames treated as empty masks.
pub fn track_iou(pred: &Detection, gt: &Detection) -> Result<f64, EvalError> {
    if pred.video_id != gt.video_id || pred.frame_count() != gt.frame_count() {
        return Err(EvalError::VideoMismatch {
            left: pred.id,
            left_video: pred.video_id,
            left_frames: pred.frame_count(),
            right: gt.id,
            right_video: gt.video_id,
            right_frames: gt.frame_count(),
        });
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (a, b) in pred.masks.iter().zip(&gt.masks) {
        match (a, b) {
            (Some(a), Some(b)) => {
                let (i, u) = a.overlap_counts(b)?;
                inter += i;
                union += u;
            }
            (Some(m), None) | (None, Some(m)) => union += m.area(),
            (None, None) => {}
        }
    }
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// For each prediction (input order), whether it is a true positive.
    pub pred_tp: Vec<bool>,
    /// For each prediction, the index of the matched ground truth.
    pub pred_match: Vec<Option<usize>>,
    pub gt_matched: Vec<bool>,
}

/// Greedy matching in the given prediction order. Each prediction takes the
/// still-unmatched ground truth with the highest IoU at or above the
/// threshold, preferring non-ignored ground truth; ties go to the lower
/// ground-truth index.
fn greedy_match(ious: &[Vec<f64>], threshold: f64, gt_ignore: &[bool]) -> Vec<Option<usize>> {
    let mut taken = vec![false; gt_ignore.len()];
    ious.iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for pass_ignored in [false, true] {
                for (g, &iou) in row.iter().enumerate() {
                    if taken[g] || gt_ignore[g] != pass_ignored || iou < threshold {
                        continue;
                    }
                    if best.is_none_or(|(_, b)| iou > b) {
                        best = Some((g, iou));
                    }
                }
                if best.is_some() {
                    break;
                }
            }
            let g = best.map(|(g, _)| g);
            if let Some(g) = g {
                taken[g] = true;
            }
            g
        })
        .collect()
}

/// Matches predictions (already sorted by confidence, descending) to ground
/// truth tracks at one IoU threshold.
pub fn match_and_score(
    preds: &[Detection],
    gts: &[Detection],
    iou_threshold: f64,
) -> Result<MatchResult, EvalError> {
    let ious = iou_matrix(preds, gts)?;
    let pred_match = greedy_match(&ious, iou_threshold, &vec![false; gts.len()]);
    let mut gt_matched = vec![false; gts.len()];
    for g in pred_match.iter().flatten() {
        gt_matched[*g] = true;
    }
    Ok(MatchResult {
        pred_tp: pred_match.iter().map(Option::is_some).collect(),
        pred_match,
        gt_matched,
    })
}

pub fn iou_matrix(preds: &[Detection], gts: &[Detection]) -> Result<Vec<Vec<f64>>, EvalError> {
    preds
        .iter()
        .map(|p| gts.iter().map(|g| track_iou(p, g)).collect())
        .collect()
}

/// 101-point interpolated average precision for a confidence-ordered list
/// of true/false-positive flags.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if flags.is_empty() { 1.0 } else { 0.0 };
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += usize::from(f);
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    let mut idx = 0usize;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while idx < recall.len() && recall[idx] < level {
            idx += 1;
        }
        if idx < recall.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap50: f64,
    pub ap75: f64,
    pub ap: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub ar10: f64,
}

impl EvalReport {
    pub fn fields(&self) -> [(&'static str, f64); 7] {
        [
            ("AP50", self.ap50),
            ("AP75", self.ap75),
            ("AP", self.ap),
            ("AP_S", self.ap_small),
            ("AP_M", self.ap_medium),
            ("AP_L", self.ap_large),
            ("AR10", self.ar10),
        ]
    }

    pub fn to_table(&self) -> String {
        let fields = self.fields();
        let header: Vec<String> = fields.iter().map(|(n, _)| format!("{n:>7}")).collect();
        let values: Vec<String> = fields
            .iter()
            .map(|(_, v)| format!("{:>7.2}", v * 100.0))
            .collect();
        format!("{}\n{}\n", header.join(" "), values.join(" "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stratum {
    All,
    Only(AreaCategory),
}

impl Stratum {
    fn contains(self, c: AreaCategory) -> bool {
        match self {
            Stratum::All => true,
            Stratum::Only(s) => s == c,
        }
    }
}

/// Per-video data needed for every threshold and stratum.
struct VideoEval {
    /// Prediction confidences in processing order (descending).
    scores: Vec<f64>,
    pred_cats: Vec<AreaCategory>,
    gt_cats: Vec<AreaCategory>,
    /// `ious[p][g]` with predictions in processing order.
    ious: Vec<Vec<f64>>,
}

impl VideoEval {
    fn build(mut preds: Vec<&Detection>, gts: Vec<&Detection>) -> Result<Self, EvalError> {
        preds.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.id.cmp(&b.id)));
        let ious = preds
            .iter()
            .map(|p| gts.iter().map(|g| track_iou(p, g)).collect())
            .collect::<Result<Vec<Vec<f64>>, _>>()?;
        Ok(Self {
            scores: preds.iter().map(|p| p.confidence).collect(),
            pred_cats: preds
                .iter()
                .map(|p| AreaCategory::of_mean_area(p.mean_area()))
                .collect(),
            gt_cats: gts
                .iter()
                .map(|g| AreaCategory::of_mean_area(g.mean_area()))
                .collect(),
            ious,
        })
    }

    /// Returns `(scored predictions as (score, rank, is_tp), non-ignored gt count)`.
    fn outcomes(
        &self,
        threshold: f64,
        stratum: Stratum,
        max_dets: Option<usize>,
    ) -> (Vec<(f64, usize, bool)>, usize) {
        let n = max_dets.map_or(self.scores.len(), |m| m.min(self.scores.len()));
        let gt_ignore: Vec<bool> = self.gt_cats.iter().map(|&c| !stratum.contains(c)).collect();
        let matches = greedy_match(&self.ious[..n], threshold, &gt_ignore);
        let mut out = Vec::new();
        for (rank, m) in matches.into_iter().enumerate() {
            let ignored = match m {
                Some(g) => gt_ignore[g],
                None => !stratum.contains(self.pred_cats[rank]),
            };
            if !ignored {
                out.push((self.scores[rank], rank, m.is_some()));
            }
        }
        (out, gt_ignore.iter().filter(|i| !**i).count())
    }
}

fn accumulate(
    videos: &[VideoEval],
    threshold: f64,
    stratum: Stratum,
    max_dets: Option<usize>,
) -> (f64, f64) {
    let mut entries = Vec::new();
    let mut n_gt = 0usize;
    for (v, video) in videos.iter().enumerate() {
        let (scored, g) = video.outcomes(threshold, stratum, max_dets);
        n_gt += g;
        entries.extend(scored.into_iter().map(|(s, rank, tp)| (s, v, rank, tp)));
    }
    entries.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let flags: Vec<bool> = entries.iter().map(|e| e.3).collect();
    let ap = average_precision(&flags, n_gt);
    let recall = if n_gt == 0 {
        if flags.is_empty() {
            1.0
        } else {
            0.0
        }
    } else {
        flags.iter().filter(|f| **f).count() as f64 / n_gt as f64
    };
    (ap, recall)
}

pub fn evaluate(preds: &TrainingDataset, gt: &TrainingDataset) -> Result<EvalReport, EvalError> {
    evaluate_with(preds, gt, Execution::default())
}

pub fn evaluate_with(
    preds: &TrainingDataset,
    gt: &TrainingDataset,
    exec: Execution,
) -> Result<EvalReport, EvalError> {
    let video_ids: BTreeSet<VideoId> = gt.video_ids();
    if preds.video_ids() != video_ids {
        return Err(EvalError::VideoSetMismatch);
    }
    let pred_by_video = preds.detections_by_video();
    let gt_by_video = gt.detections_by_video();
    let ids: Vec<VideoId> = video_ids.into_iter().collect();
    let videos = exec::try_map_collect(exec, &ids, |id| {
        VideoEval::build(
            pred_by_video.get(id).cloned().unwrap_or_default(),
            gt_by_video.get(id).cloned().unwrap_or_default(),
        )
    })?;

    let thresholds = iou_thresholds();
    let strata = [
        Stratum::All,
        Stratum::Only(AreaCategory::Small),
        Stratum::Only(AreaCategory::Medium),
        Stratum::Only(AreaCategory::Large),
    ];
    // ap[stratum][threshold]
    let mut ap = [[0.0; N_THRESHOLDS]; 4];
    let mut recall = [0.0; N_THRESHOLDS];
    for (s, &stratum) in strata.iter().enumerate() {
        for (t, &thr) in thresholds.iter().enumerate() {
            ap[s][t] = accumulate(&videos, thr, stratum, None).0;
        }
    }
    for (t, &thr) in thresholds.iter().enumerate() {
        recall[t] = accumulate(&videos, thr, Stratum::All, Some(AR_MAX_DETS)).1;
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Ok(EvalReport {
        ap50: ap[0][0],
        ap75: ap[0][5],
        ap: mean(&ap[0]),
        ap_small: mean(&ap[1]),
        ap_medium: mean(&ap[2]),
        ap_large: mean(&ap[3]),
        ar10: mean(&recall),
    })
}

/// AP at each IoU threshold over all areas, mainly for diagnostics.
pub fn ap_per_threshold(
    preds: &TrainingDataset,
    gt: &TrainingDataset,
) -> Result<[f64; N_THRESHOLDS], EvalError> {
    if preds.video_ids() != gt.video_ids() {
        return Err(EvalError::VideoSetMismatch);
    }
    let pred_by_video = preds.detections_by_video();
    let gt_by_video = gt.detections_by_video();
    let videos = gt
        .video_ids()
        .into_iter()
        .map(|id| {
            VideoEval::build(
                pred_by_video.get(&id).cloned().unwrap_or_default(),
                gt_by_video.get(&id).cloned().unwrap_or_default(),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let thresholds = iou_thresholds();
    Ok(std::array::from_fn(|t| {
        accumulate(&videos, thresholds[t], Stratum::All, None).0
    }))
}
