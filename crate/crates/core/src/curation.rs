//! Pseudo-label curation: confidence filtering, spatiotemporal NMS,
//! quality-threshold selection and retention.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Detection, DetectionId, RawDetection, VideoId, VideoMeta};
use crate::mask::{mask_iou, MaskError};
use crate::scoring::{score_raw_detection, QualityScorer, ScoredDetection, ScoringError};

pub const DEFAULT_CONFIDENCE_MIN: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.5;
pub const DEFAULT_QUALITY_THRESHOLD: f64 = 0.75;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurationError {
    #[error(
        "MixedVideoError: detection {detection} belongs to video {found}, expected {expected}"
    )]
    MixedVideo {
        detection: DetectionId,
        expected: VideoId,
        found: VideoId,
    },
    #[error("InvalidConfig: {name} = {value} is outside [0, 1]")]
    InvalidConfig { name: &'static str, value: f64 },
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurationConfig {
    pub confidence_min: f64,
    pub nms_iou: f64,
    pub quality_threshold: f64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            confidence_min: DEFAULT_CONFIDENCE_MIN,
            nms_iou: DEFAULT_NMS_IOU,
            quality_threshold: DEFAULT_QUALITY_THRESHOLD,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<(), CurationError> {
        for (name, value) in [
            ("confidence_min", self.confidence_min),
            ("nms_iou", self.nms_iou),
            ("quality_threshold", self.quality_threshold),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(CurationError::InvalidConfig { name, value });
            }
        }
        Ok(())
    }
}

/// Keeps detections with `confidence >= min`, in input order.
pub fn filter_by_confidence<T: AsRef<Detection>>(dets: Vec<T>, min: f64) -> Vec<T> {
    dets.into_iter()
        .filter(|d| d.as_ref().confidence >= min)
        .collect()
}

/// Highest single-frame IoU over frames where both tracks are present.
pub fn best_frame_iou(a: &Detection, b: &Detection) -> Result<f64, MaskError> {
    let mut best = 0.0f64;
    for (ma, mb) in a.masks.iter().zip(&b.masks) {
        if let (Some(ma), Some(mb)) = (ma, mb) {
            best = best.max(mask_iou(ma, mb)?);
        }
    }
    Ok(best)
}

fn overlaps_in_any_frame(a: &Detection, b: &Detection, iou: f64) -> Result<bool, MaskError> {
    for (ma, mb) in a.masks.iter().zip(&b.masks) {
        if let (Some(ma), Some(mb)) = (ma, mb) {
            if mask_iou(ma, mb)? >= iou {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Confidence-descending order, ties broken by lower detection id.
pub fn sort_by_confidence<T: AsRef<Detection>>(dets: &mut [T]) {
    dets.sort_by(|a, b| {
        let (a, b) = (a.as_ref(), b.as_ref());
        b.confidence.total_cmp(&a.confidence).then(a.id.cmp(&b.id))
    });
}

/// Greedy spatiotemporal NMS over one video's detections.
///
/// A detection is kept iff no already-kept detection reaches `iou` mask
/// overlap with it in any single frame where both are present. Output is
/// in confidence-descending order.
pub fn spatiotemporal_nms<T: AsRef<Detection>>(
    mut dets: Vec<T>,
    iou: f64,
) -> Result<Vec<T>, CurationError> {
    if let Some(first) = dets.first() {
        let video = first.as_ref().video_id;
        if let Some(other) = dets.iter().find(|d| d.as_ref().video_id != video) {
            return Err(CurationError::MixedVideo {
                detection: other.as_ref().id,
                expected: video,
                found: other.as_ref().video_id,
            });
        }
    }
    sort_by_confidence(&mut dets);
    let mut kept: Vec<T> = Vec::with_capacity(dets.len());
    for d in dets {
        let mut suppressed = false;
        for k in &kept {
            if overlaps_in_any_frame(k.as_ref(), d.as_ref(), iou)? {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(d);
        }
    }
    Ok(kept)
}

/// Marks a frame selected iff its mask is present and its quality reaches
/// `tau`. Masks are untouched.
pub fn select_labels(scored: Vec<ScoredDetection>, tau: f64) -> Vec<Detection> {
    scored
        .into_iter()
        .map(|s| {
            let mut d = s.detection;
            d.selected = d
                .masks
                .iter()
                .zip(&s.quality)
                .map(|(m, &q)| m.is_some() && q >= tau)
                .collect();
            d
        })
        .collect()
}

/// Drops detections without any selected frame.
pub fn retain(dets: Vec<Detection>) -> Vec<Detection> {
    dets.into_iter()
        .filter(|d| d.selected_count() > 0)
        .collect()
}

/// Stage sizes of one curation pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub n_raw: usize,
    pub n_filtered: usize,
    pub n_after_nms: usize,
    pub n_retained: usize,
}

impl std::ops::AddAssign for StageCounts {
    fn add_assign(&mut self, o: Self) {
        self.n_raw += o.n_raw;
        self.n_filtered += o.n_filtered;
        self.n_after_nms += o.n_after_nms;
        self.n_retained += o.n_retained;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurationOutcome {
    pub retained: Vec<Detection>,
    pub counts: StageCounts,
}

fn check_video(video: &VideoMeta, dets: &[RawDetection]) -> Result<(), CurationError> {
    match dets.iter().find(|d| d.detection.video_id != video.id) {
        Some(d) => Err(CurationError::MixedVideo {
            detection: d.detection.id,
            expected: video.id,
            found: d.detection.video_id,
        }),
        None => Ok(()),
    }
}

/// Filter, NMS, and score one video's raw detections (everything before the
/// threshold is applied).
pub fn score_candidates(
    scorer: &dyn QualityScorer,
    video: &VideoMeta,
    raw_dets: Vec<RawDetection>,
    config: &CurationConfig,
) -> Result<(Vec<ScoredDetection>, StageCounts), CurationError> {
    config.validate()?;
    check_video(video, &raw_dets)?;
    let n_raw = raw_dets.len();
    let filtered = filter_by_confidence(raw_dets, config.confidence_min);
    let n_filtered = filtered.len();
    let kept = spatiotemporal_nms(filtered, config.nms_iou)?;
    let n_after_nms = kept.len();
    let scored = kept
        .iter()
        .map(|r| score_raw_detection(scorer, video, r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((
        scored,
        StageCounts {
            n_raw,
            n_filtered,
            n_after_nms,
            n_retained: 0,
        },
    ))
}

pub fn curate_video_with_counts(
    scorer: &dyn QualityScorer,
    video: &VideoMeta,
    raw_dets: Vec<RawDetection>,
    config: &CurationConfig,
) -> Result<CurationOutcome, CurationError> {
    let (scored, mut counts) = score_candidates(scorer, video, raw_dets, config)?;
    let retained = retain(select_labels(scored, config.quality_threshold));
    counts.n_retained = retained.len();
    Ok(CurationOutcome { retained, counts })
}

/// `retain(select(score(nms(filter(raw)))))` for one video.
pub fn curate_video(
    scorer: &dyn QualityScorer,
    video: &VideoMeta,
    raw_dets: Vec<RawDetection>,
    config: &CurationConfig,
) -> Result<Vec<Detection>, CurationError> {
    Ok(curate_video_with_counts(scorer, video, raw_dets, config)?.retained)
}
