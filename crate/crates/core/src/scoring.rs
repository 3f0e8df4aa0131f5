//! Mask quality prediction and quality scores.
//!
//! A [`QualityScorer`] stands in for a learned mask-IoU predictor. It sees
//! the raw (soft) mask of a detection frame and returns a predicted IoU in
//! `[0, 1]`. The quality of a frame is `confidence * predicted_iou`.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::dataset::{Detection, DetectionId, RawDetection, TrainingDataset, VideoId, VideoMeta};
use crate::eval::{track_iou, EvalError};
use crate::mask::{binarize, mask_iou, MaskError, SoftMask};
use crate::seed::rng_for;

/// Threshold used to turn raw predicted masks into binary masks.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("DomainError: {name} = {value} is outside [0, 1]")]
    Domain { name: &'static str, value: f64 },
    #[error("ScorerOutOfRange: scorer returned {value} for detection {detection} frame {frame}")]
    ScorerOutOfRange {
        detection: DetectionId,
        frame: usize,
        value: f64,
    },
    #[error("FrameCountMismatch: detection {detection} has {actual} frames, video has {expected}")]
    FrameCountMismatch {
        detection: DetectionId,
        expected: usize,
        actual: usize,
    },
    #[error("LengthMismatch: {left} vs {right} samples")]
    LengthMismatch { left: usize, right: usize },
    #[error("TooFewSamples: need at least 2, got {0}")]
    TooFewSamples(usize),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub trait QualityScorer: Send + Sync {
    /// Predicted IoU of `raw_mask`, the soft mask of `detection` in `frame`.
    fn score_frame(
        &self,
        video: &VideoMeta,
        detection: &Detection,
        frame: usize,
        raw_mask: &SoftMask,
    ) -> Result<f64, ScoringError>;

    /// Predicted IoU for every frame; absent frames score 0.
    fn score_track(
        &self,
        video: &VideoMeta,
        detection: &Detection,
        raw_masks: &[Option<SoftMask>],
    ) -> Result<Vec<f64>, ScoringError> {
        raw_masks
            .iter()
            .enumerate()
            .map(|(t, m)| match m {
                Some(m) => self.score_frame(video, detection, t, m),
                None => Ok(0.0),
            })
            .collect()
    }
}

/// Returns the true IoU against the best-matching hidden ground-truth track.
///
/// The match is the ground-truth track of the same video with the highest
/// spatiotemporal IoU (ties: lower id); frame scores are then per-frame IoUs
/// against that one track, 0 where the track is absent.
#[derive(Debug, Clone, Default)]
pub struct OracleScorer {
    ground_truth: HashMap<VideoId, Vec<Detection>>,
}

impl OracleScorer {
    pub fn new(ground_truth: &TrainingDataset) -> Self {
        let mut map: HashMap<VideoId, Vec<Detection>> = HashMap::new();
        for a in &ground_truth.annotations {
            map.entry(a.detection.video_id)
                .or_default()
                .push(a.detection.clone());
        }
        for v in map.values_mut() {
            v.sort_by_key(|d| d.id);
        }
        Self { ground_truth: map }
    }

    pub fn matched_track(&self, detection: &Detection) -> Result<Option<&Detection>, ScoringError> {
        let Some(gts) = self.ground_truth.get(&detection.video_id) else {
            return Ok(None);
        };
        let mut best: Option<(&Detection, f64)> = None;
        for g in gts {
            let iou = track_iou(detection, g)?;
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        Ok(best.map(|(g, _)| g))
    }

    fn frame_iou(
        matched: Option<&Detection>,
        frame: usize,
        raw_mask: &SoftMask,
    ) -> Result<f64, ScoringError> {
        let Some(gt_mask) = matched
            .and_then(|g| g.masks.get(frame))
            .and_then(Option::as_ref)
        else {
            return Ok(0.0);
        };
        Ok(mask_iou(&binarize(raw_mask, BINARIZE_THRESHOLD), gt_mask)?)
    }

    /// True per-frame IoU of the detection's hard masks; 0 on absent frames.
    pub fn true_frame_ious(&self, detection: &Detection) -> Result<Vec<f64>, ScoringError> {
        let matched = self.matched_track(detection)?;
        detection
            .masks
            .iter()
            .enumerate()
            .map(|(t, m)| {
                let (Some(m), Some(g)) = (m, matched.and_then(|g| g.masks[t].as_ref())) else {
                    return Ok(0.0);
                };
                Ok(mask_iou(m, g)?)
            })
            .collect()
    }
}

impl QualityScorer for OracleScorer {
    fn score_frame(
        &self,
        _video: &VideoMeta,
        detection: &Detection,
        frame: usize,
        raw_mask: &SoftMask,
    ) -> Result<f64, ScoringError> {
        Self::frame_iou(self.matched_track(detection)?, frame, raw_mask)
    }

    fn score_track(
        &self,
        _video: &VideoMeta,
        detection: &Detection,
        raw_masks: &[Option<SoftMask>],
    ) -> Result<Vec<f64>, ScoringError> {
        let matched = self.matched_track(detection)?;
        raw_masks
            .iter()
            .enumerate()
            .map(|(t, m)| match m {
                Some(m) => Self::frame_iou(matched, t, m),
                None => Ok(0.0),
            })
            .collect()
    }
}

/// Oracle IoU plus clamped Gaussian noise. The noise for a given
/// `(seed, video, detection, frame)` is fixed, independent of call order.
#[derive(Debug, Clone)]
pub struct NoisyOracleScorer {
    pub inner: OracleScorer,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl NoisyOracleScorer {
    pub fn new(inner: OracleScorer, noise_sigma: f64, seed: u64) -> Self {
        assert!(noise_sigma >= 0.0, "noise_sigma must be non-negative");
        Self {
            inner,
            noise_sigma,
            seed,
        }
    }

    fn perturb(&self, detection: &Detection, frame: usize, iou: f64) -> f64 {
        if self.noise_sigma == 0.0 {
            return iou;
        }
        let mut rng = rng_for(
            self.seed,
            &[detection.video_id.0, detection.id.0, frame as u64],
        );
        let noise = Normal::new(0.0, self.noise_sigma)
            .expect("sigma is finite and non-negative")
            .sample(&mut rng);
        (iou + noise).clamp(0.0, 1.0)
    }
}

impl QualityScorer for NoisyOracleScorer {
    fn score_frame(
        &self,
        video: &VideoMeta,
        detection: &Detection,
        frame: usize,
        raw_mask: &SoftMask,
    ) -> Result<f64, ScoringError> {
        let iou = self.inner.score_frame(video, detection, frame, raw_mask)?;
        Ok(self.perturb(detection, frame, iou))
    }

    fn score_track(
        &self,
        video: &VideoMeta,
        detection: &Detection,
        raw_masks: &[Option<SoftMask>],
    ) -> Result<Vec<f64>, ScoringError> {
        let mut ious = self.inner.score_track(video, detection, raw_masks)?;
        for (t, iou) in ious.iter_mut().enumerate() {
            if raw_masks[t].is_some() {
                *iou = self.perturb(detection, t, *iou);
            }
        }
        Ok(ious)
    }
}

/// Predicts IoU 1 for every present frame, so quality reduces to the
/// detector confidence. Used for the "no quality predictor" baseline.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConfidenceOnlyScorer;

impl QualityScorer for ConfidenceOnlyScorer {
    fn score_frame(
        &self,
        _video: &VideoMeta,
        _detection: &Detection,
        _frame: usize,
        _raw_mask: &SoftMask,
    ) -> Result<f64, ScoringError> {
        Ok(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDetection {
    pub detection: Detection,
    pub iou_hat: Vec<f64>,
    pub quality: Vec<f64>,
}

fn check_unit(name: &'static str, value: f64) -> Result<(), ScoringError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(ScoringError::Domain { name, value })
    }
}

pub fn quality_score(confidence: f64, iou_hat: f64) -> Result<f64, ScoringError> {
    check_unit("confidence", confidence)?;
    check_unit("iou_hat", iou_hat)?;
    Ok(confidence * iou_hat)
}

/// Scores a detection using its soft masks.
pub fn score_raw_detection(
    scorer: &dyn QualityScorer,
    video: &VideoMeta,
    raw: &RawDetection,
) -> Result<ScoredDetection, ScoringError> {
    let det = &raw.detection;
    if det.frame_count() != video.frame_count || raw.soft_masks.len() != video.frame_count {
        return Err(ScoringError::FrameCountMismatch {
            detection: det.id,
            expected: video.frame_count,
            actual: det.frame_count().min(raw.soft_masks.len()),
        });
    }
    let mut iou_hat = scorer.score_track(video, det, &raw.soft_masks)?;
    let mut quality = Vec::with_capacity(iou_hat.len());
    for (t, v) in iou_hat.iter_mut().enumerate() {
        if det.masks[t].is_none() {
            *v = 0.0;
        }
        if !(0.0..=1.0).contains(v) {
            return Err(ScoringError::ScorerOutOfRange {
                detection: det.id,
                frame: t,
                value: *v,
            });
        }
        quality.push(quality_score(det.confidence, *v)?);
    }
    Ok(ScoredDetection {
        detection: det.clone(),
        iou_hat,
        quality,
    })
}

/// Scores a detection whose soft masks are unavailable; hard masks are
/// presented to the scorer as 0/1 probabilities.
pub fn score_detection(
    scorer: &dyn QualityScorer,
    video: &VideoMeta,
    det: &Detection,
) -> Result<ScoredDetection, ScoringError> {
    score_raw_detection(scorer, video, &RawDetection::from_hard(det.clone()))
}

/// Average ranks (1-based) with ties sharing the mean of their positions.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman's rank correlation: Pearson correlation of average ranks.
/// Returns 0 when either side is constant.
pub fn spearman_rank(xs: &[f64], ys: &[f64]) -> Result<f64, ScoringError> {
    if xs.len() != ys.len() {
        return Err(ScoringError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(ScoringError::TooFewSamples(xs.len()));
    }
    Ok(pearson(&average_ranks(xs), &average_ranks(ys)))
}

/// `quality,true_iou` CSV lines for external plotting.
pub fn diagnostics_csv(pairs: &[(f64, f64)]) -> String {
    let mut out = String::from("quality,true_iou\n");
    for (q, iou) in pairs {
        out.push_str(&format!("{q},{iou}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Annotation, SourceTag};
    use crate::mask::BitMask;

    fn video() -> VideoMeta {
        VideoMeta {
            id: VideoId(1),
            frame_count: 2,
            width: 8,
            height: 8,
        }
    }

    fn rect(x0: u32, x1: u32, y0: u32, y1: u32) -> BitMask {
        BitMask::from_fn(8, 8, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1).unwrap()
    }

    fn gt_dataset() -> TrainingDataset {
        TrainingDataset {
            round: 0,
            videos: vec![video()],
            annotations: vec![Annotation {
                detection: Detection::new(
                    DetectionId(1),
                    VideoId(1),
                    1.0,
                    vec![Some(rect(0, 2, 0, 2)), Some(rect(4, 8, 4, 8))],
                )
                .select_all_present(),
                source: SourceTag::GroundTruth,
            }],
        }
    }

    #[test]
    fn quality_examples() {
        assert_eq!(quality_score(1.0, 0.37).unwrap(), 0.37);
        assert_eq!(quality_score(0.6, 0.0).unwrap(), 0.0);
        assert!((quality_score(0.9, 0.8).unwrap() - 0.72).abs() < 1e-15);
        assert!(matches!(
            quality_score(1.2, 0.5),
            Err(ScoringError::Domain {
                name: "confidence",
                ..
            })
        ));
        assert!(quality_score(0.5, f64::NAN).is_err());
    }

    #[test]
    fn oracle_exact_match_gives_unit_quality() {
        let gt = gt_dataset();
        let scorer = OracleScorer::new(&gt);
        let det = gt.annotations[0].detection.clone();
        let s = score_detection(&scorer, &video(), &det).unwrap();
        assert_eq!(s.quality, vec![1.0, 1.0]);
    }

    #[test]
    fn absent_frame_scores_zero() {
        let gt = gt_dataset();
        let scorer = OracleScorer::new(&gt);
        let det = Detection::new(
            DetectionId(5),
            VideoId(1),
            0.9,
            vec![Some(rect(0, 2, 0, 2)), None],
        );
        let s = score_detection(&scorer, &video(), &det).unwrap();
        assert_eq!(s.quality[1], 0.0);
        assert_eq!(s.iou_hat[1], 0.0);
    }

    #[test]
    fn half_overlap_quality() {
        // gt frame 0 has 4 px; detection covers 3 of them plus... build so
        // that |inter| = 3 and |union| = 6.
        let gt_mask = BitMask::from_fn(8, 8, |x, y| y == 0 && x < 4).unwrap(); // 4 px
        let det_mask = BitMask::from_fn(8, 8, |x, y| y == 0 && (1..6).contains(&x)).unwrap(); // 5 px, 3 shared
        let (i, u) = gt_mask.overlap_counts(&det_mask).unwrap();
        assert_eq!((i, u), (3, 6));
        let mut gt = gt_dataset();
        gt.annotations[0].detection.masks = vec![Some(gt_mask), None];
        gt.annotations[0].detection.selected = vec![true, false];
        let scorer = OracleScorer::new(&gt);
        let det = Detection::new(DetectionId(7), VideoId(1), 0.8, vec![Some(det_mask), None]);
        let s = score_detection(&scorer, &video(), &det).unwrap();
        assert!((s.quality[0] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn noisy_with_zero_sigma_is_oracle() {
        let gt = gt_dataset();
        let oracle = OracleScorer::new(&gt);
        let noisy = NoisyOracleScorer::new(oracle.clone(), 0.0, 42);
        let det = Detection::new(
            DetectionId(9),
            VideoId(1),
            0.7,
            vec![Some(rect(0, 3, 0, 2)), Some(rect(3, 8, 4, 7))],
        );
        let a = score_detection(&oracle, &video(), &det).unwrap();
        let b = score_detection(&noisy, &video(), &det).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noisy_is_reproducible_and_bounded() {
        let gt = gt_dataset();
        let noisy = NoisyOracleScorer::new(OracleScorer::new(&gt), 0.3, 7);
        let det = Detection::new(
            DetectionId(9),
            VideoId(1),
            0.7,
            vec![Some(rect(0, 3, 0, 2)), Some(rect(3, 8, 4, 7))],
        );
        let a = score_detection(&noisy, &video(), &det).unwrap();
        let b = score_detection(&noisy, &video(), &det).unwrap();
        assert_eq!(a, b);
        assert!(a.iou_hat.iter().all(|v| (0.0..=1.0).contains(v)));
        let other = NoisyOracleScorer::new(OracleScorer::new(&gt), 0.3, 8);
        assert_ne!(a, score_detection(&other, &video(), &det).unwrap());
    }

    #[test]
    fn spearman_examples() {
        let xs = [0.1, 0.5, 0.3, 0.9];
        assert_eq!(spearman_rank(&xs, &xs).unwrap(), 1.0);
        let rev: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert_eq!(spearman_rank(&xs, &rev).unwrap(), -1.0);
        assert_eq!(
            spearman_rank(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(),
            0.8
        );
    }

    #[test]
    fn spearman_errors() {
        assert!(matches!(
            spearman_rank(&[1.0, 2.0], &[1.0]),
            Err(ScoringError::LengthMismatch { .. })
        ));
        assert_eq!(
            spearman_rank(&[1.0], &[1.0]),
            Err(ScoringError::TooFewSamples(1))
        );
    }

    #[test]
    fn spearman_ties_use_average_ranks() {
        assert_eq!(
            average_ranks(&[3.0, 1.0, 3.0, 2.0]),
            vec![3.5, 1.0, 3.5, 2.0]
        );
    }

    #[test]
    fn csv_format() {
        assert_eq!(
            diagnostics_csv(&[(0.5, 0.75)]),
            "quality,true_iou\n0.5,0.75\n"
        );
    }
}
