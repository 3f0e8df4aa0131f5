//! Training-side helpers: eligible frames, 3-frame sampling, balanced
//! source mixing and DropLoss gating.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Detection, SourceTag, TrainingDataset, VideoId};
use crate::mask::{mask_iou, BitMask, MaskError};
use crate::seed::rng_for;

pub const FRAMES_PER_SAMPLE: usize = 3;
pub const DEFAULT_DROP_LOSS_TAU: f64 = 0.01;
/// Probability that a batch is drawn from the synthetic pool.
pub const SYNTHETIC_SOURCE_PROBABILITY: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("NoDetections: eligible frames need at least one detection")]
    NoDetections,
    #[error("BothPoolsEmpty: neither synthetic nor pseudo-labelled videos are available")]
    BothPoolsEmpty,
    #[error("LengthMismatch: {predictions} predictions but {losses} losses")]
    LengthMismatch { predictions: usize, losses: usize },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainBatchSpec {
    pub video_id: VideoId,
    /// Three distinct ascending frame indices.
    pub frames: [usize; FRAMES_PER_SAMPLE],
    pub source: SourceTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameSample {
    Frames([usize; FRAMES_PER_SAMPLE]),
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropLossConfig {
    pub tau_iou: f64,
}

impl Default for DropLossConfig {
    fn default() -> Self {
        Self {
            tau_iou: DEFAULT_DROP_LOSS_TAU,
        }
    }
}

/// Frames in which every detection of the video is selected.
pub fn eligible_frames<D: AsRef<Detection>>(dets: &[D]) -> Result<BTreeSet<usize>, TrainError> {
    let first = dets.first().ok_or(TrainError::NoDetections)?.as_ref();
    Ok((0..first.frame_count())
        .filter(|&t| {
            dets.iter()
                .all(|d| d.as_ref().selected.get(t).copied().unwrap_or(false))
        })
        .collect())
}

/// Uniform 3-subset of `eligible`, sorted ascending; `Skip` when fewer than
/// three frames are eligible.
pub fn sample_frames<R: Rng + ?Sized>(eligible: &BTreeSet<usize>, rng: &mut R) -> FrameSample {
    if eligible.len() < FRAMES_PER_SAMPLE {
        return FrameSample::Skip;
    }
    let frames: Vec<usize> = eligible.iter().copied().collect();
    let mut picked: Vec<usize> = sample(rng, frames.len(), FRAMES_PER_SAMPLE)
        .into_iter()
        .map(|i| frames[i])
        .collect();
    picked.sort_unstable();
    FrameSample::Frames([picked[0], picked[1], picked[2]])
}

/// Synthetic or pseudo with equal probability; a single non-empty pool is
/// always chosen.
pub fn pick_source<R: Rng + ?Sized>(
    synthetic_available: bool,
    pseudo_available: bool,
    rng: &mut R,
) -> Result<SourceTag, TrainError> {
    match (synthetic_available, pseudo_available) {
        (false, false) => Err(TrainError::BothPoolsEmpty),
        (true, false) => Ok(SourceTag::Synthetic),
        (false, true) => Ok(SourceTag::Pseudo),
        (true, true) => Ok(if rng.random_bool(SYNTHETIC_SOURCE_PROBABILITY) {
            SourceTag::Synthetic
        } else {
            SourceTag::Pseudo
        }),
    }
}

/// Zeroes the loss of every prediction whose best IoU against the ground
/// truth is not strictly above `tau`. An empty ground-truth set gives
/// IoU 0 for all predictions.
pub fn drop_loss_gate(
    pred_masks: &[BitMask],
    gt_masks: &[BitMask],
    losses: &[f64],
    tau: f64,
) -> Result<Vec<f64>, TrainError> {
    if pred_masks.len() != losses.len() {
        return Err(TrainError::LengthMismatch {
            predictions: pred_masks.len(),
            losses: losses.len(),
        });
    }
    pred_masks
        .iter()
        .zip(losses)
        .map(|(p, &loss)| {
            let mut best = 0.0f64;
            for g in gt_masks {
                best = best.max(mask_iou(p, g)?);
            }
            Ok(if best > tau { loss } else { 0.0 })
        })
        .collect()
}

/// Outcome of building a batch manifest from a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub batches: Vec<TrainBatchSpec>,
    /// Videos left out because fewer than three frames are eligible.
    pub skipped_videos: Vec<VideoId>,
}

/// Draws `n_batches` training samples, alternating sources 50/50.
///
/// A video joins the synthetic pool if it has synthetic annotations and the
/// pseudo pool if it has pseudo annotations; eligibility is computed over
/// all of its detections.
pub fn plan_batches(
    ds: &TrainingDataset,
    n_batches: usize,
    seed: u64,
) -> Result<BatchPlan, TrainError> {
    let mut synthetic = Vec::new();
    let mut pseudo = Vec::new();
    let mut skipped_videos = Vec::new();
    for (video, dets) in ds.detections_by_video() {
        let eligible = eligible_frames(&dets)?;
        if eligible.len() < FRAMES_PER_SAMPLE {
            skipped_videos.push(video);
            continue;
        }
        let sources: BTreeSet<SourceTag> = ds.annotations_for(video).map(|a| a.source).collect();
        if sources.contains(&SourceTag::Synthetic) {
            synthetic.push((video, eligible.clone()));
        }
        if sources.contains(&SourceTag::Pseudo) {
            pseudo.push((video, eligible));
        }
    }
    let mut rng = rng_for(seed, &[0x5a4d_504c]);
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let source = pick_source(!synthetic.is_empty(), !pseudo.is_empty(), &mut rng)?;
        let pool = if source == SourceTag::Synthetic {
            &synthetic
        } else {
            &pseudo
        };
        let (video_id, eligible) = &pool[rng.random_range(0..pool.len())];
        let FrameSample::Frames(frames) = sample_frames(eligible, &mut rng) else {
            unreachable!("pooled videos have at least three eligible frames");
        };
        batches.push(TrainBatchSpec {
            video_id: *video_id,
            frames,
            source,
        });
    }
    Ok(BatchPlan {
        batches,
        skipped_videos,
    })
}
