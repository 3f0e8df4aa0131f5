//! Adaptive fusion of newly retained detections into the training dataset.
//!
//! Detections of videos the dataset has never seen are bulk-inserted.
//! For known videos each new detection is folded into the existing set:
//! if it overlaps an existing detection (mask IoU at or above the threshold
//! in some shared frame) the two are fused frame by frame, otherwise it is
//! simply added.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curation::best_frame_iou;
use crate::dataset::{
    Annotation, Detection, DetectionId, SourceTag, TrainingDataset, VideoId, VideoMeta,
};
use crate::mask::{mask_iou, MaskError};

pub const DEFAULT_OVERLAP_IOU: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("VideoMismatch: detections {left} and {right} belong to different videos or lengths")]
    VideoMismatch {
        left: DetectionId,
        right: DetectionId,
    },
    #[error("NoOverlap: detections {new} and {existing} do not overlap")]
    NoOverlap {
        new: DetectionId,
        existing: DetectionId,
    },
    #[error("UnknownVideo: detection {detection} references unknown video {video}")]
    UnknownVideo {
        detection: DetectionId,
        video: VideoId,
    },
    #[error("FrameCountMismatch: detection {detection} has {actual} frames, video {video} has {expected}")]
    FrameCountMismatch {
        detection: DetectionId,
        video: VideoId,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub overlap_iou: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            overlap_iou: DEFAULT_OVERLAP_IOU,
        }
    }
}

/// Hands out detection ids above every id seen so far.
#[derive(Debug, Clone)]
pub struct IdAllocator {
    next: u64,
}

impl IdAllocator {
    pub fn starting_at(next: u64) -> Self {
        Self { next }
    }

    /// First id above every id in `ids`.
    pub fn after<'a>(ids: impl IntoIterator<Item = &'a DetectionId>) -> Self {
        Self {
            next: ids.into_iter().map(|d| d.0 + 1).max().unwrap_or(1),
        }
    }

    pub fn fresh(&mut self) -> DetectionId {
        let id = DetectionId(self.next);
        self.next += 1;
        id
    }
}

fn same_track_space(a: &Detection, b: &Detection) -> Result<(), FusionError> {
    if a.video_id != b.video_id || a.frame_count() != b.frame_count() {
        return Err(FusionError::VideoMismatch {
            left: a.id,
            right: b.id,
        });
    }
    Ok(())
}

/// True iff some frame has both masks present with IoU >= `iou`.
pub fn overlaps(d_new: &Detection, d_exist: &Detection, iou: f64) -> Result<bool, FusionError> {
    same_track_space(d_new, d_exist)?;
    for (a, b) in d_new.masks.iter().zip(&d_exist.masks) {
        if let (Some(a), Some(b)) = (a, b) {
            if mask_iou(a, b)? >= iou {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

/// Frame-wise fusion of two overlapping detections.
///
/// `selected = max(new, existing)`; the existing mask is kept only where the
/// existing frame is selected and the new one is not. The result carries the
/// new detection's confidence and the id `fused_id`.
pub fn fuse_pair(
    d_new: &Detection,
    d_exist: &Detection,
    config: &FusionConfig,
    fused_id: DetectionId,
) -> Result<Detection, FusionError> {
    if !overlaps(d_new, d_exist, config.overlap_iou)? {
        return Err(FusionError::NoOverlap {
            new: d_new.id,
            existing: d_exist.id,
        });
    }
    let mut masks = Vec::with_capacity(d_new.frame_count());
    let mut selected = Vec::with_capacity(d_new.frame_count());
    for t in 0..d_new.frame_count() {
        let (s_new, s_exist) = (d_new.selected[t], d_exist.selected[t]);
        selected.push(s_new || s_exist);
        masks.push(if s_exist && !s_new {
            d_exist.masks[t].clone()
        } else {
            d_new.masks[t].clone()
        });
    }
    Ok(Detection {
        id: fused_id,
        video_id: d_new.video_id,
        confidence: d_new.confidence,
        masks,
        selected,
    })
}

/// Adds `d_new` to `existing`, fusing it with the overlapping existing
/// detection of highest best-frame IoU (ties: lower id) if there is one.
pub fn insert_detection(
    mut existing: Vec<Detection>,
    d_new: Detection,
    config: &FusionConfig,
    ids: &mut IdAllocator,
) -> Result<Vec<Detection>, FusionError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, e) in existing.iter().enumerate() {
        if !overlaps(&d_new, e, config.overlap_iou)? {
            continue;
        }
        let iou = best_frame_iou(&d_new, e)?;
        let better = match best {
            None => true,
            Some((j, b)) => iou > b || (iou == b && e.id < existing[j].id),
        };
        if better {
            best = Some((i, iou));
        }
    }
    match best {
        None => existing.push(d_new),
        Some((i, _)) => {
            let matched = existing.remove(i);
            existing.push(fuse_pair(&d_new, &matched, config, ids.fresh())?);
        }
    }
    Ok(existing)
}

/// Left fold of [`insert_detection`] over `retained_new` in ascending id order.
pub fn merge_video(
    existing: Vec<Detection>,
    mut retained_new: Vec<Detection>,
    config: &FusionConfig,
    ids: &mut IdAllocator,
) -> Result<Vec<Detection>, FusionError> {
    retained_new.sort_by_key(|d| d.id);
    retained_new
        .into_iter()
        .try_fold(existing, |acc, d| insert_detection(acc, d, config, ids))
}

/// Produces the next-round dataset.
///
/// `catalog` supplies metadata for videos not yet in `current`. Retained
/// detections whose id is already taken get a fresh id. Synthetic
/// annotations never take part in fusion; every inserted or fused
/// detection is tagged [`SourceTag::Pseudo`].
pub fn merge_dataset(
    current: &TrainingDataset,
    retained: &[Detection],
    catalog: &[VideoMeta],
    config: &FusionConfig,
) -> Result<TrainingDataset, FusionError> {
    let known: BTreeMap<VideoId, &VideoMeta> = current.videos.iter().map(|v| (v.id, v)).collect();
    let extra: BTreeMap<VideoId, &VideoMeta> = catalog.iter().map(|v| (v.id, v)).collect();

    let mut by_video: BTreeMap<VideoId, Vec<Detection>> = BTreeMap::new();
    for d in retained {
        let video = known
            .get(&d.video_id)
            .or_else(|| extra.get(&d.video_id))
            .ok_or(FusionError::UnknownVideo {
                detection: d.id,
                video: d.video_id,
            })?;
        if d.frame_count() != video.frame_count || d.selected.len() != video.frame_count {
            return Err(FusionError::FrameCountMismatch {
                detection: d.id,
                video: video.id,
                expected: video.frame_count,
                actual: d.frame_count(),
            });
        }
        by_video.entry(d.video_id).or_default().push(d.clone());
    }

    let original_tags: HashMap<DetectionId, SourceTag> = current
        .annotations
        .iter()
        .map(|a| (a.detection.id, a.source))
        .collect();
    let mut ids = IdAllocator::after(original_tags.keys().chain(retained.iter().map(|d| &d.id)));
    let mut used: BTreeSet<DetectionId> = original_tags.keys().copied().collect();
    for dets in by_video.values_mut() {
        dets.sort_by_key(|d| d.id);
    }
    for dets in by_video.values_mut() {
        for d in dets.iter_mut() {
            if !used.insert(d.id) {
                d.id = ids.fresh();
                used.insert(d.id);
            }
        }
    }

    let mut videos = current.videos.clone();
    let mut annotations: Vec<Annotation> = current
        .annotations
        .iter()
        .filter(|a| {
            a.source == SourceTag::Synthetic || !by_video.contains_key(&a.detection.video_id)
        })
        .cloned()
        .collect();

    for (video_id, new_dets) in by_video {
        let merged = if known.contains_key(&video_id) {
            let existing: Vec<Detection> = current
                .annotations_for(video_id)
                .filter(|a| a.source != SourceTag::Synthetic)
                .map(|a| a.detection.clone())
                .collect();
            merge_video(existing, new_dets, config, &mut ids)?
        } else {
            videos.push(extra[&video_id].clone());
            new_dets
        };
        annotations.extend(merged.into_iter().map(|d| {
            Annotation {
                source: original_tags
                    .get(&d.id)
                    .copied()
                    .unwrap_or(SourceTag::Pseudo),
                detection: d,
            }
        }));
    }

    let mut next = TrainingDataset {
        round: current.round + 1,
        videos,
        annotations,
    };
    next.canonicalize();
    Ok(next)
}
