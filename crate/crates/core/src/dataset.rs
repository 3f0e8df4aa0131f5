//! Videos, detections and multi-round training datasets, plus their
//! canonical JSON persistence.
//!
//! The on-disk layout is YouTube-VIS-like with two extensions per
//! annotation: a `source` tag and a per-frame `selected` flag array.
//! A frame in which the object is absent is stored as `null`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::write_atomic;
use crate::mask::{rle_decode, rle_encode, BitMask, MaskError, Rle, SoftMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VideoId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DetectionId(pub u64);

impl fmt::Display for VideoId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for DetectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub id: VideoId,
    #[serde(rename = "frames")]
    pub frame_count: usize,
    pub width: u32,
    pub height: u32,
}

/// One object track in one video.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub id: DetectionId,
    pub video_id: VideoId,
    /// Track-level confidence in `[0, 1]`.
    pub confidence: f64,
    /// One entry per frame; `None` means the object is not present.
    pub masks: Vec<Option<BitMask>>,
    pub selected: Vec<bool>,
}

impl Detection {
    /// A detection with every frame unselected.
    pub fn new(
        id: DetectionId,
        video_id: VideoId,
        confidence: f64,
        masks: Vec<Option<BitMask>>,
    ) -> Self {
        let selected = vec![false; masks.len()];
        Self {
            id,
            video_id,
            confidence,
            masks,
            selected,
        }
    }

    pub fn frame_count(&self) -> usize {
        self.masks.len()
    }

    pub fn present_frames(&self) -> impl Iterator<Item = (usize, &BitMask)> {
        self.masks
            .iter()
            .enumerate()
            .filter_map(|(t, m)| m.as_ref().map(|m| (t, m)))
    }

    pub fn selected_count(&self) -> usize {
        self.selected.iter().filter(|s| **s).count()
    }

    /// Mean mask area over the frames where the object is present.
    pub fn mean_area(&self) -> f64 {
        let (sum, n) = self
            .present_frames()
            .fold((0u64, 0u64), |(s, n), (_, m)| (s + m.area(), n + 1));
        if n == 0 {
            0.0
        } else {
            sum as f64 / n as f64
        }
    }

    pub fn select_all_present(mut self) -> Self {
        self.selected = self.masks.iter().map(Option::is_some).collect();
        self
    }
}

impl AsRef<Detection> for Detection {
    fn as_ref(&self) -> &Detection {
        self
    }
}

/// A detector output that still carries its soft (pre-threshold) masks.
///
/// The hard masks of `detection` are the 0.5-binarized soft masks.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDetection {
    pub detection: Detection,
    pub soft_masks: Vec<Option<SoftMask>>,
}

impl RawDetection {
    /// Wraps a detection whose soft masks are unknown; hard masks are lifted
    /// to 0/1 probabilities.
    pub fn from_hard(detection: Detection) -> Self {
        let soft_masks = detection
            .masks
            .iter()
            .map(|m| m.as_ref().map(SoftMask::from_bitmask))
            .collect();
        Self {
            detection,
            soft_masks,
        }
    }
}

impl AsRef<Detection> for RawDetection {
    fn as_ref(&self) -> &Detection {
        &self.detection
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Synthetic,
    Pseudo,
    GroundTruth,
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceTag::Synthetic => "synthetic",
            SourceTag::Pseudo => "pseudo",
            SourceTag::GroundTruth => "ground_truth",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub detection: Detection,
    pub source: SourceTag,
}

/// Training dataset snapshot for one self-training round.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingDataset {
    pub round: u32,
    pub videos: Vec<VideoMeta>,
    pub annotations: Vec<Annotation>,
}

impl TrainingDataset {
    pub fn video(&self, id: VideoId) -> Option<&VideoMeta> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn annotations_for(&self, id: VideoId) -> impl Iterator<Item = &Annotation> {
        self.annotations
            .iter()
            .filter(move |a| a.detection.video_id == id)
    }

    /// Detections grouped by video, in canonical order.
    pub fn detections_by_video(&self) -> BTreeMap<VideoId, Vec<&Detection>> {
        let mut out: BTreeMap<VideoId, Vec<&Detection>> = BTreeMap::new();
        for a in &self.annotations {
            out.entry(a.detection.video_id)
                .or_default()
                .push(&a.detection);
        }
        for dets in out.values_mut() {
            dets.sort_by_key(|d| d.id);
        }
        out
    }

    pub fn video_ids(&self) -> BTreeSet<VideoId> {
        self.videos.iter().map(|v| v.id).collect()
    }

    pub fn max_detection_id(&self) -> Option<DetectionId> {
        self.annotations.iter().map(|a| a.detection.id).max()
    }

    /// Sorts videos by id and annotations by `(video_id, detection_id)`.
    pub fn canonicalize(&mut self) {
        self.videos.sort_by_key(|v| v.id);
        self.annotations
            .sort_by_key(|a| (a.detection.video_id, a.detection.id));
    }

    /// Same videos and round, keeping only annotations with the given tag.
    pub fn filter_source(&self, source: SourceTag) -> TrainingDataset {
        TrainingDataset {
            round: self.round,
            videos: self.videos.clone(),
            annotations: self
                .annotations
                .iter()
                .filter(|a| a.source == source)
                .cloned()
                .collect(),
        }
    }
}

/// One broken dataset invariant.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Violation {
    #[error("DuplicateVideo: video {video} listed more than once")]
    DuplicateVideo { video: VideoId },
    #[error("InvalidVideo: video {video} must have frames >= 1 and positive dimensions")]
    InvalidVideo { video: VideoId },
    #[error("UnknownVideo: detection {detection} references unknown video {video}")]
    UnknownVideo {
        detection: DetectionId,
        video: VideoId,
    },
    #[error("DuplicateDetection: detection id {detection} used more than once")]
    DuplicateDetection { detection: DetectionId },
    #[error(
        "FrameCountMismatch: detection {detection} has {masks} masks and {selected} flags, video has {expected} frames"
    )]
    FrameCountMismatch {
        detection: DetectionId,
        expected: usize,
        masks: usize,
        selected: usize,
    },
    #[error(
        "SelectedWithoutMask: detection {detection} is selected in frame {frame} without a mask"
    )]
    SelectedWithoutMask {
        detection: DetectionId,
        frame: usize,
    },
    #[error("ConfidenceOutOfRange: detection {detection} has confidence {value}")]
    ConfidenceOutOfRange { detection: DetectionId, value: f64 },
    #[error("MaskDimensionMismatch: detection {detection} frame {frame} mask size differs from its video")]
    MaskDimensionMismatch {
        detection: DetectionId,
        frame: usize,
    },
}

impl Violation {
    pub fn detection(&self) -> Option<DetectionId> {
        match self {
            Violation::DuplicateVideo { .. } | Violation::InvalidVideo { .. } => None,
            Violation::UnknownVideo { detection, .. }
            | Violation::DuplicateDetection { detection }
            | Violation::FrameCountMismatch { detection, .. }
            | Violation::SelectedWithoutMask { detection, .. }
            | Violation::ConfidenceOutOfRange { detection, .. }
            | Violation::MaskDimensionMismatch { detection, .. } => Some(*detection),
        }
    }
}

/// Checks a single detection against its video. Video-level and
/// cross-detection invariants are left to [`validate_dataset`].
pub fn validate_detection(det: &Detection, video: &VideoMeta) -> Vec<Violation> {
    let mut out = Vec::new();
    if !(0.0..=1.0).contains(&det.confidence) {
        out.push(Violation::ConfidenceOutOfRange {
            detection: det.id,
            value: det.confidence,
        });
    }
    if det.masks.len() != video.frame_count || det.selected.len() != video.frame_count {
        out.push(Violation::FrameCountMismatch {
            detection: det.id,
            expected: video.frame_count,
            masks: det.masks.len(),
            selected: det.selected.len(),
        });
    }
    for (t, (mask, sel)) in det.masks.iter().zip(&det.selected).enumerate() {
        if *sel && mask.is_none() {
            out.push(Violation::SelectedWithoutMask {
                detection: det.id,
                frame: t,
            });
        }
    }
    for (t, mask) in det.present_frames() {
        if mask.width() != video.width || mask.height() != video.height {
            out.push(Violation::MaskDimensionMismatch {
                detection: det.id,
                frame: t,
            });
        }
    }
    out
}

pub fn validate_dataset(ds: &TrainingDataset) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut videos: BTreeMap<VideoId, &VideoMeta> = BTreeMap::new();
    for v in &ds.videos {
        if videos.insert(v.id, v).is_some() {
            out.push(Violation::DuplicateVideo { video: v.id });
        }
        if v.frame_count == 0 || v.width == 0 || v.height == 0 {
            out.push(Violation::InvalidVideo { video: v.id });
        }
    }
    let mut seen = BTreeSet::new();
    for a in &ds.annotations {
        let det = &a.detection;
        if !seen.insert(det.id) {
            out.push(Violation::DuplicateDetection { detection: det.id });
        }
        match videos.get(&det.video_id) {
            Some(video) => out.extend(validate_detection(det, video)),
            None => out.push(Violation::UnknownVideo {
                detection: det.id,
                video: det.video_id,
            }),
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("IoError: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("ParseError: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("ParseError: detection {detection} frame {frame}: {source}")]
    InvalidMask {
        detection: DetectionId,
        frame: usize,
        #[source]
        source: MaskError,
    },
    #[error("ParseError: detection {detection} frame {frame}: selected flag must be 0 or 1, got {value}")]
    InvalidFlag {
        detection: DetectionId,
        frame: usize,
        value: u8,
    },
    #[error("InvariantViolation: {0}")]
    InvariantViolation(Violation),
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    round: u32,
    videos: Vec<VideoMeta>,
    annotations: Vec<AnnotationFile>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationFile {
    id: DetectionId,
    video_id: VideoId,
    score: f64,
    source: SourceTag,
    segmentations: Vec<Option<Rle>>,
    selected: Vec<u8>,
}

impl AnnotationFile {
    fn into_annotation(self) -> Result<Annotation, DatasetError> {
        let masks = self
            .segmentations
            .iter()
            .enumerate()
            .map(|(frame, seg)| {
                seg.as_ref()
                    .map(|rle| {
                        rle_decode(rle).map_err(|source| DatasetError::InvalidMask {
                            detection: self.id,
                            frame,
                            source,
                        })
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let selected = self
            .selected
            .iter()
            .enumerate()
            .map(|(frame, &value)| match value {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(DatasetError::InvalidFlag {
                    detection: self.id,
                    frame,
                    value,
                }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Annotation {
            detection: Detection {
                id: self.id,
                video_id: self.video_id,
                confidence: self.score,
                masks,
                selected,
            },
            source: self.source,
        })
    }

    fn from_annotation(a: &Annotation) -> Self {
        let d = &a.detection;
        AnnotationFile {
            id: d.id,
            video_id: d.video_id,
            score: d.confidence,
            source: a.source,
            segmentations: d.masks.iter().map(|m| m.as_ref().map(rle_encode)).collect(),
            selected: d.selected.iter().map(|&s| u8::from(s)).collect(),
        }
    }
}

/// Parses dataset JSON without checking cross-record invariants.
pub fn parse_dataset(json: &str) -> Result<TrainingDataset, DatasetError> {
    let file: DatasetFile = serde_json::from_str(json)?;
    let annotations = file
        .annotations
        .into_iter()
        .map(AnnotationFile::into_annotation)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TrainingDataset {
        round: file.round,
        videos: file.videos,
        annotations,
    })
}

/// Canonical serialization: compact JSON, videos sorted by id, annotations
/// by `(video_id, detection_id)`, trailing newline.
pub fn dataset_to_json(ds: &TrainingDataset) -> String {
    let mut videos = ds.videos.clone();
    videos.sort_by_key(|v| v.id);
    let mut annotations: Vec<&Annotation> = ds.annotations.iter().collect();
    annotations.sort_by_key(|a| (a.detection.video_id, a.detection.id));
    let file = DatasetFile {
        round: ds.round,
        videos,
        annotations: annotations
            .into_iter()
            .map(AnnotationFile::from_annotation)
            .collect(),
    };
    let mut s = serde_json::to_string(&file).expect("dataset serialization is infallible");
    s.push('\n');
    s
}

fn read_to_string(path: &Path) -> Result<String, DatasetError> {
    std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Reads a dataset file without validating it.
pub fn read_dataset_unchecked(path: &Path) -> Result<TrainingDataset, DatasetError> {
    parse_dataset(&read_to_string(path)?)
}

pub fn load_dataset(path: &Path) -> Result<TrainingDataset, DatasetError> {
    let ds = read_dataset_unchecked(path)?;
    if let Some(v) = validate_dataset(&ds).into_iter().next() {
        return Err(DatasetError::InvariantViolation(v));
    }
    Ok(ds)
}

pub fn save_dataset(ds: &TrainingDataset, path: &Path) -> Result<(), DatasetError> {
    write_atomic(path, dataset_to_json(ds).as_bytes()).map_err(|source| DatasetError::Io {
        path: path.to_owned(),
        source,
    })
}
