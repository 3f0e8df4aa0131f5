//! Procedural video corpus: moving rectangles and ellipses with exact masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    Annotation, Detection, DetectionId, SourceTag, TrainingDataset, VideoId, VideoMeta,
};
use crate::mask::{mask_iou, BitMask};
use crate::seed::rng_for;

const STREAM_CORPUS: u64 = 0xC0_4215;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_videos: usize,
    pub frames_per_video: usize,
    pub objects_per_video: usize,
    pub width: u32,
    pub height: u32,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_videos: 20,
            frames_per_video: 8,
            objects_per_video: 4,
            width: 160,
            height: 120,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
}

/// An axis-aligned box moving with constant velocity, bouncing off the
/// frame border.
#[derive(Debug, Clone)]
pub(crate) struct MovingObject {
    shape: Shape,
    w: u32,
    h: u32,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
}

impl MovingObject {
    pub(crate) fn random<R: Rng + ?Sized>(rng: &mut R, frame_w: u32, frame_h: u32) -> Self {
        // Pick a COCO size class first so all strata are populated.
        let side: f64 = match rng.random_range(0..3) {
            0 => rng.random_range(16.0..30.0),
            1 => rng.random_range(36.0..80.0),
            _ => rng.random_range(100.0..140.0),
        };
        let aspect: f64 = rng.random_range(0.75..1.33);
        let w = ((side * aspect).round() as u32).clamp(1, frame_w);
        let h = ((side / aspect).round() as u32).clamp(1, frame_h);
        let shape = if rng.random_bool(0.5) {
            Shape::Rect
        } else {
            Shape::Ellipse
        };
        Self {
            shape,
            w,
            h,
            x: rng.random_range(0.0..=f64::from(frame_w - w)),
            y: rng.random_range(0.0..=f64::from(frame_h - h)),
            vx: rng.random_range(-3.0..3.0),
            vy: rng.random_range(-3.0..3.0),
        }
    }

    pub(crate) fn rasterize(&self, frame_w: u32, frame_h: u32) -> BitMask {
        let x0 = self.x.floor() as u32;
        let y0 = self.y.floor() as u32;
        let (w, h) = (self.w, self.h);
        let (cx, cy) = (f64::from(w) / 2.0, f64::from(h) / 2.0);
        BitMask::from_fn(frame_w, frame_h, |x, y| {
            if x < x0 || y < y0 || x >= x0 + w || y >= y0 + h {
                return false;
            }
            match self.shape {
                Shape::Rect => true,
                Shape::Ellipse => {
                    let (lx, ly) = (x - x0, y - y0);
                    if lx == w / 2 && ly == h / 2 {
                        return true;
                    }
                    let dx = (f64::from(lx) + 0.5 - cx) / cx;
                    let dy = (f64::from(ly) + 0.5 - cy) / cy;
                    dx * dx + dy * dy <= 1.0
                }
            }
        })
        .expect("frame dimensions are positive")
    }

    pub(crate) fn step(&mut self, frame_w: u32, frame_h: u32) {
        let max_x = f64::from(frame_w - self.w);
        let max_y = f64::from(frame_h - self.h);
        self.x += self.vx;
        self.y += self.vy;
        if self.x < 0.0 || self.x > max_x {
            self.vx = -self.vx;
            self.x = self.x.clamp(0.0, max_x);
        }
        if self.y < 0.0 || self.y > max_y {
            self.vy = -self.vy;
            self.y = self.y.clamp(0.0, max_y);
        }
    }

    pub(crate) fn track(mut self, frame_w: u32, frame_h: u32, frames: usize) -> Vec<BitMask> {
        (0..frames)
            .map(|_| {
                let m = self.rasterize(frame_w, frame_h);
                self.step(frame_w, frame_h);
                m
            })
            .collect()
    }
}

/// Objects are redrawn until their largest per-frame IoU with every earlier
/// object is below this, so ground-truth tracks never suppress each other.
const MAX_OBJECT_OVERLAP: f64 = 0.3;
const PLACEMENT_ATTEMPTS: usize = 64;

fn max_frame_overlap(track: &[BitMask], others: &[Vec<BitMask>]) -> f64 {
    others
        .iter()
        .flat_map(|o| o.iter().zip(track))
        .map(|(a, b)| mask_iou(a, b).expect("same frame dims"))
        .fold(0.0, f64::max)
}

/// Draws a track, retrying while it overlaps existing tracks too much; if
/// no attempt succeeds the least-overlapping one is used.
fn place_object<R: Rng + ?Sized>(
    rng: &mut R,
    spec: &CorpusSpec,
    existing: &[Vec<BitMask>],
) -> Vec<BitMask> {
    let mut best: Option<(f64, Vec<BitMask>)> = None;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let track = MovingObject::random(rng, spec.width, spec.height).track(
            spec.width,
            spec.height,
            spec.frames_per_video,
        );
        let overlap = max_frame_overlap(&track, existing);
        if overlap < MAX_OBJECT_OVERLAP {
            return track;
        }
        if best.as_ref().is_none_or(|(b, _)| overlap < *b) {
            best = Some((overlap, track));
        }
    }
    best.expect("at least one attempt").1
}

fn generate_videos(
    spec: &CorpusSpec,
    seed: u64,
    first_video: u64,
    first_detection: &mut u64,
    source: SourceTag,
) -> TrainingDataset {
    let mut ds = TrainingDataset::default();
    for i in 0..spec.n_videos as u64 {
        let video = VideoMeta {
            id: VideoId(first_video + i),
            frame_count: spec.frames_per_video,
            width: spec.width,
            height: spec.height,
        };
        let mut rng = rng_for(seed, &[STREAM_CORPUS, video.id.0]);
        let mut tracks: Vec<Vec<BitMask>> = Vec::new();
        for _ in 0..spec.objects_per_video {
            let track = place_object(&mut rng, spec, &tracks);
            tracks.push(track.clone());
            let masks = track.into_iter().map(Some).collect();
            let det = Detection::new(DetectionId(*first_detection), video.id, 1.0, masks)
                .select_all_present();
            *first_detection += 1;
            ds.annotations.push(Annotation {
                detection: det,
                source,
            });
        }
        ds.videos.push(video);
    }
    ds
}

/// Hidden ground truth for `n_videos` unlabeled videos (ids `1..=n`) and a
/// disjoint synthetic training set (ids `n+1..=2n`).
///
/// # Panics
///
/// If any count or dimension in `spec` is zero.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> (TrainingDataset, TrainingDataset) {
    assert!(
        spec.n_videos >= 1
            && spec.frames_per_video >= 1
            && spec.objects_per_video >= 1
            && spec.width >= 1
            && spec.height >= 1,
        "corpus counts and dimensions must be positive"
    );
    let mut next_id = 1u64;
    let gt = generate_videos(spec, seed, 1, &mut next_id, SourceTag::GroundTruth);
    let synthetic = generate_videos(
        spec,
        seed,
        spec.n_videos as u64 + 1,
        &mut next_id,
        SourceTag::Synthetic,
    );
    (gt, synthetic)
}
