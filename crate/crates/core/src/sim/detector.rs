//! Seeded perturbation detector standing in for a trained VIS model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Detection, DetectionId, RawDetection, VideoMeta};
use crate::eval::track_iou;
use crate::mask::{binarize, BitMask, SoftMask};
use crate::scoring::BINARIZE_THRESHOLD;
use crate::seed::rng_for;
use crate::sim::corpus::MovingObject;

const STREAM_DETECT: u64 = 0x00DE_7EC7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorNoise {
    /// Maximum shift / morphology radius at fidelity 0, in pixels.
    pub jitter_radius: u32,
    pub miss_rate: f64,
    pub false_positive_rate: f64,
    /// Per-frame probability of losing the object.
    pub fragment_rate: f64,
    /// Half-width of the uniform noise added to the realized IoU to form
    /// the confidence.
    pub confidence_noise: f64,
}

impl Default for DetectorNoise {
    fn default() -> Self {
        Self {
            jitter_radius: 4,
            miss_rate: 0.1,
            false_positive_rate: 0.3,
            fragment_rate: 0.1,
            confidence_noise: 0.1,
        }
    }
}

impl DetectorNoise {
    pub fn none() -> Self {
        Self {
            jitter_radius: 0,
            miss_rate: 0.0,
            false_positive_rate: 0.0,
            fragment_rate: 0.0,
            confidence_noise: 0.0,
        }
    }
}

fn dilate_rows(bits: &[bool], w: usize, h: usize, k: usize) -> Vec<bool> {
    let mut out = vec![false; bits.len()];
    let mut prefix = vec![0u32; w + 1];
    for y in 0..h {
        let row = &bits[y * w..(y + 1) * w];
        for x in 0..w {
            prefix[x + 1] = prefix[x] + u32::from(row[x]);
        }
        for x in 0..w {
            let lo = x.saturating_sub(k);
            let hi = (x + k + 1).min(w);
            out[y * w + x] = prefix[hi] > prefix[lo];
        }
    }
    out
}

fn transpose(bits: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut out = vec![false; bits.len()];
    for y in 0..h {
        for x in 0..w {
            out[x * h + y] = bits[y * w + x];
        }
    }
    out
}

/// Square (Chebyshev) dilation of radius `k`.
pub fn dilate(mask: &BitMask, k: u32) -> BitMask {
    if k == 0 {
        return mask.clone();
    }
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let rows = dilate_rows(&mask.to_bools(), w, h, k as usize);
    let cols = dilate_rows(&transpose(&rows, w, h), h, w, k as usize);
    BitMask::from_bools(mask.width(), mask.height(), &transpose(&cols, h, w))
        .expect("dimensions preserved")
}

/// Square erosion of radius `k`; pixels beyond the border count as set.
pub fn erode(mask: &BitMask, k: u32) -> BitMask {
    let inverted: Vec<bool> = mask.to_bools().into_iter().map(|b| !b).collect();
    let inv = BitMask::from_bools(mask.width(), mask.height(), &inverted).expect("same dims");
    let grown: Vec<bool> = dilate(&inv, k).to_bools().into_iter().map(|b| !b).collect();
    BitMask::from_bools(mask.width(), mask.height(), &grown).expect("same dims")
}

pub fn shift(mask: &BitMask, dx: i32, dy: i32) -> BitMask {
    let (w, h) = (mask.width() as i64, mask.height() as i64);
    BitMask::from_fn(mask.width(), mask.height(), |x, y| {
        let sx = x as i64 - dx as i64;
        let sy = y as i64 - dy as i64;
        sx >= 0 && sy >= 0 && sx < w && sy < h && mask.get(sx as u32, sy as u32)
    })
    .expect("dimensions preserved")
}

/// One random perturbation of radius `k` drawn from `0..=radius`: a shift
/// by `k` pixels, a dilation, or an erosion.
fn jitter<R: Rng + ?Sized>(rng: &mut R, gt: &BitMask, radius: u32) -> BitMask {
    let k = rng.random_range(0..=radius);
    if k == 0 {
        return gt.clone();
    }
    let out = match rng.random_range(0..4) {
        0 => {
            let s = k as i32;
            let (dx, dy) = [(s, 0), (-s, 0), (0, s), (0, -s)][rng.random_range(0..4)];
            shift(gt, dx, dy)
        }
        1 | 2 => dilate(gt, k),
        _ => erode(gt, k),
    };
    if out.is_empty() {
        gt.clone()
    } else {
        out
    }
}

/// Soft mask whose 0.5-binarization is exactly `mask`: values in
/// `[0.51, 1]` inside, `[0, 0.49)` in a two-pixel band outside, 0 elsewhere.
fn soften<R: Rng + ?Sized>(rng: &mut R, mask: &BitMask) -> SoftMask {
    let band = dilate(mask, 2);
    let mut values = Vec::with_capacity(mask.pixel_count());
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            let v = if mask.get(x, y) {
                0.51 + 0.49 * rng.random::<f32>()
            } else if band.get(x, y) {
                0.49 * rng.random::<f32>()
            } else {
                0.0
            };
            values.push(v.min(1.0));
        }
    }
    SoftMask::new(mask.width(), mask.height(), values).expect("values in range")
}

fn confidence<R: Rng + ?Sized>(rng: &mut R, realized_iou: f64, noise: f64) -> f64 {
    let u: f64 = rng.random_range(-1.0..1.0);
    (realized_iou + u * noise).clamp(0.0, 1.0)
}

fn best_gt_iou(det: &Detection, gt_tracks: &[&Detection]) -> f64 {
    gt_tracks
        .iter()
        .filter_map(|g| track_iou(det, g).ok())
        .fold(0.0, f64::max)
}

fn build<R: Rng + ?Sized>(
    rng: &mut R,
    id: DetectionId,
    video: &VideoMeta,
    hard: Vec<Option<BitMask>>,
) -> RawDetection {
    let soft_masks: Vec<Option<SoftMask>> = hard
        .iter()
        .map(|m| m.as_ref().map(|m| soften(rng, m)))
        .collect();
    let masks = soft_masks
        .iter()
        .map(|s| s.as_ref().map(|s| binarize(s, BINARIZE_THRESHOLD)))
        .collect();
    RawDetection {
        detection: Detection::new(id, video.id, 0.0, masks),
        soft_masks,
    }
}

/// Perturbed detections of one video's ground-truth tracks.
///
/// Each track is missed with probability `miss_rate`; otherwise every frame
/// is shifted, dilated or eroded by up to `ceil(jitter_radius * (1 -
/// fidelity))` pixels and may be dropped with probability `fragment_rate`
/// (at least one frame always survives). Each track slot also spawns a
/// spurious track with probability `false_positive_rate`: half of them
/// near-duplicates of the last emitted detection, the rest random moving
/// blobs. Confidences are the realized track IoU plus uniform noise.
/// Detection ids run upward from `first_id` in emission order.
pub fn simulate_detector(
    video: &VideoMeta,
    gt_tracks: &[&Detection],
    noise: &DetectorNoise,
    fidelity: f64,
    seed: u64,
    first_id: u64,
) -> Vec<RawDetection> {
    let fidelity = fidelity.clamp(0.0, 1.0);
    let radius = (f64::from(noise.jitter_radius) * (1.0 - fidelity)).ceil() as u32;
    let mut rng = rng_for(seed, &[STREAM_DETECT, video.id.0]);
    let mut out: Vec<RawDetection> = Vec::new();
    let mut next_id = first_id;
    let mut fresh = || {
        let id = DetectionId(next_id);
        next_id += 1;
        id
    };
    let mut last_true: Option<Vec<Option<BitMask>>> = None;

    for gt in gt_tracks {
        if !rng.random_bool(noise.miss_rate.clamp(0.0, 1.0)) {
            let mut hard: Vec<Option<BitMask>> = gt
                .masks
                .iter()
                .map(|m| {
                    let m = m.as_ref()?;
                    let dropped = rng.random_bool(noise.fragment_rate.clamp(0.0, 1.0));
                    let j = jitter(&mut rng, m, radius);
                    (!dropped).then_some(j)
                })
                .collect();
            if hard.iter().all(Option::is_none) {
                if let Some(t) = gt.masks.iter().position(Option::is_some) {
                    hard[t] = gt.masks[t].clone();
                }
            }
            let mut raw = build(&mut rng, fresh(), video, hard.clone());
            raw.detection.confidence = confidence(
                &mut rng,
                best_gt_iou(&raw.detection, gt_tracks),
                noise.confidence_noise,
            );
            last_true = Some(hard);
            out.push(raw);
        }

        if rng.random_bool(noise.false_positive_rate.clamp(0.0, 1.0)) {
            let hard: Vec<Option<BitMask>> = match (&last_true, rng.random_bool(0.5)) {
                (Some(src), true) => src
                    .iter()
                    .map(|m| m.as_ref().map(|m| jitter(&mut rng, m, 2)))
                    .collect(),
                _ => MovingObject::random(&mut rng, video.width, video.height)
                    .track(video.width, video.height, video.frame_count)
                    .into_iter()
                    .map(Some)
                    .collect(),
            };
            let mut raw = build(&mut rng, fresh(), video, hard);
            raw.detection.confidence = confidence(
                &mut rng,
                best_gt_iou(&raw.detection, gt_tracks),
                noise.confidence_noise,
            );
            out.push(raw);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::corpus::{generate_corpus, CorpusSpec};

    #[test]
    fn morphology_basics() {
        let m = BitMask::from_fn(7, 7, |x, y| x == 3 && y == 3).unwrap();
        assert_eq!(dilate(&m, 1).area(), 9);
        assert_eq!(dilate(&m, 2).area(), 25);
        assert_eq!(erode(&dilate(&m, 2), 2), m);
        assert!(shift(&m, 1, -1).get(4, 2));
        assert!(shift(&m, 10, 0).is_empty());
    }

    fn corpus() -> (crate::dataset::TrainingDataset, CorpusSpec) {
        let spec = CorpusSpec {
            n_videos: 3,
            frames_per_video: 5,
            objects_per_video: 3,
            width: 96,
            height: 80,
        };
        (generate_corpus(&spec, 21).0, spec)
    }

    #[test]
    fn identity_perturbation() {
        let (gt, _) = corpus();
        for video in &gt.videos {
            let tracks: Vec<&Detection> =
                gt.annotations_for(video.id).map(|a| &a.detection).collect();
            let dets = simulate_detector(video, &tracks, &DetectorNoise::none(), 1.0, 5, 100);
            assert_eq!(dets.len(), tracks.len());
            for (d, g) in dets.iter().zip(&tracks) {
                assert_eq!(d.detection.masks, g.masks);
                assert_eq!(d.detection.confidence, 1.0);
            }
        }
    }

    #[test]
    fn all_missed_without_false_positives() {
        let (gt, _) = corpus();
        let noise = DetectorNoise {
            miss_rate: 1.0,
            false_positive_rate: 0.0,
            ..DetectorNoise::default()
        };
        let video = &gt.videos[0];
        let tracks: Vec<&Detection> = gt.annotations_for(video.id).map(|a| &a.detection).collect();
        assert!(simulate_detector(video, &tracks, &noise, 0.5, 1, 1).is_empty());
        let noise = DetectorNoise {
            false_positive_rate: 1.0,
            ..noise
        };
        assert_eq!(
            simulate_detector(video, &tracks, &noise, 0.5, 1, 1).len(),
            tracks.len()
        );
    }

    #[test]
    fn soft_masks_binarize_to_hard_masks() {
        let (gt, _) = corpus();
        let video = &gt.videos[1];
        let tracks: Vec<&Detection> = gt.annotations_for(video.id).map(|a| &a.detection).collect();
        for raw in simulate_detector(video, &tracks, &DetectorNoise::default(), 0.0, 3, 1) {
            for (s, h) in raw.soft_masks.iter().zip(&raw.detection.masks) {
                assert_eq!(s.as_ref().map(|s| binarize(s, 0.5)).as_ref(), h.as_ref());
            }
            assert!((0.0..=1.0).contains(&raw.detection.confidence));
        }
    }
}
