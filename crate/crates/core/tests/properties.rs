use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selftrain_core::curation::{
    curate_video, filter_by_confidence, retain, select_labels, spatiotemporal_nms, CurationConfig,
};
use selftrain_core::dataset::{
    validate_dataset, Annotation, Detection, DetectionId, RawDetection, SourceTag, TrainingDataset,
    VideoId, VideoMeta,
};
use selftrain_core::eval::ap_per_threshold;
use selftrain_core::fusion::{merge_dataset, FusionConfig};
use selftrain_core::mask::BitMask;
use selftrain_core::scoring::{score_raw_detection, OracleScorer};
use selftrain_core::seed::rng_for;
use selftrain_core::train::{eligible_frames, pick_source, sample_frames, FrameSample};

const W: u32 = 8;
const H: u32 = 8;

fn rect_mask(r: &mut ChaCha8Rng) -> BitMask {
    let x0 = r.random_range(0..W);
    let x1 = r.random_range(x0 + 1..=W);
    let y0 = r.random_range(0..H);
    let y1 = r.random_range(y0 + 1..=H);
    BitMask::from_fn(W, H, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1).unwrap()
}

fn detections(seed: u64, n: usize, frames: usize) -> Vec<Detection> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n as u64)
        .map(|i| {
            let masks = (0..frames)
                .map(|_| r.random_bool(0.85).then(|| rect_mask(&mut r)))
                .collect();
            let conf = f64::from(r.random_range(1u8..=10)) / 10.0;
            Detection::new(DetectionId(i + 1), VideoId(1), conf, masks)
        })
        .collect()
}

fn video(frames: usize) -> VideoMeta {
    VideoMeta {
        id: VideoId(1),
        frame_count: frames,
        width: W,
        height: H,
    }
}

fn dataset(dets: Vec<Detection>, frames: usize, source: SourceTag) -> TrainingDataset {
    let mut ds = TrainingDataset {
        round: 0,
        videos: vec![video(frames)],
        annotations: dets
            .into_iter()
            .map(|detection| Annotation { detection, source })
            .collect(),
    };
    ds.canonicalize();
    ds
}

fn selected_pairs(dets: &[Detection]) -> BTreeSet<(DetectionId, usize)> {
    dets.iter()
        .flat_map(|d| {
            d.selected
                .iter()
                .enumerate()
                .filter(|(_, s)| **s)
                .map(move |(t, _)| (d.id, t))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn nms_is_idempotent_and_a_subset(seed in any::<u64>(), n in 0usize..9, frames in 1usize..5, thr in 0.05f64..1.0) {
        let dets = detections(seed, n, frames);
        let kept = spatiotemporal_nms(dets.clone(), thr).unwrap();
        let ids: BTreeSet<_> = dets.iter().map(|d| d.id).collect();
        prop_assert!(kept.iter().all(|d| ids.contains(&d.id)));
        prop_assert_eq!(spatiotemporal_nms(kept.clone(), thr).unwrap(), kept.clone());
        // the most confident detection always survives
        if let Some(top) = dets.iter().max_by(|a, b| a.confidence.total_cmp(&b.confidence).then(b.id.cmp(&a.id))) {
            prop_assert_eq!(kept[0].id, top.id);
        }
    }

    #[test]
    fn higher_tau_selects_a_subset(seed in any::<u64>(), n in 1usize..7, frames in 1usize..5, lo in 0.0f64..1.0, hi in 0.0f64..1.0) {
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        let gt = detections(seed ^ 0x55, 3, frames);
        let oracle = OracleScorer::new(&dataset(gt, frames, SourceTag::GroundTruth));
        let raw: Vec<RawDetection> = detections(seed, n, frames).into_iter().map(RawDetection::from_hard).collect();
        let at = |tau: f64| {
            let config = CurationConfig { quality_threshold: tau, ..CurationConfig::default() };
            curate_video(&oracle, &video(frames), raw.clone(), &config).unwrap()
        };
        let (low, high) = (at(lo), at(hi));
        prop_assert!(selected_pairs(&high).is_subset(&selected_pairs(&low)));
        let low_ids: BTreeSet<_> = low.iter().map(|d| d.id).collect();
        prop_assert!(high.iter().all(|d| low_ids.contains(&d.id)));
    }

    #[test]
    fn curation_composes_from_its_stages(seed in any::<u64>(), n in 0usize..8, frames in 1usize..5, tau in 0.0f64..1.0) {
        let gt = detections(seed ^ 0xAA, 3, frames);
        let oracle = OracleScorer::new(&dataset(gt, frames, SourceTag::GroundTruth));
        let raw: Vec<RawDetection> = detections(seed, n, frames).into_iter().map(RawDetection::from_hard).collect();
        let config = CurationConfig { quality_threshold: tau, ..CurationConfig::default() };
        let whole = curate_video(&oracle, &video(frames), raw.clone(), &config).unwrap();

        let filtered = filter_by_confidence(raw, config.confidence_min);
        let kept = spatiotemporal_nms(filtered, config.nms_iou).unwrap();
        let scored = kept.iter().map(|r| score_raw_detection(&oracle, &video(frames), r).unwrap()).collect();
        prop_assert_eq!(whole, retain(select_labels(scored, tau)));
    }

    #[test]
    fn merge_keeps_datasets_valid(seed in any::<u64>(), n_old in 0usize..6, n_new in 0usize..6, frames in 1usize..5) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut flag = |d: &mut Detection| {
            d.selected = d.masks.iter().map(|m| m.is_some() && r.random_bool(0.6)).collect();
        };
        let mut old = detections(seed, n_old, frames);
        old.iter_mut().for_each(&mut flag);
        let mut new = detections(seed.wrapping_add(1), n_new, frames);
        new.iter_mut().for_each(&mut flag);
        let current = dataset(old.clone(), frames, SourceTag::Pseudo);
        let merged = merge_dataset(&current, &new, &[], &FusionConfig::default()).unwrap();

        prop_assert!(validate_dataset(&merged).is_empty());
        prop_assert_eq!(merged.round, 1);
        prop_assert!(merged.annotations.len() <= n_old + n_new);
        prop_assert!(merged.annotations.len() >= n_old.max(n_new.min(1)));
        let ids: BTreeSet<_> = merged.annotations.iter().map(|a| a.detection.id).collect();
        prop_assert_eq!(ids.len(), merged.annotations.len());
        // selected frame count never drops: every flag is an OR of inputs
        let before: usize = old.iter().map(Detection::selected_count).max().unwrap_or(0);
        let after: usize = merged.annotations.iter().map(|a| a.detection.selected_count()).max().unwrap_or(0);
        prop_assert!(after >= before);
    }

    #[test]
    fn eligible_frames_shrink_as_detections_are_added(seed in any::<u64>(), n in 1usize..6, frames in 1usize..9) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut dets = detections(seed, n + 1, frames);
        for d in &mut dets {
            d.selected = d.masks.iter().map(|m| m.is_some() && r.random_bool(0.8)).collect();
        }
        let fewer = eligible_frames(&dets[..n]).unwrap();
        let more = eligible_frames(&dets).unwrap();
        prop_assert!(more.is_subset(&fewer));
    }

    #[test]
    fn sampled_frames_are_eligible_and_sorted(seed in any::<u64>(), eligible in prop::collection::btree_set(0usize..30, 0..12)) {
        let mut rng = rng_for(seed, &[]);
        match sample_frames(&eligible, &mut rng) {
            FrameSample::Skip => prop_assert!(eligible.len() < 3),
            FrameSample::Frames(f) => {
                prop_assert!(f[0] < f[1] && f[1] < f[2]);
                prop_assert!(f.iter().all(|t| eligible.contains(t)));
            }
        }
    }

    #[test]
    fn ap_falls_as_the_iou_threshold_rises(seed in any::<u64>(), n_pred in 0usize..6, n_gt in 1usize..5, frames in 1usize..4) {
        let gt = dataset(detections(seed, n_gt, frames), frames, SourceTag::GroundTruth);
        let pred = dataset(detections(seed ^ 0x77, n_pred, frames), frames, SourceTag::Pseudo);
        let ap = ap_per_threshold(&pred, &gt).unwrap();
        prop_assert!(ap.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{:?}", ap);
    }

    #[test]
    fn dropping_a_false_positive_never_lowers_ap(seed in any::<u64>(), n_pred in 1usize..6, n_gt in 1usize..4, frames in 1usize..4) {
        let gt_dets = detections(seed, n_gt, frames);
        let mut preds = detections(seed ^ 0x99, n_pred, frames);
        // a prediction disjoint from every truth is a false positive at every threshold
        let empty_frames = vec![None; frames];
        preds.push(Detection::new(DetectionId(999), VideoId(1), 0.55, empty_frames));
        let gt = dataset(gt_dets, frames, SourceTag::GroundTruth);
        let with = ap_per_threshold(&dataset(preds.clone(), frames, SourceTag::Pseudo), &gt).unwrap();
        preds.pop();
        let without = ap_per_threshold(&dataset(preds, frames, SourceTag::Pseudo), &gt).unwrap();
        for (a, b) in with.iter().zip(&without) {
            prop_assert!(b + 1e-12 >= *a, "with {:?} without {:?}", with, without);
        }
    }
}

#[test]
fn three_frame_subsets_are_uniform() {
    // 10 eligible frames give C(10,3) = 120 subsets; chi-square over 10^5
    // draws has 119 degrees of freedom (mean 119, sd sqrt(238))
    let eligible: BTreeSet<usize> = (0..10).collect();
    let mut rng = rng_for(12345, &[]);
    let draws = 100_000;
    let mut counts: BTreeMap<[usize; 3], u64> = BTreeMap::new();
    for _ in 0..draws {
        let FrameSample::Frames(f) = sample_frames(&eligible, &mut rng) else {
            panic!("ten eligible frames never skip");
        };
        *counts.entry(f).or_default() += 1;
    }
    assert_eq!(counts.len(), 120);
    let expected = draws as f64 / 120.0;
    let chi2: f64 = counts
        .values()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let bound = 119.0 + 3.0 * 238f64.sqrt();
    assert!(chi2 < bound, "chi-square {chi2:.1} exceeds {bound:.1}");
}

#[test]
fn sources_split_evenly() {
    let mut rng = rng_for(777, &[]);
    let n = 100_000;
    let synthetic = (0..n)
        .filter(|_| pick_source(true, true, &mut rng).unwrap() == SourceTag::Synthetic)
        .count();
    let frac = synthetic as f64 / n as f64;
    assert!((0.49..=0.51).contains(&frac), "synthetic fraction {frac}");
}
