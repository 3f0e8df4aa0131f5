use std::collections::BTreeSet;

use selftrain_core::curation::{filter_by_confidence, retain, select_labels, spatiotemporal_nms};
use selftrain_core::dataset::{load_dataset, validate_dataset, DetectionId, SourceTag};
use selftrain_core::exec::Execution;
use selftrain_core::scoring::score_raw_detection;
use selftrain_core::sim::{
    report_json, simulate_detector, CorpusSpec, DetectorNoise, SimConfig, Simulation,
};

fn config(seed: u64, rounds: u32) -> SimConfig {
    SimConfig {
        rounds,
        seed,
        corpus: CorpusSpec {
            n_videos: 6,
            frames_per_video: 6,
            objects_per_video: 3,
            width: 96,
            height: 80,
        },
        ..SimConfig::default()
    }
}

#[test]
fn stage_counts_are_monotone() {
    for seed in 0..5 {
        let (reports, _) = Simulation::new(config(seed, 3)).unwrap().run(None).unwrap();
        for r in &reports {
            assert!(r.n_raw >= r.n_filtered, "{r:?}");
            assert!(r.n_filtered >= r.n_after_nms, "{r:?}");
            assert!(r.n_after_nms >= r.n_retained, "{r:?}");
        }
    }
}

#[test]
fn snapshots_hold_only_oracle_sound_labels() {
    let dir = tempfile::tempdir().unwrap();
    let sim = Simulation::new(config(3, 3)).unwrap();
    let (reports, _) = sim.run(Some(dir.path())).unwrap();
    let tau = sim.config().curation.quality_threshold;
    for r in &reports {
        assert!(
            r.mean_true_iou_selected >= tau || r.selected_frames == 0,
            "{r:?}"
        );
        let name = r.dataset_snapshot_path.as_deref().unwrap();
        let snapshot = load_dataset(&dir.path().join(name)).unwrap();
        assert!(validate_dataset(&snapshot).is_empty());
        let ious = sim.selected_pseudo_ious(&snapshot).unwrap();
        assert!(
            ious.iter().all(|&iou| iou >= tau),
            "round {}: {ious:?}",
            r.round_index
        );
    }
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn pseudo_labels_persist_across_rounds() {
    let sim = Simulation::new(config(8, 1)).unwrap();
    let mut state = sim.initial_state();
    let mut prev_frames: usize = 0;
    for _ in 0..3 {
        let (next, _) = sim.run_round(state, None).unwrap();
        // fusion may replace detections but selected frames only accumulate
        let frames: usize = next
            .dataset
            .annotations
            .iter()
            .filter(|a| a.source == SourceTag::Pseudo)
            .map(|a| a.detection.selected_count())
            .sum();
        assert!(
            frames >= prev_frames,
            "selected frames fell from {prev_frames} to {frames}"
        );
        let synthetic = next.dataset.filter_source(SourceTag::Synthetic);
        assert_eq!(
            synthetic.annotations,
            sim.initial_state().dataset.annotations
        );
        prev_frames = frames;
        state = next;
    }
    assert!(prev_frames > 0);
}

#[test]
fn reset_flag_only_matters_after_round_one() {
    let on = config(11, 2);
    let off = SimConfig {
        reset_each_round: false,
        ..on.clone()
    };
    let (a, _) = Simulation::new(on).unwrap().run(None).unwrap();
    let (b, _) = Simulation::new(off).unwrap().run(None).unwrap();
    assert_eq!(a[0], b[0]);
    assert!(b[1].fidelity >= a[1].fidelity);
}

#[test]
fn parallel_and_sequential_runs_are_identical() {
    let cfg = config(21, 2);
    let seq = Simulation::with_execution(cfg.clone(), Execution::Sequential)
        .unwrap()
        .run(None)
        .unwrap();
    let par = Simulation::with_execution(cfg, Execution::Parallel)
        .unwrap()
        .run(None)
        .unwrap();
    assert_eq!(report_json(&seq.0), report_json(&par.0));
    assert_eq!(seq.1, par.1);
}

#[test]
fn round_counts_match_manual_curation() {
    let sim = Simulation::new(config(5, 1)).unwrap();
    let state = sim.initial_state();
    let fidelity = sim.next_fidelity(&state);
    let (_, report) = sim.run_round(state.clone(), None).unwrap();

    let cfg = &sim.config().curation;
    let (mut raw_n, mut filt_n, mut nms_n, mut kept_n) = (0, 0, 0, 0);
    for (i, video) in sim.ground_truth().videos.iter().enumerate() {
        let raw = simulate_detector(
            video,
            &sim.gt_tracks(video),
            &sim.config().detector_noise,
            fidelity,
            sim.detector_seed(1),
            Simulation::first_detection_id(state.next_id, i),
        );
        raw_n += raw.len();
        let filtered = filter_by_confidence(raw, cfg.confidence_min);
        filt_n += filtered.len();
        let kept = spatiotemporal_nms(filtered, cfg.nms_iou).unwrap();
        nms_n += kept.len();
        let scored = kept
            .iter()
            .map(|r| score_raw_detection(sim.scorer(), video, r).unwrap())
            .collect();
        kept_n += retain(select_labels(scored, cfg.quality_threshold)).len();
    }
    assert_eq!(
        (
            report.n_raw,
            report.n_filtered,
            report.n_after_nms,
            report.n_retained
        ),
        (raw_n, filt_n, nms_n, kept_n)
    );
}

#[test]
fn blind_detector_leaves_dataset_unchanged() {
    let cfg = SimConfig {
        detector_noise: DetectorNoise {
            miss_rate: 1.0,
            false_positive_rate: 0.0,
            ..DetectorNoise::default()
        },
        ..config(2, 1)
    };
    let sim = Simulation::new(cfg).unwrap();
    let state = sim.initial_state();
    let (next, report) = sim.run_round(state.clone(), None).unwrap();
    assert_eq!(report.n_raw, 0);
    assert_eq!(next.dataset.round, state.dataset.round + 1);
    assert_eq!(next.dataset.annotations, state.dataset.annotations);
}

#[test]
fn detection_ids_stay_unique_over_rounds() {
    let (_, state) = Simulation::new(config(13, 4)).unwrap().run(None).unwrap();
    let ids: BTreeSet<DetectionId> = state
        .dataset
        .annotations
        .iter()
        .map(|a| a.detection.id)
        .collect();
    assert_eq!(ids.len(), state.dataset.annotations.len());
}
