//! Multi-round self-training simulation with hidden ground truth.
//!
//! Each round the simulated detector labels every unlabeled video at the
//! current fidelity, the detections are curated, and the retained labels
//! are fused into the training dataset. Fidelity for the next round is
//! `base + gain * mean_true_iou` of the labels just curated, capped at 1,
//! where `base` is the initial fidelity when weights are reset each round
//! and the previous round's fidelity otherwise.

pub mod corpus;
pub mod detector;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curation::{curate_video_with_counts, CurationConfig, CurationError, StageCounts};
use crate::dataset::{
    dataset_to_json, validate_dataset, Annotation, DatasetError, Detection, SourceTag,
    TrainingDataset, VideoMeta, Violation,
};
use crate::eval::{evaluate_with, EvalError, EvalReport};
use crate::exec::{self, Execution};
use crate::fusion::{merge_dataset, FusionConfig, FusionError};
use crate::io::write_atomic;
use crate::scoring::{
    ConfidenceOnlyScorer, NoisyOracleScorer, OracleScorer, QualityScorer, ScoringError,
};
use crate::seed::derive_seed;

pub use corpus::{generate_corpus, CorpusSpec};
pub use detector::{simulate_detector, DetectorNoise};

/// Detection-id block reserved for one video in one round.
const ID_STRIDE: u64 = 1 << 20;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("InvariantViolation: round {round} snapshot: {violation}")]
    Snapshot { round: u32, violation: Violation },
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerKind {
    Oracle,
    Noisy {
        sigma: f64,
    },
    /// Quality := confidence.
    ConfidenceOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub rounds: u32,
    pub curation: CurationConfig,
    pub fusion: FusionConfig,
    pub reset_each_round: bool,
    pub detector_noise: DetectorNoise,
    pub improvement_gain: f64,
    pub initial_fidelity: f64,
    pub scorer: ScorerKind,
    pub corpus: CorpusSpec,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            rounds: 2,
            curation: CurationConfig::default(),
            fusion: FusionConfig::default(),
            reset_each_round: true,
            detector_noise: DetectorNoise::default(),
            improvement_gain: 0.5,
            initial_fidelity: 0.5,
            scorer: ScorerKind::Oracle,
            corpus: CorpusSpec::default(),
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidConfig(msg));
        if self.rounds < 1 {
            return bad("rounds must be >= 1".into());
        }
        self.curation.validate()?;
        let n = &self.detector_noise;
        for (name, p) in [
            ("overlap_iou", self.fusion.overlap_iou),
            ("miss_rate", n.miss_rate),
            ("false_positive_rate", n.false_positive_rate),
            ("fragment_rate", n.fragment_rate),
            ("confidence_noise", n.confidence_noise),
            ("initial_fidelity", self.initial_fidelity),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is outside [0, 1]"));
            }
        }
        if !(0.0..1.0).contains(&self.improvement_gain) {
            return bad(format!(
                "improvement_gain = {} is outside [0, 1)",
                self.improvement_gain
            ));
        }
        if let ScorerKind::Noisy { sigma } = self.scorer {
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return bad(format!("noise sigma = {sigma} must be >= 0"));
            }
        }
        let c = &self.corpus;
        if c.n_videos == 0
            || c.frames_per_video == 0
            || c.objects_per_video == 0
            || c.width == 0
            || c.height == 0
        {
            return bad("corpus counts and dimensions must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round_index: u32,
    pub fidelity: f64,
    pub n_raw: usize,
    pub n_filtered: usize,
    pub n_after_nms: usize,
    pub n_retained: usize,
    /// Mean true IoU over the selected frames of this round's retained labels.
    pub mean_true_iou_selected: f64,
    pub selected_frames: usize,
    pub dataset_snapshot_path: Option<String>,
    /// This round's raw detector output evaluated against the hidden truth.
    pub raw_detector_eval: EvalReport,
    /// Final pseudo-label set against the hidden truth (last round only).
    pub final_eval: Option<EvalReport>,
    /// Mean true IoU over every selected pseudo-label frame in the final
    /// dataset (last round only).
    pub final_mean_true_iou_selected: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub dataset: TrainingDataset,
    pub fidelity: f64,
    pub last_mean_iou: Option<f64>,
    pub next_id: u64,
}

/// Everything produced for one video in one round.
struct VideoRound {
    raw: Vec<Detection>,
    retained: Vec<Detection>,
    counts: StageCounts,
    selected_ious: Vec<f64>,
}

pub struct Simulation {
    config: SimConfig,
    ground_truth: TrainingDataset,
    synthetic: TrainingDataset,
    oracle: OracleScorer,
    scorer: Box<dyn QualityScorer>,
    exec: Execution,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        Self::with_execution(config, Execution::default())
    }

    pub fn with_execution(config: SimConfig, exec: Execution) -> Result<Self, SimError> {
        config.validate()?;
        let (ground_truth, synthetic) = generate_corpus(&config.corpus, config.seed);
        let oracle = OracleScorer::new(&ground_truth);
        let scorer: Box<dyn QualityScorer> = match config.scorer {
            ScorerKind::Oracle => Box::new(oracle.clone()),
            ScorerKind::Noisy { sigma } => Box::new(NoisyOracleScorer::new(
                oracle.clone(),
                sigma,
                derive_seed(config.seed, &[0x5C0E]),
            )),
            ScorerKind::ConfidenceOnly => Box::new(ConfidenceOnlyScorer),
        };
        Ok(Self {
            config,
            ground_truth,
            synthetic,
            oracle,
            scorer,
            exec,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn ground_truth(&self) -> &TrainingDataset {
        &self.ground_truth
    }

    pub fn oracle(&self) -> &OracleScorer {
        &self.oracle
    }

    pub fn scorer(&self) -> &dyn QualityScorer {
        self.scorer.as_ref()
    }

    pub fn initial_state(&self) -> SimState {
        let max_id = self
            .synthetic
            .max_detection_id()
            .into_iter()
            .chain(self.ground_truth.max_detection_id())
            .map(|d| d.0)
            .max()
            .unwrap_or(0);
        SimState {
            dataset: self.synthetic.clone(),
            fidelity: self.config.initial_fidelity,
            last_mean_iou: None,
            next_id: max_id + 1,
        }
    }

    /// Fidelity the detector uses in the round following `state`.
    pub fn next_fidelity(&self, state: &SimState) -> f64 {
        let base = if self.config.reset_each_round {
            self.config.initial_fidelity
        } else {
            state.fidelity
        };
        let gain = self.config.improvement_gain * state.last_mean_iou.unwrap_or(0.0);
        (base + gain).min(1.0)
    }

    /// Seed of the detector for a given round.
    pub fn detector_seed(&self, round: u32) -> u64 {
        derive_seed(self.config.seed, &[0xD7, u64::from(round)])
    }

    /// First detection id given to `video_index` in a round whose id block
    /// starts at `next_id`.
    pub fn first_detection_id(next_id: u64, video_index: usize) -> u64 {
        next_id + video_index as u64 * ID_STRIDE
    }

    pub fn gt_tracks(&self, video: &VideoMeta) -> Vec<&Detection> {
        self.ground_truth
            .annotations_for(video.id)
            .map(|a| &a.detection)
            .collect()
    }

    fn process_video(
        &self,
        index: usize,
        video: &VideoMeta,
        fidelity: f64,
        round: u32,
        next_id: u64,
    ) -> Result<VideoRound, SimError> {
        let raw = simulate_detector(
            video,
            &self.gt_tracks(video),
            &self.config.detector_noise,
            fidelity,
            self.detector_seed(round),
            Self::first_detection_id(next_id, index),
        );
        let raw_hard: Vec<Detection> = raw.iter().map(|r| r.detection.clone()).collect();
        let outcome =
            curate_video_with_counts(self.scorer.as_ref(), video, raw, &self.config.curation)?;
        let mut selected_ious = Vec::new();
        for d in &outcome.retained {
            let ious = self.oracle.true_frame_ious(d)?;
            selected_ious.extend(
                ious.into_iter()
                    .zip(&d.selected)
                    .filter(|(_, s)| **s)
                    .map(|(iou, _)| iou),
            );
        }
        Ok(VideoRound {
            raw: raw_hard,
            retained: outcome.retained,
            counts: outcome.counts,
            selected_ious,
        })
    }

    /// Restricts annotations to the ground-truth videos so the evaluator
    /// sees the same video set.
    pub fn as_predictions(&self, dets: impl IntoIterator<Item = Detection>) -> TrainingDataset {
        let gt_ids = self.ground_truth.video_ids();
        let mut ds = TrainingDataset {
            round: 0,
            videos: self.ground_truth.videos.clone(),
            annotations: dets
                .into_iter()
                .filter(|d| gt_ids.contains(&d.video_id))
                .map(|d| Annotation {
                    detection: d,
                    source: SourceTag::Pseudo,
                })
                .collect(),
        };
        ds.canonicalize();
        ds
    }

    /// One self-training round. Writes `round_<k>.json` into `snapshot_dir`
    /// when given.
    pub fn run_round(
        &self,
        state: SimState,
        snapshot_dir: Option<&Path>,
    ) -> Result<(SimState, RoundReport), SimError> {
        let round = state.dataset.round + 1;
        let fidelity = self.next_fidelity(&state);
        let videos = &self.ground_truth.videos;
        let indexed: Vec<(usize, &VideoMeta)> = videos.iter().enumerate().collect();
        let per_video = exec::try_map_collect(self.exec, &indexed, |(i, v)| {
            self.process_video(*i, v, fidelity, round, state.next_id)
        })?;

        let mut counts = StageCounts::default();
        let mut raw = Vec::new();
        let mut retained = Vec::new();
        let mut ious = Vec::new();
        for r in per_video {
            counts += r.counts;
            raw.extend(r.raw);
            retained.extend(r.retained);
            ious.extend(r.selected_ious);
        }
        let mean_iou = mean(&ious);

        let raw_detector_eval =
            evaluate_with(&self.as_predictions(raw), &self.ground_truth, self.exec)?;
        let dataset = merge_dataset(&state.dataset, &retained, videos, &self.config.fusion)?;
        if let Some(violation) = validate_dataset(&dataset).into_iter().next() {
            return Err(SimError::Snapshot { round, violation });
        }
        let snapshot = match snapshot_dir {
            Some(dir) => {
                let name = format!("round_{round}.json");
                write_atomic(&dir.join(&name), dataset_to_json(&dataset).as_bytes())?;
                Some(name)
            }
            None => None,
        };
        let next_id = (state.next_id + videos.len() as u64 * ID_STRIDE)
            .max(dataset.max_detection_id().map_or(0, |d| d.0 + 1));
        let report = RoundReport {
            round_index: round,
            fidelity,
            n_raw: counts.n_raw,
            n_filtered: counts.n_filtered,
            n_after_nms: counts.n_after_nms,
            n_retained: counts.n_retained,
            mean_true_iou_selected: mean_iou,
            selected_frames: ious.len(),
            dataset_snapshot_path: snapshot,
            raw_detector_eval,
            final_eval: None,
            final_mean_true_iou_selected: None,
        };
        let next = SimState {
            dataset,
            fidelity,
            last_mean_iou: Some(mean_iou),
            next_id,
        };
        Ok((next, report))
    }

    /// The final dataset's pseudo labels as a prediction set over the
    /// ground-truth videos.
    pub fn pseudo_predictions(&self, dataset: &TrainingDataset) -> TrainingDataset {
        self.as_predictions(
            dataset
                .annotations
                .iter()
                .filter(|a| a.source == SourceTag::Pseudo)
                .map(|a| a.detection.clone()),
        )
    }

    /// True IoU of every selected pseudo-label frame in `dataset`.
    pub fn selected_pseudo_ious(&self, dataset: &TrainingDataset) -> Result<Vec<f64>, SimError> {
        let mut out = Vec::new();
        for a in dataset
            .annotations
            .iter()
            .filter(|a| a.source == SourceTag::Pseudo)
        {
            let ious = self.oracle.true_frame_ious(&a.detection)?;
            out.extend(
                ious.into_iter()
                    .zip(&a.detection.selected)
                    .filter(|(_, s)| **s)
                    .map(|(iou, _)| iou),
            );
        }
        Ok(out)
    }

    /// Runs every round, returning the reports and final state. The last
    /// report carries the final evaluation.
    pub fn run(&self, out_dir: Option<&Path>) -> Result<(Vec<RoundReport>, SimState), SimError> {
        let mut state = self.initial_state();
        let mut reports = Vec::with_capacity(self.config.rounds as usize);
        for _ in 0..self.config.rounds {
            let (next, report) = self.run_round(state, out_dir)?;
            state = next;
            reports.push(report);
        }
        let final_eval = evaluate_with(
            &self.pseudo_predictions(&state.dataset),
            &self.ground_truth,
            self.exec,
        )?;
        let last = reports.last_mut().expect("rounds >= 1");
        last.final_eval = Some(final_eval);
        last.final_mean_true_iou_selected = Some(mean(&self.selected_pseudo_ious(&state.dataset)?));
        if let Some(dir) = out_dir {
            write_atomic(&dir.join("report.json"), report_json(&reports).as_bytes())?;
        }
        Ok((reports, state))
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

pub fn report_json(reports: &[RoundReport]) -> String {
    let mut s = serde_json::to_string_pretty(reports).expect("reports serialize");
    s.push('\n');
    s
}

/// Runs a full simulation, writing snapshots and `report.json` into
/// `out_dir` when given.
pub fn run_self_training(
    config: SimConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<RoundReport>, SimError> {
    Ok(Simulation::new(config)?.run(out_dir)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SimConfig {
        SimConfig {
            corpus: CorpusSpec {
                n_videos: 4,
                frames_per_video: 5,
                objects_per_video: 3,
                width: 96,
                height: 80,
            },
            seed: 17,
            ..SimConfig::default()
        }
    }

    #[test]
    fn config_json_defaults() {
        let c: SimConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, SimConfig::default());
        let c: SimConfig =
            serde_json::from_str(r#"{"rounds":3,"scorer":{"kind":"noisy","sigma":0.1}}"#).unwrap();
        assert_eq!(c.rounds, 3);
        assert_eq!(c.scorer, ScorerKind::Noisy { sigma: 0.1 });
        assert!(serde_json::from_str::<SimConfig>(r#"{"roundz":3}"#).is_err());
    }

    #[test]
    fn config_validation() {
        let c = SimConfig {
            rounds: 0,
            ..SimConfig::default()
        };
        assert!(matches!(c.validate(), Err(SimError::InvalidConfig(_))));
        let c = SimConfig {
            improvement_gain: 1.0,
            ..SimConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn perfect_pipeline_recovers_ground_truth() {
        let config = SimConfig {
            detector_noise: DetectorNoise::none(),
            initial_fidelity: 1.0,
            rounds: 1,
            ..small_config()
        };
        let sim = Simulation::new(config).unwrap();
        let (state, report) = sim.run_round(sim.initial_state(), None).unwrap();
        let gt_count = sim.ground_truth().annotations.len();
        assert_eq!(report.n_retained, gt_count);
        let pseudo: Vec<_> = state
            .dataset
            .annotations
            .iter()
            .filter(|a| a.source == SourceTag::Pseudo)
            .collect();
        assert_eq!(pseudo.len(), gt_count);
        for a in pseudo {
            assert!(a.detection.selected.iter().all(|s| *s));
        }
    }

    #[test]
    fn nothing_detected_keeps_dataset() {
        let config = SimConfig {
            detector_noise: DetectorNoise {
                miss_rate: 1.0,
                false_positive_rate: 0.0,
                ..DetectorNoise::default()
            },
            ..small_config()
        };
        let sim = Simulation::new(config).unwrap();
        let init = sim.initial_state();
        let (state, report) = sim.run_round(init.clone(), None).unwrap();
        assert_eq!(report.n_raw, 0);
        assert_eq!(state.dataset.round, 1);
        assert_eq!(state.dataset.annotations, init.dataset.annotations);
    }

    #[test]
    fn fidelity_schedule() {
        let sim = Simulation::new(small_config()).unwrap();
        let mut s = sim.initial_state();
        assert_eq!(sim.next_fidelity(&s), 0.5);
        s.last_mean_iou = Some(0.8);
        s.fidelity = 0.7;
        assert!((sim.next_fidelity(&s) - 0.9).abs() < 1e-12);
        let no_reset = Simulation::new(SimConfig {
            reset_each_round: false,
            ..small_config()
        })
        .unwrap();
        assert_eq!(no_reset.next_fidelity(&s), 1.0);
    }
}
