use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use selftrain_core::curation::{curate_video_with_counts, CurationConfig, StageCounts};
use selftrain_core::dataset::{
    dataset_to_json, load_dataset, read_dataset_unchecked, validate_dataset, Annotation,
    RawDetection, SourceTag, TrainingDataset, Violation,
};
use selftrain_core::eval::evaluate_with;
use selftrain_core::exec::{self, Execution};
use selftrain_core::fusion::{merge_dataset, FusionConfig};
use selftrain_core::io::write_atomic;
use selftrain_core::scoring::{
    ConfidenceOnlyScorer, NoisyOracleScorer, OracleScorer, QualityScorer,
};
use selftrain_core::sim::{report_json, SimConfig, Simulation};
use selftrain_core::train::plan_batches;

#[derive(Parser, Debug)]
#[command(
    name = "selftrain",
    version,
    about = "Pseudo-label curation for video instance segmentation"
)]
struct Cli {
    /// Worker threads for per-video work (1 = sequential, 0 = all cores)
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter, deduplicate, score and select raw detections
    Curate(CurateArgs),
    /// Merge retained detections into an existing training dataset
    Fuse(FuseArgs),
    /// Emit a training-batch manifest as JSON lines
    Sample(SampleArgs),
    /// Score predictions against ground truth (AP / AR)
    Evaluate(EvaluateArgs),
    /// Run the seeded self-training simulation
    Simulate(SimulateArgs),
    /// Check a dataset file against the format invariants
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ScorerArg {
    Oracle,
    Noisy(f64),
    Confidence,
}

impl FromStr for ScorerArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "oracle" => Ok(ScorerArg::Oracle),
            "confidence" => Ok(ScorerArg::Confidence),
            _ => {
                let sigma = s.strip_prefix("noisy:").ok_or_else(|| {
                    format!("expected oracle, noisy:<sigma> or confidence, got {s:?}")
                })?;
                match sigma.parse::<f64>() {
                    Ok(v) if v >= 0.0 && v.is_finite() => Ok(ScorerArg::Noisy(v)),
                    _ => Err(format!(
                        "noise sigma must be a non-negative number, got {sigma:?}"
                    )),
                }
            }
        }
    }
}

impl fmt::Display for ScorerArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScorerArg::Oracle => f.write_str("oracle"),
            ScorerArg::Noisy(s) => write!(f, "noisy:{s}"),
            ScorerArg::Confidence => f.write_str("confidence"),
        }
    }
}

#[derive(Args, Debug)]
struct CurateArgs {
    /// Raw detections (dataset JSON, selected flags all zero)
    #[arg(long)]
    raw: PathBuf,
    /// Ground truth used by the oracle and noisy scorers
    #[arg(long)]
    gt_for_oracle: Option<PathBuf>,
    /// Quality scorer: oracle, noisy:<sigma> or confidence
    #[arg(long, default_value_t = ScorerArg::Oracle)]
    scorer: ScorerArg,
    /// Minimum detection confidence (inclusive)
    #[arg(long, default_value_t = selftrain_core::curation::DEFAULT_CONFIDENCE_MIN)]
    conf_min: f64,
    /// Spatiotemporal NMS overlap threshold
    #[arg(long, default_value_t = selftrain_core::curation::DEFAULT_NMS_IOU)]
    nms_iou: f64,
    /// Per-frame quality threshold
    #[arg(long, default_value_t = selftrain_core::curation::DEFAULT_QUALITY_THRESHOLD)]
    tau: f64,
    /// Seed for the noisy scorer
    #[arg(long)]
    seed: Option<u64>,
    /// Output path for the curated dataset
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FuseArgs {
    /// Current training dataset
    #[arg(long)]
    dataset: PathBuf,
    /// Retained detections from the latest curation pass
    #[arg(long)]
    retained: PathBuf,
    /// Per-frame IoU at which a new detection fuses with an existing one
    #[arg(long, default_value_t = selftrain_core::fusion::DEFAULT_OVERLAP_IOU)]
    overlap_iou: f64,
    /// Output path for the merged dataset
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(
    after_help = "Batches draw from synthetic and pseudo-labelled videos with 50% probability each. \
Three frames are sampled from those where every object is selected. \
Trainers should gate per-prediction losses with DropLoss at IoU 0.01."
)]
struct SampleArgs {
    /// Training dataset
    #[arg(long)]
    dataset: PathBuf,
    /// Sampling seed
    #[arg(long)]
    seed: u64,
    /// Number of batches to draw
    #[arg(long, default_value_t = 16)]
    n_batches: usize,
    /// Write the manifest here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Predictions (dataset JSON)
    #[arg(long)]
    pred: PathBuf,
    /// Ground truth (dataset JSON)
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Args, Debug)]
#[command(
    after_help = "Config keys and defaults: rounds 2, reset_each_round true, \
curation {confidence_min 0.25, nms_iou 0.5, quality_threshold 0.75}, fusion {overlap_iou 0.5}, \
improvement_gain 0.5, initial_fidelity 0.5, scorer {kind: oracle}, seed 0."
)]
struct SimulateArgs {
    /// SimConfig JSON; omitted keys take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for round_<k>.json snapshots and report.json
    #[arg(long, default_value = "sim-out")]
    out_dir: PathBuf,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of rounds (default 2)
    #[arg(long)]
    rounds: Option<u32>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    /// Dataset to check
    #[arg(long)]
    dataset: PathBuf,
}

/// A bad combination of arguments that clap cannot express.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn violations_error(context: &str, violations: &[Violation]) -> anyhow::Error {
    let lines: Vec<String> = violations.iter().map(ToString::to_string).collect();
    anyhow::anyhow!("{context}:\n  {}", lines.join("\n  "))
}

fn write_output(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes).with_context(|| format!("IoError: writing {}", path.display()))
}

fn curate(args: CurateArgs, exec: Execution) -> Result<()> {
    let config = CurationConfig {
        confidence_min: args.conf_min,
        nms_iou: args.nms_iou,
        quality_threshold: args.tau,
    };
    config.validate()?;
    let raw = load_dataset(&args.raw)?;
    let oracle = |path: &Option<PathBuf>| -> Result<OracleScorer> {
        let path = path
            .as_ref()
            .ok_or_else(|| usage(format!("--scorer {} requires --gt-for-oracle", args.scorer)))?;
        Ok(OracleScorer::new(&load_dataset(path)?))
    };
    let scorer: Box<dyn QualityScorer> = match args.scorer {
        ScorerArg::Oracle => Box::new(oracle(&args.gt_for_oracle)?),
        ScorerArg::Noisy(sigma) => {
            let seed = args
                .seed
                .ok_or_else(|| usage("--scorer noisy:<sigma> requires --seed"))?;
            Box::new(NoisyOracleScorer::new(
                oracle(&args.gt_for_oracle)?,
                sigma,
                seed,
            ))
        }
        ScorerArg::Confidence => Box::new(ConfidenceOnlyScorer),
    };

    let outcomes = exec::try_map_collect(exec, &raw.videos, |video| {
        let dets: Vec<RawDetection> = raw
            .annotations_for(video.id)
            .map(|a| RawDetection::from_hard(a.detection.clone()))
            .collect();
        curate_video_with_counts(scorer.as_ref(), video, dets, &config)
    })?;

    let mut counts = StageCounts::default();
    let mut curated = TrainingDataset {
        round: raw.round,
        videos: raw.videos.clone(),
        annotations: Vec::new(),
    };
    for outcome in outcomes {
        counts += outcome.counts;
        curated
            .annotations
            .extend(outcome.retained.into_iter().map(|detection| Annotation {
                detection,
                source: SourceTag::Pseudo,
            }));
    }
    curated.canonicalize();
    write_output(&args.out, dataset_to_json(&curated).as_bytes())?;
    eprintln!(
        "raw {} -> filtered {} -> nms {} -> retained {}",
        counts.n_raw, counts.n_filtered, counts.n_after_nms, counts.n_retained
    );
    Ok(())
}

fn fuse(args: FuseArgs) -> Result<()> {
    let current = load_dataset(&args.dataset)?;
    let retained = read_dataset_unchecked(&args.retained)?;
    let structural: Vec<Violation> = validate_dataset(&retained)
        .into_iter()
        .filter(|v| !matches!(v, Violation::UnknownVideo { .. }))
        .collect();
    if !structural.is_empty() {
        return Err(violations_error(
            "InvariantViolation in retained detections",
            &structural,
        ));
    }
    let config = FusionConfig {
        overlap_iou: args.overlap_iou,
    };
    let dets: Vec<_> = retained
        .annotations
        .iter()
        .map(|a| a.detection.clone())
        .collect();
    let mut merged = merge_dataset(&current, &dets, &retained.videos, &config)?;
    merged.round = current.round + 1;
    write_output(&args.out, dataset_to_json(&merged).as_bytes())
}

fn sample(args: SampleArgs) -> Result<()> {
    let ds = load_dataset(&args.dataset)?;
    let plan = plan_batches(&ds, args.n_batches, args.seed)?;
    let mut out = String::new();
    for batch in &plan.batches {
        out.push_str(&serde_json::to_string(batch)?);
        out.push('\n');
    }
    if !plan.skipped_videos.is_empty() {
        eprintln!(
            "skipped {} video(s) with fewer than three eligible frames",
            plan.skipped_videos.len()
        );
    }
    match &args.out {
        Some(path) => write_output(path, out.as_bytes()),
        None => {
            print!("{out}");
            Ok(())
        }
    }
}

fn evaluate(args: EvaluateArgs, exec: Execution) -> Result<()> {
    let pred = load_dataset(&args.pred)?;
    let gt = load_dataset(&args.gt)?;
    let report = evaluate_with(&pred, &gt, exec)?;
    println!("{}", serde_json::to_string(&report)?);
    print!("{}", report.to_table());
    Ok(())
}

fn simulate(args: SimulateArgs, exec: Execution) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("IoError: reading {}", path.display()))?;
            serde_json::from_str::<SimConfig>(&text)
                .with_context(|| format!("ParseError: {}", path.display()))?
        }
        None => SimConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(rounds) = args.rounds {
        config.rounds = rounds;
    }
    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("IoError: creating {}", args.out_dir.display()))?;
    let sim = Simulation::with_execution(config, exec)?;
    let (reports, _) = sim.run(Some(&args.out_dir))?;
    print!("{}", report_json(&reports));
    Ok(())
}

fn validate(args: ValidateArgs) -> Result<()> {
    let ds = read_dataset_unchecked(&args.dataset)?;
    let violations = validate_dataset(&ds);
    if violations.is_empty() {
        println!(
            "ok: {} videos, {} annotations",
            ds.videos.len(),
            ds.annotations.len()
        );
        Ok(())
    } else {
        Err(violations_error("InvariantViolation", &violations))
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads;
    let exec = Execution::from_threads(threads);
    exec::with_threads(threads, move || match cli.command {
        Command::Curate(a) => curate(a, exec),
        Command::Fuse(a) => fuse(a),
        Command::Sample(a) => sample(a),
        Command::Evaluate(a) => evaluate(a, exec),
        Command::Simulate(a) => simulate(a, exec),
        Command::Validate(a) => validate(a),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn scorer_parsing() {
        assert_eq!("oracle".parse(), Ok(ScorerArg::Oracle));
        assert_eq!("confidence".parse(), Ok(ScorerArg::Confidence));
        assert_eq!("noisy:0.1".parse(), Ok(ScorerArg::Noisy(0.1)));
        assert!("noisy:-1".parse::<ScorerArg>().is_err());
        assert!("noisy".parse::<ScorerArg>().is_err());
        assert_eq!(
            ScorerArg::Noisy(0.25).to_string().parse(),
            Ok(ScorerArg::Noisy(0.25))
        );
    }
}
