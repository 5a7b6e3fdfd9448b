//! `luminav localize`: retrieval plus the confidence-gated localization loop.
//!
//! Loads a dataset directory, selects the virtual-buffer window from the
//! pre-operative database, then drives every frame through solve → gate →
//! (on trigger) retrain. The retrain stand-in augments the window images;
//! a real deployment would fine-tune the scene-coordinate predictor here.
//!
//! Artifacts written to the output directory:
//!
//! * `est_poses.txt` — estimated trajectory (TUM); failed frames are gaps.
//! * `phase_log.txt` — one line per frame: index, phase, inlier count, and
//!   the gate verdict, with `#` comment lines marking phase transitions.
//! * `frames.jsonl` — one JSON record per frame (solver stats, verdict,
//!   timing).
//! * `run_summary.json` — run counters plus the inline evaluation report
//!   (identical to what `evaluate` recomputes from the written files).

use crate::cli::LocalizeArgs;
use crate::commands::{virtual_blob_path, virtual_index_path};
use crate::error::{classify_confidence, classify_metrics, classify_retrieval, usage_of, CliError};
use luminav_core::augment::{ddaug, DepthMap, Image};
use luminav_core::confidence::{
    FrameResult, PhaseTransition, RetrainMode, SegmentFrame, SegmentLoopConfig, TrainerError,
};
use luminav_core::io::{import_dataset, read_virtual_database, write_trajectory_tum, Dataset};
use luminav_core::metrics::{evaluate, AlignmentMode, EvaluationReport, Trajectory};
use luminav_core::rng::derived_rng;
use serde::Serialize;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

/// Seed-stream offset for retrain draws, far above any per-frame stream.
const TRAINER_STREAM_BASE: u64 = 1 << 40;

/// One frame of `frames.jsonl`. Non-finite statistics (an empty gate buffer
/// has no spread yet) serialize as null.
#[derive(Serialize)]
struct FrameRecord {
    frame_index: usize,
    timestamp: f64,
    phase: &'static str,
    solved: bool,
    inlier_count: Option<usize>,
    mean_reprojection_error: Option<f64>,
    iterations: Option<u32>,
    error: Option<String>,
    refined: bool,
    confident: Option<bool>,
    mu: Option<f64>,
    sigma: Option<f64>,
    threshold: Option<f64>,
    triggered_retrain: Option<bool>,
    solve_ms: f64,
}

#[derive(Serialize)]
struct RetrievalSummary {
    range_start: usize,
    range_end: usize,
    range_score: usize,
    queries: usize,
}

#[derive(Serialize)]
struct RunSummary {
    frames: usize,
    solved: usize,
    gaps: usize,
    retrains: usize,
    retrieval: RetrievalSummary,
    evaluation: Option<EvaluationReport>,
}

fn finite(value: f64) -> Option<f64> {
    value.is_finite().then_some(value)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// `phase_log.txt` column for an optional statistic.
fn column(value: Option<f64>) -> String {
    match value {
        Some(v) => v.to_string(),
        None => "-".to_owned(),
    }
}

pub fn run(args: &LocalizeArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    config.ransac.validate().map_err(usage_of)?;
    config.confidence.validate().map_err(usage_of)?;

    let Dataset { intrinsics, ground_truth, frames, descriptors } =
        import_dataset(&args.dataset)?;
    let database =
        read_virtual_database(&virtual_index_path(&args.dataset), &virtual_blob_path(&args.dataset))?;
    let (retrieval, _buffer) =
        luminav_core::retrieval::build_virtual_buffer(&database, &descriptors, config.retrieval.range)
            .map_err(classify_retrieval)?;
    println!(
        "retrieval: window [{}, {}] of {} entries, score {} over {} queries",
        retrieval.range_start,
        retrieval.range_start + retrieval.range_len,
        database.len(),
        retrieval.range_score,
        descriptors.len()
    );

    let timestamps: Vec<f64> = ground_truth.samples().iter().map(|s| s.timestamp).collect();
    let stream = frames.into_iter().map(|frame| SegmentFrame {
        index: frame.index,
        map: frame.map,
        payload: (frame.image, frame.depth),
    });

    // Retrain stand-in: run the augmentation pipeline over the window. Each
    // retrain draws from its own seed stream so results do not depend on how
    // many frames earlier retrains consumed.
    let augmentation = config.augmentation.build();
    let seed = config.seed;
    let trainer_intrinsics = intrinsics;
    let mut retrain_serial: u64 = 0;
    let mut trainer = move |window: &[SegmentFrame<(Image, DepthMap)>]| -> Result<(), TrainerError> {
        retrain_serial += 1;
        let mut rng = derived_rng(seed, TRAINER_STREAM_BASE + retrain_serial);
        for frame in window {
            let (image, depth) = &frame.payload;
            ddaug(image, depth, &trainer_intrinsics, &mut rng, &augmentation)?;
        }
        Ok(())
    };

    let loop_config = SegmentLoopConfig {
        policy: config.confidence,
        ransac: config.ransac,
        mode: if args.parallel_refine { RetrainMode::Parallel } else { RetrainMode::Synchronous },
    };
    let output = luminav_core::confidence::run_segment_loop(
        &intrinsics,
        stream,
        &loop_config,
        &mut trainer,
    )
    .map_err(classify_confidence)?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::data(format!("{}: {e}", args.out.display())))?;

    write_phase_log(&args.out.join("phase_log.txt"), &output.frames, &output.transitions)?;
    write_frame_records(&args.out.join("frames.jsonl"), &output.frames, &timestamps)?;

    let est = Trajectory::from_poses(output.frames.iter().filter_map(|frame| {
        frame
            .estimate
            .as_ref()
            .ok()
            .map(|estimate| (timestamps[frame.frame_index], estimate.pose))
    }))
    .map_err(classify_metrics)?;
    write_trajectory_tum(&args.out.join("est_poses.txt"), &est)?;

    let solved = est.len();
    let gaps = output.frames.len() - solved;
    let retrains = output.retrain_count();
    println!(
        "localized {} frames: {} solved, {} gaps, {} retrains",
        output.frames.len(),
        solved,
        gaps,
        retrains
    );

    let mode = AlignmentMode::from(args.align);
    let evaluation = if solved > 1 {
        let reference = Trajectory::new(
            output
                .frames
                .iter()
                .filter(|frame| frame.estimate.is_ok())
                .map(|frame| ground_truth.samples()[frame.frame_index])
                .collect(),
        )
        .map_err(classify_metrics)?;
        let report = evaluate(&est, &reference, mode, 1, None).map_err(classify_metrics)?;
        println!(
            "evaluation vs ground truth ({} frames, alignment {}):",
            report.n_frames, report.alignment_mode
        );
        println!("  ate_rmse {} mm (mean {}, std {})", report.ate_rmse, report.ate_mean, report.ate_std);
        println!("  rrpe_mean {} deg (std {})", report.rrpe_mean, report.rrpe_std);
        Some(report)
    } else {
        println!("evaluation skipped: fewer than two solved frames");
        None
    };

    let summary = RunSummary {
        frames: output.frames.len(),
        solved,
        gaps,
        retrains,
        retrieval: RetrievalSummary {
            range_start: retrieval.range_start,
            range_end: retrieval.range_start + retrieval.range_len,
            range_score: retrieval.range_score,
            queries: descriptors.len(),
        },
        evaluation,
    };
    let summary_json = serde_json::to_string_pretty(&summary)
        .map_err(|e| CliError::runtime(format!("cannot serialize run summary: {e}")))?;
    write_text(&args.out.join("run_summary.json"), &(summary_json + "\n"))?;
    println!("artifacts written to {}", args.out.display());
    Ok(())
}

/// One line per frame plus `#` comments for phase transitions.
fn write_phase_log(
    path: &Path,
    frames: &[FrameResult],
    transitions: &[PhaseTransition],
) -> Result<(), CliError> {
    let mut after: HashMap<usize, Vec<&PhaseTransition>> = HashMap::new();
    let mut log = String::from("# frame_index phase inlier_count confident mu sigma threshold\n");
    for transition in transitions {
        match transition.after_frame {
            None => {
                let _ = writeln!(log, "# transition: {} -> {} (bootstrap)", transition.from, transition.to);
            }
            Some(index) => after.entry(index).or_default().push(transition),
        }
    }
    for frame in frames {
        let phase = if frame.verdict.is_some() { "testing" } else { "training" };
        let inliers = match &frame.estimate {
            Ok(estimate) => estimate.inlier_count.to_string(),
            Err(_) => "-".to_owned(),
        };
        let (confident, mu, sigma, threshold) = match &frame.verdict {
            Some(verdict) => (
                verdict.confident.to_string(),
                column(finite(verdict.mu)),
                column(finite(verdict.sigma)),
                column(finite(verdict.threshold)),
            ),
            None => ("-".to_owned(), "-".to_owned(), "-".to_owned(), "-".to_owned()),
        };
        let _ = writeln!(
            log,
            "{} {} {} {} {} {} {}",
            frame.frame_index, phase, inliers, confident, mu, sigma, threshold
        );
        for transition in after.get(&frame.frame_index).into_iter().flatten() {
            let _ = writeln!(
                log,
                "# transition after frame {}: {} -> {}",
                frame.frame_index, transition.from, transition.to
            );
        }
    }
    write_text(path, &log)
}

fn write_frame_records(
    path: &Path,
    frames: &[FrameResult],
    timestamps: &[f64],
) -> Result<(), CliError> {
    let mut out = String::new();
    for frame in frames {
        let record = FrameRecord {
            frame_index: frame.frame_index,
            timestamp: timestamps[frame.frame_index],
            phase: if frame.verdict.is_some() { "testing" } else { "training" },
            solved: frame.estimate.is_ok(),
            inlier_count: frame.estimate.as_ref().ok().map(|e| e.inlier_count),
            mean_reprojection_error: frame
                .estimate
                .as_ref()
                .ok()
                .and_then(|e| finite(e.mean_reprojection_error)),
            iterations: frame.estimate.as_ref().ok().map(|e| e.iterations_used),
            error: frame.estimate.as_ref().err().map(ToString::to_string),
            refined: frame.refined,
            confident: frame.verdict.as_ref().map(|v| v.confident),
            mu: frame.verdict.as_ref().and_then(|v| finite(v.mu)),
            sigma: frame.verdict.as_ref().and_then(|v| finite(v.sigma)),
            threshold: frame.verdict.as_ref().and_then(|v| finite(v.threshold)),
            triggered_retrain: frame.verdict.as_ref().map(|v| v.triggered_retrain),
            solve_ms: frame.solve_time.as_secs_f64() * 1e3,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| CliError::runtime(format!("cannot serialize frame record: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    write_text(path, &out)
}
