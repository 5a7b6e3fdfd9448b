//! `luminav evaluate`: score an estimated trajectory against a reference.
//!
//! Frames pair by timestamp (within the library tolerance). Reference
//! timestamps with no estimate are gaps — skipped and counted, matching a
//! localization run that dropped solver-failure frames. An estimate
//! timestamp missing from the reference is a data error.

use crate::cli::{AlignArg, EvaluateArgs};
use crate::commands::localize_counts_sibling;
use crate::error::{classify_metrics, CliError};
use luminav_core::io::read_trajectory_tum;
use luminav_core::metrics::{evaluate, AlignmentMode, Trajectory, TIMESTAMP_TOLERANCE_S};
use std::path::Path;

pub fn run(args: &EvaluateArgs) -> Result<(), CliError> {
    if let Some(keep) = args.keep {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(CliError::usage(format!(
                "--keep must lie in (0, 1], got {keep}"
            )));
        }
        if args.align == AlignArg::SevenDof {
            return Err(CliError::usage(
                "--keep computes the filtered translational error without alignment; \
                 it cannot be combined with --align 7dof",
            ));
        }
    }

    let est = read_trajectory_tum(&args.est)?;
    let reference = read_trajectory_tum(&args.reference)?;
    let (est, reference, gap_count) = pair_by_timestamp(&est, &reference)?;

    let counts: Option<Vec<usize>> = match args.keep {
        Some(_) => Some(load_counts(
            args.counts.clone().unwrap_or_else(|| localize_counts_sibling(&args.est)).as_path(),
            &est,
        )?),
        None => None,
    };
    let filter = match (&counts, args.keep) {
        (Some(counts), Some(keep)) => Some((counts.as_slice(), keep)),
        _ => None,
    };

    let mode = AlignmentMode::from(args.align);
    let report = evaluate(&est, &reference, mode, args.delta, filter).map_err(classify_metrics)?;

    println!(
        "evaluation over {} frames ({} reference gaps skipped, alignment {}):",
        report.n_frames, gap_count, report.alignment_mode
    );
    println!("  ate_rmse {} mm (mean {}, std {})", report.ate_rmse, report.ate_mean, report.ate_std);
    println!("  rrpe_mean {} deg (std {})", report.rrpe_mean, report.rrpe_std);
    if args.keep.is_some() {
        println!("  filter_fraction {}", report.filter_fraction);
    }

    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::runtime(format!("cannot serialize report: {e}")))?;
    std::fs::write(&args.out, json + "\n")
        .map_err(|e| CliError::data(format!("{}: {e}", args.out.display())))?;
    println!("report written to {}", args.out.display());
    Ok(())
}

/// Matches every estimate sample to a reference sample by timestamp.
/// Reference-only timestamps are gaps (skipped, counted); estimate-only
/// timestamps are an error.
fn pair_by_timestamp(
    est: &Trajectory,
    reference: &Trajectory,
) -> Result<(Trajectory, Trajectory, usize), CliError> {
    let refs = reference.samples();
    let mut est_samples = Vec::with_capacity(est.len());
    let mut ref_samples = Vec::with_capacity(est.len());
    let mut position = 0usize;
    'estimates: for sample in est.samples() {
        while position < refs.len() {
            let candidate = &refs[position];
            if (sample.timestamp - candidate.timestamp).abs() <= TIMESTAMP_TOLERANCE_S {
                est_samples.push(*sample);
                ref_samples.push(*candidate);
                position += 1;
                continue 'estimates;
            }
            if candidate.timestamp < sample.timestamp {
                position += 1; // reference-only frame: a gap
            } else {
                break;
            }
        }
        return Err(CliError::data(format!(
            "estimate timestamp {} has no reference match",
            sample.timestamp
        )));
    }
    let gap_count = refs.len() - ref_samples.len();
    let est = Trajectory::new(est_samples).map_err(classify_metrics)?;
    let reference = Trajectory::new(ref_samples).map_err(classify_metrics)?;
    Ok((est, reference, gap_count))
}

/// Reads per-frame inlier counts from a `frames.jsonl` record file and
/// aligns them to the paired estimate by timestamp.
fn load_counts(path: &Path, est: &Trajectory) -> Result<Vec<usize>, CliError> {
    #[derive(serde::Deserialize)]
    struct Record {
        timestamp: f64,
        inlier_count: Option<usize>,
    }

    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::data(format!(
            "{}: {e} (--keep needs the per-frame records a localization run writes; \
             point --counts at its frames.jsonl)",
            path.display()
        ))
    })?;
    let mut records: Vec<(f64, usize)> = Vec::new();
    for (number, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(line).map_err(|e| {
            CliError::data(format!("{} line {}: {e}", path.display(), number + 1))
        })?;
        if let Some(count) = record.inlier_count {
            records.push((record.timestamp, count));
        }
    }

    let mut counts = Vec::with_capacity(est.len());
    let mut position = 0usize;
    'samples: for sample in est.samples() {
        while position < records.len() {
            let (timestamp, count) = records[position];
            position += 1;
            if (sample.timestamp - timestamp).abs() <= TIMESTAMP_TOLERANCE_S {
                counts.push(count);
                continue 'samples;
            }
        }
        return Err(CliError::data(format!(
            "{}: no inlier count for estimate timestamp {}",
            path.display(),
            sample.timestamp
        )));
    }
    Ok(counts)
}
