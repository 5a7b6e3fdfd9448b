//! `luminav bench`: per-stage latency over synthetic frames.
//!
//! Builds a lumen, walks its route, and for each frame measures the
//! localization stages on one core:
//!
//! * scene coordinate regression — rendering plus predictor-noise
//!   corruption stands in for the network forward pass;
//! * PnP & RANSAC — hypothesis search;
//! * refinement — inlier re-fit;
//! * confidence update — the gate verdict.
//!
//! Reports per-stage median and p95 milliseconds. Timing is the one output
//! `--seed` does not pin down; everything measured is still deterministic.

use crate::cli::BenchArgs;
use crate::error::{classify_sim, runtime_of, usage_of, CliError};
use luminav_core::confidence::{ConfidenceState, FrameObservation};
use luminav_core::rng::{derived_rng, root_rng};
use luminav_core::sim::{corrupt_map, generate_lumen, generate_trajectory, render_scene_map};
use luminav_core::solver::estimate_pose_timed;
use serde::Serialize;
use std::time::Instant;

#[derive(Serialize)]
struct StageReport {
    name: &'static str,
    median_ms: f64,
    p95_ms: f64,
}

#[derive(Serialize)]
struct BenchReport {
    frames: usize,
    failures: usize,
    grid_cols: u32,
    grid_rows: u32,
    stride: u32,
    stages: Vec<StageReport>,
}

/// Median and 95th percentile of a sample set, by sorting.
fn stats(samples: &mut [f64]) -> (f64, f64) {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("latencies are finite"));
    let n = samples.len();
    let p95_index = ((n as f64 * 0.95).ceil() as usize).clamp(1, n) - 1;
    (samples[n / 2], samples[p95_index])
}

pub fn run(args: &BenchArgs) -> Result<(), CliError> {
    if args.frames == 0 {
        return Err(CliError::usage("--frames must be at least 1"));
    }
    let config = args.config.resolve()?;
    let intrinsics = config.camera.build()?;
    config.ransac.validate().map_err(usage_of)?;
    config.confidence.validate().map_err(usage_of)?;
    config.noise.validate().map_err(usage_of)?;

    let mut render = config.simulator.render;
    render.stride = args.stride;

    let mut rng = root_rng(config.seed);
    let model = generate_lumen(&mut rng, &config.simulator.lumen).map_err(classify_sim)?;
    let route = config.simulator.effective_route();
    let poses = generate_trajectory(&model, &route, config.simulator.frames_per_mm)
        .map_err(classify_sim)?;

    let mut state = ConfidenceState::new();
    state.complete_training().map_err(runtime_of)?;

    let mut synth_ms = Vec::with_capacity(args.frames);
    let mut ransac_ms = Vec::with_capacity(args.frames);
    let mut refine_ms = Vec::with_capacity(args.frames);
    let mut gate_ms = Vec::with_capacity(args.frames);
    let mut total_ms = Vec::with_capacity(args.frames);
    let mut failures = 0usize;

    for index in 0..args.frames {
        let pose = &poses[index % poses.len()];
        let mut frame_rng = derived_rng(config.seed, index as u64);

        let synth_start = Instant::now();
        let clean = render_scene_map(&model, pose, &intrinsics, &render).map_err(classify_sim)?;
        let noisy = corrupt_map(&clean, &config.noise, index, &mut frame_rng).map_err(classify_sim)?;
        let synth = synth_start.elapsed().as_secs_f64() * 1e3;

        let observation = match estimate_pose_timed(&intrinsics, &noisy, &config.ransac) {
            Ok((estimate, timings)) => {
                let ransac = timings.ransac.as_secs_f64() * 1e3;
                let refine = timings.refine.as_secs_f64() * 1e3;
                let gate_start = Instant::now();
                let verdict = state
                    .observe(&config.confidence, FrameObservation::InlierCount(estimate.inlier_count))
                    .map_err(runtime_of)?;
                let gate = gate_start.elapsed().as_secs_f64() * 1e3;
                if verdict.triggered_retrain {
                    state.complete_training().map_err(runtime_of)?;
                }
                synth_ms.push(synth);
                ransac_ms.push(ransac);
                refine_ms.push(refine);
                gate_ms.push(gate);
                total_ms.push(synth + ransac + refine + gate);
                continue;
            }
            Err(_) => FrameObservation::SolverFailure,
        };
        failures += 1;
        let verdict = state.observe(&config.confidence, observation).map_err(runtime_of)?;
        if verdict.triggered_retrain {
            state.complete_training().map_err(runtime_of)?;
        }
    }

    if synth_ms.is_empty() {
        return Err(CliError::runtime(format!(
            "all {} frames failed to solve; nothing to report",
            args.frames
        )));
    }

    let stages = vec![
        ("Scene Coordinate Regression", &mut synth_ms),
        ("PnP & RANSAC", &mut ransac_ms),
        ("Refinement", &mut refine_ms),
        ("Confidence Update", &mut gate_ms),
        ("Total", &mut total_ms),
    ];
    let reports: Vec<StageReport> = stages
        .into_iter()
        .map(|(name, samples)| {
            let (median_ms, p95_ms) = stats(samples);
            StageReport { name, median_ms, p95_ms }
        })
        .collect();

    let report = BenchReport {
        frames: args.frames,
        failures,
        grid_cols: intrinsics.width / render.stride,
        grid_rows: intrinsics.height / render.stride,
        stride: render.stride,
        stages: reports,
    };

    if args.json {
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| CliError::runtime(format!("cannot serialize report: {e}")))?;
        println!("{json}");
    } else {
        println!(
            "{} frames on a {}x{} scene grid (stride {}), {} solver failures",
            report.frames, report.grid_cols, report.grid_rows, report.stride, report.failures
        );
        println!("{:<30} {:>12} {:>12}", "stage", "median (ms)", "p95 (ms)");
        for stage in &report.stages {
            println!("{:<30} {:>12.3} {:>12.3}", stage.name, stage.median_ms, stage.p95_ms);
        }
    }
    Ok(())
}
