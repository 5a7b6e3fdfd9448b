//! Acceptance suite: the merge-gating behaviors of the whole engine.
//!
//! One test per criterion; each prints a single `ACCEPTANCE n: PASS/FAIL`
//! line (visible with `--nocapture`) and fails loudly otherwise. Tests
//! serialize on a shared lock so latency measurements never compete for
//! cores with the other criteria.

use luminav_core::confidence::{ConfidencePolicy, ConfidenceState, FrameObservation};
use luminav_core::geometry::{
    perturb_pixel, CameraIntrinsics, PixelPoint, Pose, ScenePoint,
};
use luminav_core::losses::{
    proj_loss, proj_loss_gradient, recon_loss, sim_loss, triplet_loss, FeatureMap, TripletMargin,
};
use luminav_core::metrics::{
    ate, confidence_filtered_ate, umeyama_align, AlignmentMode, Trajectory, TrajectorySample,
};
use luminav_core::retrieval::best_subrange;
use luminav_core::rng::{derived_rng, root_rng};
use luminav_core::sim::{
    corrupt_map, default_camera, generate_lumen, generate_trajectory, render_scene_map,
    LumenConfig, LumenModel, PredictorNoiseModel, RenderConfig,
};
use luminav_core::solver::{apply_pose_increment, estimate_pose, RansacConfig, ScenePointMap};
use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3, Vector6};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

static SERIAL: Mutex<()> = Mutex::new(());

/// Runs one criterion body under the shared lock and prints its verdict.
fn criterion(number: u32, name: &str, body: impl FnOnce() -> Result<String, String>) {
    let _guard = SERIAL.lock().unwrap_or_else(|poisoned| poisoned.into_inner());
    match body() {
        Ok(detail) => println!("ACCEPTANCE {number} ({name}): PASS — {detail}"),
        Err(reason) => {
            println!("ACCEPTANCE {number} ({name}): FAIL — {reason}");
            panic!("acceptance criterion {number} ({name}) failed: {reason}");
        }
    }
}

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !($cond) {
            return Err(format!($($fmt)+));
        }
    };
}

fn fail(error: impl std::fmt::Display) -> String {
    error.to_string()
}

/// Rotation gap in radians via the Frobenius norm of `A^T B - I`
/// (`= 2*sqrt(2)*|sin(theta/2)|`), which stays precise down to ~1e-15 rad
/// where the trace-acos form floors out near 2e-8.
fn rotation_gap_rad(a: &Rotation3<f64>, b: &Rotation3<f64>) -> f64 {
    let d = a.matrix().transpose() * b.matrix() - Matrix3::identity();
    2.0 * (d.norm() / (2.0 * std::f64::consts::SQRT_2)).clamp(-1.0, 1.0).asin()
}

fn random_rotation<R: Rng>(rng: &mut R) -> Rotation3<f64> {
    let normal = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
    let axis = Unit::new_normalize(Vector3::new(normal(rng), normal(rng), normal(rng)));
    Rotation3::from_axis_angle(&axis, rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI))
}

fn random_trajectory<R: Rng>(rng: &mut R, n: usize) -> Trajectory {
    Trajectory::new(
        (0..n)
            .map(|i| TrajectorySample {
                timestamp: i as f64 * 0.04,
                rotation: UnitQuaternion::from_rotation_matrix(&random_rotation(rng)),
                translation: Vector3::new(
                    rng.gen_range(-80.0..80.0),
                    rng.gen_range(-80.0..80.0),
                    rng.gen_range(-20.0..160.0),
                ),
            })
            .collect(),
    )
    .expect("random trajectory is valid")
}

/// Deterministic test course: the default lumen under seed 7 and its
/// first-child route, long enough for 500+ frames at 4 frames/mm.
fn course(frames_per_mm: f64) -> (LumenModel, Vec<Pose>) {
    let mut rng = root_rng(7);
    let model = generate_lumen(&mut rng, &LumenConfig::default()).expect("lumen generates");
    let poses = generate_trajectory(&model, &[0, 0], frames_per_mm).expect("route works");
    (model, poses)
}

// --- 1: exact recovery on noise-free data ----------------------------------

#[test]
fn criterion_1_exact_recovery() {
    criterion(1, "noise-free exact recovery", || {
        let start = Instant::now();
        let intrinsics = default_camera();
        let (model, poses) = course(4.0);
        check!(poses.len() >= 500, "course too short: {} frames", poses.len());
        let render = RenderConfig::default();
        let config = RansacConfig::default();

        let mut worst_translation = 0.0f64;
        let mut worst_rotation = 0.0f64;
        let mut estimates = Vec::with_capacity(poses.len());
        for pose in &poses {
            let map = render_scene_map(&model, pose, &intrinsics, &render).map_err(fail)?;
            let estimate = estimate_pose(&intrinsics, &map, &config).map_err(fail)?;
            let translation_err = (estimate.pose.translation() - pose.translation()).norm();
            let rotation_err = rotation_gap_rad(estimate.pose.rotation(), pose.rotation());
            worst_translation = worst_translation.max(translation_err);
            worst_rotation = worst_rotation.max(rotation_err);
            estimates.push(estimate.pose);
        }
        check!(
            worst_translation < 1e-6,
            "worst translation error {worst_translation:.3e} mm exceeds 1e-6"
        );
        check!(
            worst_rotation < 1e-8,
            "worst rotation error {worst_rotation:.3e} rad exceeds 1e-8"
        );

        let timestamps = |poses: &[Pose]| {
            poses.iter().enumerate().map(|(i, p)| (i as f64 * 0.04, *p)).collect::<Vec<_>>()
        };
        let est = Trajectory::from_poses(timestamps(&estimates)).map_err(fail)?;
        let reference = Trajectory::from_poses(timestamps(&poses)).map_err(fail)?;
        let report = ate(&est, &reference, AlignmentMode::None).map_err(fail)?;
        check!(report.rmse < 1e-5, "ATE {:.3e} mm exceeds 1e-5", report.rmse);

        let elapsed = start.elapsed();
        check!(elapsed.as_secs_f64() < 60.0, "runtime {elapsed:?} exceeds 60 s");
        Ok(format!(
            "{} frames, worst translation {:.2e} mm, worst rotation {:.2e} rad, ATE {:.2e} mm in {:.1?}",
            poses.len(),
            worst_translation,
            worst_rotation,
            report.rmse,
            elapsed
        ))
    });
}

// --- 2: robustness under noise and outliers --------------------------------

#[test]
fn criterion_2_noise_robustness() {
    criterion(2, "sigma 0.5 mm / 30% outliers on 80x60", || {
        let intrinsics = default_camera();
        let (model, poses) = course(1.0);
        let render = RenderConfig { stride: 4, ..RenderConfig::default() };
        let config = RansacConfig::default();
        let noise = PredictorNoiseModel {
            gaussian_sigma: 0.5,
            outlier_fraction: 0.3,
            ..PredictorNoiseModel::default()
        };

        let frames = 200usize;
        let mut errors = Vec::with_capacity(frames);
        let mut failures = 0usize;
        for index in 0..frames {
            let pose = &poses[index % poses.len()];
            let clean = render_scene_map(&model, pose, &intrinsics, &render).map_err(fail)?;
            let mut rng = derived_rng(2, index as u64);
            let noisy = corrupt_map(&clean, &noise, 0, &mut rng).map_err(fail)?;
            match estimate_pose(&intrinsics, &noisy, &config) {
                Ok(estimate) => {
                    errors.push((estimate.pose.translation() - pose.translation()).norm())
                }
                Err(_) => failures += 1,
            }
        }
        let success_rate = errors.len() as f64 / frames as f64;
        check!(
            success_rate >= 0.95,
            "success rate {success_rate:.3} below 0.95 ({failures} failures)"
        );
        errors.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
        let median = errors[errors.len() / 2];
        check!(median < 1.0, "median translation error {median:.4} mm exceeds 1.0");
        Ok(format!(
            "{frames} frames, success rate {success_rate:.3}, median translation error {median:.4} mm"
        ))
    });
}

// --- 3: RANSAC scoring fidelity ---------------------------------------------

/// Hand-rolled reprojection inlier count: camera-frame point `R^T (p - t)`,
/// pinhole projection behind the published near plane, strict `<` threshold —
/// written independently of the solver's scoring paths.
fn brute_force_inliers(
    intrinsics: &CameraIntrinsics,
    map: &ScenePointMap,
    pose: &Pose,
    threshold: f64,
) -> (usize, Vec<bool>) {
    let rotation = pose.rotation().matrix();
    let translation = pose.translation();
    let mut mask = vec![false; map.points().len()];
    let mut count = 0usize;
    for (cell, (point, &valid)) in map.points().iter().zip(map.validity()).enumerate() {
        if !valid {
            continue;
        }
        let d = point.coords() - translation;
        let camera = rotation.transpose() * d;
        if !(camera.z > luminav_core::geometry::NEAR_PLANE_MM) {
            continue;
        }
        let u = intrinsics.fx * camera.x / camera.z + intrinsics.cx;
        let v = intrinsics.fy * camera.y / camera.z + intrinsics.cy;
        let pixel = map.pixel_of(cell);
        let du = u - pixel.u;
        let dv = v - pixel.v;
        if (du * du + dv * dv).sqrt() < threshold {
            mask[cell] = true;
            count += 1;
        }
    }
    (count, mask)
}

#[test]
fn criterion_3_scoring_fidelity() {
    criterion(3, "reported inliers equal brute force", || {
        let intrinsics = default_camera();
        let (model, poses) = course(1.0);
        let render = RenderConfig::default();
        let config = RansacConfig::default();
        let noise = PredictorNoiseModel {
            gaussian_sigma: 0.5,
            outlier_fraction: 0.2,
            ..PredictorNoiseModel::default()
        };

        let mut exact = 0usize;
        for trial in 0..100usize {
            let pose = &poses[(trial * 3) % poses.len()];
            let clean = render_scene_map(&model, pose, &intrinsics, &render).map_err(fail)?;
            let mut rng = derived_rng(3, trial as u64);
            let noisy = corrupt_map(&clean, &noise, 0, &mut rng).map_err(fail)?;
            let estimate = estimate_pose(&intrinsics, &noisy, &config).map_err(fail)?;
            let (count, mask) =
                brute_force_inliers(&intrinsics, &noisy, &estimate.pose, config.inlier_threshold);
            check!(
                count == estimate.inlier_count && mask == estimate.inlier_mask,
                "trial {trial}: reported {} inliers, brute force {count}",
                estimate.inlier_count
            );
            exact += 1;
        }
        Ok(format!("{exact}/100 frames match exactly (count and mask)"))
    });
}

// --- 4: retrieval window equivalence ----------------------------------------

#[test]
fn criterion_4_subrange_equivalence() {
    criterion(4, "best_subrange equals brute force", || {
        let mut rng = root_rng(4);
        for instance in 0..10_000usize {
            let len = rng.gen_range(2..=60usize);
            let range = rng.gen_range(1..len);
            let scores: Vec<usize> = (0..len).map(|_| rng.gen_range(0..8usize)).collect();

            let (start, sum) = best_subrange(&scores, range).map_err(fail)?;

            let mut brute_start = 0usize;
            let mut brute_sum = 0usize;
            let mut first = true;
            for candidate in 0..=len - (range + 1) {
                let total: usize = scores[candidate..candidate + range + 1].iter().sum();
                if first || total > brute_sum {
                    brute_start = candidate;
                    brute_sum = total;
                    first = false;
                }
            }
            check!(
                (start, sum) == (brute_start, brute_sum),
                "instance {instance} (len {len}, range {range}): got ({start}, {sum}), brute force ({brute_start}, {brute_sum})"
            );
        }
        Ok("10000/10000 random instances match exactly, ties included".to_owned())
    });
}

// --- 5: confidence state machine --------------------------------------------

/// Feeds a scripted inlier-count trace and returns the 1-based frame numbers
/// that flipped the gate back into training.
fn trigger_frames(trace: &[usize]) -> Result<Vec<usize>, String> {
    let policy = ConfidencePolicy::default();
    let mut state = ConfidenceState::new();
    state.complete_training().map_err(fail)?;
    let mut triggers = Vec::new();
    for (index, &count) in trace.iter().enumerate() {
        let verdict =
            state.observe(&policy, FrameObservation::InlierCount(count)).map_err(fail)?;
        if verdict.triggered_retrain {
            triggers.push(index + 1);
            state.complete_training().map_err(fail)?;
        }
    }
    Ok(triggers)
}

#[test]
fn criterion_5_confidence_state_machine() {
    criterion(5, "scripted gate trace", || {
        let mut trace = vec![300usize; 100];
        trace.extend(vec![100usize; 25]);
        trace.extend(vec![300usize; 100]);
        let triggers = trigger_frames(&trace)?;
        check!(
            triggers.len() == 1,
            "expected exactly one training transition, got {:?}",
            triggers
        );
        check!(
            (121..=125).contains(&triggers[0]),
            "transition at frame {} outside [121, 125]",
            triggers[0]
        );

        let all_high = vec![300usize; 225];
        let none = trigger_frames(&all_high)?;
        check!(none.is_empty(), "all-high trace triggered at {:?}", none);
        Ok(format!(
            "one transition at frame {} (1-based) on the drop trace, zero on all-high",
            triggers[0]
        ))
    });
}

// --- 6: perturbation-warp geometry ------------------------------------------

#[test]
fn criterion_6_warp_geometry() {
    criterion(6, "perturbation warp closed forms", || {
        let intrinsics = default_camera();
        let identity = Pose::identity();
        let mut rng = root_rng(6);
        for _ in 0..200 {
            let pixel = PixelPoint::new(
                rng.gen_range(0.0..intrinsics.width as f64),
                rng.gen_range(0.0..intrinsics.height as f64),
            );
            let depth = rng.gen_range(0.5..200.0);
            let mapped = perturb_pixel(&intrinsics, &identity, &intrinsics, &pixel, depth)
                .ok_or("identity warp returned None")?;
            check!(
                mapped.u == pixel.u && mapped.v == pixel.v,
                "identity warp moved ({}, {}) to ({}, {})",
                pixel.u,
                pixel.v,
                mapped.u,
                mapped.v
            );
        }

        let principal = PixelPoint::new(intrinsics.cx, intrinsics.cy);
        let mut worst = 0.0f64;
        for &yaw in &[-0.4, -0.2, -0.05, 0.03, 0.1, 0.25, 0.45] {
            let perturbation = Pose::from_euler_zyx(0.0, yaw, 0.0, Vector3::zeros());
            for &depth in &[1.0, 10.0, 75.0] {
                let mapped =
                    perturb_pixel(&intrinsics, &perturbation, &intrinsics, &principal, depth)
                        .ok_or("yaw warp returned None")?;
                let displacement = (mapped.u - intrinsics.cx).abs();
                let expected = intrinsics.fx * yaw.tan().abs();
                let gap = (displacement - expected).abs();
                worst = worst.max(gap);
                check!(
                    gap < 1e-6,
                    "yaw {yaw}: displacement {displacement} vs fx*tan {expected} (gap {gap:.2e})"
                );
                check!(
                    (mapped.v - intrinsics.cy).abs() < 1e-9,
                    "yaw {yaw}: principal ray moved vertically to {}",
                    mapped.v
                );
            }
        }
        Ok(format!(
            "identity warp exact on 200 pixels; yaw displacement matches fx*tan(yaw), worst gap {worst:.2e} px"
        ))
    });
}

// --- 7: loss analytics --------------------------------------------------------

#[test]
fn criterion_7_loss_analytics() {
    criterion(7, "loss closed forms and gradient", || {
        // Orthogonal two-channel features: cosine distance exactly 1.
        let anchor = FeatureMap::new(2, 2, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0])
            .map_err(fail)?;
        let orthogonal = FeatureMap::new(2, 2, 2, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0])
            .map_err(fail)?;
        let same = sim_loss(&anchor, std::slice::from_ref(&anchor)).map_err(fail)?;
        check!(same == 0.0, "sim_loss(anchor, anchor) = {same}, want exactly 0");
        let cross = sim_loss(&anchor, std::slice::from_ref(&orthogonal)).map_err(fail)?;
        check!(cross == 1.0, "sim_loss orthogonal = {cross}, want exactly 1");

        let margin = TripletMargin::new(0.5).map_err(fail)?;
        let clamped = triplet_loss(&anchor, &anchor, &orthogonal, margin).map_err(fail)?;
        check!(clamped == 0.0, "easy triplet = {clamped}, want exactly 0");
        let hard = triplet_loss(&anchor, &orthogonal, &anchor, margin).map_err(fail)?;
        check!(hard == 1.5, "hard triplet = {hard}, want exactly 1.5");

        let dark = luminav_core::augment::Image::constant(8, 8, 3, 0.25).map_err(fail)?;
        let bright = luminav_core::augment::Image::constant(8, 8, 3, 0.75).map_err(fail)?;
        let rms = recon_loss(&dark, &bright).map_err(fail)?;
        check!(rms == 0.5, "recon_loss constant gap = {rms}, want exactly 0.5");

        // A single 3-4-5 residual: loss exactly 5.
        let intrinsics = default_camera();
        let pose = Pose::identity();
        let point = ScenePoint::new(0.0, 0.0, 50.0);
        let pixel = PixelPoint::new(intrinsics.cx + 3.0, intrinsics.cy + 4.0);
        let (loss, residuals) = proj_loss(&intrinsics, &pose, &[(pixel, point)]);
        check!(loss == 5.0 && residuals == vec![5.0], "3-4-5 proj_loss = {loss}, want exactly 5");

        // Analytic gradient vs central differences at 100 random states.
        let mut rng = root_rng(7);
        let mut worst_relative = 0.0f64;
        for state in 0..100 {
            let pose = Pose::from_rotation(
                random_rotation(&mut rng),
                Vector3::new(
                    rng.gen_range(-20.0..20.0),
                    rng.gen_range(-20.0..20.0),
                    rng.gen_range(-20.0..20.0),
                ),
            );
            let pairs: Vec<(PixelPoint, ScenePoint)> = (0..20)
                .map(|_| {
                    // A camera-frame point safely in front, mapped to world.
                    let camera = Vector3::new(
                        rng.gen_range(-30.0..30.0),
                        rng.gen_range(-30.0..30.0),
                        rng.gen_range(20.0..120.0),
                    );
                    let world = pose.rotation() * camera + pose.translation();
                    let u = intrinsics.fx * camera.x / camera.z + intrinsics.cx;
                    let v = intrinsics.fy * camera.y / camera.z + intrinsics.cy;
                    let pixel = PixelPoint::new(
                        u + rng.gen_range(-4.0..4.0),
                        v + rng.gen_range(-4.0..4.0),
                    );
                    (pixel, ScenePoint::from_coords(world))
                })
                .collect();

            let analytic = proj_loss_gradient(&intrinsics, &pose, &pairs);
            let mut numeric = Vector6::zeros();
            let step = 1e-6;
            for dim in 0..6 {
                let mut delta = Vector6::zeros();
                delta[dim] = step;
                let plus = proj_loss(&intrinsics, &apply_pose_increment(&pose, &delta), &pairs).0;
                delta[dim] = -step;
                let minus = proj_loss(&intrinsics, &apply_pose_increment(&pose, &delta), &pairs).0;
                numeric[dim] = (plus - minus) / (2.0 * step);
            }
            let relative = (analytic - numeric).norm() / numeric.norm().max(1e-12);
            worst_relative = worst_relative.max(relative);
            check!(
                relative <= 1e-5,
                "state {state}: gradient relative error {relative:.3e} exceeds 1e-5"
            );
        }
        Ok(format!(
            "closed forms exact; gradient matches central differences, worst relative error {worst_relative:.2e} over 100 states"
        ))
    });
}

// --- 8: trajectory metrics ----------------------------------------------------

#[test]
fn criterion_8_metrics() {
    criterion(8, "alignment and filtered ATE", || {
        let mut rng = root_rng(8);

        // Umeyama recovers a synthesized sim(3).
        let reference = random_trajectory(&mut rng, 40);
        let scale = 2.0;
        let rotation = random_rotation(&mut rng);
        let shift = Vector3::new(12.0, -7.0, 31.0);
        let estimate = Trajectory::new(
            reference
                .samples()
                .iter()
                .map(|sample| TrajectorySample {
                    translation: rotation * sample.translation * scale + shift,
                    ..*sample
                })
                .collect(),
        )
        .map_err(fail)?;
        let recovered = umeyama_align(&estimate, &reference).map_err(fail)?;
        let mut worst_residual = 0.0f64;
        for (est, reference) in estimate.samples().iter().zip(reference.samples()) {
            worst_residual = worst_residual
                .max((recovered.apply(&est.translation) - reference.translation).norm());
        }
        check!(
            worst_residual < 1e-9,
            "umeyama residual {worst_residual:.3e} mm exceeds 1e-9"
        );

        // ATE with SevenDoF alignment is invariant under sim(3) perturbation.
        let est = random_trajectory(&mut rng, 30);
        let reference = random_trajectory(&mut rng, 30);
        let base = ate(&est, &reference, AlignmentMode::SevenDoF).map_err(fail)?;
        let warp_rotation = random_rotation(&mut rng);
        let warped = Trajectory::new(
            est.samples()
                .iter()
                .map(|sample| TrajectorySample {
                    translation: warp_rotation * sample.translation * 3.5
                        + Vector3::new(-40.0, 15.0, 8.0),
                    ..*sample
                })
                .collect(),
        )
        .map_err(fail)?;
        let perturbed = ate(&warped, &reference, AlignmentMode::SevenDoF).map_err(fail)?;
        let drift = (base.rmse - perturbed.rmse).abs();
        check!(drift < 1e-9, "SevenDoF ATE drifted {drift:.3e} mm under sim(3)");

        // Filtered ATE is monotone non-increasing in the kept fraction when
        // error magnitude anti-correlates with the confidence counts.
        let n = 100usize;
        let reference = random_trajectory(&mut rng, n);
        let counts: Vec<usize> = (0..n).collect();
        let correlated = Trajectory::new(
            reference
                .samples()
                .iter()
                .enumerate()
                .map(|(i, sample)| TrajectorySample {
                    translation: sample.translation
                        + Vector3::new(0.1 * (n - i) as f64, 0.0, 0.0),
                    ..*sample
                })
                .collect(),
        )
        .map_err(fail)?;
        let mut sequence = Vec::new();
        for keep in [1.0, 0.9, 0.8, 0.7, 0.6] {
            let report =
                confidence_filtered_ate(&correlated, &reference, &counts, keep).map_err(fail)?;
            sequence.push(report.rmse);
        }
        for window in sequence.windows(2) {
            check!(
                window[1] <= window[0] + 1e-12,
                "filtered ATE not monotone: {sequence:?}"
            );
        }
        check!(
            sequence[4] < sequence[0],
            "filtering never helped on the correlated scenario: {sequence:?}"
        );
        Ok(format!(
            "umeyama residual {worst_residual:.1e} mm, SevenDoF invariance drift {drift:.1e} mm, filtered ATE {:.2} -> {:.2} mm monotone",
            sequence[0], sequence[4]
        ))
    });
}

// --- 9: latency budget ---------------------------------------------------------

#[test]
fn criterion_9_latency_budget() {
    criterion(9, "per-stage latency on 80x60", || {
        let exe = env!("CARGO_BIN_EXE_luminav");
        let output = Command::new(exe)
            .args(["bench", "--frames", "500", "--stride", "4", "--seed", "9", "--json"])
            .output()
            .map_err(fail)?;
        check!(
            output.status.success(),
            "bench exited with {:?}: {}",
            output.status.code(),
            String::from_utf8_lossy(&output.stderr)
        );
        let report: serde_json::Value =
            serde_json::from_slice(&output.stdout).map_err(fail)?;
        check!(
            report["failures"] == 0 && report["frames"] == 500,
            "unexpected bench shape: {report}"
        );
        let median_of = |name: &str| -> Result<f64, String> {
            report["stages"]
                .as_array()
                .and_then(|stages| stages.iter().find(|s| s["name"] == name))
                .and_then(|stage| stage["median_ms"].as_f64())
                .ok_or_else(|| format!("stage {name:?} missing from bench output"))
        };
        let ransac = median_of("PnP & RANSAC")?;
        let total = median_of("Total")?;
        check!(
            ransac <= 15.0,
            "PnP & RANSAC median {ransac:.2} ms exceeds the 15 ms hard gate"
        );
        let soft = if total <= 40.0 { "within" } else { "OVER" };
        Ok(format!(
            "PnP & RANSAC median {ransac:.2} ms (hard gate 15 ms); total median {total:.2} ms, {soft} the 40 ms soft target (reported, not gating)"
        ))
    });
}

// --- 10: round-trips -------------------------------------------------------------

#[test]
fn criterion_10_round_trips() {
    criterion(10, "bit-exact round-trips and run determinism", || {
        use luminav_core::io::{
            export_dataset, import_dataset, read_trajectory_tum, write_depth_map,
            write_descriptors, write_image_raw, write_intrinsics_json, write_scene_map,
            write_trajectory_tum,
        };
        use luminav_core::sim::{synthesize_frame, PoseEmbedder};

        // Dataset export/import is bit-exact.
        let scratch = tempfile::tempdir().map_err(fail)?;
        let intrinsics = default_camera();
        let (model, poses) = course(0.2);
        let embedder = PoseEmbedder::new(1729, 64, 0.05).map_err(fail)?;
        let noise = PredictorNoiseModel::default();
        let render = RenderConfig::default();
        let frames: Vec<_> = poses
            .iter()
            .take(5)
            .enumerate()
            .map(|(id, pose)| {
                let mut rng = derived_rng(10, id as u64);
                synthesize_frame(&model, pose, &intrinsics, &render, &noise, &embedder, id, &mut rng)
            })
            .collect::<Result<_, _>>()
            .map_err(fail)?;
        let dataset_dir = scratch.path().join("ds");
        export_dataset(&dataset_dir, &frames, &intrinsics, 25.0).map_err(fail)?;
        let dataset = import_dataset(&dataset_dir).map_err(fail)?;
        check!(dataset.intrinsics == intrinsics, "intrinsics changed in round-trip");
        // Values survive at the format's stored precision: images and depths
        // are f32 end to end; map points and descriptors are held in f64 and
        // stored as f32, so the import must equal the original's f32 cast.
        let f32_bits = |values: &[f32]| values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let stored_bits =
            |values: &[f64]| values.iter().map(|v| (*v as f32).to_bits()).collect::<Vec<_>>();
        let point_values =
            |points: &[ScenePoint]| points.iter().flat_map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>();
        for (frame, original) in dataset.frames.iter().zip(&frames) {
            check!(
                f32_bits(frame.image.values()) == f32_bits(original.image.values()),
                "image bits changed for frame {}",
                frame.index
            );
            check!(
                f32_bits(frame.depth.depths()) == f32_bits(original.depth.depths())
                    && frame.depth.validity() == original.depth.validity(),
                "depth bits changed for frame {}",
                frame.index
            );
            check!(
                stored_bits(&point_values(frame.map.points()))
                    == stored_bits(&point_values(original.noisy_map.points()))
                    && frame.map.validity() == original.noisy_map.validity(),
                "scene map changed for frame {}",
                frame.index
            );
        }
        for (loaded, original) in dataset.descriptors.iter().zip(&frames) {
            check!(
                stored_bits(loaded.values()) == stored_bits(original.descriptor.values()),
                "descriptor changed in round-trip"
            );
        }

        // The cycle is lossless: writing the imported dataset back out
        // reproduces every file byte for byte.
        let reexport_dir = scratch.path().join("ds2");
        let reexport_frames = reexport_dir.join("frames");
        std::fs::create_dir_all(&reexport_frames).map_err(fail)?;
        write_intrinsics_json(&reexport_dir.join("intrinsics.json"), &dataset.intrinsics)
            .map_err(fail)?;
        write_trajectory_tum(&reexport_dir.join("gt_poses.txt"), &dataset.ground_truth)
            .map_err(fail)?;
        write_descriptors(&reexport_dir.join("descriptors.bin"), &dataset.descriptors)
            .map_err(fail)?;
        let mut relative_paths = vec![
            "intrinsics.json".to_owned(),
            "gt_poses.txt".to_owned(),
            "descriptors.bin".to_owned(),
        ];
        for frame in &dataset.frames {
            let stem = format!("frames/frame_{:06}", frame.index);
            write_image_raw(
                &reexport_dir.join(format!("{stem}.img")),
                &frame.image,
            )
            .map_err(fail)?;
            write_depth_map(
                &reexport_dir.join(format!("{stem}.dpt")),
                &frame.depth,
            )
            .map_err(fail)?;
            write_scene_map(
                &reexport_dir.join(format!("{stem}.scm")),
                &frame.map,
            )
            .map_err(fail)?;
            for extension in ["img", "dpt", "scm"] {
                relative_paths.push(format!("{stem}.{extension}"));
            }
        }
        for relative in &relative_paths {
            let a = std::fs::read(dataset_dir.join(relative)).map_err(fail)?;
            let b = std::fs::read(reexport_dir.join(relative)).map_err(fail)?;
            check!(a == b, "{relative} differs after an import/export cycle");
        }

        // TUM write/read is bit-exact in value: a second write reproduces the
        // file byte-for-byte and every numeric field survives exactly.
        let trajectory = random_trajectory(&mut root_rng(10), 50);
        let tum_a = scratch.path().join("a.txt");
        let tum_b = scratch.path().join("b.txt");
        write_trajectory_tum(&tum_a, &trajectory).map_err(fail)?;
        let reread = read_trajectory_tum(&tum_a).map_err(fail)?;
        write_trajectory_tum(&tum_b, &reread).map_err(fail)?;
        let bytes_a = std::fs::read(&tum_a).map_err(fail)?;
        let bytes_b = std::fs::read(&tum_b).map_err(fail)?;
        check!(bytes_a == bytes_b, "TUM file changed across write/read/write");
        for (first, second) in trajectory.samples().iter().zip(reread.samples()) {
            check!(
                first.timestamp.to_bits() == second.timestamp.to_bits()
                    && first.translation.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
                        == second.translation.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                "TUM numeric fields changed"
            );
        }

        // Identical seeds reproduce identical end-to-end runs.
        let exe = env!("CARGO_BIN_EXE_luminav");
        let shrink = [
            "--set", "camera.fx=75", "--set", "camera.fy=75",
            "--set", "camera.cx=80", "--set", "camera.cy=60",
            "--set", "camera.width=160", "--set", "camera.height=120",
            "--set", "simulator.frames_per_mm=0.5", "--set", "retrieval.range=40",
        ];
        let run = |label: &str| -> Result<std::path::PathBuf, String> {
            let root = scratch.path().join(label);
            let ds = root.join("ds");
            let out = root.join("run");
            let sim = Command::new(exe)
                .arg("simulate")
                .args(["--seed", "7", "--out"])
                .arg(&ds)
                .args(shrink)
                .output()
                .map_err(fail)?;
            check!(
                sim.status.success(),
                "simulate failed: {}",
                String::from_utf8_lossy(&sim.stderr)
            );
            let loc = Command::new(exe)
                .arg("localize")
                .args(["--seed", "7", "--dataset"])
                .arg(&ds)
                .arg("--out")
                .arg(&out)
                .args(["--set", "retrieval.range=40"])
                .output()
                .map_err(fail)?;
            check!(
                loc.status.success(),
                "localize failed: {}",
                String::from_utf8_lossy(&loc.stderr)
            );
            Ok(root)
        };
        let first = run("one")?;
        let second = run("two")?;
        for name in ["ds/gt_poses.txt", "ds/descriptors.bin", "ds/virtual_index.txt",
                     "ds/virtual_descriptors.bin", "run/est_poses.txt", "run/phase_log.txt",
                     "run/run_summary.json"] {
            let a = std::fs::read(first.join(name)).map_err(fail)?;
            let b = std::fs::read(second.join(name)).map_err(fail)?;
            check!(a == b, "{name} differs between identical-seed runs");
        }
        // Frame records carry wall-clock timings; everything else matches.
        let strip = |path: &std::path::Path| -> Result<Vec<serde_json::Value>, String> {
            std::fs::read_to_string(path)
                .map_err(fail)?
                .lines()
                .map(|line| {
                    let mut record: serde_json::Value = serde_json::from_str(line).map_err(fail)?;
                    record.as_object_mut().expect("record is an object").remove("solve_ms");
                    Ok(record)
                })
                .collect()
        };
        let records_a = strip(&first.join("run/frames.jsonl"))?;
        let records_b = strip(&second.join("run/frames.jsonl"))?;
        check!(records_a == records_b, "frame records differ beyond timing");

        Ok("dataset and TUM round-trips bit-exact; identical seeds gave identical runs".to_owned())
    });
}
