//! Trajectory evaluation: absolute trajectory error, rotational relative
//! pose error, optional seven-degree-of-freedom similarity alignment, and
//! confidence-percentile filtering.
//!
//! Frames are matched by index — the simulator and the localization loop
//! guarantee synchronized streams — with a timestamp agreement check as a
//! guard; timestamp interpolation is deliberately out of scope.

use crate::geometry::Pose;
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("trajectory is empty")]
    EmptyTrajectory,
    #[error("timestamps must increase strictly: sample {index} does not")]
    NonIncreasingTimestamps { index: usize },
    #[error("trajectory sample {index} is invalid: {reason}")]
    InvalidSample { index: usize, reason: String },
    #[error("trajectory lengths differ: estimate {estimate} vs reference {reference}")]
    LengthMismatch { estimate: usize, reference: usize },
    #[error(
        "timestamps diverge at index {index}: estimate {estimate} vs reference {reference} \
         (tolerance {tolerance} s)"
    )]
    TimestampMismatch { index: usize, estimate: f64, reference: f64, tolerance: f64 },
    #[error("need at least {needed} frames, got {len}")]
    TooShort { len: usize, needed: usize },
    #[error("point spread is rank-deficient: {reason}")]
    DegenerateGeometry { reason: String },
    #[error("frame step must be at least 1")]
    InvalidDelta,
    #[error("keep fraction must lie in (0, 1], got {value}")]
    InvalidKeepFraction { value: f64 },
    #[error("confidence counts cover {counts} frames but the trajectories have {frames}")]
    CountsMismatch { counts: usize, frames: usize },
}

/// Maximum allowed timestamp disagreement between index-matched frames.
pub const TIMESTAMP_TOLERANCE_S: f64 = 1e-6;

/// One timestamped pose, stored quaternion-first so that values parsed from
/// trajectory files survive a write/read cycle bit-exactly (a rotation-matrix
/// round trip would re-derive the quaternion and lose the last bits).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    /// Seconds.
    pub timestamp: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl TrajectorySample {
    pub fn from_pose(timestamp: f64, pose: &Pose) -> Self {
        Self {
            timestamp,
            rotation: UnitQuaternion::from_rotation_matrix(pose.rotation()),
            translation: *pose.translation(),
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::from_quaternion(self.rotation, self.translation)
    }
}

/// A time-ordered pose sequence (estimated or ground truth).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    samples: Vec<TrajectorySample>,
}

impl Trajectory {
    pub fn new(samples: Vec<TrajectorySample>) -> Result<Self, MetricsError> {
        for (index, sample) in samples.iter().enumerate() {
            if !sample.timestamp.is_finite() {
                return Err(MetricsError::InvalidSample {
                    index,
                    reason: format!("timestamp {} is not finite", sample.timestamp),
                });
            }
            if !sample.translation.iter().all(|v| v.is_finite())
                || !sample.rotation.coords.iter().all(|v| v.is_finite())
            {
                return Err(MetricsError::InvalidSample {
                    index,
                    reason: "pose has non-finite components".into(),
                });
            }
            if index > 0 && !(sample.timestamp > samples[index - 1].timestamp) {
                return Err(MetricsError::NonIncreasingTimestamps { index });
            }
        }
        Ok(Self { samples })
    }

    pub fn from_poses<I: IntoIterator<Item = (f64, Pose)>>(pairs: I) -> Result<Self, MetricsError> {
        Self::new(
            pairs
                .into_iter()
                .map(|(timestamp, pose)| TrajectorySample::from_pose(timestamp, &pose))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[TrajectorySample] {
        &self.samples
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.samples.iter().map(|s| s.translation).collect()
    }
}

/// Whether and how the estimate is aligned to the reference before ATE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignmentMode {
    /// Poses are already expressed in the reference coordinate frame.
    #[default]
    None,
    /// Closed-form similarity (scale + rotation + translation) alignment.
    SevenDoF,
}

impl std::fmt::Display for AlignmentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AlignmentMode::None => write!(f, "none"),
            AlignmentMode::SevenDoF => write!(f, "seven_dof"),
        }
    }
}

/// A similarity transform `p -> scale * rotation * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Rotation3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }
}

/// Closed-form least-squares similarity aligning `estimate` onto
/// `reference` (minimizing the sum of squared residuals over index-matched
/// positions), with the determinant sign correction so the rotation is
/// always proper. Rank-deficient point spreads (collinear or coplanar) are
/// rejected rather than silently half-solved.
pub fn umeyama_align(
    estimate: &Trajectory,
    reference: &Trajectory,
) -> Result<SimilarityTransform, MetricsError> {
    check_paired(estimate, reference)?;
    umeyama_points(&estimate.positions(), &reference.positions())
}

/// The point-cloud core of [`umeyama_align`].
pub fn umeyama_points(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
) -> Result<SimilarityTransform, MetricsError> {
    if source.len() != target.len() {
        return Err(MetricsError::LengthMismatch {
            estimate: source.len(),
            reference: target.len(),
        });
    }
    if source.len() < 3 {
        return Err(MetricsError::TooShort { len: source.len(), needed: 3 });
    }
    let n = source.len() as f64;
    let mean_src: Vector3<f64> = source.iter().sum::<Vector3<f64>>() / n;
    let mean_dst: Vector3<f64> = target.iter().sum::<Vector3<f64>>() / n;

    let mut cross = Matrix3::zeros();
    let mut src_variance = 0.0;
    for (p, q) in source.iter().zip(target) {
        let cp = p - mean_src;
        let cq = q - mean_dst;
        cross += cq * cp.transpose();
        src_variance += cp.norm_squared();
    }
    cross /= n;
    src_variance /= n;

    let svd = cross.svd(true, true);
    let u = svd.u.expect("svd computed with u");
    let v_t = svd.v_t.expect("svd computed with v_t");
    let d = svd.singular_values;
    if d[2] <= 1e-9 * d[0] {
        return Err(MetricsError::DegenerateGeometry {
            reason: format!(
                "covariance singular values {:.3e} {:.3e} {:.3e} span fewer than 3 dimensions",
                d[0], d[1], d[2]
            ),
        });
    }
    // Proper-rotation correction: flip the weakest direction when the raw
    // product would be a reflection.
    let sign = if (u.determinant() * v_t.determinant()) < 0.0 { -1.0 } else { 1.0 };
    let mut s = Vector3::new(1.0, 1.0, sign);
    let rotation_matrix = u * Matrix3::from_diagonal(&s) * v_t;
    let rotation = Rotation3::from_matrix(&rotation_matrix);
    s = Vector3::new(d[0], d[1], d[2] * sign);
    let scale = s.sum() / src_variance;
    let translation = mean_dst - rotation * mean_src * scale;
    Ok(SimilarityTransform { scale, rotation, translation })
}

/// Absolute-trajectory-error statistics. `mean`/`std` summarize the same
/// per-frame errors as `rmse` (population standard deviation).
#[derive(Debug, Clone, PartialEq)]
pub struct AteReport {
    pub rmse: f64,
    pub mean: f64,
    pub std: f64,
    pub per_frame: Vec<f64>,
    pub alignment: AlignmentMode,
}

fn check_paired(estimate: &Trajectory, reference: &Trajectory) -> Result<(), MetricsError> {
    if estimate.is_empty() || reference.is_empty() {
        return Err(MetricsError::EmptyTrajectory);
    }
    if estimate.len() != reference.len() {
        return Err(MetricsError::LengthMismatch {
            estimate: estimate.len(),
            reference: reference.len(),
        });
    }
    for (index, (e, r)) in estimate.samples().iter().zip(reference.samples()).enumerate() {
        if (e.timestamp - r.timestamp).abs() > TIMESTAMP_TOLERANCE_S {
            return Err(MetricsError::TimestampMismatch {
                index,
                estimate: e.timestamp,
                reference: r.timestamp,
                tolerance: TIMESTAMP_TOLERANCE_S,
            });
        }
    }
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, variance.sqrt())
}

/// Per-frame translational error between index-matched trajectories, after
/// optionally aligning the estimate with a similarity transform.
pub fn ate(
    estimate: &Trajectory,
    reference: &Trajectory,
    mode: AlignmentMode,
) -> Result<AteReport, MetricsError> {
    check_paired(estimate, reference)?;
    let transform = match mode {
        AlignmentMode::None => SimilarityTransform::identity(),
        AlignmentMode::SevenDoF => umeyama_align(estimate, reference)?,
    };
    let per_frame: Vec<f64> = estimate
        .samples()
        .iter()
        .zip(reference.samples())
        .map(|(e, r)| (transform.apply(&e.translation) - r.translation).norm())
        .collect();
    let rmse =
        (per_frame.iter().map(|e| e * e).sum::<f64>() / per_frame.len() as f64).sqrt();
    let (mean, std) = mean_std(&per_frame);
    Ok(AteReport { rmse, mean, std, per_frame, alignment: mode })
}

/// Rotational relative-pose-error statistics, in degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct RpeReport {
    pub mean_deg: f64,
    pub std_deg: f64,
    pub per_pair: Vec<f64>,
    /// Frame step the relative rotations were taken over.
    pub delta: usize,
}

/// Rotation angle via the trace formula, with the acos argument clamped
/// against roundoff just outside [-1, 1].
fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    (((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0)).acos()
}

/// Rotational relative pose error: for each frame pair `(i, i + delta)` the
/// angle between the estimated and reference relative rotations, in degrees.
/// Invariant under independent global rigid transforms of either trajectory.
pub fn r_rpe(
    estimate: &Trajectory,
    reference: &Trajectory,
    delta: usize,
) -> Result<RpeReport, MetricsError> {
    if delta == 0 {
        return Err(MetricsError::InvalidDelta);
    }
    check_paired(estimate, reference)?;
    if estimate.len() <= delta {
        return Err(MetricsError::TooShort { len: estimate.len(), needed: delta + 1 });
    }
    let relative = |samples: &[TrajectorySample], i: usize| -> Matrix3<f64> {
        let a = samples[i].rotation.to_rotation_matrix();
        let b = samples[i + delta].rotation.to_rotation_matrix();
        (a.transpose() * b).into_inner()
    };
    let per_pair: Vec<f64> = (0..estimate.len() - delta)
        .map(|i| {
            let rel_est = relative(estimate.samples(), i);
            let rel_ref = relative(reference.samples(), i);
            rotation_angle(&(rel_ref.transpose() * rel_est)).to_degrees()
        })
        .collect();
    let (mean_deg, std_deg) = mean_std(&per_pair);
    Ok(RpeReport { mean_deg, std_deg, per_pair, delta })
}

/// ATE restricted to the most confident frames: the `ceil(keep_fraction * n)`
/// frames with the highest inlier counts are retained (ties keep the earlier
/// frame) and evaluated without alignment. `keep_fraction = 1` reproduces
/// [`ate`] bit-for-bit.
pub fn confidence_filtered_ate(
    estimate: &Trajectory,
    reference: &Trajectory,
    inlier_counts: &[usize],
    keep_fraction: f64,
) -> Result<AteReport, MetricsError> {
    check_paired(estimate, reference)?;
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(MetricsError::InvalidKeepFraction { value: keep_fraction });
    }
    if inlier_counts.len() != estimate.len() {
        return Err(MetricsError::CountsMismatch {
            counts: inlier_counts.len(),
            frames: estimate.len(),
        });
    }
    let n = estimate.len();
    let m = ((keep_fraction * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(inlier_counts[i]), i));
    let mut retained: Vec<usize> = order.into_iter().take(m).collect();
    retained.sort_unstable();

    let select = |t: &Trajectory| {
        Trajectory::new(retained.iter().map(|&i| t.samples()[i]).collect())
            .expect("subsequence of a valid trajectory stays valid")
    };
    ate(&select(estimate), &select(reference), AlignmentMode::None)
}

/// The flat evaluation summary emitted by the tooling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub ate_rmse: f64,
    pub ate_mean: f64,
    pub ate_std: f64,
    pub rrpe_mean: f64,
    pub rrpe_std: f64,
    pub n_frames: usize,
    pub alignment_mode: String,
    pub filter_fraction: f64,
}

/// Runs ATE and rotational RPE and assembles the report. `filter` optionally
/// restricts ATE to the most confident frames (counts, keep fraction); the
/// RPE is always computed over the full sequence.
pub fn evaluate(
    estimate: &Trajectory,
    reference: &Trajectory,
    mode: AlignmentMode,
    delta: usize,
    filter: Option<(&[usize], f64)>,
) -> Result<EvaluationReport, MetricsError> {
    let (ate_report, filter_fraction) = match filter {
        None => (ate(estimate, reference, mode)?, 1.0),
        Some((counts, keep)) => (confidence_filtered_ate(estimate, reference, counts, keep)?, keep),
    };
    let rpe_report = r_rpe(estimate, reference, delta)?;
    Ok(EvaluationReport {
        ate_rmse: ate_report.rmse,
        ate_mean: ate_report.mean,
        ate_std: ate_report.std,
        rrpe_mean: rpe_report.mean_deg,
        rrpe_std: rpe_report.std_deg,
        n_frames: estimate.len(),
        alignment_mode: ate_report.alignment.to_string(),
        filter_fraction,
    })
}

/// Mean and population standard deviation across per-sequence values, for
/// aggregating sequence-level results into one figure.
pub fn aggregate_mean_std(per_sequence: &[f64]) -> Result<(f64, f64), MetricsError> {
    if per_sequence.is_empty() {
        return Err(MetricsError::EmptyTrajectory);
    }
    Ok(mean_std(per_sequence))
}
