//! Training objectives as pure, gradient-checkable numerical functions.
//!
//! Feature-space terms ([`sim_loss`], [`triplet_loss`]) operate on dense
//! [`FeatureMap`]s through per-location cosine geometry; the image term
//! ([`recon_loss`]) is an RMSE; the geometric term ([`proj_loss`]) sums
//! reprojection residual norms and comes with an analytic pose gradient
//! ([`proj_loss_gradient`]) on the same local parameterization the pose
//! refiner uses. [`offline_objective`] combines the pieces.

use crate::augment::Image;
use crate::geometry::{project, CameraIntrinsics, PixelPoint, Pose, ScenePoint};
use crate::solver::projection_with_jacobian;
use nalgebra::{Vector2, Vector6};
use thiserror::Error;

/// Per-location feature vectors below this norm are rejected: cosine
/// similarity is undefined there.
const FEATURE_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("feature dimensions must be positive, got {height}x{width}x{channels}")]
    EmptyFeatureMap { height: u32, width: u32, channels: u32 },
    #[error("buffer holds {len} values but {height}x{width}x{channels} needs {expected}")]
    BufferSizeMismatch { len: usize, height: u32, width: u32, channels: u32, expected: usize },
    #[error("feature value at index {index} is not finite")]
    NonFiniteFeature { index: usize },
    #[error("feature maps have mismatched shapes: {ah}x{aw}x{ac} vs {bh}x{bw}x{bc}")]
    ShapeMismatch { ah: u32, aw: u32, ac: u32, bh: u32, bw: u32, bc: u32 },
    #[error("feature vector at location ({row},{col}) has near-zero norm")]
    ZeroNormFeature { row: u32, col: u32 },
    #[error("images have mismatched shapes")]
    ImageShapeMismatch,
    #[error("margin must be non-negative and finite, got {0}")]
    InvalidMargin(f64),
}

/// A dense H x W x C feature tensor, stored row-major with the channel
/// vector of each spatial location contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: u32,
    width: u32,
    channels: u32,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: u32, width: u32, channels: u32, values: Vec<f64>) -> Result<Self, LossError> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(LossError::EmptyFeatureMap { height, width, channels });
        }
        let expected = height as usize * width as usize * channels as usize;
        if values.len() != expected {
            return Err(LossError::BufferSizeMismatch {
                len: values.len(),
                height,
                width,
                channels,
                expected,
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(LossError::NonFiniteFeature { index });
        }
        Ok(Self { height, width, channels, values })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn channels(&self) -> u32 {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn location_count(&self) -> usize {
        self.height as usize * self.width as usize
    }

    /// The channel vector at a flat spatial location index.
    fn vector_at(&self, location: usize) -> &[f64] {
        let c = self.channels as usize;
        &self.values[location * c..(location + 1) * c]
    }

    fn same_shape(&self, other: &FeatureMap) -> Result<(), LossError> {
        if self.height != other.height
            || self.width != other.width
            || self.channels != other.channels
        {
            return Err(LossError::ShapeMismatch {
                ah: self.height,
                aw: self.width,
                ac: self.channels,
                bh: other.height,
                bw: other.width,
                bc: other.channels,
            });
        }
        Ok(())
    }
}

/// Hinge margin for [`triplet_loss`]; non-negative, default 0.5. Distinct
/// from the solver's pixel inlier threshold, which shares the same symbol in
/// common notation but not a meaning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletMargin {
    value: f64,
}

impl TripletMargin {
    pub fn new(value: f64) -> Result<Self, LossError> {
        if !(value.is_finite() && value >= 0.0) {
            return Err(LossError::InvalidMargin(value));
        }
        Ok(Self { value })
    }

    pub fn value(&self) -> f64 {
        self.value
    }
}

impl Default for TripletMargin {
    fn default() -> Self {
        Self { value: 0.5 }
    }
}

/// Cosine distance `1 - cos` between the channel vectors of two maps at one
/// location; errors on a near-zero vector.
fn cosine_distance_at(a: &FeatureMap, b: &FeatureMap, location: usize) -> Result<f64, LossError> {
    let va = a.vector_at(location);
    let vb = b.vector_at(location);
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in va.iter().zip(vb) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na <= FEATURE_NORM_FLOOR || nb <= FEATURE_NORM_FLOOR {
        let row = location as u32 / a.width;
        let col = location as u32 % a.width;
        return Err(LossError::ZeroNormFeature { row, col });
    }
    Ok(1.0 - dot / (na * nb))
}

/// Mean per-location cosine distance between two equally-shaped maps.
fn mean_cosine_distance(a: &FeatureMap, b: &FeatureMap) -> Result<f64, LossError> {
    a.same_shape(b)?;
    let mut total = 0.0;
    for location in 0..a.location_count() {
        total += cosine_distance_at(a, b, location)?;
    }
    Ok(total / a.location_count() as f64)
}

/// Mean cosine distance between an anchor map and a set of augmented views
/// of it: the sum of per-location distances over all pairs, normalized by
/// `k * H * W`. An empty set yields 0.
pub fn sim_loss(anchor: &FeatureMap, augmented: &[FeatureMap]) -> Result<f64, LossError> {
    if augmented.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for view in augmented {
        anchor.same_shape(view)?;
        for location in 0..anchor.location_count() {
            total += cosine_distance_at(anchor, view, location)?;
        }
    }
    Ok(total / (augmented.len() * anchor.location_count()) as f64)
}

/// Hinge triplet loss `max(d(anchor, positive) - d(anchor, negative) + margin, 0)`
/// where `d` is the mean per-location cosine distance.
pub fn triplet_loss(
    anchor: &FeatureMap,
    positive: &FeatureMap,
    negative: &FeatureMap,
    margin: TripletMargin,
) -> Result<f64, LossError> {
    let d_pos = mean_cosine_distance(anchor, positive)?;
    let d_neg = mean_cosine_distance(anchor, negative)?;
    Ok((d_pos - d_neg + margin.value).max(0.0))
}

/// Root-mean-square difference between two images.
pub fn recon_loss(target: &Image, reconstruction: &Image) -> Result<f64, LossError> {
    let sum = squared_image_difference(target, reconstruction)?;
    Ok((sum / target.values().len() as f64).sqrt())
}

/// Unnormalized variant of [`recon_loss`]: the plain L2 norm of the
/// difference, for consumers that want the un-averaged objective.
pub fn recon_loss_l2(target: &Image, reconstruction: &Image) -> Result<f64, LossError> {
    squared_image_difference(target, reconstruction).map(f64::sqrt)
}

fn squared_image_difference(target: &Image, reconstruction: &Image) -> Result<f64, LossError> {
    if target.width() != reconstruction.width()
        || target.height() != reconstruction.height()
        || target.channels() != reconstruction.channels()
    {
        return Err(LossError::ImageShapeMismatch);
    }
    Ok(target
        .values()
        .iter()
        .zip(reconstruction.values())
        .map(|(&t, &r)| {
            let d = t as f64 - r as f64;
            d * d
        })
        .sum())
}

/// Residual cap for correspondences whose scene point falls at or behind the
/// camera: twice the image diagonal, keeping the objective finite (with zero
/// gradient) outside the valid region.
pub fn behind_camera_cap(intrinsics: &CameraIntrinsics) -> f64 {
    2.0 * intrinsics.diagonal()
}

/// Sum of reprojection residual norms over pixel/scene correspondences, plus
/// the per-pair residuals. Pairs at or behind the near plane contribute
/// [`behind_camera_cap`] instead of a norm.
pub fn proj_loss(
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    correspondences: &[(PixelPoint, ScenePoint)],
) -> (f64, Vec<f64>) {
    let cap = behind_camera_cap(intrinsics);
    let residuals: Vec<f64> = correspondences
        .iter()
        .map(|(pixel, point)| match project(intrinsics, pose, point) {
            Some((projected, _)) => projected.distance(pixel),
            None => cap,
        })
        .collect();
    (residuals.iter().sum(), residuals)
}

/// Analytic gradient of [`proj_loss`] with respect to the six-parameter pose
/// increment of [`apply_pose_increment`] (rotation first, translation last).
///
/// Each pair contributes `-(r/|r|)^T J` where `r` is the pixel residual and
/// `J` the projection Jacobian; pairs with zero residual or behind the
/// camera (where the loss is capped flat) contribute nothing.
pub fn proj_loss_gradient(
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    correspondences: &[(PixelPoint, ScenePoint)],
) -> Vector6<f64> {
    let inv = pose.inverse();
    let (r_wc, t_wc) = (inv.rotation(), inv.translation());
    let mut gradient = Vector6::zeros();
    for (pixel, point) in correspondences {
        // The residual must come from the same computation as the loss
        // itself: a pair with an exactly-zero loss residual must also be
        // exactly zero here, or its unit direction r/|r| would be noise.
        let Some((projected, _)) = project(intrinsics, pose, point) else {
            continue;
        };
        let r = Vector2::new(pixel.u - projected.u, pixel.v - projected.v);
        let norm = r.norm();
        if norm == 0.0 {
            continue;
        }
        let Some((_, jac)) = projection_with_jacobian(intrinsics, r_wc, t_wc, point) else {
            continue;
        };
        // d|r|/d delta = (r/|r|)^T dr/d delta, and dr/d delta = -J.
        gradient += jac.transpose() * (-r / norm);
    }
    gradient
}

/// Combined offline objective: similarity + triplet + anchor reprojection +
/// the mean of the augmented-view reprojection terms (0 when there are
/// none).
pub fn offline_objective(sim: f64, triplet: f64, proj_anchor: f64, proj_augmented: &[f64]) -> f64 {
    let augmented_mean = if proj_augmented.is_empty() {
        0.0
    } else {
        proj_augmented.iter().sum::<f64>() / proj_augmented.len() as f64
    };
    sim + triplet + proj_anchor + augmented_mean
}
