//! Absolute pose recovery from a scene-coordinate grid.
//!
//! A frame's predictor output is a [`ScenePointMap`]: a regular pixel grid of
//! predicted 3D world points with a validity mask. [`estimate_pose`] runs a
//! P3P minimal solver inside a RANSAC loop (sampling 4 cells: 3 for the
//! solver, 1 to disambiguate its up-to-four solutions), scores hypotheses by
//! inlier counting with a strict pixel threshold, keeps the argmax, then
//! refines the winner with Levenberg-Marquardt on SE(3) and re-evaluates the
//! inlier set once at the refined pose.
//!
//! Everything is deterministic given the config seed.

use crate::geometry::{
    self, project, CameraIntrinsics, PixelPoint, Pose, ScenePoint, NEAR_PLANE_MM,
};
use nalgebra::{DMatrix, Matrix3, Rotation3, SMatrix, SVector, Vector2, Vector3, Vector6};
use rand::seq::index::sample as sample_indices;
use rand_chacha::ChaCha8Rng;
use std::time::{Duration, Instant};
use thiserror::Error;

/// Minimum number of inliers for an estimate to count as a success; below
/// this the frame is reported as a solver failure (the out-of-distribution
/// signal the confidence machinery consumes).
pub const MIN_INLIERS: usize = 6;

/// Degeneracy floor for P3P input: pairwise point distances and the triangle
/// area must exceed this (mm and mm^2).
const P3P_DEGENERACY_TOL: f64 = 1e-9;

/// Candidate poses must reproject all three minimal-sample points this
/// accurately; polished quartic roots land far below it, so the filter only
/// rejects numerically broken roots.
const P3P_REPROJ_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("grid dimensions and stride must be positive")]
    EmptyGrid,
    #[error(
        "scene map shape mismatch: {points} points / {valid} validity flags for a {rows}x{cols} grid"
    )]
    ShapeMismatch { rows: u32, cols: u32, points: usize, valid: usize },
    #[error("valid scene point at cell {index} is not finite")]
    NonFiniteScenePoint { index: usize },
    #[error("scene grid extends outside the {width}x{height} image")]
    GridOutsideImage { width: u32, height: u32 },
    #[error("need at least {need} valid correspondences, got {got}")]
    InsufficientCorrespondences { got: usize, need: usize },
    #[error("no consensus: best hypothesis had {best} inliers, need {need}")]
    NoConsensus { best: usize, need: usize },
    #[error("invalid RANSAC config: {reason}")]
    InvalidConfig { reason: String },
}

/// A regular pixel-grid of predicted scene coordinates with a validity mask.
///
/// Cell `(r, c)` sits at pixel `origin + (c * stride, r * stride)`; cells are
/// stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePointMap {
    grid_rows: u32,
    grid_cols: u32,
    stride: u32,
    origin: PixelPoint,
    points: Vec<ScenePoint>,
    valid: Vec<bool>,
}

impl ScenePointMap {
    pub fn new(
        grid_rows: u32,
        grid_cols: u32,
        stride: u32,
        origin: PixelPoint,
        points: Vec<ScenePoint>,
        valid: Vec<bool>,
    ) -> Result<Self, SolverError> {
        if grid_rows == 0 || grid_cols == 0 || stride == 0 {
            return Err(SolverError::EmptyGrid);
        }
        let cells = grid_rows as usize * grid_cols as usize;
        if points.len() != cells || valid.len() != cells {
            return Err(SolverError::ShapeMismatch {
                rows: grid_rows,
                cols: grid_cols,
                points: points.len(),
                valid: valid.len(),
            });
        }
        for (index, (p, &ok)) in points.iter().zip(&valid).enumerate() {
            if ok && !p.is_finite() {
                return Err(SolverError::NonFiniteScenePoint { index });
            }
        }
        Ok(Self { grid_rows, grid_cols, stride, origin, points, valid })
    }

    pub fn grid_rows(&self) -> u32 {
        self.grid_rows
    }

    pub fn grid_cols(&self) -> u32 {
        self.grid_cols
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn origin(&self) -> PixelPoint {
        self.origin
    }

    pub fn cell_count(&self) -> usize {
        self.points.len()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn points(&self) -> &[ScenePoint] {
        &self.points
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    /// Pixel position of a cell by flat row-major index.
    pub fn pixel_of(&self, cell: usize) -> PixelPoint {
        let r = cell / self.grid_cols as usize;
        let c = cell % self.grid_cols as usize;
        PixelPoint::new(
            self.origin.u + (c as u32 * self.stride) as f64,
            self.origin.v + (r as u32 * self.stride) as f64,
        )
    }

    /// Whether every grid pixel lies inside the given image bounds.
    pub fn fits_within(&self, intrinsics: &CameraIntrinsics) -> bool {
        let max_u = self.origin.u + ((self.grid_cols - 1) * self.stride) as f64;
        let max_v = self.origin.v + ((self.grid_rows - 1) * self.stride) as f64;
        self.origin.u >= 0.0
            && self.origin.v >= 0.0
            && max_u < intrinsics.width as f64
            && max_v < intrinsics.height as f64
    }

    /// Rebuilds the map with replaced points/validity (shape is kept).
    pub fn with_points(
        &self,
        points: Vec<ScenePoint>,
        valid: Vec<bool>,
    ) -> Result<Self, SolverError> {
        Self::new(self.grid_rows, self.grid_cols, self.stride, self.origin, points, valid)
    }
}

/// RANSAC parameters. The minimal sample size is fixed at
/// [`RansacConfig::MIN_SAMPLE`]: three correspondences feed P3P and the
/// fourth picks among its candidate solutions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    /// Strict inlier threshold in pixels (a residual equal to it is not an
    /// inlier).
    pub inlier_threshold: f64,
    pub max_iterations: u32,
    /// Early-exit confidence for the standard RANSAC stopping bound.
    pub confidence_stop: f64,
    pub seed: u64,
}

impl RansacConfig {
    pub const MIN_SAMPLE: usize = 4;

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.inlier_threshold > 0.0 && self.inlier_threshold.is_finite()) {
            return Err(SolverError::InvalidConfig {
                reason: format!("inlier threshold must be positive, got {}", self.inlier_threshold),
            });
        }
        if self.max_iterations == 0 {
            return Err(SolverError::InvalidConfig {
                reason: "max iterations must be at least 1".into(),
            });
        }
        if !(self.confidence_stop > 0.0 && self.confidence_stop < 1.0) {
            return Err(SolverError::InvalidConfig {
                reason: format!("confidence must be in (0,1), got {}", self.confidence_stop),
            });
        }
        Ok(())
    }
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { inlier_threshold: 10.0, max_iterations: 1024, confidence_stop: 0.999, seed: 0 }
    }
}

/// The solver's per-frame output.
///
/// `pose` is the final (refined) estimate and `ransac_pose` the raw consensus
/// argmax it started from, kept for auditability. The inlier statistics are
/// re-evaluated once at the final pose; `inlier_mask` is aligned with the
/// full row-major grid and is always false at invalid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    pub ransac_pose: Pose,
    pub inlier_count: usize,
    pub inlier_mask: Vec<bool>,
    /// Mean reprojection error in pixels over the inliers.
    pub mean_reprojection_error: f64,
    pub iterations_used: u32,
}

/// Wall-clock split of one [`estimate_pose_timed`] call.
#[derive(Debug, Clone, Copy)]
pub struct SolverTimings {
    pub ransac: Duration,
    pub refine: Duration,
}

/// Reprojection residual in pixels; +infinity when the point is at or behind
/// the camera's near plane.
pub fn residual(
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    pixel: &PixelPoint,
    point: &ScenePoint,
) -> f64 {
    match project(intrinsics, pose, point) {
        Some((projected, _)) => projected.distance(pixel),
        None => f64::INFINITY,
    }
}

/// Inlier count of a pose over a map: the number of valid cells whose
/// residual is strictly below the threshold.
pub fn score(
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    map: &ScenePointMap,
    inlier_threshold: f64,
) -> usize {
    let mut count = 0;
    for cell in 0..map.cell_count() {
        if !map.validity()[cell] {
            continue;
        }
        let r = residual(intrinsics, pose, &map.pixel_of(cell), &map.points()[cell]);
        if r < inlier_threshold {
            count += 1;
        }
    }
    count
}

/// Full-grid inlier mask plus count and mean inlier residual at a pose.
fn evaluate_inliers(
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    map: &ScenePointMap,
    inlier_threshold: f64,
) -> (Vec<bool>, usize, f64) {
    let mut mask = vec![false; map.cell_count()];
    let mut count = 0;
    let mut residual_sum = 0.0;
    for (cell, flag) in mask.iter_mut().enumerate() {
        if !map.validity()[cell] {
            continue;
        }
        let r = residual(intrinsics, pose, &map.pixel_of(cell), &map.points()[cell]);
        if r < inlier_threshold {
            *flag = true;
            count += 1;
            residual_sum += r;
        }
    }
    let mean = if count > 0 { residual_sum / count as f64 } else { 0.0 };
    (mask, count, mean)
}

/// Solves the perspective-three-point problem: camera poses that exactly
/// reproject three pixel/scene correspondences.
///
/// Uses Grunert's distance formulation: with `u = s2/s1`, `v = s3/s1` the
/// three law-of-cosines constraints reduce to a quartic in `v`, solved by
/// companion-matrix eigenvalues plus Newton polishing. Returns up to four
/// camera-to-world poses; an empty result signals degenerate (collinear or
/// coincident) input or no admissible root.
pub fn solve_p3p(
    correspondences: &[(PixelPoint, ScenePoint); 3],
    intrinsics: &CameraIntrinsics,
) -> Vec<Pose> {
    let p1 = correspondences[0].1.coords();
    let p2 = correspondences[1].1.coords();
    let p3 = correspondences[2].1.coords();

    // Degeneracy: coincident points or a collapsed triangle.
    let c = (p2 - p1).norm();
    let b = (p3 - p1).norm();
    let a = (p3 - p2).norm();
    if a <= P3P_DEGENERACY_TOL || b <= P3P_DEGENERACY_TOL || c <= P3P_DEGENERACY_TOL {
        return Vec::new();
    }
    let area = 0.5 * (p2 - p1).cross(&(p3 - p1)).norm();
    if area <= P3P_DEGENERACY_TOL {
        return Vec::new();
    }

    let bearing = |px: &PixelPoint| -> Vector3<f64> {
        Vector3::new(
            (px.u - intrinsics.cx) / intrinsics.fx,
            (px.v - intrinsics.cy) / intrinsics.fy,
            1.0,
        )
        .normalize()
    };
    let f1 = bearing(&correspondences[0].0);
    let f2 = bearing(&correspondences[1].0);
    let f3 = bearing(&correspondences[2].0);

    let cos_alpha = f2.dot(&f3); // angle opposite side a = |P2 P3|
    let cos_beta = f1.dot(&f3); // angle opposite side b = |P1 P3|
    let cos_gamma = f1.dot(&f2); // angle opposite side c = |P1 P2|

    // Grunert's reduction. With q(v) = 1 + v^2 - 2 v cos(beta):
    //   u(v) = N(v) / D(v),
    //   N = ((a^2 - c^2)/b^2) q(v) + 1 - v^2,  D = 2 (cos(gamma) - v cos(alpha)),
    // and substituting u into the remaining constraint gives the quartic
    //   N^2 - 2 N D cos(gamma) + D^2 (1 - (c^2/b^2) q(v)) = 0.
    // The coefficients are assembled by polynomial convolution rather than a
    // transcribed closed form.
    let b2 = b * b;
    let k1 = (a * a - c * c) / b2;
    let k2 = (c * c) / b2;
    let q = [1.0, -2.0 * cos_beta, 1.0];
    let n_poly = [k1 * q[0] + 1.0, k1 * q[1], k1 * q[2] - 1.0];
    let d_poly = [2.0 * cos_gamma, -2.0 * cos_alpha];
    let e_poly = [1.0 - k2 * q[0], -k2 * q[1], -k2 * q[2]];

    let nn = poly_mul(&n_poly, &n_poly);
    let nd = poly_mul(&n_poly, &d_poly);
    let dd = poly_mul(&d_poly, &d_poly);
    let dde = poly_mul(&dd, &e_poly);

    let mut quartic = [0.0f64; 5];
    for (i, v) in nn.iter().enumerate() {
        quartic[i] += v;
    }
    for (i, v) in nd.iter().enumerate() {
        quartic[i] -= 2.0 * cos_gamma * v;
    }
    for (i, v) in dde.iter().enumerate() {
        quartic[i] += v;
    }

    let mut poses = Vec::new();
    for v in real_positive_roots(&quartic) {
        let denom_d = 2.0 * (cos_gamma - v * cos_alpha);
        if denom_d.abs() < 1e-12 {
            continue;
        }
        let numer = k1 * (1.0 + v * v - 2.0 * v * cos_beta) + 1.0 - v * v;
        let u = numer / denom_d;
        if !(u > 0.0 && u.is_finite()) {
            continue;
        }
        let s1_denom = 1.0 + v * v - 2.0 * v * cos_beta;
        if !(s1_denom > 0.0) {
            continue;
        }
        let s1 = b / s1_denom.sqrt();
        let (s2, s3) = (u * s1, v * s1);
        if !(s1.is_finite() && s2 > 0.0 && s3 > 0.0) {
            continue;
        }

        let x1 = f1 * s1;
        let x2 = f2 * s2;
        let x3 = f3 * s3;
        let Some(world_to_cam) = rigid_from_triads(&[p1, p2, p3], &[x1, x2, x3]) else {
            continue;
        };
        // Near-multiple quartic roots carry sqrt(eps)-level error; a few
        // Gauss-Newton steps on the exactly-determined 3-point system pull
        // each candidate onto the interpolating pose at machine precision.
        let pose = polish_on_sample(intrinsics, &world_to_cam.inverse(), correspondences);

        // Keep only candidates that actually interpolate the three inputs;
        // this drops numerically broken roots from near-degenerate samples.
        let max_residual = correspondences
            .iter()
            .map(|(px, pt)| residual(intrinsics, &pose, px, pt))
            .fold(0.0f64, f64::max);
        if max_residual < P3P_REPROJ_TOL {
            poses.push(pose);
        }
    }
    poses
}

/// A few undamped Gauss-Newton iterations of a candidate pose on the minimal
/// sample itself (six residuals, six parameters). Returns the input pose
/// unchanged whenever a step cannot be taken or does not help.
fn polish_on_sample(
    intrinsics: &CameraIntrinsics,
    candidate: &Pose,
    correspondences: &[(PixelPoint, ScenePoint); 3],
) -> Pose {
    let max_residual = |pose: &Pose| -> f64 {
        correspondences
            .iter()
            .map(|(px, pt)| residual(intrinsics, pose, px, pt))
            .fold(0.0f64, f64::max)
    };
    let mut pose = *candidate;
    let mut best = max_residual(&pose);
    for _ in 0..5 {
        if best == 0.0 {
            break;
        }
        let inv = pose.inverse();
        let mut jtj = SMatrix::<f64, 6, 6>::zeros();
        let mut jtr = SVector::<f64, 6>::zeros();
        for (px, pt) in correspondences {
            let Some((projected, jac)) =
                projection_with_jacobian(intrinsics, inv.rotation(), inv.translation(), pt)
            else {
                return pose;
            };
            let r = Vector2::new(px.u - projected.u, px.v - projected.v);
            jtj += jac.transpose() * jac;
            jtr += jac.transpose() * r;
        }
        let Some(chol) = jtj.cholesky() else {
            return pose;
        };
        let delta = chol.solve(&jtr);
        let stepped = apply_pose_increment(&pose, &delta);
        let stepped_residual = max_residual(&stepped);
        if stepped_residual < best {
            pose = stepped;
            best = stepped_residual;
        } else {
            return pose;
        }
    }
    pose
}

/// Coefficient-array product (ascending powers).
fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &ai) in a.iter().enumerate() {
        for (j, &bj) in b.iter().enumerate() {
            out[i + j] += ai * bj;
        }
    }
    out
}

/// Real positive roots of a polynomial with ascending coefficients, via
/// companion-matrix eigenvalues followed by Newton polishing on the real
/// line. Near-real eigenvalues are treated as candidates and the polish step
/// decides; duplicates after polishing are merged.
fn real_positive_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut degree = coeffs.len() - 1;
    while degree > 0 && coeffs[degree].abs() <= 1e-12 * scale {
        degree -= 1;
    }
    if degree == 0 {
        return Vec::new();
    }

    let lead = coeffs[degree];
    let mut companion = DMatrix::<f64>::zeros(degree, degree);
    for i in 1..degree {
        companion[(i, i - 1)] = 1.0;
    }
    for i in 0..degree {
        companion[(i, degree - 1)] = -coeffs[i] / lead;
    }
    let eigen = companion.complex_eigenvalues();

    let eval = |x: f64| -> (f64, f64) {
        // Horner evaluation of p and p' at x over the trimmed coefficients.
        let mut p = 0.0;
        let mut dp = 0.0;
        for i in (0..=degree).rev() {
            dp = dp * x + p;
            p = p * x + coeffs[i];
        }
        (p, dp)
    };

    let mut roots: Vec<f64> = Vec::new();
    for ev in eigen.iter() {
        if ev.im.abs() > 1e-6 * (1.0 + ev.re.abs()) {
            continue;
        }
        let mut x = ev.re;
        for _ in 0..8 {
            let (p, dp) = eval(x);
            if dp.abs() < 1e-300 {
                break;
            }
            let step = p / dp;
            x -= step;
            if step.abs() <= 1e-14 * (1.0 + x.abs()) {
                break;
            }
        }
        if !(x.is_finite() && x > 0.0) {
            continue;
        }
        if roots.iter().all(|&r| (r - x).abs() > 1e-9 * (1.0 + x.abs())) {
            roots.push(x);
        }
    }
    roots
}

/// Rigid world-to-camera transform mapping three world points onto three
/// camera-frame points, built from matched orthonormal triads.
fn rigid_from_triads(world: &[Vector3<f64>; 3], cam: &[Vector3<f64>; 3]) -> Option<Pose> {
    let frame = |p: &[Vector3<f64>; 3]| -> Option<Matrix3<f64>> {
        let e1 = p[1] - p[0];
        let n1 = e1.norm();
        if n1 < 1e-12 {
            return None;
        }
        let e1 = e1 / n1;
        let w = p[2] - p[0];
        let e2 = w - e1 * w.dot(&e1);
        let n2 = e2.norm();
        if n2 < 1e-12 {
            return None;
        }
        let e2 = e2 / n2;
        let e3 = e1.cross(&e2);
        Some(Matrix3::from_columns(&[e1, e2, e3]))
    };
    let mw = frame(world)?;
    let mc = frame(cam)?;
    let r = mc * mw.transpose();
    if geometry::rotation_deviation(&r) > 1e-9 {
        return None;
    }
    let centroid_w = (world[0] + world[1] + world[2]) / 3.0;
    let centroid_c = (cam[0] + cam[1] + cam[2]) / 3.0;
    let t = centroid_c - r * centroid_w;
    Some(Pose::from_rotation(Rotation3::from_matrix_unchecked(r), t))
}

/// Recovers the camera pose of a scene-coordinate map.
///
/// RANSAC with P3P hypotheses and strict inlier counting, argmax consensus,
/// LM refinement over the winning inlier set, and one final inlier
/// re-evaluation at the refined pose. Fails when fewer than [`MIN_INLIERS`]
/// valid cells exist or the best hypothesis has fewer than [`MIN_INLIERS`]
/// inliers.
pub fn estimate_pose(
    intrinsics: &CameraIntrinsics,
    map: &ScenePointMap,
    config: &RansacConfig,
) -> Result<PoseEstimate, SolverError> {
    estimate_pose_observed(intrinsics, map, config, true, &mut |_| {}).map(|(e, _)| e)
}

/// [`estimate_pose`] without the refinement stage: the returned pose is the
/// raw RANSAC argmax. Used while a retrain runs concurrently and only coarse
/// estimates are wanted.
pub fn estimate_pose_raw(
    intrinsics: &CameraIntrinsics,
    map: &ScenePointMap,
    config: &RansacConfig,
) -> Result<PoseEstimate, SolverError> {
    estimate_pose_observed(intrinsics, map, config, false, &mut |_| {}).map(|(e, _)| e)
}

/// [`estimate_pose`] plus a wall-clock split between the RANSAC and
/// refinement stages, for benchmarking.
pub fn estimate_pose_timed(
    intrinsics: &CameraIntrinsics,
    map: &ScenePointMap,
    config: &RansacConfig,
) -> Result<(PoseEstimate, SolverTimings), SolverError> {
    estimate_pose_observed(intrinsics, map, config, true, &mut |_| {})
}

/// Correspondences of the valid cells, flattened into parallel coordinate
/// arrays so the RANSAC hot loop can score hypotheses with a tight,
/// branch-free sequential scan the compiler can vectorize, instead of
/// per-cell map indexing and option plumbing.
struct ScoreBuffer {
    xs: Vec<f64>,
    ys: Vec<f64>,
    zs: Vec<f64>,
    us: Vec<f64>,
    vs: Vec<f64>,
}

impl ScoreBuffer {
    fn from_map(map: &ScenePointMap, valid_cells: &[usize]) -> Self {
        let mut buffer = Self {
            xs: Vec::with_capacity(valid_cells.len()),
            ys: Vec::with_capacity(valid_cells.len()),
            zs: Vec::with_capacity(valid_cells.len()),
            us: Vec::with_capacity(valid_cells.len()),
            vs: Vec::with_capacity(valid_cells.len()),
        };
        for &i in valid_cells {
            let point = map.points()[i];
            let pixel = map.pixel_of(i);
            buffer.xs.push(point.x);
            buffer.ys.push(point.y);
            buffer.zs.push(point.z);
            buffer.us.push(pixel.u);
            buffer.vs.push(pixel.v);
        }
        buffer
    }

    /// Inlier count of `pose` over the buffer, or `None` as soon as the
    /// running count can no longer strictly exceed `beat` (the hypothesis
    /// loses the argmax either way, so the scan is abandoned). `Some(s)`
    /// therefore always means `s > beat`.
    ///
    /// Matches [`score`]'s inlier predicate via squared distances (`r < t`
    /// iff `r^2 < t^2` for non-negative reals); the counts reported on the
    /// returned estimate always come from the [`evaluate_inliers`] reference
    /// path at the end of the solve.
    ///
    /// The inner scan is branch-free: every lane computes the projection
    /// unconditionally and the near-plane test joins the threshold test as a
    /// boolean factor. Lanes at or behind the near plane may divide by a
    /// tiny, zero, or negative `z`, producing huge values, infinities, or
    /// NaNs — all of which fail the strict `<` comparison, and the near-plane
    /// factor discards them regardless, so the counts are identical to the
    /// guarded form.
    fn consensus(
        &self,
        intrinsics: &CameraIntrinsics,
        pose: &Pose,
        threshold: f64,
        beat: usize,
    ) -> Option<usize> {
        const BLOCK: usize = 512;
        // Camera-frame coordinates are R^T (p - t): the pose maps camera to
        // world, so projection applies its inverse.
        let m = pose.rotation().matrix();
        let t = pose.translation();
        let (fx, fy, cx, cy) = (intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy);
        let threshold_sq = threshold * threshold;
        let n = self.xs.len();
        let mut count = 0usize;
        let mut start = 0usize;
        while start < n {
            let end = (start + BLOCK).min(n);
            let xs = &self.xs[start..end];
            let ys = &self.ys[start..end];
            let zs = &self.zs[start..end];
            let us = &self.us[start..end];
            let vs = &self.vs[start..end];
            for j in 0..xs.len() {
                let dx = xs[j] - t.x;
                let dy = ys[j] - t.y;
                let dz = zs[j] - t.z;
                let z = m.m13 * dx + m.m23 * dy + m.m33 * dz;
                let inv = 1.0 / z;
                let u = fx * (m.m11 * dx + m.m21 * dy + m.m31 * dz) * inv + cx;
                let v = fy * (m.m12 * dx + m.m22 * dy + m.m32 * dz) * inv + cy;
                let du = u - us[j];
                let dv = v - vs[j];
                let hit = (z > NEAR_PLANE_MM) & (du * du + dv * dv < threshold_sq);
                count += usize::from(hit);
            }
            start = end;
            if count + (n - start) <= beat {
                return None;
            }
        }
        Some(count)
    }
}

/// Shared solver core. `observe_score` is a test hook that sees the inlier
/// count of every hypothesis that completed scoring (hypotheses abandoned
/// early because they could not beat the running best are skipped), in
/// evaluation order.
pub(crate) fn estimate_pose_observed(
    intrinsics: &CameraIntrinsics,
    map: &ScenePointMap,
    config: &RansacConfig,
    refine: bool,
    observe_score: &mut dyn FnMut(usize),
) -> Result<(PoseEstimate, SolverTimings), SolverError> {
    config.validate()?;
    if !map.fits_within(intrinsics) {
        return Err(SolverError::GridOutsideImage {
            width: intrinsics.width,
            height: intrinsics.height,
        });
    }
    let valid_cells: Vec<usize> =
        (0..map.cell_count()).filter(|&i| map.validity()[i]).collect();
    if valid_cells.len() < MIN_INLIERS {
        return Err(SolverError::InsufficientCorrespondences {
            got: valid_cells.len(),
            need: MIN_INLIERS,
        });
    }

    let ransac_start = Instant::now();
    let mut rng: ChaCha8Rng = crate::rng::root_rng(config.seed);
    let n = valid_cells.len();
    let buffer = ScoreBuffer::from_map(map, &valid_cells);
    let mut best: Option<(usize, Pose)> = None;
    let mut iterations_used = 0;

    for _ in 0..config.max_iterations {
        iterations_used += 1;
        let picks = sample_indices(&mut rng, n, RansacConfig::MIN_SAMPLE);
        let cell = |i: usize| valid_cells[picks.index(i)];
        let corr = [
            (map.pixel_of(cell(0)), map.points()[cell(0)]),
            (map.pixel_of(cell(1)), map.points()[cell(1)]),
            (map.pixel_of(cell(2)), map.points()[cell(2)]),
        ];
        let candidates = solve_p3p(&corr, intrinsics);
        if candidates.is_empty() {
            continue;
        }

        // Disambiguate the P3P solutions with the fourth sampled cell.
        let check_px = map.pixel_of(cell(3));
        let check_pt = map.points()[cell(3)];
        let mut hypothesis = candidates[0];
        let mut best_check = residual(intrinsics, &hypothesis, &check_px, &check_pt);
        for cand in &candidates[1..] {
            let r = residual(intrinsics, cand, &check_px, &check_pt);
            if r < best_check {
                best_check = r;
                hypothesis = *cand;
            }
        }

        let beat = best.as_ref().map_or(0, |(bs, _)| *bs);
        if let Some(s) = buffer.consensus(intrinsics, &hypothesis, config.inlier_threshold, beat)
        {
            observe_score(s);
            best = Some((s, hypothesis));
        }

        // Standard adaptive stopping bound: stop once the chance of having
        // missed an all-inlier sample drops below 1 - confidence.
        let best_score = best.as_ref().map_or(0, |(bs, _)| *bs);
        let w = best_score as f64 / n as f64;
        let miss = (1.0 - w.powi(RansacConfig::MIN_SAMPLE as i32)).powi(iterations_used as i32);
        if miss <= 1.0 - config.confidence_stop {
            break;
        }
    }

    let (best_score, ransac_pose) = best.ok_or(SolverError::NoConsensus {
        best: 0,
        need: MIN_INLIERS,
    })?;
    if best_score < MIN_INLIERS {
        return Err(SolverError::NoConsensus { best: best_score, need: MIN_INLIERS });
    }
    let ransac_elapsed = ransac_start.elapsed();

    let refine_start = Instant::now();
    let final_pose = if refine {
        let (mask, _, _) = evaluate_inliers(intrinsics, &ransac_pose, map, config.inlier_threshold);
        let inliers: Vec<(PixelPoint, ScenePoint)> = (0..map.cell_count())
            .filter(|&i| mask[i])
            .map(|i| (map.pixel_of(i), map.points()[i]))
            .collect();
        let (refined, _) = refine_pose(intrinsics, &ransac_pose, &inliers)?;
        refined
    } else {
        ransac_pose
    };
    let (mask, count, mean_err) =
        evaluate_inliers(intrinsics, &final_pose, map, config.inlier_threshold);
    let refine_elapsed = refine_start.elapsed();

    Ok((
        PoseEstimate {
            pose: final_pose,
            ransac_pose,
            inlier_count: count,
            inlier_mask: mask,
            mean_reprojection_error: mean_err,
            iterations_used,
        },
        SolverTimings { ransac: ransac_elapsed, refine: refine_elapsed },
    ))
}

/// The local parameterization used by refinement and the reprojection-loss
/// gradient: a 6-vector `[w; t]` applied to the world-to-camera factor of a
/// camera-to-world pose as `R <- R * exp([w]x)`, `t <- t + dt`.
pub fn apply_pose_increment(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let inv = pose.inverse();
    let rot = *inv.rotation() * Rotation3::new(Vector3::new(delta[0], delta[1], delta[2]));
    let t = inv.translation() + Vector3::new(delta[3], delta[4], delta[5]);
    Pose::from_rotation(rot, t).inverse()
}

/// Projected pixel of a world point under a world-to-camera transform, plus
/// the 2x6 Jacobian of that pixel with respect to the increment of
/// [`apply_pose_increment`]. `None` when the point is at or behind the near
/// plane.
pub(crate) fn projection_with_jacobian(
    intrinsics: &CameraIntrinsics,
    r_wc: &Rotation3<f64>,
    t_wc: &Vector3<f64>,
    point: &ScenePoint,
) -> Option<(PixelPoint, SMatrix<f64, 2, 6>)> {
    let y = point.coords();
    let pc = r_wc * y + t_wc;
    if !(pc.z > NEAR_PLANE_MM) {
        return None;
    }
    let (fx, fy) = (intrinsics.fx, intrinsics.fy);
    let inv_z = 1.0 / pc.z;
    let pixel = PixelPoint::new(fx * pc.x * inv_z + intrinsics.cx, fy * pc.y * inv_z + intrinsics.cy);

    // d(pi)/d(cam point)
    let dpi = SMatrix::<f64, 2, 3>::new(
        fx * inv_z,
        0.0,
        -fx * pc.x * inv_z * inv_z,
        0.0,
        fy * inv_z,
        -fy * pc.y * inv_z * inv_z,
    );
    // d(cam point)/d(increment): rotation block -R [y]x, translation block I.
    let skew = Matrix3::new(0.0, -y.z, y.y, y.z, 0.0, -y.x, -y.y, y.x, 0.0);
    let dcam_rot = -(r_wc.matrix() * skew);
    let mut jac = SMatrix::<f64, 2, 6>::zeros();
    jac.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dpi * dcam_rot));
    jac.fixed_view_mut::<2, 3>(0, 3).copy_from(&dpi);
    Some((pixel, jac))
}

/// Levenberg-Marquardt refinement of a pose over pixel/scene correspondences,
/// minimizing the sum of squared reprojection residuals.
///
/// Accepted steps never increase the cost; iteration stops after 100 rounds
/// or when an accepted step changes the cost by less than a 1e-10 relative
/// factor. If the normal equations are rank-deficient at the initial state
/// (or any initial residual is invalid), the initial pose is returned
/// unchanged. The second return value is the mean Euclidean residual in
/// pixels at the returned pose.
pub fn refine_pose(
    intrinsics: &CameraIntrinsics,
    initial: &Pose,
    correspondences: &[(PixelPoint, ScenePoint)],
) -> Result<(Pose, f64), SolverError> {
    const MAX_ITERS: usize = 100;
    const REL_TOL: f64 = 1e-10;
    const COST_FLOOR: f64 = 1e-24;

    let n = correspondences.len();
    if n < MIN_INLIERS {
        return Err(SolverError::InsufficientCorrespondences { got: n, need: MIN_INLIERS });
    }

    let mean_residual = |pose: &Pose| -> f64 {
        correspondences
            .iter()
            .map(|(px, pt)| residual(intrinsics, pose, px, pt))
            .sum::<f64>()
            / n as f64
    };

    let cost_at = |r_wc: &Rotation3<f64>, t_wc: &Vector3<f64>| -> Option<f64> {
        let mut cost = 0.0;
        for (px, pt) in correspondences {
            let pc = r_wc * pt.coords() + t_wc;
            if !(pc.z > NEAR_PLANE_MM) {
                return None;
            }
            let u = intrinsics.fx * pc.x / pc.z + intrinsics.cx;
            let v = intrinsics.fy * pc.y / pc.z + intrinsics.cy;
            cost += (px.u - u).powi(2) + (px.v - v).powi(2);
        }
        Some(cost)
    };

    let inv = initial.inverse();
    let mut r_wc = *inv.rotation();
    let mut t_wc = *inv.translation();
    let Some(mut cost) = cost_at(&r_wc, &t_wc) else {
        // Some residual is behind the camera: outside the basin, nothing to do.
        return Ok((*initial, mean_residual(initial)));
    };

    let mut lambda = 1e-3;
    let mut normal: Option<(SMatrix<f64, 6, 6>, SVector<f64, 6>)> = None;
    for iteration in 0..MAX_ITERS {
        if cost <= COST_FLOOR {
            break;
        }
        let (jtj, jtr) = match normal {
            Some(cached) => cached,
            None => {
                let mut jtj = SMatrix::<f64, 6, 6>::zeros();
                let mut jtr = SVector::<f64, 6>::zeros();
                for (px, pt) in correspondences {
                    let Some((projected, jac)) =
                        projection_with_jacobian(intrinsics, &r_wc, &t_wc, pt)
                    else {
                        return Ok((*initial, mean_residual(initial)));
                    };
                    let r = Vector2::new(px.u - projected.u, px.v - projected.v);
                    jtj += jac.transpose() * jac;
                    jtr += jac.transpose() * r;
                }
                if iteration == 0 && jtj.cholesky().is_none() {
                    // Rank-deficient first Jacobian: leave the pose untouched.
                    return Ok((*initial, mean_residual(initial)));
                }
                normal = Some((jtj, jtr));
                (jtj, jtr)
            }
        };

        let mut damped = jtj;
        for i in 0..6 {
            damped[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
        }
        let Some(chol) = damped.cholesky() else {
            lambda = (lambda * 10.0).min(1e12);
            continue;
        };
        let delta = chol.solve(&jtr);

        let r_new = r_wc * Rotation3::new(Vector3::new(delta[0], delta[1], delta[2]));
        let t_new = t_wc + Vector3::new(delta[3], delta[4], delta[5]);
        match cost_at(&r_new, &t_new) {
            Some(cost_new) if cost_new < cost => {
                let drop = cost - cost_new;
                r_wc = r_new;
                t_wc = t_new;
                cost = cost_new;
                lambda = (lambda / 10.0).max(1e-12);
                normal = None;
                if drop < REL_TOL * cost.max(f64::MIN_POSITIVE) {
                    break;
                }
            }
            _ => {
                lambda = (lambda * 10.0).min(1e12);
            }
        }
    }

    let refined = Pose::from_rotation(r_wc, t_wc).inverse();
    let mean = mean_residual(&refined);
    Ok((refined, mean))
}
