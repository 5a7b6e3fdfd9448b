//! Pinhole camera and rigid-body math shared by every other module.
//!
//! Conventions, fixed once and used everywhere:
//!
//! - World and camera coordinates are millimeters; pixels are real-valued
//!   with the origin at the center of the top-left pixel.
//! - The camera looks along +z, x points right, y points down (image rows).
//! - [`Pose`] is camera-to-world: it maps camera-frame points into the world,
//!   so its inverse takes world points into the camera for projection.
//! - Euler rotations are intrinsic Z-Y-X: `R = Rz(roll) * Ry(yaw) * Rx(pitch)`
//!   with pitch about x, yaw about y, roll about z.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use thiserror::Error;

/// Points closer than this to the camera plane are treated as behind it.
///
/// Far below anatomical scales; it only guards the perspective division.
pub const NEAR_PLANE_MM: f64 = 1e-6;

/// Tolerance for the rotation orthonormality / determinant invariant.
pub const ROTATION_TOL: f64 = 1e-9;

/// Errors from constructing or using camera/pose primitives.
#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("focal lengths must be positive and finite (got fx={fx}, fy={fy})")]
    InvalidFocal { fx: f64, fy: f64 },
    #[error("principal point ({cx}, {cy}) must lie inside a {width}x{height} image")]
    PrincipalPointOutOfBounds { cx: f64, cy: f64, width: u32, height: u32 },
    #[error("image dimensions must be positive (got {width}x{height})")]
    EmptyImage { width: u32, height: u32 },
    #[error("rotation is not orthonormal with determinant +1 (max deviation {deviation:.3e})")]
    InvalidRotation { deviation: f64 },
    #[error("depth must be positive and finite (got {depth} mm)")]
    NonPositiveDepth { depth: f64 },
}

/// Pinhole camera parameters plus the image size they are valid for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyImage { width, height });
        }
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(GeometryError::InvalidFocal { fx, fy });
        }
        let in_x = (0.0..width as f64).contains(&cx);
        let in_y = (0.0..height as f64).contains(&cy);
        if !(in_x && in_y) {
            return Err(GeometryError::PrincipalPointOutOfBounds { cx, cy, width, height });
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// The 3x3 calibration matrix `[[fx,0,cx],[0,fy,cy],[0,0,1]]`.
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Length of the image diagonal in pixels.
    pub fn diagonal(&self) -> f64 {
        ((self.width as f64).powi(2) + (self.height as f64).powi(2)).sqrt()
    }
}

/// A real-valued pixel position (u = column, v = row).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub u: f64,
    pub v: f64,
}

impl PixelPoint {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &PixelPoint) -> f64 {
        ((self.u - other.u).powi(2) + (self.v - other.v).powi(2)).sqrt()
    }
}

/// A 3D world-frame point in millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl ScenePoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn coords(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_coords(v: Vector3<f64>) -> Self {
        Self { x: v.x, y: v.y, z: v.z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// A rigid camera-to-world transform (rotation + translation in mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Rotation3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation: Rotation3::identity(), translation: Vector3::zeros() }
    }

    /// Builds a pose from a raw rotation matrix, validating orthonormality
    /// and a +1 determinant to within [`ROTATION_TOL`].
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let deviation = rotation_deviation(&rotation);
        if deviation > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation { deviation });
        }
        Ok(Self { rotation: Rotation3::from_matrix_unchecked(rotation), translation })
    }

    /// Builds a pose from an already-validated nalgebra rotation.
    pub fn from_rotation(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Intrinsic Z-Y-X Euler pose: `R = Rz(roll) * Ry(yaw) * Rx(pitch)`.
    pub fn from_euler_zyx(pitch: f64, yaw: f64, roll: f64, translation: Vector3<f64>) -> Self {
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), roll)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), yaw)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch);
        Self { rotation: r, translation }
    }

    /// Axis-angle pose; the axis need not be normalized (its norm is the angle
    /// when `angle` is folded in by the caller via `axis * angle`).
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let r = Rotation3::new(axis.normalize() * angle);
        Self { rotation: r, translation }
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: q.to_rotation_matrix(), translation }
    }

    pub fn rotation(&self) -> &Rotation3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn is_identity(&self) -> bool {
        self.rotation.matrix() == &Matrix3::identity() && self.translation == Vector3::zeros()
    }

    /// Composition: `self * other` applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let r_inv = self.rotation.inverse();
        Pose { rotation: r_inv, translation: -(r_inv * self.translation) }
    }

    /// Maps a camera-frame point into the world frame.
    pub fn transform(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Maps a world point into the camera frame (applies the inverse).
    pub fn inverse_transform(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p - self.translation)
    }

    /// Angle in radians between this pose's rotation and another's.
    ///
    /// Computed as `atan2(|vee((R - R^T)/2)|, (trace(R) - 1)/2)` on the
    /// relative rotation, which stays accurate near zero where the plain
    /// clamped-acos trace formula bottoms out around 2e-8.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let rel = self.rotation.inverse() * other.rotation;
        let m = rel.matrix();
        let sin_vec = Vector3::new(
            (m[(2, 1)] - m[(1, 2)]) / 2.0,
            (m[(0, 2)] - m[(2, 0)]) / 2.0,
            (m[(1, 0)] - m[(0, 1)]) / 2.0,
        );
        let cos_term = (m.trace() - 1.0) / 2.0;
        sin_vec.norm().atan2(cos_term)
    }

    /// Euclidean distance between the two camera centers in millimeters.
    pub fn translation_distance_to(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }
}

/// Largest per-entry deviation of `R^T R` from identity, combined with the
/// deviation of `det(R)` from +1.
pub(crate) fn rotation_deviation(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r;
    let mut dev: f64 = (r.determinant() - 1.0).abs();
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((gram[(i, j)] - target).abs());
        }
    }
    dev
}

/// Perspective projection of a world point through `pose` inverse then the
/// calibration matrix, with explicit dehomogenization.
///
/// Returns the pixel and the camera-frame depth, or `None` when the point is
/// at or behind the near plane ([`NEAR_PLANE_MM`]).
pub fn project(
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    point: &ScenePoint,
) -> Option<(PixelPoint, f64)> {
    let pc = pose.inverse_transform(point.coords());
    if !(pc.z > NEAR_PLANE_MM) {
        return None;
    }
    let u = intrinsics.fx * pc.x / pc.z + intrinsics.cx;
    let v = intrinsics.fy * pc.y / pc.z + intrinsics.cy;
    Some((PixelPoint::new(u, v), pc.z))
}

/// Inverse of [`project`]: lifts a pixel at a given camera-frame depth back
/// into the world frame.
pub fn unproject(
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    pixel: &PixelPoint,
    depth: f64,
) -> Result<ScenePoint, GeometryError> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(GeometryError::NonPositiveDepth { depth });
    }
    let pc = Vector3::new(
        (pixel.u - intrinsics.cx) / intrinsics.fx * depth,
        (pixel.v - intrinsics.cy) / intrinsics.fy * depth,
        depth,
    );
    Ok(ScenePoint::from_coords(pose.transform(pc)))
}

/// The camera-parameter perturbation homography applied to one pixel, also
/// returning the transformed camera-frame depth (the homogeneous scale before
/// dehomogenization). The extra depth is what depth-aware warping needs for
/// its z-buffer.
///
/// The mapping lifts the pixel to a 3D point at depth `z` with the perturbed
/// intrinsics, applies the perturbation transform, and reprojects with the
/// same perturbed intrinsics; only the perturbed calibration appears in the
/// chain. `perturbation` is expected to be rotation-only (a translation would
/// make the single-homography form invalid for non-planar scenes), and an
/// exactly-identity perturbation short-circuits to the input bit-for-bit
/// since the calibration factors cancel.
///
/// Returns `None` when the input depth is non-positive or the mapped point
/// has a non-positive third homogeneous component.
pub fn perturb_pixel_with_depth(
    perturbation: &Pose,
    perturbed_intrinsics: &CameraIntrinsics,
    pixel: &PixelPoint,
    depth: f64,
) -> Option<(PixelPoint, f64)> {
    if !(depth > 0.0 && depth.is_finite()) {
        return None;
    }
    if perturbation.is_identity() {
        return Some((*pixel, depth));
    }
    let kp = perturbed_intrinsics;
    let lifted = Vector3::new(
        (pixel.u - kp.cx) / kp.fx * depth,
        (pixel.v - kp.cy) / kp.fy * depth,
        depth,
    );
    let mapped = perturbation.transform(lifted);
    if !(mapped.z > 0.0) {
        return None;
    }
    let u = kp.fx * mapped.x / mapped.z + kp.cx;
    let v = kp.fy * mapped.y / mapped.z + kp.cy;
    Some((PixelPoint::new(u, v), mapped.z))
}

/// The perturbation homography for one pixel at a given depth.
///
/// `intrinsics` is the reference calibration the perturbed one was sampled
/// from; the mapping itself only involves `perturbed_intrinsics` (see
/// [`perturb_pixel_with_depth`]), so with an identity perturbation the output
/// equals the input exactly for any calibration pair.
pub fn perturb_pixel(
    intrinsics: &CameraIntrinsics,
    perturbation: &Pose,
    perturbed_intrinsics: &CameraIntrinsics,
    pixel: &PixelPoint,
    depth: f64,
) -> Option<PixelPoint> {
    let _ = intrinsics;
    perturb_pixel_with_depth(perturbation, perturbed_intrinsics, pixel, depth).map(|(p, _)| p)
}

/// Sampling ranges for [`sample_perturbation`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationConfig {
    /// Half-width of the uniform Euler-angle range in radians (each of pitch,
    /// yaw, roll is drawn from `[-angle_range, angle_range]`).
    pub angle_range: f64,
    /// Relative half-width of the uniform intrinsic scaling (each of fx, fy,
    /// cx, cy is scaled by a factor from `[1 - s, 1 + s]`).
    pub intrinsic_scale_range: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self { angle_range: 0.1, intrinsic_scale_range: 0.1 }
    }
}

/// Draws a random rotation-only perturbation and a scaled calibration.
///
/// Angles are drawn in the order pitch, yaw, roll; scale factors in the order
/// fx, fy, cx, cy. A zero-range config yields exactly the identity pose and
/// an unchanged calibration. Scaled principal points are clamped into the
/// image so the calibration invariants keep holding for extreme inputs.
///
/// Panics if the config ranges are negative.
pub fn sample_perturbation<R: Rng + ?Sized>(
    rng: &mut R,
    intrinsics: &CameraIntrinsics,
    config: &PerturbationConfig,
) -> (Pose, CameraIntrinsics) {
    assert!(
        config.angle_range >= 0.0 && config.intrinsic_scale_range >= 0.0,
        "perturbation ranges must be non-negative"
    );
    let a = config.angle_range;
    let pitch = rng.gen_range(-a..=a);
    let yaw = rng.gen_range(-a..=a);
    let roll = rng.gen_range(-a..=a);
    let pose = Pose::from_euler_zyx(pitch, yaw, roll, Vector3::zeros());

    let s = config.intrinsic_scale_range;
    let f_fx = rng.gen_range(1.0 - s..=1.0 + s);
    let f_fy = rng.gen_range(1.0 - s..=1.0 + s);
    let f_cx = rng.gen_range(1.0 - s..=1.0 + s);
    let f_cy = rng.gen_range(1.0 - s..=1.0 + s);
    let max_cx = intrinsics.width as f64 - 1e-9;
    let max_cy = intrinsics.height as f64 - 1e-9;
    let perturbed = CameraIntrinsics {
        fx: intrinsics.fx * f_fx,
        fy: intrinsics.fy * f_fy,
        cx: (intrinsics.cx * f_cx).min(max_cx),
        cy: (intrinsics.cy * f_cy).min(max_cy),
        width: intrinsics.width,
        height: intrinsics.height,
    };
    (pose, perturbed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::root_rng;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn test_camera() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    fn random_pose<R: Rng>(rng: &mut R) -> Pose {
        let axis = Vector3::new(
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
        );
        let axis = if axis.norm() < 1e-6 { Vector3::x() } else { axis };
        let angle = rng.gen_range(-std::f64::consts::PI..=std::f64::consts::PI);
        let t = Vector3::new(
            rng.gen_range(-100.0..=100.0),
            rng.gen_range(-100.0..=100.0),
            rng.gen_range(-100.0..=100.0),
        );
        Pose::from_axis_angle(axis, angle, t)
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 100.0, 50.0, 50.0, 100, 100).is_err());
        assert!(CameraIntrinsics::new(100.0, 100.0, 100.0, 50.0, 100, 100).is_err());
        assert!(CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 0, 100).is_err());
        assert!(CameraIntrinsics::new(100.0, 100.0, 0.0, 0.0, 100, 100).is_ok());
    }

    #[test]
    fn principal_ray_projection() {
        let k = test_camera();
        let (px, depth) =
            project(&k, &Pose::identity(), &ScenePoint::new(0.0, 0.0, 10.0)).unwrap();
        assert_eq!(px, PixelPoint::new(50.0, 50.0));
        assert_eq!(depth, 10.0);
    }

    #[test]
    fn off_axis_projection() {
        let k = test_camera();
        let (px, depth) =
            project(&k, &Pose::identity(), &ScenePoint::new(1.0, 0.0, 10.0)).unwrap();
        assert_eq!(px, PixelPoint::new(60.0, 50.0));
        assert_eq!(depth, 10.0);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let k = test_camera();
        assert!(project(&k, &Pose::identity(), &ScenePoint::new(0.0, 0.0, -5.0)).is_none());
        assert!(project(&k, &Pose::identity(), &ScenePoint::new(0.0, 0.0, 0.0)).is_none());
    }

    #[test]
    fn unproject_examples() {
        let k = test_camera();
        let p = unproject(&k, &Pose::identity(), &PixelPoint::new(50.0, 50.0), 10.0).unwrap();
        assert_eq!(p, ScenePoint::new(0.0, 0.0, 10.0));
        let p = unproject(&k, &Pose::identity(), &PixelPoint::new(60.0, 50.0), 10.0).unwrap();
        assert_eq!(p, ScenePoint::new(1.0, 0.0, 10.0));
        assert!(unproject(&k, &Pose::identity(), &PixelPoint::new(0.0, 0.0), 0.0).is_err());
        assert!(unproject(&k, &Pose::identity(), &PixelPoint::new(0.0, 0.0), -1.0).is_err());
    }

    #[test]
    fn projection_round_trip() {
        let k = test_camera();
        let mut rng = root_rng(11);
        for _ in 0..1000 {
            let pose = random_pose(&mut rng);
            let pixel = PixelPoint::new(rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0));
            let depth = rng.gen_range(0.1..100.0);
            let world = unproject(&k, &pose, &pixel, depth).unwrap();
            let (reproj, redepth) = project(&k, &pose, &world).unwrap();
            assert_abs_diff_eq!(reproj.u, pixel.u, epsilon = 1e-9);
            assert_abs_diff_eq!(reproj.v, pixel.v, epsilon = 1e-9);
            assert_abs_diff_eq!(redepth, depth, epsilon = 1e-9);
        }
    }

    #[test]
    fn pose_algebra_properties() {
        let mut rng = root_rng(13);
        for _ in 0..200 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = random_pose(&mut rng);

            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            assert!((left.rotation().matrix() - right.rotation().matrix()).abs().max() < 1e-12);
            assert!((left.translation() - right.translation()).abs().max() < 1e-9);

            let ident = a.compose(&a.inverse());
            assert!((ident.rotation().matrix() - Matrix3::identity()).abs().max() < 1e-12);
            assert!(ident.translation().norm() < 1e-12 * (1.0 + a.translation().norm()));
        }
    }

    #[test]
    fn rotation_constructors_are_orthonormal() {
        let mut rng = root_rng(17);
        for _ in 0..200 {
            let e = Pose::from_euler_zyx(
                rng.gen_range(-3.0..=3.0),
                rng.gen_range(-3.0..=3.0),
                rng.gen_range(-3.0..=3.0),
                Vector3::zeros(),
            );
            assert!(rotation_deviation(e.rotation().matrix()) < 1e-12);

            let p = random_pose(&mut rng);
            assert!(rotation_deviation(p.rotation().matrix()) < 1e-12);

            let q = UnitQuaternion::from_rotation_matrix(p.rotation());
            let qp = Pose::from_quaternion(q, Vector3::zeros());
            assert!(rotation_deviation(qp.rotation().matrix()) < 1e-12);
        }
    }

    #[test]
    fn from_parts_rejects_invalid_rotation() {
        let mut bad = Matrix3::identity();
        bad[(0, 0)] = 1.0 + 1e-6;
        assert!(Pose::from_parts(bad, Vector3::zeros()).is_err());
        assert!(Pose::from_parts(Matrix3::identity(), Vector3::zeros()).is_ok());
    }

    #[test]
    fn identity_perturbation_is_bit_exact() {
        let k = test_camera();
        let kp = CameraIntrinsics::new(123.4, 98.7, 41.0, 59.0, 100, 100).unwrap();
        let px = PixelPoint::new(13.25, 71.5);
        let out = perturb_pixel(&k, &Pose::identity(), &k, &px, 7.5).unwrap();
        assert_eq!(out, px);
        // The calibration cancels, so identity holds for any perturbed K too.
        let out = perturb_pixel(&k, &Pose::identity(), &kp, &px, 7.5).unwrap();
        assert_eq!(out, px);
    }

    #[test]
    fn pure_yaw_shifts_principal_ray_by_fx_tan() {
        let k = test_camera();
        let yaw = 0.1;
        let t_p = Pose::from_euler_zyx(0.0, yaw, 0.0, Vector3::zeros());
        let center = PixelPoint::new(k.cx, k.cy);
        for depth in [1.0, 10.0, 250.0] {
            let out = perturb_pixel(&k, &t_p, &k, &center, depth).unwrap();
            assert_abs_diff_eq!(out.u - center.u, k.fx * yaw.tan(), epsilon = 1e-6);
            assert_abs_diff_eq!(out.v, center.v, epsilon = 1e-9);
        }
    }

    #[test]
    fn perturbation_inverse_composition_recovers_pixel() {
        let k = test_camera();
        let mut rng = root_rng(23);
        for _ in 0..500 {
            let pitch = rng.gen_range(-0.1..=0.1);
            let yaw = rng.gen_range(-0.1..=0.1);
            let roll = rng.gen_range(-0.1..=0.1);
            let t_p = Pose::from_euler_zyx(pitch, yaw, roll, Vector3::zeros());
            let px = PixelPoint::new(rng.gen_range(10.0..90.0), rng.gen_range(10.0..90.0));
            let depth = rng.gen_range(2.0..60.0);
            let Some((mid, mid_depth)) = perturb_pixel_with_depth(&t_p, &k, &px, depth) else {
                continue;
            };
            let Some((back, _)) = perturb_pixel_with_depth(&t_p.inverse(), &k, &mid, mid_depth)
            else {
                continue;
            };
            assert!(back.distance(&px) < 1e-6, "round trip drifted: {:?} vs {:?}", back, px);
        }
    }

    #[test]
    fn zero_range_perturbation_is_identity() {
        let k = test_camera();
        let cfg = PerturbationConfig { angle_range: 0.0, intrinsic_scale_range: 0.0 };
        let mut rng = root_rng(29);
        let (pose, kp) = sample_perturbation(&mut rng, &k, &cfg);
        assert!(pose.is_identity());
        assert_eq!(kp, k);
    }

    #[test]
    fn default_perturbation_ranges_hold() {
        let k = test_camera();
        let cfg = PerturbationConfig::default();
        let mut rng = root_rng(31);
        for _ in 0..10_000 {
            let (pose, kp) = sample_perturbation(&mut rng, &k, &cfg);
            // Recover the net rotation angle; each Euler angle is at most 0.1,
            // so the composition stays within 3 * 0.1 of identity.
            let angle = Pose::identity().rotation_angle_to(&pose);
            assert!(angle <= 0.3 + 1e-12);
            for (scaled, base) in
                [(kp.fx, k.fx), (kp.fy, k.fy), (kp.cx, k.cx), (kp.cy, k.cy)]
            {
                let factor = scaled / base;
                assert!((0.9..=1.1).contains(&factor), "factor {factor} out of range");
            }
        }
    }

    #[test]
    fn perturbation_angles_stay_in_declared_range() {
        // Sample with a fresh stream and check the raw draws by regenerating
        // them: the draw order (pitch, yaw, roll, fx, fy, cx, cy) is part of
        // the determinism contract.
        let k = test_camera();
        let cfg = PerturbationConfig::default();
        let mut a = root_rng(37);
        let mut b = root_rng(37);
        for _ in 0..1000 {
            let (pose, kp) = sample_perturbation(&mut a, &k, &cfg);
            let pitch = b.gen_range(-0.1..=0.1);
            let yaw = b.gen_range(-0.1..=0.1);
            let roll = b.gen_range(-0.1..=0.1);
            let expected = Pose::from_euler_zyx(pitch, yaw, roll, Vector3::zeros());
            assert_eq!(pose.rotation().matrix(), expected.rotation().matrix());
            assert!((-0.1..=0.1).contains(&pitch));
            assert!((-0.1..=0.1).contains(&yaw));
            assert!((-0.1..=0.1).contains(&roll));
            let f_fx = b.gen_range(0.9..=1.1);
            let f_fy = b.gen_range(0.9..=1.1);
            let f_cx = b.gen_range(0.9..=1.1);
            let f_cy = b.gen_range(0.9..=1.1);
            assert_eq!(kp.fx, k.fx * f_fx);
            assert_eq!(kp.fy, k.fy * f_fy);
            assert_eq!(kp.cx, k.cx * f_cx);
            assert_eq!(kp.cy, k.cy * f_cy);
            for factor in [f_fx, f_fy, f_cx, f_cy] {
                assert!((0.9..=1.1).contains(&factor));
            }
        }
    }

    #[test]
    fn perturbation_sampling_is_deterministic() {
        let k = test_camera();
        let cfg = PerturbationConfig::default();
        let seq = |seed: u64| -> Vec<(Pose, CameraIntrinsics)> {
            let mut rng = root_rng(seed);
            (0..32).map(|_| sample_perturbation(&mut rng, &k, &cfg)).collect()
        };
        let a = seq(41);
        let b = seq(41);
        for ((pa, ka), (pb, kb)) in a.iter().zip(&b) {
            assert_eq!(pa.rotation().matrix(), pb.rotation().matrix());
            assert_eq!(pa.translation(), pb.translation());
            assert_eq!(ka, kb);
        }
    }
}
