//! Synthetic endoluminal scene generation.
//!
//! Everything the pipeline consumes in production comes from hardware or
//! neural networks that are out of scope here: endoscope video, per-pixel
//! scene-coordinate predictions, place descriptors. This module synthesizes
//! all of it from first principles so the rest of the crate is testable
//! end-to-end with known ground truth:
//!
//! - a branching-tube anatomy built from capsules ([`LumenModel`]),
//! - smooth tangent-following camera trajectories through it,
//! - analytic ray-cast renders: shaded images, depth maps, and exact
//!   scene-coordinate grids ([`render_frame`]),
//! - a predictor error model that corrupts clean maps with Gaussian noise
//!   and box outliers ([`corrupt_map`]),
//! - pose-derived place descriptors ([`PoseEmbedder`]) standing in for a
//!   learned retrieval network.

use crate::augment::{AugmentError, DepthMap, Image};
use crate::geometry::{CameraIntrinsics, PixelPoint, Pose, ScenePoint};
use crate::retrieval::{Descriptor, DEFAULT_DESCRIPTOR_DIM};
use crate::solver::{ScenePointMap, SolverError};
use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::seq::index as rand_index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::VecDeque;
use std::f64::consts::TAU;
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator configuration: {reason}")]
    InvalidConfig { reason: String },
    #[error("invalid lumen model: {reason}")]
    InvalidModel { reason: String },
    #[error("invalid route: {reason}")]
    InvalidRoute { reason: String },
    #[error("camera position is outside the lumen interior")]
    PoseOutsideLumen,
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

/// Procedural wall-texture parameters: circumferential rings along the tube
/// axis and low-frequency mottling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureParams {
    /// Ring cycles per millimeter of axial distance.
    pub ring_frequency: f64,
    /// Relative amplitude of the mottling term.
    pub mottle_amplitude: f64,
}

impl Default for TextureParams {
    fn default() -> Self {
        Self { ring_frequency: 0.35, mottle_amplitude: 0.2 }
    }
}

/// Parameters for [`generate_lumen`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LumenConfig {
    /// Binary-tree depth; generation `g` contributes `2^(g-1)` tubes, so the
    /// default of 3 yields 1 + 2 + 4 = 7 segments.
    pub generations: u32,
    /// Tube length range in millimeters, sampled uniformly per segment.
    pub segment_length_range: (f64, f64),
    /// Branch half-angle range in radians, sampled per child.
    pub branch_angle_range: (f64, f64),
    /// Interior radius at the root, millimeters.
    pub root_radius: f64,
    /// Radius multiplier applied per generation.
    pub radius_taper: f64,
    /// Maximum random bend per centerline step, radians.
    pub bend_per_step: f64,
    /// Centerline polyline resolution per segment.
    pub steps_per_segment: usize,
    pub texture: TextureParams,
}

impl Default for LumenConfig {
    fn default() -> Self {
        Self {
            generations: 3,
            segment_length_range: (40.0, 70.0),
            branch_angle_range: (0.35, 0.70),
            root_radius: 6.0,
            radius_taper: 0.78,
            bend_per_step: 0.05,
            steps_per_segment: 8,
            texture: TextureParams::default(),
        }
    }
}

impl LumenConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |reason: String| Err(SimError::InvalidConfig { reason });
        if self.generations == 0 {
            return fail("generations must be at least 1".into());
        }
        let (lo, hi) = self.segment_length_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return fail(format!("segment length range ({lo}, {hi}) must be positive and ordered"));
        }
        let (alo, ahi) = self.branch_angle_range;
        if !(alo >= 0.0 && ahi >= alo && ahi < std::f64::consts::FRAC_PI_2) {
            return fail(format!("branch angle range ({alo}, {ahi}) must be ordered within [0, pi/2)"));
        }
        if !(self.root_radius > 0.0 && self.root_radius.is_finite()) {
            return fail(format!("root radius {} must be positive", self.root_radius));
        }
        if !(self.radius_taper > 0.0 && self.radius_taper <= 1.5) {
            return fail(format!("radius taper {} must be in (0, 1.5]", self.radius_taper));
        }
        if !(self.bend_per_step >= 0.0 && self.bend_per_step < 0.5) {
            return fail(format!("bend per step {} must be in [0, 0.5)", self.bend_per_step));
        }
        if self.steps_per_segment == 0 {
            return fail("steps per segment must be at least 1".into());
        }
        Ok(())
    }
}

/// One tube of the branching tree: a piecewise-linear centerline with a
/// per-node interior radius. Children start at their parent's last node.
#[derive(Debug, Clone, PartialEq)]
pub struct LumenSegment {
    pub parent: Option<usize>,
    /// 0-based generation (root = 0).
    pub generation: u32,
    pub polyline: Vec<Vector3<f64>>,
    pub radii: Vec<f64>,
}

/// One capsule (cylinder with spherical caps) of the interior union.
/// The radius is constant per centerline edge: the mean of its node radii.
#[derive(Debug, Clone, Copy)]
struct Capsule {
    a: Vector3<f64>,
    axis: Vector3<f64>,
    length: f64,
    radius: f64,
    /// Axial millimeters from the tree root to `a`, for ring texturing.
    axial_base: f64,
    bound_center: Vector3<f64>,
    bound_radius_sq: f64,
}

impl Capsule {
    fn new(a: Vector3<f64>, b: Vector3<f64>, radius: f64, axial_base: f64) -> Self {
        let diff = b - a;
        let length = diff.norm();
        let axis = diff / length;
        let bound = length / 2.0 + radius + 1e-9;
        Self {
            a,
            axis,
            length,
            radius,
            axial_base,
            bound_center: (a + b) / 2.0,
            bound_radius_sq: bound * bound,
        }
    }

    fn distance_to_axis(&self, p: &Vector3<f64>) -> f64 {
        let s = (p - self.a).dot(&self.axis).clamp(0.0, self.length);
        (p - (self.a + self.axis * s)).norm()
    }
}

/// The complete branching anatomy: the interior is the union of all segment
/// capsules. Immutable after construction; rendering reads it concurrently.
#[derive(Debug, Clone)]
pub struct LumenModel {
    segments: Vec<LumenSegment>,
    texture: TextureParams,
    capsules: Vec<Capsule>,
}

impl LumenModel {
    pub fn new(segments: Vec<LumenSegment>, texture: TextureParams) -> Result<Self, SimError> {
        let fail = |reason: String| Err(SimError::InvalidModel { reason });
        if segments.is_empty() {
            return fail("model has no segments".into());
        }
        for (index, segment) in segments.iter().enumerate() {
            match segment.parent {
                None if index != 0 => {
                    return fail(format!("segment {index} is a second root"));
                }
                Some(p) if p >= index => {
                    return fail(format!("segment {index} links forward to parent {p}"));
                }
                Some(p) => {
                    let joint = segments[p].polyline.last().unwrap();
                    if (segment.polyline[0] - joint).norm() > 1e-6 {
                        return fail(format!("segment {index} does not start at its parent's end"));
                    }
                }
                None => {}
            }
            if segment.polyline.len() < 2 {
                return fail(format!("segment {index} needs at least two centerline nodes"));
            }
            if segment.polyline.len() != segment.radii.len() {
                return fail(format!("segment {index} has mismatched node and radius counts"));
            }
            for (node, &r) in segment.radii.iter().enumerate() {
                if !(r > 0.0 && r.is_finite()) {
                    return fail(format!("segment {index} node {node} has radius {r}"));
                }
            }
            for pair in segment.polyline.windows(2) {
                if !((pair[1] - pair[0]).norm() > 1e-9) {
                    return fail(format!("segment {index} has a zero-length centerline edge"));
                }
            }
        }

        // Axial base of each segment = accumulated centerline length from
        // the root, for continuous ring texture across joints.
        let mut segment_base = vec![0.0f64; segments.len()];
        let mut capsules = Vec::new();
        for (index, segment) in segments.iter().enumerate() {
            if let Some(p) = segment.parent {
                let parent_len: f64 = segments[p]
                    .polyline
                    .windows(2)
                    .map(|pair| (pair[1] - pair[0]).norm())
                    .sum();
                segment_base[index] = segment_base[p] + parent_len;
            }
            let mut axial = segment_base[index];
            for (pair, radii) in segment.polyline.windows(2).zip(segment.radii.windows(2)) {
                let radius = (radii[0] + radii[1]) / 2.0;
                capsules.push(Capsule::new(pair[0], pair[1], radius, axial));
                axial += (pair[1] - pair[0]).norm();
            }
        }
        Ok(Self { segments, texture, capsules })
    }

    pub fn segments(&self) -> &[LumenSegment] {
        &self.segments
    }

    pub fn texture(&self) -> TextureParams {
        self.texture
    }

    /// Signed interior margin: positive inside, negative outside, zero on
    /// the wall; the maximum over all capsules of `radius - axis distance`.
    pub fn clearance(&self, p: &Vector3<f64>) -> f64 {
        self.capsules
            .iter()
            .map(|c| c.radius - c.distance_to_axis(p))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        self.clearance(p) > 0.0
    }

    /// Indices of the segments branching off segment `index`, in id order.
    pub fn children_of(&self, index: usize) -> Vec<usize> {
        self.segments
            .iter()
            .enumerate()
            .filter(|(_, s)| s.parent == Some(index))
            .map(|(i, _)| i)
            .collect()
    }

    /// First exit of the interior union along `origin + t * direction`
    /// (`direction` unit length), as `(t, capsule index at the exit)`.
    /// `None` when the origin is not inside the union.
    fn ray_exit(
        &self,
        origin: &Vector3<f64>,
        direction: &Vector3<f64>,
        scratch: &mut Vec<(f64, f64, usize)>,
    ) -> Option<(f64, usize)> {
        scratch.clear();
        for (index, capsule) in self.capsules.iter().enumerate() {
            // Bounding-sphere cull on the infinite ray.
            let to_center = capsule.bound_center - origin;
            let closest_sq = to_center.cross(direction).norm_squared();
            if closest_sq > capsule.bound_radius_sq
                && to_center.norm_squared() > capsule.bound_radius_sq
            {
                continue;
            }
            if let Some((t0, t1)) = ray_capsule_interval(origin, direction, capsule) {
                if t1 > 0.0 {
                    scratch.push((t0, t1, index));
                }
            }
        }
        scratch.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
        let mut exit = 0.0f64;
        let mut exit_capsule = None;
        for &(t0, t1, index) in scratch.iter() {
            if t0 > exit + 1e-9 {
                break;
            }
            if t1 > exit {
                exit = t1;
                exit_capsule = Some(index);
            }
        }
        exit_capsule.map(|index| (exit, index))
    }
}

/// Ray parameter interval inside one capsule, or `None` when the ray misses.
/// A capsule is the convex union of a finite cylinder and two cap spheres,
/// so the merged interval is simply the envelope of the non-empty parts.
fn ray_capsule_interval(
    origin: &Vector3<f64>,
    direction: &Vector3<f64>,
    capsule: &Capsule,
) -> Option<(f64, f64)> {
    let mut interval: Option<(f64, f64)> = None;
    let mut merge = |part: Option<(f64, f64)>| {
        if let Some((s0, s1)) = part {
            interval = Some(match interval {
                None => (s0, s1),
                Some((t0, t1)) => (t0.min(s0), t1.max(s1)),
            });
        }
    };

    let oa = origin - capsule.a;
    let d_par = direction.dot(&capsule.axis);
    let o_par = oa.dot(&capsule.axis);
    let d_perp = direction - capsule.axis * d_par;
    let o_perp = oa - capsule.axis * o_par;

    // Finite cylinder: radial quadratic intersected with the axial slab.
    let a = d_perp.norm_squared();
    let c = o_perp.norm_squared() - capsule.radius * capsule.radius;
    let radial = if a < 1e-14 {
        if c <= 0.0 {
            Some((f64::NEG_INFINITY, f64::INFINITY))
        } else {
            None
        }
    } else {
        let b = 2.0 * o_perp.dot(&d_perp);
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            None
        } else {
            let root = disc.sqrt();
            Some(((-b - root) / (2.0 * a), (-b + root) / (2.0 * a)))
        }
    };
    let slab = if d_par.abs() < 1e-14 {
        if (0.0..=capsule.length).contains(&o_par) {
            Some((f64::NEG_INFINITY, f64::INFINITY))
        } else {
            None
        }
    } else {
        let s0 = (0.0 - o_par) / d_par;
        let s1 = (capsule.length - o_par) / d_par;
        Some((s0.min(s1), s0.max(s1)))
    };
    if let (Some((r0, r1)), Some((s0, s1))) = (radial, slab) {
        let t0 = r0.max(s0);
        let t1 = r1.min(s1);
        if t0 <= t1 {
            merge(Some((t0, t1)));
        }
    }

    merge(ray_sphere_interval(origin, direction, &capsule.a, capsule.radius));
    let b_end = capsule.a + capsule.axis * capsule.length;
    merge(ray_sphere_interval(origin, direction, &b_end, capsule.radius));
    interval
}

fn ray_sphere_interval(
    origin: &Vector3<f64>,
    direction: &Vector3<f64>,
    center: &Vector3<f64>,
    radius: f64,
) -> Option<(f64, f64)> {
    let oc = origin - center;
    let b = 2.0 * oc.dot(direction);
    let c = oc.norm_squared() - radius * radius;
    let disc = b * b - 4.0 * c;
    if disc < 0.0 {
        return None;
    }
    let root = disc.sqrt();
    Some(((-b - root) / 2.0, (-b + root) / 2.0))
}

/// Grows a binary branching tree, deterministic per RNG stream.
pub fn generate_lumen<R: Rng + ?Sized>(
    rng: &mut R,
    config: &LumenConfig,
) -> Result<LumenModel, SimError> {
    config.validate()?;
    struct Pending {
        parent: Option<usize>,
        start: Vector3<f64>,
        direction: Vector3<f64>,
        generation: u32,
    }
    let mut queue = VecDeque::new();
    queue.push_back(Pending {
        parent: None,
        start: Vector3::zeros(),
        direction: Vector3::z(),
        generation: 0,
    });
    let mut segments: Vec<LumenSegment> = Vec::new();
    while let Some(job) = queue.pop_front() {
        let length = rng.gen_range(config.segment_length_range.0..=config.segment_length_range.1);
        let steps = config.steps_per_segment;
        let step_len = length / steps as f64;
        let mut direction = job.direction;
        let mut polyline = vec![job.start];
        for _ in 0..steps {
            let bend = rng.gen_range(0.0..=config.bend_per_step);
            let azimuth = rng.gen_range(0.0..TAU);
            let (e1, e2) = perpendicular_frame(&direction);
            let axis = Unit::new_normalize(e1 * azimuth.cos() + e2 * azimuth.sin());
            direction = (Rotation3::from_axis_angle(&axis, bend) * direction).normalize();
            let next = polyline.last().unwrap() + direction * step_len;
            polyline.push(next);
        }
        let r_start = config.root_radius * config.radius_taper.powi(job.generation as i32);
        let r_end = config.root_radius * config.radius_taper.powi(job.generation as i32 + 1);
        let radii: Vec<f64> = (0..=steps)
            .map(|i| {
                let alpha = i as f64 / steps as f64;
                r_start + (r_end - r_start) * alpha
            })
            .collect();
        let index = segments.len();
        let end = *polyline.last().unwrap();
        segments.push(LumenSegment {
            parent: job.parent,
            generation: job.generation,
            polyline,
            radii,
        });
        if job.generation + 1 < config.generations {
            let azimuth = rng.gen_range(0.0..TAU);
            let (e1, e2) = perpendicular_frame(&direction);
            let branch_axis = Unit::new_normalize(e1 * azimuth.cos() + e2 * azimuth.sin());
            for sign in [1.0, -1.0] {
                let angle = rng
                    .gen_range(config.branch_angle_range.0..=config.branch_angle_range.1);
                let child_direction =
                    (Rotation3::from_axis_angle(&branch_axis, sign * angle) * direction)
                        .normalize();
                queue.push_back(Pending {
                    parent: Some(index),
                    start: end,
                    direction: child_direction,
                    generation: job.generation + 1,
                });
            }
        }
    }
    LumenModel::new(segments, config.texture)
}

/// Two unit vectors completing `direction` to an orthonormal frame.
fn perpendicular_frame(direction: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let ax = direction.x.abs();
    let ay = direction.y.abs();
    let az = direction.z.abs();
    let helper = if ax <= ay && ax <= az {
        Vector3::x()
    } else if ay <= az {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let e1 = direction.cross(&helper).normalize();
    let e2 = direction.cross(&e1);
    (e1, e2)
}

/// Lateral wobble of the camera path, as a fraction of the local radius.
const LATERAL_OFFSET_FRACTION: f64 = 0.22;
/// Roll oscillation amplitude in radians (kept below the 5-degree
/// frame-to-frame smoothness budget).
const ROLL_AMPLITUDE: f64 = 0.05;

/// Samples a smooth camera path down one root-to-leaf route.
///
/// `path` picks a child at each junction (so its length is the number of
/// junctions passed, `generations - 1` for a full tree). Poses look along a
/// windowed centerline tangent — the window spreads branch-point kinks over
/// several frames, bounding consecutive rotations below 5 degrees — with a
/// small deterministic lateral offset and roll. Positions always stay
/// strictly inside the lumen.
pub fn generate_trajectory(
    model: &LumenModel,
    path: &[usize],
    frames_per_mm: f64,
) -> Result<Vec<Pose>, SimError> {
    if !(frames_per_mm > 0.0 && frames_per_mm.is_finite()) {
        return Err(SimError::InvalidConfig {
            reason: format!("frames per mm {frames_per_mm} must be positive"),
        });
    }
    // Resolve the branch choices into a segment chain ending at a leaf.
    let mut chain = vec![0usize];
    for (junction, &choice) in path.iter().enumerate() {
        let children = model.children_of(*chain.last().unwrap());
        match children.get(choice) {
            Some(&child) => chain.push(child),
            None => {
                return Err(SimError::InvalidRoute {
                    reason: format!(
                        "junction {junction} has {} children, got choice {choice}",
                        children.len()
                    ),
                });
            }
        }
    }
    if !model.children_of(*chain.last().unwrap()).is_empty() {
        return Err(SimError::InvalidRoute {
            reason: format!("route stops {} junction(s) short of a leaf", {
                let mut current = *chain.last().unwrap();
                let mut depth = 0;
                while !model.children_of(current).is_empty() {
                    current = model.children_of(current)[0];
                    depth += 1;
                }
                depth
            }),
        });
    }

    // Concatenate the chain's polylines (joints deduplicated).
    let mut points: Vec<Vector3<f64>> = Vec::new();
    let mut radii: Vec<f64> = Vec::new();
    for (order, &index) in chain.iter().enumerate() {
        let segment = &model.segments[index];
        let skip = usize::from(order > 0);
        points.extend(&segment.polyline[skip..]);
        radii.extend(&segment.radii[skip..]);
    }
    let mut cumulative = vec![0.0f64];
    for pair in points.windows(2) {
        cumulative.push(cumulative.last().unwrap() + (pair[1] - pair[0]).norm());
    }
    let total = *cumulative.last().unwrap();

    let sample = |s: f64| -> (Vector3<f64>, f64) {
        let s = s.clamp(0.0, total);
        let k = match cumulative.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
            Ok(k) => k.min(points.len() - 2),
            Err(k) => k.saturating_sub(1).min(points.len() - 2),
        };
        let span = cumulative[k + 1] - cumulative[k];
        let alpha = ((s - cumulative[k]) / span).clamp(0.0, 1.0);
        (
            points[k] + (points[k + 1] - points[k]) * alpha,
            radii[k] + (radii[k + 1] - radii[k]) * alpha,
        )
    };

    let count = ((total * frames_per_mm).floor() as usize + 1).max(2);
    let ds = total / (count - 1) as f64;
    // Tangent window; wide enough that a 40-degree branch kink never turns
    // the camera more than 5 degrees between consecutive samples.
    let window = 2.5 + 5.0 * ds;

    let mut poses = Vec::with_capacity(count);
    let mut up: Option<Vector3<f64>> = None;
    for i in 0..count {
        let s = (i as f64 * ds).min(total);
        let (center, radius) = sample(s);
        let ahead = sample((s + window).min(total)).0;
        let behind = sample((s - window).max(0.0)).0;
        let tangent = (ahead - behind).normalize();
        // Parallel transport of the up vector keeps roll continuous.
        let u = match up {
            None => perpendicular_frame(&tangent).0,
            Some(prev) => {
                let projected = prev - tangent * prev.dot(&tangent);
                if projected.norm() > 1e-9 {
                    projected.normalize()
                } else {
                    perpendicular_frame(&tangent).0
                }
            }
        };
        up = Some(u);
        let side = tangent.cross(&u);
        let position = center
            + (u * (TAU * s / 73.0).sin() + side * (TAU * s / 97.0).cos())
                * (LATERAL_OFFSET_FRACTION * radius);
        let roll = ROLL_AMPLITUDE * (TAU * s / 131.0).sin();
        let rolled_up = u * roll.cos() + tangent.cross(&u) * roll.sin();
        // Camera axes: +z looks along the tangent, +y is image-down.
        let y_cam = -rolled_up;
        let x_cam = y_cam.cross(&tangent);
        let rotation = Matrix3::from_columns(&[x_cam, y_cam, tangent]);
        let pose = Pose::from_parts(rotation, position)
            .expect("trajectory frames are orthonormal by construction");
        poses.push(pose);
    }
    Ok(poses)
}

/// Rendering parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    /// Scene-coordinate grid stride in pixels; the grid origin sits at
    /// `(stride/2, stride/2)`.
    pub stride: u32,
    /// Quadratic distance falloff `k` of the headlight: `1 / (1 + d^2 k)`.
    pub shading_falloff: f64,
    /// Per-channel tint of the shaded wall.
    pub tint: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { stride: 8, shading_falloff: 0.005, tint: [1.0, 0.45, 0.35] }
    }
}

/// Relative amplitude of the circumferential ring texture.
const RING_CONTRAST: f64 = 0.15;
/// Hits closer than this along the camera z axis are treated as invalid.
const MIN_DEPTH: f64 = 1e-6;

/// Headlight Lambertian shading: incidence times quadratic distance falloff.
/// Strictly decreasing in `distance` for fixed incidence.
pub fn shading_intensity(cos_theta: f64, distance: f64, falloff: f64) -> f64 {
    cos_theta.clamp(0.0, 1.0) / (1.0 + distance * distance * falloff)
}

/// Scene-coordinate grid shape for an image: `(rows, cols)` of pixels
/// `origin + index * stride` that fit inside `width x height`.
pub fn grid_dimensions(intrinsics: &CameraIntrinsics, stride: u32) -> (u32, u32) {
    let origin = grid_origin(stride);
    let rows = ((intrinsics.height as f64 - 1.0 - origin.v) / stride as f64).floor() as u32 + 1;
    let cols = ((intrinsics.width as f64 - 1.0 - origin.u) / stride as f64).floor() as u32 + 1;
    (rows, cols)
}

pub fn grid_origin(stride: u32) -> PixelPoint {
    PixelPoint::new(stride as f64 / 2.0, stride as f64 / 2.0)
}

/// One fully synthesized frame. `noisy_map` equals `clean_map` straight out
/// of [`render_frame`]; [`synthesize_frame`] replaces it with a corrupted
/// copy and the descriptor with a noisy embedding.
#[derive(Debug, Clone)]
pub struct SyntheticFrame {
    pub id: usize,
    pub pose: Pose,
    pub image: Image,
    pub depth: DepthMap,
    pub clean_map: ScenePointMap,
    pub noisy_map: ScenePointMap,
    pub descriptor: Descriptor,
}

fn camera_ray(
    intrinsics: &CameraIntrinsics,
    pose: &Pose,
    pixel: PixelPoint,
) -> (Vector3<f64>, f64) {
    let dx = (pixel.u - intrinsics.cx) / intrinsics.fx;
    let dy = (pixel.v - intrinsics.cy) / intrinsics.fy;
    let camera_dir = Vector3::new(dx, dy, 1.0);
    let scale = camera_dir.norm();
    // Rotation preserves length, so the world direction is unit and the
    // camera-frame depth of a hit at ray parameter t is t / scale.
    (pose.rotation() * (camera_dir / scale), scale)
}

fn mottle(p: &Vector3<f64>) -> f64 {
    (2.1 * p.x + 0.9).sin() * (1.7 * p.y + 2.3).sin() * (2.3 * p.z + 4.1).sin()
}

/// Renders the clean parts of a frame: shaded image, z-depth map, and the
/// exact scene-coordinate grid (every valid cell reprojects onto its own
/// grid pixel to floating-point precision, far inside the 1e-6 px contract).
/// The descriptor is the noiseless default embedding of the pose.
pub fn render_frame(
    model: &LumenModel,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    config: &RenderConfig,
    id: usize,
) -> Result<SyntheticFrame, SimError> {
    if !model.contains(pose.translation()) {
        return Err(SimError::PoseOutsideLumen);
    }
    let width = intrinsics.width as usize;
    let height = intrinsics.height as usize;
    let origin = *pose.translation();
    let mut scratch = Vec::new();

    let mut pixels = vec![0.0f32; width * height * 3];
    let mut depths = vec![0.0f32; width * height];
    let mut depth_valid = vec![false; width * height];
    for y in 0..height {
        for x in 0..width {
            let (direction, scale) =
                camera_ray(intrinsics, pose, PixelPoint::new(x as f64, y as f64));
            let Some((t, capsule_index)) = model.ray_exit(&origin, &direction, &mut scratch)
            else {
                continue;
            };
            let z = t / scale;
            if z <= MIN_DEPTH {
                continue;
            }
            let flat = y * width + x;
            depths[flat] = z as f32;
            depth_valid[flat] = true;

            let capsule = &model.capsules[capsule_index];
            let hit = origin + direction * t;
            let axial_local = (hit - capsule.a).dot(&capsule.axis).clamp(0.0, capsule.length);
            let foot = capsule.a + capsule.axis * axial_local;
            let normal = (hit - foot).normalize();
            let cos_theta = direction.dot(&normal);
            let base = shading_intensity(cos_theta, t, config.shading_falloff);
            let axial = capsule.axial_base + axial_local;
            let texture = (1.0
                + model.texture.mottle_amplitude * mottle(&hit)
                + RING_CONTRAST * (TAU * model.texture.ring_frequency * axial).sin())
            .clamp(0.05, 2.0);
            for channel in 0..3 {
                pixels[flat * 3 + channel] =
                    (base * texture * config.tint[channel]).clamp(0.0, 1.0) as f32;
            }
        }
    }
    let image = Image::new(intrinsics.width, intrinsics.height, 3, pixels)?;
    let depth = DepthMap::new(intrinsics.width, intrinsics.height, depths, depth_valid)?;
    let clean_map = render_scene_map(model, pose, intrinsics, config)?;
    let descriptor = default_embedder().embed_clean(pose);
    Ok(SyntheticFrame {
        id,
        pose: *pose,
        image,
        depth,
        noisy_map: clean_map.clone(),
        clean_map,
        descriptor,
    })
}

/// Casts only the scene-coordinate grid rays — the fast path for solver
/// tests and benchmarks that never look at the image.
pub fn render_scene_map(
    model: &LumenModel,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    config: &RenderConfig,
) -> Result<ScenePointMap, SimError> {
    if !model.contains(pose.translation()) {
        return Err(SimError::PoseOutsideLumen);
    }
    let (rows, cols) = grid_dimensions(intrinsics, config.stride);
    let origin_px = grid_origin(config.stride);
    let origin = *pose.translation();
    let cells = rows as usize * cols as usize;
    let mut points = Vec::with_capacity(cells);
    let mut valid = Vec::with_capacity(cells);
    let mut scratch = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let pixel = PixelPoint::new(
                origin_px.u + (c * config.stride) as f64,
                origin_px.v + (r * config.stride) as f64,
            );
            let (direction, scale) = camera_ray(intrinsics, pose, pixel);
            match model.ray_exit(&origin, &direction, &mut scratch) {
                Some((t, _)) if t / scale > MIN_DEPTH => {
                    let hit = origin + direction * t;
                    points.push(ScenePoint::new(hit.x, hit.y, hit.z));
                    valid.push(true);
                }
                _ => {
                    points.push(ScenePoint::new(0.0, 0.0, 0.0));
                    valid.push(false);
                }
            }
        }
    }
    Ok(ScenePointMap::new(rows, cols, config.stride, origin_px, points, valid)?)
}

/// Error model of the out-of-scope scene-coordinate predictor: isotropic
/// Gaussian jitter on every valid cell plus a fraction of gross outliers
/// drawn uniformly from a world-space box.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorNoiseModel {
    /// Gaussian sigma in millimeters.
    pub gaussian_sigma: f64,
    /// Fraction of valid cells replaced by outliers, in [0, 1].
    pub outlier_fraction: f64,
    pub outlier_min: ScenePoint,
    pub outlier_max: ScenePoint,
    /// Optional per-frame sigma multipliers (clamped to the last entry),
    /// modeling slow predictor drift.
    pub drift_schedule: Option<Vec<f64>>,
}

impl Default for PredictorNoiseModel {
    fn default() -> Self {
        Self {
            gaussian_sigma: 0.5,
            outlier_fraction: 0.1,
            outlier_min: ScenePoint::new(-60.0, -60.0, -20.0),
            outlier_max: ScenePoint::new(60.0, 60.0, 180.0),
            drift_schedule: None,
        }
    }
}

impl PredictorNoiseModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |reason: String| Err(SimError::InvalidConfig { reason });
        if !(self.gaussian_sigma >= 0.0 && self.gaussian_sigma.is_finite()) {
            return fail(format!("gaussian sigma {} must be non-negative", self.gaussian_sigma));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return fail(format!("outlier fraction {} must be in [0, 1]", self.outlier_fraction));
        }
        let (lo, hi) = (&self.outlier_min, &self.outlier_max);
        if !(lo.x < hi.x && lo.y < hi.y && lo.z < hi.z) {
            return fail("outlier box must have positive extent on every axis".into());
        }
        if let Some(schedule) = &self.drift_schedule {
            if schedule.is_empty() {
                return fail("drift schedule, when present, must be non-empty".into());
            }
            if schedule.iter().any(|&m| !(m >= 0.0 && m.is_finite())) {
                return fail("drift multipliers must be non-negative and finite".into());
            }
        }
        Ok(())
    }

    /// Effective sigma for a frame index under the drift schedule.
    pub fn sigma_at(&self, frame_index: usize) -> f64 {
        let multiplier = match &self.drift_schedule {
            None => 1.0,
            Some(schedule) => schedule[frame_index.min(schedule.len() - 1)],
        };
        self.gaussian_sigma * multiplier
    }
}

/// Applies the predictor error model to a clean map: Gaussian jitter on all
/// valid cells, then a rounded `outlier_fraction` of them replaced by
/// uniform box samples. Cell validity is untouched. Deterministic per RNG
/// stream; `frame_index` selects the drift-schedule multiplier.
pub fn corrupt_map<R: Rng + ?Sized>(
    clean: &ScenePointMap,
    noise: &PredictorNoiseModel,
    frame_index: usize,
    rng: &mut R,
) -> Result<ScenePointMap, SimError> {
    noise.validate()?;
    let mut points = clean.points().to_vec();
    let valid = clean.validity().to_vec();
    let sigma = noise.sigma_at(frame_index);
    if sigma > 0.0 {
        for (point, &ok) in points.iter_mut().zip(&valid) {
            if ok {
                let n: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                point.x += sigma * n[0];
                point.y += sigma * n[1];
                point.z += sigma * n[2];
            }
        }
    }
    let valid_cells: Vec<usize> =
        valid.iter().enumerate().filter(|(_, &ok)| ok).map(|(i, _)| i).collect();
    let outliers = (noise.outlier_fraction * valid_cells.len() as f64).round() as usize;
    if outliers > 0 {
        let chosen = rand_index::sample(rng, valid_cells.len(), outliers);
        for pick in chosen.iter() {
            let cell = valid_cells[pick];
            points[cell] = ScenePoint::new(
                rng.gen_range(noise.outlier_min.x..=noise.outlier_max.x),
                rng.gen_range(noise.outlier_min.y..=noise.outlier_max.y),
                rng.gen_range(noise.outlier_min.z..=noise.outlier_max.z),
            );
        }
    }
    Ok(clean.with_points(points, valid)?)
}

/// Position scale of the pose embedding (millimeters per unit feature).
pub const POSITION_SCALE_MM: f64 = 50.0;
/// Expected Euclidean norm of the Gaussian perturbation added to noisy
/// embeddings before renormalization — a ~5% wobble on a unit descriptor,
/// split as `sigma / sqrt(dim)` per component so the magnitude does not
/// grow with descriptor dimension (which would drown the pose signal and
/// with it the nearby-poses-embed-similarly structure retrieval relies on).
pub const DESCRIPTOR_NOISE_SIGMA: f64 = 0.05;
/// Seed of the shared default embedder.
pub const DEFAULT_EMBEDDER_SEED: u64 = 1729;

/// Pose-derived place descriptors: a fixed orthonormal random projection of
/// the 7-vector `(position / 50 mm, canonical quaternion)` into descriptor
/// space, optionally perturbed by Gaussian noise, then renormalized. The
/// projection is an isometry on the feature space, so nearby poses map to
/// similar descriptors — the structure place retrieval relies on.
#[derive(Debug, Clone)]
pub struct PoseEmbedder {
    projection: DMatrix<f64>,
    noise_sigma: f64,
}

impl PoseEmbedder {
    pub fn new(seed: u64, dimension: usize, noise_sigma: f64) -> Result<Self, SimError> {
        if dimension < 7 {
            return Err(SimError::InvalidConfig {
                reason: format!("descriptor dimension {dimension} must be at least 7"),
            });
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(SimError::InvalidConfig {
                reason: format!("descriptor noise sigma {noise_sigma} must be non-negative"),
            });
        }
        let mut rng = crate::rng::root_rng(seed);
        let gaussian = DMatrix::from_fn(dimension, 7, |_, _| StandardNormal.sample(&mut rng));
        // Thin QR orthonormalizes the 7 columns.
        let projection = gaussian.qr().q();
        Ok(Self { projection, noise_sigma })
    }

    pub fn dimension(&self) -> usize {
        self.projection.nrows()
    }

    fn features(pose: &Pose) -> DVector<f64> {
        let t = pose.translation();
        let quaternion = UnitQuaternion::from_rotation_matrix(pose.rotation());
        // Canonical sign: qw >= 0 so a pose has exactly one embedding.
        let q = if quaternion.w >= 0.0 { *quaternion.quaternion() } else { -*quaternion.quaternion() };
        DVector::from_column_slice(&[
            t.x / POSITION_SCALE_MM,
            t.y / POSITION_SCALE_MM,
            t.z / POSITION_SCALE_MM,
            q.i,
            q.j,
            q.k,
            q.w,
        ])
    }

    /// Noise-free embedding (identical poses give identical descriptors).
    pub fn embed_clean(&self, pose: &Pose) -> Descriptor {
        let projected = &self.projection * Self::features(pose);
        Descriptor::normalized(projected.iter().copied().collect())
            .expect("pose features have norm >= 1")
    }

    /// Noisy embedding, as a real descriptor extractor would produce.
    pub fn embed<R: Rng + ?Sized>(&self, pose: &Pose, rng: &mut R) -> Descriptor {
        let mut projected = &self.projection * Self::features(pose);
        let component_sigma = self.noise_sigma / (self.dimension() as f64).sqrt();
        for value in projected.iter_mut() {
            let n: f64 = StandardNormal.sample(rng);
            *value += component_sigma * n;
        }
        Descriptor::normalized(projected.iter().copied().collect())
            .expect("noisy embedding norm is bounded away from zero")
    }
}

/// Shared default embedder (fixed seed, default dimension and noise).
pub fn default_embedder() -> &'static PoseEmbedder {
    static EMBEDDER: OnceLock<PoseEmbedder> = OnceLock::new();
    EMBEDDER.get_or_init(|| {
        PoseEmbedder::new(DEFAULT_EMBEDDER_SEED, DEFAULT_DESCRIPTOR_DIM, DESCRIPTOR_NOISE_SIGMA)
            .expect("default embedder parameters are valid")
    })
}

/// Default camera used by the bundled tooling: 320x240 with a wide
/// endoscope-like field of view.
pub fn default_camera() -> CameraIntrinsics {
    CameraIntrinsics::new(150.0, 150.0, 160.0, 120.0, 320, 240)
        .expect("default intrinsics are valid")
}

/// Renders, corrupts, and embeds one stream frame in a single call.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_frame<R: Rng + ?Sized>(
    model: &LumenModel,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    render: &RenderConfig,
    noise: &PredictorNoiseModel,
    embedder: &PoseEmbedder,
    id: usize,
    rng: &mut R,
) -> Result<SyntheticFrame, SimError> {
    let mut frame = render_frame(model, pose, intrinsics, render, id)?;
    frame.noisy_map = corrupt_map(&frame.clean_map, noise, id, rng)?;
    frame.descriptor = embedder.embed(pose, rng);
    Ok(frame)
}
