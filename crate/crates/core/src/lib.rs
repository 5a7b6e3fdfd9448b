//! Confidence-aware visual localization for endoluminal navigation.
//!
//! The crate recovers absolute camera poses from per-frame scene-coordinate
//! predictions (a pixel grid of 3D world points) via a P3P/RANSAC solver with
//! Levenberg-Marquardt refinement, and wraps that solver in a sliding-window
//! orchestrator that alternates between online-training and testing phases
//! based on a rolling inlier-count confidence buffer.
//!
//! Supporting machinery mirrors the rest of the pipeline:
//!
//! - [`retrieval`]: virtual-buffer selection by retrieval hit scores over a
//!   pre-operative frame database,
//! - [`augment`]: depth-aware image augmentation (color jitter, noise mixup,
//!   camera-parameter perturbation warping),
//! - [`losses`]: the training objectives as pure, gradient-checkable
//!   functions,
//! - [`sim`]: a synthetic branching-lumen simulator standing in for clinical
//!   data and the neural predictors,
//! - [`metrics`]: ATE / rotational-RPE trajectory evaluation with optional
//!   7-DoF alignment,
//! - [`io`]: the on-disk dataset formats (scene maps, images, depths,
//!   descriptors, TUM trajectories).
//!
//! All randomness is driven by caller-supplied seeds through ChaCha streams,
//! so every pipeline stage is bit-reproducible.

// Guards written as `!(x > y)` deliberately treat NaN as out of range; the
// `x <= y` form clippy prefers would silently accept NaN instead.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod confidence;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod retrieval;
pub mod rng;
pub mod sim;
pub mod solver;
