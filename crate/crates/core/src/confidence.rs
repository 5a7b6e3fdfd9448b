//! Confidence-gated phase alternation.
//!
//! The localizer alternates between a *training* phase (adapting the
//! predictor to the current stream segment) and a *testing* phase (emitting
//! poses). While testing, each frame's inlier count is compared against a
//! statistical gate built from a FIFO buffer of recent confident counts: a
//! frame is confident when its count reaches at least
//! `mean - sigma_multiplier * stddev` of the buffer. Confident counts enter
//! the buffer; uncertain frames are counted, and once more than
//! `uncertain_trigger` of them accumulate the system flips back to training.
//!
//! [`ConfidenceState::observe`] is the per-frame state machine;
//! [`run_segment_loop`] drives a whole stream through solve → gate →
//! retrain, with the retrain either blocking the stream (synchronous) or
//! running on a separate thread while unrefined estimates keep flowing
//! (parallel).

use crate::geometry::CameraIntrinsics;
use crate::solver::{
    estimate_pose, estimate_pose_raw, PoseEstimate, RansacConfig, ScenePointMap, SolverError,
};
use std::collections::VecDeque;
use std::fmt;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfidenceError {
    #[error("operation requires the {expected} phase but the state is in {actual}")]
    WrongPhase { expected: Phase, actual: Phase },
    #[error("invalid confidence policy: {reason}")]
    InvalidPolicy { reason: String },
    #[error("restored buffer holds {len} counts, exceeding capacity {capacity}")]
    BufferOverCapacity { len: usize, capacity: usize },
    #[error("trainer failed after frame {after_frame}: {message}")]
    TrainerFailed { after_frame: usize, message: String },
}

/// Gate parameters; see the module docs for how they interact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidencePolicy {
    /// FIFO capacity of the confident-count buffer.
    pub buffer_capacity: usize,
    /// How many standard deviations below the mean the gate sits.
    pub sigma_multiplier: f64,
    /// A retrain fires once more than this many uncertain frames accumulate.
    pub uncertain_trigger: usize,
    /// Frames are unconditionally confident while the buffer holds fewer
    /// than this many counts (the statistics are meaningless that early).
    pub warmup_min: usize,
    /// How uncertain frames are counted toward the trigger.
    pub trigger_mode: TriggerMode,
}

/// Whether the uncertain-frame count accumulates across intervening
/// confident frames or resets on each one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TriggerMode {
    /// Count every uncertain frame since the last phase switch.
    #[default]
    Cumulative,
    /// Count only the current run of consecutive uncertain frames.
    Consecutive,
}

impl Default for ConfidencePolicy {
    fn default() -> Self {
        Self {
            buffer_capacity: 50,
            sigma_multiplier: 2.0,
            uncertain_trigger: 20,
            warmup_min: 10,
            trigger_mode: TriggerMode::Cumulative,
        }
    }
}

impl ConfidencePolicy {
    pub fn validate(&self) -> Result<(), ConfidenceError> {
        if self.warmup_min < 1 {
            return Err(ConfidenceError::InvalidPolicy {
                reason: "warmup must cover at least one frame".into(),
            });
        }
        if self.buffer_capacity < self.warmup_min {
            return Err(ConfidenceError::InvalidPolicy {
                reason: format!(
                    "buffer capacity {} is below the warmup minimum {}",
                    self.buffer_capacity, self.warmup_min
                ),
            });
        }
        if self.uncertain_trigger < 1 {
            return Err(ConfidenceError::InvalidPolicy {
                reason: "uncertain trigger must be at least 1".into(),
            });
        }
        if !(self.sigma_multiplier.is_finite() && self.sigma_multiplier >= 0.0) {
            return Err(ConfidenceError::InvalidPolicy {
                reason: format!(
                    "sigma multiplier must be non-negative and finite, got {}",
                    self.sigma_multiplier
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Training,
    Testing,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Training => write!(f, "training"),
            Phase::Testing => write!(f, "testing"),
        }
    }
}

/// What the solver reported for one frame, as the gate sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameObservation {
    InlierCount(usize),
    /// Pose recovery failed outright; always treated as uncertain.
    SolverFailure,
}

/// One gate decision. `mu`/`sigma` describe the buffer at decision time
/// (NaN while it is empty); `threshold` is `mu - sigma_multiplier * sigma`
/// past warmup and negative infinity during it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameVerdict {
    pub confident: bool,
    pub mu: f64,
    pub sigma: f64,
    pub threshold: f64,
    pub triggered_retrain: bool,
}

/// The gate's mutable state: the FIFO buffer of confident inlier counts, the
/// uncertain-frame count since the last phase switch, and the current phase.
///
/// A fresh state starts in [`Phase::Training`] — the initial model has to
/// come from somewhere — so [`ConfidenceState::complete_training`] is the
/// first legal call.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceState {
    buffer: VecDeque<usize>,
    uncertain_count: usize,
    phase: Phase,
}

impl Default for ConfidenceState {
    fn default() -> Self {
        Self::new()
    }
}

impl ConfidenceState {
    pub fn new() -> Self {
        Self { buffer: VecDeque::new(), uncertain_count: 0, phase: Phase::Training }
    }

    /// Reconstructs a state from persisted parts (e.g. when resuming a
    /// stream), enforcing the capacity invariant against the policy.
    pub fn restore(
        policy: &ConfidencePolicy,
        phase: Phase,
        buffer: Vec<usize>,
        uncertain_count: usize,
    ) -> Result<Self, ConfidenceError> {
        policy.validate()?;
        if buffer.len() > policy.buffer_capacity {
            return Err(ConfidenceError::BufferOverCapacity {
                len: buffer.len(),
                capacity: policy.buffer_capacity,
            });
        }
        Ok(Self { buffer: buffer.into(), uncertain_count, phase })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn uncertain_count(&self) -> usize {
        self.uncertain_count
    }

    pub fn buffer(&self) -> &VecDeque<usize> {
        &self.buffer
    }

    /// Mean and population standard deviation of the buffer (NaN when
    /// empty).
    fn statistics(&self) -> (f64, f64) {
        let n = self.buffer.len();
        if n == 0 {
            return (f64::NAN, f64::NAN);
        }
        let mean = self.buffer.iter().map(|&c| c as f64).sum::<f64>() / n as f64;
        let variance =
            self.buffer.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        (mean, variance.sqrt())
    }

    /// Feeds one testing-phase frame through the gate, updating the buffer
    /// and the uncertain count, and flipping to [`Phase::Training`] when the
    /// retrain trigger fires.
    ///
    /// Only legal while testing.
    pub fn observe(
        &mut self,
        policy: &ConfidencePolicy,
        observation: FrameObservation,
    ) -> Result<FrameVerdict, ConfidenceError> {
        policy.validate()?;
        if self.phase != Phase::Testing {
            return Err(ConfidenceError::WrongPhase {
                expected: Phase::Testing,
                actual: self.phase,
            });
        }

        let (mu, sigma) = self.statistics();
        let in_warmup = self.buffer.len() < policy.warmup_min;
        let threshold =
            if in_warmup { f64::NEG_INFINITY } else { mu - policy.sigma_multiplier * sigma };
        let confident = match observation {
            // A failed solve is the strongest out-of-distribution signal and
            // is uncertain even during warmup.
            FrameObservation::SolverFailure => false,
            FrameObservation::InlierCount(_) if in_warmup => true,
            // Ties count as confident: a zero-variance buffer (constant
            // counts, e.g. a noise-free stream) puts the threshold exactly at
            // the running count, and a frame performing exactly at the
            // historical norm must not be treated as a drop.
            FrameObservation::InlierCount(count) => (count as f64) >= threshold,
        };

        if confident {
            let FrameObservation::InlierCount(count) = observation else {
                unreachable!("solver failures are never confident");
            };
            self.buffer.push_back(count);
            if self.buffer.len() > policy.buffer_capacity {
                self.buffer.pop_front();
            }
            if policy.trigger_mode == TriggerMode::Consecutive {
                self.uncertain_count = 0;
            }
        } else {
            self.uncertain_count += 1;
        }

        let triggered_retrain = self.uncertain_count > policy.uncertain_trigger;
        if triggered_retrain {
            self.phase = Phase::Training;
            self.uncertain_count = 0;
        }

        Ok(FrameVerdict { confident, mu, sigma, threshold, triggered_retrain })
    }

    /// Ends a training phase: flips to testing with a cleared buffer.
    ///
    /// Only legal while training.
    pub fn complete_training(&mut self) -> Result<(), ConfidenceError> {
        if self.phase != Phase::Training {
            return Err(ConfidenceError::WrongPhase {
                expected: Phase::Training,
                actual: self.phase,
            });
        }
        self.phase = Phase::Testing;
        self.buffer.clear();
        self.uncertain_count = 0;
        Ok(())
    }
}

/// One stream frame: a caller-assigned index, the scene-coordinate map to
/// localize, and an arbitrary payload carried through to the trainer (e.g.
/// the rendered image the map was predicted from).
#[derive(Debug, Clone)]
pub struct SegmentFrame<F> {
    pub index: usize,
    pub map: ScenePointMap,
    pub payload: F,
}

/// Error type trainer hooks report; carried into
/// [`ConfidenceError::TrainerFailed`].
pub type TrainerError = Box<dyn std::error::Error + Send + Sync + 'static>;

/// Online-adaptation callback: receives the retraining window (the most
/// recent `buffer_capacity` frames, oldest first) and returns when the model
/// is ready to test again.
pub trait TrainerHook<F>: Send {
    fn train(&mut self, window: &[SegmentFrame<F>]) -> Result<(), TrainerError>;
}

impl<F, T> TrainerHook<F> for T
where
    T: FnMut(&[SegmentFrame<F>]) -> Result<(), TrainerError> + Send,
{
    fn train(&mut self, window: &[SegmentFrame<F>]) -> Result<(), TrainerError> {
        self(window)
    }
}

/// Whether a retrain blocks the stream or runs beside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RetrainMode {
    /// The trainer runs inline; no stream frames are consumed while it does,
    /// so the output is fully deterministic.
    #[default]
    Synchronous,
    /// The trainer runs on its own thread while the loop keeps consuming
    /// frames, emitting unrefined estimates without gate verdicts until the
    /// trainer finishes. How many frames land in that window depends on
    /// wall-clock timing.
    Parallel,
}

/// Everything [`run_segment_loop`] needs besides the frames themselves.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SegmentLoopConfig {
    pub policy: ConfidencePolicy,
    pub ransac: RansacConfig,
    pub mode: RetrainMode,
}

/// Per-frame output of [`run_segment_loop`].
#[derive(Debug)]
pub struct FrameResult {
    pub frame_index: usize,
    pub estimate: Result<PoseEstimate, SolverError>,
    /// `None` for frames consumed while a parallel retrain was running (the
    /// gate is suspended during training).
    pub verdict: Option<FrameVerdict>,
    /// False when the estimate skipped the refinement stage (parallel
    /// training window).
    pub refined: bool,
    pub solve_time: Duration,
}

/// A phase flip. `after_frame` is the index of the last frame consumed
/// before the flip took effect; `None` for the initial bootstrap transition
/// that precedes the first frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseTransition {
    pub after_frame: Option<usize>,
    pub from: Phase,
    pub to: Phase,
}

/// Output of [`run_segment_loop`]: per-frame results plus the transition
/// log. The transition log always alternates training, testing, training,
/// ... starting with the bootstrap flip out of the initial training phase.
#[derive(Debug)]
pub struct SegmentLoopOutput {
    pub frames: Vec<FrameResult>,
    pub transitions: Vec<PhaseTransition>,
}

impl SegmentLoopOutput {
    /// Number of retrains that fired (transitions into training).
    pub fn retrain_count(&self) -> usize {
        self.transitions.iter().filter(|t| t.to == Phase::Training).count()
    }
}

/// Drives a frame stream through the full localize → gate → retrain loop.
///
/// The state starts in training as a bootstrap (the initial model is assumed
/// to be ready, so no trainer call happens and no frames are consumed) and
/// immediately transitions to testing. Each testing frame is solved and fed
/// to the gate; when the gate fires, the most recent `buffer_capacity`
/// already-consumed frames (including the triggering one) are handed to the
/// trainer:
///
/// - [`RetrainMode::Synchronous`]: the trainer runs inline and testing
///   resumes on the next frame, so a retrain consumes no stream frames.
/// - [`RetrainMode::Parallel`]: the trainer runs on a scoped thread while
///   the loop keeps consuming frames, emitting unrefined, verdict-less
///   estimates until the trainer finishes.
///
/// A trainer error aborts the loop. Frames consumed before the abort are
/// lost with it; storage-grade streaming is not this function's job.
pub fn run_segment_loop<F, I, T>(
    intrinsics: &CameraIntrinsics,
    frames: I,
    config: &SegmentLoopConfig,
    trainer: &mut T,
) -> Result<SegmentLoopOutput, ConfidenceError>
where
    F: Clone + Sync,
    I: IntoIterator<Item = SegmentFrame<F>>,
    T: TrainerHook<F> + ?Sized,
{
    config.policy.validate()?;
    let mut state = ConfidenceState::new();
    let mut results: Vec<FrameResult> = Vec::new();
    let mut transitions: Vec<PhaseTransition> = Vec::new();
    let mut history: VecDeque<SegmentFrame<F>> = VecDeque::new();
    let mut iter = frames.into_iter();

    // Bootstrap: the initial model exists by assumption, so training ends
    // before any frame is consumed.
    state.complete_training().expect("fresh state starts in training");
    transitions.push(PhaseTransition {
        after_frame: None,
        from: Phase::Training,
        to: Phase::Testing,
    });

    while let Some(frame) = iter.next() {
        let frame_index = frame.index;
        let start = Instant::now();
        let estimate = estimate_pose(intrinsics, &frame.map, &config.ransac);
        let solve_time = start.elapsed();

        history.push_back(frame);
        if history.len() > config.policy.buffer_capacity {
            history.pop_front();
        }

        let observation = match &estimate {
            Ok(est) => FrameObservation::InlierCount(est.inlier_count),
            Err(_) => FrameObservation::SolverFailure,
        };
        let verdict = state.observe(&config.policy, observation)?;
        results.push(FrameResult {
            frame_index,
            estimate,
            verdict: Some(verdict),
            refined: true,
            solve_time,
        });

        if !verdict.triggered_retrain {
            continue;
        }
        transitions.push(PhaseTransition {
            after_frame: Some(frame_index),
            from: Phase::Testing,
            to: Phase::Training,
        });

        let window: Vec<SegmentFrame<F>> = history.iter().cloned().collect();
        let mut last_consumed = frame_index;
        match config.mode {
            RetrainMode::Synchronous => {
                trainer.train(&window).map_err(|e| ConfidenceError::TrainerFailed {
                    after_frame: frame_index,
                    message: e.to_string(),
                })?;
            }
            RetrainMode::Parallel => {
                let trained = std::thread::scope(|scope| {
                    let handle = scope.spawn(|| trainer.train(&window));
                    while !handle.is_finished() {
                        let Some(frame) = iter.next() else { break };
                        last_consumed = frame.index;
                        let start = Instant::now();
                        let estimate = estimate_pose_raw(intrinsics, &frame.map, &config.ransac);
                        let solve_time = start.elapsed();
                        history.push_back(frame);
                        if history.len() > config.policy.buffer_capacity {
                            history.pop_front();
                        }
                        results.push(FrameResult {
                            frame_index: last_consumed,
                            estimate,
                            verdict: None,
                            refined: false,
                            solve_time,
                        });
                    }
                    match handle.join() {
                        Ok(result) => result,
                        Err(panic) => std::panic::resume_unwind(panic),
                    }
                });
                trained.map_err(|e| ConfidenceError::TrainerFailed {
                    after_frame: last_consumed,
                    message: e.to_string(),
                })?;
            }
        }

        state.complete_training().expect("retrain trigger left the state in training");
        transitions.push(PhaseTransition {
            after_frame: Some(last_consumed),
            from: Phase::Training,
            to: Phase::Testing,
        });
    }

    Ok(SegmentLoopOutput { frames: results, transitions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{unproject, PixelPoint, Pose, ScenePoint};
    use crate::rng::root_rng;
    use nalgebra::Vector3;
    use rand::Rng;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    fn policy() -> ConfidencePolicy {
        ConfidencePolicy::default()
    }

    fn testing_state_with(policy: &ConfidencePolicy, buffer: Vec<usize>) -> ConfidenceState {
        ConfidenceState::restore(policy, Phase::Testing, buffer, 0).unwrap()
    }

    #[test]
    fn policy_validation() {
        assert!(policy().validate().is_ok());
        let bad = ConfidencePolicy { warmup_min: 0, ..policy() };
        assert!(bad.validate().is_err());
        let bad = ConfidencePolicy { buffer_capacity: 5, warmup_min: 10, ..policy() };
        assert!(bad.validate().is_err());
        let bad = ConfidencePolicy { uncertain_trigger: 0, ..policy() };
        assert!(bad.validate().is_err());
        let bad = ConfidencePolicy { sigma_multiplier: -1.0, ..policy() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn warmup_frames_are_confident() {
        let policy = policy();
        let mut state = testing_state_with(&policy, vec![]);
        let verdict = state.observe(&policy, FrameObservation::InlierCount(300)).unwrap();
        assert!(verdict.confident);
        assert!(!verdict.triggered_retrain);
        assert!(verdict.mu.is_nan() && verdict.sigma.is_nan());
        assert_eq!(verdict.threshold, f64::NEG_INFINITY);
        assert_eq!(state.buffer().len(), 1);

        // Verdicts during the rest of warmup expose the running statistics.
        let verdict = state.observe(&policy, FrameObservation::InlierCount(2)).unwrap();
        assert!(verdict.confident, "warmup accepts any count");
        assert_eq!(verdict.mu, 300.0);
        assert_eq!(verdict.sigma, 0.0);
        assert_eq!(state.buffer().len(), 2);
    }

    #[test]
    fn solver_failure_is_always_uncertain() {
        let policy = policy();
        // During warmup.
        let mut state = testing_state_with(&policy, vec![]);
        let verdict = state.observe(&policy, FrameObservation::SolverFailure).unwrap();
        assert!(!verdict.confident);
        assert_eq!(state.buffer().len(), 0);
        assert_eq!(state.uncertain_count(), 1);
        // Past warmup, even when the buffer would accept anything finite.
        let mut state = testing_state_with(&policy, vec![300; 50]);
        let verdict = state.observe(&policy, FrameObservation::SolverFailure).unwrap();
        assert!(!verdict.confident);
    }

    #[test]
    fn zero_variance_buffer_gates_at_the_threshold() {
        let policy = policy();
        let mut state = testing_state_with(&policy, vec![300; 50]);
        // 299 is not above 300 - 2*0.
        let verdict = state.observe(&policy, FrameObservation::InlierCount(299)).unwrap();
        assert!(!verdict.confident);
        assert_eq!(verdict.mu, 300.0);
        assert_eq!(verdict.sigma, 0.0);
        assert_eq!(verdict.threshold, 300.0);
        // Exactly 300 ties the threshold and stays confident; a constant
        // stream must never starve its own buffer.
        let verdict = state.observe(&policy, FrameObservation::InlierCount(300)).unwrap();
        assert!(verdict.confident);
        // 301 clears it outright.
        let verdict = state.observe(&policy, FrameObservation::InlierCount(301)).unwrap();
        assert!(verdict.confident);
    }

    #[test]
    fn confident_counts_evict_fifo() {
        let policy = ConfidencePolicy { buffer_capacity: 12, warmup_min: 3, ..policy() };
        let mut state = testing_state_with(&policy, vec![]);
        // Alternating counts keep the variance positive so the stream stays
        // confident indefinitely.
        for i in 0..40 {
            let count = if i % 2 == 0 { 295 } else { 305 };
            let verdict = state.observe(&policy, FrameObservation::InlierCount(count)).unwrap();
            assert!(verdict.confident, "frame {i} should be confident");
            assert!(state.buffer().len() <= 12);
        }
        assert_eq!(state.buffer().len(), 12);
        // The buffer holds the 12 most recent counts: frames 28..39.
        let expected: Vec<usize> =
            (28..40).map(|i| if i % 2 == 0 { 295 } else { 305 }).collect();
        assert_eq!(state.buffer().iter().copied().collect::<Vec<_>>(), expected);
    }

    #[test]
    fn retrain_fires_past_the_trigger() {
        let policy = policy();
        let mut state = testing_state_with(&policy, vec![300; 50]);
        for i in 1..=20 {
            let verdict = state.observe(&policy, FrameObservation::InlierCount(40)).unwrap();
            assert!(!verdict.confident);
            assert!(!verdict.triggered_retrain, "frame {i} must not trigger yet");
            assert_eq!(state.uncertain_count(), i);
        }
        // The 21st uncertain frame exceeds the trigger of 20.
        let verdict = state.observe(&policy, FrameObservation::InlierCount(40)).unwrap();
        assert!(verdict.triggered_retrain);
        assert_eq!(state.phase(), Phase::Training);
        assert_eq!(state.uncertain_count(), 0);

        // The phase guard now rejects observations...
        assert!(matches!(
            state.observe(&policy, FrameObservation::InlierCount(300)),
            Err(ConfidenceError::WrongPhase { .. })
        ));
        // ...until training completes, which clears the buffer.
        state.complete_training().unwrap();
        assert_eq!(state.phase(), Phase::Testing);
        assert!(state.buffer().is_empty());
        assert!(matches!(
            state.complete_training(),
            Err(ConfidenceError::WrongPhase { .. })
        ));
    }

    #[test]
    fn cumulative_counts_survive_confident_frames() {
        let base =
            ConfidencePolicy { uncertain_trigger: 3, ..policy() };
        let sequence = [40usize, 40, 400, 40, 40]; // 4 uncertain, 1 confident

        let mut cumulative = testing_state_with(&base, vec![300; 50]);
        let mut fired = false;
        for &count in &sequence {
            fired |= cumulative
                .observe(&base, FrameObservation::InlierCount(count))
                .unwrap()
                .triggered_retrain;
        }
        assert!(fired, "cumulative counting must reach the trigger");

        let consecutive_policy =
            ConfidencePolicy { trigger_mode: TriggerMode::Consecutive, ..base };
        let mut consecutive = testing_state_with(&consecutive_policy, vec![300; 50]);
        let mut fired = false;
        for &count in &sequence {
            fired |= consecutive
                .observe(&consecutive_policy, FrameObservation::InlierCount(count))
                .unwrap()
                .triggered_retrain;
        }
        assert!(!fired, "the confident frame must reset a consecutive count");
    }

    #[test]
    fn thresholds_match_shadow_statistics() {
        let policy = ConfidencePolicy { buffer_capacity: 20, warmup_min: 5, ..policy() };
        let mut state = testing_state_with(&policy, vec![]);
        let mut shadow: Vec<usize> = Vec::new();
        let mut rng = root_rng(53);
        for _ in 0..500 {
            let count = rng.gen_range(0..=400usize);
            let verdict = match state.observe(&policy, FrameObservation::InlierCount(count)) {
                Ok(v) => v,
                Err(_) => {
                    // A retrain fired on the previous frame.
                    state.complete_training().unwrap();
                    shadow.clear();
                    continue;
                }
            };
            if shadow.len() >= policy.warmup_min {
                let mu = shadow.iter().map(|&c| c as f64).sum::<f64>() / shadow.len() as f64;
                let var = shadow.iter().map(|&c| (c as f64 - mu).powi(2)).sum::<f64>()
                    / shadow.len() as f64;
                let threshold = mu - policy.sigma_multiplier * var.sqrt();
                assert!((verdict.threshold - threshold).abs() < 1e-12);
                assert_eq!(verdict.confident, count as f64 > threshold);
            } else {
                assert!(verdict.confident);
            }
            if verdict.confident {
                shadow.push(count);
                if shadow.len() > policy.buffer_capacity {
                    shadow.remove(0);
                }
            }
            if verdict.triggered_retrain {
                state.complete_training().unwrap();
                shadow.clear();
            }
            // Buffer purity: the buffer must equal the shadow copy built
            // exclusively from confident counts.
            assert_eq!(state.buffer().iter().copied().collect::<Vec<_>>(), shadow);
        }
    }

    // ---- segment-loop tests ----------------------------------------------

    fn camera() -> CameraIntrinsics {
        CameraIntrinsics::new(240.0, 240.0, 160.0, 120.0, 320, 240).unwrap()
    }

    /// A noise-free synthetic map with exactly `corrupt` cells pushed far off
    /// (never inliers) and the rest exact, so the inlier count is
    /// `cells - corrupt` deterministically; `valid_cells` restricts the grid.
    fn controlled_map<R: Rng>(
        k: &CameraIntrinsics,
        pose: &Pose,
        corrupt: usize,
        valid_cells: Option<usize>,
        rng: &mut R,
    ) -> ScenePointMap {
        let (rows, cols, stride) = (16u32, 20u32, 12u32);
        let origin = PixelPoint::new(6.0, 6.0);
        let cells = (rows * cols) as usize;
        let mut points = Vec::with_capacity(cells);
        let mut valid = vec![true; cells];
        for r in 0..rows {
            for c in 0..cols {
                let px = PixelPoint::new(
                    origin.u + (c * stride) as f64,
                    origin.v + (r * stride) as f64,
                );
                let depth = 15.0 + 5.0 * ((px.u / 83.0).sin() * (px.v / 47.0).cos());
                points.push(unproject(k, pose, &px, depth).unwrap());
            }
        }
        if let Some(keep) = valid_cells {
            valid[keep..cells].fill(false);
        }
        let mut corrupted = 0;
        while corrupted < corrupt {
            let cell = rng.gen_range(0..cells);
            if valid[cell] && points[cell].x < 500.0 {
                points[cell] = ScenePoint::new(points[cell].x + 1000.0, points[cell].y, points[cell].z);
                corrupted += 1;
            }
        }
        ScenePointMap::new(rows, cols, stride, origin, points, valid).unwrap()
    }

    /// High frames alternate 305/295 inliers (alternation keeps the buffer
    /// variance positive so a steady stream stays confident); low frames
    /// score 40.
    fn scripted_frames(high_a: usize, low: usize, high_b: usize) -> (CameraIntrinsics, Vec<SegmentFrame<()>>) {
        let k = camera();
        let mut rng = root_rng(59);
        let mut frames = Vec::new();
        let push = |frames: &mut Vec<SegmentFrame<()>>, rng: &mut rand_chacha::ChaCha8Rng, is_high: bool| {
            let index = frames.len();
            let pose = Pose::from_axis_angle(
                Vector3::new(0.1, 1.0, 0.2),
                0.001 * index as f64,
                Vector3::new(0.0, 0.0, 0.1 * index as f64),
            );
            let map = if is_high {
                let corrupt = if index.is_multiple_of(2) { 15 } else { 25 };
                controlled_map(&k, &pose, corrupt, None, rng)
            } else {
                controlled_map(&k, &pose, 0, Some(40), rng)
            };
            frames.push(SegmentFrame { index, map, payload: () });
        };
        for _ in 0..high_a {
            push(&mut frames, &mut rng, true);
        }
        for _ in 0..low {
            push(&mut frames, &mut rng, false);
        }
        for _ in 0..high_b {
            push(&mut frames, &mut rng, true);
        }
        (k, frames)
    }

    #[test]
    fn scripted_drop_triggers_exactly_one_retrain() {
        let (k, frames) = scripted_frames(100, 25, 100);
        let config = SegmentLoopConfig::default();
        let windows: Mutex<Vec<Vec<usize>>> = Mutex::new(Vec::new());
        let mut trainer = |window: &[SegmentFrame<()>]| -> Result<(), TrainerError> {
            windows.lock().unwrap().push(window.iter().map(|f| f.index).collect());
            Ok(())
        };
        let output = run_segment_loop(&k, frames, &config, &mut trainer).unwrap();

        assert_eq!(output.frames.len(), 225);
        assert_eq!(output.retrain_count(), 1);
        assert_eq!(output.transitions.len(), 3);
        assert_eq!(
            output.transitions[0],
            PhaseTransition { after_frame: None, from: Phase::Training, to: Phase::Testing }
        );
        // Lows start at index 100; the drop is cumulative, so the 21st low
        // frame (index 120) fires the trigger, within the first 25.
        let trigger = output.transitions[1];
        assert_eq!(trigger.to, Phase::Training);
        assert_eq!(trigger.after_frame, Some(120));
        // Synchronous retrains consume no frames.
        assert_eq!(
            output.transitions[2],
            PhaseTransition {
                after_frame: Some(120),
                from: Phase::Training,
                to: Phase::Testing
            }
        );

        // The trainer saw the 50 frames up to and including the trigger.
        let windows = windows.into_inner().unwrap();
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0], (71..=120).collect::<Vec<_>>());

        // Every frame solved and carries a verdict; the scripted counts come
        // through exactly.
        for result in &output.frames {
            let estimate = result.estimate.as_ref().expect("all scripted frames solve");
            let verdict = result.verdict.expect("synchronous mode always gates");
            assert!(result.refined);
            let expected = match result.frame_index {
                i if !(100..125).contains(&i) => {
                    if i % 2 == 0 {
                        305
                    } else {
                        295
                    }
                }
                _ => 40,
            };
            assert_eq!(estimate.inlier_count, expected, "frame {}", result.frame_index);
            if result.frame_index < 100 {
                assert!(verdict.confident);
            }
        }
    }

    #[test]
    fn steady_stream_never_retrains() {
        let (k, frames) = scripted_frames(60, 0, 0);
        let config = SegmentLoopConfig::default();
        let calls = AtomicUsize::new(0);
        let mut trainer = |_: &[SegmentFrame<()>]| -> Result<(), TrainerError> {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(())
        };
        let output = run_segment_loop(&k, frames, &config, &mut trainer).unwrap();
        assert_eq!(output.retrain_count(), 0);
        assert_eq!(output.transitions.len(), 1);
        assert_eq!(calls.load(Ordering::SeqCst), 0);
        assert!(output.frames.iter().all(|f| f.verdict.is_some_and(|v| v.confident)));
    }

    #[test]
    fn parallel_retrain_keeps_emitting_unrefined_estimates() {
        let (k, frames) = scripted_frames(40, 25, 200);
        let policy = ConfidencePolicy { buffer_capacity: 30, ..policy() };
        let config = SegmentLoopConfig {
            policy,
            ransac: RansacConfig::default(),
            mode: RetrainMode::Parallel,
        };
        let windows: Mutex<Vec<usize>> = Mutex::new(Vec::new());
        let mut trainer = |window: &[SegmentFrame<()>]| -> Result<(), TrainerError> {
            windows.lock().unwrap().extend(window.iter().map(|f| f.index));
            std::thread::sleep(Duration::from_millis(30));
            Ok(())
        };
        let output = run_segment_loop(&k, frames, &config, &mut trainer).unwrap();

        assert_eq!(output.retrain_count(), 1);
        assert_eq!(output.frames.len(), 265);
        let trigger_at = output.transitions[1].after_frame.unwrap();
        assert_eq!(trigger_at, 60, "lows start at 40; the 21st low is frame 60");
        assert_eq!(windows.lock().unwrap().len(), 30);

        // The frames consumed during training form a contiguous, verdict-less
        // unrefined block right after the trigger.
        let unrefined: Vec<usize> = output
            .frames
            .iter()
            .filter(|f| f.verdict.is_none())
            .map(|f| f.frame_index)
            .collect();
        assert!(!unrefined.is_empty(), "a 30 ms retrain must overlap some frames");
        let first = *unrefined.first().unwrap();
        let last = *unrefined.last().unwrap();
        assert_eq!(first, trigger_at + 1);
        assert_eq!(unrefined, (first..=last).collect::<Vec<_>>());
        for frame in &output.frames {
            assert_eq!(frame.verdict.is_none(), !frame.refined);
        }
        // Testing resumed right after the block.
        assert_eq!(output.transitions[2].after_frame, Some(last));
        assert_eq!(output.transitions[2].to, Phase::Testing);
    }

    #[test]
    fn trainer_failure_is_terminal() {
        let (k, frames) = scripted_frames(40, 25, 10);
        let config = SegmentLoopConfig::default();
        let mut trainer = |_: &[SegmentFrame<()>]| -> Result<(), TrainerError> {
            Err("adapter diverged".into())
        };
        let err = run_segment_loop(&k, frames, &config, &mut trainer).unwrap_err();
        match err {
            ConfidenceError::TrainerFailed { after_frame, message } => {
                assert_eq!(after_frame, 60);
                assert!(message.contains("adapter diverged"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn restore_enforces_capacity() {
        let policy = policy();
        assert!(ConfidenceState::restore(&policy, Phase::Testing, vec![1; 51], 0).is_err());
        let state = ConfidenceState::restore(&policy, Phase::Testing, vec![1; 50], 3).unwrap();
        assert_eq!(state.uncertain_count(), 3);
    }
}
