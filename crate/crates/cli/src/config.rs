//! Flat key=value run configuration.
//!
//! Every tunable the library exposes is reachable through one flat, dotted
//! key (`camera.fx`, `ransac.max_iterations`, `simulator.tint`, ...). A
//! config file holds one `key = value` pair per line, with `#` comments and
//! blank lines ignored. `--set key=value` flags override file values, and
//! the `--seed` shorthand overrides `seed` last. Unknown keys are rejected
//! with the offending file line.
//!
//! Values parse strictly: numbers as decimal literals, booleans as
//! `true`/`false`, pairs and triples as comma-separated lists (`40,70`),
//! and list-valued keys (`simulator.route`, `noise.drift_schedule`) accept
//! an empty value for "none". [`RunConfig::to_pairs`] renders the effective
//! configuration in canonical key order using round-trip-exact float
//! formatting, so a dumped config reloads to an identical `RunConfig`.

use crate::error::{usage_of, CliError};
use luminav_core::augment::{ColorJitterConfig, DdaugConfig, MixupConfig};
use luminav_core::confidence::{ConfidencePolicy, TriggerMode};
use luminav_core::geometry::{CameraIntrinsics, PerturbationConfig, ScenePoint};
use luminav_core::retrieval::DEFAULT_DESCRIPTOR_DIM;
use luminav_core::sim::{
    default_camera, LumenConfig, PoseEmbedder, PredictorNoiseModel, RenderConfig,
    DEFAULT_EMBEDDER_SEED, DESCRIPTOR_NOISE_SIGMA,
};
use luminav_core::solver::RansacConfig;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

/// Camera parameters as plain numbers; [`CameraSettings::build`] runs the
/// library validation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraSettings {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraSettings {
    fn default() -> Self {
        let k = default_camera();
        Self { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy, width: k.width, height: k.height }
    }
}

impl CameraSettings {
    pub fn build(&self) -> Result<CameraIntrinsics, CliError> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            .map_err(usage_of)
    }
}

/// Place-recognition settings: descriptor geometry and the retrieval window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalSettings {
    pub descriptor_dim: usize,
    pub descriptor_noise: f64,
    pub embedder_seed: u64,
    /// Window parameter: the virtual buffer spans `range + 1` database
    /// entries.
    pub range: usize,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        Self {
            descriptor_dim: DEFAULT_DESCRIPTOR_DIM,
            descriptor_noise: DESCRIPTOR_NOISE_SIGMA,
            embedder_seed: DEFAULT_EMBEDDER_SEED,
            range: 100,
        }
    }
}

impl RetrievalSettings {
    pub fn build_embedder(&self) -> Result<PoseEmbedder, CliError> {
        PoseEmbedder::new(self.embedder_seed, self.descriptor_dim, self.descriptor_noise)
            .map_err(usage_of)
    }
}

/// Augmentation stages as plain toggles and ranges;
/// [`AugmentationSettings::build`] assembles the stage pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationSettings {
    pub jitter_enabled: bool,
    pub brightness_range: (f64, f64),
    pub contrast_range: (f64, f64),
    pub saturation_range: (f64, f64),
    pub mixup_enabled: bool,
    pub lambda_range: (f64, f64),
    pub octaves: u32,
    pub warp_enabled: bool,
    pub angle_range: f64,
    pub intrinsic_scale_range: f64,
}

impl Default for AugmentationSettings {
    fn default() -> Self {
        let jitter = ColorJitterConfig::default();
        let mixup = MixupConfig::default();
        let warp = PerturbationConfig::default();
        Self {
            jitter_enabled: true,
            brightness_range: jitter.brightness_range,
            contrast_range: jitter.contrast_range,
            saturation_range: jitter.saturation_range,
            mixup_enabled: true,
            lambda_range: mixup.lambda_range,
            octaves: mixup.octaves,
            warp_enabled: true,
            angle_range: warp.angle_range,
            intrinsic_scale_range: warp.intrinsic_scale_range,
        }
    }
}

impl AugmentationSettings {
    pub fn build(&self) -> DdaugConfig {
        DdaugConfig {
            jitter: self.jitter_enabled.then_some(ColorJitterConfig {
                brightness_range: self.brightness_range,
                contrast_range: self.contrast_range,
                saturation_range: self.saturation_range,
            }),
            mixup: self.mixup_enabled.then_some(MixupConfig {
                lambda_range: self.lambda_range,
                octaves: self.octaves,
            }),
            warp: self.warp_enabled.then_some(PerturbationConfig {
                angle_range: self.angle_range,
                intrinsic_scale_range: self.intrinsic_scale_range,
            }),
        }
    }
}

/// Synthetic-dataset settings: lumen shape, rendering, route, and sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatorSettings {
    pub lumen: LumenConfig,
    pub render: RenderConfig,
    /// Branch choice per junction along the planned path; empty means
    /// "always take the first child" down to a leaf.
    pub route: Vec<usize>,
    pub frames_per_mm: f64,
    pub fps: f64,
}

impl Default for SimulatorSettings {
    fn default() -> Self {
        Self {
            lumen: LumenConfig::default(),
            render: RenderConfig::default(),
            route: Vec::new(),
            frames_per_mm: 1.5,
            fps: 25.0,
        }
    }
}

impl SimulatorSettings {
    /// The configured route, or first-child choices down to a leaf.
    pub fn effective_route(&self) -> Vec<usize> {
        if self.route.is_empty() {
            vec![0; self.lumen.generations.saturating_sub(1) as usize]
        } else {
            self.route.clone()
        }
    }
}

/// The complete effective configuration of a run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub seed: u64,
    pub camera: CameraSettings,
    pub ransac: RansacConfig,
    pub confidence: ConfidencePolicy,
    pub retrieval: RetrievalSettings,
    pub noise: PredictorNoiseModel,
    pub augmentation: AugmentationSettings,
    pub simulator: SimulatorSettings,
}

fn parse_scalar<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| CliError::usage(format!("config key {key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(CliError::usage(format!(
            "config key {key}: expected true or false, got {other:?}"
        ))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    let trimmed = value.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed.split(',').map(|part| parse_scalar(key, part)).collect()
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64), CliError> {
    let items: Vec<f64> = parse_list(key, value)?;
    match items.as_slice() {
        [a, b] => Ok((*a, *b)),
        other => Err(CliError::usage(format!(
            "config key {key}: expected two comma-separated numbers, got {}",
            other.len()
        ))),
    }
}

fn parse_triple(key: &str, value: &str) -> Result<[f64; 3], CliError> {
    let items: Vec<f64> = parse_list(key, value)?;
    match items.as_slice() {
        [a, b, c] => Ok([*a, *b, *c]),
        other => Err(CliError::usage(format!(
            "config key {key}: expected three comma-separated numbers, got {}",
            other.len()
        ))),
    }
}

fn format_pair(pair: (f64, f64)) -> String {
    format!("{},{}", pair.0, pair.1)
}

fn format_list<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Sets one key. Unknown keys and unparsable values are usage errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "seed" => self.seed = parse_scalar(key, value)?,

            "camera.fx" => self.camera.fx = parse_scalar(key, value)?,
            "camera.fy" => self.camera.fy = parse_scalar(key, value)?,
            "camera.cx" => self.camera.cx = parse_scalar(key, value)?,
            "camera.cy" => self.camera.cy = parse_scalar(key, value)?,
            "camera.width" => self.camera.width = parse_scalar(key, value)?,
            "camera.height" => self.camera.height = parse_scalar(key, value)?,

            "ransac.inlier_threshold" => self.ransac.inlier_threshold = parse_scalar(key, value)?,
            "ransac.max_iterations" => self.ransac.max_iterations = parse_scalar(key, value)?,
            "ransac.confidence_stop" => self.ransac.confidence_stop = parse_scalar(key, value)?,
            "ransac.seed" => self.ransac.seed = parse_scalar(key, value)?,

            "confidence.buffer_capacity" => {
                self.confidence.buffer_capacity = parse_scalar(key, value)?
            }
            "confidence.sigma_multiplier" => {
                self.confidence.sigma_multiplier = parse_scalar(key, value)?
            }
            "confidence.uncertain_trigger" => {
                self.confidence.uncertain_trigger = parse_scalar(key, value)?
            }
            "confidence.warmup_min" => self.confidence.warmup_min = parse_scalar(key, value)?,
            "confidence.trigger_mode" => {
                self.confidence.trigger_mode = match value.trim() {
                    "cumulative" => TriggerMode::Cumulative,
                    "consecutive" => TriggerMode::Consecutive,
                    other => {
                        return Err(CliError::usage(format!(
                            "config key {key}: expected cumulative or consecutive, got {other:?}"
                        )))
                    }
                }
            }

            "retrieval.descriptor_dim" => {
                self.retrieval.descriptor_dim = parse_scalar(key, value)?
            }
            "retrieval.descriptor_noise" => {
                self.retrieval.descriptor_noise = parse_scalar(key, value)?
            }
            "retrieval.embedder_seed" => self.retrieval.embedder_seed = parse_scalar(key, value)?,
            "retrieval.range" => self.retrieval.range = parse_scalar(key, value)?,

            "noise.gaussian_sigma" => self.noise.gaussian_sigma = parse_scalar(key, value)?,
            "noise.outlier_fraction" => self.noise.outlier_fraction = parse_scalar(key, value)?,
            "noise.outlier_min" => {
                let [x, y, z] = parse_triple(key, value)?;
                self.noise.outlier_min = ScenePoint::new(x, y, z);
            }
            "noise.outlier_max" => {
                let [x, y, z] = parse_triple(key, value)?;
                self.noise.outlier_max = ScenePoint::new(x, y, z);
            }
            "noise.drift_schedule" => {
                let schedule: Vec<f64> = parse_list(key, value)?;
                self.noise.drift_schedule = if schedule.is_empty() { None } else { Some(schedule) };
            }

            "augmentation.jitter.enabled" => {
                self.augmentation.jitter_enabled = parse_bool(key, value)?
            }
            "augmentation.jitter.brightness" => {
                self.augmentation.brightness_range = parse_pair(key, value)?
            }
            "augmentation.jitter.contrast" => {
                self.augmentation.contrast_range = parse_pair(key, value)?
            }
            "augmentation.jitter.saturation" => {
                self.augmentation.saturation_range = parse_pair(key, value)?
            }
            "augmentation.mixup.enabled" => {
                self.augmentation.mixup_enabled = parse_bool(key, value)?
            }
            "augmentation.mixup.lambda" => self.augmentation.lambda_range = parse_pair(key, value)?,
            "augmentation.mixup.octaves" => self.augmentation.octaves = parse_scalar(key, value)?,
            "augmentation.warp.enabled" => {
                self.augmentation.warp_enabled = parse_bool(key, value)?
            }
            "augmentation.warp.angle" => self.augmentation.angle_range = parse_scalar(key, value)?,
            "augmentation.warp.intrinsic_scale" => {
                self.augmentation.intrinsic_scale_range = parse_scalar(key, value)?
            }

            "simulator.generations" => self.simulator.lumen.generations = parse_scalar(key, value)?,
            "simulator.segment_length" => {
                self.simulator.lumen.segment_length_range = parse_pair(key, value)?
            }
            "simulator.branch_angle" => {
                self.simulator.lumen.branch_angle_range = parse_pair(key, value)?
            }
            "simulator.root_radius" => self.simulator.lumen.root_radius = parse_scalar(key, value)?,
            "simulator.radius_taper" => {
                self.simulator.lumen.radius_taper = parse_scalar(key, value)?
            }
            "simulator.bend_per_step" => {
                self.simulator.lumen.bend_per_step = parse_scalar(key, value)?
            }
            "simulator.steps_per_segment" => {
                self.simulator.lumen.steps_per_segment = parse_scalar(key, value)?
            }
            "simulator.ring_frequency" => {
                self.simulator.lumen.texture.ring_frequency = parse_scalar(key, value)?
            }
            "simulator.mottle_amplitude" => {
                self.simulator.lumen.texture.mottle_amplitude = parse_scalar(key, value)?
            }
            "simulator.stride" => self.simulator.render.stride = parse_scalar(key, value)?,
            "simulator.shading_falloff" => {
                self.simulator.render.shading_falloff = parse_scalar(key, value)?
            }
            "simulator.tint" => self.simulator.render.tint = parse_triple(key, value)?,
            "simulator.route" => self.simulator.route = parse_list(key, value)?,
            "simulator.frames_per_mm" => self.simulator.frames_per_mm = parse_scalar(key, value)?,
            "simulator.fps" => self.simulator.fps = parse_scalar(key, value)?,

            other => return Err(CliError::usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Loads `key = value` lines from a file over the current values.
    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        for (number, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::usage(format!(
                    "{} line {}: expected key = value, got {line:?}",
                    path.display(),
                    number + 1
                ))
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| {
                CliError::usage(format!("{} line {}: {e}", path.display(), number + 1))
            })?;
        }
        Ok(())
    }

    /// Applies `--set key=value` overrides in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                CliError::usage(format!("--set expects key=value, got {item:?}"))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Every key with its effective value, in canonical order. Floats render
    /// with round-trip-exact formatting, so `to_pairs` output reloads to an
    /// identical configuration.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut pairs: Vec<(String, String)> = Vec::with_capacity(50);
        let mut push = |key: &str, value: String| pairs.push((key.to_owned(), value));

        push("seed", self.seed.to_string());

        push("camera.fx", self.camera.fx.to_string());
        push("camera.fy", self.camera.fy.to_string());
        push("camera.cx", self.camera.cx.to_string());
        push("camera.cy", self.camera.cy.to_string());
        push("camera.width", self.camera.width.to_string());
        push("camera.height", self.camera.height.to_string());

        push("ransac.inlier_threshold", self.ransac.inlier_threshold.to_string());
        push("ransac.max_iterations", self.ransac.max_iterations.to_string());
        push("ransac.confidence_stop", self.ransac.confidence_stop.to_string());
        push("ransac.seed", self.ransac.seed.to_string());

        push("confidence.buffer_capacity", self.confidence.buffer_capacity.to_string());
        push("confidence.sigma_multiplier", self.confidence.sigma_multiplier.to_string());
        push("confidence.uncertain_trigger", self.confidence.uncertain_trigger.to_string());
        push("confidence.warmup_min", self.confidence.warmup_min.to_string());
        push(
            "confidence.trigger_mode",
            match self.confidence.trigger_mode {
                TriggerMode::Cumulative => "cumulative".to_owned(),
                TriggerMode::Consecutive => "consecutive".to_owned(),
            },
        );

        push("retrieval.descriptor_dim", self.retrieval.descriptor_dim.to_string());
        push("retrieval.descriptor_noise", self.retrieval.descriptor_noise.to_string());
        push("retrieval.embedder_seed", self.retrieval.embedder_seed.to_string());
        push("retrieval.range", self.retrieval.range.to_string());

        push("noise.gaussian_sigma", self.noise.gaussian_sigma.to_string());
        push("noise.outlier_fraction", self.noise.outlier_fraction.to_string());
        let min = &self.noise.outlier_min;
        push("noise.outlier_min", format!("{},{},{}", min.x, min.y, min.z));
        let max = &self.noise.outlier_max;
        push("noise.outlier_max", format!("{},{},{}", max.x, max.y, max.z));
        push(
            "noise.drift_schedule",
            self.noise.drift_schedule.as_deref().map(format_list).unwrap_or_default(),
        );

        push("augmentation.jitter.enabled", self.augmentation.jitter_enabled.to_string());
        push("augmentation.jitter.brightness", format_pair(self.augmentation.brightness_range));
        push("augmentation.jitter.contrast", format_pair(self.augmentation.contrast_range));
        push("augmentation.jitter.saturation", format_pair(self.augmentation.saturation_range));
        push("augmentation.mixup.enabled", self.augmentation.mixup_enabled.to_string());
        push("augmentation.mixup.lambda", format_pair(self.augmentation.lambda_range));
        push("augmentation.mixup.octaves", self.augmentation.octaves.to_string());
        push("augmentation.warp.enabled", self.augmentation.warp_enabled.to_string());
        push("augmentation.warp.angle", self.augmentation.angle_range.to_string());
        push(
            "augmentation.warp.intrinsic_scale",
            self.augmentation.intrinsic_scale_range.to_string(),
        );

        push("simulator.generations", self.simulator.lumen.generations.to_string());
        push("simulator.segment_length", format_pair(self.simulator.lumen.segment_length_range));
        push("simulator.branch_angle", format_pair(self.simulator.lumen.branch_angle_range));
        push("simulator.root_radius", self.simulator.lumen.root_radius.to_string());
        push("simulator.radius_taper", self.simulator.lumen.radius_taper.to_string());
        push("simulator.bend_per_step", self.simulator.lumen.bend_per_step.to_string());
        push("simulator.steps_per_segment", self.simulator.lumen.steps_per_segment.to_string());
        push("simulator.ring_frequency", self.simulator.lumen.texture.ring_frequency.to_string());
        push(
            "simulator.mottle_amplitude",
            self.simulator.lumen.texture.mottle_amplitude.to_string(),
        );
        push("simulator.stride", self.simulator.render.stride.to_string());
        push("simulator.shading_falloff", self.simulator.render.shading_falloff.to_string());
        let tint = self.simulator.render.tint;
        push("simulator.tint", format!("{},{},{}", tint[0], tint[1], tint[2]));
        push("simulator.route", format_list(&self.simulator.route));
        push("simulator.frames_per_mm", self.simulator.frames_per_mm.to_string());
        push("simulator.fps", self.simulator.fps.to_string());

        pairs
    }

    /// Renders the effective configuration as reloadable `key = value` lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (key, value) in self.to_pairs() {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_library_defaults() {
        let config = RunConfig::default();
        assert_eq!(config.camera.width, 320);
        assert_eq!(config.camera.height, 240);
        assert_eq!(config.ransac, RansacConfig::default());
        assert_eq!(config.confidence, ConfidencePolicy::default());
        assert_eq!(config.retrieval.descriptor_dim, DEFAULT_DESCRIPTOR_DIM);
        assert_eq!(config.noise, PredictorNoiseModel::default());
        assert_eq!(config.augmentation.build(), DdaugConfig::default());
        assert_eq!(config.simulator.lumen, LumenConfig::default());
        assert_eq!(config.simulator.render, RenderConfig::default());
    }

    #[test]
    fn every_key_round_trips_through_render() {
        let mut config = RunConfig::default();
        // Touch a representative of every value shape.
        config.set("seed", "42").unwrap();
        config.set("camera.fx", "123.5").unwrap();
        config.set("ransac.max_iterations", "777").unwrap();
        config.set("confidence.trigger_mode", "consecutive").unwrap();
        config.set("noise.outlier_min", "-1.5,2,3").unwrap();
        config.set("noise.drift_schedule", "1,1.25,2.5").unwrap();
        config.set("augmentation.mixup.enabled", "false").unwrap();
        config.set("augmentation.jitter.brightness", "0.9,1.1").unwrap();
        config.set("simulator.route", "0,1,0").unwrap();
        config.set("simulator.tint", "0.25,0.5,0.75").unwrap();

        let rendered = config.render();
        let mut reloaded = RunConfig::default();
        for line in rendered.lines() {
            let (key, value) = line.split_once('=').unwrap();
            reloaded.set(key.trim(), value.trim()).unwrap();
        }
        assert_eq!(reloaded, config);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_usage_errors() {
        let mut config = RunConfig::default();
        let unknown = config.set("camera.zoom", "2").unwrap_err();
        assert_eq!(unknown.exit_code(), crate::error::EXIT_USAGE);
        assert!(unknown.to_string().contains("camera.zoom"));

        let bad = config.set("camera.fx", "fast").unwrap_err();
        assert!(bad.to_string().contains("camera.fx"));

        let short = config.set("simulator.tint", "1,2").unwrap_err();
        assert!(short.to_string().contains("three"));
    }

    #[test]
    fn empty_list_values_mean_none() {
        let mut config = RunConfig::default();
        config.set("noise.drift_schedule", "1,2").unwrap();
        config.set("noise.drift_schedule", "").unwrap();
        assert_eq!(config.noise.drift_schedule, None);
        assert!(config.simulator.route.is_empty());
        assert_eq!(config.simulator.effective_route(), vec![0, 0]);
        config.set("simulator.route", "1").unwrap();
        assert_eq!(config.simulator.effective_route(), vec![1]);
    }

    #[test]
    fn file_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "# comment\nseed = 9\n\ncamera.fx 150\n").unwrap();
        let mut config = RunConfig::default();
        let error = config.load_file(&path).unwrap_err();
        assert!(error.to_string().contains("line 4"), "{error}");

        std::fs::write(&path, "seed = 9\nwat = 1\n").unwrap();
        let error = config.load_file(&path).unwrap_err();
        assert!(error.to_string().contains("line 2"), "{error}");
        assert!(error.to_string().contains("wat"), "{error}");

        std::fs::write(&path, "seed = 11\ncamera.width = 100\n").unwrap();
        config.load_file(&path).unwrap();
        assert_eq!(config.seed, 11);
        assert_eq!(config.camera.width, 100);
    }
}
