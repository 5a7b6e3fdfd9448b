//! Depth-driven appearance augmentation.
//!
//! Three stages, applied in a fixed order by [`ddaug`]:
//!
//! 1. [`color_jitter`] — random brightness / contrast / saturation scaling,
//! 2. [`noise_mixup`] — convex blending with a procedural [`fractal_noise`]
//!    image,
//! 3. [`perturbation_warp`] — depth-aware reprojection of the image under a
//!    sampled rotation + calibration perturbation (forward splatting with a
//!    z-buffer and bounded hole filling).
//!
//! Every sampled parameter is captured in an [`AugmentationRecord`] so a
//! consumer can reproduce the augmented/original pairing exactly.

use crate::geometry::{
    perturb_pixel_with_depth, sample_perturbation, CameraIntrinsics, PerturbationConfig,
    PixelPoint, Pose,
};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("channel count must be 1 or 3, got {0}")]
    InvalidChannels(u32),
    #[error("buffer holds {len} values but {width}x{height}x{channels} needs {expected}")]
    BufferSizeMismatch { len: usize, width: u32, height: u32, channels: u32, expected: usize },
    #[error("pixel value {value} at index {index} is outside [0,1]")]
    PixelOutOfRange { index: usize, value: f32 },
    #[error("image shapes differ: {aw}x{ah}x{ac} vs {bw}x{bh}x{bc}")]
    ShapeMismatch { aw: u32, ah: u32, ac: u32, bw: u32, bh: u32, bc: u32 },
    #[error("depth map is {dw}x{dh} but the image is {iw}x{ih}")]
    DepthSizeMismatch { dw: u32, dh: u32, iw: u32, ih: u32 },
    #[error("valid depth at index {index} must be positive and finite, got {value}")]
    InvalidDepth { index: usize, value: f32 },
    #[error("image is {iw}x{ih} but the camera expects {cw}x{ch}")]
    CameraSizeMismatch { iw: u32, ih: u32, cw: u32, ch: u32 },
    #[error("blend factor must lie in [0,1], got {0}")]
    InvalidBlendFactor(f64),
    #[error("channel broadcast requires a single-channel source, got {0} channels")]
    BroadcastFromMultiChannel(u32),
}

/// A row-major, channel-interleaved raster with values in `[0,1]`.
///
/// Grayscale (1 channel) or RGB (3 channels). The range invariant is checked
/// on construction and maintained by every operation in this module.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: u32,
    height: u32,
    channels: u32,
    values: Vec<f32>,
}

impl Image {
    pub fn new(width: u32, height: u32, channels: u32, values: Vec<f32>) -> Result<Self, AugmentError> {
        if channels != 1 && channels != 3 {
            return Err(AugmentError::InvalidChannels(channels));
        }
        let expected = width as usize * height as usize * channels as usize;
        if values.len() != expected {
            return Err(AugmentError::BufferSizeMismatch {
                len: values.len(),
                width,
                height,
                channels,
                expected,
            });
        }
        for (index, &value) in values.iter().enumerate() {
            if !(value.is_finite() && (0.0..=1.0).contains(&value)) {
                return Err(AugmentError::PixelOutOfRange { index, value });
            }
        }
        Ok(Self { width, height, channels, values })
    }

    /// A constant-valued image.
    pub fn constant(width: u32, height: u32, channels: u32, value: f32) -> Result<Self, AugmentError> {
        let n = width as usize * height as usize * channels as usize;
        Self::new(width, height, channels, vec![value; n])
    }

    /// Internal constructor for buffers already known to satisfy the range
    /// invariant.
    fn from_checked(width: u32, height: u32, channels: u32, values: Vec<f32>) -> Self {
        debug_assert!(values.len() == width as usize * height as usize * channels as usize);
        debug_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        Self { width, height, channels, values }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u32 {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Channel values of the pixel at `(x, y)`.
    pub fn pixel(&self, x: u32, y: u32) -> &[f32] {
        let c = self.channels as usize;
        let base = (y as usize * self.width as usize + x as usize) * c;
        &self.values[base..base + c]
    }

    fn same_shape(&self, other: &Image) -> Result<(), AugmentError> {
        if self.width != other.width
            || self.height != other.height
            || self.channels != other.channels
        {
            return Err(AugmentError::ShapeMismatch {
                aw: self.width,
                ah: self.height,
                ac: self.channels,
                bw: other.width,
                bh: other.height,
                bc: other.channels,
            });
        }
        Ok(())
    }

    /// Replicates a single-channel image across `channels` channels.
    pub fn broadcast_to_channels(&self, channels: u32) -> Result<Image, AugmentError> {
        if self.channels != 1 {
            return Err(AugmentError::BroadcastFromMultiChannel(self.channels));
        }
        if channels == 1 {
            return Ok(self.clone());
        }
        if channels != 3 {
            return Err(AugmentError::InvalidChannels(channels));
        }
        let mut values = Vec::with_capacity(self.values.len() * channels as usize);
        for &v in &self.values {
            for _ in 0..channels {
                values.push(v);
            }
        }
        Ok(Image::from_checked(self.width, self.height, channels, values))
    }
}

/// Per-pixel depth in millimeters with a validity mask, matching an image's
/// grid. Valid entries must be positive and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: u32,
    height: u32,
    depths: Vec<f32>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(
        width: u32,
        height: u32,
        depths: Vec<f32>,
        valid: Vec<bool>,
    ) -> Result<Self, AugmentError> {
        let expected = width as usize * height as usize;
        if depths.len() != expected || valid.len() != expected {
            return Err(AugmentError::BufferSizeMismatch {
                len: depths.len().max(valid.len()),
                width,
                height,
                channels: 1,
                expected,
            });
        }
        for (index, (&value, &ok)) in depths.iter().zip(&valid).enumerate() {
            if ok && !(value > 0.0 && value.is_finite()) {
                return Err(AugmentError::InvalidDepth { index, value });
            }
        }
        Ok(Self { width, height, depths, valid })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn depths(&self) -> &[f32] {
        &self.depths
    }

    pub fn validity(&self) -> &[bool] {
        &self.valid
    }
}

/// Uniform sampling ranges for [`color_jitter`], each a multiplicative factor
/// interval. A factor of exactly 1.0 skips its stage bit-for-bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorJitterConfig {
    pub brightness_range: (f64, f64),
    pub contrast_range: (f64, f64),
    pub saturation_range: (f64, f64),
}

impl Default for ColorJitterConfig {
    fn default() -> Self {
        Self {
            brightness_range: (0.8, 1.2),
            contrast_range: (0.8, 1.2),
            saturation_range: (0.8, 1.2),
        }
    }
}

/// The factors one [`color_jitter`] call actually applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

/// Blend weight for [`noise_mixup`]: the augmented image keeps `lambda` of
/// the original and takes `1 - lambda` from the noise image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixupParams {
    lambda: f64,
}

impl MixupParams {
    pub fn new(lambda: f64) -> Result<Self, AugmentError> {
        if !(lambda.is_finite() && (0.0..=1.0).contains(&lambda)) {
            return Err(AugmentError::InvalidBlendFactor(lambda));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Draws a blend weight uniformly from `[lo, hi]`.
    ///
    /// Panics if the range is inverted or leaves `[0,1]`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, range: (f64, f64)) -> Self {
        let lambda = rng.gen_range(range.0..=range.1);
        Self::new(lambda).expect("sampling range must stay within [0,1]")
    }
}

/// The noise-blending stage of [`ddaug`]: the blend weight is drawn from
/// `lambda_range` and the noise image is fractal noise with `octaves`
/// octaves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixupConfig {
    pub lambda_range: (f64, f64),
    pub octaves: u32,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self { lambda_range: (0.7, 1.0), octaves: 4 }
    }
}

/// Stage selection for [`ddaug`]; `None` disables a stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdaugConfig {
    pub jitter: Option<ColorJitterConfig>,
    pub mixup: Option<MixupConfig>,
    pub warp: Option<PerturbationConfig>,
}

impl Default for DdaugConfig {
    fn default() -> Self {
        Self {
            jitter: Some(ColorJitterConfig::default()),
            mixup: Some(MixupConfig::default()),
            warp: Some(PerturbationConfig::default()),
        }
    }
}

impl DdaugConfig {
    pub fn disabled() -> Self {
        Self { jitter: None, mixup: None, warp: None }
    }
}

/// What one [`perturbation_warp`] inside [`ddaug`] sampled and produced.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpRecord {
    pub perturbation: Pose,
    pub perturbed_intrinsics: CameraIntrinsics,
    /// True where the warped image carries content (splatted or hole-filled).
    pub mask: Vec<bool>,
}

/// Provenance of one [`ddaug`] call: exactly the parameters needed to
/// reproduce the augmented image from the original.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentationRecord {
    pub jitter: Option<JitterFactors>,
    pub mixup: Option<MixupParams>,
    pub warp: Option<WarpRecord>,
}

impl AugmentationRecord {
    pub fn is_empty(&self) -> bool {
        self.jitter.is_none() && self.mixup.is_none() && self.warp.is_none()
    }
}

/// Rec. 601 luma weights used by the saturation stage.
const LUMA_WEIGHTS: [f32; 3] = [0.299, 0.587, 0.114];

/// Randomly scales brightness, contrast (about the per-channel mean), and
/// saturation (toward Rec. 601 luma), in that order, clamping to `[0,1]`
/// after each stage. Factors are drawn uniformly from the configured ranges;
/// a factor of exactly 1.0 leaves its stage out bit-for-bit, so a degenerate
/// all-`(1,1)` config returns the input unchanged.
///
/// Saturation is the identity on single-channel images.
///
/// Panics if a configured range is inverted.
pub fn color_jitter<R: Rng + ?Sized>(
    image: &Image,
    rng: &mut R,
    config: &ColorJitterConfig,
) -> (Image, JitterFactors) {
    let brightness = rng.gen_range(config.brightness_range.0..=config.brightness_range.1);
    let contrast = rng.gen_range(config.contrast_range.0..=config.contrast_range.1);
    let saturation = rng.gen_range(config.saturation_range.0..=config.saturation_range.1);
    let factors = JitterFactors { brightness, contrast, saturation };
    (apply_jitter(image, &factors), factors)
}

/// Deterministic core of [`color_jitter`]: applies already-chosen factors.
pub fn apply_jitter(image: &Image, factors: &JitterFactors) -> Image {
    let mut values = image.values.clone();
    let channels = image.channels as usize;

    if factors.brightness != 1.0 {
        let b = factors.brightness as f32;
        for v in &mut values {
            *v = (*v * b).clamp(0.0, 1.0);
        }
    }

    if factors.contrast != 1.0 {
        let c = factors.contrast as f32;
        // Per-channel mean, accumulated in f64 for stability.
        let mut means = vec![0.0f64; channels];
        for chunk in values.chunks_exact(channels) {
            for (m, &v) in means.iter_mut().zip(chunk) {
                *m += v as f64;
            }
        }
        let n = image.pixel_count() as f64;
        let means: Vec<f32> = means.iter().map(|m| (m / n) as f32).collect();
        for chunk in values.chunks_exact_mut(channels) {
            for (v, &m) in chunk.iter_mut().zip(&means) {
                *v = (m + (*v - m) * c).clamp(0.0, 1.0);
            }
        }
    }

    if factors.saturation != 1.0 && channels == 3 {
        let s = factors.saturation as f32;
        for chunk in values.chunks_exact_mut(channels) {
            let luma =
                LUMA_WEIGHTS[0] * chunk[0] + LUMA_WEIGHTS[1] * chunk[1] + LUMA_WEIGHTS[2] * chunk[2];
            for v in chunk.iter_mut() {
                *v = (luma + (*v - luma) * s).clamp(0.0, 1.0);
            }
        }
    }

    Image::from_checked(image.width, image.height, image.channels, values)
}

/// Pixel-wise convex blend: `lambda * image + (1 - lambda) * noise`.
pub fn noise_mixup(image: &Image, noise: &Image, params: MixupParams) -> Result<Image, AugmentError> {
    image.same_shape(noise)?;
    let lambda = params.lambda as f32;
    let values = image
        .values
        .iter()
        .zip(&noise.values)
        .map(|(&a, &n)| (lambda * a + (1.0 - lambda) * n).clamp(0.0, 1.0))
        .collect();
    Ok(Image::from_checked(image.width, image.height, image.channels, values))
}

/// Single-channel multi-octave value noise, min-max normalized to `[0,1]`.
///
/// Octave `o` bilinearly interpolates a uniform random lattice whose cell
/// size halves as `o` grows, weighted by an amplitude that also halves per
/// octave. Deterministic for a given generator state.
///
/// Panics if `octaves` is zero or the image is empty.
pub fn fractal_noise<R: Rng + ?Sized>(width: u32, height: u32, rng: &mut R, octaves: u32) -> Image {
    assert!(octaves >= 1, "fractal noise needs at least one octave");
    assert!(width > 0 && height > 0, "fractal noise needs a non-empty image");
    let n = width as usize * height as usize;
    let mut sum = vec![0.0f64; n];
    let base_cell = (width.max(height) as f64 / 4.0).max(1.0);
    let mut amplitude = 1.0f64;
    for octave in 0..octaves {
        let cell = (base_cell / f64::powi(2.0, octave as i32)).max(1.0);
        let layer = value_noise_layer(width, height, cell, rng);
        for (acc, v) in sum.iter_mut().zip(&layer) {
            *acc += amplitude * v;
        }
        amplitude /= 2.0;
    }
    let min = sum.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = sum.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let values = if max > min {
        let span = max - min;
        sum.iter().map(|&v| (((v - min) / span) as f32).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.5f32; n]
    };
    Image::from_checked(width, height, 1, values)
}

/// One value-noise octave: a random lattice with the given cell size,
/// bilinearly interpolated at every pixel. Values in `[0,1)`.
fn value_noise_layer<R: Rng + ?Sized>(width: u32, height: u32, cell: f64, rng: &mut R) -> Vec<f64> {
    let lattice_w = (width as f64 / cell).ceil() as usize + 1;
    let lattice_h = (height as f64 / cell).ceil() as usize + 1;
    let lattice: Vec<f64> = (0..lattice_w * lattice_h).map(|_| rng.gen::<f64>()).collect();
    let node = |ix: usize, iy: usize| lattice[iy * lattice_w + ix];

    let mut out = Vec::with_capacity(width as usize * height as usize);
    for y in 0..height {
        let fy = y as f64 / cell;
        let iy = (fy as usize).min(lattice_h - 2);
        let ty = fy - iy as f64;
        for x in 0..width {
            let fx = x as f64 / cell;
            let ix = (fx as usize).min(lattice_w - 2);
            let tx = fx - ix as f64;
            let top = node(ix, iy) * (1.0 - tx) + node(ix + 1, iy) * tx;
            let bottom = node(ix, iy + 1) * (1.0 - tx) + node(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// [`perturbation_warp`] output including the depth of the warped view
/// (needed to warp the result again, e.g. for round-trip checks).
#[derive(Debug, Clone, PartialEq)]
pub struct WarpOutput {
    pub image: Image,
    /// True where the output carries content (splatted or hole-filled).
    pub mask: Vec<bool>,
    /// Camera-frame depth of the warped view; valid exactly where `mask` is.
    pub depth: DepthMap,
}

/// Maximum hole radius (in pixels, Chebyshev rings) the warp will fill from
/// the nearest splatted neighbor.
const HOLE_FILL_RADIUS: i64 = 2;

/// Re-renders an image as seen under a perturbed rotation and calibration,
/// using per-pixel depth.
///
/// Every valid source pixel is forward-mapped with its depth, splatted onto
/// the nearest target pixel, and composited by z-buffer: the strictly
/// smallest transformed depth wins; on an exact depth tie the first writer in
/// row-major source order is kept. Holes within [`HOLE_FILL_RADIUS`] pixels
/// of a splat are filled from their nearest splatted neighbor (ties broken by
/// scan order); farther pixels stay unfilled with `mask` false and content 0.
pub fn perturbation_warp(
    image: &Image,
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
    perturbation: &Pose,
    perturbed_intrinsics: &CameraIntrinsics,
) -> Result<(Image, Vec<bool>), AugmentError> {
    perturbation_warp_detailed(image, depth, intrinsics, perturbation, perturbed_intrinsics)
        .map(|out| (out.image, out.mask))
}

/// [`perturbation_warp`] that also returns the warped view's depth map.
pub fn perturbation_warp_detailed(
    image: &Image,
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
    perturbation: &Pose,
    perturbed_intrinsics: &CameraIntrinsics,
) -> Result<WarpOutput, AugmentError> {
    if depth.width != image.width || depth.height != image.height {
        return Err(AugmentError::DepthSizeMismatch {
            dw: depth.width,
            dh: depth.height,
            iw: image.width,
            ih: image.height,
        });
    }
    if intrinsics.width != image.width || intrinsics.height != image.height {
        return Err(AugmentError::CameraSizeMismatch {
            iw: image.width,
            ih: image.height,
            cw: intrinsics.width,
            ch: intrinsics.height,
        });
    }

    let (w, h) = (image.width as usize, image.height as usize);
    let channels = image.channels as usize;
    let mut values = vec![0.0f32; w * h * channels];
    let mut z_buffer = vec![f64::INFINITY; w * h];
    let mut splatted = vec![false; w * h];

    for y in 0..h {
        for x in 0..w {
            let src = y * w + x;
            if !depth.valid[src] {
                continue;
            }
            let pixel = PixelPoint::new(x as f64, y as f64);
            let Some((mapped, z)) = perturb_pixel_with_depth(
                perturbation,
                perturbed_intrinsics,
                &pixel,
                depth.depths[src] as f64,
            ) else {
                continue;
            };
            let tx = mapped.u.round();
            let ty = mapped.v.round();
            if tx < 0.0 || ty < 0.0 || tx >= w as f64 || ty >= h as f64 {
                continue;
            }
            let dst = ty as usize * w + tx as usize;
            if z < z_buffer[dst] {
                z_buffer[dst] = z;
                splatted[dst] = true;
                let src_base = src * channels;
                let dst_base = dst * channels;
                values[dst_base..dst_base + channels]
                    .copy_from_slice(&image.values[src_base..src_base + channels]);
            }
        }
    }

    // Fill small holes from the nearest splatted pixel, always reading the
    // pre-fill state so filled pixels never propagate.
    let mut mask = splatted.clone();
    let mut depths = z_buffer.iter().map(|&z| if z.is_finite() { z as f32 } else { 0.0 }).collect::<Vec<_>>();
    let offsets = ring_offsets(HOLE_FILL_RADIUS);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let dst = y as usize * w + x as usize;
            if splatted[dst] {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let src = ny as usize * w + nx as usize;
                if !splatted[src] {
                    continue;
                }
                let src_base = src * channels;
                let dst_base = dst * channels;
                for ch in 0..channels {
                    values[dst_base + ch] = values[src_base + ch];
                }
                depths[dst] = depths[src];
                mask[dst] = true;
                break;
            }
        }
    }

    let image_out = Image::from_checked(image.width, image.height, image.channels, values);
    let depth_out = DepthMap::new(image.width, image.height, depths, mask.clone())
        .expect("z-buffer depths of splatted pixels are positive and finite");
    Ok(WarpOutput { image: image_out, mask, depth: depth_out })
}

/// Neighbor offsets out to the given Chebyshev radius, nearest (by squared
/// Euclidean distance, then scan order) first.
fn ring_offsets(radius: i64) -> Vec<(i64, i64)> {
    let mut offsets = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            if dx != 0 || dy != 0 {
                offsets.push((dx, dy));
            }
        }
    }
    offsets.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));
    offsets
}

/// Runs the full augmentation pipeline — jitter, then noise mixup, then
/// perturbation warp — skipping stages disabled in the config, and returns
/// the augmented image with the provenance record of everything sampled.
///
/// Parameters are drawn from `rng` in stage order, so a fixed generator state
/// reproduces the augmentation exactly.
pub fn ddaug<R: Rng + ?Sized>(
    image: &Image,
    depth: &DepthMap,
    intrinsics: &CameraIntrinsics,
    rng: &mut R,
    config: &DdaugConfig,
) -> Result<(Image, AugmentationRecord), AugmentError> {
    let mut record = AugmentationRecord::default();
    let mut current = image.clone();

    if let Some(jitter_config) = &config.jitter {
        let (jittered, factors) = color_jitter(&current, rng, jitter_config);
        current = jittered;
        record.jitter = Some(factors);
    }

    if let Some(mixup_config) = &config.mixup {
        let params = MixupParams::sample(rng, mixup_config.lambda_range);
        let noise = fractal_noise(current.width, current.height, rng, mixup_config.octaves)
            .broadcast_to_channels(current.channels)?;
        current = noise_mixup(&current, &noise, params)?;
        record.mixup = Some(params);
    }

    if let Some(warp_config) = &config.warp {
        let (perturbation, perturbed_intrinsics) =
            sample_perturbation(rng, intrinsics, warp_config);
        let (warped, mask) =
            perturbation_warp(&current, depth, intrinsics, &perturbation, &perturbed_intrinsics)?;
        current = warped;
        record.warp = Some(WarpRecord { perturbation, perturbed_intrinsics, mask });
    }

    Ok((current, record))
}
