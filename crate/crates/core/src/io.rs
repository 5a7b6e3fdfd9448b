//! File formats for every artifact the pipeline reads or writes.
//!
//! Binary formats share one discipline: a four-byte magic, little-endian
//! scalars, and errors that name the file and byte offset. Text formats
//! (trajectories, the virtual-database index, intrinsics) print floats with
//! 17 significant digits so every `f64` survives a write/read cycle with its
//! exact bit pattern.
//!
//! | format | magic  | contents |
//! |--------|--------|----------|
//! | scene-coordinate map | `SCM1` | grid shape/stride/origin, f32 point triples, validity bytes |
//! | raw float image | `IMGF` | width, height, channels, f32 samples |
//! | depth map | `DPTF` | width, height, channel count 1, f32 depths, validity bytes |
//! | descriptor blob | `DSC1` | count, dimension, f32 rows |
//! | image preview | PPM P6 | 8-bit RGB (lossy, for viewing only) |
//! | trajectory | text | TUM lines `timestamp tx ty tz qx qy qz qw`, scalar-last |
//!
//! A dataset directory bundles them: `intrinsics.json`, `gt_poses.txt`,
//! `frames/frame_%06d.{img,dpt,scm}` and `descriptors.bin`.

use crate::augment::{DepthMap, Image};
use crate::geometry::{CameraIntrinsics, PixelPoint, Pose, ScenePoint};
use crate::metrics::{Trajectory, TrajectorySample};
use crate::retrieval::{Descriptor, VirtualDatabase, VirtualEntry};
use crate::sim::SyntheticFrame;
use crate::solver::ScenePointMap;
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} at byte {offset}: {reason}")]
    Format { path: PathBuf, offset: u64, reason: String },
    #[error("{path} line {line}: {reason}")]
    Text { path: PathBuf, line: usize, reason: String },
    #[error("{path}: {source}")]
    InvalidData {
        path: PathBuf,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync + 'static>,
    },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_owned(), source }
    }

    fn data<E: std::error::Error + Send + Sync + 'static>(path: &Path, source: E) -> Self {
        Self::InvalidData { path: path.to_owned(), source: Box::new(source) }
    }
}

const SCENE_MAP_MAGIC: [u8; 4] = *b"SCM1";
const IMAGE_MAGIC: [u8; 4] = *b"IMGF";
const DEPTH_MAGIC: [u8; 4] = *b"DPTF";
const DESCRIPTOR_MAGIC: [u8; 4] = *b"DSC1";
/// Refuse to allocate for element counts beyond this when reading.
const MAX_ELEMENTS: usize = 1 << 28;

/// A reader that tracks its byte offset so format errors can point at the
/// exact spot in the file.
struct BinReader<R> {
    path: PathBuf,
    inner: R,
    offset: u64,
}

impl<R: Read> BinReader<R> {
    fn new(path: &Path, inner: R) -> Self {
        Self { path: path.to_owned(), inner, offset: 0 }
    }

    fn format_error(&self, reason: impl Into<String>) -> IoError {
        IoError::Format { path: self.path.clone(), offset: self.offset, reason: reason.into() }
    }

    fn fill(&mut self, buffer: &mut [u8]) -> Result<(), IoError> {
        match self.inner.read_exact(buffer) {
            Ok(()) => {
                self.offset += buffer.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(self.format_error("unexpected end of file"))
            }
            Err(e) => Err(IoError::io(&self.path, e)),
        }
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), IoError> {
        let mut got = [0u8; 4];
        self.fill(&mut got)?;
        if got != expected {
            self.offset = 0;
            return Err(self.format_error(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(&expected),
            )));
        }
        Ok(())
    }

    fn u32_le(&mut self) -> Result<u32, IoError> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    fn f32_le(&mut self) -> Result<f32, IoError> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    fn f32_slice(&mut self, count: usize) -> Result<Vec<f32>, IoError> {
        let mut bytes = vec![0u8; count.checked_mul(4).ok_or_else(|| {
            self.format_error("element count overflows")
        })?];
        self.fill(&mut bytes)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    }

    fn validity_plane(&mut self, count: usize) -> Result<Vec<bool>, IoError> {
        let mut bytes = vec![0u8; count];
        self.fill(&mut bytes)?;
        for (index, &byte) in bytes.iter().enumerate() {
            if byte > 1 {
                return Err(IoError::Format {
                    path: self.path.clone(),
                    offset: self.offset - (count - index) as u64,
                    reason: format!("validity byte must be 0 or 1, got {byte}"),
                });
            }
        }
        Ok(bytes.into_iter().map(|b| b == 1).collect())
    }

    fn expect_eof(&mut self) -> Result<(), IoError> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => Err(self.format_error("trailing data after the declared contents")),
            Err(e) => Err(IoError::io(&self.path, e)),
        }
    }

    fn checked_elements(&self, label: &str, count: usize) -> Result<usize, IoError> {
        if count > MAX_ELEMENTS {
            return Err(self.format_error(format!("{label} count {count} is implausibly large")));
        }
        Ok(count)
    }
}

fn open_reader(path: &Path) -> Result<BinReader<BufReader<File>>, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    Ok(BinReader::new(path, BufReader::new(file)))
}

struct BinWriter {
    path: PathBuf,
    inner: BufWriter<File>,
}

impl BinWriter {
    fn create(path: &Path) -> Result<Self, IoError> {
        let file = File::create(path).map_err(|e| IoError::io(path, e))?;
        Ok(Self { path: path.to_owned(), inner: BufWriter::new(file) })
    }

    fn bytes(&mut self, data: &[u8]) -> Result<(), IoError> {
        self.inner.write_all(data).map_err(|e| IoError::io(&self.path, e))
    }

    fn u32_le(&mut self, v: u32) -> Result<(), IoError> {
        self.bytes(&v.to_le_bytes())
    }

    fn f32_le(&mut self, v: f32) -> Result<(), IoError> {
        self.bytes(&v.to_le_bytes())
    }

    fn finish(mut self) -> Result<(), IoError> {
        self.inner.flush().map_err(|e| IoError::io(&self.path, e))
    }
}

// --- scene-coordinate maps ------------------------------------------------

pub fn write_scene_map(path: &Path, map: &ScenePointMap) -> Result<(), IoError> {
    let mut w = BinWriter::create(path)?;
    w.bytes(&SCENE_MAP_MAGIC)?;
    w.u32_le(map.grid_rows())?;
    w.u32_le(map.grid_cols())?;
    w.u32_le(map.stride())?;
    w.f32_le(map.origin().u as f32)?;
    w.f32_le(map.origin().v as f32)?;
    for point in map.points() {
        w.f32_le(point.x as f32)?;
        w.f32_le(point.y as f32)?;
        w.f32_le(point.z as f32)?;
    }
    for &valid in map.validity() {
        w.bytes(&[u8::from(valid)])?;
    }
    w.finish()
}

pub fn read_scene_map(path: &Path) -> Result<ScenePointMap, IoError> {
    let mut r = open_reader(path)?;
    r.magic(SCENE_MAP_MAGIC)?;
    let rows = r.u32_le()?;
    let cols = r.u32_le()?;
    let stride = r.u32_le()?;
    let origin = PixelPoint::new(r.f32_le()? as f64, r.f32_le()? as f64);
    let cells = r.checked_elements("cell", rows as usize * cols as usize)?;
    let raw = r.f32_slice(cells * 3)?;
    let points: Vec<ScenePoint> = raw
        .chunks_exact(3)
        .map(|c| ScenePoint::new(c[0] as f64, c[1] as f64, c[2] as f64))
        .collect();
    let valid = r.validity_plane(cells)?;
    r.expect_eof()?;
    ScenePointMap::new(rows, cols, stride, origin, points, valid)
        .map_err(|e| IoError::data(path, e))
}

// --- raw float images and depth maps ---------------------------------------

pub fn write_image_raw(path: &Path, image: &Image) -> Result<(), IoError> {
    let mut w = BinWriter::create(path)?;
    w.bytes(&IMAGE_MAGIC)?;
    w.u32_le(image.width())?;
    w.u32_le(image.height())?;
    w.u32_le(image.channels())?;
    for &v in image.values() {
        w.f32_le(v)?;
    }
    w.finish()
}

pub fn read_image_raw(path: &Path) -> Result<Image, IoError> {
    let mut r = open_reader(path)?;
    r.magic(IMAGE_MAGIC)?;
    let width = r.u32_le()?;
    let height = r.u32_le()?;
    let channels = r.u32_le()?;
    let count = r.checked_elements(
        "sample",
        width as usize * height as usize * channels as usize,
    )?;
    let values = r.f32_slice(count)?;
    r.expect_eof()?;
    Image::new(width, height, channels, values).map_err(|e| IoError::data(path, e))
}

pub fn write_depth_map(path: &Path, depth: &DepthMap) -> Result<(), IoError> {
    let mut w = BinWriter::create(path)?;
    w.bytes(&DEPTH_MAGIC)?;
    w.u32_le(depth.width())?;
    w.u32_le(depth.height())?;
    w.u32_le(1)?;
    for &v in depth.depths() {
        w.f32_le(v)?;
    }
    for &valid in depth.validity() {
        w.bytes(&[u8::from(valid)])?;
    }
    w.finish()
}

pub fn read_depth_map(path: &Path) -> Result<DepthMap, IoError> {
    let mut r = open_reader(path)?;
    r.magic(DEPTH_MAGIC)?;
    let width = r.u32_le()?;
    let height = r.u32_le()?;
    let channels = r.u32_le()?;
    if channels != 1 {
        return Err(IoError::Format {
            path: path.to_owned(),
            offset: 12,
            reason: format!("depth maps are single-channel, got {channels}"),
        });
    }
    let count = r.checked_elements("pixel", width as usize * height as usize)?;
    let depths = r.f32_slice(count)?;
    let valid = r.validity_plane(count)?;
    r.expect_eof()?;
    DepthMap::new(width, height, depths, valid).map_err(|e| IoError::data(path, e))
}

// --- PPM previews -----------------------------------------------------------

/// Writes an 8-bit PPM (P6) preview. Quantizes to 255 levels — lossy by
/// design; single-channel images are broadcast to gray RGB.
pub fn write_image_ppm(path: &Path, image: &Image) -> Result<(), IoError> {
    let mut w = BinWriter::create(path)?;
    w.bytes(format!("P6\n{} {}\n255\n", image.width(), image.height()).as_bytes())?;
    let channels = image.channels() as usize;
    for pixel in image.values().chunks_exact(channels) {
        let rgb = match channels {
            1 => [pixel[0]; 3],
            _ => [pixel[0], pixel[1], pixel[2]],
        };
        w.bytes(&rgb.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))?;
    }
    w.finish()
}

pub fn read_image_ppm(path: &Path) -> Result<Image, IoError> {
    let mut r = open_reader(path)?;
    let mut header = [0u8; 2];
    r.fill(&mut header)?;
    if &header != b"P6" {
        r.offset = 0;
        return Err(r.format_error("not a P6 PPM file"));
    }
    let width = ppm_header_number(&mut r)?;
    let height = ppm_header_number(&mut r)?;
    let maxval = ppm_header_number(&mut r)?;
    if maxval != 255 {
        return Err(r.format_error(format!("only 8-bit PPMs are supported, maxval {maxval}")));
    }
    let count = r.checked_elements("pixel", width as usize * height as usize * 3)?;
    let mut bytes = vec![0u8; count];
    r.fill(&mut bytes)?;
    r.expect_eof()?;
    let values: Vec<f32> = bytes.into_iter().map(|b| b as f32 / 255.0).collect();
    Image::new(width, height, 3, values).map_err(|e| IoError::data(path, e))
}

/// Reads one whitespace-delimited decimal from a PPM header, skipping `#`
/// comments, consuming exactly one trailing whitespace byte.
fn ppm_header_number<R: Read>(r: &mut BinReader<R>) -> Result<u32, IoError> {
    let mut byte = [0u8; 1];
    // Skip whitespace and comment lines.
    loop {
        r.fill(&mut byte)?;
        match byte[0] {
            b' ' | b'\t' | b'\r' | b'\n' => continue,
            b'#' => {
                while byte[0] != b'\n' {
                    r.fill(&mut byte)?;
                }
            }
            _ => break,
        }
    }
    let mut value: u64 = 0;
    let mut digits = 0;
    loop {
        match byte[0] {
            b'0'..=b'9' => {
                value = value * 10 + (byte[0] - b'0') as u64;
                digits += 1;
                if value > u32::MAX as u64 {
                    return Err(r.format_error("header number out of range"));
                }
            }
            b' ' | b'\t' | b'\r' | b'\n' if digits > 0 => return Ok(value as u32),
            other => {
                return Err(r.format_error(format!(
                    "unexpected byte {other:#04x} in header number"
                )));
            }
        }
        r.fill(&mut byte)?;
    }
}

// --- trajectories (TUM text format) -----------------------------------------

/// Formats an f64 with 17 significant digits, enough for the exact bit
/// pattern to survive printing and re-parsing.
fn full_precision(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes one pose per line: `timestamp tx ty tz qx qy qz qw` (quaternion
/// scalar-last). Quaternions are written with a non-negative scalar part so
/// each rotation has exactly one file representation.
pub fn write_trajectory_tum(path: &Path, trajectory: &Trajectory) -> Result<(), IoError> {
    let mut w = BinWriter::create(path)?;
    w.bytes(b"# timestamp tx ty tz qx qy qz qw\n")?;
    for sample in trajectory.samples() {
        let q = if sample.rotation.w < 0.0 {
            -*sample.rotation.quaternion()
        } else {
            *sample.rotation.quaternion()
        };
        let t = sample.translation;
        let line = format!(
            "{} {} {} {} {} {} {} {}\n",
            full_precision(sample.timestamp),
            full_precision(t.x),
            full_precision(t.y),
            full_precision(t.z),
            full_precision(q.i),
            full_precision(q.j),
            full_precision(q.k),
            full_precision(q.w),
        );
        w.bytes(line.as_bytes())?;
    }
    w.finish()
}

/// Reads a TUM trajectory, skipping `#` comments and blank lines. Parsed
/// quaternion components are kept verbatim (validated to be unit within
/// 1e-6, never renormalized) so that writing the result reproduces the
/// original values bit-for-bit.
pub fn read_trajectory_tum(path: &Path) -> Result<Trajectory, IoError> {
    let file = File::open(path).map_err(|e| IoError::io(path, e))?;
    let mut samples = Vec::new();
    for (number, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| IoError::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let text_error = |reason: String| IoError::Text {
            path: path.to_owned(),
            line: number + 1,
            reason,
        };
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(text_error(format!("expected 8 fields, got {}", fields.len())));
        }
        let mut values = [0.0f64; 8];
        for (slot, field) in values.iter_mut().zip(&fields) {
            *slot = field
                .parse::<f64>()
                .map_err(|e| text_error(format!("bad number {field:?}: {e}")))?;
        }
        let quaternion = Quaternion::new(values[7], values[4], values[5], values[6]);
        if (quaternion.norm() - 1.0).abs() > 1e-6 {
            return Err(text_error(format!(
                "quaternion norm {} is not 1 within 1e-6",
                quaternion.norm()
            )));
        }
        samples.push(TrajectorySample {
            timestamp: values[0],
            rotation: UnitQuaternion::new_unchecked(quaternion),
            translation: Vector3::new(values[1], values[2], values[3]),
        });
    }
    Trajectory::new(samples).map_err(|e| IoError::data(path, e))
}

// --- camera intrinsics -------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct IntrinsicsFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

pub fn write_intrinsics_json(path: &Path, k: &CameraIntrinsics) -> Result<(), IoError> {
    let record = IntrinsicsFile {
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        width: k.width,
        height: k.height,
    };
    let mut text = serde_json::to_string_pretty(&record).expect("plain struct serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| IoError::io(path, e))
}

pub fn read_intrinsics_json(path: &Path) -> Result<CameraIntrinsics, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    let record: IntrinsicsFile =
        serde_json::from_str(&text).map_err(|e| IoError::data(path, e))?;
    CameraIntrinsics::new(record.fx, record.fy, record.cx, record.cy, record.width, record.height)
        .map_err(|e| IoError::data(path, e))
}

// --- descriptor blobs ---------------------------------------------------------

pub fn write_descriptors(path: &Path, descriptors: &[Descriptor]) -> Result<(), IoError> {
    let dim = descriptors.first().map_or(0, Descriptor::len);
    for (index, d) in descriptors.iter().enumerate() {
        if d.len() != dim {
            return Err(IoError::Format {
                path: path.to_owned(),
                offset: 0,
                reason: format!(
                    "descriptor {index} has dimension {}, the first has {dim}",
                    d.len()
                ),
            });
        }
    }
    let mut w = BinWriter::create(path)?;
    w.bytes(&DESCRIPTOR_MAGIC)?;
    w.u32_le(descriptors.len() as u32)?;
    w.u32_le(dim as u32)?;
    for d in descriptors {
        for &v in d.values() {
            w.f32_le(v as f32)?;
        }
    }
    w.finish()
}

pub fn read_descriptors(path: &Path) -> Result<Vec<Descriptor>, IoError> {
    let mut r = open_reader(path)?;
    r.magic(DESCRIPTOR_MAGIC)?;
    let count = r.u32_le()? as usize;
    let dim = r.u32_le()? as usize;
    r.checked_elements("descriptor value", count.saturating_mul(dim))?;
    let mut descriptors = Vec::with_capacity(count);
    for _ in 0..count {
        let row = r.f32_slice(dim)?;
        let descriptor = Descriptor::from_widened(row.into_iter().map(f64::from).collect())
            .map_err(|e| IoError::data(path, e))?;
        descriptors.push(descriptor);
    }
    r.expect_eof()?;
    Ok(descriptors)
}

// --- virtual database ----------------------------------------------------------

/// Persists the database as its two declared files: a line-delimited index
/// `id tx ty tz qx qy qz qw` and a descriptor blob.
pub fn write_virtual_database(
    index_path: &Path,
    blob_path: &Path,
    database: &VirtualDatabase,
) -> Result<(), IoError> {
    let mut w = BinWriter::create(index_path)?;
    w.bytes(b"# id tx ty tz qx qy qz qw\n")?;
    for entry in database.entries() {
        let rotation = UnitQuaternion::from_rotation_matrix(entry.pose.rotation());
        let q = if rotation.w < 0.0 { -*rotation.quaternion() } else { *rotation.quaternion() };
        let t = entry.pose.translation();
        let line = format!(
            "{} {} {} {} {} {} {} {}\n",
            entry.id,
            full_precision(t.x),
            full_precision(t.y),
            full_precision(t.z),
            full_precision(q.i),
            full_precision(q.j),
            full_precision(q.k),
            full_precision(q.w),
        );
        w.bytes(line.as_bytes())?;
    }
    w.finish()?;
    let descriptors: Vec<Descriptor> =
        database.entries().iter().map(|e| e.descriptor.clone()).collect();
    write_descriptors(blob_path, &descriptors)
}

pub fn read_virtual_database(
    index_path: &Path,
    blob_path: &Path,
) -> Result<VirtualDatabase, IoError> {
    let file = File::open(index_path).map_err(|e| IoError::io(index_path, e))?;
    let mut rows: Vec<(usize, Pose)> = Vec::new();
    for (number, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| IoError::io(index_path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let text_error = |reason: String| IoError::Text {
            path: index_path.to_owned(),
            line: number + 1,
            reason,
        };
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(text_error(format!("expected 8 fields, got {}", fields.len())));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|e| text_error(format!("bad id {:?}: {e}", fields[0])))?;
        let mut values = [0.0f64; 7];
        for (slot, field) in values.iter_mut().zip(&fields[1..]) {
            *slot = field
                .parse::<f64>()
                .map_err(|e| text_error(format!("bad number {field:?}: {e}")))?;
        }
        let quaternion = Quaternion::new(values[6], values[3], values[4], values[5]);
        if (quaternion.norm() - 1.0).abs() > 1e-6 {
            return Err(text_error(format!(
                "quaternion norm {} is not 1 within 1e-6",
                quaternion.norm()
            )));
        }
        rows.push((
            id,
            Pose::from_quaternion(
                UnitQuaternion::new_normalize(quaternion),
                Vector3::new(values[0], values[1], values[2]),
            ),
        ));
    }
    let descriptors = read_descriptors(blob_path)?;
    if descriptors.len() != rows.len() {
        return Err(IoError::Format {
            path: blob_path.to_owned(),
            offset: 4,
            reason: format!(
                "blob holds {} descriptors but the index lists {} entries",
                descriptors.len(),
                rows.len()
            ),
        });
    }
    let entries: Vec<VirtualEntry> = rows
        .into_iter()
        .zip(descriptors)
        .map(|((id, pose), descriptor)| VirtualEntry { id, descriptor, pose })
        .collect();
    VirtualDatabase::new(entries).map_err(|e| IoError::data(index_path, e))
}

// --- dataset directories ---------------------------------------------------------

/// One frame as loaded from a dataset directory. The scene-coordinate map is
/// the *predictor output* stream (noisy when the dataset was exported with a
/// noise model, clean otherwise).
#[derive(Debug, Clone)]
pub struct DatasetFrame {
    pub index: usize,
    pub image: Image,
    pub depth: DepthMap,
    pub map: ScenePointMap,
}

/// An imported dataset: camera, ground-truth trajectory, per-frame data, and
/// place descriptors, index-aligned.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub intrinsics: CameraIntrinsics,
    pub ground_truth: Trajectory,
    pub frames: Vec<DatasetFrame>,
    pub descriptors: Vec<Descriptor>,
}

fn frame_stem(index: usize) -> String {
    format!("frame_{index:06}")
}

/// Writes a dataset directory from synthesized frames. Frame ids must be
/// contiguous from zero (they name the files and set the timestamps,
/// `id / fps` seconds).
pub fn export_dataset(
    directory: &Path,
    frames: &[SyntheticFrame],
    intrinsics: &CameraIntrinsics,
    fps: f64,
) -> Result<(), IoError> {
    let invalid = |reason: String| IoError::InvalidData {
        path: directory.to_owned(),
        source: reason.into(),
    };
    if frames.is_empty() {
        return Err(invalid("a dataset needs at least one frame".into()));
    }
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(invalid(format!("fps must be positive, got {fps}")));
    }
    for (index, frame) in frames.iter().enumerate() {
        if frame.id != index {
            return Err(invalid(format!(
                "frame ids must be contiguous from 0: position {index} holds id {}",
                frame.id
            )));
        }
    }
    let frames_dir = directory.join("frames");
    fs::create_dir_all(&frames_dir).map_err(|e| IoError::io(&frames_dir, e))?;

    write_intrinsics_json(&directory.join("intrinsics.json"), intrinsics)?;
    let trajectory = Trajectory::from_poses(
        frames.iter().map(|f| (f.id as f64 / fps, f.pose)),
    )
    .map_err(|e| IoError::data(directory, e))?;
    write_trajectory_tum(&directory.join("gt_poses.txt"), &trajectory)?;

    for frame in frames {
        let stem = frames_dir.join(frame_stem(frame.id));
        write_image_raw(&stem.with_extension("img"), &frame.image)?;
        write_depth_map(&stem.with_extension("dpt"), &frame.depth)?;
        write_scene_map(&stem.with_extension("scm"), &frame.noisy_map)?;
    }
    let descriptors: Vec<Descriptor> = frames.iter().map(|f| f.descriptor.clone()).collect();
    write_descriptors(&directory.join("descriptors.bin"), &descriptors)
}

/// Reads a dataset directory written by [`export_dataset`]. The frame count
/// comes from the ground-truth trajectory; every frame file must be present.
pub fn import_dataset(directory: &Path) -> Result<Dataset, IoError> {
    let intrinsics = read_intrinsics_json(&directory.join("intrinsics.json"))?;
    let ground_truth = read_trajectory_tum(&directory.join("gt_poses.txt"))?;
    let descriptors = read_descriptors(&directory.join("descriptors.bin"))?;
    if descriptors.len() != ground_truth.len() {
        return Err(IoError::InvalidData {
            path: directory.to_owned(),
            source: format!(
                "{} descriptors for {} ground-truth poses",
                descriptors.len(),
                ground_truth.len()
            )
            .into(),
        });
    }
    let frames_dir = directory.join("frames");
    let mut frames = Vec::with_capacity(ground_truth.len());
    for index in 0..ground_truth.len() {
        let stem = frames_dir.join(frame_stem(index));
        frames.push(DatasetFrame {
            index,
            image: read_image_raw(&stem.with_extension("img"))?,
            depth: read_depth_map(&stem.with_extension("dpt"))?,
            map: read_scene_map(&stem.with_extension("scm"))?,
        });
    }
    Ok(Dataset { intrinsics, ground_truth, frames, descriptors })
}
