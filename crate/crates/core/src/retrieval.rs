//! Virtual-buffer selection by place retrieval.
//!
//! Before a stream starts, a *virtual database* of rendered views along the
//! planned path is available, each with a place descriptor and a pose.
//! During a retrain, every frame in the real training buffer votes for its
//! nearest virtual frame; the per-virtual-frame vote counts are the *hit
//! scores*, and the contiguous window of the database maximizing the summed
//! hit score becomes the *virtual buffer* — the rendered frames most likely
//! to depict the anatomy the camera currently sees.
//!
//! Descriptors here are plain unit vectors; any provider that maps nearby
//! viewpoints to similar descriptors fits. The bundled simulator derives
//! them from ground-truth poses.

use crate::geometry::Pose;
use thiserror::Error;

/// Descriptor length used by the bundled tooling.
pub const DEFAULT_DESCRIPTOR_DIM: usize = 256;
/// Default window parameter: the virtual buffer spans `DEFAULT_RANGE + 1`
/// consecutive database entries.
pub const DEFAULT_RANGE: usize = 100;

/// Unit-norm tolerance enforced on descriptors.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;
/// Unit-norm tolerance for descriptors widened from 32-bit storage, where
/// per-component rounding moves the norm by up to a few f32 ulps.
pub(crate) const STORED_NORM_TOLERANCE: f64 = 1e-6;
/// Vectors with a smaller norm cannot be normalized meaningfully.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("descriptor norm {norm} is not 1 within {UNIT_NORM_TOLERANCE}")]
    NotUnitNorm { norm: f64 },
    #[error("cannot normalize a descriptor with norm {norm}")]
    DegenerateNorm { norm: f64 },
    #[error("descriptor has dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("database entry at position {position} breaks strictly increasing id order")]
    IdsNotIncreasing { position: usize },
    #[error("operation requires a non-empty database")]
    EmptyDatabase,
    #[error("range {range} does not fit a database of {len} entries (need 1 <= range <= len - 1)")]
    InvalidRange { range: usize, len: usize },
}

/// A unit-normalized place descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    values: Vec<f64>,
}

impl Descriptor {
    /// Wraps a vector that is already unit-normalized (within
    /// [`UNIT_NORM_TOLERANCE`]).
    pub fn from_unit(values: Vec<f64>) -> Result<Self, RetrievalError> {
        let norm = norm(&values);
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(RetrievalError::NotUnitNorm { norm });
        }
        Ok(Self { values })
    }

    /// Wraps values widened exactly from 32-bit storage. Renormalizing here
    /// would perturb each component by about one f32 ulp and make the
    /// store/load cycle lossy, so the values are kept verbatim and only
    /// checked against the storage-grade tolerance.
    pub(crate) fn from_widened(values: Vec<f64>) -> Result<Self, RetrievalError> {
        let norm = norm(&values);
        if (norm - 1.0).abs() > STORED_NORM_TOLERANCE {
            return Err(RetrievalError::NotUnitNorm { norm });
        }
        Ok(Self { values })
    }

    /// Normalizes an arbitrary vector onto the unit sphere.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, RetrievalError> {
        let norm = norm(&values);
        if !norm.is_finite() || norm <= NORM_FLOOR {
            return Err(RetrievalError::DegenerateNorm { norm });
        }
        for v in &mut values {
            *v /= norm;
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Cosine similarity; on unit vectors this is the dot product.
    pub fn similarity(&self, other: &Descriptor) -> Result<f64, RetrievalError> {
        if self.len() != other.len() {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }
}

fn norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// One pre-operative rendered view: its id, place descriptor, and pose.
#[derive(Debug, Clone)]
pub struct VirtualEntry {
    pub id: usize,
    pub descriptor: Descriptor,
    pub pose: Pose,
}

/// The ordered pre-operative render sequence. Ids are strictly increasing in
/// traversal order along the planned path; ordering is semantic (windows are
/// contiguous runs of the traversal).
///
/// Immutable after construction; all queries take `&self` and are safe to
/// run concurrently.
#[derive(Debug, Clone)]
pub struct VirtualDatabase {
    entries: Vec<VirtualEntry>,
}

impl VirtualDatabase {
    pub fn new(entries: Vec<VirtualEntry>) -> Result<Self, RetrievalError> {
        for position in 1..entries.len() {
            if entries[position].id <= entries[position - 1].id {
                return Err(RetrievalError::IdsNotIncreasing { position });
            }
        }
        if let Some(first) = entries.first() {
            let dim = first.descriptor.len();
            for (position, entry) in entries.iter().enumerate() {
                if entry.descriptor.len() != dim {
                    return Err(RetrievalError::DimensionMismatch {
                        expected: dim,
                        got: entries[position].descriptor.len(),
                    });
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VirtualEntry] {
        &self.entries
    }

    /// Exhaustive scan for the entry with maximum cosine similarity to the
    /// query; ties resolve to the smallest id. Returns the winning id.
    pub fn nearest(&self, query: &Descriptor) -> Result<usize, RetrievalError> {
        let (_, entry) = self.nearest_position(query)?;
        Ok(entry.id)
    }

    fn nearest_position(&self, query: &Descriptor) -> Result<(usize, &VirtualEntry), RetrievalError> {
        let mut best: Option<(usize, f64)> = None;
        for (position, entry) in self.entries.iter().enumerate() {
            let similarity = entry.descriptor.similarity(query)?;
            // Strict improvement keeps the earliest (smallest-id) winner.
            match best {
                Some((_, s)) if similarity <= s => {}
                _ => best = Some((position, similarity)),
            }
        }
        let (position, _) = best.ok_or(RetrievalError::EmptyDatabase)?;
        Ok((position, &self.entries[position]))
    }

    /// Hit scores: for each database position, how many queries chose the
    /// entry there as their nearest neighbor. Invariant under query
    /// reordering; sums to the query count. Positions coincide with ids when
    /// ids are the contiguous sequence 0, 1, 2, ...
    pub fn hit_scores(&self, queries: &[Descriptor]) -> Result<Vec<usize>, RetrievalError> {
        if self.entries.is_empty() {
            return Err(RetrievalError::EmptyDatabase);
        }
        let mut scores = vec![0usize; self.entries.len()];
        for query in queries {
            let (position, _) = self.nearest_position(query)?;
            scores[position] += 1;
        }
        Ok(scores)
    }
}

/// Leftmost window of `range + 1` consecutive scores with the maximal sum.
/// The window is inclusive on both ends — positions `k*` through
/// `k* + range` — so `range` must satisfy `1 <= range <= scores.len() - 1`.
/// Returned as `(start position, window sum)`; evaluated with an O(K)
/// sliding sum.
pub fn best_subrange(scores: &[usize], range: usize) -> Result<(usize, usize), RetrievalError> {
    let len = scores.len();
    if range < 1 || range >= len {
        return Err(RetrievalError::InvalidRange { range, len });
    }
    let window = range + 1;
    let mut sum: usize = scores[..window].iter().sum();
    let mut best_start = 0usize;
    let mut best_sum = sum;
    for start in 1..=(len - window) {
        sum = sum - scores[start - 1] + scores[start + window - 1];
        if sum > best_sum {
            best_sum = sum;
            best_start = start;
        }
    }
    Ok((best_start, best_sum))
}

/// Summary of one virtual-buffer selection.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// Per-query nearest-neighbor ids, in query order.
    pub indices: Vec<usize>,
    /// Per-position hit scores (see [`VirtualDatabase::hit_scores`]).
    pub hit_scores: Vec<usize>,
    /// Start position of the winning window; equals the entry id for
    /// databases with contiguous zero-based ids.
    pub range_start: usize,
    /// Window parameter: the buffer spans `range_len + 1` entries.
    pub range_len: usize,
    /// Summed hit score over the winning window.
    pub range_score: usize,
}

/// Full selection pipeline: vote, score, and slice out the winning window
/// of `range + 1` consecutive entries (order and poses preserved).
pub fn build_virtual_buffer<'db>(
    database: &'db VirtualDatabase,
    real_descriptors: &[Descriptor],
    range: usize,
) -> Result<(RetrievalResult, &'db [VirtualEntry]), RetrievalError> {
    if database.is_empty() {
        return Err(RetrievalError::EmptyDatabase);
    }
    let mut indices = Vec::with_capacity(real_descriptors.len());
    let mut hit_scores = vec![0usize; database.len()];
    for query in real_descriptors {
        let (position, entry) = database.nearest_position(query)?;
        indices.push(entry.id);
        hit_scores[position] += 1;
    }
    let (range_start, range_score) = best_subrange(&hit_scores, range)?;
    let result = RetrievalResult { indices, hit_scores, range_start, range_len: range, range_score };
    let buffer = &database.entries()[range_start..=range_start + range];
    Ok((result, buffer))
}
