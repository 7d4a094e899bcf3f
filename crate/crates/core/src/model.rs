//! Frames, visual objects and encounters.
//!
//! An encounter is one sighting of one object. The frames of a sighting are
//! grouped into visual objects: maximal runs of adjacent frames that stay
//! close to the running centroid of their run. Each visual object is then
//! represented by that centroid.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite, non-empty feature vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("embedding must have at least one coordinate"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "embedding coordinate {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty() && values.iter().all(|v| v.is_finite()));
        Self(values)
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// Euclidean distance between two embeddings of equal dimension.
pub fn distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(squared_distance(a.as_slice(), b.as_slice()).sqrt())
}

/// Unchecked squared distance for hot loops. Callers guarantee equal lengths.
#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VisualObjectId(pub u64);

impl fmt::Display for VisualObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EncounterId(pub String);

impl fmt::Display for EncounterId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for EncounterId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// Hands out visual object ids. One allocator per dataset keeps ids unique
/// across all encounters of a session.
#[derive(Clone, Debug, Default)]
pub struct IdAllocator {
    next: u64,
}

impl IdAllocator {
    pub fn starting_at(next: u64) -> Self {
        Self { next }
    }

    pub fn next_id(&mut self) -> VisualObjectId {
        let id = VisualObjectId(self.next);
        self.next += 1;
        id
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualObject {
    pub id: VisualObjectId,
    /// Centroid of the member frames.
    pub embedding: EmbeddingVector,
    /// Inclusive frame index range.
    pub frame_span: (usize, usize),
    pub encounter_id: EncounterId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encounter {
    pub id: EncounterId,
    pub visual_objects: Vec<VisualObject>,
    /// Ground-truth label path (e.g. `root/1/0/2`), only known to oracles.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

impl Encounter {
    /// Builds an encounter, checking that it has visual objects, that all of
    /// them share one dimension and that their frame spans tile the frame
    /// sequence in order.
    pub fn new(
        id: EncounterId,
        visual_objects: Vec<VisualObject>,
        ground_truth: Option<String>,
    ) -> Result<Self> {
        let Some(first) = visual_objects.first() else {
            return Err(Error::invalid(format!("encounter {id} has no visual objects")));
        };
        let dim = first.embedding.dim();
        let mut expected_start = first.frame_span.0;
        for vo in &visual_objects {
            if vo.embedding.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: vo.embedding.dim(),
                });
            }
            let (start, end) = vo.frame_span;
            if start > end {
                return Err(Error::invalid(format!("visual object {} has inverted span", vo.id)));
            }
            if start != expected_start {
                return Err(Error::invalid(format!(
                    "visual object {} starts at frame {start}, expected {expected_start}",
                    vo.id
                )));
            }
            if vo.encounter_id != id {
                return Err(Error::invalid(format!(
                    "visual object {} belongs to encounter {}, not {id}",
                    vo.id, vo.encounter_id
                )));
            }
            expected_start = end + 1;
        }
        Ok(Self {
            id,
            visual_objects,
            ground_truth,
        })
    }

    pub fn dim(&self) -> usize {
        self.visual_objects[0].embedding.dim()
    }

    pub fn frame_count(&self) -> usize {
        let first = self.visual_objects[0].frame_span.0;
        let last = self.visual_objects[self.visual_objects.len() - 1].frame_span.1;
        last - first + 1
    }
}

/// Groups a frame sequence into visual objects.
///
/// A frame joins the current segment unless its distance to the segment's
/// running centroid exceeds `similarity_threshold`, in which case it opens a
/// new segment. Each visual object carries the centroid of its segment.
pub fn segment_encounter(
    id: EncounterId,
    frames: &[EmbeddingVector],
    similarity_threshold: f64,
    ids: &mut IdAllocator,
) -> Result<Encounter> {
    if frames.is_empty() {
        return Err(Error::invalid("cannot segment an empty frame sequence"));
    }
    if similarity_threshold.is_nan() || similarity_threshold <= 0.0 {
        return Err(Error::invalid(format!(
            "similarity threshold must be positive, got {similarity_threshold}"
        )));
    }
    let dim = frames[0].dim();
    if let Some(bad) = frames.iter().find(|f| f.dim() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.dim(),
        });
    }

    let mut segments: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    let mut start = 0;
    let mut sum = frames[0].as_slice().to_vec();
    for (i, frame) in frames.iter().enumerate().skip(1) {
        let count = (i - start) as f64;
        let dist_sq: f64 = frame
            .as_slice()
            .iter()
            .zip(&sum)
            .map(|(x, s)| {
                let d = x - s / count;
                d * d
            })
            .sum();
        if dist_sq.sqrt() > similarity_threshold {
            segments.push((start, i - 1, std::mem::replace(&mut sum, frame.as_slice().to_vec())));
            start = i;
        } else {
            for (s, x) in sum.iter_mut().zip(frame.as_slice()) {
                *s += x;
            }
        }
    }
    segments.push((start, frames.len() - 1, sum));

    let visual_objects = segments
        .into_iter()
        .map(|(start, end, sum)| {
            let n = (end - start + 1) as f64;
            VisualObject {
                id: ids.next_id(),
                embedding: EmbeddingVector::from_raw(sum.into_iter().map(|s| s / n).collect()),
                frame_span: (start, end),
                encounter_id: id.clone(),
            }
        })
        .collect();
    Encounter::new(id, visual_objects, None)
}
