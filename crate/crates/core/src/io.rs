//! Line-delimited JSON embedding files.
//!
//! One encounter per line:
//!
//! ```text
//! {"encounter_id": "mug#0", "ground_truth": "root/1/0", "frames": [[...], ...], "segment_threshold": 0.8}
//! {"encounter_id": "mug#1", "visual_objects": [[...], ...]}
//! ```
//!
//! Records either carry raw `frames` (segmented on load with the record's
//! `segment_threshold`) or ready-made `visual_objects`. Every vector in a
//! file must have the same dimension. Blank lines are ignored.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{segment_encounter, EmbeddingVector, Encounter, EncounterId, IdAllocator, VisualObject};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    encounter_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground_truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frames: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segment_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    visual_objects: Option<Vec<Vec<f64>>>,
}

pub fn load_embedding_file(path: impl AsRef<Path>) -> Result<Vec<Encounter>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_embedding_lines(BufReader::new(file), path)
}

/// Parses embedding records from any reader. `origin` is only used in error
/// messages.
pub fn parse_embedding_lines<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<Encounter>> {
    let mut ids = IdAllocator::default();
    let mut dim: Option<usize> = None;
    let mut encounters = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let parse_err = |message: String| Error::Parse {
            path: origin.to_owned(),
            line: lineno,
            message,
        };
        let line = line.map_err(|source| Error::Io {
            path: origin.to_owned(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let id = EncounterId(record.encounter_id);

        let vectors = |raw: Vec<Vec<f64>>, dim: &mut Option<usize>| -> Result<Vec<EmbeddingVector>> {
            if raw.is_empty() {
                return Err(parse_err("empty vector list".into()));
            }
            raw.into_iter()
                .map(|v| {
                    let v = EmbeddingVector::new(v).map_err(|e| parse_err(e.to_string()))?;
                    match *dim {
                        None => *dim = Some(v.dim()),
                        Some(d) if d != v.dim() => {
                            return Err(parse_err(format!(
                                "dimension {} differs from the file's dimension {d}",
                                v.dim()
                            )))
                        }
                        Some(_) => {}
                    }
                    Ok(v)
                })
                .collect()
        };

        let mut encounter = match (record.frames, record.visual_objects) {
            (Some(frames), None) => {
                let threshold = record
                    .segment_threshold
                    .ok_or_else(|| parse_err("`frames` requires `segment_threshold`".into()))?;
                let frames = vectors(frames, &mut dim)?;
                segment_encounter(id, &frames, threshold, &mut ids)
                    .map_err(|e| parse_err(e.to_string()))?
            }
            (None, Some(vos)) => {
                if record.segment_threshold.is_some() {
                    return Err(parse_err(
                        "`segment_threshold` only applies to `frames`".into(),
                    ));
                }
                let vos = vectors(vos, &mut dim)?
                    .into_iter()
                    .enumerate()
                    .map(|(k, embedding)| VisualObject {
                        id: ids.next_id(),
                        embedding,
                        frame_span: (k, k),
                        encounter_id: id.clone(),
                    })
                    .collect();
                Encounter::new(id, vos, None).map_err(|e| parse_err(e.to_string()))?
            }
            _ => {
                return Err(parse_err(
                    "exactly one of `frames` or `visual_objects` is required".into(),
                ))
            }
        };
        encounter.ground_truth = record.ground_truth;
        encounters.push(encounter);
    }
    Ok(encounters)
}

/// Writes encounters as `visual_objects` records.
pub fn write_embedding_file(path: impl AsRef<Path>, encounters: &[Encounter]) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.to_owned(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for e in encounters {
        let record = Record {
            encounter_id: e.id.0.clone(),
            ground_truth: e.ground_truth.clone(),
            frames: None,
            segment_threshold: None,
            visual_objects: Some(
                e.visual_objects
                    .iter()
                    .map(|v| v.embedding.as_slice().to_vec())
                    .collect(),
            ),
        };
        serde_json::to_writer(&mut out, &record).map_err(|e| io_err(e.into()))?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}
