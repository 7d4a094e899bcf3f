//! Genus prediction over the machine hierarchy.
//!
//! A visual object descends from the root: at each node the child with the
//! highest inclusion probability is taken while that probability exceeds the
//! rejection threshold. An encounter's genus is the best of its visual
//! objects' predictions.
//!
//! The class model of a child contrasts the child's subtree (positives)
//! against its siblings' subtrees (negatives). Models are cached per child
//! and refitted when the parent's subtree changes.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evm::{fit_class_model, inclusion_probability, EvmClassModel, EvmConfig};
use crate::hierarchy::{Hierarchy, NodeId};
use crate::model::{EmbeddingVector, Encounter, VisualObject};

/// Threshold used before any feedback is available.
pub const DEFAULT_REJECTION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub node: NodeId,
    pub probability: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub node: NodeId,
    pub probability: f64,
}

/// Feedback for one visual object.
///
/// `prediction_trace` is the greedy descent recorded at prediction time,
/// starting with `(root, 1.0)` and continued to a leaf regardless of the
/// threshold, so any threshold can be evaluated against it afterwards.
/// `confirmed_node` is the most specific node that already existed when the
/// prediction was made and that the user confirmed for the encounter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisionRecord {
    pub visual_object: VisualObject,
    pub confirmed_node: NodeId,
    pub prediction_trace: Vec<TraceStep>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SupervisionMemory {
    records: Vec<SupervisionRecord>,
}

impl SupervisionMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: SupervisionRecord) -> Result<()> {
        if record.prediction_trace.is_empty() {
            return Err(Error::invalid("prediction trace must start at the root"));
        }
        if record
            .prediction_trace
            .iter()
            .any(|s| !(0.0..=1.0).contains(&s.probability))
        {
            return Err(Error::invalid("trace probabilities must lie in [0, 1]"));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[SupervisionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Where a descent along `trace` stops under threshold `lambda`.
pub fn stop_on_trace(trace: &[TraceStep], lambda: f64) -> Prediction {
    let mut at = trace[0];
    for step in &trace[1..] {
        if step.probability > lambda {
            at = *step;
        } else {
            break;
        }
    }
    Prediction {
        node: at.node,
        probability: at.probability,
    }
}

/// Number of records whose trace stops exactly at the confirmed node under
/// `lambda`.
pub fn replay_accuracy(memory: &SupervisionMemory, lambda: f64) -> usize {
    memory
        .records
        .iter()
        .filter(|r| stop_on_trace(&r.prediction_trace, lambda).node == r.confirmed_node)
        .count()
}

/// Rejection threshold maximising the number of correct predictions on the
/// supervision memory.
///
/// Correctness only changes where the threshold crosses a recorded
/// probability, so it suffices to try 0, 1 and the midpoints between
/// consecutive distinct recorded probabilities. Each record is correct on a
/// half-open interval of thresholds; counts come from a sweep over those
/// intervals. Ties go to the lowest candidate.
pub fn rejection_threshold(memory: &SupervisionMemory) -> f64 {
    if memory.is_empty() {
        return DEFAULT_REJECTION_THRESHOLD;
    }
    let mut probs: Vec<f64> = memory
        .records
        .iter()
        .flat_map(|r| r.prediction_trace.iter().map(|s| s.probability))
        .collect();
    probs.sort_by(f64::total_cmp);
    probs.dedup();
    let mut candidates = Vec::with_capacity(probs.len() + 1);
    candidates.push(0.0);
    candidates.extend(probs.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(1.0);
    candidates.dedup();

    let mut diff = vec![0i64; candidates.len() + 1];
    for r in &memory.records {
        let trace = &r.prediction_trace;
        let Some(k) = trace.iter().position(|s| s.node == r.confirmed_node) else {
            continue;
        };
        // Correct iff every step up to k is accepted and step k+1 rejected.
        let upper = trace[1..=k]
            .iter()
            .map(|s| s.probability)
            .fold(f64::INFINITY, f64::min);
        let lower = trace.get(k + 1).map_or(f64::NEG_INFINITY, |s| s.probability);
        if lower >= upper {
            continue;
        }
        let start = candidates.partition_point(|&c| c < lower);
        let end = candidates.partition_point(|&c| c < upper);
        diff[start] += 1;
        diff[end] -= 1;
    }

    let mut best = (0i64, candidates[0]);
    let mut running = 0i64;
    for (i, &c) in candidates.iter().enumerate() {
        running += diff[i];
        if running > best.0 {
            best = (running, c);
        }
    }
    best.1
}

#[derive(Debug)]
struct CachedModel {
    parent: NodeId,
    parent_version: u64,
    model: Arc<EvmClassModel>,
}

/// Computes child probabilities and genus predictions for a hierarchy,
/// caching one class model per child.
#[derive(Debug, Default)]
pub struct Recognizer {
    config: EvmConfig,
    cache: Mutex<HashMap<NodeId, CachedModel>>,
}

impl Clone for Recognizer {
    fn clone(&self) -> Self {
        Self::new(self.config)
    }
}

impl Recognizer {
    pub fn new(config: EvmConfig) -> Self {
        Self {
            config,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &EvmConfig {
        &self.config
    }

    fn cache(&self) -> MutexGuard<'_, HashMap<NodeId, CachedModel>> {
        self.cache.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Class model of `child` against its siblings, fitted from scratch.
    pub fn fit_child_model(&self, h: &Hierarchy, child: NodeId) -> Result<EvmClassModel> {
        let parent = h.parent_of(child)?;
        let positives = h.subtree_visual_objects(child)?;
        if positives.is_empty() {
            return Err(Error::Precondition(format!("{child} has no visual objects")));
        }
        let mut negatives = Vec::new();
        for &s in h.children_of(parent)? {
            if s != child {
                negatives.extend(h.subtree_visual_objects(s)?);
            }
        }
        fit_class_model(&positives, &negatives, &self.config)
    }

    pub fn child_model(&self, h: &Hierarchy, child: NodeId) -> Result<Arc<EvmClassModel>> {
        let parent = h.parent_of(child)?;
        let version = h.version(parent)?;
        if let Some(c) = self.cache().get(&child) {
            if c.parent == parent && c.parent_version == version {
                return Ok(Arc::clone(&c.model));
            }
        }
        let model = Arc::new(self.fit_child_model(h, child)?);
        self.cache().insert(
            child,
            CachedModel {
                parent,
                parent_version: version,
                model: Arc::clone(&model),
            },
        );
        Ok(model)
    }

    pub fn child_probability(&self, h: &Hierarchy, child: NodeId, v: &VisualObject) -> Result<f64> {
        self.probability_of(h, child, &v.embedding)
    }

    fn probability_of(&self, h: &Hierarchy, child: NodeId, x: &EmbeddingVector) -> Result<f64> {
        Ok(inclusion_probability(&*self.child_model(h, child)?, x))
    }

    /// Most probable child of `node`; ties go to the lowest id.
    pub fn best_child(
        &self,
        h: &Hierarchy,
        node: NodeId,
        x: &EmbeddingVector,
    ) -> Result<Option<TraceStep>> {
        let mut best: Option<TraceStep> = None;
        for &c in h.children_of(node)? {
            let p = self.probability_of(h, c, x)?;
            let better = match best {
                None => true,
                Some(b) => p > b.probability || (p == b.probability && c < b.node),
            };
            if better {
                best = Some(TraceStep { node: c, probability: p });
            }
        }
        Ok(best)
    }

    /// Descends from `start` while the best child's probability exceeds
    /// `threshold`, returning the last accepted node and its probability.
    pub fn predict_vo_genus(
        &self,
        h: &Hierarchy,
        v: &VisualObject,
        start: NodeId,
        start_probability: f64,
        threshold: f64,
    ) -> Result<Prediction> {
        let mut at = Prediction {
            node: start,
            probability: start_probability,
        };
        while let Some(best) = self.best_child(h, at.node, &v.embedding)? {
            if best.probability > threshold {
                at = Prediction {
                    node: best.node,
                    probability: best.probability,
                };
            } else {
                break;
            }
        }
        Ok(at)
    }

    /// Genus of an encounter.
    ///
    /// Each visual object descends from `(root, 1.0)`. The running answer
    /// starts at the root and is replaced whenever it is still the root or
    /// when a visual object reaches a strictly higher probability, so the
    /// first of equally probable predictions wins.
    pub fn predict_genus(&self, h: &Hierarchy, e: &Encounter, threshold: f64) -> Result<Prediction> {
        let root = h.root();
        let mut best = Prediction {
            node: root,
            probability: 1.0,
        };
        for v in &e.visual_objects {
            let p = self.predict_vo_genus(h, v, root, 1.0, threshold)?;
            if best.node == root || best.probability < p.probability {
                best = p;
            }
        }
        Ok(best)
    }

    /// Greedy descent from the root to a leaf ignoring the threshold, starting
    /// with `(root, 1.0)`.
    pub fn greedy_trace(&self, h: &Hierarchy, x: &EmbeddingVector) -> Result<Vec<TraceStep>> {
        let mut trace = vec![TraceStep {
            node: h.root(),
            probability: 1.0,
        }];
        while let Some(best) = self.best_child(h, trace[trace.len() - 1].node, x)? {
            trace.push(best);
        }
        Ok(trace)
    }

    /// Children of `node` ordered by how well the encounter's best-matching
    /// visual object fits them (descending; ties by lowest id).
    pub fn rank_children(
        &self,
        h: &Hierarchy,
        node: NodeId,
        e: &Encounter,
    ) -> Result<Vec<(NodeId, f64)>> {
        let mut ranked = Vec::new();
        for &c in h.children_of(node)? {
            let model = self.child_model(h, c)?;
            let score = e
                .visual_objects
                .iter()
                .map(|v| inclusion_probability(&model, &v.embedding))
                .fold(0.0, f64::max);
            ranked.push((c, score));
        }
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(ranked)
    }

    /// Drops every cached model.
    pub fn clear_cache(&self) {
        self.cache().clear();
    }
}
