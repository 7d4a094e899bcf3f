//! One interactive session: a learner, the encounters still to place and the
//! dialogue in progress.

use std::collections::VecDeque;
use std::io::Cursor;
use std::path::Path;

use serde::{Deserialize, Serialize};
use visem_core::evm::{EvmConfig, DEFAULT_TAIL_SIZE};
use visem_core::experiment::run_order;
use visem_core::hierarchy::{Hierarchy, HierarchySnapshot};
use visem_core::interaction::{ActiveEncounter, Learner, PlacementOutcome, Query, Step};
use visem_core::io::parse_embedding_lines;
use visem_core::synthetic::{generate_dataset, GeneratorConfig, ROOT_LABEL};
use visem_core::{Encounter, EncounterId};

use crate::error::ApiError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(GeneratorConfig),
    /// Contents of a line-delimited JSON embedding file.
    Embeddings { jsonl: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub ordering_seed: u64,
    #[serde(default)]
    pub run_index: usize,
    #[serde(default = "default_tail_size")]
    pub tail_size: usize,
}

fn default_tail_size() -> usize {
    DEFAULT_TAIL_SIZE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncounterView {
    pub id: EncounterId,
    pub visual_objects: Vec<Vec<f64>>,
}

impl From<&Encounter> for EncounterView {
    fn from(e: &Encounter) -> Self {
        Self {
            id: e.id.clone(),
            visual_objects: e
                .visual_objects
                .iter()
                .map(|v| v.embedding.as_slice().to_vec())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SessionEvent {
    Query {
        query_id: u64,
        query: Query,
        encounter: EncounterView,
        remaining: usize,
    },
    Placement {
        outcome: PlacementOutcome,
        remaining: usize,
    },
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub predict_genus: usize,
    pub naive: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub placed: usize,
    pub remaining: usize,
    pub iterations: Vec<MetricsRow>,
}

pub struct Session {
    learner: Learner,
    queue: VecDeque<Encounter>,
    active: Option<ActiveEncounter>,
}

impl Session {
    pub fn create(req: CreateSession) -> Result<Self, ApiError> {
        if req.tail_size == 0 {
            return Err(ApiError::bad_request("tail_size must be at least 1"));
        }
        let (encounters, root) = match req.dataset {
            DatasetSpec::Synthetic(cfg) => {
                (generate_dataset(&cfg)?.encounters, Some(ROOT_LABEL.to_owned()))
            }
            DatasetSpec::Embeddings { jsonl } => {
                let es = parse_embedding_lines(Cursor::new(jsonl), Path::new("upload"))?;
                if es.is_empty() {
                    return Err(ApiError::bad_request("embedding upload holds no encounters"));
                }
                (es, None)
            }
        };
        let mut slots: Vec<Option<Encounter>> = encounters.into_iter().map(Some).collect();
        let queue = run_order(slots.len(), req.ordering_seed, req.run_index)
            .into_iter()
            .filter_map(|i| slots[i].take())
            .collect();
        let evm = EvmConfig { tail_size: req.tail_size, ..EvmConfig::default() };
        Ok(Self {
            learner: Learner::with_hierarchy(Hierarchy::with_root_annotation(root), evm),
            queue,
            active: None,
        })
    }

    pub fn remaining(&self) -> usize {
        self.queue.len() + usize::from(self.active.is_some())
    }

    pub fn learner(&self) -> &Learner {
        &self.learner
    }

    /// The pending query, or the next thing that happens: advancing to a new
    /// encounter, or completing a decided placement. Repeated calls return
    /// the same query until it is answered.
    pub fn next_event(&mut self) -> Result<SessionEvent, ApiError> {
        let active = match self.active.take() {
            Some(a) => a,
            None => match self.queue.pop_front() {
                Some(e) => self.learner.begin(e)?,
                None => return Ok(SessionEvent::Done),
            },
        };
        match active.step() {
            Step::Decided(_) => {
                let outcome = self.learner.finish(active)?;
                Ok(SessionEvent::Placement { outcome, remaining: self.remaining() })
            }
            Step::Ask(_) => {
                let (query_id, query) = active
                    .pending_query()
                    .ok_or_else(|| ApiError::internal("query without id"))?;
                let encounter = EncounterView::from(&active.encounter);
                self.active = Some(active);
                Ok(SessionEvent::Query { query_id, query, encounter, remaining: self.remaining() })
            }
        }
    }

    pub fn answer(&mut self, query_id: u64, yes: bool) -> Result<(), ApiError> {
        let pending = self.active.as_ref().and_then(|a| a.pending_query());
        match (pending, self.active.as_mut()) {
            (Some((id, _)), Some(active)) if id == query_id => {
                self.learner.answer(active, yes)?;
                Ok(())
            }
            (Some((id, _)), _) => Err(ApiError::conflict(format!(
                "query {query_id} is not pending (pending: {id})"
            ))),
            _ => Err(ApiError::conflict(format!("query {query_id} is not pending"))),
        }
    }

    pub fn snapshot(&self) -> HierarchySnapshot {
        self.learner.hierarchy().snapshot()
    }

    pub fn metrics(&self) -> Metrics {
        let iterations: Vec<MetricsRow> = self
            .learner
            .outcomes()
            .iter()
            .map(|o| MetricsRow {
                iteration: o.iteration,
                predict_genus: o.predict_genus_cost,
                naive: o.naive_cost,
            })
            .collect();
        Metrics { placed: iterations.len(), remaining: self.remaining(), iterations }
    }
}
