//! The placement dialogue between the learner and its user.
//!
//! For each new encounter the learner predicts a genus, climbs from it until
//! the user confirms a genus, then walks down asking about children until one
//! of the placing actions applies:
//!
//! * **Merge**: the encounter is another sighting of an existing object.
//! * **NewChild**: it is a new object directly under the current genus.
//! * **InsertIntermediate**: it shares a genus with one child that the
//!   hierarchy does not have yet; a node for that genus is created above the
//!   child and the new object.
//!
//! Confirming a child as genus moves the walk into it (**Descend**).
//!
//! The dialogue is a state machine that only reads the hierarchy. All
//! mutations are applied once a placement is decided, so a dialogue that is
//! abandoned half-way leaves the hierarchy untouched.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, OracleError, Result};
use crate::evm::EvmConfig;
use crate::hierarchy::{Hierarchy, NodeId};
use crate::model::{Encounter, EncounterId};
use crate::recognition::{
    rejection_threshold, Prediction, Recognizer, SupervisionMemory, SupervisionRecord, TraceStep,
};
use crate::synthetic::{labels, GroundTruthTree, ROOT_LABEL};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Query {
    /// Is `node` a genus of (or the same object as) the encounter?
    GenusOf { node: NodeId },
    /// Is the encounter another sighting of the object `node`?
    SameObject { node: NodeId },
    /// Do the encounter and `sibling` share a genus strictly more specific
    /// than `under`?
    SharesGenusBelow { sibling: NodeId, under: NodeId },
}

impl std::fmt::Display for Query {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Query::GenusOf { node } => write!(f, "is {node} a genus of the encounter?"),
            Query::SameObject { node } => write!(f, "is the encounter the same object as {node}?"),
            Query::SharesGenusBelow { sibling, under } => {
                write!(f, "do the encounter and {sibling} share a genus below {under}?")
            }
        }
    }
}

pub trait Oracle {
    fn genus_of(&mut self, h: &Hierarchy, e: &Encounter, node: NodeId) -> Result<bool, OracleError>;

    fn same_object(&mut self, h: &Hierarchy, e: &Encounter, node: NodeId) -> Result<bool, OracleError>;

    fn shares_genus_below(
        &mut self,
        h: &Hierarchy,
        e: &Encounter,
        sibling: NodeId,
        under: NodeId,
    ) -> Result<bool, OracleError>;

    fn answer(&mut self, h: &Hierarchy, e: &Encounter, q: &Query) -> Result<bool, OracleError> {
        match *q {
            Query::GenusOf { node } => self.genus_of(h, e, node),
            Query::SameObject { node } => self.same_object(h, e, node),
            Query::SharesGenusBelow { sibling, under } => self.shares_genus_below(h, e, sibling, under),
        }
    }
}

/// Answers a query from ground-truth labels: `leaf` is the encounter's
/// ground-truth object and `correspondent` maps machine nodes to
/// ground-truth labels.
pub fn ground_truth_answer<F>(query: &Query, leaf: &str, correspondent: F) -> Result<bool, OracleError>
where
    F: Fn(NodeId) -> Option<String>,
{
    let corr = |n: NodeId| {
        correspondent(n)
            .ok_or_else(|| OracleError::Inconsistent(format!("{n} has no ground-truth correspondent")))
    };
    Ok(match *query {
        Query::GenusOf { node } => labels::is_ancestor_or_self(&corr(node)?, leaf),
        Query::SameObject { node } => corr(node)? == leaf,
        Query::SharesGenusBelow { sibling, under } => {
            let lca = labels::common_ancestor(&corr(sibling)?, leaf);
            let under = corr(under)?;
            lca != under && labels::is_ancestor_or_self(&under, &lca)
        }
    })
}

/// A user simulated from the ground-truth taxonomy. Machine nodes map to
/// ground-truth nodes through their annotations; the hierarchy root maps to
/// the ground-truth root.
#[derive(Clone, Debug)]
pub struct SimulatedOracle {
    labels: HashSet<String>,
}

impl SimulatedOracle {
    pub fn new(tree: &GroundTruthTree) -> Self {
        Self::from_labels(tree.nodes.iter().map(|n| n.label.clone()))
    }

    pub fn from_labels(labels: impl IntoIterator<Item = String>) -> Self {
        let mut labels: HashSet<String> = labels.into_iter().collect();
        labels.insert(ROOT_LABEL.to_owned());
        Self { labels }
    }

    fn ask(&self, h: &Hierarchy, e: &Encounter, q: &Query) -> Result<bool, OracleError> {
        let leaf = e
            .ground_truth
            .as_deref()
            .filter(|l| self.labels.contains(*l))
            .ok_or_else(|| OracleError::Inconsistent(format!("encounter {} has no known ground truth", e.id)))?;
        ground_truth_answer(q, leaf, |n| {
            let label = match h.annotation(n).ok()? {
                Some(a) => a.to_owned(),
                None if n == h.root() => ROOT_LABEL.to_owned(),
                None => return None,
            };
            self.labels.contains(&label).then_some(label)
        })
    }
}

impl Oracle for SimulatedOracle {
    fn genus_of(&mut self, h: &Hierarchy, e: &Encounter, node: NodeId) -> Result<bool, OracleError> {
        self.ask(h, e, &Query::GenusOf { node })
    }

    fn same_object(&mut self, h: &Hierarchy, e: &Encounter, node: NodeId) -> Result<bool, OracleError> {
        self.ask(h, e, &Query::SameObject { node })
    }

    fn shares_genus_below(
        &mut self,
        h: &Hierarchy,
        e: &Encounter,
        sibling: NodeId,
        under: NodeId,
    ) -> Result<bool, OracleError> {
        self.ask(h, e, &Query::SharesGenusBelow { sibling, under })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Descend,
    Merge,
    NewChild,
    InsertIntermediate,
}

/// A decided placement, not yet applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Placement {
    Merge { node: NodeId },
    NewChild { parent: NodeId },
    InsertIntermediate { parent: NodeId, sibling: NodeId },
}

impl Placement {
    pub fn action(&self) -> Action {
        match self {
            Placement::Merge { .. } => Action::Merge,
            Placement::NewChild { .. } => Action::NewChild,
            Placement::InsertIntermediate { .. } => Action::InsertIntermediate,
        }
    }

    /// The most specific node that existed before the placement and that the
    /// user confirmed for the encounter.
    pub fn confirmed_node(&self) -> NodeId {
        match *self {
            Placement::Merge { node } => node,
            Placement::NewChild { parent } | Placement::InsertIntermediate { parent, .. } => parent,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Awaiting {
    /// Ascending: is this node a genus of the encounter?
    Ascend(NodeId),
    /// The current genus holds encounters: is it the same object?
    SameAsGenus,
    ChildGenus(NodeId),
    ChildSharesBelow(NodeId),
}

#[derive(Clone, Debug, PartialEq)]
enum Phase {
    Asking {
        awaiting: Awaiting,
        /// Current genus and its ranked children (empty while ascending).
        genus: NodeId,
        ranked: Vec<NodeId>,
        next: usize,
    },
    Decided(Placement),
}

/// What the dialogue needs next.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Step {
    Ask(Query),
    Decided(Placement),
}

/// One encounter's placement dialogue.
#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    phase: Phase,
    queries_asked: usize,
    descents: usize,
    children_inspected: usize,
    /// First node confirmed as genus (the end of the ascent).
    confirmed_genus: Option<NodeId>,
    /// Answers already given in this dialogue; a question is never asked twice.
    known: HashMap<Query, bool>,
}

impl Dialogue {
    /// Starts by climbing from `start` to the first confirmed genus.
    pub fn ascending(h: &Hierarchy, rec: &Recognizer, e: &Encounter, start: NodeId) -> Result<Self> {
        let mut d = Self::blank();
        d.climb(h, rec, e, start)?;
        d.resolve_known(h, rec, e)?;
        Ok(d)
    }

    /// Starts directly at a genus already known to hold for the encounter.
    pub fn refining(h: &Hierarchy, rec: &Recognizer, e: &Encounter, genus: NodeId) -> Result<Self> {
        let mut d = Self::blank();
        d.confirmed_genus = Some(genus);
        d.enter_genus(h, rec, e, genus)?;
        d.resolve_known(h, rec, e)?;
        Ok(d)
    }

    fn blank() -> Self {
        Self {
            phase: Phase::Decided(Placement::NewChild { parent: NodeId(0) }),
            queries_asked: 0,
            descents: 0,
            children_inspected: 0,
            confirmed_genus: None,
            known: HashMap::new(),
        }
    }

    pub fn step(&self) -> Step {
        match &self.phase {
            Phase::Decided(p) => Step::Decided(*p),
            Phase::Asking { awaiting, genus, .. } => Step::Ask(match *awaiting {
                Awaiting::Ascend(node) => Query::GenusOf { node },
                Awaiting::SameAsGenus => Query::SameObject { node: *genus },
                Awaiting::ChildGenus(node) => Query::GenusOf { node },
                Awaiting::ChildSharesBelow(sibling) => Query::SharesGenusBelow {
                    sibling,
                    under: *genus,
                },
            }),
        }
    }

    pub fn queries_asked(&self) -> usize {
        self.queries_asked
    }

    pub fn descents(&self) -> usize {
        self.descents
    }

    pub fn children_inspected(&self) -> usize {
        self.children_inspected
    }

    pub fn confirmed_genus(&self) -> Option<NodeId> {
        self.confirmed_genus
    }

    /// Consumes the answer to the pending query.
    pub fn answer(&mut self, h: &Hierarchy, rec: &Recognizer, e: &Encounter, yes: bool) -> Result<()> {
        let Step::Ask(q) = self.step() else {
            return Err(Error::Precondition("no query is pending".into()));
        };
        self.queries_asked += 1;
        self.known.insert(q, yes);
        self.advance(h, rec, e, yes)?;
        self.resolve_known(h, rec, e)
    }

    fn resolve_known(&mut self, h: &Hierarchy, rec: &Recognizer, e: &Encounter) -> Result<()> {
        while let Step::Ask(q) = self.step() {
            match self.known.get(&q) {
                Some(&yes) => self.advance(h, rec, e, yes)?,
                None => break,
            }
        }
        Ok(())
    }

    fn advance(&mut self, h: &Hierarchy, rec: &Recognizer, e: &Encounter, yes: bool) -> Result<()> {
        let Phase::Asking {
            awaiting,
            genus,
            ranked,
            next,
        } = &self.phase
        else {
            return Err(Error::Precondition("no query is pending".into()));
        };
        let (awaiting, genus, next) = (*awaiting, *genus, *next);
        match (awaiting, yes) {
            (Awaiting::Ascend(node), true) => {
                self.confirmed_genus = Some(node);
                self.enter_genus(h, rec, e, node)?;
            }
            (Awaiting::Ascend(node), false) => {
                let parent = h.parent_of(node)?;
                self.climb(h, rec, e, parent)?;
            }
            (Awaiting::SameAsGenus, true) => {
                self.phase = Phase::Decided(Placement::Merge { node: genus });
            }
            (Awaiting::SameAsGenus, false) => {
                self.enter_children(h, rec, e, genus)?;
            }
            (Awaiting::ChildGenus(child), true) => {
                self.descents += 1;
                self.enter_genus(h, rec, e, child)?;
            }
            (Awaiting::ChildGenus(child), false) => {
                let ranked = ranked.clone();
                self.phase = Phase::Asking {
                    awaiting: Awaiting::ChildSharesBelow(child),
                    genus,
                    ranked,
                    next,
                };
            }
            (Awaiting::ChildSharesBelow(child), true) => {
                self.phase = Phase::Decided(Placement::InsertIntermediate {
                    parent: genus,
                    sibling: child,
                });
            }
            (Awaiting::ChildSharesBelow(_), false) => {
                let ranked = ranked.clone();
                self.offer_child(genus, ranked, next + 1);
            }
        }
        Ok(())
    }

    fn climb(&mut self, h: &Hierarchy, rec: &Recognizer, e: &Encounter, node: NodeId) -> Result<()> {
        if node == h.root() {
            self.confirmed_genus = Some(node);
            return self.enter_genus(h, rec, e, node);
        }
        self.phase = Phase::Asking {
            awaiting: Awaiting::Ascend(node),
            genus: node,
            ranked: Vec::new(),
            next: 0,
        };
        Ok(())
    }

    fn enter_genus(&mut self, h: &Hierarchy, rec: &Recognizer, e: &Encounter, genus: NodeId) -> Result<()> {
        if genus != h.root() && !h.node(genus)?.encounters.is_empty() {
            self.phase = Phase::Asking {
                awaiting: Awaiting::SameAsGenus,
                genus,
                ranked: Vec::new(),
                next: 0,
            };
            return Ok(());
        }
        self.enter_children(h, rec, e, genus)
    }

    fn enter_children(&mut self, h: &Hierarchy, rec: &Recognizer, e: &Encounter, genus: NodeId) -> Result<()> {
        let ranked = rec
            .rank_children(h, genus, e)?
            .into_iter()
            .map(|(c, _)| c)
            .collect();
        self.offer_child(genus, ranked, 0);
        Ok(())
    }

    fn offer_child(&mut self, genus: NodeId, ranked: Vec<NodeId>, next: usize) {
        self.phase = match ranked.get(next) {
            Some(&child) => {
                self.children_inspected += 1;
                Phase::Asking {
                    awaiting: Awaiting::ChildGenus(child),
                    genus,
                    ranked,
                    next,
                }
            }
            None => Phase::Decided(Placement::NewChild { parent: genus }),
        };
    }
}

/// Climbs from `start` until the oracle confirms a genus. The root always
/// qualifies and is never asked. Returns the genus and the number of
/// questions asked.
pub fn ascend_to_valid_genus(
    h: &Hierarchy,
    e: &Encounter,
    start: NodeId,
    oracle: &mut dyn Oracle,
) -> Result<(NodeId, usize)> {
    let mut node = start;
    let mut asked = 0;
    while node != h.root() {
        asked += 1;
        if oracle.genus_of(h, e, node)? {
            break;
        }
        node = h.parent_of(node)?;
    }
    Ok((node, asked))
}

/// Result of applying a placement to the hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placed {
    pub action: Action,
    /// Node now holding the encounter.
    pub placed_node: NodeId,
    /// Node created above the sibling by `InsertIntermediate`.
    pub intermediate: Option<NodeId>,
    pub confirmed_node: NodeId,
    pub queries_asked: usize,
}

/// Applies a decided placement. New nodes are annotated from the
/// encounter's ground truth when available: the new object with its own
/// label, an intermediate with the common ancestor of its two children.
pub fn apply_placement(h: &mut Hierarchy, e: Encounter, placement: Placement) -> Result<(NodeId, Option<NodeId>)> {
    match placement {
        Placement::Merge { node } => {
            h.add_encounter_to_node(node, e)?;
            Ok((node, None))
        }
        Placement::NewChild { parent } => {
            let ann = e.ground_truth.clone();
            Ok((h.add_object_node(parent, e, ann)?, None))
        }
        Placement::InsertIntermediate { parent, sibling } => {
            let leaf_ann = e.ground_truth.clone();
            let mid_ann = match (h.annotation(sibling)?, leaf_ann.as_deref()) {
                (Some(a), Some(b)) => Some(labels::common_ancestor(a, b)),
                _ => None,
            };
            let (m, leaf) = h.insert_intermediate(parent, sibling, e, mid_ann, leaf_ann)?;
            Ok((leaf, Some(m)))
        }
    }
}

/// Walks down from `genus` (already confirmed) and places `e`.
pub fn refine_genus(
    h: &mut Hierarchy,
    rec: &Recognizer,
    genus: NodeId,
    e: Encounter,
    oracle: &mut dyn Oracle,
) -> Result<Placed> {
    let mut d = Dialogue::refining(h, rec, &e, genus)?;
    let placement = drive(h, rec, &e, &mut d, oracle)?;
    let (placed_node, intermediate) = apply_placement(h, e, placement)?;
    Ok(Placed {
        action: placement.action(),
        placed_node,
        intermediate,
        confirmed_node: placement.confirmed_node(),
        queries_asked: d.queries_asked(),
    })
}

fn drive(
    h: &Hierarchy,
    rec: &Recognizer,
    e: &Encounter,
    d: &mut Dialogue,
    oracle: &mut dyn Oracle,
) -> Result<Placement> {
    loop {
        match d.step() {
            Step::Decided(p) => return Ok(p),
            Step::Ask(q) => {
                let yes = oracle.answer(h, e, &q)?;
                d.answer(h, rec, e, yes)?;
            }
        }
    }
}

/// Everything known about one processed encounter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacementOutcome {
    pub iteration: usize,
    pub encounter_id: EncounterId,
    pub threshold: f64,
    /// The learner's suggested starting node.
    pub predicted: Prediction,
    /// First genus confirmed while climbing from the prediction.
    pub ascended_to: NodeId,
    #[serde(flatten)]
    pub placed: Placed,
    pub descents: usize,
    pub children_inspected: usize,
    /// Edges between the prediction and the placed node.
    pub predict_genus_cost: usize,
    /// Edges between the root and the placed node.
    pub naive_cost: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TranscriptEvent {
    Query {
        /// Logical clock, increasing by one per event.
        timestamp: u64,
        query_id: u64,
        encounter_id: EncounterId,
        #[serde(flatten)]
        query: Query,
    },
    Answer {
        timestamp: u64,
        query_id: u64,
        answer: bool,
    },
    Placement {
        timestamp: u64,
        outcome: PlacementOutcome,
    },
}

pub fn write_transcript(path: impl AsRef<Path>, events: &[TranscriptEvent]) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.to_owned(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for ev in events {
        serde_json::to_writer(&mut out, ev).map_err(|e| io_err(e.into()))?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// An encounter whose dialogue is in progress.
#[derive(Clone, Debug)]
pub struct ActiveEncounter {
    pub encounter: Encounter,
    pub threshold: f64,
    pub predicted: Prediction,
    traces: Vec<Vec<TraceStep>>,
    dialogue: Dialogue,
    pending_query: Option<u64>,
}

impl ActiveEncounter {
    pub fn step(&self) -> Step {
        self.dialogue.step()
    }

    /// Id of the query currently awaiting an answer.
    pub fn pending_query(&self) -> Option<(u64, Query)> {
        match (self.pending_query, self.dialogue.step()) {
            (Some(id), Step::Ask(q)) => Some((id, q)),
            _ => None,
        }
    }
}

/// The learning loop state: hierarchy, recognizer, supervision memory and
/// the session transcript.
#[derive(Clone, Debug)]
pub struct Learner {
    hierarchy: Hierarchy,
    recognizer: Recognizer,
    memory: SupervisionMemory,
    transcript: Vec<TranscriptEvent>,
    outcomes: Vec<PlacementOutcome>,
    clock: u64,
    next_query_id: u64,
}

impl Learner {
    pub fn new(config: EvmConfig) -> Self {
        Self::with_hierarchy(Hierarchy::new(), config)
    }

    pub fn with_hierarchy(hierarchy: Hierarchy, config: EvmConfig) -> Self {
        Self {
            hierarchy,
            recognizer: Recognizer::new(config),
            memory: SupervisionMemory::new(),
            transcript: Vec::new(),
            outcomes: Vec::new(),
            clock: 0,
            next_query_id: 0,
        }
    }

    pub fn hierarchy(&self) -> &Hierarchy {
        &self.hierarchy
    }

    pub fn recognizer(&self) -> &Recognizer {
        &self.recognizer
    }

    pub fn memory(&self) -> &SupervisionMemory {
        &self.memory
    }

    pub fn transcript(&self) -> &[TranscriptEvent] {
        &self.transcript
    }

    pub fn outcomes(&self) -> &[PlacementOutcome] {
        &self.outcomes
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Predicts a genus for `e` and opens its dialogue.
    pub fn begin(&mut self, encounter: Encounter) -> Result<ActiveEncounter> {
        let h = &self.hierarchy;
        if h.encounter(&encounter.id).is_some() {
            return Err(Error::Precondition(format!("encounter {} is already placed", encounter.id)));
        }
        let threshold = rejection_threshold(&self.memory);
        let predicted = self.recognizer.predict_genus(h, &encounter, threshold)?;
        let traces = encounter
            .visual_objects
            .iter()
            .map(|v| self.recognizer.greedy_trace(h, &v.embedding))
            .collect::<Result<Vec<_>>>()?;
        let dialogue = Dialogue::ascending(h, &self.recognizer, &encounter, predicted.node)?;
        let mut active = ActiveEncounter {
            encounter,
            threshold,
            predicted,
            traces,
            dialogue,
            pending_query: None,
        };
        self.log_pending(&mut active);
        Ok(active)
    }

    fn log_pending(&mut self, active: &mut ActiveEncounter) {
        if let Step::Ask(query) = active.dialogue.step() {
            let query_id = self.next_query_id;
            self.next_query_id += 1;
            active.pending_query = Some(query_id);
            let timestamp = self.tick();
            self.transcript.push(TranscriptEvent::Query {
                timestamp,
                query_id,
                encounter_id: active.encounter.id.clone(),
                query,
            });
        } else {
            active.pending_query = None;
        }
    }

    pub fn answer(&mut self, active: &mut ActiveEncounter, yes: bool) -> Result<()> {
        let Some(query_id) = active.pending_query else {
            return Err(Error::Precondition("no query is pending".into()));
        };
        active
            .dialogue
            .answer(&self.hierarchy, &self.recognizer, &active.encounter, yes)?;
        let timestamp = self.tick();
        self.transcript.push(TranscriptEvent::Answer {
            timestamp,
            query_id,
            answer: yes,
        });
        self.log_pending(active);
        Ok(())
    }

    /// Applies the decided placement, records supervision and returns the
    /// outcome.
    pub fn finish(&mut self, active: ActiveEncounter) -> Result<PlacementOutcome> {
        let Step::Decided(placement) = active.dialogue.step() else {
            return Err(Error::Precondition("placement not decided yet".into()));
        };
        let ActiveEncounter {
            encounter,
            threshold,
            predicted,
            traces,
            dialogue,
            ..
        } = active;
        let confirmed_node = placement.confirmed_node();
        let records: Vec<SupervisionRecord> = encounter
            .visual_objects
            .iter()
            .zip(traces)
            .map(|(v, trace)| SupervisionRecord {
                visual_object: v.clone(),
                confirmed_node,
                prediction_trace: trace,
            })
            .collect();
        let encounter_id = encounter.id.clone();
        let (placed_node, intermediate) = apply_placement(&mut self.hierarchy, encounter, placement)?;
        for r in records {
            self.memory.push(r)?;
        }
        let h = &self.hierarchy;
        let outcome = PlacementOutcome {
            iteration: self.outcomes.len(),
            encounter_id,
            threshold,
            predicted,
            ascended_to: dialogue.confirmed_genus().unwrap_or(h.root()),
            placed: Placed {
                action: placement.action(),
                placed_node,
                intermediate,
                confirmed_node,
                queries_asked: dialogue.queries_asked(),
            },
            descents: dialogue.descents(),
            children_inspected: dialogue.children_inspected(),
            predict_genus_cost: h.geodesic_distance(predicted.node, placed_node)?,
            naive_cost: h.depth(placed_node)?,
        };
        let timestamp = self.tick();
        self.transcript.push(TranscriptEvent::Placement {
            timestamp,
            outcome: outcome.clone(),
        });
        self.outcomes.push(outcome.clone());
        Ok(outcome)
    }

    /// Runs the whole loop for one encounter against `oracle`.
    ///
    /// If the oracle fails, the error is returned and neither the hierarchy
    /// nor the supervision memory has changed.
    pub fn process_encounter(&mut self, e: Encounter, oracle: &mut dyn Oracle) -> Result<PlacementOutcome> {
        let mut active = self.begin(e)?;
        loop {
            match active.step() {
                Step::Decided(_) => return self.finish(active),
                Step::Ask(q) => {
                    let yes = oracle.answer(&self.hierarchy, &active.encounter, &q)?;
                    self.answer(&mut active, yes)?;
                }
            }
        }
    }

    /// Processes the front of `queue`. On an oracle failure the encounter is
    /// put back at the front.
    pub fn process_next(
        &mut self,
        queue: &mut VecDeque<Encounter>,
        oracle: &mut dyn Oracle,
    ) -> Option<Result<PlacementOutcome>> {
        let e = queue.pop_front()?;
        let keep = e.clone();
        let result = self.process_encounter(e, oracle);
        if let Err(Error::Oracle(_)) = result {
            queue.push_front(keep);
        }
        Some(result)
    }
}

/// Violations of the ground-truth consistency of an annotated hierarchy:
/// every node must have a correspondent, a parent's correspondent must be a
/// proper ancestor of its child's, siblings must meet exactly at their
/// parent's correspondent (so they are distinct), and every encounter must
/// sit on the node of its own ground-truth object.
pub fn consistency_violations(h: &Hierarchy) -> Vec<String> {
    let mut out = Vec::new();
    let corr = |n: NodeId| -> Option<String> {
        match h.annotation(n).ok()? {
            Some(a) => Some(a.to_owned()),
            None if n == h.root() => Some(ROOT_LABEL.to_owned()),
            None => None,
        }
    };
    for node in h.nodes() {
        let Some(c) = corr(node.id) else {
            out.push(format!("{} has no correspondent", node.id));
            continue;
        };
        if let Some(p) = node.parent {
            match corr(p) {
                Some(pc) if pc != c && labels::is_ancestor_or_self(&pc, &c) => {}
                Some(pc) => out.push(format!("{} ({c}) is not below its parent {p} ({pc})", node.id)),
                None => {}
            }
        }
        let kids: Vec<(NodeId, Option<String>)> = node.children.iter().map(|&k| (k, corr(k))).collect();
        for (i, (a, ca)) in kids.iter().enumerate() {
            for (b, cb) in &kids[i + 1..] {
                if let (Some(ca), Some(cb)) = (ca, cb) {
                    let meet = labels::common_ancestor(ca, cb);
                    if meet != c {
                        out.push(format!("siblings {a} ({ca}) and {b} ({cb}) meet at {meet}, not {c}"));
                    }
                }
            }
        }
        for eid in &node.encounters {
            let gt = h.encounter(eid).and_then(|e| e.ground_truth.clone());
            if gt.as_deref() != Some(c.as_str()) {
                out.push(format!("encounter {eid} ({gt:?}) placed on {} ({c})", node.id));
            }
        }
    }
    out
}
