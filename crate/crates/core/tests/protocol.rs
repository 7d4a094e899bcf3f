use std::collections::{HashSet, VecDeque};

use visem_core::evm::EvmConfig;
use visem_core::experiment::{run_on, run_order, Model, RunConfig};
use visem_core::hierarchy::Hierarchy;
use visem_core::interaction::{
    consistency_violations, Action, Learner, Oracle, Query, SimulatedOracle, TranscriptEvent,
};
use visem_core::synthetic::{generate_dataset, labels, GeneratorConfig, ROOT_LABEL};
use visem_core::{Encounter, NodeId, OracleError};

/// Answers like the simulated user but records every question and can be
/// told to drop the connection after a number of answers.
struct Recording {
    inner: SimulatedOracle,
    asked: Vec<Query>,
    fail_after: Option<usize>,
}

impl Oracle for Recording {
    fn genus_of(&mut self, h: &Hierarchy, e: &Encounter, node: NodeId) -> Result<bool, OracleError> {
        self.answer(h, e, &Query::GenusOf { node })
    }
    fn same_object(&mut self, h: &Hierarchy, e: &Encounter, node: NodeId) -> Result<bool, OracleError> {
        self.answer(h, e, &Query::SameObject { node })
    }
    fn shares_genus_below(&mut self, h: &Hierarchy, e: &Encounter, s: NodeId, u: NodeId) -> Result<bool, OracleError> {
        self.answer(h, e, &Query::SharesGenusBelow { sibling: s, under: u })
    }
    fn answer(&mut self, h: &Hierarchy, e: &Encounter, q: &Query) -> Result<bool, OracleError> {
        if self.fail_after == Some(self.asked.len()) {
            self.fail_after = None;
            return Err(OracleError::Transport("connection reset".into()));
        }
        self.asked.push(*q);
        self.inner.answer(h, e, q)
    }
}

fn setup(depth: usize, branching: usize, per_leaf: usize) -> (visem_core::synthetic::Dataset, Learner) {
    let data = generate_dataset(&GeneratorConfig::balanced(depth, branching, per_leaf)).unwrap();
    let learner = Learner::with_hierarchy(Hierarchy::with_root_annotation(Some(ROOT_LABEL.into())), EvmConfig::default());
    (data, learner)
}

#[test]
fn questions_are_bounded_and_never_repeated() {
    let (data, mut learner) = setup(3, 3, 2);
    let mut oracle = Recording { inner: SimulatedOracle::new(&data.tree), asked: vec![], fail_after: None };
    for i in run_order(data.encounters.len(), 3, 0) {
        let before = oracle.asked.len();
        let e = data.encounters[i].clone();
        let gt = e.ground_truth.clone().unwrap();
        let predicted_depth = {
            let h = learner.hierarchy();
            let lambda = visem_core::recognition::rejection_threshold(learner.memory());
            h.depth(learner.recognizer().predict_genus(h, &e, lambda).unwrap().node).unwrap()
        };
        let out = learner.process_encounter(e, &mut oracle).unwrap();
        let asked = &oracle.asked[before..];
        assert_eq!(asked.len(), out.placed.queries_asked);
        assert_eq!(asked.iter().collect::<HashSet<_>>().len(), asked.len(), "repeated question");
        // Climbing asks at most once per level; every inspected child costs
        // at most a genus and a shared-genus question; a same-object
        // question is asked at most once per genus entered.
        assert!(out.placed.queries_asked <= predicted_depth + 2 * out.children_inspected + out.descents + 1);

        let h = learner.hierarchy();
        let ascended = h.annotation(out.ascended_to).unwrap().unwrap_or(ROOT_LABEL);
        assert!(labels::is_ancestor_or_self(ascended, &gt));
        assert_eq!(h.annotation(out.placed.placed_node).unwrap(), Some(gt.as_str()));
        assert!(consistency_violations(h).is_empty());
    }
}

#[test]
fn every_action_occurs_in_a_full_run() {
    let (data, mut learner) = setup(3, 3, 3);
    let mut oracle = SimulatedOracle::new(&data.tree);
    let mut seen = HashSet::new();
    for i in run_order(data.encounters.len(), 0, 0) {
        let out = learner.process_encounter(data.encounters[i].clone(), &mut oracle).unwrap();
        seen.insert(out.placed.action);
        if out.descents > 0 {
            seen.insert(Action::Descend);
        }
    }
    assert_eq!(seen.len(), 4, "{seen:?}");
    let h = learner.hierarchy();
    // A complete run rebuilds the ground-truth tree exactly.
    assert_eq!(h.len(), data.tree.len());
    assert_eq!(h.encounter_count(), data.encounters.len());
}

#[test]
fn dropped_connection_mid_dialogue_changes_nothing() {
    let (data, mut learner) = setup(3, 2, 2);
    let mut queue: VecDeque<Encounter> = run_order(data.encounters.len(), 1, 0)
        .into_iter()
        .map(|i| data.encounters[i].clone())
        .collect();
    let mut oracle = Recording { inner: SimulatedOracle::new(&data.tree), asked: vec![], fail_after: None };
    for _ in 0..6 {
        learner.process_next(&mut queue, &mut oracle).unwrap().unwrap();
    }
    let hierarchy = learner.hierarchy().clone();
    let memory = learner.memory().clone();
    let outcomes = learner.outcomes().len();
    let front = queue.front().unwrap().id.clone();
    oracle.fail_after = Some(oracle.asked.len() + 1);
    let result = learner.process_next(&mut queue, &mut oracle).unwrap();
    assert!(matches!(result, Err(visem_core::Error::Oracle(OracleError::Transport(_)))));
    assert_eq!(learner.hierarchy(), &hierarchy);
    assert_eq!(learner.memory(), &memory);
    assert_eq!(learner.outcomes().len(), outcomes);
    assert_eq!(queue.front().unwrap().id, front);
    while let Some(r) = learner.process_next(&mut queue, &mut oracle) {
        r.unwrap();
    }
    assert!(consistency_violations(learner.hierarchy()).is_empty());
    assert_eq!(learner.hierarchy().encounter_count(), data.encounters.len());
}

#[test]
fn stepwise_dialogue_matches_direct_processing() {
    let (data, mut direct) = setup(3, 2, 2);
    let (_, mut stepwise) = setup(3, 2, 2);
    let mut oracle = SimulatedOracle::new(&data.tree);
    for i in run_order(data.encounters.len(), 5, 0) {
        let e = data.encounters[i].clone();
        let a = direct.process_encounter(e.clone(), &mut oracle).unwrap();
        let mut active = stepwise.begin(e).unwrap();
        while let Some((_, q)) = active.pending_query() {
            let yes = oracle.answer(stepwise.hierarchy(), &active.encounter, &q).unwrap();
            stepwise.answer(&mut active, yes).unwrap();
        }
        let b = stepwise.finish(active).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(direct.hierarchy().snapshot(), stepwise.hierarchy().snapshot());
    assert_eq!(direct.transcript(), stepwise.transcript());
    let answers = direct.transcript().iter().filter(|e| matches!(e, TranscriptEvent::Answer { .. })).count();
    let asked: usize = direct.outcomes().iter().map(|o| o.placed.queries_asked).sum();
    assert_eq!(answers, asked);
}

#[test]
fn runs_are_reproducible_and_costs_are_sane() {
    let generator = GeneratorConfig::balanced(3, 3, 2);
    let cfg = RunConfig { generator: generator.clone(), runs: 1, ordering_seed: 11, check_consistency: true, ..RunConfig::default() };
    let data = generate_dataset(&generator).unwrap();
    let a = run_on(&data, &cfg, 0).unwrap();
    let b = run_on(&data, &cfg, 0).unwrap();
    assert_eq!(a.costs, b.costs);
    assert!(a.violations.is_empty(), "{:?}", a.violations);
    assert_ne!(a.costs, run_on(&data, &cfg, 1).unwrap().costs);

    let naive = a.series(Model::Naive);
    let predict = a.series(Model::PredictGenus);
    assert_eq!((naive[0], predict[0]), (1, 1));
    for (o, (&n, &p)) in a.outcomes.iter().zip(naive.iter().zip(&predict)) {
        assert_eq!(n, o.naive_cost);
        assert!(p <= n + 2 * generator.depth);
    }
    // Naive cost never exceeds the ground-truth depth; once every object
    // exists it is exactly the leaf depth.
    assert!(naive.iter().all(|&n| n <= generator.depth));
    assert_eq!(*naive.last().unwrap(), generator.depth);
}
