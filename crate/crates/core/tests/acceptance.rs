//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit status
//! if any criterion fails.

use std::collections::{HashMap, VecDeque};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Weibull};
use visem_core::evm::{fit_class_model, fit_weibull, inclusion_probability, EvmConfig};
use visem_core::experiment::{aggregate, model_series, run_all, window_mean, write_csv, Model, RunConfig};
use visem_core::hierarchy::Hierarchy;
use visem_core::model::IdAllocator;
use visem_core::recognition::{
    rejection_threshold, replay_accuracy, SupervisionMemory, SupervisionRecord, TraceStep,
};
use visem_core::synthetic::GeneratorConfig;
use visem_core::{EmbeddingVector, Encounter, NodeId, VisualObject};

struct Report {
    failed: usize,
}

impl Report {
    fn check(&mut self, id: &str, name: &str, ok: bool, detail: String) {
        println!("{} {id} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failed += 1;
        }
    }
}

fn weibull_ll(shape: f64, scale: f64, xs: &[f64]) -> f64 {
    xs.iter()
        .map(|&x| (shape / scale).ln() + (shape - 1.0) * (x / scale).ln() - (x / scale).powf(shape))
        .sum()
}

/// Exhaustive shape grid (step 0.001) with a golden-section search over
/// log(scale) at each grid shape.
fn grid_best_ll(xs: &[f64], shape_lo: f64, shape_hi: f64) -> f64 {
    let lo_s = xs.iter().copied().fold(f64::MAX, f64::min).ln() - 1.0;
    let hi_s = xs.iter().copied().fold(f64::MIN, f64::max).ln() + 1.0;
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let steps = ((shape_hi - shape_lo) / 0.001).round() as usize;
    let mut best = f64::MIN;
    for i in 0..=steps {
        let k = shape_lo + i as f64 * 0.001;
        let f = |ls: f64| weibull_ll(k, ls.exp(), xs);
        let (mut a, mut b) = (lo_s, hi_s);
        let (mut c, mut d) = (b - phi * (b - a), a + phi * (b - a));
        let (mut fc, mut fd) = (f(c), f(d));
        while b - a > 1e-9 {
            if fc > fd {
                (b, d, fd) = (d, c, fc);
                c = b - phi * (b - a);
                fc = f(c);
            } else {
                (a, c, fc) = (c, d, fd);
                d = a + phi * (b - a);
                fd = f(d);
            }
        }
        best = best.max(fc.max(fd));
    }
    best
}

fn reproduction(report: &mut Report) {
    let cfg = RunConfig {
        generator: GeneratorConfig::default(),
        runs: 20,
        ordering_seed: 0,
        check_consistency: true,
        ..RunConfig::default()
    };
    let started = Instant::now();
    let runs = run_all(&cfg).expect("simulated runs");
    let costs: Vec<_> = runs.iter().map(|r| r.costs.clone()).collect();
    let agg = aggregate(&costs).unwrap();
    let naive = model_series(&agg, Model::Naive);
    let predict = model_series(&agg, Model::PredictGenus);
    let n = naive.len();
    let naive_tail = window_mean(&naive, n - 50, n);
    let predict_tail = window_mean(&predict, n - 50, n);
    let (peak_at, peak) = predict
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |best, (i, &c)| if c > best.1 { (i, c) } else { best });

    let encounters = runs[0].outcomes.len();
    let a = (3.5..=4.0).contains(&naive_tail);
    let b = predict_tail <= 0.85 * naive_tail;
    let c = peak_at < 150 && predict_tail <= 0.8 * peak;
    report.check(
        "1",
        "experiment reproduction",
        encounters == 405 && a && b && c,
        format!(
            "{} runs x {encounters} encounters in {:.0?}; (a) naive final-50 {naive_tail:.3} in [3.5, 4.0]: {a}; \
             (b) predict_genus final-50 {predict_tail:.3} <= 0.85 x naive: {b}; \
             (c) peak {peak:.3} at iteration {peak_at} < 150 and final-50 <= 0.8 x peak ({:.1}% drop): {c}",
            cfg.runs,
            started.elapsed(),
            100.0 * (1.0 - predict_tail / peak),
        ),
    );

    let violations: usize = runs.iter().map(|r| r.violations.len()).sum();
    let checks: usize = runs.iter().map(|r| r.outcomes.len()).sum();
    let first = runs
        .iter()
        .flat_map(|r| r.violations.first())
        .next()
        .map(|(i, v)| format!("; first at iteration {i}: {v}"))
        .unwrap_or_default();
    report.check(
        "6",
        "ground-truth consistency",
        violations == 0,
        format!("{violations} violations over {checks} per-iteration checks{first}"),
    );
}

fn weibull_mle(report: &mut Report) {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut worst = f64::MAX;
    for _ in 0..50 {
        let shape = r.random_range(0.6..4.0);
        let scale = r.random_range(0.5..5.0);
        let n = r.random_range(5..40);
        let xs: Vec<f64> = Weibull::new(scale, shape).unwrap().sample_iter(&mut r).take(n).collect();
        let fit = fit_weibull(&xs).unwrap();
        let grid = grid_best_ll(&xs, (fit.shape - 0.3).max(0.2), fit.shape + 0.3);
        worst = worst.min(weibull_ll(fit.shape, fit.scale, &xs) - grid);
    }
    let exp: Vec<f64> = Exp::new(1.0).unwrap().sample_iter(&mut r).take(1000).collect();
    let shape = fit_weibull(&exp).unwrap().shape;
    report.check(
        "2",
        "Weibull maximum likelihood",
        worst >= -1e-4 && (shape - 1.0).abs() < 0.1,
        format!("worst fitted-minus-grid log-likelihood {worst:.2e} (>= -1e-4); Exponential(1) n=1000 shape {shape:.4}"),
    );
}

fn vo(id: u64, x: Vec<f64>) -> VisualObject {
    VisualObject {
        id: visem_core::VisualObjectId(id),
        embedding: EmbeddingVector::new(x).unwrap(),
        frame_span: (0, 0),
        encounter_id: "e".into(),
    }
}

fn evm_properties(report: &mut Report) {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let cases = 1000;
    let (mut bounded, mut unit, mut radial, mut equivariant) = (0, 0, 0, 0);
    let point = |r: &mut ChaCha8Rng, dim: usize| -> Vec<f64> { (0..dim).map(|_| r.random_range(-10.0..10.0)).collect() };
    for _ in 0..cases {
        let dim = r.random_range(1..6);
        let pos: Vec<_> = (0..r.random_range(1..6)).map(|i| vo(i, point(&mut r, dim))).collect();
        let neg: Vec<_> = (0..r.random_range(0..12)).map(|i| vo(100 + i, point(&mut r, dim))).collect();
        let cfg = EvmConfig { tail_size: r.random_range(1..8), ..EvmConfig::default() };
        let model = fit_class_model(&pos.iter().collect::<Vec<_>>(), &neg.iter().collect::<Vec<_>>(), &cfg).unwrap();

        let probe = EmbeddingVector::new(point(&mut r, dim)).unwrap();
        bounded += usize::from((0.0..=1.0).contains(&inclusion_probability(&model, &probe)));
        unit += usize::from(pos.iter().all(|p| inclusion_probability(&model, &p.embedding) == 1.0));

        let single = fit_class_model(&[&pos[0]], &neg.iter().collect::<Vec<_>>(), &cfg).unwrap();
        let dir = point(&mut r, dim);
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        let mut last = 1.0;
        let mut monotone = true;
        for step in 0..20 {
            let t = step as f64 * 0.5;
            let x: Vec<f64> = (0..dim).map(|i| pos[0].embedding.as_slice()[i] + t * dir[i] / norm).collect();
            let p = inclusion_probability(&single, &EmbeddingVector::new(x).unwrap());
            monotone &= p <= last;
            last = p;
        }
        radial += usize::from(monotone);

        let xs: Vec<f64> = (0..r.random_range(2..30)).map(|_| r.random_range(0.01..50.0)).collect();
        let c = 10f64.powf(r.random_range(-2.0..2.0));
        let base = fit_weibull(&xs).unwrap();
        let scaled = fit_weibull(&xs.iter().map(|x| x * c).collect::<Vec<_>>()).unwrap();
        let ok = (scaled.shape - base.shape).abs() <= 1e-6 * base.shape.max(1.0)
            && (scaled.scale - c * base.scale).abs() <= 1e-6 * c * base.scale;
        equivariant += usize::from(ok);
    }
    report.check(
        "3",
        "EVM properties",
        [bounded, unit, radial, equivariant].iter().all(|&k| k == cases),
        format!(
            "{cases} cases each: bounded {bounded}, unit at extreme vectors {unit}, radially monotone {radial}, scale-equivariant {equivariant}"
        ),
    );
}

fn geodesic(report: &mut Report) {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let (mut pairs, mut mismatches) = (0usize, 0usize);
    for _ in 0..100 {
        let mut h = Hierarchy::new();
        let mut ids = IdAllocator::default();
        let mut parent: HashMap<NodeId, NodeId> = HashMap::new();
        for i in 0..r.random_range(1..40) {
            let nodes: Vec<NodeId> = h.nodes().map(|n| n.id).collect();
            let p = nodes[r.random_range(0..nodes.len())];
            let v = VisualObject {
                id: ids.next_id(),
                embedding: EmbeddingVector::zeros(1),
                frame_span: (0, 0),
                encounter_id: format!("e{i}").as_str().into(),
            };
            let e = Encounter::new(format!("e{i}").as_str().into(), vec![v], None).unwrap();
            let kids = h.children_of(p).unwrap().to_vec();
            if !kids.is_empty() && r.random_bool(0.2) {
                let c = kids[r.random_range(0..kids.len())];
                let (m, leaf) = h.insert_intermediate(p, c, e, None, None).unwrap();
                parent.extend([(m, p), (c, m), (leaf, m)]);
            } else {
                parent.insert(h.add_object_node(p, e, None).unwrap(), p);
            }
        }
        let mut adj: HashMap<NodeId, Vec<NodeId>> = h.nodes().map(|n| (n.id, vec![])).collect();
        for (&c, &p) in &parent {
            adj.get_mut(&c).unwrap().push(p);
            adj.get_mut(&p).unwrap().push(c);
        }
        let chain = |mut n: NodeId| {
            let mut out = vec![n];
            while let Some(&p) = parent.get(&n) {
                out.push(p);
                n = p;
            }
            out
        };
        let nodes: Vec<NodeId> = h.nodes().map(|n| n.id).collect();
        for &a in &nodes {
            let mut dist = HashMap::from([(a, 0usize)]);
            let mut q = VecDeque::from([a]);
            while let Some(n) = q.pop_front() {
                for &m in &adj[&n] {
                    if !dist.contains_key(&m) {
                        dist.insert(m, dist[&n] + 1);
                        q.push_back(m);
                    }
                }
            }
            for &b in &nodes {
                let (ca, cb) = (chain(a), chain(b));
                let lca = ca.iter().find(|n| cb.contains(n)).unwrap();
                let formula = ca.len() + cb.len() - 2 * chain(*lca).len();
                let g = h.geodesic_distance(a, b).unwrap();
                pairs += 1;
                mismatches += usize::from(g != dist[&b] || g != formula);
            }
        }
    }
    report.check(
        "4",
        "geodesic distance",
        mismatches == 0,
        format!("100 random trees, {pairs} node pairs, {mismatches} disagreements with BFS or the depth/LCA formula"),
    );
}

fn threshold(report: &mut Report) {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut exact = 0;
    let mut detail = Vec::new();
    for _ in 0..20 {
        let mut memory = SupervisionMemory::new();
        for i in 0..r.random_range(1..60) {
            let mut trace = vec![TraceStep { node: NodeId(0), probability: 1.0 }];
            for k in 1..r.random_range(1..6) {
                trace.push(TraceStep {
                    node: NodeId(10 * k + r.random_range(0..3)),
                    probability: r.random_range(0..=100) as f64 / 100.0,
                });
            }
            let confirmed = if r.random_bool(0.1) { NodeId(999) } else { trace[r.random_range(0..trace.len())].node };
            memory
                .push(SupervisionRecord {
                    visual_object: vo(i, vec![0.0]),
                    confirmed_node: confirmed,
                    prediction_trace: trace,
                })
                .unwrap();
        }
        let accuracy = |lambda: f64| {
            memory
                .records()
                .iter()
                .filter(|rec| {
                    let mut at = NodeId(0);
                    for s in &rec.prediction_trace[1..] {
                        if s.probability > lambda {
                            at = s.node;
                        } else {
                            break;
                        }
                    }
                    at == rec.confirmed_node
                })
                .count()
        };
        let lambda = rejection_threshold(&memory);
        let grid = (0..=1000).map(|i| accuracy(i as f64 / 1000.0)).max().unwrap();
        let ours = replay_accuracy(&memory, lambda);
        exact += usize::from(ours == grid && accuracy(lambda) == grid);
        detail.push(format!("{ours}/{grid}"));
    }
    report.check(
        "5",
        "rejection threshold optimality",
        exact == 20,
        format!("{exact}/20 memories match the 0.001-grid maximum (replayed/grid: {})", detail.join(" ")),
    );
}

fn determinism(report: &mut Report) {
    let cfg = RunConfig {
        generator: GeneratorConfig::default(),
        runs: 2,
        ordering_seed: 7,
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for k in 0..2 {
        let runs = run_all(&cfg).unwrap();
        let agg = aggregate(&runs.into_iter().map(|r| r.costs).collect::<Vec<_>>()).unwrap();
        let path = dir.path().join(format!("costs{k}.csv"));
        write_csv(&agg, &path).unwrap();
        files.push(std::fs::read(&path).unwrap());
    }
    report.check(
        "7",
        "determinism",
        files[0] == files[1] && !files[0].is_empty(),
        format!("two {}-run executions with seed {}: {} and {} bytes, identical: {}", cfg.runs, cfg.ordering_seed, files[0].len(), files[1].len(), files[0] == files[1]),
    );
}

fn main() -> ExitCode {
    let mut report = Report { failed: 0 };
    weibull_mle(&mut report);
    evm_properties(&mut report);
    geodesic(&mut report);
    threshold(&mut report);
    determinism(&mut report);
    reproduction(&mut report);
    if report.failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", report.failed);
        ExitCode::FAILURE
    }
}
