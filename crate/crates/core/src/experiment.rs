//! Repeated simulated runs over a synthetic dataset, measuring how far the
//! suggested starting node is from where each encounter ends up.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evm::EvmConfig;
use crate::hierarchy::Hierarchy;
use crate::interaction::{consistency_violations, Learner, PlacementOutcome, SimulatedOracle};
use crate::synthetic::{generate_dataset, Dataset, GeneratorConfig, ROOT_LABEL};

pub const CSV_HEADER: [&str; 3] = ["iteration", "model", "mean_geodesic_cost"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub runs: usize,
    pub ordering_seed: u64,
    pub tail_size: usize,
    /// Check the hierarchy against the ground truth after every iteration.
    pub check_consistency: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            runs: 100,
            ordering_seed: 0,
            tail_size: crate::evm::DEFAULT_TAIL_SIZE,
            check_consistency: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.runs == 0 {
            return Err(Error::invalid("runs must be at least 1"));
        }
        if self.tail_size == 0 {
            return Err(Error::invalid("tail size must be at least 1"));
        }
        Ok(())
    }

    fn evm(&self) -> EvmConfig {
        EvmConfig {
            tail_size: self.tail_size,
            ..EvmConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    PredictGenus,
    Naive,
}

impl Model {
    pub const ALL: [Model; 2] = [Model::PredictGenus, Model::Naive];

    pub fn as_str(self) -> &'static str {
        match self {
            Model::PredictGenus => "predict_genus",
            Model::Naive => "naive",
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Model {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Model::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationCost {
    pub iteration: usize,
    pub model: Model,
    pub geodesic_cost: usize,
}

/// One run's results.
#[derive(Clone, Debug, Default)]
pub struct RunResult {
    pub costs: Vec<IterationCost>,
    pub outcomes: Vec<PlacementOutcome>,
    /// `(iteration, message)` for every consistency check that failed.
    pub violations: Vec<(usize, String)>,
    pub final_hierarchy: Hierarchy,
}

impl RunResult {
    pub fn series(&self, model: Model) -> Vec<usize> {
        self.costs
            .iter()
            .filter(|c| c.model == model)
            .map(|c| c.geodesic_cost)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanCost {
    pub iteration: usize,
    pub model: Model,
    pub mean_geodesic_cost: f64,
}

/// The encounter order for run `run_index`.
pub fn run_order(n: usize, ordering_seed: u64, run_index: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(ordering_seed);
    rng.set_stream(run_index as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Generates the dataset and performs run `run_index`.
pub fn run_once(cfg: &RunConfig, run_index: usize) -> Result<RunResult> {
    cfg.validate()?;
    let dataset = generate_dataset(&cfg.generator)?;
    run_on(&dataset, cfg, run_index)
}

/// Performs run `run_index` on an already generated dataset. Both models are
/// scored on the same hierarchy evolution: the naive model always suggests
/// the root, so its cost is the depth of the placed node.
pub fn run_on(dataset: &Dataset, cfg: &RunConfig, run_index: usize) -> Result<RunResult> {
    let mut learner = Learner::with_hierarchy(Hierarchy::with_root_annotation(Some(ROOT_LABEL.to_owned())), cfg.evm());
    let mut oracle = SimulatedOracle::new(&dataset.tree);
    let mut result = RunResult::default();
    for (iteration, idx) in run_order(dataset.encounters.len(), cfg.ordering_seed, run_index)
        .into_iter()
        .enumerate()
    {
        let outcome = learner.process_encounter(dataset.encounters[idx].clone(), &mut oracle)?;
        result.costs.push(IterationCost {
            iteration,
            model: Model::PredictGenus,
            geodesic_cost: outcome.predict_genus_cost,
        });
        result.costs.push(IterationCost {
            iteration,
            model: Model::Naive,
            geodesic_cost: outcome.naive_cost,
        });
        if cfg.check_consistency {
            let h = learner.hierarchy();
            let structural = h.check_structure().err().map(|e| e.to_string());
            for v in structural.into_iter().chain(consistency_violations(h)) {
                result.violations.push((iteration, v));
            }
        }
    }
    result.outcomes = learner.outcomes().to_vec();
    result.final_hierarchy = learner.hierarchy().clone();
    Ok(result)
}

/// Performs all runs of `cfg` in parallel, returned in run order.
pub fn run_all(cfg: &RunConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let dataset = generate_dataset(&cfg.generator)?;
    (0..cfg.runs)
        .into_par_iter()
        .map(|i| run_on(&dataset, cfg, i))
        .collect()
}

/// Per-iteration mean cost per model, ordered by iteration then model.
pub fn aggregate(runs: &[Vec<IterationCost>]) -> Result<Vec<MeanCost>> {
    let Some(first) = runs.first() else {
        return Ok(Vec::new());
    };
    if runs.iter().any(|r| r.len() != first.len()) {
        return Err(Error::invalid("runs have different lengths"));
    }
    let iterations = first.iter().map(|c| c.iteration + 1).max().unwrap_or(0);
    let mut sums = vec![[0u64; 2]; iterations];
    for run in runs {
        for c in run {
            sums[c.iteration][c.model as usize] += c.geodesic_cost as u64;
        }
    }
    let n = runs.len() as f64;
    Ok(sums
        .into_iter()
        .enumerate()
        .flat_map(|(iteration, s)| {
            Model::ALL.into_iter().map(move |model| MeanCost {
                iteration,
                model,
                mean_geodesic_cost: s[model as usize] as f64 / n,
            })
        })
        .collect())
}

pub fn write_csv(aggregated: &[MeanCost], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    write_csv_to(aggregated, file).map_err(|e| match e {
        Error::Io { source, .. } => Error::Io {
            path: path.to_owned(),
            source,
        },
        other => other,
    })
}

pub fn write_csv_to<W: Write>(aggregated: &[MeanCost], out: W) -> Result<()> {
    let io = |e: csv::Error| Error::Io {
        path: Default::default(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER).map_err(io)?;
    for row in aggregated {
        w.write_record([
            row.iteration.to_string(),
            row.model.to_string(),
            row.mean_geodesic_cost.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|source| Error::Io {
        path: Default::default(),
        source,
    })
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<MeanCost>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e.into(),
    })?;
    let headers = r.headers().map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e.into(),
    })?;
    if headers.iter().ne(CSV_HEADER) {
        return Err(Error::Parse {
            path: path.to_owned(),
            line: 1,
            message: format!("unexpected header {headers:?}"),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let parse_err = |message: String| Error::Parse {
            path: path.to_owned(),
            line,
            message,
        };
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        if rec.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", rec.len())));
        }
        out.push(MeanCost {
            iteration: rec[0].parse().map_err(|e| parse_err(format!("iteration: {e}")))?,
            model: rec[1].parse().map_err(|e: Error| parse_err(e.to_string()))?,
            mean_geodesic_cost: rec[2].parse().map_err(|e| parse_err(format!("cost: {e}")))?,
        });
    }
    Ok(out)
}

/// Writes a whitespace-separated table (`iteration predict_genus naive`)
/// that gnuplot can plot directly.
pub fn write_gnuplot(aggregated: &[MeanCost], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io_err = |source| Error::Io {
        path: path.to_owned(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    writeln!(out, "# iteration predict_genus naive").map_err(io_err)?;
    for pair in aggregated.chunks(2) {
        let cost = |m: Model| pair.iter().find(|c| c.model == m).map_or(f64::NAN, |c| c.mean_geodesic_cost);
        writeln!(
            out,
            "{} {} {}",
            pair[0].iteration,
            cost(Model::PredictGenus),
            cost(Model::Naive)
        )
        .map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Mean of `series` over the index range `[from, to)`.
pub fn window_mean(series: &[f64], from: usize, to: usize) -> f64 {
    let w = &series[from.min(series.len())..to.min(series.len())];
    w.iter().sum::<f64>() / w.len() as f64
}

/// The mean-cost series of one model, indexed by iteration.
pub fn model_series(aggregated: &[MeanCost], model: Model) -> Vec<f64> {
    aggregated
        .iter()
        .filter(|c| c.model == model)
        .map(|c| c.mean_geodesic_cost)
        .collect()
}
