use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use visem_core::experiment::{self, model_series, window_mean, Model, RunConfig};
use visem_core::evm::EvmConfig;
use visem_core::experiment::run_order;
use visem_core::interaction::{Learner, SimulatedOracle, TranscriptEvent};
use visem_core::synthetic::{generate_dataset, GeneratorConfig, ROOT_LABEL};
use visem_core::Hierarchy;
use visem_service::{router_with_state, serve, with_static, AppState, CreateSession, DatasetSpec};

#[derive(Parser)]
#[command(name = "visem", version, about = "Grow object hierarchies from encounters with a user in the loop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the simulated experiment and write mean costs per iteration.
    Run(RunArgs),
    /// Check hierarchy invariants over simulated runs.
    Validate(ExperimentArgs),
    /// Walk through a session with the simulated user, or serve one over
    /// HTTP for a person to answer.
    Demo(DemoArgs),
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    #[arg(long, env = "GD_DEPTH", default_value_t = 4)]
    depth: usize,
    #[arg(long, env = "GD_BRANCHING", default_value_t = 3)]
    branching: usize,
    #[arg(long, env = "GD_ENCOUNTERS_PER_LEAF", default_value_t = 5)]
    encounters_per_leaf: usize,
    #[arg(long, env = "GD_RUNS", default_value_t = 100)]
    runs: usize,
    #[arg(long, env = "GD_DIM", default_value_t = 32)]
    dim: usize,
    #[arg(long, env = "GD_TAIL_SIZE", default_value_t = 16)]
    tail_size: usize,
    #[arg(long, env = "GD_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// CSV output; a gnuplot table is written next to it with a `.dat` extension.
    #[arg(long, env = "GD_OUT", default_value = "costs.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Serve the session over HTTP instead of answering with the simulated user.
    #[arg(long)]
    interactive: bool,
    #[arg(long, env = "GD_BIND", default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Directory with the web console, served at `/`.
    #[arg(long, env = "GD_STATIC_DIR")]
    static_dir: Option<PathBuf>,
    /// Embedding file (JSON lines) to use instead of a synthetic dataset.
    #[arg(long, env = "GD_DATA")]
    data: Option<PathBuf>,
    /// Encounters to play in the simulated walk-through.
    #[arg(long, default_value_t = 12)]
    limit: usize,
}

impl ExperimentArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut generator = GeneratorConfig::balanced(self.depth, self.branching, self.encounters_per_leaf);
        generator.dimension = self.dim;
        generator.seed = self.seed;
        let cfg = RunConfig {
            generator,
            runs: self.runs,
            ordering_seed: self.seed,
            tail_size: self.tail_size,
            check_consistency: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = args.experiment.config()?;
    let started = Instant::now();
    let runs = experiment::run_all(&cfg)?;
    let costs: Vec<_> = runs.into_iter().map(|r| r.costs).collect();
    let agg = experiment::aggregate(&costs)?;
    experiment::write_csv(&agg, &args.out)?;
    let dat = args.out.with_extension("dat");
    experiment::write_gnuplot(&agg, &dat)?;

    let predict = model_series(&agg, Model::PredictGenus);
    let naive = model_series(&agg, Model::Naive);
    let n = predict.len();
    let (peak_at, peak) = predict
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |best, (i, &c)| if c > best.1 { (i, c) } else { best });
    eprintln!(
        "{} runs x {n} iterations in {:.1?}; last 50: predict_genus {:.3}, naive {:.3}; predict_genus peak {peak:.3} at {peak_at}",
        cfg.runs,
        started.elapsed(),
        window_mean(&predict, n.saturating_sub(50), n),
        window_mean(&naive, n.saturating_sub(50), n),
    );
    eprintln!("wrote {} and {}", args.out.display(), dat.display());
    Ok(())
}

fn validate(args: ExperimentArgs) -> Result<bool> {
    let cfg = RunConfig {
        check_consistency: true,
        ..args.config()?
    };
    let max_depth = cfg.generator.depth;
    let mut ok = true;
    let runs = experiment::run_all(&cfg).context("simulated runs")?;
    for (i, r) in runs.iter().enumerate() {
        for (iteration, v) in &r.violations {
            ok = false;
            println!("run {i} iteration {iteration}: {v}");
        }
        for o in &r.outcomes {
            if o.predict_genus_cost > o.naive_cost + 2 * max_depth {
                ok = false;
                println!("run {i} iteration {}: prediction cost {} out of bounds", o.iteration, o.predict_genus_cost);
            }
            if !(0.0..=1.0).contains(&o.predicted.probability) {
                ok = false;
                println!("run {i} iteration {}: probability {} outside [0, 1]", o.iteration, o.predicted.probability);
            }
        }
        if r.final_hierarchy.encounter_count() != r.outcomes.len() {
            ok = false;
            println!("run {i}: {} encounters placed, {} processed", r.final_hierarchy.encounter_count(), r.outcomes.len());
        }
    }
    println!("{} runs checked: {}", runs.len(), if ok { "PASS" } else { "FAIL" });
    Ok(ok)
}

fn session_request(args: &DemoArgs) -> Result<CreateSession> {
    let cfg = args.experiment.config()?;
    let dataset = match &args.data {
        Some(path) => DatasetSpec::Embeddings {
            jsonl: std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
        },
        None => DatasetSpec::Synthetic(cfg.generator),
    };
    Ok(CreateSession {
        dataset,
        ordering_seed: cfg.ordering_seed,
        run_index: 0,
        tail_size: cfg.tail_size,
    })
}

fn demo(args: DemoArgs) -> Result<()> {
    if args.interactive {
        let state = AppState::new();
        let created = state
            .create(session_request(&args)?)
            .map_err(|e| anyhow!("creating session: {}", e.message))?;
        let mut app = router_with_state(state);
        if let Some(dir) = &args.static_dir {
            app = with_static(app, dir.clone());
        }
        eprintln!(
            "session {} ({} encounters) at http://{}/sessions/{}/query",
            created.id, created.queue_length, args.bind, created.id
        );
        let rt = tokio::runtime::Runtime::new()?;
        return rt.block_on(serve(args.bind, app)).context("serving");
    }
    if args.data.is_some() {
        bail!("--data needs --interactive: uploaded encounters have no simulated user");
    }
    let cfg = args.experiment.config()?;
    let dataset = generate_dataset(&cfg.generator)?;
    let mut learner = Learner::with_hierarchy(Hierarchy::with_root_annotation(Some(ROOT_LABEL.into())), EvmConfig {
        tail_size: cfg.tail_size,
        ..EvmConfig::default()
    });
    let mut oracle = SimulatedOracle::new(&dataset.tree);
    for idx in run_order(dataset.encounters.len(), cfg.ordering_seed, 0).into_iter().take(args.limit) {
        let e = dataset.encounters[idx].clone();
        let seen = learner.transcript().len();
        learner.process_encounter(e, &mut oracle)?;
        for ev in &learner.transcript()[seen..] {
            match ev {
                TranscriptEvent::Query { encounter_id, query, .. } => print!("{encounter_id}: {query} "),
                TranscriptEvent::Answer { answer, .. } => println!("{}", if *answer { "yes" } else { "no" }),
                TranscriptEvent::Placement { outcome, .. } => println!(
                    "{}: {:?} at {} (predicted {}, cost {} vs naive {})",
                    outcome.encounter_id,
                    outcome.placed.action,
                    outcome.placed.placed_node,
                    outcome.predicted.node,
                    outcome.predict_genus_cost,
                    outcome.naive_cost
                ),
            }
        }
    }
    println!("{} nodes after {} encounters", learner.hierarchy().len(), learner.outcomes().len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args).map(|_| true),
        Command::Validate(args) => validate(args),
        Command::Demo(args) => demo(args).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
