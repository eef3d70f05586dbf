use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use chordgraph::executor::Strategy;
use chordgraph::harness::{self, ExperimentConfig, PoseRandomization, TrialSpec, SEED_ENV};
use chordgraph::planner::{self, TaskSpec};
use chordgraph::simworld::{DisturbanceModel, EventTime, Injection, ScheduledEvent};
use clap::{Args, Parser, Subcommand};

/// Recovery-augmented task graphs for desk-scale manipulation.
#[derive(Parser)]
#[command(name = "chordgraph", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a task, run the forward-moving filter and print the rejection report.
    Validate(TaskArg),
    /// Print the filtered augmented graph and per-node keyframes as JSON.
    Plan {
        #[command(flatten)]
        task: TaskArg,
        /// Fetch graph structure and recovery branches from a planner service.
        #[arg(long)]
        planner_endpoint: Option<String>,
    },
    /// Run a single episode and print its result as JSON.
    Simulate(SimulateArgs),
    /// Run an experiment config and print the metrics CSV.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct TaskArg {
    /// Task file or shipped task name.
    #[arg(value_name = "TASK", required_unless_present = "task_flag")]
    task: Option<String>,
    #[arg(long = "task", value_name = "TASK", conflicts_with = "task")]
    task_flag: Option<String>,
}

impl TaskArg {
    fn name(&self) -> &str {
        self.task.as_deref().or(self.task_flag.as_deref()).expect("clap requires one")
    }

    fn load(&self) -> Result<TaskSpec, Failure> {
        harness::resolve_task(self.name()).map_err(|e| Failure::Setup(anyhow!(e)))
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    task: TaskArg,
    #[arg(long, default_value = "agentchord")]
    strategy: Strategy,
    /// Bernoulli drop probability per atomic action.
    #[arg(long, conflicts_with = "drop_at_step")]
    drop_prob: Option<f64>,
    /// Drop the first held object at this episode step.
    #[arg(long)]
    drop_at_step: Option<u64>,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    /// Write the NDJSON trace here.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    #[arg(long)]
    planner_endpoint: Option<String>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config file.
    #[arg(value_name = "CONFIG", required_unless_present = "config_flag")]
    config: Option<PathBuf>,
    #[arg(long = "config", value_name = "CONFIG", conflicts_with = "config")]
    config_flag: Option<PathBuf>,
    /// Replaces the configured strategies.
    #[arg(long, value_delimiter = ',')]
    strategy: Vec<Strategy>,
    /// Replaces the configured drop probabilities.
    #[arg(long, value_delimiter = ',')]
    drop_prob: Vec<f64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Base seed; takes precedence over the environment and the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    metrics_out: Option<PathBuf>,
    /// Directory for per-trial traces.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

enum Failure {
    /// Bad input: exit code 2.
    Setup(anyhow::Error),
    /// The episode ran but did not succeed: exit code 1.
    Task,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Setup(e.into())
    }
}

/// Writes to stdout; a closed pipe ends the process quietly.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: writing output: {e}");
        std::process::exit(2);
    }
}

fn validate(arg: &TaskArg) -> Result<(), Failure> {
    let spec = arg.load()?;
    let g = &spec.augmented;
    let recovery_edges = g.edges.iter().filter(|e| e.is_recovery()).count();
    let mut text = format!(
        "task {}: {} nodes ({} recovery), {} edges ({} recovery)\n",
        spec.doc.name,
        g.nodes.len(),
        g.recovery_nodes().count(),
        g.edges.len(),
        recovery_edges
    );
    let report = &spec.report;
    if report.is_empty() {
        text += "all recovery branches are forward-moving\n";
    }
    for r in &report.rejected {
        let show = |d: Option<f64>| d.map_or("unreachable".to_string(), |d| format!("{d}"));
        text += &format!(
            "rejected {}: context {}, dist {} vs {}: {}\n",
            r.branch,
            r.failure_context,
            show(r.dist_recovery),
            show(r.dist_failure),
            r.reason
        );
    }
    for e in &report.pruned_merge_edges {
        text += &format!("pruned merge edge {e}\n");
    }
    for d in &report.dropped_failure_modes {
        text += &format!("failure mode {} on {} has no recovery left\n", d.failure, d.edge);
    }
    emit(&text);
    Ok(())
}

fn with_endpoint(spec: TaskSpec, endpoint: Option<&str>) -> Result<TaskSpec, Failure> {
    match endpoint {
        Some(url) => planner::plan_from_service(url, &spec.doc, planner::DEFAULT_TIMEOUT).map_err(|e| Failure::Setup(anyhow!(e))),
        None => Ok(spec),
    }
}

fn plan(arg: &TaskArg, endpoint: Option<&str>) -> Result<(), Failure> {
    let spec = with_endpoint(arg.load()?, endpoint)?;
    let keyframes: Vec<serde_json::Value> = harness::nominal_keyframes(&spec)
        .map_err(|e| Failure::Setup(anyhow!("keyframes: {e}")))?
        .into_iter()
        .map(|(node, arms)| serde_json::json!({ "node": node, "arms": arms }))
        .collect();
    let out = serde_json::json!({
        "task": spec.doc.name,
        "graph": spec.augmented,
        "rejection_report": spec.report,
        "keyframes": keyframes,
    });
    emit(&format!("{}\n", serde_json::to_string_pretty(&out)?));
    Ok(())
}

fn simulate(a: &SimulateArgs) -> Result<(), Failure> {
    let spec = with_endpoint(a.task.load()?, a.planner_endpoint.as_deref())?;
    let disturbance = match (a.drop_prob, a.drop_at_step) {
        (Some(p), _) => DisturbanceModel::Bernoulli { p },
        (None, Some(step)) => DisturbanceModel::Scheduled {
            events: vec![ScheduledEvent {
                at: EventTime::AtStep { step },
                event: Injection::Drop { object: None },
            }],
        },
        (None, None) => spec.doc.disturbance.clone(),
    };
    disturbance.validate().map_err(|e| anyhow!(e))?;
    let solver = spec.solver_context();
    let trial = TrialSpec {
        task: &spec,
        solver: &solver,
        strategy: a.strategy,
        disturbance: &disturbance,
        seed: a.seed,
        randomization: PoseRandomization::default(),
        trace: a.trace_out.is_some(),
    };
    let (result, trace) = harness::run_trial(&trial).map_err(|e| anyhow!(e))?;
    if let Some(path) = &a.trace_out {
        std::fs::write(path, trace.to_ndjson()).with_context(|| format!("writing {}", path.display()))?;
    }
    emit(&format!("{}\n", serde_json::to_string_pretty(&result)?));
    if result.success {
        Ok(())
    } else {
        Err(Failure::Task)
    }
}

fn experiment(a: &ExperimentArgs) -> Result<(), Failure> {
    let path = a.config.as_ref().or(a.config_flag.as_ref()).expect("clap requires one");
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply_env()?;
    if let Some(seed) = a.seed {
        cfg.base_seed = seed;
    }
    if !a.strategy.is_empty() {
        cfg.strategies = a.strategy.clone();
    }
    if !a.drop_prob.is_empty() {
        cfg.drop_probs = a.drop_prob.clone();
    }
    if let Some(n) = a.trials {
        cfg.trials = n;
    }
    if a.metrics_out.is_some() {
        cfg.metrics_out = a.metrics_out.clone();
    }
    if a.trace_out.is_some() {
        cfg.trace_dir = a.trace_out.clone();
    }
    cfg.validate()?;
    let out = harness::run_experiment(&cfg)?;
    for t in out.trials.iter().filter(|t| t.error.is_some()) {
        eprintln!(
            "trial {} of {} p={} {} failed: {}",
            t.trial,
            t.task,
            t.p,
            t.strategy,
            t.error.as_deref().unwrap_or_default()
        );
    }
    emit(&out.table.to_csv());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Validate(t) => validate(t),
        Command::Plan {
            task,
            planner_endpoint,
        } => plan(task, planner_endpoint.as_deref()),
        Command::Simulate(a) => simulate(a),
        Command::Experiment(a) => experiment(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Task) => ExitCode::from(1),
        Err(Failure::Setup(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
