//! Experiment runner: randomized trials over tasks, drop probabilities and strategies,
//! aggregated into a metrics table.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::executor::{run_episode, stream_rng, EpisodeResult, EpisodeSetup, Strategy, Trace, TraceKind, STREAM_SCENE};
use crate::graph::NodeId;
use crate::planner::{load_task, shipped_task, PlannerError, TaskSpec};
use crate::simworld::{Arm, DisturbanceModel, SceneSpec, WorldState};
use crate::features::NoiseConfig;
use crate::solvers::{SolverConfig, SolverContext};

/// Environment variable that overrides the base seed.
pub const SEED_ENV: &str = "CHORDGRAPH_SEED";

pub const CSV_HEADER: [&str; 9] = [
    "task",
    "p",
    "strategy",
    "success_rate",
    "mean_steps",
    "mean_time_s",
    "mean_triggers",
    "n",
    "stderr",
];

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("task `{task}`: {source}")]
    Task {
        task: String,
        #[source]
        source: PlannerError,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Half-widths of the uniform perturbation applied to every object's initial pose.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRandomization {
    /// Planar position offset (m).
    #[serde(default)]
    pub position: f64,
    /// Yaw offset (rad).
    #[serde(default)]
    pub yaw: f64,
}

fn all_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Shipped task names or task file paths (relative to the config file).
    pub tasks: Vec<String>,
    #[serde(default = "all_strategies")]
    pub strategies: Vec<Strategy>,
    pub drop_probs: Vec<f64>,
    pub trials: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub randomization: PoseRandomization,
    #[serde(default)]
    pub metrics_out: Option<PathBuf>,
    /// Directory for one trace file per trial; no traces when unset.
    #[serde(default)]
    pub trace_dir: Option<PathBuf>,
    #[serde(default = "yes")]
    pub parallel: bool,
    /// Replaces every task's perception noise.
    #[serde(default)]
    pub noise: Option<NoiseConfig>,
    /// Replaces every task's solver settings.
    #[serde(default)]
    pub solver: Option<SolverConfig>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        if self.strategies.is_empty() {
            return bad("at least one strategy is required".into());
        }
        if self.drop_probs.is_empty() {
            return bad("at least one drop probability is required".into());
        }
        if self.trials < 1 {
            return bad("trials must be at least 1".into());
        }
        if let Some(p) = self.drop_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return bad(format!("drop probability {p} is outside [0, 1]"));
        }
        let r = self.randomization;
        if !(r.position >= 0.0 && r.yaw >= 0.0) {
            return bad("randomization ranges must be non-negative".into());
        }
        if let Some(n) = self.noise {
            if !(n.sigma >= 0.0 && (0.0..=1.0).contains(&n.dropout)) {
                return bad("noise: sigma must be non-negative and dropout in [0, 1]".into());
            }
        }
        if let Some(s) = &self.solver {
            s.validate().map_err(HarnessError::Config)?;
        }
        Ok(())
    }

    /// Parses a config; relative paths inside it resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        for t in cfg.tasks.iter_mut() {
            let candidate = base_dir.join(&*t);
            if candidate.is_file() {
                *t = candidate.display().to_string();
            }
        }
        for p in [&mut cfg.metrics_out, &mut cfg.trace_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ExperimentConfig, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Applies `CHORDGRAPH_SEED` when set.
    pub fn apply_env(&mut self) -> Result<(), HarnessError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.base_seed = v
                .trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }
}

/// A task file path when one exists, otherwise a shipped task name.
pub fn resolve_task(reference: &str) -> Result<TaskSpec, PlannerError> {
    if Path::new(reference).is_file() {
        load_task(reference)
    } else {
        shipped_task(reference)
    }
}

/// Perturbs object poses; retries until no two footprints overlap.
pub fn randomize_scene<R: Rng + ?Sized>(scene: &SceneSpec, r: &PoseRandomization, rng: &mut R) -> SceneSpec {
    if r.position == 0.0 && r.yaw == 0.0 {
        return scene.clone();
    }
    for _ in 0..32 {
        let mut s = scene.clone();
        for o in s.objects.iter_mut() {
            if r.position > 0.0 {
                o.position[0] += rng.random_range(-r.position..=r.position);
                o.position[1] += rng.random_range(-r.position..=r.position);
            }
            if r.yaw > 0.0 {
                o.yaw += rng.random_range(-r.yaw..=r.yaw);
            }
        }
        let clear = s.objects.iter().enumerate().all(|(i, a)| {
            s.objects[i + 1..].iter().all(|b| {
                let d = ((a.position[0] - b.position[0]).powi(2) + (a.position[1] - b.position[1]).powi(2)).sqrt();
                d > 0.5 * (a.shape.max_horizontal_extent() + b.shape.max_horizontal_extent()) + 0.01
            })
        });
        if clear {
            return s;
        }
    }
    scene.clone()
}

/// Everything that identifies one trial.
#[derive(Debug, Clone, Copy)]
pub struct TrialSpec<'a> {
    pub task: &'a TaskSpec,
    pub solver: &'a SolverContext,
    pub strategy: Strategy,
    pub disturbance: &'a DisturbanceModel,
    pub seed: u64,
    pub randomization: PoseRandomization,
    pub trace: bool,
}

/// Runs one episode on a per-seed randomized scene.
pub fn run_trial(t: &TrialSpec) -> Result<(EpisodeResult, Trace), String> {
    let world = if t.randomization == PoseRandomization::default() {
        t.task.world()
    } else {
        let mut rng = stream_rng(t.seed, STREAM_SCENE);
        let scene = randomize_scene(&t.task.doc.scene, &t.randomization, &mut rng);
        WorldState::from_scene(&scene).map_err(|e| e.to_string())?
    };
    let label = format!("{} {}", t.task.doc.name, t.strategy);
    let setup = EpisodeSetup {
        graph: &t.task.augmented,
        solver: t.solver,
        noise: t.task.doc.noise,
        disturbance: t.disturbance,
        config: &t.task.doc.executor,
        strategy: t.strategy,
        seed: t.seed,
        trace: t.trace,
        label: &label,
    };
    run_episode(&setup, world).map_err(|e| e.to_string())
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellMetrics {
    pub task: String,
    pub p: f64,
    pub strategy: Strategy,
    /// Percent of successful trials.
    pub success_rate: f64,
    pub mean_steps: f64,
    pub mean_time_s: f64,
    pub mean_triggers: f64,
    pub n: usize,
    /// Standard error of the success rate, in percentage points.
    pub stderr: f64,
}

impl CellMetrics {
    /// Aggregates the results of one cell; means run over every trial.
    pub fn from_results(task: &str, p: f64, strategy: Strategy, results: &[EpisodeResult]) -> CellMetrics {
        let n = results.len();
        let nf = n.max(1) as f64;
        let mean = |f: &dyn Fn(&EpisodeResult) -> f64| results.iter().map(f).sum::<f64>() / nf;
        let r = results.iter().filter(|x| x.success).count() as f64 / nf;
        CellMetrics {
            task: task.to_string(),
            p,
            strategy,
            success_rate: 100.0 * r,
            mean_steps: mean(&|x| x.episode_steps as f64),
            mean_time_s: mean(&|x| x.simulated_time),
            mean_triggers: mean(&|x| x.triggers as f64),
            n,
            stderr: 100.0 * (r * (1.0 - r) / nf).sqrt(),
        }
    }

    /// Standard error of the mean simulated time.
    pub fn time_stderr(results: &[EpisodeResult]) -> f64 {
        let n = results.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let m = results.iter().map(|r| r.simulated_time).sum::<f64>() / n;
        let var = results.iter().map(|r| (r.simulated_time - m).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricsTable {
    pub rows: Vec<CellMetrics>,
}

impl MetricsTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.task.clone(),
                format!("{:.4}", r.p),
                r.strategy.to_string(),
                format!("{:.4}", r.success_rate),
                format!("{:.4}", r.mean_steps),
                format!("{:.4}", r.mean_time_s),
                format!("{:.4}", r.mean_triggers),
                r.n.to_string(),
                format!("{:.4}", r.stderr),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }
}

pub fn emit_metrics(table: &MetricsTable, path: &Path) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, table.to_csv()).map_err(|e| io_err(path, e))
}

/// Per-trial outcome kept alongside the aggregate table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub task: String,
    pub p: f64,
    pub strategy: Strategy,
    pub trial: usize,
    pub seed: u64,
    pub result: EpisodeResult,
    /// Setup or simulation error that ended the trial.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub table: MetricsTable,
    pub trials: Vec<TrialRecord>,
}

impl ExperimentOutput {
    /// Results of one cell, in trial order.
    pub fn cell(&self, task: &str, p: f64, strategy: Strategy) -> Vec<EpisodeResult> {
        self.trials
            .iter()
            .filter(|t| t.task == task && t.p == p && t.strategy == strategy)
            .map(|t| t.result.clone())
            .collect()
    }
}

fn errored(detail: String) -> EpisodeResult {
    EpisodeResult {
        success: false,
        episode_steps: 0,
        simulated_time: 0.0,
        triggers: 0,
        recovery_switches: 0,
        planner_calls: 0,
        disturbances: 0,
        eligible_draws: 0,
        final_node: String::new(),
        reason: None,
        detail: Some(detail),
        failure_context: None,
    }
}

fn trace_name(task: &str, p: f64, strategy: Strategy, trial: usize) -> String {
    format!("{task}_p{p:.4}_{strategy}_{trial:05}.ndjson")
}

/// Runs every (task, p, strategy) cell. Per-trial failures become failed trials.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    cfg.validate()?;
    let tasks = cfg
        .tasks
        .iter()
        .map(|t| {
            resolve_task(t).map_err(|source| HarnessError::Task {
                task: t.clone(),
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|mut t| {
            if let Some(n) = cfg.noise {
                t.doc.noise = n;
            }
            if let Some(s) = &cfg.solver {
                t.doc.solver = s.clone();
            }
            t
        })
        .collect::<Vec<_>>();
    let solvers: Vec<SolverContext> = tasks.iter().map(|t| t.solver_context()).collect();
    if let Some(dir) = &cfg.trace_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut jobs = Vec::new();
    for ti in 0..tasks.len() {
        for &p in &cfg.drop_probs {
            for &strategy in &cfg.strategies {
                for trial in 0..cfg.trials {
                    jobs.push((ti, p, strategy, trial));
                }
            }
        }
    }
    let run = |&(ti, p, strategy, trial): &(usize, f64, Strategy, usize)| -> Result<TrialRecord, HarnessError> {
        let task = &tasks[ti];
        let seed = cfg.base_seed.wrapping_add(trial as u64);
        let disturbance = DisturbanceModel::Bernoulli { p };
        let spec = TrialSpec {
            task,
            solver: &solvers[ti],
            strategy,
            disturbance: &disturbance,
            seed,
            randomization: cfg.randomization,
            trace: cfg.trace_dir.is_some(),
        };
        let (result, error) = match run_trial(&spec) {
            Ok((result, trace)) => {
                if let Some(dir) = &cfg.trace_dir {
                    let path = dir.join(trace_name(&task.doc.name, p, strategy, trial));
                    std::fs::write(&path, trace.to_ndjson()).map_err(|e| io_err(&path, e))?;
                }
                (result, None)
            }
            Err(e) => (errored(e.clone()), Some(e)),
        };
        Ok(TrialRecord {
            task: task.doc.name.clone(),
            p,
            strategy,
            trial,
            seed,
            result,
            error,
        })
    };
    let trials: Vec<TrialRecord> = if cfg.parallel {
        jobs.par_iter().map(run).collect::<Result<_, _>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_, _>>()?
    };
    let mut table = MetricsTable::default();
    for chunk in trials.chunks(cfg.trials) {
        let first = &chunk[0];
        let results: Vec<EpisodeResult> = chunk.iter().map(|t| t.result.clone()).collect();
        table
            .rows
            .push(CellMetrics::from_results(&first.task, first.p, first.strategy, &results));
    }
    if let Some(path) = &cfg.metrics_out {
        emit_metrics(&table, path)?;
    }
    Ok(ExperimentOutput { table, trials })
}

/// Gripper positions at every node completion of a disturbance-free run.
pub fn nominal_keyframes(task: &TaskSpec) -> Result<Vec<(NodeId, BTreeMap<Arm, [f64; 3]>)>, String> {
    let solver = task.solver_context();
    let spec = TrialSpec {
        task,
        solver: &solver,
        strategy: Strategy::AgentChord,
        disturbance: &DisturbanceModel::None,
        seed: 0,
        randomization: PoseRandomization::default(),
        trace: true,
    };
    let world = task.world();
    let mut poses: BTreeMap<Arm, [f64; 3]> = world
        .grippers
        .iter()
        .map(|(a, g)| (*a, crate::geometry::to_array(&g.pose.position)))
        .collect();
    let (result, trace) = run_trial(&spec)?;
    if !result.success {
        return Err(format!(
            "the disturbance-free run did not succeed: {}",
            result.detail.unwrap_or_default()
        ));
    }
    let mut out = vec![(task.augmented.start.clone(), poses.clone())];
    for ev in &trace.events {
        match &ev.kind {
            TraceKind::Command { arms, .. } => {
                for a in arms {
                    poses.insert(a.arm, a.position);
                }
            }
            TraceKind::NodeComplete { node, .. } => out.push((node.clone(), poses.clone())),
            _ => {}
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(success: bool, steps: u64) -> EpisodeResult {
        EpisodeResult {
            success,
            episode_steps: steps,
            simulated_time: steps as f64 * 0.1,
            ..errored(String::new())
        }
    }

    #[test]
    fn metrics_follow_results() {
        let rs = [result(true, 10), result(false, 30), result(true, 20), result(true, 40)];
        let m = CellMetrics::from_results("t", 0.1, Strategy::AgentChord, &rs);
        assert_eq!(m.n, 4);
        assert!((m.success_rate - 75.0).abs() < 1e-12);
        assert!((m.mean_steps - 25.0).abs() < 1e-12);
        assert!((m.stderr - 100.0 * (0.75f64 * 0.25 / 4.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn csv_layout() {
        let empty = MetricsTable::default().to_csv();
        assert_eq!(empty, format!("{}\n", CSV_HEADER.join(",")));
        let t = MetricsTable {
            rows: vec![CellMetrics::from_results("pour", 0.1, Strategy::Backtrack, &[result(true, 3)])],
        };
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1], "pour,0.1000,backtrack,100.0000,3.0000,0.3000,0.0000,1,0.0000");
        assert_eq!(csv, t.to_csv());
    }

    #[test]
    fn config_rejects_bad_values() {
        let dir = Path::new(".");
        let ok = r#"{"tasks":["single-arm-pour"],"drop_probs":[0.1],"trials":2}"#;
        let cfg = ExperimentConfig::parse(ok, dir).unwrap();
        assert_eq!(cfg.strategies, Strategy::ALL.to_vec());
        for bad in [
            r#"{"tasks":["single-arm-pour"],"drop_probs":[1.5],"trials":2}"#,
            r#"{"tasks":["single-arm-pour"],"drop_probs":[0.1],"trials":0}"#,
            r#"{"tasks":["single-arm-pour"],"drop_probs":[0.1],"trials":1,"strategies":["replan"]}"#,
            r#"{"tasks":[],"drop_probs":[0.1],"trials":1}"#,
        ] {
            assert!(matches!(ExperimentConfig::parse(bad, dir), Err(HarnessError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn randomized_scene_moves_objects_within_range() {
        let task = shipped_task("rearrange-table").unwrap();
        let r = PoseRandomization { position: 0.02, yaw: 0.1 };
        let mut rng = stream_rng(3, STREAM_SCENE);
        let s = randomize_scene(&task.doc.scene, &r, &mut rng);
        for (a, b) in s.objects.iter().zip(&task.doc.scene.objects) {
            assert!((a.position[0] - b.position[0]).abs() <= 0.02);
            assert!((a.position[1] - b.position[1]).abs() <= 0.02);
            assert_eq!(a.position[2], b.position[2]);
            assert!((a.yaw - b.yaw).abs() <= 0.1);
        }
        assert_ne!(s, task.doc.scene);
    }
}
