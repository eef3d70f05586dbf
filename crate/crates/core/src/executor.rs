//! Graph traversal engine: runs edge programs step by step, evaluates monitors after
//! every command, switches to recovery edges on triggers and advances on sub-goals.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::features::{extract_features, FeatureKey, FeatureVector, NoiseConfig, RobotState};
use crate::geometry::{to_array, Pose};
use crate::graph::{AugmentedGraph, Edge, EdgeId, NodeId, NodeKind};
use crate::monitors::{eval_detector, subgoal_satisfied, update_monitor, DetectorTemplate, MonitorState};
use crate::simworld::{
    check_success, Arm, AtomicActionSpec, AtomicExecution, DisturbanceModel, EventTime, MotionCtx, Senses, SimError,
    TickOutcome, WorldEventKind, WorldState, DEFAULT_SAMPLE_NUM,
};
use crate::solvers::SolverContext;

/// Random stream ids derived from one trial seed.
pub const STREAM_SCENE: u64 = 0;
pub const STREAM_NOISE: u64 = 1;
pub const STREAM_DISTURBANCE: u64 = 2;
pub const STREAM_SOLVER: u64 = 3;

/// Generator for one stream of a trial.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "agentchord")]
    AgentChord,
    #[serde(rename = "backtrack")]
    Backtrack,
    #[serde(rename = "none")]
    NoRecovery,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::AgentChord, Strategy::Backtrack, Strategy::NoRecovery];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::AgentChord => "agentchord",
            Strategy::Backtrack => "backtrack",
            Strategy::NoRecovery => "none",
        }
    }

    /// Planner stages charged before execution starts.
    pub fn planner_stages(self) -> &'static [&'static str] {
        match self {
            Strategy::AgentChord => &["structure", "orchestrate", "compile-hints"],
            Strategy::Backtrack => &["structure", "compile-hints"],
            Strategy::NoRecovery => &["structure"],
        }
    }

    fn monitors_on(self) -> bool {
        self != Strategy::NoRecovery
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "agentchord" | "ac" => Ok(Strategy::AgentChord),
            "backtrack" | "bt" | "agentchord-bt" => Ok(Strategy::Backtrack),
            "none" | "norecovery" | "no-recovery" => Ok(Strategy::NoRecovery),
            other => Err(format!("unknown strategy `{other}` (expected agentchord, backtrack or none)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutorConfig {
    /// Seconds per control step.
    pub dt: f64,
    /// Simulated seconds charged per planner call.
    pub planner_latency: f64,
    pub step_budget: u64,
    /// Consecutive failures tolerated on one edge.
    pub per_edge_cap: u32,
    /// Failure-driven switches tolerated per episode.
    pub episode_cap: u32,
    /// Deepest backtrack allowed by the backtracking strategy.
    pub backtrack_depth_cap: usize,
    /// Sub-goal constraints count as met at values `<= subgoal_tol`.
    pub subgoal_tol: f64,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        ExecutorConfig {
            dt: 0.1,
            planner_latency: 5.0,
            step_budget: 3000,
            per_edge_cap: 3,
            episode_cap: 10,
            backtrack_depth_cap: 3,
            subgoal_tol: 1e-3,
        }
    }
}

impl ExecutorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.dt > 0.0) || !(self.planner_latency >= 0.0) {
            return Err("dt must be > 0 and planner_latency >= 0".into());
        }
        if self.step_budget == 0 || self.per_edge_cap == 0 || self.episode_cap == 0 {
            return Err("step_budget and caps must be positive".into());
        }
        if !(self.subgoal_tol >= 0.0) {
            return Err("subgoal_tol must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    StepBudgetExceeded,
    RecoveryLoopCap,
    SolverInfeasible,
    DeadEnd,
    TerminalConstraintsUnmet,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FailureReason::StepBudgetExceeded => "step-budget-exceeded",
            FailureReason::RecoveryLoopCap => "recovery-loop-cap",
            FailureReason::SolverInfeasible => "solver-infeasible",
            FailureReason::DeadEnd => "dead-end",
            FailureReason::TerminalConstraintsUnmet => "terminal-constraints-unmet",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub episode_steps: u64,
    pub simulated_time: f64,
    pub triggers: u32,
    pub recovery_switches: u32,
    pub planner_calls: u32,
    pub disturbances: u32,
    /// Drop draws made by atomic actions that started while holding an object.
    pub eligible_draws: u32,
    pub final_node: NodeId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<FailureReason>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    /// Last completed node when the episode failed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure_context: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmRecord {
    pub arm: Arm,
    pub position: [f64; 3],
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TraceKind {
    Command {
        edge: EdgeId,
        action: String,
        index: usize,
        arms: Vec<ArmRecord>,
    },
    MonitorEval {
        edge: EdgeId,
        failure: String,
        /// `null` when a required feature was missing.
        value: Option<f64>,
        violated: bool,
    },
    Trigger {
        edge: EdgeId,
        failure: String,
        context: NodeId,
    },
    EdgeSwitch {
        #[serde(skip_serializing_if = "Option::is_none")]
        from_edge: Option<EdgeId>,
        to_edge: EdgeId,
        recovery: bool,
        cause: String,
    },
    NodeComplete {
        node: NodeId,
        dist: Option<f64>,
    },
    Disturbance {
        event: WorldEventKind,
    },
    PlannerCall {
        stage: String,
        latency_s: f64,
    },
    Terminal {
        success: bool,
        #[serde(skip_serializing_if = "Option::is_none")]
        reason: Option<FailureReason>,
        steps: u64,
        simulated_time: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEvent {
    pub step: u64,
    #[serde(flatten)]
    pub kind: TraceKind,
}

/// Episode trace: a header record plus events. Disabled traces keep only the header.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: serde_json::Value,
    pub events: Vec<TraceEvent>,
    enabled: bool,
}

impl Trace {
    pub fn new(header: serde_json::Value, enabled: bool) -> Trace {
        Trace {
            header,
            events: Vec::new(),
            enabled,
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    fn push(&mut self, step: u64, kind: TraceKind) {
        if self.enabled {
            self.events.push(TraceEvent { step, kind });
        }
    }

    pub fn count(&self, pred: impl Fn(&TraceKind) -> bool) -> usize {
        self.events.iter().filter(|e| pred(&e.kind)).count()
    }

    /// Newline-delimited JSON, header first.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&self.header).expect("header serializes"));
        out.push('\n');
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ExecutorError {
    #[error("invalid episode setup: {0}")]
    InvalidSetup(String),
}

/// Everything an episode needs besides the initial world.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeSetup<'a> {
    pub graph: &'a AugmentedGraph,
    pub solver: &'a SolverContext,
    pub noise: NoiseConfig,
    pub disturbance: &'a DisturbanceModel,
    pub config: &'a ExecutorConfig,
    pub strategy: Strategy,
    pub seed: u64,
    /// Record the full event trace.
    pub trace: bool,
    /// Free-form label echoed in the trace header.
    pub label: &'a str,
}

fn header(setup: &EpisodeSetup) -> serde_json::Value {
    serde_json::json!({
        "kind": "header",
        "label": setup.label,
        "strategy": setup.strategy,
        "seed": setup.seed,
        "executor": setup.config,
        "noise": setup.noise,
        "disturbance": setup.disturbance,
        "solver": setup.solver.config,
    })
}

/// Checks that every object and arm referenced by the graph exists in the world.
pub fn check_compatible(graph: &AugmentedGraph, world: &WorldState) -> Result<(), ExecutorError> {
    let missing_obj = |id: &str| {
        (!world.objects.contains_key(id)).then(|| ExecutorError::InvalidSetup(format!("unknown object `{id}`")))
    };
    let missing_arm = |arm: Arm| {
        (!world.grippers.contains_key(&arm)).then(|| ExecutorError::InvalidSetup(format!("unknown arm `{arm}`")))
    };
    let check_constraint = |c: &DetectorTemplate| -> Result<(), ExecutorError> {
        for o in c.objects() {
            if let Some(e) = missing_obj(&o) {
                return Err(e);
            }
        }
        for a in c.arms() {
            if let Some(e) = missing_arm(a) {
                return Err(e);
            }
        }
        Ok(())
    };
    for n in &graph.nodes {
        n.sub_goals.iter().try_for_each(check_constraint)?;
        for a in n.gripper_intent.keys() {
            if let Some(e) = missing_arm(*a) {
                return Err(e);
            }
        }
    }
    for e in &graph.edges {
        e.path_constraints.iter().try_for_each(check_constraint)?;
        for m in &e.failure_modes {
            check_constraint(&m.detector)?;
        }
        for a in &e.program {
            a.validate()
                .map_err(|err| ExecutorError::InvalidSetup(format!("edge `{}`: {err}", e.id)))?;
            for o in a.objects() {
                if let Some(err) = missing_obj(&o) {
                    return Err(err);
                }
            }
            for p in a.parts() {
                if let Some(err) = p.arm().and_then(missing_arm) {
                    return Err(err);
                }
            }
        }
    }
    Ok(())
}

/// First nominal outgoing edge, or the recovery target after a trigger.
pub fn select_edge<'g>(
    graph: &'g AugmentedGraph,
    node: &str,
    last_failure: Option<(&str, &str)>,
) -> Result<&'g Edge, String> {
    if let Some((edge, failure)) = last_failure {
        let target = graph.recovery_target(edge, failure).map_err(|e| e.to_string())?;
        return graph.edge(&target).ok_or_else(|| format!("recovery edge `{target}` is missing"));
    }
    graph
        .outgoing(node)
        .into_iter()
        .find(|e| !e.is_recovery())
        .ok_or_else(|| format!("node `{node}` has no nominal outgoing edge"))
}

enum EdgeOutcome {
    /// Target sub-goal satisfied.
    Completed,
    /// Program ran out without satisfying the target sub-goal.
    Exhausted,
    Triggered(String),
}

struct Abort {
    reason: FailureReason,
    detail: String,
}

impl From<SimError> for Abort {
    fn from(e: SimError) -> Abort {
        Abort {
            reason: FailureReason::SolverInfeasible,
            detail: e.to_string(),
        }
    }
}

struct Run<'a> {
    setup: EpisodeSetup<'a>,
    world: WorldState,
    senses: Senses,
    disturbance_rng: ChaCha8Rng,
    trace: Trace,
    dists: BTreeMap<NodeId, f64>,
    actions_started: usize,
    events_seen: usize,
    fired: BTreeSet<usize>,
    triggers: u32,
    switches: u32,
    eligible: u32,
}

impl<'a> Run<'a> {
    fn step(&self) -> u64 {
        self.world.step
    }

    fn log_world_events(&mut self) {
        while self.events_seen < self.world.events.len() {
            let ev = &self.world.events[self.events_seen];
            if ev.kind.is_disturbance() {
                let (step, kind) = (ev.step, ev.kind.clone());
                self.trace.push(step, TraceKind::Disturbance { event: kind });
            }
            self.events_seen += 1;
        }
    }

    fn fire_scheduled(&mut self, exec: &AtomicExecution) -> Result<(), Abort> {
        let events = self.setup.disturbance.scheduled();
        for (i, ev) in events.iter().enumerate() {
            if self.fired.contains(&i) {
                continue;
            }
            let due = match ev.at {
                EventTime::AtStep { step } => self.world.step >= step,
                EventTime::AtAction { action, offset } => exec.index == action && exec.ticks() >= offset,
            };
            if due {
                self.fired.insert(i);
                self.world.inject(&ev.event, &mut self.disturbance_rng)?;
            }
        }
        self.log_world_events();
        Ok(())
    }

    fn features(&mut self, keys: &[FeatureKey]) -> FeatureVector {
        let robot = RobotState::from_world(&self.world);
        let x = self.senses.perceive(&self.world);
        extract_features(x, &robot, keys)
    }

    fn check_budget(&self) -> Result<(), Abort> {
        if self.world.step >= self.setup.config.step_budget {
            return Err(Abort {
                reason: FailureReason::StepBudgetExceeded,
                detail: format!("step budget {} exhausted", self.setup.config.step_budget),
            });
        }
        Ok(())
    }

    /// Runs one atomic execution to completion under the edge's monitors.
    fn drive(
        &mut self,
        mut exec: AtomicExecution,
        edge: &Edge,
        monitors: &mut [(MonitorState, DetectorTemplate)],
        goal: Option<&[DetectorTemplate]>,
        keys: &[FeatureKey],
    ) -> Result<Option<EdgeOutcome>, Abort> {
        self.eligible += exec.eligible.len() as u32;
        let ctx = MotionCtx {
            solver: self.setup.solver,
            path_constraints: &edge.path_constraints,
        };
        loop {
            self.fire_scheduled(&exec)?;
            self.check_budget()?;
            let before = self.world.grippers.clone();
            let outcome = exec.tick(&mut self.world, &mut self.senses, &ctx, &mut self.disturbance_rng)?;
            self.log_world_events();
            if outcome == TickOutcome::Finished {
                return Ok(None);
            }
            let step = self.step();
            if self.trace.is_enabled() {
                let arms = self
                    .world
                    .grippers
                    .iter()
                    .filter(|(a, g)| before.get(a).is_none_or(|b| b.pose != g.pose || b.width != g.width))
                    .map(|(a, g)| ArmRecord {
                        arm: *a,
                        position: to_array(&g.pose.position),
                        width: g.width,
                    })
                    .collect();
                self.trace.push(
                    step,
                    TraceKind::Command {
                        edge: edge.id.clone(),
                        action: exec.name.to_string(),
                        index: exec.index,
                        arms,
                    },
                );
            }
            if keys.is_empty() {
                continue;
            }
            let z = self.features(keys);
            for (state, detector) in monitors.iter_mut() {
                let value = eval_detector(detector, &z).ok();
                // an unevaluable detector reports no violation
                let v = value.unwrap_or(f64::NEG_INFINITY);
                let fired = update_monitor(state, v);
                self.trace.push(
                    step,
                    TraceKind::MonitorEval {
                        edge: edge.id.clone(),
                        failure: state.failure_id.clone(),
                        value,
                        violated: v > state.epsilon,
                    },
                );
                if fired {
                    self.triggers += 1;
                    let failure = state.failure_id.clone();
                    self.trace.push(
                        step,
                        TraceKind::Trigger {
                            edge: edge.id.clone(),
                            failure: failure.clone(),
                            context: edge.from.clone(),
                        },
                    );
                    return Ok(Some(EdgeOutcome::Triggered(failure)));
                }
            }
            if let Some(goal) = goal {
                if subgoal_satisfied(goal, &z, self.setup.config.subgoal_tol).unwrap_or(false) {
                    return Ok(Some(EdgeOutcome::Completed));
                }
            }
        }
    }

    fn run_edge(&mut self, edge: &Edge) -> Result<EdgeOutcome, Abort> {
        let strategy = self.setup.strategy;
        let graph = self.setup.graph;
        let target = graph.node(&edge.to).expect("validated graph");
        let goal = strategy.monitors_on().then_some(target.sub_goals.as_slice());
        let detectors: Vec<DetectorTemplate> = if strategy.monitors_on() {
            edge.failure_modes.iter().map(|m| m.detector.clone()).collect()
        } else {
            Vec::new()
        };
        let mut keys: Vec<FeatureKey> = detectors.iter().flat_map(|d| d.required_keys()).collect();
        if let Some(goal) = goal {
            keys.extend(goal.iter().flat_map(|c| c.required_keys()));
        }
        keys.sort();
        keys.dedup();
        let mut monitors: Vec<(MonitorState, DetectorTemplate)> = Vec::new();
        if !detectors.is_empty() {
            let z = self.features(&keys);
            for (m, d) in edge.failure_modes.iter().zip(&detectors) {
                monitors.push((MonitorState::new(m.id.clone(), m.epsilon, m.k), d.bind_reference(&z)));
            }
        }
        for spec in &edge.program {
            let ctx = MotionCtx {
                solver: self.setup.solver,
                path_constraints: &edge.path_constraints,
            };
            let index = self.next_index();
            let exec = AtomicExecution::start(
                spec,
                index,
                &self.world,
                &mut self.senses,
                &ctx,
                self.setup.disturbance,
                &mut self.disturbance_rng,
            )?;
            if let Some(outcome) = self.drive(exec, edge, &mut monitors, goal, &keys)? {
                return Ok(outcome);
            }
        }
        match goal {
            Some(goal) => {
                let z = self.features(&keys);
                if subgoal_satisfied(goal, &z, self.setup.config.subgoal_tol).unwrap_or(false) {
                    Ok(EdgeOutcome::Completed)
                } else {
                    Ok(EdgeOutcome::Exhausted)
                }
            }
            None => Ok(EdgeOutcome::Completed),
        }
    }

    /// Moves every arm back to a stored keyframe without monitoring, then reopens
    /// empty grippers that were open at the keyframe.
    fn return_to(&mut self, keyframe: &Keyframe, edge: &Edge) -> Result<(), Abort> {
        let ctx = MotionCtx {
            solver: self.setup.solver,
            path_constraints: &[],
        };
        let poses: BTreeMap<Arm, Pose> = keyframe.iter().map(|(a, (p, _))| (*a, *p)).collect();
        let index = self.next_index();
        let exec = AtomicExecution::to_poses(
            &poses,
            index,
            &self.world,
            &ctx,
            self.setup.disturbance,
            &mut self.disturbance_rng,
        )?;
        self.drive(exec, edge, &mut [], None, &[])?;
        for (arm, (_, open)) in keyframe {
            let Some(g) = self.world.grippers.get(arm) else { continue };
            if *open && g.closed && g.held.is_none() {
                let spec = AtomicActionSpec::OpenGripper {
                    robot_name: *arm,
                    sample_num: DEFAULT_SAMPLE_NUM,
                };
                let index = self.next_index();
                let exec = AtomicExecution::start(
                    &spec,
                    index,
                    &self.world,
                    &mut self.senses,
                    &ctx,
                    self.setup.disturbance,
                    &mut self.disturbance_rng,
                )?;
                self.drive(exec, edge, &mut [], None, &[])?;
            }
        }
        Ok(())
    }

    fn next_index(&mut self) -> usize {
        self.actions_started += 1;
        self.actions_started - 1
    }

    fn complete(&mut self, node: &str) {
        let dist = self.dists.get(node).copied();
        self.trace.push(
            self.step(),
            TraceKind::NodeComplete {
                node: node.to_string(),
                dist,
            },
        );
    }

    fn switch(&mut self, from: Option<&Edge>, to: &Edge, cause: &str) {
        self.switches += 1;
        self.trace.push(
            self.step(),
            TraceKind::EdgeSwitch {
                from_edge: from.map(|e| e.id.clone()),
                to_edge: to.id.clone(),
                recovery: to.is_recovery(),
                cause: cause.to_string(),
            },
        );
    }

    fn cap_check(&self, consecutive: u32) -> Result<(), Abort> {
        let cfg = self.setup.config;
        if consecutive > cfg.per_edge_cap || self.switches >= cfg.episode_cap {
            return Err(Abort {
                reason: FailureReason::RecoveryLoopCap,
                detail: format!(
                    "{consecutive} consecutive failures on one edge, {} switches this episode",
                    self.switches
                ),
            });
        }
        Ok(())
    }

    /// Cheapest way out of a recovery node: edge weight plus remaining cost-to-go.
    fn merge_edge(&self, node: &str) -> Option<&'a Edge> {
        let graph = self.setup.graph;
        graph
            .outgoing(node)
            .into_iter()
            .filter_map(|e| self.dists.get(&e.to).map(|d| (e.weight() + d, e)))
            .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)))
            .map(|(_, e)| e)
    }

    fn traverse(&mut self) -> Result<NodeId, (Abort, NodeId)> {
        let graph = self.setup.graph;
        let strategy = self.setup.strategy;
        let mut v = graph.start.clone();
        let mut last_nominal = v.clone();
        let mut forced: Option<&'a Edge> = None;
        let mut consecutive: BTreeMap<EdgeId, u32> = BTreeMap::new();
        // backtracking state: completed nominal nodes with their keyframes
        let mut stack: Vec<(NodeId, Keyframe)> = vec![(v.clone(), self.keyframe())];
        let mut high_water = 0usize;
        let mut depth = 0usize;
        while v != graph.terminal {
            let edge = match forced.take() {
                Some(e) => e,
                None => {
                    let pick = if graph.node(&v).is_some_and(|n| n.kind == NodeKind::Recovery) {
                        self.merge_edge(&v).ok_or_else(|| format!("recovery node `{v}` has no merge edge"))
                    } else {
                        select_edge(graph, &v, None)
                    };
                    pick.map_err(|detail| {
                        (
                            Abort {
                                reason: FailureReason::DeadEnd,
                                detail,
                            },
                            last_nominal.clone(),
                        )
                    })?
                }
            };
            let outcome = self.run_edge(edge).map_err(|a| (a, last_nominal.clone()))?;
            let failure = match outcome {
                EdgeOutcome::Completed => {
                    consecutive.remove(&edge.id);
                    v = edge.to.clone();
                    self.complete(&v);
                    if graph.node(&v).is_some_and(|n| n.kind != NodeKind::Recovery) {
                        last_nominal = v.clone();
                    }
                    if strategy == Strategy::Backtrack {
                        stack.push((v.clone(), self.keyframe()));
                        if stack.len() - 1 > high_water {
                            high_water = stack.len() - 1;
                            depth = 0;
                        }
                    }
                    continue;
                }
                EdgeOutcome::Exhausted => None,
                EdgeOutcome::Triggered(f) => Some(f),
            };
            let count = consecutive.entry(edge.id.clone()).or_insert(0);
            *count += 1;
            let count = *count;
            let cause = failure.clone().unwrap_or_else(|| "subgoal-unmet".to_string());
            match strategy {
                Strategy::AgentChord => {
                    self.cap_check(count).map_err(|a| (a, last_nominal.clone()))?;
                    let next = match &failure {
                        Some(f) => select_edge(graph, &edge.from, Some((&edge.id, f))).map_err(|detail| {
                            (
                                Abort {
                                    reason: FailureReason::DeadEnd,
                                    detail,
                                },
                                last_nominal.clone(),
                            )
                        })?,
                        None => edge,
                    };
                    self.switch(Some(edge), next, &cause);
                    forced = Some(next);
                }
                Strategy::Backtrack => {
                    depth += 1;
                    let cfg = self.setup.config;
                    if depth > cfg.backtrack_depth_cap {
                        return Err((
                            Abort {
                                reason: FailureReason::RecoveryLoopCap,
                                detail: format!("backtracked {} nodes deep", depth),
                            },
                            last_nominal,
                        ));
                    }
                    self.cap_check(count).map_err(|a| (a, last_nominal.clone()))?;
                    let keep = stack.len().saturating_sub(depth).max(1);
                    stack.truncate(keep);
                    let (node, keyframe) = stack.last().cloned().expect("stack keeps the start");
                    let next = select_edge(graph, &node, None).map_err(|detail| {
                        (
                            Abort {
                                reason: FailureReason::DeadEnd,
                                detail,
                            },
                            last_nominal.clone(),
                        )
                    })?;
                    self.switch(Some(edge), next, &cause);
                    v = node;
                    last_nominal = v.clone();
                    self.return_to(&keyframe, next).map_err(|a| (a, last_nominal.clone()))?;
                    forced = Some(next);
                }
                Strategy::NoRecovery => {
                    // open loop: monitors and sub-goal checks are off, so programs always complete
                    unreachable!("open-loop edges always complete")
                }
            }
        }
        Ok(v)
    }

    fn keyframe(&self) -> Keyframe {
        self.world.grippers.iter().map(|(a, g)| (*a, (g.pose, !g.closed))).collect()
    }
}

/// Per-arm pose and whether the gripper was open.
type Keyframe = BTreeMap<Arm, (Pose, bool)>;

/// Runs one episode of `setup.strategy` from `world`.
pub fn run_episode(setup: &EpisodeSetup, world: WorldState) -> Result<(EpisodeResult, Trace), ExecutorError> {
    check_compatible(setup.graph, &world)?;
    setup.config.validate().map_err(ExecutorError::InvalidSetup)?;
    setup.disturbance.validate().map_err(ExecutorError::InvalidSetup)?;
    let terminal = setup
        .graph
        .node(&setup.graph.terminal)
        .ok_or_else(|| ExecutorError::InvalidSetup("terminal node missing".into()))?
        .sub_goals
        .clone();
    let events_seen = world.events.len();
    let mut run = Run {
        setup: *setup,
        world,
        senses: Senses::new(
            setup.noise,
            stream_rng(setup.seed, STREAM_NOISE),
            stream_rng(setup.seed, STREAM_SOLVER),
        ),
        disturbance_rng: stream_rng(setup.seed, STREAM_DISTURBANCE),
        trace: Trace::new(header(setup), setup.trace),
        dists: setup.graph.dists_to(&setup.graph.terminal),
        actions_started: 0,
        events_seen,
        fired: BTreeSet::new(),
        triggers: 0,
        switches: 0,
        eligible: 0,
    };
    let stages = setup.strategy.planner_stages();
    for stage in stages {
        run.trace.push(
            0,
            TraceKind::PlannerCall {
                stage: stage.to_string(),
                latency_s: setup.config.planner_latency,
            },
        );
    }
    let traversal = run.traverse();
    let (mut reason, mut detail, final_node, mut context) = match traversal {
        Ok(v) => (None, None, v, None),
        Err((abort, ctx)) => (Some(abort.reason), Some(abort.detail), ctx.clone(), Some(ctx)),
    };
    let mut success = false;
    if reason.is_none() {
        success = check_success(&run.world, &terminal, setup.config.subgoal_tol);
        if !success {
            reason = Some(FailureReason::TerminalConstraintsUnmet);
            detail = Some("terminal sub-goals do not hold on the final state".into());
            context = Some(final_node.clone());
        }
    }
    let steps = run.world.step;
    let calls = stages.len() as u32;
    let simulated_time = steps as f64 * setup.config.dt + calls as f64 * setup.config.planner_latency;
    run.trace.push(
        steps,
        TraceKind::Terminal {
            success,
            reason,
            steps,
            simulated_time,
        },
    );
    let result = EpisodeResult {
        success,
        episode_steps: steps,
        simulated_time,
        triggers: run.triggers,
        recovery_switches: run.switches,
        planner_calls: calls,
        disturbances: run.world.disturbance_count() as u32,
        eligible_draws: run.eligible,
        final_node,
        reason,
        detail,
        failure_context: context,
    };
    Ok((result, run.trace))
}
