//! Task loading and the planner-service boundary.

use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Duration;

use crate::executor::{check_compatible, ExecutorConfig};
use crate::features::NoiseConfig;
use crate::graph::{
    augment, build_graph, filter_forward_moving, AugmentedGraph, Edge, GraphDoc, Node, NodeId, RecoveryDoc,
    RejectionReport, TaskGraph,
};
use crate::simworld::{DisturbanceModel, SceneSpec, Shape, WorldState};
use crate::solvers::{SolverConfig, SolverContext};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, thiserror::Error)]
pub enum PlannerError {
    #[error("cannot read `{path}`: {message}")]
    Io { path: String, message: String },
    #[error("parse error at line {line}, column {column}: {message}")]
    ParseError { line: usize, column: usize, message: String },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("planner service unreachable: {0}")]
    Unreachable(String),
    #[error("planner service returned an invalid response: {0}")]
    InvalidResponse(String),
    #[error("planner service timed out: {0}")]
    Timeout(String),
}

/// On-disk task document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDoc {
    pub schema_version: u32,
    pub name: String,
    pub instruction: String,
    pub scene: SceneSpec,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub start: NodeId,
    pub terminal: NodeId,
    #[serde(default)]
    pub recovery: Vec<RecoveryDoc>,
    #[serde(default)]
    pub disturbance: DisturbanceModel,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub executor: ExecutorConfig,
}

impl TaskDoc {
    pub fn graph_doc(&self) -> GraphDoc {
        GraphDoc {
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
            start: self.start.clone(),
            terminal: self.terminal.clone(),
        }
    }

    /// Copy with the graph and recovery sections replaced.
    pub fn with_plan(&self, graph: GraphDoc, recovery: Vec<RecoveryDoc>) -> TaskDoc {
        TaskDoc {
            nodes: graph.nodes,
            edges: graph.edges,
            start: graph.start,
            terminal: graph.terminal,
            recovery,
            ..self.clone()
        }
    }
}

/// A validated task: the document plus its nominal, augmented and filtered graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub doc: TaskDoc,
    pub graph: TaskGraph,
    /// Augmented and forward-moving filtered graph used for execution.
    pub augmented: AugmentedGraph,
    pub report: RejectionReport,
}

fn schema(e: impl std::fmt::Display) -> PlannerError {
    PlannerError::SchemaViolation(e.to_string())
}

impl TaskSpec {
    pub fn from_doc(doc: TaskDoc) -> Result<TaskSpec, PlannerError> {
        if doc.schema_version != SCHEMA_VERSION {
            return Err(schema(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        doc.solver.validate().map_err(schema)?;
        doc.disturbance.validate().map_err(schema)?;
        doc.executor.validate().map_err(schema)?;
        if !(0.0..=1.0).contains(&doc.noise.dropout) || !(doc.noise.sigma >= 0.0) {
            return Err(schema("noise needs sigma >= 0 and dropout in [0, 1]"));
        }
        let world = WorldState::from_scene(&doc.scene).map_err(schema)?;
        let graph = build_graph(doc.graph_doc()).map_err(schema)?;
        let full = augment(&graph, &doc.recovery).map_err(schema)?;
        let (augmented, report) = filter_forward_moving(&full);
        check_compatible(&augmented, &world).map_err(schema)?;
        Ok(TaskSpec {
            doc,
            graph,
            augmented,
            report,
        })
    }

    pub fn world(&self) -> WorldState {
        WorldState::from_scene(&self.doc.scene).expect("scene validated on load")
    }

    pub fn solver_context(&self) -> SolverContext {
        SolverContext::new(&self.doc.scene, self.doc.solver.clone())
    }

    /// Canonical serialization of the execution graph.
    pub fn canonical_graph(&self) -> String {
        serde_json::to_string(&self.augmented).expect("graphs serialize")
    }

    /// The document with every default filled in.
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(&self.doc).expect("task documents serialize")
    }
}

fn classify(e: serde_json::Error) -> PlannerError {
    use serde_json::error::Category;
    match e.classify() {
        Category::Syntax | Category::Eof => PlannerError::ParseError {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        },
        Category::Data => PlannerError::SchemaViolation(e.to_string()),
        Category::Io => PlannerError::Io {
            path: String::new(),
            message: e.to_string(),
        },
    }
}

pub fn parse_task(text: &str) -> Result<TaskSpec, PlannerError> {
    let doc: TaskDoc = serde_json::from_str(text).map_err(classify)?;
    TaskSpec::from_doc(doc)
}

pub fn load_task(path: impl AsRef<Path>) -> Result<TaskSpec, PlannerError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| PlannerError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_task(&text)
}

const SHIPPED: [(&str, &str); 5] = [
    ("single-arm-pour", include_str!("../tasks/single_arm_pour.json")),
    ("dual-arm-pour", include_str!("../tasks/dual_arm_pour.json")),
    ("rearrange-table", include_str!("../tasks/rearrange_table.json")),
    ("handover-block", include_str!("../tasks/handover_block.json")),
    ("setup-coffee-tray", include_str!("../tasks/setup_coffee_tray.json")),
];

/// Names and sources of the bundled task files.
pub fn shipped_tasks() -> &'static [(&'static str, &'static str)] {
    &SHIPPED
}

/// A bundled task by name or instruction.
pub fn shipped_task(name: &str) -> Result<TaskSpec, PlannerError> {
    let key = normalize(name);
    for (n, text) in SHIPPED {
        let doc: TaskDoc = serde_json::from_str(text).map_err(classify)?;
        if normalize(n) == key || normalize(&doc.instruction) == key {
            return TaskSpec::from_doc(doc);
        }
    }
    Err(PlannerError::UnknownTask(name.to_string()))
}

fn normalize(s: &str) -> String {
    s.trim()
        .to_ascii_lowercase()
        .chars()
        .map(|c| if c == '_' || c == '-' { ' ' } else { c })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Canned graph and recovery sections for a shipped task.
pub fn stub_planner(instruction: &str, _scene: &SceneSummary) -> Result<(GraphDoc, Vec<RecoveryDoc>), PlannerError> {
    let spec = shipped_task(instruction)?;
    Ok((spec.doc.graph_doc(), spec.doc.recovery))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Structure,
    Orchestrate,
    CompileHints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSummary {
    pub id: String,
    pub shape: Shape,
    pub position: [f64; 3],
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSummary {
    pub objects: Vec<ObjectSummary>,
    pub arms: Vec<crate::simworld::Arm>,
}

impl SceneSummary {
    pub fn of(scene: &SceneSpec) -> SceneSummary {
        SceneSummary {
            objects: scene
                .objects
                .iter()
                .map(|o| ObjectSummary {
                    id: o.id.clone(),
                    shape: o.shape.clone(),
                    position: o.position,
                    yaw: o.yaw,
                })
                .collect(),
            arms: scene.arms.iter().map(|a| a.arm).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerRequest {
    pub instruction: String,
    pub scene: SceneSummary,
    pub stage: Stage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecoveryFragment {
    recovery: Vec<RecoveryDoc>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlannerResponse {
    Structure(GraphDoc),
    Orchestrate(Vec<RecoveryDoc>),
    /// Reserved; the shipped system compiles monitors from the spec alone.
    CompileHints(serde_json::Value),
}

impl PlannerResponse {
    /// Validates a response body for `stage` against the task-file schema.
    pub fn parse(stage: Stage, body: &str) -> Result<PlannerResponse, PlannerError> {
        let invalid = |e: String| PlannerError::InvalidResponse(e);
        match stage {
            Stage::Structure => {
                let doc: GraphDoc = serde_json::from_str(body).map_err(|e| invalid(e.to_string()))?;
                build_graph(doc.clone()).map_err(|e| invalid(e.to_string()))?;
                Ok(PlannerResponse::Structure(doc))
            }
            Stage::Orchestrate => {
                let f: RecoveryFragment = serde_json::from_str(body).map_err(|e| invalid(e.to_string()))?;
                Ok(PlannerResponse::Orchestrate(f.recovery))
            }
            Stage::CompileHints => {
                let v: serde_json::Value = serde_json::from_str(body).map_err(|e| invalid(e.to_string()))?;
                if !v.is_object() {
                    return Err(invalid("compile hints must be a JSON object".into()));
                }
                Ok(PlannerResponse::CompileHints(v))
            }
        }
    }
}

fn plan_url(endpoint: &str) -> String {
    let base = endpoint.trim_end_matches('/');
    if base.ends_with("/plan") {
        base.to_string()
    } else {
        format!("{base}/plan")
    }
}

/// POSTs one request to `{endpoint}/plan` and validates the reply.
pub fn request_plan(endpoint: &str, req: &PlannerRequest, timeout: Duration) -> Result<PlannerResponse, PlannerError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let url = plan_url(endpoint);
    let response = agent.post(&url).send_json(req).map_err(|e| match e {
        ureq::Error::Timeout(t) => PlannerError::Timeout(format!("{url}: {t}")),
        other => PlannerError::Unreachable(format!("{url}: {other}")),
    })?;
    let status = response.status().as_u16();
    let body = response.into_body().read_to_string().map_err(|e| match e {
        ureq::Error::Timeout(t) => PlannerError::Timeout(format!("{url}: {t}")),
        other => PlannerError::InvalidResponse(other.to_string()),
    })?;
    match status {
        200 => PlannerResponse::parse(req.stage, &body),
        422 => Err(PlannerError::InvalidResponse(format!("service rejected the request: {body}"))),
        504 => Err(PlannerError::Timeout(format!("{url}: gateway timeout"))),
        s => Err(PlannerError::InvalidResponse(format!("unexpected status {s}"))),
    }
}

/// Fetches structure and recovery from a service and assembles them onto `base`.
/// Nothing from a failed exchange is applied.
pub fn plan_from_service(endpoint: &str, base: &TaskDoc, timeout: Duration) -> Result<TaskSpec, PlannerError> {
    let scene = SceneSummary::of(&base.scene);
    let ask = |stage| PlannerRequest {
        instruction: base.instruction.clone(),
        scene: scene.clone(),
        stage,
    };
    let PlannerResponse::Structure(graph) = request_plan(endpoint, &ask(Stage::Structure), timeout)? else {
        unreachable!("parsed for the structure stage")
    };
    let PlannerResponse::Orchestrate(recovery) = request_plan(endpoint, &ask(Stage::Orchestrate), timeout)? else {
        unreachable!("parsed for the orchestrate stage")
    };
    TaskSpec::from_doc(base.with_plan(graph, recovery)).map_err(|e| match e {
        PlannerError::SchemaViolation(m) => PlannerError::InvalidResponse(m),
        other => other,
    })
}

/// Same assembly path as [`plan_from_service`] with the canned planner.
pub fn plan_from_stub(base: &TaskDoc) -> Result<TaskSpec, PlannerError> {
    let (graph, recovery) = stub_planner(&base.instruction, &SceneSummary::of(&base.scene))?;
    TaskSpec::from_doc(base.with_plan(graph, recovery))
}
