//! Detector templates, the (epsilon, K) persistence monitor and sub-goal checks.

pub mod expr;

use serde::{Deserialize, Serialize};

use crate::features::{FeatureKey, FeatureVector};
use crate::geometry::{gravity_dir, vec3, Vec3};
use crate::simworld::Arm;
pub use expr::{Expr, ExprError};

pub const DEFAULT_EPSILON: f64 = 0.0;
pub const DEFAULT_K: usize = 3;
pub const DEFAULT_DELTA_SHIFT: f64 = 0.05;
pub const DEFAULT_THETA_MAX: f64 = 0.35;
pub const DEFAULT_DELTA_ATTACH: f64 = 0.08;
pub const DEFAULT_N_MIN: f64 = 20.0;
pub const DEFAULT_DELTA_REL: f64 = 0.04;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MonitorError {
    #[error("missing feature `{0}`")]
    MissingFeature(FeatureKey),
    #[error("shift detector on `{0}` has no reference position")]
    NoReference(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    LateralOffset,
    CentroidDistance,
    HeightDifference,
}

fn d_shift() -> f64 {
    DEFAULT_DELTA_SHIFT
}
fn d_theta() -> f64 {
    DEFAULT_THETA_MAX
}
fn d_attach() -> f64 {
    DEFAULT_DELTA_ATTACH
}
fn d_nmin() -> f64 {
    DEFAULT_N_MIN
}
fn d_rel() -> f64 {
    DEFAULT_DELTA_REL
}

/// Constraint or failure function `f(z)`; positive values mean violation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "template", rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectorTemplate {
    Shift {
        object: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reference: Option<[f64; 3]>,
        #[serde(default = "d_shift")]
        delta_shift: f64,
    },
    Tilt {
        object: String,
        #[serde(default = "d_theta")]
        theta_max: f64,
    },
    GraspOpening {
        arm: Arm,
        g_th: f64,
    },
    Attach {
        object: String,
        arm: Arm,
        #[serde(default = "d_attach")]
        delta_attach: f64,
    },
    Visibility {
        object: String,
        #[serde(default = "d_nmin")]
        n_min: f64,
    },
    Relational {
        objects: [String; 2],
        relation: Relation,
        #[serde(default = "d_rel")]
        delta_rel: f64,
        /// Desired value of the relation; the detector measures |d - target|.
        #[serde(default)]
        target: f64,
    },
    Expr {
        expr: Expr,
    },
}

/// Constraints share the detector representation.
pub type ConstraintSpec = DetectorTemplate;

impl DetectorTemplate {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorTemplate::Shift { .. } => "shift",
            DetectorTemplate::Tilt { .. } => "tilt",
            DetectorTemplate::GraspOpening { .. } => "grasp_opening",
            DetectorTemplate::Attach { .. } => "attach",
            DetectorTemplate::Visibility { .. } => "visibility",
            DetectorTemplate::Relational { .. } => "relational",
            DetectorTemplate::Expr { .. } => "expr",
        }
    }

    /// Feature keys read by this template.
    pub fn required_keys(&self) -> Vec<FeatureKey> {
        use FeatureKey::*;
        match self {
            DetectorTemplate::Shift { object, .. } => vec![Centroid(object.clone())],
            DetectorTemplate::Tilt { object, .. } => vec![PrincipalAxis(object.clone())],
            DetectorTemplate::GraspOpening { arm, .. } => vec![GripperWidth(*arm)],
            DetectorTemplate::Attach { object, arm, .. } => {
                vec![Centroid(object.clone()), GripperOrigin(*arm)]
            }
            DetectorTemplate::Visibility { object, .. } => vec![PointCount(object.clone())],
            DetectorTemplate::Relational { objects, .. } => {
                vec![Centroid(objects[0].clone()), Centroid(objects[1].clone())]
            }
            DetectorTemplate::Expr { expr } => expr.keys().to_vec(),
        }
    }

    /// Object ids referenced by the template.
    pub fn objects(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .required_keys()
            .iter()
            .flat_map(|k| k.objects().into_iter().map(str::to_string).collect::<Vec<_>>())
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn arms(&self) -> Vec<Arm> {
        let mut out: Vec<Arm> = self.required_keys().iter().filter_map(|k| k.arm()).collect();
        out.sort();
        out.dedup();
        out
    }

    /// Checks declared thresholds.
    pub fn validate(&self) -> Result<(), String> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{} threshold `{name}` must be positive", self.name()))
            }
        };
        match self {
            DetectorTemplate::Shift { delta_shift, .. } => positive("delta_shift", *delta_shift),
            DetectorTemplate::Tilt { theta_max, .. } => positive("theta_max", *theta_max),
            DetectorTemplate::GraspOpening { g_th, .. } => positive("g_th", *g_th),
            DetectorTemplate::Attach { delta_attach, .. } => positive("delta_attach", *delta_attach),
            DetectorTemplate::Visibility { n_min, .. } => positive("n_min", *n_min),
            DetectorTemplate::Relational { delta_rel, .. } => positive("delta_rel", *delta_rel),
            DetectorTemplate::Expr { .. } => Ok(()),
        }
    }

    /// Returns a copy whose shift reference is the current centroid estimate.
    pub fn bind_reference(&self, z: &FeatureVector) -> DetectorTemplate {
        match self {
            DetectorTemplate::Shift {
                object,
                reference: None,
                delta_shift,
            } => DetectorTemplate::Shift {
                object: object.clone(),
                reference: z
                    .vector(&FeatureKey::Centroid(object.clone()))
                    .map(|v| [v.x, v.y, v.z]),
                delta_shift: *delta_shift,
            },
            other => other.clone(),
        }
    }
}

fn vector(z: &FeatureVector, key: FeatureKey) -> Result<Vec3, MonitorError> {
    z.vector(&key).ok_or(MonitorError::MissingFeature(key))
}

fn scalar(z: &FeatureVector, key: FeatureKey) -> Result<f64, MonitorError> {
    z.scalar(&key).ok_or(MonitorError::MissingFeature(key))
}

/// Evaluates `f(z)`; values `<= 0` mean normal execution.
pub fn eval_detector(template: &DetectorTemplate, z: &FeatureVector) -> Result<f64, MonitorError> {
    use FeatureKey::*;
    match template {
        DetectorTemplate::Shift {
            object,
            reference,
            delta_shift,
        } => {
            let p = vector(z, Centroid(object.clone()))?;
            let r = reference.ok_or_else(|| MonitorError::NoReference(object.clone()))?;
            Ok((p - vec3(r)).norm() - delta_shift)
        }
        DetectorTemplate::Tilt { object, theta_max } => {
            let u = vector(z, PrincipalAxis(object.clone()))?;
            Ok(u.dot(&gravity_dir()).abs().clamp(0.0, 1.0).acos() - theta_max)
        }
        DetectorTemplate::GraspOpening { arm, g_th } => Ok(scalar(z, GripperWidth(*arm))? - g_th),
        DetectorTemplate::Attach {
            object,
            arm,
            delta_attach,
        } => {
            let p = vector(z, Centroid(object.clone()))?;
            let g = vector(z, GripperOrigin(*arm))?;
            Ok((p - g).norm() - delta_attach)
        }
        DetectorTemplate::Visibility { object, n_min } => {
            let n = z.scalar(&PointCount(object.clone())).unwrap_or(0.0);
            Ok(n_min - n)
        }
        DetectorTemplate::Relational {
            objects,
            relation,
            delta_rel,
            target,
        } => {
            let a = vector(z, Centroid(objects[0].clone()))?;
            let b = vector(z, Centroid(objects[1].clone()))?;
            let d = a - b;
            let measured = match relation {
                Relation::LateralOffset => (d.x * d.x + d.y * d.y).sqrt(),
                Relation::CentroidDistance => d.norm(),
                Relation::HeightDifference => d.z,
            };
            Ok((measured - target).abs() - delta_rel)
        }
        DetectorTemplate::Expr { expr } => expr.eval(z).map_err(|e| match e {
            ExprError::Missing(k) => MonitorError::MissingFeature(k),
            other => MonitorError::Expr(other),
        }),
    }
}

/// Persistence monitor: triggers once the last `k` samples all exceed `epsilon`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitorState {
    pub failure_id: String,
    pub epsilon: f64,
    pub k: usize,
    buffer: Vec<bool>,
    head: usize,
    seen: usize,
}

impl MonitorState {
    pub fn new(failure_id: impl Into<String>, epsilon: f64, k: usize) -> MonitorState {
        let k = k.max(1);
        MonitorState {
            failure_id: failure_id.into(),
            epsilon,
            k,
            buffer: vec![false; k],
            head: 0,
            seen: 0,
        }
    }

    pub fn reset(&mut self) {
        self.buffer.iter_mut().for_each(|b| *b = false);
        self.head = 0;
        self.seen = 0;
    }

    /// Samples observed since the last reset.
    pub fn seen(&self) -> usize {
        self.seen
    }

    /// The last `k` violation flags, oldest first.
    pub fn window(&self) -> Vec<bool> {
        (0..self.k).map(|i| self.buffer[(self.head + i) % self.k]).collect()
    }
}

/// Pushes one sample; returns true when the monitor fires (and resets it).
pub fn update_monitor(state: &mut MonitorState, f_value: f64) -> bool {
    state.buffer[state.head] = f_value > state.epsilon;
    state.head = (state.head + 1) % state.k;
    state.seen += 1;
    let fired = state.seen >= state.k && state.buffer.iter().all(|b| *b);
    if fired {
        state.reset();
    }
    fired
}

/// True iff every constraint evaluates to at most `tol`.
pub fn subgoal_satisfied(
    sub_goals: &[ConstraintSpec],
    z: &FeatureVector,
    tol: f64,
) -> Result<bool, MonitorError> {
    for c in sub_goals {
        if eval_detector(c, z)? > tol {
            return Ok(false);
        }
    }
    Ok(true)
}

/// One fresh monitor per failure mode, in declaration order.
pub fn compile_edge_monitors(edge: &crate::graph::Edge) -> Vec<MonitorState> {
    edge.failure_modes
        .iter()
        .map(|m| MonitorState::new(m.id.clone(), m.epsilon, m.k))
        .collect()
}
