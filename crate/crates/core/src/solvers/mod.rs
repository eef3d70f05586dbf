//! Keyframe synthesis and receding-horizon path refinement over a free-flyer reachability model.

mod path;
mod sdf;
mod subgoal;

pub use path::{solve_path, PathObjective, PathProblem};
pub use sdf::{sdf_query, CollisionField, SdfSample};
pub use subgoal::{solve_subgoal, SubgoalProblem};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::features::{FeatureKey, FeatureValue, FeatureVector};
use crate::geometry::{Aabb, Pose, Vec3};
use crate::monitors::{eval_detector, ConstraintSpec, MonitorError};
use crate::simworld::{Arm, SceneSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolverError {
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error(transparent)]
    Constraint(#[from] MonitorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathWeights {
    pub track: f64,
    pub terminal: f64,
    pub smooth: f64,
    pub collision: f64,
    pub reach: f64,
    pub constraint: f64,
}

impl Default for PathWeights {
    fn default() -> Self {
        PathWeights {
            track: 1.0,
            terminal: 10.0,
            smooth: 1e-3,
            collision: 1e3,
            reach: 1e3,
            constraint: 1e3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubgoalWeights {
    pub collision: f64,
    pub reach: f64,
    pub regularization: f64,
    pub consistency: f64,
    pub bimanual: f64,
}

impl Default for SubgoalWeights {
    fn default() -> Self {
        SubgoalWeights {
            collision: 1e3,
            reach: 1e3,
            regularization: 1e-2,
            consistency: 1e-3,
            bimanual: 1e2,
        }
    }
}

/// Solver settings; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub restarts: usize,
    pub horizon: usize,
    pub execute: usize,
    /// Translation limit per control step (m).
    pub max_step: f64,
    /// Rotation limit per control step (rad).
    pub max_rotation: f64,
    pub margin: f64,
    pub voxel: f64,
    pub tol: f64,
    pub max_iterations: usize,
    /// Inter-wrist distance bounds for bimanual keyframes (m).
    pub bimanual_bounds: [f64; 2],
    pub path_weights: PathWeights,
    pub subgoal_weights: SubgoalWeights,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            restarts: 32,
            horizon: 20,
            execute: 5,
            max_step: 0.007,
            max_rotation: 0.035,
            margin: 0.01,
            voxel: 0.01,
            tol: 1e-3,
            max_iterations: 100,
            bimanual_bounds: [0.1, 1.0],
            path_weights: PathWeights::default(),
            subgoal_weights: SubgoalWeights::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.execute < 1 || self.horizon < self.execute {
            return Err("solver: need horizon >= execute >= 1".into());
        }
        let positive = [
            ("max_step", self.max_step),
            ("max_rotation", self.max_rotation),
            ("voxel", self.voxel),
            ("tol", self.tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("solver: `{name}` must be positive"));
            }
        }
        if !(self.margin >= 0.0) {
            return Err("solver: `margin` must be nonnegative".into());
        }
        if self.restarts < 1 || self.max_iterations < 1 {
            return Err("solver: `restarts` and `max_iterations` must be positive".into());
        }
        let w = self.path_weights;
        let s = self.subgoal_weights;
        let weights = [
            w.track,
            w.terminal,
            w.smooth,
            w.collision,
            w.reach,
            w.constraint,
            s.collision,
            s.reach,
            s.regularization,
            s.consistency,
            s.bimanual,
        ];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err("solver: weights must be nonnegative".into());
        }
        let [lo, hi] = self.bimanual_bounds;
        if !(0.0 <= lo && lo <= hi) {
            return Err("solver: bimanual bounds must satisfy 0 <= lo <= hi".into());
        }
        Ok(())
    }
}

/// Per-arm reachable boxes, velocity limits and home poses.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkspaceModel {
    pub boxes: BTreeMap<Arm, Aabb>,
    pub max_step: f64,
    pub max_rotation: f64,
    pub homes: BTreeMap<Arm, Pose>,
}

impl WorkspaceModel {
    pub fn from_scene(scene: &SceneSpec, cfg: &SolverConfig) -> WorkspaceModel {
        WorkspaceModel {
            boxes: scene.workspaces(),
            max_step: cfg.max_step,
            max_rotation: cfg.max_rotation,
            homes: scene.arms.iter().map(|a| (a.arm, a.home)).collect(),
        }
    }

    pub fn bounds(&self, arm: Arm) -> Result<&Aabb, SolverError> {
        self.boxes
            .get(&arm)
            .ok_or_else(|| SolverError::InvalidProblem(format!("no workspace for arm {arm}")))
    }
}

/// Distance from `p` to the arm's reachable box; zero inside.
pub fn reachability_residual(p: &Vec3, workspace: &Aabb) -> f64 {
    workspace.distance(p)
}

/// Everything a solver call needs besides the problem itself.
#[derive(Debug, Clone)]
pub struct SolverContext {
    pub config: SolverConfig,
    pub workspace: WorkspaceModel,
    pub field: std::sync::Arc<CollisionField>,
    /// Top heights of the static obstacles.
    pub obstacle_tops: Vec<f64>,
}

impl SolverContext {
    pub fn new(scene: &SceneSpec, config: SolverConfig) -> SolverContext {
        let field = CollisionField::build(scene, config.voxel, config.margin);
        SolverContext {
            workspace: WorkspaceModel::from_scene(scene, &config),
            config,
            field: std::sync::Arc::new(field),
            obstacle_tops: scene.obstacles.iter().map(|o| o.max.z).collect(),
        }
    }

    pub(crate) fn obstacle_top(&self) -> Option<f64> {
        self.obstacle_tops.iter().copied().reduce(f64::max)
    }
}

/// A moving arm whose gripper position is a decision variable. Features of the
/// held object translate with the gripper.
#[derive(Debug, Clone, PartialEq)]
pub struct Mover {
    pub arm: Arm,
    pub held: Option<String>,
    /// Gripper position at which `base` was extracted.
    pub anchor: Vec3,
}

/// Constraint evaluation with gripper-dependent features substituted.
#[derive(Debug, Clone)]
pub(crate) struct ConstraintEval<'a> {
    constraints: &'a [ConstraintSpec],
    base: FeatureVector,
    movers: Vec<Mover>,
}

impl<'a> ConstraintEval<'a> {
    pub(crate) fn new(
        constraints: &'a [ConstraintSpec],
        features: &FeatureVector,
        movers: Vec<Mover>,
    ) -> Self {
        let mut base = FeatureVector::default();
        for c in constraints {
            for k in c.required_keys() {
                let v = features.get(&k).cloned().unwrap_or(FeatureValue::Missing);
                base.insert(k, v);
            }
        }
        ConstraintEval {
            constraints,
            base,
            movers,
        }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    fn features_at(&self, positions: &[Vec3]) -> FeatureVector {
        let mut z = self.base.clone();
        for (m, p) in self.movers.iter().zip(positions) {
            let shift = p - m.anchor;
            for (key, value) in z.0.iter_mut() {
                let moves = match key {
                    FeatureKey::GripperOrigin(a) => {
                        if *a == m.arm {
                            *value = FeatureValue::vector(*p);
                        }
                        false
                    }
                    FeatureKey::Centroid(o)
                    | FeatureKey::TopPoint(o)
                    | FeatureKey::BottomPoint(o)
                    | FeatureKey::FractionalPoint(o, _) => m.held.as_deref() == Some(o.as_str()),
                    _ => false,
                };
                if moves {
                    if let Some(v) = value.as_vector() {
                        *value = FeatureValue::vector(v + shift);
                    }
                }
            }
        }
        z
    }

    /// Constraint values at the given mover positions.
    pub(crate) fn values(&self, positions: &[Vec3]) -> Result<Vec<f64>, SolverError> {
        let z = self.features_at(positions);
        self.constraints
            .iter()
            .map(|c| eval_detector(c, &z).map_err(SolverError::from))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::vec3;

    #[test]
    fn residual_examples() {
        let b = Aabb::new(vec3([0.0, 0.0, 0.0]), vec3([1.0, 1.0, 1.0]));
        assert_eq!(reachability_residual(&b.center(), &b), 0.0);
        assert!((reachability_residual(&vec3([1.1, 0.5, 0.5]), &b) - 0.1).abs() < 1e-12);
        let d = reachability_residual(&vec3([1.1, 1.2, -0.3]), &b);
        assert!((d - (0.01f64 + 0.04 + 0.09).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg: SolverConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, SolverConfig::default());
        assert_eq!((cfg.horizon, cfg.execute, cfg.restarts), (20, 5, 32));
        assert!(cfg.validate().is_ok());
        let bad = SolverConfig {
            execute: 30,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<SolverConfig>(r#"{"horizn": 3}"#).is_err());
    }
}
