//! Kinematic desk-scale world: rigid objects, grippers, atomic actions and disturbances.

mod actions;
mod disturbance;
mod scene;
mod world;

pub use actions::{
    estimate_program_steps, AtomicActionSpec, AtomicExecution, Frame, MotionCtx,
    Senses, TickOutcome, DEFAULT_SAMPLE_NUM, OPEN_WIDTH,
};
pub use disturbance::{DisturbanceModel, EventTime, ScheduledEvent};
pub use scene::{Arm, ArmSpec, ObjectSpec, SceneSpec, Shape};
pub use world::{
    ArmCommand, Gripper, Injection, ObjectId, RigidObject, WorldEvent, WorldEventKind, WorldState,
    DROP_JITTER, GRASP_TOLERANCE, LYING_THRESHOLD, MAX_OPENING, POUR_ANGLE, POUR_LATERAL,
};

use crate::features::{extract_features, FeatureVector, NoiseConfig, RobotState};
use crate::monitors::{subgoal_satisfied, ConstraintSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("unknown object `{0}`")]
    UnknownObject(String),
    #[error("unknown arm `{0}`")]
    UnknownArm(Arm),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("unreachable target: {0}")]
    UnreachableTarget(String),
}

/// Noiseless features of the true world state.
pub fn ground_truth_features<'a>(
    world: &WorldState,
    keys: impl IntoIterator<Item = &'a crate::features::FeatureKey>,
) -> FeatureVector {
    // noiseless perception never draws from the generator
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let x = crate::features::perceive(world, &NoiseConfig::noiseless(), &mut rng);
    extract_features(&x, &RobotState::from_world(world), keys)
}

/// True iff the terminal sub-goal constraints hold on ground truth. Unevaluable
/// constraints count as unmet.
pub fn check_success(world: &WorldState, terminal: &[ConstraintSpec], tol: f64) -> bool {
    let keys: Vec<_> = terminal.iter().flat_map(|c| c.required_keys()).collect();
    let z = ground_truth_features(world, &keys);
    subgoal_satisfied(terminal, &z, tol).unwrap_or(false)
}
