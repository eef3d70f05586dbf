//! Atomic action library and its step-wise execution.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};

use super::disturbance::DisturbanceModel;
use super::scene::Arm;
use super::world::{ArmCommand, ObjectId, WorldState, GRASP_TOLERANCE};
use super::SimError;
use crate::features::{extract_features, FeatureKey, NoiseConfig, PerceptionOutput, RobotState};
use crate::geometry::{rotate_about, rotation_between, vec3, Pose, Quat, Vec3};
use crate::monitors::ConstraintSpec;
use crate::solvers::{solve_path, solve_subgoal, PathProblem, SolverContext, SubgoalProblem};

/// Gripper opening used before grasps and after releases (m).
pub const OPEN_WIDTH: f64 = 0.08;
/// Position and rotation tolerance for finishing a move.
const REACHED_TOL: f64 = 1e-3;
/// Clearance above the table when a fallen object is lifted back upright (m).
const UPRIGHT_CLEARANCE: f64 = 0.05;

const NOMINAL_STEP: f64 = 0.007;
const NOMINAL_ROTATION: f64 = 0.035;
const NOMINAL_MOVE_STEPS: usize = 40;

fn d_pre_grasp() -> f64 {
    0.08
}
/// Default interpolation samples for gripper and place motions.
pub const DEFAULT_SAMPLE_NUM: usize = 10;

fn d_samples() -> usize {
    DEFAULT_SAMPLE_NUM
}
fn d_axis() -> [f64; 3] {
    [1.0, 0.0, 0.0]
}
fn is_zero3(v: &[f64; 3]) -> bool {
    *v == [0.0; 3]
}
fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    #[default]
    World,
    Gripper,
}

impl Frame {
    fn is_world(&self) -> bool {
        *self == Frame::World
    }
}

/// Parameterized skill used to compose edge programs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum AtomicActionSpec {
    /// Runs one sub-action per arm synchronously; either may be absent.
    Drive {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        left_arm_action: Option<Box<AtomicActionSpec>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        right_arm_action: Option<Box<AtomicActionSpec>>,
    },
    Grasp {
        robot_name: Arm,
        obj_name: String,
        #[serde(default = "d_pre_grasp")]
        pre_grasp_dis: f64,
        #[serde(default, skip_serializing_if = "is_zero3")]
        grasp_offset: [f64; 3],
        #[serde(default = "d_samples")]
        sample_num: usize,
    },
    OpenGripper {
        robot_name: Arm,
        #[serde(default = "d_samples")]
        sample_num: usize,
    },
    CloseGripper {
        robot_name: Arm,
        #[serde(default = "d_samples")]
        sample_num: usize,
    },
    MoveToObj {
        robot_name: Arm,
        obj_name: String,
        #[serde(default, skip_serializing_if = "is_zero")]
        x_offset: f64,
        #[serde(default, skip_serializing_if = "is_zero")]
        y_offset: f64,
        #[serde(default, skip_serializing_if = "is_zero")]
        z_offset: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        yaw: Option<f64>,
    },
    MoveToTarget {
        robot_name: Arm,
        x: f64,
        y: f64,
        z: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        yaw: Option<f64>,
    },
    MoveByOffset {
        robot_name: Arm,
        #[serde(default, skip_serializing_if = "is_zero")]
        dx: f64,
        #[serde(default, skip_serializing_if = "is_zero")]
        dy: f64,
        #[serde(default, skip_serializing_if = "is_zero")]
        dz: f64,
        #[serde(default, skip_serializing_if = "Frame::is_world")]
        frame: Frame,
    },
    /// Rotates the end effector by `angle` (rad) about a world axis through the gripper origin.
    RotateEef {
        robot_name: Arm,
        angle: f64,
        #[serde(default = "d_axis")]
        axis: [f64; 3],
    },
    /// Moves the held object over `(x, y)` (offsets from `ref_obj` when given), lowers
    /// it until its bottom is `z_offset` above the table, then opens.
    Place {
        robot_name: Arm,
        x: f64,
        y: f64,
        #[serde(default, skip_serializing_if = "is_zero")]
        z_offset: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ref_obj: Option<String>,
        #[serde(default = "d_samples")]
        sample_num: usize,
    },
    Back {
        robot_name: Arm,
    },
    /// Moves to a keyframe synthesized from sub-goal constraints.
    ReachSubgoal {
        robot_name: Arm,
        constraints: Vec<ConstraintSpec>,
    },
}

impl AtomicActionSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AtomicActionSpec::Drive { .. } => "drive",
            AtomicActionSpec::Grasp { .. } => "grasp",
            AtomicActionSpec::OpenGripper { .. } => "open_gripper",
            AtomicActionSpec::CloseGripper { .. } => "close_gripper",
            AtomicActionSpec::MoveToObj { .. } => "move_to_obj",
            AtomicActionSpec::MoveToTarget { .. } => "move_to_target",
            AtomicActionSpec::MoveByOffset { .. } => "move_by_offset",
            AtomicActionSpec::RotateEef { .. } => "rotate_eef",
            AtomicActionSpec::Place { .. } => "place",
            AtomicActionSpec::Back { .. } => "back",
            AtomicActionSpec::ReachSubgoal { .. } => "reach_subgoal",
        }
    }

    /// The arm of a single-arm action.
    pub fn arm(&self) -> Option<Arm> {
        use AtomicActionSpec::*;
        match self {
            Drive { .. } => None,
            Grasp { robot_name, .. }
            | OpenGripper { robot_name, .. }
            | CloseGripper { robot_name, .. }
            | MoveToObj { robot_name, .. }
            | MoveToTarget { robot_name, .. }
            | MoveByOffset { robot_name, .. }
            | RotateEef { robot_name, .. }
            | Place { robot_name, .. }
            | Back { robot_name }
            | ReachSubgoal { robot_name, .. } => Some(*robot_name),
        }
    }

    /// Single-arm parts of this action.
    pub fn parts(&self) -> Vec<&AtomicActionSpec> {
        match self {
            AtomicActionSpec::Drive {
                left_arm_action,
                right_arm_action,
            } => left_arm_action
                .iter()
                .chain(right_arm_action.iter())
                .map(|b| b.as_ref())
                .collect(),
            other => vec![other],
        }
    }

    /// Object ids the action refers to.
    pub fn objects(&self) -> Vec<String> {
        let mut out = Vec::new();
        for part in self.parts() {
            match part {
                AtomicActionSpec::Grasp { obj_name, .. } | AtomicActionSpec::MoveToObj { obj_name, .. } => {
                    out.push(obj_name.clone())
                }
                AtomicActionSpec::Place { ref_obj: Some(r), .. } => out.push(r.clone()),
                AtomicActionSpec::ReachSubgoal { constraints, .. } => {
                    out.extend(constraints.iter().flat_map(|c| c.objects()))
                }
                _ => {}
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidAction(msg));
        match self {
            AtomicActionSpec::Drive {
                left_arm_action,
                right_arm_action,
            } => {
                if left_arm_action.is_none() && right_arm_action.is_none() {
                    return bad("drive needs at least one arm action".into());
                }
                for (expected, sub) in [(Arm::Left, left_arm_action), (Arm::Right, right_arm_action)] {
                    if let Some(sub) = sub {
                        if sub.arm() != Some(expected) {
                            return bad(format!("drive {expected}_arm_action must act on the {expected} arm"));
                        }
                        sub.validate()?;
                    }
                }
                Ok(())
            }
            AtomicActionSpec::Grasp {
                pre_grasp_dis,
                sample_num,
                ..
            } => {
                if !(*pre_grasp_dis >= 0.0) || *sample_num < 1 {
                    return bad("grasp needs pre_grasp_dis >= 0 and sample_num >= 1".into());
                }
                Ok(())
            }
            AtomicActionSpec::OpenGripper { sample_num, .. }
            | AtomicActionSpec::CloseGripper { sample_num, .. }
            | AtomicActionSpec::Place { sample_num, .. }
                if *sample_num < 1 =>
            {
                bad(format!("{} needs sample_num >= 1", self.name()))
            }
            AtomicActionSpec::RotateEef { axis, angle, .. } => {
                if vec3(*axis).norm() < 1e-9 || !angle.is_finite() {
                    return bad("rotate_eef needs a nonzero axis and a finite angle".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Static step estimate used as the default edge weight.
    pub fn estimate_steps(&self) -> usize {
        let steps = |d: f64, per: f64| (d.abs() / per).ceil() as usize;
        match self {
            AtomicActionSpec::Drive { .. } => self
                .parts()
                .iter()
                .map(|p| p.estimate_steps())
                .max()
                .unwrap_or(0),
            AtomicActionSpec::Grasp {
                pre_grasp_dis,
                sample_num,
                ..
            } => NOMINAL_MOVE_STEPS + steps(*pre_grasp_dis, NOMINAL_STEP) + 2 * sample_num,
            AtomicActionSpec::OpenGripper { sample_num, .. }
            | AtomicActionSpec::CloseGripper { sample_num, .. } => *sample_num,
            AtomicActionSpec::MoveByOffset { dx, dy, dz, .. } => {
                steps(vec3([*dx, *dy, *dz]).norm(), NOMINAL_STEP)
            }
            AtomicActionSpec::RotateEef { angle, .. } => steps(*angle, NOMINAL_ROTATION),
            AtomicActionSpec::Place { sample_num, .. } => 2 * NOMINAL_MOVE_STEPS + sample_num,
            AtomicActionSpec::MoveToObj { .. }
            | AtomicActionSpec::MoveToTarget { .. }
            | AtomicActionSpec::Back { .. }
            | AtomicActionSpec::ReachSubgoal { .. } => NOMINAL_MOVE_STEPS,
        }
    }
}

pub fn estimate_program_steps(program: &[AtomicActionSpec]) -> usize {
    program.iter().map(AtomicActionSpec::estimate_steps).sum()
}

/// Per-episode perception state: noise model, its generator and a per-step cache.
#[derive(Debug, Clone)]
pub struct Senses {
    pub noise: NoiseConfig,
    rng: ChaCha8Rng,
    /// Generator for randomized solver restarts.
    pub solver_rng: ChaCha8Rng,
    cache: Option<((u64, usize), PerceptionOutput)>,
}

impl Senses {
    pub fn new(noise: NoiseConfig, perception_rng: ChaCha8Rng, solver_rng: ChaCha8Rng) -> Senses {
        Senses {
            noise,
            rng: perception_rng,
            solver_rng,
            cache: None,
        }
    }

    /// Perception of the current world, sampled once per world change.
    pub fn perceive(&mut self, world: &WorldState) -> &PerceptionOutput {
        let key = (world.step, world.events.len());
        if self.cache.as_ref().is_none_or(|(k, _)| *k != key) {
            let x = crate::features::perceive(world, &self.noise, &mut self.rng);
            self.cache = Some((key, x));
        }
        &self.cache.as_ref().expect("cache filled").1
    }
}

/// Solver access and the active edge's path constraints.
#[derive(Debug, Clone, Copy)]
pub struct MotionCtx<'a> {
    pub solver: &'a SolverContext,
    pub path_constraints: &'a [ConstraintSpec],
}

impl MotionCtx<'_> {
    fn constraints_for(&self, arm: Arm) -> Vec<ConstraintSpec> {
        self.path_constraints
            .iter()
            .filter(|c| {
                c.required_keys().iter().any(|k| {
                    matches!(k, FeatureKey::GripperOrigin(a) | FeatureKey::GripperWidth(a) | FeatureKey::GripperClosed(a) if *a == arm)
                })
            })
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Target {
    Fixed(Pose),
    /// Perceived centroid plus offset.
    Object {
        object: ObjectId,
        offset: Vec3,
        yaw: Option<f64>,
    },
    /// True grasp point `index` of the object plus offset, raised by `lift`.
    GraspPoint {
        object: ObjectId,
        index: usize,
        offset: Vec3,
        lift: f64,
        yaw: f64,
    },
    /// Carry the held object over `xy` at the current height.
    PlaceOver {
        object: Option<ObjectId>,
        xy: [f64; 2],
        reference: Option<ObjectId>,
        z: f64,
    },
    /// Lower the held object so its bottom is `z_offset` above the table.
    PlaceDown {
        object: ObjectId,
        xy: [f64; 2],
        z_offset: f64,
    },
}

#[derive(Debug, Clone)]
struct MoveState {
    goal: Pose,
    plan: Vec<Pose>,
    idx: usize,
    since_replan: usize,
    steps: usize,
    limit: usize,
}

#[derive(Debug, Clone)]
enum Phase {
    Move {
        target: Target,
        state: Option<MoveState>,
    },
    /// Gripper width interpolation over `steps` control steps.
    Width {
        close: bool,
        steps: usize,
        done: usize,
        start: f64,
        goal: f64,
        candidate: Option<ObjectId>,
    },
    Rotate {
        axis: Vec3,
        angle: f64,
        steps: usize,
        done: usize,
        start: Option<Pose>,
    },
    /// Lift a grasped fallen object and turn it upright.
    Upright { object: ObjectId },
    /// Synthesize a keyframe, then move to it.
    Keyframe { constraints: Vec<ConstraintSpec> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Effect {
    None,
    Release,
    Attach,
    Opened,
}

enum PhaseTick {
    Command(ArmCommand, Effect),
    Done,
    Replace(Phase),
}

fn reached(a: &Pose, b: &Pose) -> bool {
    a.translation_to(b) <= REACHED_TOL && a.rotation_to(b) <= REACHED_TOL
}

/// Yaw that closes the fingers across the narrow horizontal extent of a cloud.
fn grasp_yaw(points: &[Vec3]) -> f64 {
    if points.len() < 3 {
        return 0.0;
    }
    let n = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |(x, y), p| (x + p.x / n, y + p.y / n));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p.x - mx, p.y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let tr = sxx + syy;
    let disc = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
    let (l1, l2) = ((tr + disc) / 2.0, (tr - disc) / 2.0);
    if l1 <= 1e-12 || (l1 - l2) < 0.2 * l1 {
        return 0.0;
    }
    let major = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let mut minor = major + std::f64::consts::FRAC_PI_2;
    while minor > std::f64::consts::FRAC_PI_2 {
        minor -= std::f64::consts::PI;
    }
    while minor <= -std::f64::consts::FRAC_PI_2 {
        minor += std::f64::consts::PI;
    }
    minor
}

/// Drives one arm through the phases of a single-arm action.
#[derive(Debug, Clone)]
struct Runner {
    arm: Arm,
    phases: VecDeque<Phase>,
    effect: Effect,
    /// Control steps during which the arm is expected to keep holding an object.
    held_estimate: u64,
}

impl Runner {
    fn new(spec: &AtomicActionSpec, world: &WorldState, senses: &mut Senses, solver: &SolverContext) -> Result<Runner, SimError> {
        let arm = spec.arm().ok_or_else(|| SimError::InvalidAction("nested drive".into()))?;
        let gripper = world.gripper(arm)?.clone();
        for id in spec.objects() {
            world.object(&id)?;
        }
        let width_phase = |close: bool, steps: usize| Phase::Width {
            close,
            steps,
            done: 0,
            start: 0.0,
            goal: 0.0,
            candidate: None,
        };
        let mv = |target: Target| Phase::Move { target, state: None };
        let mut phases = VecDeque::new();
        match spec {
            AtomicActionSpec::Drive { .. } => unreachable!("handled by parts()"),
            AtomicActionSpec::Grasp {
                obj_name,
                pre_grasp_dis,
                grasp_offset,
                sample_num,
                ..
            } => {
                if world.held_by(arm) != Some(obj_name.as_str()) {
                    if gripper.closed || gripper.width < OPEN_WIDTH - 1e-9 {
                        phases.push_back(width_phase(false, *sample_num));
                    }
                    let obj = world.object(obj_name)?;
                    let other = world.grippers.values().find(|g| g.arm != arm).map(|g| g.pose.position);
                    let points = obj.world_grasp_points();
                    let index = match other {
                        Some(o) => (0..points.len())
                            .max_by(|a, b| (points[*a] - o).norm().total_cmp(&(points[*b] - o).norm()).then(b.cmp(a)))
                            .unwrap_or(0),
                        None => 0,
                    };
                    let cloud: Vec<Vec3> = senses
                        .perceive(world)
                        .cloud(obj_name)
                        .map(|c| c.points.clone())
                        .unwrap_or_default();
                    let yaw = grasp_yaw(&cloud);
                    let lying = obj.is_lying();
                    let offset = vec3(*grasp_offset);
                    for lift in [*pre_grasp_dis, 0.0] {
                        phases.push_back(mv(Target::GraspPoint {
                            object: obj_name.clone(),
                            index,
                            offset,
                            lift,
                            yaw,
                        }));
                    }
                    phases.push_back(width_phase(true, *sample_num));
                    if lying {
                        phases.push_back(Phase::Upright {
                            object: obj_name.clone(),
                        });
                    }
                }
            }
            AtomicActionSpec::OpenGripper { sample_num, .. } => phases.push_back(width_phase(false, *sample_num)),
            AtomicActionSpec::CloseGripper { sample_num, .. } => phases.push_back(width_phase(true, *sample_num)),
            AtomicActionSpec::MoveToObj {
                obj_name,
                x_offset,
                y_offset,
                z_offset,
                yaw,
                ..
            } => phases.push_back(mv(Target::Object {
                object: obj_name.clone(),
                offset: Vec3::new(*x_offset, *y_offset, *z_offset),
                yaw: *yaw,
            })),
            AtomicActionSpec::MoveToTarget { x, y, z, yaw, .. } => {
                let p = Vec3::new(*x, *y, *z);
                let pose = match yaw {
                    Some(yaw) => Pose::top_down(p, *yaw),
                    None => Pose::new(p, gripper.pose.orientation),
                };
                phases.push_back(mv(Target::Fixed(pose)));
            }
            AtomicActionSpec::MoveByOffset { dx, dy, dz, frame, .. } => {
                let d = Vec3::new(*dx, *dy, *dz);
                let d = match frame {
                    Frame::World => d,
                    Frame::Gripper => gripper.pose.transform_vector(&d),
                };
                let mut goal = gripper.pose;
                goal.position += d;
                phases.push_back(mv(Target::Fixed(goal)));
            }
            AtomicActionSpec::RotateEef { angle, axis, .. } => {
                let steps = ((angle.abs() / solver.workspace.max_rotation).ceil() as usize).max(1);
                phases.push_back(Phase::Rotate {
                    axis: vec3(*axis).normalize(),
                    angle: *angle,
                    steps,
                    done: 0,
                    start: None,
                });
            }
            AtomicActionSpec::Place {
                x,
                y,
                z_offset,
                ref_obj,
                sample_num,
                ..
            } => {
                let held = world.held_by(arm).map(str::to_string);
                phases.push_back(mv(Target::PlaceOver {
                    object: held.clone(),
                    xy: [*x, *y],
                    reference: ref_obj.clone(),
                    z: gripper.pose.position.z,
                }));
                if let Some(object) = held {
                    phases.push_back(mv(Target::PlaceDown {
                        object,
                        xy: [0.0; 2],
                        z_offset: *z_offset,
                    }));
                }
                phases.push_back(width_phase(false, *sample_num));
            }
            AtomicActionSpec::Back { .. } => phases.push_back(mv(Target::Fixed(gripper.home))),
            AtomicActionSpec::ReachSubgoal { constraints, .. } => phases.push_back(Phase::Keyframe {
                constraints: constraints.clone(),
            }),
        }
        let mut runner = Runner {
            arm,
            phases,
            effect: Effect::None,
            held_estimate: 0,
        };
        if world.held_by(arm).is_some() && !matches!(spec, AtomicActionSpec::OpenGripper { .. }) {
            runner.held_estimate = runner.estimate_held_steps(world, solver);
        }
        Ok(runner)
    }

    /// Ground-truth step estimate of the phases before the first release.
    fn estimate_held_steps(&self, world: &WorldState, solver: &SolverContext) -> u64 {
        let Ok(g) = world.gripper(self.arm) else {
            return 0;
        };
        let v = solver.workspace.max_step;
        let mut pos = g.pose.position;
        let mut total = 0u64;
        for phase in &self.phases {
            match phase {
                Phase::Move { target, .. } => {
                    let goal = match target {
                        Target::Fixed(p) => p.position,
                        Target::Object { object, offset, .. } => {
                            world.objects.get(object).map_or(pos, |o| o.pose.position + offset)
                        }
                        Target::GraspPoint { .. } => pos,
                        Target::PlaceOver { xy, reference, .. } => {
                            let base = reference
                                .as_ref()
                                .and_then(|r| world.objects.get(r))
                                .map_or(Vec3::zeros(), |o| o.pose.position);
                            Vec3::new(base.x + xy[0], base.y + xy[1], pos.z)
                        }
                        Target::PlaceDown { object, z_offset, .. } => {
                            let drop = world
                                .objects
                                .get(object)
                                .map_or(0.0, |o| o.min_z() - world.table_height - z_offset);
                            Vec3::new(pos.x, pos.y, pos.z - drop)
                        }
                    };
                    total += ((goal - pos).norm() / v).ceil() as u64;
                    pos = goal;
                }
                Phase::Rotate { steps, .. } => total += *steps as u64,
                Phase::Width { close: false, .. } => break,
                Phase::Width { steps, .. } => total += *steps as u64,
                Phase::Upright { .. } | Phase::Keyframe { .. } => total += NOMINAL_MOVE_STEPS as u64,
            }
        }
        total
    }

    fn resolve(&self, target: &Target, world: &WorldState, senses: &mut Senses) -> Result<Pose, SimError> {
        let g = world.gripper(self.arm)?;
        let current = g.pose;
        let pose = match target {
            Target::Fixed(p) => *p,
            Target::Object { object, offset, yaw } => {
                let c = senses
                    .perceive(world)
                    .centroid(object)
                    .unwrap_or(world.object(object)?.pose.position);
                let p = c + offset;
                match yaw {
                    Some(y) => Pose::top_down(p, *y),
                    None => Pose::new(p, current.orientation),
                }
            }
            Target::GraspPoint {
                object,
                index,
                offset,
                lift,
                yaw,
            } => {
                let points = world.object(object)?.world_grasp_points();
                let p = points.get(*index).copied().unwrap_or(points[0]) + offset + Vec3::new(0.0, 0.0, *lift);
                Pose::top_down(p, *yaw)
            }
            Target::PlaceOver {
                object,
                xy,
                reference,
                z,
            } => {
                let x = senses.perceive(world);
                let base = match reference {
                    Some(r) => x.centroid(r).unwrap_or(world.object(r)?.pose.position),
                    None => Vec3::zeros(),
                };
                let target = Vec3::new(base.x + xy[0], base.y + xy[1], *z);
                let carry = match object.as_ref().and_then(|o| x.centroid(o)) {
                    Some(c) if world.held_by(self.arm) == object.as_deref() => {
                        Vec3::new(current.position.x - c.x, current.position.y - c.y, 0.0)
                    }
                    _ => Vec3::zeros(),
                };
                Pose::new(target + carry, current.orientation)
            }
            Target::PlaceDown { object, xy, z_offset } => {
                let bottom = senses
                    .perceive(world)
                    .cloud(object)
                    .and_then(|c| c.points.iter().map(|p| p.z).reduce(f64::min));
                let z = match bottom {
                    Some(b) if world.held_by(self.arm) == Some(object.as_str()) => {
                        current.position.z - (b - world.table_height - z_offset)
                    }
                    _ => current.position.z,
                };
                Pose::new(Vec3::new(xy[0], xy[1], z), current.orientation)
            }
        };
        let bounds = g.workspace;
        Ok(Pose::new(bounds.clamp(&pose.position), pose.orientation))
    }

    fn tick_move(
        &self,
        target: &mut Target,
        state: &mut Option<MoveState>,
        world: &WorldState,
        senses: &mut Senses,
        ctx: &MotionCtx,
    ) -> Result<PhaseTick, SimError> {
        let g = world.gripper(self.arm)?;
        let current = g.pose;
        let width = g.width;
        if let Target::PlaceDown { xy, .. } = target {
            if state.is_none() {
                *xy = [current.position.x, current.position.y];
            }
        }
        if let Some(s) = state.as_ref() {
            if reached(&current, &s.goal) {
                return Ok(PhaseTick::Done);
            }
        }
        let cfg = &ctx.solver.config;
        let needs_plan = state
            .as_ref()
            .is_none_or(|s| s.since_replan >= cfg.execute || s.idx + 1 >= s.plan.len());
        if needs_plan {
            let goal = self.resolve(target, world, senses)?;
            if reached(&current, &goal) {
                return Ok(PhaseTick::Done);
            }
            let constraints = ctx.constraints_for(self.arm);
            let keys: Vec<FeatureKey> = constraints.iter().flat_map(|c| c.required_keys()).collect();
            let features = if keys.is_empty() {
                Default::default()
            } else {
                extract_features(senses.perceive(world), &RobotState::from_world(world), &keys)
            };
            let problem = PathProblem {
                arm: self.arm,
                start: current,
                goal,
                constraints: &constraints,
                features: &features,
                held: world.held_by(self.arm).map(str::to_string),
            };
            let plan = solve_path(ctx.solver, &problem)
                .map_err(|e| SimError::UnreachableTarget(format!("{} arm: {e}", self.arm)))?;
            let (steps, limit) = match state.as_ref() {
                Some(s) => (s.steps, s.limit),
                None => {
                    let n = (current.translation_to(&goal) / ctx.solver.workspace.max_step).ceil()
                        + (current.rotation_to(&goal) / ctx.solver.workspace.max_rotation).ceil();
                    (0, 4 * (n as usize + cfg.horizon) + 40)
                }
            };
            *state = Some(MoveState {
                goal,
                plan,
                idx: 0,
                since_replan: 0,
                steps,
                limit,
            });
        }
        let s = state.as_mut().expect("planned above");
        s.steps += 1;
        if s.steps > s.limit {
            return Err(SimError::UnreachableTarget(format!(
                "{} arm made no progress toward {:?}",
                self.arm,
                s.goal.position.as_slice()
            )));
        }
        s.idx += 1;
        s.since_replan += 1;
        Ok(PhaseTick::Command(
            ArmCommand {
                arm: self.arm,
                pose: s.plan[s.idx],
                width,
            },
            Effect::None,
        ))
    }

    fn tick_phase(
        &self,
        phase: &mut Phase,
        world: &WorldState,
        senses: &mut Senses,
        ctx: &MotionCtx,
    ) -> Result<PhaseTick, SimError> {
        let g = world.gripper(self.arm)?;
        match phase {
            Phase::Move { target, state } => self.tick_move(target, state, world, senses, ctx),
            Phase::Width {
                close,
                steps,
                done,
                start,
                goal,
                candidate,
            } => {
                if *done == 0 {
                    *start = g.width;
                    if *close {
                        *candidate = world.grasp_candidate(self.arm);
                        *goal = candidate
                            .as_ref()
                            .and_then(|c| world.objects.get(c))
                            .map_or(0.0, |o| o.grasp_width);
                    } else {
                        *goal = OPEN_WIDTH;
                    }
                }
                if *done >= *steps {
                    return Ok(PhaseTick::Done);
                }
                *done += 1;
                let t = *done as f64 / *steps as f64;
                let effect = match (*close, *done == 1, *done == *steps) {
                    (false, true, _) if g.held.is_some() => Effect::Release,
                    (false, _, true) => Effect::Opened,
                    (true, _, true) => Effect::Attach,
                    _ => Effect::None,
                };
                Ok(PhaseTick::Command(
                    ArmCommand {
                        arm: self.arm,
                        pose: g.pose,
                        width: *start + (*goal - *start) * t,
                    },
                    effect,
                ))
            }
            Phase::Rotate {
                axis,
                angle,
                steps,
                done,
                start,
            } => {
                let s = *start.get_or_insert(g.pose);
                if *done >= *steps {
                    return Ok(PhaseTick::Done);
                }
                *done += 1;
                let r = Quat::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), *angle * *done as f64 / *steps as f64);
                Ok(PhaseTick::Command(
                    ArmCommand {
                        arm: self.arm,
                        pose: rotate_about(&s, &s.position, &r),
                        width: g.width,
                    },
                    Effect::None,
                ))
            }
            Phase::Upright { object } => {
                if world.held_by(self.arm) != Some(object.as_str()) {
                    return Ok(PhaseTick::Done);
                }
                let obj = world.object(object)?;
                let r = rotation_between(&obj.world_upright(), &Vec3::z());
                let z = world.table_height + obj.shape.half_height() + UPRIGHT_CLEARANCE;
                let position = Vec3::new(g.pose.position.x, g.pose.position.y, z.max(g.pose.position.z));
                Ok(PhaseTick::Replace(Phase::Move {
                    target: Target::Fixed(Pose::new(position, r * g.pose.orientation)),
                    state: None,
                }))
            }
            Phase::Keyframe { constraints } => {
                let keys: Vec<FeatureKey> = constraints.iter().flat_map(|c| c.required_keys()).collect();
                let features = extract_features(senses.perceive(world), &RobotState::from_world(world), &keys);
                let problem = SubgoalProblem {
                    arms: vec![self.arm],
                    constraints,
                    features: &features,
                    current: BTreeMap::from([(self.arm, g.pose)]),
                    held: world
                        .held_by(self.arm)
                        .map(|h| BTreeMap::from([(self.arm, h.to_string())]))
                        .unwrap_or_default(),
                    reference: BTreeMap::new(),
                    previous: None,
                };
                let keyframe = solve_subgoal(ctx.solver, &problem, &mut senses.solver_rng)
                    .map_err(|e| SimError::UnreachableTarget(format!("{} arm keyframe: {e}", self.arm)))?;
                Ok(PhaseTick::Replace(Phase::Move {
                    target: Target::Fixed(keyframe[&self.arm]),
                    state: None,
                }))
            }
        }
    }

    fn plan_tick(&mut self, world: &WorldState, senses: &mut Senses, ctx: &MotionCtx) -> Result<Option<ArmCommand>, SimError> {
        self.effect = Effect::None;
        loop {
            let Some(mut phase) = self.phases.pop_front() else {
                return Ok(None);
            };
            match self.tick_phase(&mut phase, world, senses, ctx)? {
                PhaseTick::Command(cmd, effect) => {
                    self.phases.push_front(phase);
                    self.effect = effect;
                    return Ok(Some(cmd));
                }
                PhaseTick::Done => {}
                PhaseTick::Replace(next) => self.phases.push_front(next),
            }
        }
    }

    fn post_tick(&mut self, world: &mut WorldState) -> Result<(), SimError> {
        match self.effect {
            Effect::None => {}
            Effect::Release => {
                world.release(self.arm)?;
            }
            Effect::Opened => world.set_closed(self.arm, false)?,
            Effect::Attach => {
                let candidate = match self.phases.front() {
                    Some(Phase::Width { candidate, .. }) => candidate.clone(),
                    _ => None,
                };
                let origin = world.gripper(self.arm)?.pose.position;
                let still_there = candidate.filter(|c| {
                    world.objects.get(c).is_some_and(|o| {
                        o.world_grasp_points()
                            .iter()
                            .any(|p| (p - origin).norm() <= GRASP_TOLERANCE)
                    })
                });
                match still_there {
                    Some(c) => world.attach(self.arm, &c)?,
                    None => world.set_closed(self.arm, true)?,
                }
            }
        }
        self.effect = Effect::None;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickOutcome {
    /// One control step was applied to the world.
    Stepped,
    /// The action had nothing left to do; no step was taken.
    Finished,
}

/// One atomic action in progress, including its Bernoulli drop draws.
#[derive(Debug, Clone)]
pub struct AtomicExecution {
    /// Episode-wide index of this action.
    pub index: usize,
    pub name: &'static str,
    runners: Vec<Runner>,
    ticks: u64,
    pending_drops: Vec<(Arm, u64)>,
    /// Arms that were eligible for a drop draw.
    pub eligible: Vec<Arm>,
}

impl AtomicExecution {
    /// Starts an action. Under the Bernoulli model every participating arm that holds
    /// an object and is expected to keep it for at least one step draws a drop.
    pub fn start<R: Rng + ?Sized>(
        spec: &AtomicActionSpec,
        index: usize,
        world: &WorldState,
        senses: &mut Senses,
        ctx: &MotionCtx,
        disturbance: &DisturbanceModel,
        rng: &mut R,
    ) -> Result<AtomicExecution, SimError> {
        spec.validate()?;
        let runners = spec
            .parts()
            .into_iter()
            .map(|p| Runner::new(p, world, senses, ctx.solver))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::with_runners(runners, spec.name(), index, disturbance, rng))
    }

    /// A synthetic `move_to_target` driving each listed arm to an exact pose.
    pub fn to_poses<R: Rng + ?Sized>(
        targets: &BTreeMap<Arm, Pose>,
        index: usize,
        world: &WorldState,
        ctx: &MotionCtx,
        disturbance: &DisturbanceModel,
        rng: &mut R,
    ) -> Result<AtomicExecution, SimError> {
        let mut runners = Vec::new();
        for (arm, pose) in targets {
            world.gripper(*arm)?;
            let mut r = Runner {
                arm: *arm,
                phases: VecDeque::from([Phase::Move {
                    target: Target::Fixed(*pose),
                    state: None,
                }]),
                effect: Effect::None,
                held_estimate: 0,
            };
            if world.held_by(*arm).is_some() {
                r.held_estimate = r.estimate_held_steps(world, ctx.solver);
            }
            runners.push(r);
        }
        Ok(Self::with_runners(runners, "move_to_target", index, disturbance, rng))
    }

    fn with_runners<R: Rng + ?Sized>(
        runners: Vec<Runner>,
        name: &'static str,
        index: usize,
        disturbance: &DisturbanceModel,
        rng: &mut R,
    ) -> AtomicExecution {
        let p = disturbance.drop_probability();
        let mut pending_drops = Vec::new();
        let mut eligible = Vec::new();
        for r in &runners {
            if r.held_estimate == 0 {
                continue;
            }
            eligible.push(r.arm);
            if p > 0.0 && rng.random::<f64>() < p {
                pending_drops.push((r.arm, rng.random_range(0..r.held_estimate)));
            }
        }
        AtomicExecution {
            index,
            name,
            runners,
            ticks: 0,
            pending_drops,
            eligible,
        }
    }

    /// Control steps applied so far.
    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    fn fire_drops<R: Rng + ?Sized>(&mut self, world: &mut WorldState, rng: &mut R, due: impl Fn(Arm, u64) -> bool) {
        let (fire, keep): (Vec<_>, Vec<_>) = self.pending_drops.iter().partition(|(a, s)| due(*a, *s));
        self.pending_drops = keep;
        for (arm, _) in fire {
            if let Some(obj) = world.held_by(arm).map(str::to_string) {
                world.drop_object(&obj, rng);
            }
        }
    }

    /// Plans and applies one control step for every participating arm.
    pub fn tick<R: Rng + ?Sized>(
        &mut self,
        world: &mut WorldState,
        senses: &mut Senses,
        ctx: &MotionCtx,
        rng: &mut R,
    ) -> Result<TickOutcome, SimError> {
        let now = self.ticks;
        self.fire_drops(world, rng, |_, s| s <= now);
        let mut commands = Vec::with_capacity(self.runners.len());
        let mut releasing = Vec::new();
        for r in self.runners.iter_mut() {
            if let Some(c) = r.plan_tick(world, senses, ctx)? {
                if r.effect == Effect::Release {
                    releasing.push(r.arm);
                }
                commands.push(c);
            }
        }
        if commands.is_empty() {
            self.fire_drops(world, rng, |_, _| true);
            return Ok(TickOutcome::Finished);
        }
        if !releasing.is_empty() {
            self.fire_drops(world, rng, |a, _| releasing.contains(&a));
        }
        world.apply(&commands)?;
        for r in self.runners.iter_mut() {
            r.post_tick(world)?;
        }
        self.ticks += 1;
        Ok(TickOutcome::Stepped)
    }

    /// Runs the action to completion; returns the number of control steps taken.
    pub fn run<R: Rng + ?Sized>(
        &mut self,
        world: &mut WorldState,
        senses: &mut Senses,
        ctx: &MotionCtx,
        rng: &mut R,
    ) -> Result<u64, SimError> {
        while self.tick(world, senses, ctx, rng)? == TickOutcome::Stepped {}
        Ok(self.ticks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Aabb;
    use crate::simworld::scene::{ArmSpec, ObjectSpec, SceneSpec, Shape};
    use crate::solvers::SolverConfig;
    use rand::SeedableRng;

    fn scene() -> SceneSpec {
        SceneSpec {
            table_height: 0.0,
            objects: vec![
                ObjectSpec {
                    id: "bottle".into(),
                    shape: Shape::Cylinder {
                        radius: 0.03,
                        height: 0.2,
                    },
                    position: [0.45, -0.1, 0.1],
                    yaw: 0.0,
                    upright_axis: [0.0, 0.0, 1.0],
                    grasp_width: 0.06,
                    grasp_points: vec![],
                    receptacle: false,
                    stackable: false,
                },
                ObjectSpec {
                    id: "cup".into(),
                    shape: Shape::Cylinder {
                        radius: 0.035,
                        height: 0.12,
                    },
                    position: [0.5, 0.1, 0.06],
                    yaw: 0.0,
                    upright_axis: [0.0, 0.0, 1.0],
                    grasp_width: 0.06,
                    grasp_points: vec![],
                    receptacle: true,
                    stackable: false,
                },
            ],
            arms: vec![ArmSpec {
                arm: Arm::Right,
                home: Pose::top_down(Vec3::new(0.35, -0.2, 0.3), 0.0),
                workspace: Aabb::new(Vec3::new(0.1, -0.45, 0.015), Vec3::new(0.75, 0.45, 0.6)),
                initial_width: 0.08,
            }],
            obstacles: vec![],
        }
    }

    struct Rig {
        world: WorldState,
        senses: Senses,
        solver: SolverContext,
        rng: ChaCha8Rng,
        index: usize,
    }

    impl Rig {
        fn new() -> Rig {
            let s = scene();
            Rig {
                world: WorldState::from_scene(&s).unwrap(),
                senses: Senses::new(
                    NoiseConfig::default(),
                    ChaCha8Rng::seed_from_u64(1),
                    ChaCha8Rng::seed_from_u64(2),
                ),
                solver: SolverContext::new(&s, SolverConfig::default()),
                rng: ChaCha8Rng::seed_from_u64(3),
                index: 0,
            }
        }

        fn run(&mut self, spec: &AtomicActionSpec, model: &DisturbanceModel) -> Result<u64, SimError> {
            let ctx = MotionCtx {
                solver: &self.solver,
                path_constraints: &[],
            };
            let mut exec = AtomicExecution::start(spec, self.index, &self.world, &mut self.senses, &ctx, model, &mut self.rng)?;
            self.index += 1;
            exec.run(&mut self.world, &mut self.senses, &ctx, &mut self.rng)
        }
    }

    fn grasp_bottle() -> AtomicActionSpec {
        serde_json::from_str(r#"{"action":"grasp","robot_name":"right","obj_name":"bottle"}"#).unwrap()
    }

    #[test]
    fn grasp_then_lift_moves_bottle_exactly() {
        let mut rig = Rig::new();
        let none = DisturbanceModel::None;
        rig.run(&grasp_bottle(), &none).unwrap();
        assert_eq!(rig.world.held_by(Arm::Right), Some("bottle"));
        let before = rig.world.objects["bottle"].pose.position;
        let lift = AtomicActionSpec::MoveByOffset {
            robot_name: Arm::Right,
            dx: 0.0,
            dy: 0.0,
            dz: 0.1,
            frame: Frame::World,
        };
        let steps = rig.run(&lift, &none).unwrap();
        let max_step = SolverConfig::default().max_step;
        assert_eq!(steps, (0.1 / max_step).ceil() as u64);
        let after = rig.world.objects["bottle"].pose.position;
        assert!(((after - before) - Vec3::new(0.0, 0.0, 0.1)).norm() < 1e-3);
        assert_eq!(rig.world.disturbance_count(), 0);
    }

    #[test]
    fn repeated_grasp_is_a_no_op() {
        let mut rig = Rig::new();
        let none = DisturbanceModel::None;
        rig.run(&grasp_bottle(), &none).unwrap();
        assert_eq!(rig.run(&grasp_bottle(), &none).unwrap(), 0);
    }

    #[test]
    fn certain_drop_fires_once_per_held_action() {
        let mut rig = Rig::new();
        rig.run(&grasp_bottle(), &DisturbanceModel::None).unwrap();
        let lift = AtomicActionSpec::MoveByOffset {
            robot_name: Arm::Right,
            dx: 0.0,
            dy: 0.0,
            dz: 0.1,
            frame: Frame::World,
        };
        rig.run(&lift, &DisturbanceModel::Bernoulli { p: 1.0 }).unwrap();
        assert_eq!(rig.world.held_by(Arm::Right), None);
        assert_eq!(rig.world.disturbance_count(), 1);
        let bottle = &rig.world.objects["bottle"];
        assert!(bottle.is_lying());
        assert!((bottle.min_z() - 0.0).abs() < 1e-9);
    }

    #[test]
    fn fallen_bottle_is_regrasped_upright() {
        let mut rig = Rig::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rig.world
            .inject(
                &crate::simworld::Injection::Tilt {
                    object: "bottle".into(),
                    angle: std::f64::consts::FRAC_PI_2,
                    axis: [0.0, 1.0, 0.0],
                },
                &mut rng,
            )
            .unwrap();
        assert!(rig.world.objects["bottle"].is_lying());
        rig.run(&grasp_bottle(), &DisturbanceModel::None).unwrap();
        assert_eq!(rig.world.held_by(Arm::Right), Some("bottle"));
        assert!(rig.world.objects["bottle"].tilt() < 1e-2);
    }

    #[test]
    fn place_sets_bottle_down_upright() {
        let mut rig = Rig::new();
        let none = DisturbanceModel::None;
        rig.run(&grasp_bottle(), &none).unwrap();
        let place: AtomicActionSpec =
            serde_json::from_str(r#"{"action":"place","robot_name":"right","x":0.4,"y":-0.2}"#).unwrap();
        rig.run(&place, &none).unwrap();
        let b = &rig.world.objects["bottle"];
        assert_eq!(rig.world.held_by(Arm::Right), None);
        assert!(b.tilt() < 1e-6);
        assert!((b.pose.position.x - 0.4).abs() < 5e-3 && (b.pose.position.y + 0.2).abs() < 5e-3);
    }

    #[test]
    fn pour_event_over_cup() {
        let mut rig = Rig::new();
        let none = DisturbanceModel::None;
        let program: Vec<AtomicActionSpec> = serde_json::from_str(
            r#"[{"action":"grasp","robot_name":"right","obj_name":"bottle"},
                {"action":"move_by_offset","robot_name":"right","dz":0.1},
                {"action":"move_to_obj","robot_name":"right","obj_name":"cup","z_offset":0.2},
                {"action":"rotate_eef","robot_name":"right","angle":1.92},
                {"action":"rotate_eef","robot_name":"right","angle":-1.92}]"#,
        )
        .unwrap();
        for a in &program {
            rig.run(a, &none).unwrap();
        }
        assert!(rig.world.has_event("poured"));
        assert!(rig.world.objects["bottle"].tilt() < 1e-6);
    }

    #[test]
    fn action_json_round_trip() {
        let text = r#"{"action":"drive","left_arm_action":{"action":"back","robot_name":"left"},"right_arm_action":{"action":"open_gripper","robot_name":"right","sample_num":5}}"#;
        let a: AtomicActionSpec = serde_json::from_str(text).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), text);
        assert!(a.validate().is_ok());
        let bad: AtomicActionSpec = serde_json::from_str(
            r#"{"action":"drive","left_arm_action":{"action":"back","robot_name":"right"}}"#,
        )
        .unwrap();
        assert!(bad.validate().is_err());
        assert!(serde_json::from_str::<AtomicActionSpec>(r#"{"action":"fly","robot_name":"right"}"#).is_err());
    }

    #[test]
    fn yaw_closes_across_narrow_side() {
        let pts: Vec<Vec3> = (0..50)
            .flat_map(|i| [-0.01, 0.01].map(|y| Vec3::new(-0.08 + 0.16 * i as f64 / 49.0, y, 0.0)))
            .collect();
        assert!((grasp_yaw(&pts).abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-6);
        let ring: Vec<Vec3> = (0..32)
            .map(|i| {
                let t = i as f64 / 32.0 * std::f64::consts::TAU;
                Vec3::new(t.cos(), t.sin(), 0.0) * 0.03
            })
            .collect();
        assert_eq!(grasp_yaw(&ring), 0.0);
    }
}
