use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use super::scene::{Arm, SceneSpec, Shape};
use super::SimError;
use crate::geometry::{rotate_about, rotation_between, vec3, Aabb, Pose, Quat, Vec3};

/// Maximum finger opening (m).
pub const MAX_OPENING: f64 = 0.10;
/// Distance from the gripper origin to a grasp point within which closing attaches.
pub const GRASP_TOLERANCE: f64 = 0.02;
/// Objects tilted further than this from upright fall onto their side when released.
pub const LYING_THRESHOLD: f64 = FRAC_PI_4;
/// Tilt a held object must exceed above a receptacle to register a pour.
pub const POUR_ANGLE: f64 = 100.0 * PI / 180.0;
/// Lateral offset between a pouring object and the receptacle centroid.
pub const POUR_LATERAL: f64 = 0.06;
/// Half-width of the uniform lateral jitter applied to dropped objects.
pub const DROP_JITTER: f64 = 0.03;

pub type ObjectId = String;

#[derive(Debug, Clone, PartialEq)]
pub struct RigidObject {
    pub id: ObjectId,
    pub shape: Shape,
    /// Canonical body-frame surface points.
    pub points: Vec<Vec3>,
    pub pose: Pose,
    pub attached_to: Option<Arm>,
    /// Body-frame axis that points up when the object stands stably.
    pub upright_axis: Vec3,
    pub grasp_width: f64,
    pub grasp_points: Vec<Vec3>,
    pub receptacle: bool,
    pub stackable: bool,
    pub resting_on: Option<ObjectId>,
    /// Object pose expressed in the holding gripper's frame while attached.
    pub grasp_transform: Option<Pose>,
}

impl RigidObject {
    pub fn world_points(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.points.iter().map(move |p| self.pose.transform_point(p))
    }

    pub fn world_upright(&self) -> Vec3 {
        self.pose.transform_vector(&self.upright_axis)
    }

    /// Angle between the world up direction and the object's upright axis.
    pub fn tilt(&self) -> f64 {
        self.world_upright().z.clamp(-1.0, 1.0).acos()
    }

    pub fn is_lying(&self) -> bool {
        self.tilt() > LYING_THRESHOLD
    }

    pub fn is_tall(&self) -> bool {
        2.0 * self.shape.half_height() > self.shape.max_horizontal_extent()
    }

    pub fn min_z(&self) -> f64 {
        self.world_points().map(|p| p.z).fold(f64::INFINITY, f64::min)
    }

    pub fn max_z(&self) -> f64 {
        self.world_points().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn footprint(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for p in self.world_points() {
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        (lo, hi)
    }

    pub fn world_grasp_points(&self) -> Vec<Vec3> {
        if self.grasp_points.is_empty() {
            vec![self.pose.position]
        } else {
            self.grasp_points
                .iter()
                .map(|p| self.pose.transform_point(p))
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gripper {
    pub arm: Arm,
    pub pose: Pose,
    pub width: f64,
    pub closed: bool,
    pub held: Option<ObjectId>,
    pub home: Pose,
    pub workspace: Aabb,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum WorldEventKind {
    Grasped { arm: Arm, object: ObjectId },
    Released { arm: Arm, object: ObjectId },
    Handover { object: ObjectId, from: Arm, to: Arm },
    Poured { object: ObjectId, into: ObjectId },
    Dropped { object: ObjectId },
    Shifted { object: ObjectId, delta: [f64; 3] },
    Tilted { object: ObjectId, angle: f64, axis: [f64; 3] },
    Warning { message: String },
}

impl WorldEventKind {
    pub fn is_disturbance(&self) -> bool {
        matches!(
            self,
            WorldEventKind::Dropped { .. }
                | WorldEventKind::Shifted { .. }
                | WorldEventKind::Tilted { .. }
        )
    }

    /// Name used by `flag(..)` feature keys.
    pub fn flag_name(&self) -> &'static str {
        match self {
            WorldEventKind::Grasped { .. } => "grasped",
            WorldEventKind::Released { .. } => "released",
            WorldEventKind::Handover { .. } => "handover",
            WorldEventKind::Poured { .. } => "poured",
            WorldEventKind::Dropped { .. } => "dropped",
            WorldEventKind::Shifted { .. } => "shifted",
            WorldEventKind::Tilted { .. } => "tilted",
            WorldEventKind::Warning { .. } => "warning",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldEvent {
    pub step: u64,
    #[serde(flatten)]
    pub kind: WorldEventKind,
}

/// Pose/width command for one arm at one control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmCommand {
    pub arm: Arm,
    pub pose: Pose,
    pub width: f64,
}

/// Disturbances that can be injected into a running world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Injection {
    /// Detach a held object. With no object named, the first held object is dropped.
    Drop {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        object: Option<ObjectId>,
    },
    Shift { object: ObjectId, delta: [f64; 3] },
    Tilt {
        object: ObjectId,
        angle: f64,
        axis: [f64; 3],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub objects: BTreeMap<ObjectId, RigidObject>,
    pub grippers: BTreeMap<Arm, Gripper>,
    pub table_height: f64,
    pub step: u64,
    pub events: Vec<WorldEvent>,
}

impl WorldState {
    pub fn from_scene(scene: &SceneSpec) -> Result<WorldState, SimError> {
        let mut objects = BTreeMap::new();
        for spec in &scene.objects {
            if !spec.shape.is_valid() || spec.grasp_width <= 0.0 {
                return Err(SimError::InvalidScene(format!(
                    "object `{}` has non-positive dimensions",
                    spec.id
                )));
            }
            let up = vec3(spec.upright_axis);
            if (up.norm() - 1.0).abs() > 1e-6 {
                return Err(SimError::InvalidScene(format!(
                    "object `{}` upright_axis must be a unit vector",
                    spec.id
                )));
            }
            let yaw = Quat::from_axis_angle(&Vec3::z_axis(), spec.yaw);
            // Non-default upright axes rotate the canonical shape so that the
            // declared body axis is the one pointing up.
            let orientation = if (up - Vec3::z()).norm() > 1e-12 {
                yaw * rotation_between(&up, &Vec3::z())
            } else {
                yaw
            };
            let object = RigidObject {
                id: spec.id.clone(),
                shape: spec.shape.clone(),
                points: spec.shape.sample_surface(),
                pose: Pose::new(vec3(spec.position), orientation),
                attached_to: None,
                upright_axis: up,
                grasp_width: spec.grasp_width,
                grasp_points: spec.grasp_points.iter().map(|p| vec3(*p)).collect(),
                receptacle: spec.receptacle,
                stackable: spec.stackable,
                resting_on: None,
                grasp_transform: None,
            };
            if objects.insert(spec.id.clone(), object).is_some() {
                return Err(SimError::InvalidScene(format!(
                    "duplicate object id `{}`",
                    spec.id
                )));
            }
        }
        let mut grippers = BTreeMap::new();
        for arm in &scene.arms {
            if !arm.workspace.is_valid() {
                return Err(SimError::InvalidScene(format!(
                    "workspace of arm {} is empty",
                    arm.arm
                )));
            }
            grippers.insert(
                arm.arm,
                Gripper {
                    arm: arm.arm,
                    pose: arm.home,
                    width: arm.initial_width.clamp(0.0, MAX_OPENING),
                    closed: false,
                    held: None,
                    home: arm.home,
                    workspace: arm.workspace,
                },
            );
        }
        let mut world = WorldState {
            objects,
            grippers,
            table_height: scene.table_height,
            step: 0,
            events: Vec::new(),
        };
        world.settle();
        Ok(world)
    }

    pub fn object(&self, id: &str) -> Result<&RigidObject, SimError> {
        self.objects
            .get(id)
            .ok_or_else(|| SimError::UnknownObject(id.to_string()))
    }

    pub fn gripper(&self, arm: Arm) -> Result<&Gripper, SimError> {
        self.grippers.get(&arm).ok_or(SimError::UnknownArm(arm))
    }

    fn log(&mut self, kind: WorldEventKind) {
        self.events.push(WorldEvent {
            step: self.step,
            kind,
        });
    }

    pub fn has_event(&self, flag: &str) -> bool {
        self.events.iter().any(|e| e.kind.flag_name() == flag)
    }

    pub fn disturbance_count(&self) -> usize {
        self.events.iter().filter(|e| e.kind.is_disturbance()).count()
    }

    /// Applies one control step worth of arm commands and advances the step counter.
    pub fn apply(&mut self, commands: &[ArmCommand]) -> Result<(), SimError> {
        for cmd in commands {
            self.move_gripper(cmd.arm, cmd.pose, cmd.width)?;
        }
        self.step += 1;
        Ok(())
    }

    fn move_gripper(&mut self, arm: Arm, pose: Pose, width: f64) -> Result<(), SimError> {
        let gripper = self.grippers.get_mut(&arm).ok_or(SimError::UnknownArm(arm))?;
        gripper.pose = pose;
        gripper.width = width.clamp(0.0, MAX_OPENING);
        let held = gripper.held.clone();
        if let Some(id) = held {
            let before = self.objects[&id].pose;
            let obj = self.objects.get_mut(&id).expect("held object exists");
            let transform = obj.grasp_transform.expect("held object has grasp transform");
            obj.pose = pose.compose(&transform);
            let delta = obj.pose.compose(&before.inverse());
            let tilt_before = {
                let up = before.transform_vector(&obj.upright_axis);
                up.z.clamp(-1.0, 1.0).acos()
            };
            let tilt_after = obj.tilt();
            self.carry_dependents(&id, &delta);
            if tilt_before <= POUR_ANGLE && tilt_after > POUR_ANGLE {
                self.check_pour(&id);
            }
        }
        Ok(())
    }

    fn carry_dependents(&mut self, support: &str, delta: &Pose) {
        let dependents: Vec<ObjectId> = self
            .objects
            .values()
            .filter(|o| o.resting_on.as_deref() == Some(support) && o.attached_to.is_none())
            .map(|o| o.id.clone())
            .collect();
        for id in dependents {
            let obj = self.objects.get_mut(&id).expect("dependent exists");
            obj.pose = delta.compose(&obj.pose);
            self.carry_dependents(&id, delta);
        }
    }

    fn check_pour(&mut self, id: &str) {
        let source = self.objects[id].pose.position;
        let target = self
            .objects
            .values()
            .filter(|o| o.receptacle && o.id != id)
            .find(|o| {
                let d = o.pose.position - source;
                (d.x * d.x + d.y * d.y).sqrt() <= POUR_LATERAL
            })
            .map(|o| o.id.clone());
        if let Some(into) = target {
            self.log(WorldEventKind::Poured {
                object: id.to_string(),
                into,
            });
        }
    }

    /// The object `arm` would attach to if it closed now.
    pub fn grasp_candidate(&self, arm: Arm) -> Option<ObjectId> {
        let gripper = self.grippers.get(&arm)?;
        let origin = gripper.pose.position;
        self.objects
            .values()
            .filter(|o| gripper.held.as_deref() != Some(o.id.as_str()))
            .filter(|o| o.grasp_width < gripper.width)
            .filter_map(|o| {
                let d = o
                    .world_grasp_points()
                    .iter()
                    .map(|p| (p - origin).norm())
                    .fold(f64::INFINITY, f64::min);
                (d <= GRASP_TOLERANCE).then(|| (d, o.id.clone()))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)))
            .map(|(_, id)| id)
    }

    /// Attaches `object` to `arm`. An object already held by the other arm is
    /// transferred and a handover is logged.
    pub fn attach(&mut self, arm: Arm, object: &str) -> Result<(), SimError> {
        let grip_pose = self.gripper(arm)?.pose;
        let obj = self
            .objects
            .get_mut(object)
            .ok_or_else(|| SimError::UnknownObject(object.to_string()))?;
        let previous = obj.attached_to;
        obj.attached_to = Some(arm);
        obj.resting_on = None;
        obj.grasp_transform = Some(grip_pose.inverse().compose(&obj.pose));
        let grasp_width = obj.grasp_width;
        if let Some(other) = previous.filter(|o| *o != arm) {
            if let Some(g) = self.grippers.get_mut(&other) {
                g.held = None;
            }
            self.log(WorldEventKind::Handover {
                object: object.to_string(),
                from: other,
                to: arm,
            });
        }
        let g = self.grippers.get_mut(&arm).expect("arm checked above");
        g.held = Some(object.to_string());
        g.closed = true;
        g.width = grasp_width;
        self.log(WorldEventKind::Grasped {
            arm,
            object: object.to_string(),
        });
        Ok(())
    }

    /// Opens the hold of `arm`; the released object keeps its orientation and settles.
    pub fn release(&mut self, arm: Arm) -> Result<Option<ObjectId>, SimError> {
        let g = self.grippers.get_mut(&arm).ok_or(SimError::UnknownArm(arm))?;
        g.closed = false;
        let Some(id) = g.held.take() else {
            return Ok(None);
        };
        self.detach(&id);
        self.log(WorldEventKind::Released {
            arm,
            object: id.clone(),
        });
        self.settle();
        Ok(Some(id))
    }

    pub fn set_closed(&mut self, arm: Arm, closed: bool) -> Result<(), SimError> {
        let g = self.grippers.get_mut(&arm).ok_or(SimError::UnknownArm(arm))?;
        g.closed = closed;
        Ok(())
    }

    fn detach(&mut self, id: &str) {
        if let Some(obj) = self.objects.get_mut(id) {
            if let Some(arm) = obj.attached_to.take() {
                if let Some(g) = self.grippers.get_mut(&arm) {
                    if g.held.as_deref() == Some(id) {
                        g.held = None;
                    }
                }
            }
            obj.grasp_transform = None;
        }
    }

    pub fn held_by(&self, arm: Arm) -> Option<&str> {
        self.grippers.get(&arm).and_then(|g| g.held.as_deref())
    }

    /// Places every unattached object on its supporting surface. Free objects
    /// tilted beyond 45 degrees fall onto their side.
    pub fn settle(&mut self) {
        let mut order: Vec<(f64, ObjectId)> = self
            .objects
            .values()
            .filter(|o| o.attached_to.is_none())
            .map(|o| (o.min_z(), o.id.clone()))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        for (_, id) in order {
            self.settle_object(&id);
        }
    }

    fn settle_object(&mut self, id: &str) {
        let obj = &self.objects[id];
        if obj.attached_to.is_some() {
            return;
        }
        let mut pose = obj.pose;
        if obj.is_lying() {
            let up = obj.world_upright();
            let horizontal = Vec3::new(up.x, up.y, 0.0);
            let target = if horizontal.norm() < 1e-9 {
                Vec3::x()
            } else {
                horizontal.normalize()
            };
            let r = rotation_between(&up, &target);
            pose = rotate_about(&pose, &pose.position, &r);
        }
        let centroid = pose.position;
        let (support, support_z) = self.support_under(id, &centroid);
        let obj = self.objects.get_mut(id).expect("object exists");
        obj.pose = pose;
        let dz = support_z - obj.min_z();
        obj.pose.position.z += dz;
        obj.resting_on = support;
    }

    fn support_under(&self, id: &str, at: &Vec3) -> (Option<ObjectId>, f64) {
        let mut best = (None, self.table_height);
        let obj = &self.objects[id];
        if !obj.stackable {
            return best;
        }
        for other in self.objects.values() {
            if other.id == id
                || other.attached_to.is_some()
                || other.resting_on.as_deref() == Some(id)
            {
                continue;
            }
            let (lo, hi) = other.footprint();
            if at.x >= lo.x && at.x <= hi.x && at.y >= lo.y && at.y <= hi.y && hi.z > best.1 {
                best = (Some(other.id.clone()), hi.z);
            }
        }
        best
    }

    /// Applies an external disturbance.
    pub fn inject<R: Rng + ?Sized>(
        &mut self,
        event: &Injection,
        rng: &mut R,
    ) -> Result<(), SimError> {
        match event {
            Injection::Drop { object } => {
                let target = match object {
                    Some(id) => {
                        self.object(id)?;
                        Some(id.clone())
                    }
                    None => self.grippers.values().find_map(|g| g.held.clone()),
                };
                let held = target
                    .as_ref()
                    .filter(|id| self.objects[id.as_str()].attached_to.is_some());
                let Some(id) = held.cloned() else {
                    let what = target.unwrap_or_else(|| "<none held>".to_string());
                    self.log(WorldEventKind::Warning {
                        message: format!("drop ignored: `{what}` is not held"),
                    });
                    return Ok(());
                };
                self.drop_object(&id, rng);
                Ok(())
            }
            Injection::Shift { object, delta } => {
                self.object(object)?;
                self.free(object);
                let obj = self.objects.get_mut(object).expect("checked");
                obj.pose.position += vec3(*delta);
                self.settle();
                self.log(WorldEventKind::Shifted {
                    object: object.clone(),
                    delta: *delta,
                });
                Ok(())
            }
            Injection::Tilt {
                object,
                angle,
                axis,
            } => {
                self.object(object)?;
                let axis = vec3(*axis);
                if axis.norm() < 1e-12 {
                    return Err(SimError::InvalidAction("tilt axis must be nonzero".into()));
                }
                self.free(object);
                let obj = self.objects.get_mut(object).expect("checked");
                let r = Quat::from_axis_angle(&nalgebra::Unit::new_normalize(axis), *angle);
                obj.pose = rotate_about(&obj.pose, &obj.pose.position, &r);
                self.settle();
                self.log(WorldEventKind::Tilted {
                    object: object.clone(),
                    angle: *angle,
                    axis: [axis.x, axis.y, axis.z],
                });
                Ok(())
            }
        }
    }

    /// Detaches an object from whichever gripper holds it; the gripper fingers close on nothing.
    fn free(&mut self, id: &str) {
        if let Some(arm) = self.objects[id].attached_to {
            if let Some(g) = self.grippers.get_mut(&arm) {
                g.width = 0.0;
                g.closed = true;
            }
        }
        self.detach(id);
    }

    /// Uncontrolled release: tall objects tumble onto their side, everything
    /// lands within the jitter band around the release point.
    pub(crate) fn drop_object<R: Rng + ?Sized>(&mut self, id: &str, rng: &mut R) {
        self.free(id);
        let jitter_x = rng.random_range(-DROP_JITTER..=DROP_JITTER);
        let jitter_y = rng.random_range(-DROP_JITTER..=DROP_JITTER);
        let heading = rng.random_range(0.0..2.0 * PI);
        let obj = self.objects.get_mut(id).expect("dropped object exists");
        if obj.is_tall() && !obj.is_lying() {
            let up = obj.world_upright();
            let side = Vec3::new(heading.cos(), heading.sin(), 0.0);
            let axis = up.cross(&side);
            let r = if axis.norm() < 1e-9 {
                Quat::from_axis_angle(&Vec3::y_axis(), FRAC_PI_2)
            } else {
                rotation_between(&up, &side)
            };
            obj.pose = rotate_about(&obj.pose, &obj.pose.position, &r);
        }
        obj.pose.position.x += jitter_x;
        obj.pose.position.y += jitter_y;
        self.settle();
        self.log(WorldEventKind::Dropped {
            object: id.to_string(),
        });
    }
}
