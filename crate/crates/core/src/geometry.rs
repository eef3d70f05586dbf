//! Rigid-body primitives shared by the simulator, the feature extractor and the solvers.

use nalgebra::{Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub type Vec3 = Vector3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// World gravity direction. Fixed to world -z.
pub fn gravity_dir() -> Vec3 {
    Vec3::new(0.0, 0.0, -1.0)
}

pub fn vec3(v: [f64; 3]) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

pub fn to_array(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// A pose in SE(3): position in meters plus a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseDoc", into = "PoseDoc")]
pub struct Pose {
    pub position: Vec3,
    pub orientation: Quat,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseDoc {
    position: [f64; 3],
    /// `[w, x, y, z]`
    #[serde(default = "identity_wxyz")]
    orientation: [f64; 4],
}

fn identity_wxyz() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl From<PoseDoc> for Pose {
    fn from(d: PoseDoc) -> Self {
        let [w, x, y, z] = d.orientation;
        Pose {
            position: vec3(d.position),
            orientation: UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z)),
        }
    }
}

impl From<Pose> for PoseDoc {
    fn from(p: Pose) -> Self {
        let q = p.orientation.quaternion();
        PoseDoc {
            position: to_array(&p.position),
            orientation: [q.w, q.i, q.j, q.k],
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            position: Vec3::zeros(),
            orientation: Quat::identity(),
        }
    }

    pub fn new(position: Vec3, orientation: Quat) -> Self {
        Pose {
            position,
            orientation,
        }
    }

    pub fn from_position(position: Vec3) -> Self {
        Pose::new(position, Quat::identity())
    }

    /// Gripper pointing straight down (gripper z-axis along world -z), fingers
    /// closing along world x, rotated by `yaw` about world z.
    pub fn top_down(position: Vec3, yaw: f64) -> Self {
        let down = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), PI);
        let yaw = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
        Pose::new(position, yaw * down)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.orientation * p + self.position
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.orientation * v
    }

    /// `self ∘ other`
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            position: self.orientation * other.position + self.position,
            orientation: self.orientation * other.orientation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.orientation.inverse();
        Pose {
            position: -(inv * self.position),
            orientation: inv,
        }
    }

    pub fn translation_to(&self, other: &Pose) -> f64 {
        (other.position - self.position).norm()
    }

    pub fn rotation_to(&self, other: &Pose) -> f64 {
        self.orientation.angle_to(&other.orientation)
    }
}

/// Rotation about a world axis through `pivot`.
pub fn rotate_about(pose: &Pose, pivot: &Vec3, rotation: &Quat) -> Pose {
    Pose {
        position: rotation * (pose.position - pivot) + pivot,
        orientation: rotation * pose.orientation,
    }
}

/// Shortest-arc step from `from` toward `to` limited to `max_angle` radians.
pub fn slerp_limited(from: &Quat, to: &Quat, max_angle: f64) -> Quat {
    let angle = from.angle_to(to);
    if angle <= max_angle || angle < 1e-12 {
        return *to;
    }
    // `slerp` on unit quaternions picks the shortest arc.
    from.slerp(to, max_angle / angle)
}

/// Rotation taking unit vector `a` onto unit vector `b` along the shortest arc.
pub fn rotation_between(a: &Vec3, b: &Vec3) -> Quat {
    match UnitQuaternion::rotation_between(a, b) {
        Some(q) => q,
        None => {
            // antiparallel: rotate by pi about any axis orthogonal to `a`
            let axis = orthogonal(a);
            UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), PI)
        }
    }
}

pub fn orthogonal(v: &Vec3) -> Vec3 {
    let candidate = if v.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    v.cross(&candidate).normalize()
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    #[serde(with = "vec3_array")]
    pub min: Vec3,
    #[serde(with = "vec3_array")]
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Aabb { min, max }
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| self.min[i] <= self.max[i])
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: &Vec3) -> Vec3 {
        Vec3::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
            p.z.clamp(self.min.z, self.max.z),
        )
    }

    /// Euclidean distance from `p` to the box; zero inside.
    pub fn distance(&self, p: &Vec3) -> f64 {
        (p - self.clamp(p)).norm()
    }

    /// Signed distance: negative inside (depth to the nearest face).
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        let center = (self.min + self.max) * 0.5;
        let half = (self.max - self.min) * 0.5;
        let q = (p - center).abs() - half;
        let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
        let inside = q.x.max(q.y).max(q.z).min(0.0);
        outside + inside
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }
}

pub(crate) mod vec3_array {
    use super::Vec3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vec3, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec3, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vec3::new(a[0], a[1], a[2]))
    }
}
