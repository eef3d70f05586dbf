//! Scene documents: the world description embedded in a task file.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::geometry::{vec3, Aabb, Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Left,
    Right,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Left => "left",
            Arm::Right => "right",
        }
    }

    pub fn parse(s: &str) -> Option<Arm> {
        match s {
            "left" => Some(Arm::Left),
            "right" => Some(Arm::Right),
            _ => None,
        }
    }
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Box { extents: [f64; 3] },
    Cylinder { radius: f64, height: f64 },
}

impl Shape {
    /// Half extent along the body z axis.
    pub fn half_height(&self) -> f64 {
        match self {
            Shape::Box { extents } => extents[2] * 0.5,
            Shape::Cylinder { height, .. } => height * 0.5,
        }
    }

    pub fn max_horizontal_extent(&self) -> f64 {
        match self {
            Shape::Box { extents } => extents[0].max(extents[1]),
            Shape::Cylinder { radius, .. } => radius * 2.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        match self {
            Shape::Box { extents } => extents.iter().all(|e| *e > 0.0),
            Shape::Cylinder { radius, height } => *radius > 0.0 && *height > 0.0,
        }
    }

    /// Deterministic surface samples in the body frame, centered on the centroid.
    pub fn sample_surface(&self) -> Vec<Vec3> {
        match self {
            Shape::Box { extents } => sample_box(extents, 6),
            Shape::Cylinder { radius, height } => sample_cylinder(*radius, *height, 16, 10),
        }
    }
}

fn sample_box(extents: &[f64; 3], n: usize) -> Vec<Vec3> {
    let h = [extents[0] * 0.5, extents[1] * 0.5, extents[2] * 0.5];
    let mut points = Vec::with_capacity(6 * n * n);
    let lerp = |i: usize, half: f64| -half + 2.0 * half * (i as f64 + 0.5) / n as f64;
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for sign in [-1.0, 1.0] {
            for i in 0..n {
                for j in 0..n {
                    let mut p = [0.0; 3];
                    p[axis] = sign * h[axis];
                    p[u] = lerp(i, h[u]);
                    p[v] = lerp(j, h[v]);
                    points.push(vec3(p));
                }
            }
        }
    }
    points
}

fn sample_cylinder(radius: f64, height: f64, ring: usize, levels: usize) -> Vec<Vec3> {
    let mut points = Vec::with_capacity(ring * levels + 18);
    for l in 0..levels {
        let z = -height * 0.5 + height * l as f64 / (levels - 1) as f64;
        for k in 0..ring {
            let a = 2.0 * PI * k as f64 / ring as f64;
            points.push(Vec3::new(radius * a.cos(), radius * a.sin(), z));
        }
    }
    for z in [-height * 0.5, height * 0.5] {
        points.push(Vec3::new(0.0, 0.0, z));
        for k in 0..8 {
            let a = 2.0 * PI * k as f64 / 8.0;
            points.push(Vec3::new(0.5 * radius * a.cos(), 0.5 * radius * a.sin(), z));
        }
    }
    points
}

fn default_upright() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub id: String,
    pub shape: Shape,
    /// Centroid position in the world frame.
    pub position: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    #[serde(default = "default_upright")]
    pub upright_axis: [f64; 3],
    pub grasp_width: f64,
    /// Body-frame grasp points; the centroid when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grasp_points: Vec<[f64; 3]>,
    /// Objects that can receive a pour.
    #[serde(default)]
    pub receptacle: bool,
    /// Whether the object can come to rest on top of other objects.
    #[serde(default)]
    pub stackable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub arm: Arm,
    pub home: Pose,
    pub workspace: Aabb,
    #[serde(default = "default_open_width")]
    pub initial_width: f64,
}

fn default_open_width() -> f64 {
    0.08
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default)]
    pub table_height: f64,
    pub objects: Vec<ObjectSpec>,
    pub arms: Vec<ArmSpec>,
    /// Static obstacles baked into the collision field.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub obstacles: Vec<Aabb>,
}

impl SceneSpec {
    pub fn object(&self, id: &str) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn arm(&self, arm: Arm) -> Option<&ArmSpec> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    pub fn workspaces(&self) -> BTreeMap<Arm, Aabb> {
        self.arms.iter().map(|a| (a.arm, a.workspace)).collect()
    }

    /// Union of all arm workspaces padded by `pad`, used as the collision grid extent.
    pub fn bounds(&self, pad: f64) -> Aabb {
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for a in &self.arms {
            min = min.inf(&a.workspace.min);
            max = max.sup(&a.workspace.max);
        }
        if self.arms.is_empty() {
            min = Vec3::new(0.0, -0.5, self.table_height);
            max = Vec3::new(1.0, 0.5, self.table_height + 0.6);
        }
        min.z = min.z.min(self.table_height);
        Aabb::new(min - Vec3::repeat(pad), max + Vec3::repeat(pad))
    }
}
