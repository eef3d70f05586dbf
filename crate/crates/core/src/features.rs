//! Simulated perception and geometric feature extraction.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::geometry::{gravity_dir, Pose, Vec3};
use crate::simworld::{Arm, WorldState};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FeatureError {
    #[error("unknown feature key `{0}`")]
    UnknownFeatureKey(String),
    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(String),
}

/// Observation noise applied by [`perceive`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Isotropic Gaussian standard deviation per point (m).
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Independent per-point dropout probability.
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_sigma() -> f64 {
    0.001
}

fn default_dropout() -> f64 {
    0.05
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma: default_sigma(),
            dropout: default_dropout(),
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        NoiseConfig {
            sigma: 0.0,
            dropout: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub object_id: String,
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let sum: Vec3 = self.points.iter().sum();
        Some(sum / self.points.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectPercept {
    pub cloud: PointCloud,
    pub centroid: Option<Vec3>,
}

impl ObjectPercept {
    pub fn point_count(&self) -> usize {
        self.cloud.points.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionOutput {
    pub step: u64,
    pub objects: BTreeMap<String, ObjectPercept>,
    pub table_height: f64,
    /// Names of world events observed so far (e.g. `poured`).
    pub flags: BTreeSet<String>,
}

impl PerceptionOutput {
    pub fn centroid(&self, id: &str) -> Option<Vec3> {
        self.objects.get(id).and_then(|o| o.centroid)
    }

    pub fn cloud(&self, id: &str) -> Option<&PointCloud> {
        self.objects.get(id).map(|o| &o.cloud)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GripperState {
    pub pose: Pose,
    pub width: f64,
    pub closed: bool,
}

/// Proprioceptive state: per-arm free-flyer pose plus gripper.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RobotState {
    pub grippers: BTreeMap<Arm, GripperState>,
}

impl RobotState {
    pub fn from_world(world: &WorldState) -> RobotState {
        RobotState {
            grippers: world
                .grippers
                .iter()
                .map(|(arm, g)| {
                    (
                        *arm,
                        GripperState {
                            pose: g.pose,
                            width: g.width,
                            closed: g.closed,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Joint vector of the free-flyer model: position then quaternion `[w,x,y,z]` per arm.
    pub fn q(&self) -> Vec<f64> {
        let mut q = Vec::with_capacity(7 * self.grippers.len());
        for g in self.grippers.values() {
            let o = g.pose.orientation.quaternion();
            q.extend_from_slice(&[
                g.pose.position.x,
                g.pose.position.y,
                g.pose.position.z,
                o.w,
                o.i,
                o.j,
                o.k,
            ]);
        }
        q
    }
}

/// Applies Gaussian noise and dropout to `points`.
pub fn perceive_cloud<R: Rng + ?Sized>(
    object_id: &str,
    points: impl Iterator<Item = Vec3>,
    noise: &NoiseConfig,
    rng: &mut R,
) -> PointCloud {
    let normal = (noise.sigma > 0.0).then(|| Normal::new(0.0, noise.sigma).expect("sigma >= 0"));
    let mut out = Vec::new();
    for p in points {
        if noise.dropout > 0.0 && rng.random::<f64>() < noise.dropout {
            continue;
        }
        let q = match &normal {
            Some(n) => p + Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng)),
            None => p,
        };
        out.push(q);
    }
    PointCloud {
        object_id: object_id.to_string(),
        points: out,
    }
}

/// Noisy observation of every object in the world.
pub fn perceive<R: Rng + ?Sized>(
    world: &WorldState,
    noise: &NoiseConfig,
    rng: &mut R,
) -> PerceptionOutput {
    let mut objects = BTreeMap::new();
    for (id, obj) in &world.objects {
        let cloud = perceive_cloud(id, obj.world_points(), noise, rng);
        let centroid = cloud.centroid();
        objects.insert(id.clone(), ObjectPercept { cloud, centroid });
    }
    PerceptionOutput {
        step: world.step,
        objects,
        table_height: world.table_height,
        flags: world
            .events
            .iter()
            .map(|e| e.kind.flag_name().to_string())
            .collect(),
    }
}

/// Unit eigenvector of the centered covariance with the largest eigenvalue,
/// signed so that its largest-magnitude component is positive.
pub fn principal_axis(cloud: &PointCloud) -> Result<Vec3, FeatureError> {
    let n = cloud.points.len();
    if n < 3 {
        return Err(FeatureError::DegenerateCloud(format!(
            "`{}` has {n} points",
            cloud.object_id
        )));
    }
    let c = cloud.centroid().expect("nonempty");
    let mut cov = Matrix3::zeros();
    for p in &cloud.points {
        let d = p - c;
        cov += d * d.transpose();
    }
    cov /= n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if l1 <= 1e-9 || l1 - l2 <= 1e-9 {
        return Err(FeatureError::DegenerateCloud(format!(
            "`{}` has no dominant axis",
            cloud.object_id
        )));
    }
    let axis: Vec3 = eig.eigenvectors.column(order[0]).into_owned().normalize();
    Ok(canonical_sign(axis))
}

fn canonical_sign(v: Vec3) -> Vec3 {
    let mut best = 0;
    for i in 1..3 {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        -v
    } else {
        v
    }
}

/// Point at fraction `alpha` of the cloud's extent along `axis`, on the axis line through the centroid.
pub fn fractional_point(cloud: &PointCloud, axis: &Vec3, alpha: f64) -> Result<Vec3, FeatureError> {
    let c = cloud.centroid().ok_or_else(|| {
        FeatureError::DegenerateCloud(format!("`{}` is empty", cloud.object_id))
    })?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &cloud.points {
        let s = (p - c).dot(axis);
        lo = lo.min(s);
        hi = hi.max(s);
    }
    Ok(c + axis * (lo + alpha * (hi - lo)))
}

fn extremal_z(cloud: &PointCloud, top: bool) -> Option<Vec3> {
    let cmp = |a: &&Vec3, b: &&Vec3| a.z.total_cmp(&b.z);
    if top {
        cloud.points.iter().max_by(cmp).copied()
    } else {
        cloud.points.iter().min_by(cmp).copied()
    }
}

/// Feature key; the string form is used in task files and expressions.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeatureKey {
    Centroid(String),
    PrincipalAxis(String),
    TopPoint(String),
    BottomPoint(String),
    /// Fraction stored in millionths so keys stay hashable and ordered.
    FractionalPoint(String, u32),
    PointCount(String),
    GripperWidth(Arm),
    GripperClosed(Arm),
    GripperOrigin(Arm),
    RelativeDistance(String, String),
    GravityDir,
    TableHeight,
    Flag(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Scalar,
    Vector,
}

impl FeatureKey {
    pub fn kind(&self) -> ValueKind {
        match self {
            FeatureKey::Centroid(_)
            | FeatureKey::PrincipalAxis(_)
            | FeatureKey::TopPoint(_)
            | FeatureKey::BottomPoint(_)
            | FeatureKey::FractionalPoint(..)
            | FeatureKey::GripperOrigin(_)
            | FeatureKey::GravityDir => ValueKind::Vector,
            _ => ValueKind::Scalar,
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            FeatureKey::FractionalPoint(_, a) => Some(*a as f64 / 1e6),
            _ => None,
        }
    }

    /// Object ids referenced by this key.
    pub fn objects(&self) -> Vec<&str> {
        match self {
            FeatureKey::Centroid(k)
            | FeatureKey::PrincipalAxis(k)
            | FeatureKey::TopPoint(k)
            | FeatureKey::BottomPoint(k)
            | FeatureKey::FractionalPoint(k, _)
            | FeatureKey::PointCount(k) => vec![k.as_str()],
            FeatureKey::RelativeDistance(a, b) => vec![a.as_str(), b.as_str()],
            _ => vec![],
        }
    }

    pub fn arm(&self) -> Option<Arm> {
        match self {
            FeatureKey::GripperWidth(a) | FeatureKey::GripperClosed(a) | FeatureKey::GripperOrigin(a) => {
                Some(*a)
            }
            _ => None,
        }
    }
}

impl fmt::Display for FeatureKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureKey::Centroid(k) => write!(f, "centroid({k})"),
            FeatureKey::PrincipalAxis(k) => write!(f, "principal_axis({k})"),
            FeatureKey::TopPoint(k) => write!(f, "top_point({k})"),
            FeatureKey::BottomPoint(k) => write!(f, "bottom_point({k})"),
            FeatureKey::FractionalPoint(k, a) => write!(f, "fractional_point({k},{})", *a as f64 / 1e6),
            FeatureKey::PointCount(k) => write!(f, "point_count({k})"),
            FeatureKey::GripperWidth(a) => write!(f, "gripper_width({a})"),
            FeatureKey::GripperClosed(a) => write!(f, "gripper_closed({a})"),
            FeatureKey::GripperOrigin(a) => write!(f, "gripper_origin({a})"),
            FeatureKey::RelativeDistance(k, l) => write!(f, "relative_distance({k},{l})"),
            FeatureKey::GravityDir => f.write_str("gravity_dir"),
            FeatureKey::TableHeight => f.write_str("table_height"),
            FeatureKey::Flag(n) => write!(f, "flag({n})"),
        }
    }
}

impl FromStr for FeatureKey {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || FeatureError::UnknownFeatureKey(s.to_string());
        let t = s.trim();
        let (name, args) = match t.find('(') {
            Some(open) => {
                let inner = t[open + 1..].strip_suffix(')').ok_or_else(unknown)?;
                let args: Vec<&str> = inner.split(',').map(str::trim).collect();
                if args.iter().any(|a| !is_ident(a) && a.parse::<f64>().is_err()) {
                    return Err(unknown());
                }
                (t[..open].trim(), args)
            }
            None => (t, Vec::new()),
        };
        let one = |args: &[&str]| -> Result<String, FeatureError> {
            match args {
                [a] if is_ident(a) => Ok(a.to_string()),
                _ => Err(unknown()),
            }
        };
        let arm = |args: &[&str]| -> Result<Arm, FeatureError> {
            match args {
                [a] => Arm::parse(a).ok_or_else(unknown),
                _ => Err(unknown()),
            }
        };
        Ok(match name {
            "centroid" => FeatureKey::Centroid(one(&args)?),
            "principal_axis" => FeatureKey::PrincipalAxis(one(&args)?),
            "top_point" => FeatureKey::TopPoint(one(&args)?),
            "bottom_point" => FeatureKey::BottomPoint(one(&args)?),
            "point_count" => FeatureKey::PointCount(one(&args)?),
            "fractional_point" => match args.as_slice() {
                [k, a] if is_ident(k) => {
                    let alpha: f64 = a.parse().map_err(|_| unknown())?;
                    if !(0.0..=1.0).contains(&alpha) {
                        return Err(unknown());
                    }
                    FeatureKey::FractionalPoint(k.to_string(), (alpha * 1e6).round() as u32)
                }
                _ => return Err(unknown()),
            },
            "relative_distance" => match args.as_slice() {
                [k, l] if is_ident(k) && is_ident(l) => {
                    FeatureKey::RelativeDistance(k.to_string(), l.to_string())
                }
                _ => return Err(unknown()),
            },
            "gripper_width" => FeatureKey::GripperWidth(arm(&args)?),
            "gripper_closed" => FeatureKey::GripperClosed(arm(&args)?),
            "gripper_origin" => FeatureKey::GripperOrigin(arm(&args)?),
            "flag" => FeatureKey::Flag(one(&args)?),
            "gravity_dir" if args.is_empty() => FeatureKey::GravityDir,
            "table_height" if args.is_empty() => FeatureKey::TableHeight,
            _ => return Err(unknown()),
        })
    }
}

pub(crate) fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

impl Serialize for FeatureKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FeatureKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Scalar(f64),
    Vector([f64; 3]),
    Missing,
}

impl FeatureValue {
    pub fn vector(v: Vec3) -> Self {
        FeatureValue::Vector([v.x, v.y, v.z])
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            FeatureValue::Scalar(x) => Some(*x),
            _ => None,
        }
    }

    pub fn as_vector(&self) -> Option<Vec3> {
        match self {
            FeatureValue::Vector(v) => Some(Vec3::new(v[0], v[1], v[2])),
            _ => None,
        }
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, FeatureValue::Missing)
    }
}

/// Feature vector z_t: the requested keys and their values.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
#[serde(transparent)]
pub struct FeatureVector(pub BTreeMap<FeatureKey, FeatureValue>);

impl FeatureVector {
    pub fn get(&self, key: &FeatureKey) -> Option<&FeatureValue> {
        self.0.get(key)
    }

    pub fn insert(&mut self, key: FeatureKey, value: FeatureValue) {
        self.0.insert(key, value);
    }

    pub fn scalar(&self, key: &FeatureKey) -> Option<f64> {
        self.0.get(key).and_then(FeatureValue::as_scalar)
    }

    pub fn vector(&self, key: &FeatureKey) -> Option<Vec3> {
        self.0.get(key).and_then(FeatureValue::as_vector)
    }
}

/// Computes exactly the requested keys. Keys about absent or unobserved objects are `Missing`.
pub fn extract_features<'a>(
    x: &PerceptionOutput,
    xi: &RobotState,
    requested: impl IntoIterator<Item = &'a FeatureKey>,
) -> FeatureVector {
    let mut z = FeatureVector::default();
    for key in requested {
        if z.0.contains_key(key) {
            continue;
        }
        let value = feature_value(x, xi, key);
        z.0.insert(key.clone(), value);
    }
    z
}

fn feature_value(x: &PerceptionOutput, xi: &RobotState, key: &FeatureKey) -> FeatureValue {
    let cloud = |k: &str| x.cloud(k).filter(|c| !c.points.is_empty());
    let vector = |v: Option<Vec3>| v.map(FeatureValue::vector).unwrap_or(FeatureValue::Missing);
    match key {
        FeatureKey::Centroid(k) => vector(x.centroid(k)),
        FeatureKey::PrincipalAxis(k) => vector(cloud(k).and_then(|c| principal_axis(c).ok())),
        FeatureKey::TopPoint(k) => vector(cloud(k).and_then(|c| extremal_z(c, true))),
        FeatureKey::BottomPoint(k) => vector(cloud(k).and_then(|c| extremal_z(c, false))),
        FeatureKey::FractionalPoint(k, _) => vector(cloud(k).and_then(|c| {
            let axis = principal_axis(c).ok()?;
            fractional_point(c, &axis, key.alpha().expect("fractional key")).ok()
        })),
        FeatureKey::PointCount(k) => {
            FeatureValue::Scalar(x.cloud(k).map_or(0, |c| c.points.len()) as f64)
        }
        FeatureKey::GripperWidth(a) => xi
            .grippers
            .get(a)
            .map_or(FeatureValue::Missing, |g| FeatureValue::Scalar(g.width)),
        FeatureKey::GripperClosed(a) => xi.grippers.get(a).map_or(FeatureValue::Missing, |g| {
            FeatureValue::Scalar(if g.closed { 1.0 } else { 0.0 })
        }),
        FeatureKey::GripperOrigin(a) => vector(xi.grippers.get(a).map(|g| g.pose.position)),
        FeatureKey::RelativeDistance(k, l) => match (x.centroid(k), x.centroid(l)) {
            (Some(a), Some(b)) => FeatureValue::Scalar((a - b).norm()),
            _ => FeatureValue::Missing,
        },
        FeatureKey::GravityDir => FeatureValue::vector(gravity_dir()),
        FeatureKey::TableHeight => FeatureValue::Scalar(x.table_height),
        FeatureKey::Flag(name) => {
            FeatureValue::Scalar(if x.flags.contains(name) { 1.0 } else { 0.0 })
        }
    }
}
