use crate::geometry::{Aabb, Vec3};
use crate::simworld::SceneSpec;

/// Signed distance to the static scene (table plane and obstacle boxes) sampled on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionField {
    pub origin: Vec3,
    pub voxel: f64,
    pub dims: [usize; 3],
    pub margin: f64,
    values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdfSample {
    pub distance: f64,
    pub gradient: Vec3,
    /// The query point was outside the grid and has been clamped onto it.
    pub clamped: bool,
}

impl CollisionField {
    pub fn build(scene: &SceneSpec, voxel: f64, margin: f64) -> CollisionField {
        let bounds = scene.bounds(0.05);
        let table = scene.table_height;
        let obstacles = scene.obstacles.clone();
        Self::from_fn(&bounds, voxel, margin, |p| {
            obstacles
                .iter()
                .map(|o| o.signed_distance(p))
                .fold(p.z - table, f64::min)
        })
    }

    /// Samples `distance` at every grid node covering `bounds`.
    pub fn from_fn(bounds: &Aabb, voxel: f64, margin: f64, distance: impl Fn(&Vec3) -> f64) -> Self {
        let extent = bounds.max - bounds.min;
        let dims = [0, 1, 2].map(|i| ((extent[i] / voxel).ceil() as usize).max(1) + 1);
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let p = bounds.min + Vec3::new(i as f64, j as f64, k as f64) * voxel;
                    values.push(distance(&p));
                }
            }
        }
        CollisionField {
            origin: bounds.min,
            voxel,
            dims,
            margin,
            values,
        }
    }

    pub fn bounds(&self) -> Aabb {
        let max = self.origin
            + Vec3::new(
                (self.dims[0] - 1) as f64,
                (self.dims[1] - 1) as f64,
                (self.dims[2] - 1) as f64,
            ) * self.voxel;
        Aabb::new(self.origin, max)
    }

    /// Stored value at a grid node.
    pub fn node(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(i * self.dims[1] + j) * self.dims[2] + k]
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64, j as f64, k as f64) * self.voxel
    }

    /// Trilinear interpolation with its analytic gradient.
    pub fn query(&self, p: &Vec3) -> SdfSample {
        let b = self.bounds();
        let q = b.clamp(p);
        let clamped = q != *p;
        let mut idx = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let u = (q[a] - self.origin[a]) / self.voxel;
            let u = if (u - u.round()).abs() < 1e-9 { u.round() } else { u };
            let i = (u.floor() as usize).min(self.dims[a] - 2);
            idx[a] = i;
            t[a] = (u - i as f64).clamp(0.0, 1.0);
        }
        let [i, j, k] = idx;
        let c = |di, dj, dk| self.node(i + di, j + dj, k + dk);
        let (tx, ty, tz) = (t[0], t[1], t[2]);
        let c00 = c(0, 0, 0) * (1.0 - tx) + c(1, 0, 0) * tx;
        let c10 = c(0, 1, 0) * (1.0 - tx) + c(1, 1, 0) * tx;
        let c01 = c(0, 0, 1) * (1.0 - tx) + c(1, 0, 1) * tx;
        let c11 = c(0, 1, 1) * (1.0 - tx) + c(1, 1, 1) * tx;
        let c0 = c00 * (1.0 - ty) + c10 * ty;
        let c1 = c01 * (1.0 - ty) + c11 * ty;
        let distance = c0 * (1.0 - tz) + c1 * tz;

        let dx00 = c(1, 0, 0) - c(0, 0, 0);
        let dx10 = c(1, 1, 0) - c(0, 1, 0);
        let dx01 = c(1, 0, 1) - c(0, 0, 1);
        let dx11 = c(1, 1, 1) - c(0, 1, 1);
        let dx0 = dx00 * (1.0 - ty) + dx10 * ty;
        let dx1 = dx01 * (1.0 - ty) + dx11 * ty;
        let gx = dx0 * (1.0 - tz) + dx1 * tz;
        let gy = (c10 - c00) * (1.0 - tz) + (c11 - c01) * tz;
        let gz = c1 - c0;
        let gradient = if clamped {
            Vec3::zeros()
        } else {
            Vec3::new(gx, gy, gz) / self.voxel
        };
        SdfSample {
            distance,
            gradient,
            clamped,
        }
    }
}

pub fn sdf_query(field: &CollisionField, p: &Vec3) -> SdfSample {
    field.query(p)
}
