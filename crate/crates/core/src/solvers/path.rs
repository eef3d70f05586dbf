use crate::features::FeatureVector;
use crate::geometry::{slerp_limited, Aabb, Pose, Vec3};
use crate::monitors::ConstraintSpec;
use crate::simworld::Arm;

use super::{reachability_residual, ConstraintEval, Mover, PathWeights, SolverContext, SolverError};

/// Extra clearance the collision hinge keeps above the margin.
const HINGE_SLACK: f64 = 0.005;

#[derive(Debug, Clone)]
pub struct PathProblem<'a> {
    pub arm: Arm,
    pub start: Pose,
    pub goal: Pose,
    pub constraints: &'a [ConstraintSpec],
    /// Features of the latest perceptual estimate.
    pub features: &'a FeatureVector,
    /// Object carried by the arm; its features follow the gripper.
    pub held: Option<String>,
}

/// Objective over the free waypoint positions `p_1..p_H` (`p_0` is the start).
#[derive(Debug, Clone)]
pub struct PathObjective<'a> {
    pub start: Vec3,
    pub goal: Vec3,
    pub horizon: usize,
    pub weights: PathWeights,
    pub bounds: Aabb,
    max_step: f64,
    margin: f64,
    tol: f64,
    ctx: &'a SolverContext,
    constraints: ConstraintEval<'a>,
}

impl<'a> PathObjective<'a> {
    pub fn new(ctx: &'a SolverContext, problem: &PathProblem<'a>) -> Result<Self, SolverError> {
        let cfg = &ctx.config;
        let bounds = *ctx.workspace.bounds(problem.arm)?;
        let start = problem.start.position;
        let goal = problem.goal.position;
        let constraints = ConstraintEval::new(
            problem.constraints,
            problem.features,
            vec![Mover {
                arm: problem.arm,
                held: problem.held.clone(),
                anchor: start,
            }],
        );
        constraints.values(&[start])?;
        // Endpoints already inside the margin lower the clearance requirement to what they have.
        let end_clearance = ctx.field.query(&start).distance.min(ctx.field.query(&goal).distance);
        Ok(PathObjective {
            start,
            goal,
            horizon: cfg.horizon,
            weights: cfg.path_weights,
            bounds,
            max_step: ctx.workspace.max_step,
            margin: cfg.margin.min(end_clearance),
            tol: cfg.tol,
            ctx,
            constraints,
        })
    }

    fn constraint_penalty(&self, p: &Vec3) -> f64 {
        if self.constraints.is_empty() {
            return 0.0;
        }
        let shift = 0.5 * self.tol;
        self.constraints
            .values(&[*p])
            .map(|v| v.iter().map(|c| (c + shift).max(0.0).powi(2)).sum())
            .unwrap_or(0.0)
    }

    fn point_terms(&self, p: &Vec3, is_last: bool) -> (f64, Vec3) {
        let w = &self.weights;
        let mut value = 0.0;
        let mut grad = Vec3::zeros();
        let d = p - self.goal;
        value += w.track * d.norm_squared();
        grad += 2.0 * w.track * d;
        if is_last {
            value += w.terminal * d.norm_squared();
            grad += 2.0 * w.terminal * d;
        }
        let s = self.ctx.field.query(p);
        let hinge = self.margin + HINGE_SLACK - s.distance;
        if hinge > 0.0 {
            value += w.collision * hinge * hinge;
            grad -= 2.0 * w.collision * hinge * s.gradient;
        }
        let r = reachability_residual(p, &self.bounds);
        if r > 0.0 {
            let c = self.bounds.clamp(p);
            value += w.reach * r * r;
            grad += 2.0 * w.reach * (p - c);
        }
        (value, grad)
    }

    /// Objective value for waypoints `x = [p_1, ..., p_H]`.
    pub fn value(&self, x: &[Vec3]) -> f64 {
        let mut total = 0.0;
        let mut prev = self.start;
        for (h, p) in x.iter().enumerate() {
            total += self.point_terms(p, h + 1 == x.len()).0;
            total += self.weights.smooth * (p - prev).norm_squared();
            total += self.weights.constraint * self.constraint_penalty(p);
            prev = *p;
        }
        total
    }

    /// Gradient of [`PathObjective::value`]; the constraint term is differentiated numerically.
    pub fn gradient(&self, x: &[Vec3]) -> Vec<Vec3> {
        let n = x.len();
        let mut g = vec![Vec3::zeros(); n];
        for h in 0..n {
            g[h] += self.point_terms(&x[h], h + 1 == n).1;
            let prev = if h == 0 { self.start } else { x[h - 1] };
            let d = x[h] - prev;
            g[h] += 2.0 * self.weights.smooth * d;
            if h > 0 {
                g[h - 1] -= 2.0 * self.weights.smooth * d;
            }
            if !self.constraints.is_empty() && self.weights.constraint > 0.0 {
                let eps = 1e-6;
                for a in 0..3 {
                    let mut hi = x[h];
                    let mut lo = x[h];
                    hi[a] += eps;
                    lo[a] -= eps;
                    let diff = self.constraint_penalty(&hi) - self.constraint_penalty(&lo);
                    g[h][a] += self.weights.constraint * diff / (2.0 * eps);
                }
            }
        }
        g
    }

    /// Box clamp followed by a sequential per-step velocity clamp.
    pub fn project(&self, x: &mut [Vec3]) {
        let mut prev = self.start;
        for p in x.iter_mut() {
            *p = self.bounds.clamp(p);
            let d = *p - prev;
            let n = d.norm();
            if n > self.max_step {
                *p = prev + d * (self.max_step / n);
            }
            prev = *p;
        }
    }

    /// Straight line toward the goal at the velocity limit.
    pub fn straight_line(&self) -> Vec<Vec3> {
        walk(&[self.start, self.goal], self.max_step, self.horizon)
    }

    /// Up, across and down through a via height clear of every obstacle.
    fn detour(&self) -> Vec<Vec3> {
        let top = self.ctx.obstacle_top().unwrap_or(self.start.z);
        let zv = (top + self.margin + 2.0 * HINGE_SLACK)
            .max(self.start.z)
            .max(self.goal.z)
            .min(self.bounds.max.z);
        let up = Vec3::new(self.start.x, self.start.y, zv);
        let over = Vec3::new(self.goal.x, self.goal.y, zv);
        walk(&[self.start, up, over, self.goal], self.max_step, self.horizon)
    }

    fn minimize(&self, mut x: Vec<Vec3>, iterations: usize) -> Vec<Vec3> {
        self.project(&mut x);
        let mut f = self.value(&x);
        let mut alpha = 0.05;
        for _ in 0..iterations {
            let g = self.gradient(&x);
            let mut accepted = None;
            for _ in 0..30 {
                let mut y: Vec<Vec3> = x.iter().zip(&g).map(|(p, d)| p - alpha * d).collect();
                self.project(&mut y);
                let decrease: f64 = g.iter().zip(y.iter().zip(&x)).map(|(d, (a, b))| d.dot(&(a - b))).sum();
                let fy = self.value(&y);
                if fy <= f + 1e-4 * decrease {
                    accepted = Some((y, fy));
                    break;
                }
                alpha *= 0.5;
            }
            let Some((y, fy)) = accepted else {
                break;
            };
            let moved = y
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - b).amax())
                .fold(0.0, f64::max);
            let improvement = f - fy;
            x = y;
            f = fy;
            if moved < 1e-9 || improvement <= 1e-12 * (1.0 + f) {
                break;
            }
            alpha = (alpha * 2.0).min(1.0);
        }
        x
    }

    /// Dense feasibility check of the polyline `start, x...`.
    pub fn check(&self, x: &[Vec3]) -> Result<(), String> {
        let mut prev = self.start;
        for (h, p) in x.iter().enumerate() {
            let step = (p - prev).norm();
            if step > self.max_step * (1.0 + 1e-9) {
                return Err(format!("waypoint {} exceeds the velocity limit", h + 1));
            }
            if reachability_residual(p, &self.bounds) > 1e-9 {
                return Err(format!("waypoint {} leaves the workspace", h + 1));
            }
            let samples = ((step / (0.5 * self.ctx.field.voxel)).ceil() as usize).max(1);
            for s in 1..=samples {
                let q = prev + (p - prev) * (s as f64 / samples as f64);
                let d = self.ctx.field.query(&q).distance;
                if d < self.margin - 1e-9 {
                    return Err(format!("segment {} comes within {d:.4} m of the scene", h + 1));
                }
            }
            if !self.constraints.is_empty() {
                let worst = self
                    .constraints
                    .values(&[*p])
                    .map_err(|e| e.to_string())?
                    .into_iter()
                    .fold(f64::NEG_INFINITY, f64::max);
                if worst > self.tol {
                    return Err(format!("waypoint {} violates a path constraint by {worst:.4}", h + 1));
                }
            }
            prev = *p;
        }
        Ok(())
    }
}

/// Points spaced `step` apart along a polyline, `n` of them, padded with the endpoint.
fn walk(polyline: &[Vec3], step: f64, n: usize) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(n);
    let mut seg = 0;
    let mut cur = polyline[0];
    while out.len() < n {
        let mut budget = step;
        while budget > 0.0 && seg + 1 < polyline.len() {
            let target = polyline[seg + 1];
            let d = (target - cur).norm();
            if d <= budget {
                budget -= d;
                cur = target;
                seg += 1;
            } else {
                cur += (target - cur) * (budget / d);
                budget = 0.0;
            }
        }
        out.push(cur);
    }
    out
}

/// Plans `H + 1` poses from the start toward the goal. Orientation follows the
/// shortest arc at the rotation limit.
pub fn solve_path(ctx: &SolverContext, problem: &PathProblem) -> Result<Vec<Pose>, SolverError> {
    let base = PathObjective::new(ctx, problem)?;
    let mut last_err = String::from("no candidate");
    for attempt in 0..2 {
        let mut obj = base.clone();
        if attempt > 0 {
            let w = &mut obj.weights;
            w.collision *= 10.0;
            w.reach *= 10.0;
            w.constraint *= 10.0;
        }
        let straight = obj.straight_line();
        let mut inits = vec![straight.clone()];
        if obj.check(&straight).is_err() {
            inits.push(obj.detour());
        }
        let mut best: Option<(f64, Vec<Vec3>)> = None;
        for init in inits {
            let x = obj.minimize(init, ctx.config.max_iterations);
            match obj.check(&x) {
                Ok(()) => {
                    let f = obj.value(&x);
                    if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
                        best = Some((f, x));
                    }
                }
                Err(e) => last_err = e,
            }
        }
        if let Some((_, x)) = best {
            let mut poses = Vec::with_capacity(x.len() + 1);
            poses.push(problem.start);
            let mut q = problem.start.orientation;
            for p in x {
                q = slerp_limited(&q, &problem.goal.orientation, ctx.workspace.max_rotation);
                poses.push(Pose::new(p, q));
            }
            return Ok(poses);
        }
    }
    Err(SolverError::Infeasible(last_err))
}
