use nalgebra::{DMatrix, DVector};
use rand::Rng;
use std::collections::BTreeMap;

use crate::features::FeatureVector;
use crate::geometry::{Aabb, Pose, Vec3};
use crate::monitors::ConstraintSpec;
use crate::simworld::Arm;

use super::{reachability_residual, ConstraintEval, Mover, SolverContext, SolverError};

const PENALTY_SCHEDULE: [f64; 3] = [1e2, 1e4, 1e6];
const REFINED: usize = 4;

#[derive(Debug, Clone)]
pub struct SubgoalProblem<'a> {
    /// Arms whose keyframes are synthesized jointly.
    pub arms: Vec<Arm>,
    pub constraints: &'a [ConstraintSpec],
    pub features: &'a FeatureVector,
    /// Gripper poses at which `features` were extracted.
    pub current: BTreeMap<Arm, Pose>,
    pub held: BTreeMap<Arm, String>,
    /// Regularization target; defaults to the current pose.
    pub reference: BTreeMap<Arm, Pose>,
    /// Keyframe from a previous solve, for temporal consistency.
    pub previous: Option<BTreeMap<Arm, Pose>>,
}

struct Objective<'a> {
    ctx: &'a SolverContext,
    boxes: Vec<Aabb>,
    reference: Vec<Vec3>,
    previous: Option<Vec<Vec3>>,
    constraints: ConstraintEval<'a>,
    margin: f64,
    shift: f64,
}

impl Objective<'_> {
    fn split(x: &DVector<f64>) -> Vec<Vec3> {
        (0..x.len() / 3)
            .map(|i| Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]))
            .collect()
    }

    fn residuals(&self, x: &DVector<f64>, mu: f64) -> Vec<f64> {
        let w = &self.ctx.config.subgoal_weights;
        let ps = Self::split(x);
        let mut r = Vec::new();
        for (i, p) in ps.iter().enumerate() {
            let hinge = (self.margin - self.ctx.field.query(p).distance).max(0.0);
            r.push(w.collision.sqrt() * hinge);
            r.push(w.reach.sqrt() * reachability_residual(p, &self.boxes[i]));
            let d = p - self.reference[i];
            r.extend(d.iter().map(|v| w.regularization.sqrt() * v));
            if let Some(prev) = &self.previous {
                let d = p - prev[i];
                r.extend(d.iter().map(|v| w.consistency.sqrt() * v));
            }
        }
        if ps.len() == 2 {
            let [lo, hi] = self.ctx.config.bimanual_bounds;
            let d = (ps[0] - ps[1]).norm();
            r.push(w.bimanual.sqrt() * (lo - d).max(0.0));
            r.push(w.bimanual.sqrt() * (d - hi).max(0.0));
        }
        if let Ok(values) = self.constraints.values(&ps) {
            r.extend(values.iter().map(|c| mu.sqrt() * (c + self.shift).max(0.0)));
        }
        r
    }

    fn cost(&self, x: &DVector<f64>, mu: f64) -> f64 {
        self.residuals(x, mu).iter().map(|v| v * v).sum()
    }

    fn project(&self, x: &mut DVector<f64>) {
        for (i, b) in self.boxes.iter().enumerate() {
            let p = b.clamp(&Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]));
            x.fixed_rows_mut::<3>(3 * i).copy_from(&p);
        }
    }

    /// Projected Levenberg-Marquardt on the residual vector with a numerical Jacobian.
    fn refine(&self, mut x: DVector<f64>, mu: f64, iterations: usize) -> DVector<f64> {
        let n = x.len();
        let mut r = DVector::from_vec(self.residuals(&x, mu));
        let mut cost = r.norm_squared();
        let mut lambda = 1e-3;
        for _ in 0..iterations {
            let eps = 1e-7;
            let mut jac = DMatrix::zeros(r.len(), n);
            for j in 0..n {
                let mut hi = x.clone();
                let mut lo = x.clone();
                hi[j] += eps;
                lo[j] -= eps;
                let rh = self.residuals(&hi, mu);
                let rl = self.residuals(&lo, mu);
                for i in 0..r.len() {
                    jac[(i, j)] = (rh[i] - rl[i]) / (2.0 * eps);
                }
            }
            let jt = jac.transpose();
            let jtj = &jt * &jac;
            let g = &jt * &r;
            let mut improved = false;
            while lambda < 1e12 {
                let mut a = jtj.clone();
                for d in 0..n {
                    a[(d, d)] += lambda * (1.0 + jtj[(d, d)]);
                }
                let Some(step) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                    lambda *= 10.0;
                    continue;
                };
                let mut y = &x + &step;
                self.project(&mut y);
                let ry = DVector::from_vec(self.residuals(&y, mu));
                let cy = ry.norm_squared();
                if cy < cost {
                    let moved = (&y - &x).amax();
                    x = y;
                    r = ry;
                    cost = cy;
                    lambda = (lambda / 3.0).max(1e-12);
                    improved = moved > 1e-12;
                    break;
                }
                lambda *= 4.0;
            }
            if !improved {
                break;
            }
        }
        x
    }

    fn verify(&self, x: &DVector<f64>, tol: f64) -> Result<(), String> {
        let ps = Self::split(x);
        for (p, b) in ps.iter().zip(&self.boxes) {
            if reachability_residual(p, b) > 1e-9 {
                return Err("keyframe outside the workspace".into());
            }
        }
        let values = self.constraints.values(&ps).map_err(|e| e.to_string())?;
        match values.iter().copied().fold(f64::NEG_INFINITY, f64::max) {
            worst if worst > tol => Err(format!("constraint violated by {worst:.2e}")),
            _ => Ok(()),
        }
    }
}

/// Keyframe synthesis: uniform restarts over the workspace, the best few refined
/// under an increasing constraint penalty, then verified against `tol`.
pub fn solve_subgoal<R: Rng + ?Sized>(
    ctx: &SolverContext,
    problem: &SubgoalProblem,
    rng: &mut R,
) -> Result<BTreeMap<Arm, Pose>, SolverError> {
    if problem.arms.is_empty() {
        return Err(SolverError::InvalidProblem("no arms to solve for".into()));
    }
    let mut boxes = Vec::new();
    let mut reference = Vec::new();
    let mut movers = Vec::new();
    for arm in &problem.arms {
        boxes.push(*ctx.workspace.bounds(*arm)?);
        let current = problem
            .current
            .get(arm)
            .or_else(|| ctx.workspace.homes.get(arm))
            .copied()
            .ok_or_else(|| SolverError::InvalidProblem(format!("no current pose for arm {arm}")))?;
        reference.push(problem.reference.get(arm).unwrap_or(&current).position);
        movers.push(Mover {
            arm: *arm,
            held: problem.held.get(arm).cloned(),
            anchor: current.position,
        });
    }
    let anchors: Vec<Vec3> = movers.iter().map(|m| m.anchor).collect();
    let constraints = ConstraintEval::new(problem.constraints, problem.features, movers);
    constraints.values(&anchors)?;
    let previous = match &problem.previous {
        None => None,
        Some(prev) => Some(
            problem
                .arms
                .iter()
                .map(|a| prev.get(a).map(|p| p.position))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| SolverError::InvalidProblem("previous keyframe misses an arm".into()))?,
        ),
    };
    let tol = ctx.config.tol;
    let objective = Objective {
        ctx,
        boxes,
        reference,
        previous,
        constraints,
        margin: ctx.config.margin,
        shift: 0.5 * tol,
    };

    let pack = |ps: &[Vec3]| DVector::from_iterator(3 * ps.len(), ps.iter().flat_map(|p| [p.x, p.y, p.z]));
    let mut candidates = Vec::with_capacity(ctx.config.restarts + 2);
    for _ in 0..ctx.config.restarts {
        let ps: Vec<Vec3> = objective
            .boxes
            .iter()
            .map(|b| Vec3::from_fn(|i, _| rng.random_range(b.min[i]..=b.max[i])))
            .collect();
        candidates.push(pack(&ps));
    }
    candidates.push(pack(&objective.reference));
    if let Some(prev) = &objective.previous {
        candidates.push(pack(prev));
    }
    for c in candidates.iter_mut() {
        objective.project(c);
    }
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| (objective.cost(c, PENALTY_SCHEDULE[0]), i))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut last_err = String::from("no candidate");
    for &(_, i) in scored.iter().take(REFINED) {
        let mut x = candidates[i].clone();
        for mu in PENALTY_SCHEDULE {
            x = objective.refine(x, mu, ctx.config.max_iterations);
        }
        match objective.verify(&x, tol) {
            Ok(()) => {
                let c = objective.cost(&x, PENALTY_SCHEDULE[2]);
                if best.as_ref().is_none_or(|(bc, _)| c < *bc) {
                    best = Some((c, x));
                }
            }
            Err(e) => last_err = e,
        }
    }
    let (_, x) = best.ok_or(SolverError::Infeasible(last_err))?;
    Ok(problem
        .arms
        .iter()
        .zip(Objective::split(&x))
        .map(|(arm, p)| {
            let orientation = problem
                .reference
                .get(arm)
                .or_else(|| problem.current.get(arm))
                .map(|p| p.orientation)
                .unwrap_or_else(|| Pose::identity().orientation);
            (*arm, Pose::new(p, orientation))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureKey, FeatureValue};
    use crate::geometry::vec3;
    use crate::monitors::{eval_detector, Expr};
    use crate::solvers::{CollisionField, SolverConfig, WorkspaceModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn ctx() -> SolverContext {
        let ws = Aabb::new(vec3([0.2, -0.3, 0.02]), vec3([0.7, 0.3, 0.5]));
        let config = SolverConfig::default();
        SolverContext {
            workspace: WorkspaceModel {
                boxes: BTreeMap::from([(Arm::Right, ws), (Arm::Left, ws)]),
                max_step: config.max_step,
                max_rotation: config.max_rotation,
                homes: BTreeMap::from([
                    (Arm::Right, Pose::from_position(vec3([0.4, -0.2, 0.3]))),
                    (Arm::Left, Pose::from_position(vec3([0.4, 0.2, 0.3]))),
                ]),
            },
            field: Arc::new(CollisionField::from_fn(
                &Aabb::new(vec3([0.15, -0.35, -0.05]), vec3([0.75, 0.35, 0.55])),
                0.01,
                0.01,
                |p| p.z,
            )),
            obstacle_tops: vec![],
            config,
        }
    }

    fn expr(s: &str) -> ConstraintSpec {
        ConstraintSpec::Expr {
            expr: Expr::parse(s).unwrap(),
        }
    }

    fn problem<'a>(c: &'a [ConstraintSpec], z: &'a FeatureVector) -> SubgoalProblem<'a> {
        SubgoalProblem {
            arms: vec![Arm::Right],
            constraints: c,
            features: z,
            current: BTreeMap::from([(Arm::Right, Pose::from_position(vec3([0.4, -0.2, 0.3])))]),
            held: BTreeMap::new(),
            reference: BTreeMap::new(),
            previous: None,
        }
    }

    fn features() -> FeatureVector {
        let mut z = FeatureVector::default();
        z.insert(FeatureKey::GripperOrigin(Arm::Right), FeatureValue::vector(vec3([0.4, -0.2, 0.3])));
        z.insert(FeatureKey::Centroid("bottle".into()), FeatureValue::vector(vec3([0.5, 0.05, 0.1])));
        z
    }

    #[test]
    fn point_target_is_reached() {
        let c = [expr("norm(gripper_origin(right) - vec(0.45, 0.1, 0.2)) - 0.001")];
        let z = features();
        let out = solve_subgoal(&ctx(), &problem(&c, &z), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((out[&Arm::Right].position - vec3([0.45, 0.1, 0.2])).norm() <= 0.001 + 1e-3);
    }

    #[test]
    fn target_outside_workspace_is_infeasible() {
        let c = [expr("norm(gripper_origin(right) - vec(1.5, 0.0, 0.2)) - 0.001")];
        let z = features();
        let err = solve_subgoal(&ctx(), &problem(&c, &z), &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(err, Err(SolverError::Infeasible(_))));
    }

    #[test]
    fn pregrasp_above_cylinder() {
        let c = [
            expr("abs(z(gripper_origin(right)) - z(centroid(bottle)) - 0.1) - 0.001"),
            expr("norm(xy(gripper_origin(right) - centroid(bottle))) - 0.001"),
        ];
        let z = features();
        let out = solve_subgoal(&ctx(), &problem(&c, &z), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let p = out[&Arm::Right].position;
        assert!((p - vec3([0.5, 0.05, 0.2])).norm() < 2e-3, "{p:?}");
        let mut zz = z.clone();
        zz.insert(FeatureKey::GripperOrigin(Arm::Right), FeatureValue::vector(p));
        for con in &c {
            assert!(eval_detector(con, &zz).unwrap() <= 1e-3);
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let c = [expr("z(gripper_origin(right)) - 0.1")];
        let z = features();
        let a = solve_subgoal(&ctx(), &problem(&c, &z), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = solve_subgoal(&ctx(), &problem(&c, &z), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bimanual_distance_bounds() {
        let c = [expr("norm(gripper_origin(left) - gripper_origin(right)) - 2.0")];
        let mut z = features();
        z.insert(FeatureKey::GripperOrigin(Arm::Left), FeatureValue::vector(vec3([0.4, 0.2, 0.3])));
        let mut p = problem(&c, &z);
        p.arms = vec![Arm::Left, Arm::Right];
        p.current.insert(Arm::Left, Pose::from_position(vec3([0.4, 0.2, 0.3])));
        let out = solve_subgoal(&ctx(), &p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let d = (out[&Arm::Left].position - out[&Arm::Right].position).norm();
        assert!(d >= 0.1 - 1e-3 && d <= 1.0 + 1e-3);
    }
}
