//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chordgraph::executor::{Strategy, TraceKind};
use chordgraph::geometry::{vec3, Aabb, Pose, Vec3};
use chordgraph::graph::{filter_forward_moving, Edge, EdgeKind, Node, NodeKind, TaskGraph};
use chordgraph::features::FeatureVector;
use chordgraph::harness::{self, CellMetrics, ExperimentConfig, PoseRandomization, TrialSpec};
use chordgraph::monitors::{update_monitor, MonitorState};
use chordgraph::planner::{shipped_task, shipped_tasks};
use chordgraph::simworld::{Arm, DisturbanceModel, EventTime, Injection, ScheduledEvent};
use chordgraph::solvers::{solve_path, CollisionField, PathObjective, PathProblem, SolverConfig, SolverContext, WorkspaceModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const JITTER: PoseRandomization = PoseRandomization {
    position: 0.02,
    yaw: 0.2,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- filter

fn node(id: String, kind: NodeKind) -> Node {
    Node {
        id,
        kind,
        sub_goals: vec![],
        gripper_intent: BTreeMap::new(),
    }
}

fn edge(id: String, from: &str, to: &str, kind: EdgeKind, w: f64) -> Edge {
    Edge {
        id,
        from: from.into(),
        to: to.into(),
        kind,
        path_constraints: vec![],
        failure_modes: vec![],
        program: vec![],
        weight: Some(w),
    }
}

fn random_weight(rng: &mut ChaCha8Rng) -> f64 {
    // integer weights make equal-cost ties common
    if rng.random_bool(0.7) {
        rng.random_range(1..=6) as f64
    } else {
        rng.random_range(0.5..6.0)
    }
}

/// Random augmented graph with at most 8 nodes and 16 edges.
fn random_augmented(rng: &mut ChaCha8Rng) -> TaskGraph {
    let n_nom = rng.random_range(2..=6usize);
    let n_rec = rng.random_range(1..=(8 - n_nom).min(3));
    let nominal: Vec<String> = (0..n_nom).map(|i| format!("n{i}")).collect();
    let terminal = nominal[n_nom - 1].clone();
    let mut nodes: Vec<Node> = nominal
        .iter()
        .map(|id| node(id.clone(), if *id == terminal { NodeKind::Terminal } else { NodeKind::Nominal }))
        .collect();
    let mut edges = Vec::new();
    let mut failure_contexts = BTreeMap::new();
    let mut merge_candidates = BTreeMap::new();
    let budget = 16;
    let n_nom_edges = rng.random_range(1..=8usize);
    for i in 0..n_nom_edges {
        let from = &nominal[rng.random_range(0..n_nom - 1)];
        let to = &nominal[rng.random_range(0..n_nom)];
        if from != to {
            edges.push(edge(format!("e{i}"), from, to, EdgeKind::Nominal, random_weight(rng)));
        }
    }
    for r in 0..n_rec {
        if edges.len() + 2 > budget {
            break;
        }
        let id = format!("r{r}");
        let fail = nominal[rng.random_range(0..n_nom - 1)].clone();
        nodes.push(node(id.clone(), NodeKind::Recovery));
        edges.push(edge(format!("in-{id}"), &fail, &id, EdgeKind::Recovery, random_weight(rng)));
        let mut targets = Vec::new();
        for m in 0..rng.random_range(1..=3usize) {
            if edges.len() >= budget {
                break;
            }
            let t = nominal[rng.random_range(0..n_nom)].clone();
            if targets.contains(&t) {
                continue;
            }
            edges.push(edge(format!("out-{id}-{m}"), &id, &t, EdgeKind::Recovery, random_weight(rng)));
            targets.push(t);
        }
        failure_contexts.insert(id.clone(), fail);
        merge_candidates.insert(id, targets);
    }
    for d in 0..rng.random_range(0..=2usize) {
        if edges.len() >= budget {
            break;
        }
        let from = &nominal[rng.random_range(0..n_nom - 1)];
        let to = &nominal[rng.random_range(0..n_nom)];
        if from != to {
            edges.push(edge(format!("direct-{d}"), from, to, EdgeKind::Recovery, random_weight(rng)));
        }
    }
    TaskGraph {
        nodes,
        edges,
        start: nominal[0].clone(),
        terminal,
        merge_candidates,
        failure_contexts,
    }
}

/// Cheapest cost to `target` over every simple directed path.
fn enumerate_cost(g: &TaskGraph, from: &str, target: &str) -> Option<f64> {
    fn walk(g: &TaskGraph, at: &str, target: &str, seen: &mut Vec<String>, cost: f64, best: &mut Option<f64>) {
        if at == target {
            *best = Some(best.map_or(cost, |b: f64| b.min(cost)));
            return;
        }
        for e in g.edges.iter().filter(|e| e.from == at) {
            if seen.iter().any(|s| *s == e.to) {
                continue;
            }
            seen.push(e.to.clone());
            walk(g, &e.to, target, seen, cost + e.weight.unwrap(), best);
            seen.pop();
        }
    }
    let mut best = None;
    walk(g, from, target, &mut vec![from.to_string()], 0.0, &mut best);
    best
}

/// Edge ids a correct filter keeps, judged from enumerated costs.
fn expected_edges(g: &TaskGraph) -> (BTreeSet<String>, BTreeSet<String>) {
    let cost = |n: &str| enumerate_cost(g, n, &g.terminal);
    let no_worse = |candidate: Option<f64>, reference: Option<f64>| match (candidate, reference) {
        (None, _) => false,
        (Some(_), None) => true,
        (Some(c), Some(r)) => c <= r + 1e-9,
    };
    let mut kept_nodes = BTreeSet::new();
    let mut kept_edges = BTreeSet::new();
    for e in g.edges.iter().filter(|e| !e.is_recovery()) {
        kept_edges.insert(e.id.clone());
    }
    for (r, fail) in &g.failure_contexts {
        let df = cost(fail);
        if !no_worse(cost(r), df) {
            continue;
        }
        kept_nodes.insert(r.clone());
        for e in &g.edges {
            if e.to == *r || (e.from == *r && no_worse(cost(&e.to), df)) {
                kept_edges.insert(e.id.clone());
            }
        }
    }
    for e in g.edges.iter().filter(|e| e.is_recovery()) {
        let touches = g.failure_contexts.contains_key(&e.from) || g.failure_contexts.contains_key(&e.to);
        if !touches && no_worse(cost(&e.to), cost(&e.from)) {
            kept_edges.insert(e.id.clone());
        }
    }
    (kept_nodes, kept_edges)
}

fn filter_oracle() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xF1_17E5);
    let mut mismatches = 0;
    let mut rejected = 0;
    let mut first = None;
    for i in 0..1000 {
        let g = random_augmented(&mut rng);
        assert!(g.nodes.len() <= 8 && g.edges.len() <= 16);
        let (filtered, _) = filter_forward_moving(&g);
        let got_nodes: BTreeSet<String> = filtered.recovery_nodes().map(|n| n.id.clone()).collect();
        let got_edges: BTreeSet<String> = filtered.edges.iter().map(|e| e.id.clone()).collect();
        let (want_nodes, want_edges) = expected_edges(&g);
        rejected += g.failure_contexts.len() - want_nodes.len();
        if got_nodes != want_nodes || got_edges != want_edges {
            mismatches += 1;
            first.get_or_insert(i);
        }
    }
    let elapsed = t0.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!(
            "1000 graphs, {rejected} recovery nodes rejected by the oracle, {mismatches} mismatches{}, {:.2} s (limit 10 s)",
            first.map_or(String::new(), |i| format!(" (first at graph {i})")),
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------- monitors

/// Trigger ticks by direct scan: after each firing the count restarts.
fn scan_triggers(seq: &[bool], k: usize) -> Vec<usize> {
    let mut ticks = Vec::new();
    let mut start = 0;
    let mut t = 0;
    while t < seq.len() {
        if t + 1 >= start + k && seq[t + 1 - k..=t].iter().all(|v| *v) {
            ticks.push(t);
            start = t + 1;
        }
        t += 1;
    }
    ticks
}

fn monitor_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x307_1703);
    let mut mismatches = 0;
    let mut fired = 0;
    for _ in 0..10_000 {
        let len = rng.random_range(1..=100usize);
        let k = rng.random_range(1..=10usize);
        let eps = if rng.random_bool(0.5) { 0.0 } else { 0.05 };
        let density = rng.random_range(0.3..1.0);
        let seq: Vec<bool> = (0..len).map(|_| rng.random_bool(density)).collect();
        let mut m = MonitorState::new("f", eps, k);
        let mut ticks = Vec::new();
        for (t, v) in seq.iter().enumerate() {
            let f = if *v {
                eps + rng.random_range(1e-9..1.0)
            } else if rng.random_bool(0.2) {
                eps
            } else {
                eps - rng.random_range(0.0..1.0)
            };
            if update_monitor(&mut m, f) {
                ticks.push(t);
            }
        }
        let want = scan_triggers(&seq, k);
        fired += usize::from(!want.is_empty());
        if ticks != want {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("10000 sequences ({fired} with a trigger), {mismatches} mismatches"),
    )
}

// ---------------------------------------------------------------- no recovery

/// Atomic actions on the nominal chain that begin while an object is held,
/// counted from the raw task document.
fn static_held_actions(task: &str) -> usize {
    let text = shipped_tasks().iter().find(|(n, _)| *n == task).unwrap().1;
    let doc: serde_json::Value = serde_json::from_str(text).unwrap();
    let edges = doc["edges"].as_array().unwrap();
    let mut at = doc["start"].as_str().unwrap().to_string();
    let mut held = false;
    let mut count = 0;
    while let Some(e) = edges.iter().find(|e| e["from"] == at.as_str()) {
        for a in e["program"].as_array().unwrap() {
            let name = a["action"].as_str().unwrap();
            if held {
                count += 1;
            }
            match name {
                "grasp" => held = true,
                "place" | "open_gripper" => held = false,
                _ => {}
            }
        }
        at = e["to"].as_str().unwrap().to_string();
    }
    count
}

fn no_recovery_analytic() -> Outcome {
    let task = shipped_task("single-arm-pour").unwrap();
    let solver = task.solver_context();
    let dry = harness::run_trial(&TrialSpec {
        task: &task,
        solver: &solver,
        strategy: Strategy::NoRecovery,
        disturbance: &DisturbanceModel::Bernoulli { p: 0.0 },
        seed: 0,
        randomization: PoseRandomization::default(),
        trace: false,
    })
    .unwrap()
    .0;
    let n = dry.eligible_draws as i32;
    let n_static = static_held_actions("single-arm-pour") as i32;
    let cfg = ExperimentConfig {
        tasks: vec!["single-arm-pour".into()],
        strategies: vec![Strategy::NoRecovery],
        drop_probs: vec![0.1],
        trials: 10_000,
        base_seed: 0,
        randomization: PoseRandomization::default(),
        metrics_out: None,
        trace_dir: None,
        parallel: true,
        noise: None,
        solver: None,
    };
    let t0 = Instant::now();
    let out = harness::run_experiment(&cfg).unwrap();
    let elapsed = t0.elapsed();
    let rate = out.table.rows[0].success_rate;
    let expected = 100.0 * 0.9f64.powi(n);
    let pass = n == n_static && (rate - expected).abs() <= 3.0 && elapsed < Duration::from_secs(120);
    outcome(
        pass,
        format!(
            "n = {n} held actions (static count {n_static}), success {rate:.2}% vs {expected:.2}% (tolerance 3), {:.1} s (limit 120 s)",
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------- recovery efficacy

fn config(task: &str, strategies: Vec<Strategy>, probs: Vec<f64>, trials: usize) -> ExperimentConfig {
    ExperimentConfig {
        tasks: vec![task.into()],
        strategies,
        drop_probs: probs,
        trials,
        base_seed: 0,
        randomization: JITTER,
        metrics_out: None,
        trace_dir: None,
        parallel: true,
        noise: None,
        solver: None,
    }
}

fn row<'a>(rows: &'a [CellMetrics], p: f64, s: Strategy) -> &'a CellMetrics {
    rows.iter().find(|r| r.p == p && r.strategy == s).unwrap()
}

fn recovery_efficacy() -> Outcome {
    let cfg = config(
        "single-arm-pour",
        vec![Strategy::AgentChord, Strategy::NoRecovery],
        vec![0.0, 0.1],
        200,
    );
    let out = harness::run_experiment(&cfg).unwrap();
    let nominal = row(&out.table.rows, 0.0, Strategy::AgentChord);
    let ac = row(&out.table.rows, 0.1, Strategy::AgentChord);
    let nr = row(&out.table.rows, 0.1, Strategy::NoRecovery);
    let ratio = ac.mean_steps / nominal.mean_steps;
    let pass = ac.success_rate >= 95.0 && ac.success_rate - nr.success_rate >= 30.0 && ratio <= 1.4;
    outcome(
        pass,
        format!(
            "agentchord {:.1}%, none {:.1}% (gap {:.1}, need 30), steps {:.1} vs nominal {:.1} (ratio {ratio:.3}, limit 1.4)",
            ac.success_rate,
            nr.success_rate,
            ac.success_rate - nr.success_rate,
            ac.mean_steps,
            nominal.mean_steps
        ),
    )
}

// ---------------------------------------------------------------- strategy ordering

fn strategy_ordering() -> Outcome {
    let t0 = Instant::now();
    let cfg = config("dual-arm-pour", vec![Strategy::AgentChord, Strategy::Backtrack], vec![0.1], 200);
    let out = harness::run_experiment(&cfg).unwrap();
    let elapsed = t0.elapsed();
    let ac = row(&out.table.rows, 0.1, Strategy::AgentChord);
    let bt = row(&out.table.rows, 0.1, Strategy::Backtrack);
    let ac_time_se = CellMetrics::time_stderr(&out.cell("dual-arm-pour", 0.1, Strategy::AgentChord));
    let bt_time_se = CellMetrics::time_stderr(&out.cell("dual-arm-pour", 0.1, Strategy::Backtrack));
    let success_ok = ac.success_rate - ac.stderr > bt.success_rate + bt.stderr;
    let time_ok = ac.mean_time_s + ac_time_se < bt.mean_time_s - bt_time_se;
    outcome(
        success_ok && time_ok && elapsed < Duration::from_secs(300),
        format!(
            "success {:.1}±{:.1} vs {:.1}±{:.1}, time {:.2}±{:.2} s vs {:.2}±{:.2} s (agentchord vs backtrack), {:.1} s (limit 300 s)",
            ac.success_rate,
            ac.stderr,
            bt.success_rate,
            bt.stderr,
            ac.mean_time_s,
            ac_time_se,
            bt.mean_time_s,
            bt_time_se,
            secs(elapsed)
        ),
    )
}

// ---------------------------------------------------------------- trigger latency

/// Checks one traced episode; returns the switch step or a description of the problem.
fn check_latency(seed: u64, drop_step: u64) -> Result<u64, String> {
    let task = shipped_task("single-arm-pour").unwrap();
    let solver = task.solver_context();
    let disturbance = DisturbanceModel::Scheduled {
        events: vec![ScheduledEvent {
            at: EventTime::AtStep { step: drop_step },
            event: Injection::Drop { object: None },
        }],
    };
    let (_, trace) = harness::run_trial(&TrialSpec {
        task: &task,
        solver: &solver,
        strategy: Strategy::AgentChord,
        disturbance: &disturbance,
        seed,
        randomization: PoseRandomization::default(),
        trace: true,
    })?;
    let ev = &trace.events;
    let (ti, edge, failure) = ev
        .iter()
        .enumerate()
        .find_map(|(i, e)| match &e.kind {
            TraceKind::Trigger { edge, failure, .. } => Some((i, edge.clone(), failure.clone())),
            _ => None,
        })
        .ok_or("no trigger")?;
    let trigger_step = ev[ti].step;
    let k = task
        .augmented
        .edge(&edge)
        .and_then(|e| e.failure_modes.iter().find(|m| m.id == failure))
        .map(|m| m.k)
        .ok_or("unknown failure mode")?;
    if k != 3 {
        return Err(format!("failure mode {failure} has k = {k}"));
    }
    let evals: Vec<(u64, bool)> = ev[..ti]
        .iter()
        .filter_map(|e| match &e.kind {
            TraceKind::MonitorEval {
                edge: me, failure: mf, violated, ..
            } if *me == edge && *mf == failure => Some((e.step, *violated)),
            _ => None,
        })
        .collect();
    if evals.len() < k {
        return Err("fewer than k evaluations before the trigger".into());
    }
    let tail = &evals[evals.len() - k..];
    let steps: Vec<u64> = tail.iter().map(|(s, _)| *s).collect();
    if !tail.iter().all(|(_, v)| *v) || steps.windows(2).any(|w| w[1] != w[0] + 1) || steps[k - 1] != trigger_step {
        return Err(format!("last evaluations before the trigger: {tail:?}, trigger at {trigger_step}"));
    }
    if evals.len() > k && evals[evals.len() - k - 1].1 {
        return Err("more than k consecutive violations before the trigger".into());
    }
    let first_violation = steps[0];
    let switch = ev[ti..]
        .iter()
        .find(|e| matches!(e.kind, TraceKind::EdgeSwitch { .. }))
        .ok_or("no edge_switch after the trigger")?;
    if switch.step != trigger_step {
        return Err(format!("edge_switch at {} but 3rd violation at {trigger_step}", switch.step));
    }
    let planner_between = ev
        .iter()
        .any(|e| e.step >= first_violation && e.step <= switch.step && matches!(e.kind, TraceKind::PlannerCall { .. }));
    if planner_between {
        return Err("planner_call between first violation and switch".into());
    }
    Ok(switch.step)
}

fn trigger_latency() -> Outcome {
    let mut failures = Vec::new();
    for seed in 0..100u64 {
        // the bottle is held from roughly step 45 to step 200
        let drop_step = 55 + (seed * 37) % 140;
        if let Err(e) = check_latency(seed, drop_step) {
            failures.push(format!("seed {seed} drop@{drop_step}: {e}"));
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "100 seeds, {} failures{}",
            failures.len(),
            failures.first().map_or(String::new(), |f| format!(" (first: {f})"))
        ),
    )
}

// ---------------------------------------------------------------- solvers

fn solver_context(obstacles: Vec<Aabb>) -> SolverContext {
    let ws = Aabb::new(vec3([0.0, -0.4, 0.02]), vec3([0.8, 0.4, 0.6]));
    let field = CollisionField::from_fn(
        &Aabb::new(vec3([-0.05, -0.45, -0.05]), vec3([0.85, 0.45, 0.65])),
        0.01,
        0.01,
        |p| obstacles.iter().map(|o| o.signed_distance(p)).fold(p.z, f64::min),
    );
    let config = SolverConfig::default();
    SolverContext {
        workspace: WorkspaceModel {
            boxes: BTreeMap::from([(Arm::Right, ws)]),
            max_step: config.max_step,
            max_rotation: config.max_rotation,
            homes: BTreeMap::new(),
        },
        obstacle_tops: obstacles.iter().map(|o| o.max.z).collect(),
        config,
        field: Arc::new(field),
    }
}

fn path_problem<'a>(start: [f64; 3], goal: [f64; 3], z: &'a FeatureVector) -> PathProblem<'a> {
    PathProblem {
        arm: Arm::Right,
        start: Pose::from_position(vec3(start)),
        goal: Pose::from_position(vec3(goal)),
        constraints: &[],
        features: z,
        held: None,
    }
}

fn straight_line_check() -> Result<String, String> {
    let mut ctx = solver_context(vec![]);
    let z = FeatureVector::default();
    let (start, goal) = ([0.3, -0.05, 0.3], [0.42, 0.05, 0.25]);
    let distance = (vec3(goal) - vec3(start)).norm();
    let n = (distance / ctx.config.max_step).ceil() as usize;
    ctx.config.horizon = n + 5;
    let path = solve_path(&ctx, &path_problem(start, goal, &z)).map_err(|e| e.to_string())?;
    let tol = ctx.config.tol;
    let reached = path.iter().position(|p| (p.position - vec3(goal)).norm() <= tol);
    match reached {
        Some(i) if i == n => Ok(format!("goal within tol at step {i} = ceil({distance:.4}/{})", ctx.config.max_step)),
        other => Err(format!("goal reached at {other:?}, expected step {n}")),
    }
}

fn slab_check() -> Result<String, String> {
    let slab = Aabb::new(vec3([0.38, -0.3, 0.0]), vec3([0.42, 0.3, 0.25]));
    let ctx = solver_context(vec![slab]);
    let z = FeatureVector::default();
    let path = solve_path(&ctx, &path_problem([0.3, 0.0, 0.1], [0.5, 0.0, 0.1], &z)).map_err(|e| e.to_string())?;
    let margin = ctx.config.margin;
    let mut worst = f64::INFINITY;
    for w in path.windows(2) {
        for s in 0..=50 {
            let q = w[0].position + (w[1].position - w[0].position) * (s as f64 / 50.0);
            // exact distance, independent of the voxel field
            worst = worst.min(slab.signed_distance(&q).min(q.z));
        }
    }
    if worst >= margin - 1e-9 {
        Ok(format!("min clearance {worst:.4} m over {} waypoints (margin {margin})", path.len()))
    } else {
        Err(format!("clearance {worst:.4} m below margin {margin}"))
    }
}

fn off_lattice(rng: &mut ChaCha8Rng, field: &CollisionField, lo: f64, hi: f64, axis: usize) -> f64 {
    loop {
        let v: f64 = rng.random_range(lo..hi);
        let u = (v - field.origin[axis]) / field.voxel;
        if (u - u.round()).abs() > 1e-4 {
            return v;
        }
    }
}

fn gradient_check() -> Result<String, String> {
    let slab = Aabb::new(vec3([0.38, -0.3, 0.0]), vec3([0.42, 0.3, 0.25]));
    let ctx = solver_context(vec![slab]);
    let z = FeatureVector::default();
    let problem = path_problem([0.3, 0.0, 0.1], [0.5, 0.0, 0.1], &z);
    let obj = PathObjective::new(&ctx, &problem).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6_4AD);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x: Vec<Vec3> = (0..obj.horizon)
            .map(|_| {
                Vec3::new(
                    off_lattice(&mut rng, &ctx.field, 0.3, 0.5, 0),
                    off_lattice(&mut rng, &ctx.field, -0.1, 0.1, 1),
                    off_lattice(&mut rng, &ctx.field, 0.005, 0.3, 2),
                )
            })
            .collect();
        let g = obj.gradient(&x);
        let eps = 1e-7;
        for h in 0..x.len() {
            for a in 0..3 {
                let (mut hi, mut lo) = (x.clone(), x.clone());
                hi[h][a] += eps;
                lo[h][a] -= eps;
                let fd = (obj.value(&hi) - obj.value(&lo)) / (2.0 * eps);
                worst = worst.max((fd - g[h][a]).abs() / fd.abs().max(1.0));
            }
        }
    }
    if worst <= 1e-4 {
        Ok(format!("max relative gradient error {worst:.2e} at 100 points"))
    } else {
        Err(format!("relative gradient error {worst:.2e} exceeds 1e-4"))
    }
}

fn solver_checks() -> Outcome {
    let parts = [
        ("straight line", straight_line_check()),
        ("slab", slab_check()),
        ("gradient", gradient_check()),
    ];
    let pass = parts.iter().all(|(_, r)| r.is_ok());
    let detail = parts
        .iter()
        .map(|(name, r)| match r {
            Ok(m) => format!("{name}: {m}"),
            Err(m) => format!("{name}: FAILED {m}"),
        })
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, detail)
}

// ---------------------------------------------------------------- determinism

fn simulate_bytes(seed: u64) -> (String, String) {
    let task = shipped_task("dual-arm-pour").unwrap();
    let solver = task.solver_context();
    let (result, trace) = harness::run_trial(&TrialSpec {
        task: &task,
        solver: &solver,
        strategy: Strategy::AgentChord,
        disturbance: &DisturbanceModel::Bernoulli { p: 0.2 },
        seed,
        randomization: JITTER,
        trace: true,
    })
    .unwrap();
    (serde_json::to_string(&result).unwrap(), trace.to_ndjson())
}

fn experiment_bytes(dir: &std::path::Path) -> (Vec<u8>, Vec<(String, Vec<u8>)>) {
    let mut cfg = config(
        "handover-block",
        Strategy::ALL.to_vec(),
        vec![0.0, 0.15],
        6,
    );
    cfg.metrics_out = Some(dir.join("metrics.csv"));
    cfg.trace_dir = Some(dir.join("traces"));
    harness::run_experiment(&cfg).unwrap();
    let mut files: Vec<_> = std::fs::read_dir(dir.join("traces"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    let traces = files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    (std::fs::read(dir.join("metrics.csv")).unwrap(), traces)
}

fn determinism() -> Outcome {
    let sims: Vec<_> = (0..3).map(|_| simulate_bytes(11)).collect();
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let exps: Vec<_> = dirs.iter().map(|d| experiment_bytes(d.path())).collect();
    let sim_ok = sims[0] == sims[1] && sims[1] == sims[2];
    let exp_ok = exps[0] == exps[1] && exps[1] == exps[2];
    let different_seed = simulate_bytes(12) != sims[0];
    outcome(
        sim_ok && exp_ok && different_seed,
        format!(
            "simulate trace {} bytes identical across 3 runs: {sim_ok}; experiment csv + {} traces identical across 3 runs: {exp_ok}; other seed differs: {different_seed}",
            sims[0].1.len(),
            exps[0].1.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("forward-moving filter vs path enumeration", filter_oracle),
        ("monitor trigger tick vs direct scan", monitor_exactness),
        ("no-recovery success vs (1-p)^n", no_recovery_analytic),
        ("recovery efficacy, single-arm pour", recovery_efficacy),
        ("strategy ordering, dual-arm pour", strategy_ordering),
        ("trigger latency under scheduled drops", trigger_latency),
        ("solver checks", solver_checks),
        ("determinism of traces and metrics", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let o = check();
        failed += usize::from(!o.pass);
        println!(
            "{} [{}] {name}: {} ({:.1} s)",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            secs(t0.elapsed())
        );
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
