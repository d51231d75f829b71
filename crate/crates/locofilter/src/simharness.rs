//! Closed-loop episode runner over declarative scenes, with post-hoc safety
//! verification by exact (non-smooth) geometry only.

use crate::geometry::{sat_margin, Cuboid};
use crate::model::{
    default_legs, integrate, joint_state, world_foot_position, EeState, InputVector, LegGeometry,
    RobotInput, RobotState, StateVector, N_INPUTS, N_LEGS, N_STATES,
};
use crate::planner::{CommandScript, Plane, Planner, PlannerConfig};
use crate::safety::{
    body_cuboid, build_body_collision_rows, build_foot_height_rows, build_foothold_rows,
    build_joint_limit_rows, build_stability_rows, build_toe_collision_rows, ConstraintKind,
    EcbfRow, QpProblem, QpStatus, SafetyConfig, SafetyFilter,
};
use crate::{Error, Result};
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::time::Instant;

/// Obstacle description as it appears in scene files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub center: Vector3<f64>,
    pub half_extents: Vector3<f64>,
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub pitch: f64,
}

/// Stairs generator: `count` steps rising by `rise` with tread depth `run`,
/// starting at `start_x` and spanning `width` in y.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StairSpec {
    pub count: usize,
    pub rise: f64,
    pub run: f64,
    #[serde(default = "default_stair_width")]
    pub width: f64,
    #[serde(default)]
    pub start_x: f64,
}

fn default_stair_width() -> f64 {
    4.0
}

/// On-disk scene schema. Units are meters and radians.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    #[serde(default)]
    pub planes: Vec<Plane>,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
    #[serde(default)]
    pub stairs: Vec<StairSpec>,
}

/// Fully expanded and validated scene.
#[derive(Clone, Debug, Default)]
pub struct Scene {
    pub planes: Vec<Plane>,
    pub obstacles: Vec<Cuboid>,
}

fn validate_polygon(i: usize, poly: &[Vector2<f64>]) -> Result<()> {
    if poly.len() < 3 {
        return Err(Error::Schema(format!(
            "planes[{i}].polygon: needs at least 3 vertices"
        )));
    }
    if poly.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return Err(Error::Schema(format!(
            "planes[{i}].polygon: non-finite vertex"
        )));
    }
    let n = poly.len();
    let mut area2 = 0.0;
    for k in 0..n {
        let a = poly[k];
        let b = poly[(k + 1) % n];
        let c = poly[(k + 2) % n];
        let cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
        if cross < -1e-9 {
            return Err(Error::Schema(format!(
                "planes[{i}].polygon: not convex counter-clockwise at vertex {k}"
            )));
        }
        area2 += a.x * b.y - b.x * a.y;
    }
    if area2 <= 1e-12 {
        return Err(Error::Schema(format!(
            "planes[{i}].polygon: zero or negative area"
        )));
    }
    Ok(())
}

/// Expand one stairs generator into treads plus riser-edge cuboids. The
/// ground plane before the first riser and the top tread are extended so the
/// robot has room to approach and leave.
pub fn expand_stairs(spec: &StairSpec, first_id: u32) -> Result<(Vec<Plane>, Vec<Cuboid>)> {
    if spec.count == 0 || !(spec.rise > 0.0) || !(spec.run > 0.0) || !(spec.width > 0.0) {
        return Err(Error::Schema(
            "stairs: count, rise, run, and width must be positive".into(),
        ));
    }
    let w = spec.width / 2.0;
    let x0 = spec.start_x;
    let rect = |xa: f64, xb: f64| {
        vec![
            Vector2::new(xa, -w),
            Vector2::new(xb, -w),
            Vector2::new(xb, w),
            Vector2::new(xa, w),
        ]
    };
    let mut planes = Vec::with_capacity(spec.count + 1);
    planes.push(Plane {
        id: first_id,
        height: 0.0,
        polygon: rect(x0 - 6.0, x0),
    });
    for k in 1..=spec.count {
        let xa = x0 + (k - 1) as f64 * spec.run;
        let xb = if k == spec.count {
            xa + spec.run + 6.0
        } else {
            xa + spec.run
        };
        planes.push(Plane {
            id: first_id + k as u32,
            height: k as f64 * spec.rise,
            polygon: rect(xa, xb),
        });
    }
    let mut cuboids = Vec::with_capacity(spec.count);
    for k in 1..=spec.count {
        let xk = x0 + (k - 1) as f64 * spec.run;
        cuboids.push(Cuboid::axis_aligned(
            Vector3::new(xk, 0.0, (k as f64 - 0.5) * spec.rise),
            Vector3::new(0.02, w, spec.rise / 2.0),
        )?);
    }
    Ok((planes, cuboids))
}

impl SceneFile {
    /// Validate and expand into a [`Scene`].
    pub fn build(&self) -> Result<Scene> {
        let mut scene = Scene::default();
        for (i, p) in self.planes.iter().enumerate() {
            validate_polygon(i, &p.polygon)?;
            if !p.height.is_finite() {
                return Err(Error::Schema(format!("planes[{i}].height: non-finite")));
            }
            scene.planes.push(p.clone());
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            let c = Cuboid::from_yaw_pitch(o.center, o.yaw, o.pitch, o.half_extents)
                .map_err(|e| Error::Schema(format!("obstacles[{i}]: {e}")))?;
            scene.obstacles.push(c);
        }
        for s in &self.stairs {
            let next_id = scene.planes.iter().map(|p| p.id + 1).max().unwrap_or(0);
            let (planes, cuboids) = expand_stairs(s, next_id)?;
            scene.planes.extend(planes);
            scene.obstacles.extend(cuboids);
        }
        let mut ids: Vec<u32> = scene.planes.iter().map(|p| p.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != scene.planes.len() {
            return Err(Error::Schema("planes: duplicate plane id".into()));
        }
        if scene.planes.is_empty() {
            return Err(Error::Schema("planes: scene has no planes".into()));
        }
        Ok(scene)
    }
}

/// Load and validate a scene file.
pub fn load_scene(path: &std::path::Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path)?;
    let file: SceneFile = serde_json::from_str(&text)?;
    file.build()
}

/// Per-constraint-kind enable flags for ablation runs.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub joint_limit: bool,
    pub body_collision: bool,
    pub toe_collision: bool,
    pub foothold: bool,
    pub foot_height: bool,
    pub stability: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            joint_limit: true,
            body_collision: true,
            toe_collision: true,
            foothold: true,
            foot_height: true,
            stability: true,
        }
    }
}

impl Toggles {
    pub fn all_off() -> Self {
        Self {
            joint_limit: false,
            body_collision: false,
            toe_collision: false,
            foothold: false,
            foot_height: false,
            stability: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub dt: f64,
    pub duration: f64,
    /// Initial origin pose.
    pub start_x: f64,
    pub start_y: f64,
    pub start_yaw: f64,
    pub safety: SafetyConfig,
    pub planner: PlannerConfig,
    pub toggles: Toggles,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            duration: 10.0,
            start_x: 0.0,
            start_y: 0.0,
            start_yaw: 0.0,
            safety: SafetyConfig::default(),
            planner: PlannerConfig::default(),
            toggles: Toggles::default(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= 0.01) {
            return Err(Error::InvalidParam("dt must be in (0, 0.01]".into()));
        }
        let steps = self.duration / self.dt;
        if !(steps > 0.0) || (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::InvalidParam(
                "duration must be an integral number of ticks".into(),
            ));
        }
        self.safety.validate()?;
        self.planner.validate()
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }
}

/// Constraint families in the order used by the per-kind log columns.
pub const KIND_ORDER: [ConstraintKind; 6] = [
    ConstraintKind::JointLimit,
    ConstraintKind::BodySsat,
    ConstraintKind::ToeSuperellipsoid,
    ConstraintKind::Foothold,
    ConstraintKind::FootHeight,
    ConstraintKind::Stability,
];

fn kind_slot(kind: ConstraintKind) -> usize {
    KIND_ORDER.iter().position(|&k| k == kind).unwrap()
}

/// One control tick of the episode log.
#[derive(Clone, Debug)]
pub struct TickLog {
    pub t: f64,
    pub state: StateVector,
    pub u_ref: InputVector,
    pub u: InputVector,
    /// Minimum margin per constraint kind; +inf where no row was built.
    pub h_min: [f64; 6],
    /// Most negative slack per kind; 0 where unused.
    pub slack_min: [f64; 6],
    pub rows: usize,
    pub assembly_us: f64,
    pub solve_us: f64,
    pub qp_failed: bool,
    pub exchanged: bool,
}

#[derive(Clone, Debug)]
pub struct EpisodeLog {
    pub dt: f64,
    pub ticks: Vec<TickLog>,
}

impl EpisodeLog {
    /// One CSV row per tick.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "t")?;
        for i in 0..N_STATES {
            write!(w, ",x{i}")?;
        }
        for i in 0..N_INPUTS {
            write!(w, ",uref{i}")?;
        }
        for i in 0..N_INPUTS {
            write!(w, ",u{i}")?;
        }
        for k in KIND_ORDER {
            write!(w, ",hmin_{k:?}")?;
        }
        for k in KIND_ORDER {
            write!(w, ",slack_{k:?}")?;
        }
        writeln!(w, ",rows,assembly_us,solve_us,qp_failed,exchanged")?;
        for tk in &self.ticks {
            write!(w, "{:.6}", tk.t)?;
            for v in tk.state.iter() {
                write!(w, ",{v:.9}")?;
            }
            for v in tk.u_ref.iter() {
                write!(w, ",{v:.9}")?;
            }
            for v in tk.u.iter() {
                write!(w, ",{v:.9}")?;
            }
            for v in tk.h_min {
                write!(w, ",{v:.9}")?;
            }
            for v in tk.slack_min {
                write!(w, ",{v:.9}")?;
            }
            writeln!(
                w,
                ",{},{:.3},{:.3},{},{}",
                tk.rows,
                tk.assembly_us,
                tk.solve_us,
                tk.qp_failed as u8,
                tk.exchanged as u8
            )?;
        }
        Ok(())
    }
}

/// Initial standing state on the plane under the start pose.
pub fn initial_state(scene: &Scene, cfg: &EpisodeConfig, legs: &[LegGeometry; N_LEGS]) -> RobotState {
    let mut x = RobotState::default();
    x.origin.p = Vector3::new(cfg.start_x, cfg.start_y, 0.0);
    x.origin.yaw = cfg.start_yaw;
    let here = Vector2::new(cfg.start_x, cfg.start_y);
    let ground = scene
        .planes
        .iter()
        .min_by(|a, b| {
            a.distance_xy(&here)
                .partial_cmp(&b.distance_xy(&here))
                .unwrap()
        })
        .map(|p| p.height)
        .unwrap_or(0.0);
    x.body.z = ground + cfg.planner.body_z;
    for g in legs {
        x.ee[g.leg.index()] = EeState {
            x: g.anchor.x,
            z: ground + g.wheel_radius,
            vx: 0.0,
            vz: 0.0,
        };
    }
    x
}

fn build_rows(
    x: &RobotState,
    scene: &Scene,
    legs: &[LegGeometry; N_LEGS],
    planner: &Planner,
    tick: &crate::planner::PlanTick,
    cfg: &EpisodeConfig,
) -> Vec<EcbfRow> {
    let mut rows = Vec::with_capacity(96);
    if cfg.toggles.joint_limit {
        rows.extend(build_joint_limit_rows(x, legs, &cfg.safety));
    }
    if cfg.toggles.body_collision {
        rows.extend(build_body_collision_rows(x, &scene.obstacles, &cfg.safety));
    }
    if cfg.toggles.toe_collision {
        rows.extend(build_toe_collision_rows(
            x,
            &scene.obstacles,
            legs,
            &tick.swing,
            &cfg.safety,
        ));
    }
    if cfg.toggles.foothold {
        let plan = planner.plan().unwrap();
        for li in 0..N_LEGS {
            if !tick.constrained[li] {
                continue;
            }
            let mut only = [false; N_LEGS];
            only[li] = true;
            rows.extend(build_foothold_rows(
                x,
                &plan.steps[li].region.halfspaces,
                legs,
                &only,
                &cfg.safety,
            ));
        }
    }
    if cfg.toggles.foot_height {
        rows.extend(build_foot_height_rows(x, &tick.floors, &cfg.safety));
    }
    if cfg.toggles.stability {
        rows.extend(build_stability_rows(x, legs, &cfg.safety));
    }
    rows
}

/// Run one closed-loop episode: planner reference, safety filter, RK4 plant.
/// A failed QP tick falls back to zero input and is flagged in the log.
pub fn run_episode(
    scene: &Scene,
    script: &CommandScript,
    cfg: &EpisodeConfig,
) -> Result<EpisodeLog> {
    cfg.validate()?;
    let legs = default_legs();
    let mut x = initial_state(scene, cfg, &legs);
    let mut planner = Planner::new(
        cfg.planner.clone(),
        legs,
        cfg.safety.input_limits,
        script.clone(),
        cfg.duration,
    )?;
    let mut filter = SafetyFilter::new();
    let mut log = EpisodeLog {
        dt: cfg.dt,
        ticks: Vec::with_capacity(cfg.steps()),
    };

    for step in 0..cfg.steps() {
        let t = step as f64 * cfg.dt;
        let t_assembly = Instant::now();
        let tick = planner.tick(t, &mut x, &scene.planes, &scene.obstacles)?;
        let rows = build_rows(&x, scene, &legs, &planner, &tick, cfg);
        let assembly_us = t_assembly.elapsed().as_secs_f64() * 1e6;

        let mut h_min = [f64::INFINITY; 6];
        for r in &rows {
            let s = kind_slot(r.key.kind);
            h_min[s] = h_min[s].min(r.h);
        }

        let problem = QpProblem::new(
            tick.u_ref.to_vector(),
            cfg.safety.w_u,
            rows,
            cfg.safety.input_limits,
        );
        let t_solve = Instant::now();
        let sol = filter.solve(&problem);
        let solve_us = t_solve.elapsed().as_secs_f64() * 1e6;

        let qp_failed = sol.status != QpStatus::Optimal || !sol.u.iter().all(|v| v.is_finite());
        let u = if qp_failed { InputVector::zeros() } else { sol.u };
        let mut slack_min = [0.0f64; 6];
        for (r, &s) in problem.rows.iter().zip(sol.slack.iter()) {
            let slot = kind_slot(r.key.kind);
            slack_min[slot] = slack_min[slot].min(s);
        }

        log.ticks.push(TickLog {
            t,
            state: x.to_vector(),
            u_ref: tick.u_ref.to_vector(),
            u,
            h_min,
            slack_min,
            rows: problem.rows.len(),
            assembly_us,
            solve_us,
            qp_failed,
            exchanged: tick.exchanged,
        });

        x = integrate(&x, &RobotInput::from_vector(&u), cfg.dt)?;
        if !x.is_finite() {
            return Err(Error::NonFinite("episode produced non-finite state"));
        }
    }
    Ok(log)
}

/// Post-hoc verification report, derived solely from the log and the scene
/// using exact geometry.
#[derive(Clone, Debug)]
pub struct SafetyReport {
    /// Minimum exact body SAT margin against each obstacle over all ticks.
    pub body_margin_per_obstacle: Vec<f64>,
    pub min_body_margin: f64,
    pub body_violations: usize,
    pub joint_violations: usize,
    pub min_joint_margin: f64,
    pub foothold_violations: usize,
    pub max_tick_us: f64,
    pub qp_failures: usize,
}

impl SafetyReport {
    pub fn violations(&self) -> usize {
        self.body_violations + self.joint_violations + self.foothold_violations
    }
}

impl std::fmt::Display for SafetyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "min_body_margin={:.4e} body_violations={} joint_violations={} \
             min_joint_margin={:.4e} foothold_violations={} qp_failures={} max_tick_us={:.1}",
            self.min_body_margin,
            self.body_violations,
            self.joint_violations,
            self.min_joint_margin,
            self.foothold_violations,
            self.qp_failures,
            self.max_tick_us
        )
    }
}

const VIOLATION_TOL: f64 = 1e-6;

/// Recompute exact margins over the whole log: body-vs-obstacle SAT at every
/// tick, joint ranges through the inverse kinematics, and horizontal plane
/// membership of every foot at each support switch.
pub fn verify_safety(log: &EpisodeLog, scene: &Scene, cfg: &EpisodeConfig) -> SafetyReport {
    let legs = default_legs();
    let mut report = SafetyReport {
        body_margin_per_obstacle: vec![f64::INFINITY; scene.obstacles.len()],
        min_body_margin: f64::INFINITY,
        body_violations: 0,
        joint_violations: 0,
        min_joint_margin: f64::INFINITY,
        foothold_violations: 0,
        max_tick_us: 0.0,
        qp_failures: 0,
    };
    for tk in &log.ticks {
        let x = RobotState::from_vector(&tk.state);
        let body = body_cuboid(&x, &cfg.safety.body_half_extents);
        let mut tick_min = f64::INFINITY;
        for (oi, obs) in scene.obstacles.iter().enumerate() {
            let m = sat_margin(&body, obs);
            report.body_margin_per_obstacle[oi] = report.body_margin_per_obstacle[oi].min(m);
            tick_min = tick_min.min(m);
        }
        report.min_body_margin = report.min_body_margin.min(tick_min);
        if tick_min < -VIOLATION_TOL {
            report.body_violations += 1;
        }

        for g in &legs {
            if let Ok(j) = joint_state(&x, g) {
                let m = (j.knee - g.knee_range.0)
                    .min(g.knee_range.1 - j.knee)
                    .min(j.hip - g.hip_range.0)
                    .min(g.hip_range.1 - j.hip);
                report.min_joint_margin = report.min_joint_margin.min(m);
                if m < -VIOLATION_TOL {
                    report.joint_violations += 1;
                }
            } else {
                report.joint_violations += 1;
            }
        }

        if tk.exchanged {
            // Feet must be on some plane at each support switch.
            for g in &legs {
                let w = world_foot_position(&x, g);
                let on_plane = scene.planes.iter().any(|p| {
                    p.distance_xy(&w.xy()) <= 1e-6
                        && (w.z - g.wheel_radius - p.height).abs() <= 0.03
                });
                if !on_plane {
                    report.foothold_violations += 1;
                }
            }
        }

        report.max_tick_us = report.max_tick_us.max(tk.assembly_us + tk.solve_us);
        report.qp_failures += tk.qp_failed as usize;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn flat_scene() -> Scene {
        SceneFile {
            planes: vec![Plane {
                id: 0,
                height: 0.0,
                polygon: vec![
                    Vector2::new(-5.0, -5.0),
                    Vector2::new(5.0, -5.0),
                    Vector2::new(5.0, 5.0),
                    Vector2::new(-5.0, 5.0),
                ],
            }],
            ..Default::default()
        }
        .build()
        .unwrap()
    }

    #[test]
    fn stairs_expand_to_planes_and_edge_cuboids() {
        let spec = StairSpec {
            count: 5,
            rise: 0.165,
            run: 0.35,
            width: 4.0,
            start_x: 0.0,
        };
        let (planes, cuboids) = expand_stairs(&spec, 0).unwrap();
        assert_eq!(planes.len(), 6);
        assert_eq!(cuboids.len(), 5);
        for (k, p) in planes.iter().enumerate() {
            assert_relative_eq!(p.height, k as f64 * 0.165, epsilon = 1e-12);
        }
        // Riser k spans vertically from tread k-1 to tread k at its front.
        for (k, c) in cuboids.iter().enumerate() {
            assert_relative_eq!(c.center.x, k as f64 * 0.35, epsilon = 1e-12);
            let top = c.center.z + c.half_extents.z;
            assert_relative_eq!(top, (k + 1) as f64 * 0.165, epsilon = 1e-12);
        }
        // Treads tile the x axis: tread k starts where riser k stands.
        for k in 1..=5usize {
            assert_relative_eq!(planes[k].polygon[0].x, (k - 1) as f64 * 0.35, epsilon = 1e-12);
        }
    }

    #[test]
    fn scene_loading_and_schema_errors() {
        let dir = std::env::temp_dir();
        let good = dir.join("locofilter_scene_good.json");
        std::fs::write(
            &good,
            r#"{"planes":[{"id":0,"height":0.0,"polygon":[[-5,-5],[5,-5],[5,5],[-5,5]]}]}"#,
        )
        .unwrap();
        let scene = load_scene(&good).unwrap();
        assert_eq!(scene.planes.len(), 1);
        assert!(scene.obstacles.is_empty());

        let stairs = dir.join("locofilter_scene_stairs.json");
        std::fs::write(&stairs, r#"{"stairs":[{"count":5,"rise":0.165,"run":0.35}]}"#).unwrap();
        let scene = load_scene(&stairs).unwrap();
        assert_eq!(scene.planes.len(), 6);
        assert_eq!(scene.obstacles.len(), 5);

        // Clockwise polygon is rejected with the field named.
        let bad = dir.join("locofilter_scene_bad.json");
        std::fs::write(
            &bad,
            r#"{"planes":[{"id":0,"height":0.0,"polygon":[[-5,-5],[-5,5],[5,5],[5,-5]]}]}"#,
        )
        .unwrap();
        let err = load_scene(&bad).unwrap_err().to_string();
        assert!(err.contains("planes[0].polygon"), "error was: {err}");

        // Unknown fields are schema violations too.
        let unk = dir.join("locofilter_scene_unknown.json");
        std::fs::write(&unk, r#"{"plane":[]}"#).unwrap();
        assert!(load_scene(&unk).is_err());

        assert!(load_scene(&dir.join("locofilter_does_not_exist.json")).is_err());
    }

    #[test]
    fn standing_episode_is_an_equilibrium() {
        let scene = flat_scene();
        let script = CommandScript::constant(0.0, 0.0);
        let cfg = EpisodeConfig {
            duration: 2.0,
            ..Default::default()
        };
        let log = run_episode(&scene, &script, &cfg).unwrap();
        assert_eq!(log.ticks.len(), 2000);
        let mut max_du = 0.0f64;
        for tk in &log.ticks {
            max_du = max_du.max((tk.u - tk.u_ref).amax());
            assert!(!tk.qp_failed);
        }
        assert!(max_du <= 1e-6, "filter modified the standing input: {max_du:.2e}");
        let last = RobotState::from_vector(&log.ticks.last().unwrap().state);
        assert!((last.body.z - 0.45).abs() < 1e-6);
        assert!(last.origin.p.xy().norm() < 1e-9);

        let report = verify_safety(&log, &scene, &cfg);
        assert_eq!(report.violations(), 0);
        assert_eq!(report.qp_failures, 0);
    }

    #[test]
    fn episodes_are_deterministic() {
        let scene = flat_scene();
        let script = CommandScript::constant(0.25, 0.1);
        let cfg = EpisodeConfig {
            duration: 1.0,
            ..Default::default()
        };
        let a = run_episode(&scene, &script, &cfg).unwrap();
        let b = run_episode(&scene, &script, &cfg).unwrap();
        assert_eq!(a.ticks.len(), b.ticks.len());
        for (x, y) in a.ticks.iter().zip(b.ticks.iter()) {
            // Bit-identical apart from the wall-clock timing fields.
            assert_eq!(x.state, y.state);
            assert_eq!(x.u_ref, y.u_ref);
            assert_eq!(x.u, y.u);
            assert_eq!(x.h_min, y.h_min);
            assert_eq!(x.qp_failed, y.qp_failed);
        }
    }

    #[test]
    fn verify_safety_flags_a_constructed_violation() {
        let mut scene = flat_scene();
        scene.obstacles.push(
            Cuboid::axis_aligned(Vector3::new(0.0, 0.0, 0.45), Vector3::new(0.3, 0.3, 0.3))
                .unwrap(),
        );
        let cfg = EpisodeConfig::default();
        let legs = default_legs();
        let x = initial_state(&scene, &cfg, &legs);
        let log = EpisodeLog {
            dt: 1e-3,
            ticks: vec![TickLog {
                t: 0.0,
                state: x.to_vector(),
                u_ref: InputVector::zeros(),
                u: InputVector::zeros(),
                h_min: [f64::INFINITY; 6],
                slack_min: [0.0; 6],
                rows: 0,
                assembly_us: 0.0,
                solve_us: 0.0,
                qp_failed: false,
                exchanged: false,
            }],
        };
        let report = verify_safety(&log, &scene, &cfg);
        assert!(report.min_body_margin < 0.0);
        assert_eq!(report.body_violations, 1);
    }

    #[test]
    fn csv_has_one_row_per_tick() {
        let scene = flat_scene();
        let script = CommandScript::constant(0.0, 0.0);
        let cfg = EpisodeConfig {
            duration: 0.05,
            ..Default::default()
        };
        let log = run_episode(&scene, &script, &cfg).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 50);
        let cols = lines[0].split(',').count();
        for l in &lines[1..] {
            assert_eq!(l.split(',').count(), cols);
        }
        assert!(lines[0].starts_with("t,x0"));
    }

    #[test]
    fn driving_episode_stays_safe_on_flat_ground() {
        let scene = flat_scene();
        let script = CommandScript::constant(0.3, 0.0);
        let cfg = EpisodeConfig {
            duration: 4.0,
            ..Default::default()
        };
        let log = run_episode(&scene, &script, &cfg).unwrap();
        let report = verify_safety(&log, &scene, &cfg);
        assert_eq!(report.violations(), 0, "report: {report:?}");
        let last = RobotState::from_vector(&log.ticks.last().unwrap().state);
        assert!(last.origin.p.x > 0.9, "only reached {:.2}", last.origin.p.x);
    }
}
