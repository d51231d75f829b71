//! Reference motion generation: alternating-tripod gait schedule, footstep
//! targets from the velocity command, projection onto perceived planes, safe
//! convex foothold regions, a landing-synchronized yaw spline, and the
//! nominal input `u_ref` that the safety filter then corrects.

use crate::geometry::{convex_hull_halfspaces, convex_hull_points, Cuboid, HalfSpace2};
use crate::model::{
    world_body_position, world_foot_position, LegGeometry, LegId,
    RobotInput, RobotState, ALL_LEGS, N_LEGS,
};
use crate::safety::InputLimits;
use crate::{Error, Result};
use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// One entry of the velocity command script.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct VelocityCommand {
    pub t: f64,
    pub v: f64,
    pub omega: f64,
}

/// Timestamped velocity script, piecewise constant, holding the last entry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CommandScript {
    pub entries: Vec<VelocityCommand>,
}

impl CommandScript {
    pub fn new(entries: Vec<VelocityCommand>, v_max: f64, omega_max: f64) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Empty("command script has no entries"));
        }
        let mut prev = f64::NEG_INFINITY;
        for e in &entries {
            if !(e.t.is_finite() && e.t >= 0.0 && e.t > prev) {
                return Err(Error::InvalidParam(
                    "command timestamps must be non-negative and strictly increasing".into(),
                ));
            }
            if !(e.v.abs() <= v_max && e.omega.abs() <= omega_max) {
                return Err(Error::InvalidParam(format!(
                    "command at t={} exceeds limits |v|<={v_max}, |omega|<={omega_max}",
                    e.t
                )));
            }
            prev = e.t;
        }
        Ok(Self { entries })
    }

    pub fn constant(v: f64, omega: f64) -> Self {
        Self {
            entries: vec![VelocityCommand { t: 0.0, v, omega }],
        }
    }

    /// Command in effect at time `t`. Zero before the first entry.
    pub fn sample(&self, t: f64) -> (f64, f64) {
        let mut out = (0.0, 0.0);
        for e in &self.entries {
            if e.t > t {
                break;
            }
            out = (e.v, e.omega);
        }
        out
    }

    /// Integral of the commanded yaw rate from 0 to `t`.
    pub fn integrated_yaw(&self, t: f64) -> f64 {
        let mut yaw = 0.0;
        for (i, e) in self.entries.iter().enumerate() {
            if e.t >= t {
                break;
            }
            let end = self
                .entries
                .get(i + 1)
                .map(|n| n.t.min(t))
                .unwrap_or(t);
            yaw += e.omega * (end - e.t);
        }
        yaw
    }
}

/// Per-leg gait phase within a half cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LegPhase {
    Stance,
    SwingUp,
    SwingForward,
    FootLowering,
}

/// The two alternating support tripods.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tripod {
    A,
    B,
}

impl Tripod {
    pub const fn legs(self) -> [LegId; 3] {
        match self {
            Tripod::A => [LegId::LR, LegId::RR, LegId::MF],
            Tripod::B => [LegId::MR, LegId::LF, LegId::RF],
        }
    }

    pub fn contains(self, leg: LegId) -> bool {
        self.legs().contains(&leg)
    }

    pub const fn other(self) -> Tripod {
        match self {
            Tripod::A => Tripod::B,
            Tripod::B => Tripod::A,
        }
    }
}

/// Gait state at one instant.
#[derive(Clone, Copy, Debug)]
pub struct GaitPhase {
    pub phases: [LegPhase; N_LEGS],
    /// Tripod currently in swing; the other is fully in stance.
    pub swinging: Tripod,
    /// Time into the current half cycle (s).
    pub clock: f64,
    /// Swing progress in [0, 1).
    pub swing_s: f64,
    /// Index of the current half cycle; a change marks a support switch and
    /// an origin-exchange event.
    pub half_index: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Full gait cycle (s); each tripod swings for half of it.
    pub cycle: f64,
    /// Swing apex clearance above the higher endpoint (m).
    pub apex: f64,
    /// Maximum horizontal snap distance when projecting a footstep onto a
    /// plane; beyond it the step is rejected and the leg holds.
    pub capture_distance: f64,
    /// Body height reference above the origin (m).
    pub body_z: f64,
    pub v_max: f64,
    pub omega_max: f64,
    pub kp_foot: f64,
    pub kd_foot: f64,
    pub kp_body: f64,
    pub kd_body: f64,
    pub kp_speed: f64,
    pub kp_yaw: f64,
    pub kd_yaw: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            cycle: 2.0,
            apex: 0.08,
            capture_distance: 0.3,
            body_z: 0.45,
            v_max: 1.0,
            omega_max: 1.5,
            kp_foot: 100.0,
            kd_foot: 20.0,
            kp_body: 100.0,
            kd_body: 20.0,
            kp_speed: 20.0,
            kp_yaw: 40.0,
            kd_yaw: 12.0,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("cycle", self.cycle),
            ("apex", self.apex),
            ("capture_distance", self.capture_distance),
            ("body_z", self.body_z),
            ("v_max", self.v_max),
            ("omega_max", self.omega_max),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParam(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Deterministic alternating-tripod schedule. Tripod A swings first.
pub fn gait_schedule(t: f64, cfg: &PlannerConfig) -> GaitPhase {
    let half = cfg.cycle / 2.0;
    let half_index = (t / half).floor().max(0.0) as u64;
    let clock = t - half_index as f64 * half;
    let s = (clock / half).clamp(0.0, 1.0);
    let swinging = if half_index % 2 == 0 { Tripod::A } else { Tripod::B };
    let swing_phase = if s < 0.3 {
        LegPhase::SwingUp
    } else if s < 0.7 {
        LegPhase::SwingForward
    } else {
        LegPhase::FootLowering
    };
    let mut phases = [LegPhase::Stance; N_LEGS];
    for leg in swinging.legs() {
        phases[leg.index()] = swing_phase;
    }
    GaitPhase {
        phases,
        swinging,
        clock,
        swing_s: s,
        half_index,
    }
}

/// Displacement of the unicycle pose `(yaw)` over `dt` at constant `(v, w)`,
/// in world coordinates, plus the final heading.
fn unicycle_advance(yaw: f64, v: f64, w: f64, dt: f64) -> (Vector2<f64>, f64) {
    let yaw1 = yaw + w * dt;
    let d = if w.abs() < 1e-9 {
        Vector2::new(v * dt * yaw.cos(), v * dt * yaw.sin())
    } else {
        Vector2::new(
            v / w * (yaw1.sin() - yaw.sin()),
            v / w * (yaw.cos() - yaw1.cos()),
        )
    };
    (d, yaw1)
}

/// Nominal 2D world targets: where each hip anchor ends up after `horizon`
/// of the commanded unicycle motion. Anchoring to the hip rather than the
/// current foot keeps the stance centered; at the nominal stance a zero
/// command reproduces the current foot positions.
pub fn nominal_footsteps(
    v: f64,
    omega: f64,
    x: &RobotState,
    legs: &[LegGeometry; N_LEGS],
    horizon: f64,
) -> [Vector2<f64>; N_LEGS] {
    let yaw = x.origin.yaw;
    let (d, yaw1) = unicycle_advance(yaw, v, omega, horizon);
    let (s1, c1) = yaw1.sin_cos();
    let mut out = [Vector2::zeros(); N_LEGS];
    for geom in legs {
        let i = geom.leg.index();
        let a = geom.anchor;
        out[i] = x.origin.p.xy() + d + Vector2::new(c1 * a.x - s1 * a.y, s1 * a.x + c1 * a.y);
    }
    out
}

/// One perceived horizontal plane: a convex counterclockwise polygon in
/// world xy at a fixed height.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Plane {
    pub id: u32,
    pub height: f64,
    pub polygon: Vec<Vector2<f64>>,
}

impl Plane {
    pub fn contains_xy(&self, p: &Vector2<f64>) -> bool {
        let n = self.polygon.len();
        for i in 0..n {
            let a = self.polygon[i];
            let b = self.polygon[(i + 1) % n];
            let e = b - a;
            if e.x * (p.y - a.y) - e.y * (p.x - a.x) < -1e-12 {
                return false;
            }
        }
        true
    }

    /// Closest point of the polygon (interior included) to `p`.
    pub fn closest_xy(&self, p: &Vector2<f64>) -> Vector2<f64> {
        if self.contains_xy(p) {
            return *p;
        }
        let n = self.polygon.len();
        let mut best = self.polygon[0];
        let mut best_d = f64::INFINITY;
        for i in 0..n {
            let a = self.polygon[i];
            let b = self.polygon[(i + 1) % n];
            let e = b - a;
            let t = if e.norm_squared() > 0.0 {
                ((p - a).dot(&e) / e.norm_squared()).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = a + e * t;
            let d = (p - q).norm_squared();
            if d < best_d {
                best_d = d;
                best = q;
            }
        }
        best
    }

    pub fn distance_xy(&self, p: &Vector2<f64>) -> f64 {
        (p - self.closest_xy(p)).norm()
    }

    pub fn centroid(&self) -> Vector2<f64> {
        self.polygon.iter().sum::<Vector2<f64>>() / self.polygon.len() as f64
    }
}

/// Intersection of inward half-spaces in world xy.
#[derive(Clone, Debug, Default)]
pub struct ConvexRegion {
    pub halfspaces: Vec<HalfSpace2>,
}

impl ConvexRegion {
    /// Minimum signed margin over the half-spaces, positive inside.
    pub fn margin(&self, p: &Vector2<f64>) -> f64 {
        self.halfspaces
            .iter()
            .map(|h| h.margin(p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        self.margin(p) >= 0.0
    }
}

/// Separating-axis intersection test for two convex polygons.
fn polygons_intersect(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> bool {
    let separated_by = |poly: &[Vector2<f64>], other: &[Vector2<f64>]| {
        let n = poly.len();
        for i in 0..n {
            let e = poly[(i + 1) % n] - poly[i];
            let axis = Vector2::new(-e.y, e.x);
            let own_max = poly.iter().map(|p| axis.dot(p)).fold(f64::MIN, f64::max);
            let oth_min = other.iter().map(|p| axis.dot(p)).fold(f64::MAX, f64::min);
            if oth_min > own_max + 1e-12 {
                return true;
            }
        }
        false
    };
    !separated_by(a, b) && !separated_by(b, a)
}

/// World-xy footprint of a cuboid: convex hull of its corner projections.
fn obstacle_footprint(obs: &Cuboid) -> Result<Vec<Vector2<f64>>> {
    let pts: Vec<Vector2<f64>> = obs.corners().iter().map(|c| c.xy()).collect();
    convex_hull_points(&pts)
}

/// Safe convex foothold region on `plane`: the plane polygon cut by one
/// separating half-space per intersecting obstacle, taken through the
/// obstacle footprint face nearest `target`. Returns the region and whether
/// it still contains the target.
pub fn safe_convex_region(
    plane: &Plane,
    obstacles: &[Cuboid],
    target: &Vector2<f64>,
) -> Result<(ConvexRegion, bool)> {
    let mut halfspaces = convex_hull_halfspaces(&plane.polygon, 0.0)?;
    for obs in obstacles {
        let zs: Vec<f64> = obs.corners().iter().map(|c| c.z).collect();
        let z_min = zs.iter().cloned().fold(f64::MAX, f64::min);
        let z_max = zs.iter().cloned().fold(f64::MIN, f64::max);
        // Only obstacles that actually rise above this plane near foot level.
        if z_max <= plane.height + 1e-9 || z_min > plane.height + 0.5 {
            continue;
        }
        let footprint = obstacle_footprint(obs)?;
        if !polygons_intersect(&plane.polygon, &footprint) {
            continue;
        }
        let inward = convex_hull_halfspaces(&footprint, 0.0)?;
        // The face the target is furthest beyond; for a target inside the
        // footprint this is the nearest face.
        let hs = inward
            .iter()
            .min_by(|p, q| p.margin(target).partial_cmp(&q.margin(target)).unwrap())
            .expect("footprint hull has edges");
        halfspaces.push(HalfSpace2 {
            a: -hs.a,
            b: -hs.b,
        });
    }
    let region = ConvexRegion { halfspaces };
    let feasible = region.contains(target);
    Ok((region, feasible))
}

/// How a leg behaves over one half cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepMode {
    /// Airborne cubic swing to the target.
    Swing,
    /// Ground contact maintained; the wheel keeps its origin-local position
    /// and rolls along with the chassis.
    Rolling,
    /// No admissible step; the leg also keeps its local position.
    Hold,
}

#[derive(Clone, Debug)]
pub struct FootstepTarget {
    pub leg: LegId,
    /// World landing pose of the wheel center.
    pub target: Vector3<f64>,
    pub plane: Option<u32>,
    pub mode: StepMode,
    pub region: ConvexRegion,
}

/// Footstep plan for one half cycle.
#[derive(Clone, Debug)]
pub struct FootstepPlan {
    pub steps: Vec<FootstepTarget>,
    /// World wheel-center positions at plan time, per leg.
    pub start: [Vector3<f64>; N_LEGS],
    /// Origin-local (x, z) wheel-center positions at plan time; rolling and
    /// holding legs track these.
    pub start_local: [Vector2<f64>; N_LEGS],
    /// Lowest support-plane height (world); the body height reference rides
    /// on top of it.
    pub ground_z: f64,
    pub t_start: f64,
    pub t_land: f64,
    pub apex: f64,
}

impl FootstepPlan {
    pub fn step(&self, leg: LegId) -> &FootstepTarget {
        &self.steps[leg.index()]
    }
}

/// Plane whose polygon is horizontally nearest to `p`; ties broken by height
/// closeness to `z_hint`.
fn nearest_plane<'a>(planes: &'a [Plane], p: &Vector2<f64>, z_hint: f64) -> Option<&'a Plane> {
    planes.iter().min_by(|a, b| {
        let ka = (a.distance_xy(p), (a.height - z_hint).abs());
        let kb = (b.distance_xy(p), (b.height - z_hint).abs());
        ka.partial_cmp(&kb).unwrap()
    })
}

/// Move `p` inside `region` with a small positive margin. The region always
/// contains the plane interior, so a few normal-direction passes settle.
fn clamp_into_region(region: &ConvexRegion, p: Vector2<f64>, margin: f64) -> Vector2<f64> {
    let mut q = p;
    for _ in 0..16 {
        let mut worst = f64::INFINITY;
        let mut dir = Vector2::zeros();
        for hs in &region.halfspaces {
            let m = hs.margin(&q);
            if m < worst {
                worst = m;
                dir = hs.a;
            }
        }
        if worst >= margin {
            break;
        }
        q += dir * (margin - worst);
    }
    q
}

/// Lift the 2D targets of the swinging legs onto perceived planes and decide
/// the per-leg step mode. Stance legs hold; swing targets with no plane in
/// capture distance also hold.
#[allow(clippy::too_many_arguments)]
pub fn adjust_to_planes(
    targets: &[Vector2<f64>; N_LEGS],
    swing: &[bool; N_LEGS],
    linear_path: bool,
    x: &RobotState,
    legs: &[LegGeometry; N_LEGS],
    planes: &[Plane],
    obstacles: &[Cuboid],
    cfg: &PlannerConfig,
    t_start: f64,
    t_land: f64,
) -> Result<FootstepPlan> {
    if planes.is_empty() {
        return Err(Error::Empty("no planes in scene"));
    }
    let mut start = [Vector3::zeros(); N_LEGS];
    let mut steps = Vec::with_capacity(N_LEGS);
    for leg in ALL_LEGS {
        let i = leg.index();
        let geom = &legs[i];
        start[i] = world_foot_position(x, geom);
        let foot_xy = start[i].xy();
        let ground_z = start[i].z - geom.wheel_radius;
        let current = nearest_plane(planes, &foot_xy, ground_z).unwrap();

        if !swing[i] {
            let (region, _) = safe_convex_region(current, obstacles, &foot_xy)?;
            steps.push(FootstepTarget {
                leg,
                target: start[i],
                plane: Some(current.id),
                mode: StepMode::Hold,
                region,
            });
            continue;
        }

        let plane = nearest_plane(planes, &targets[i], ground_z).unwrap();
        if plane.distance_xy(&targets[i]) > cfg.capture_distance {
            let (region, _) = safe_convex_region(current, obstacles, &foot_xy)?;
            steps.push(FootstepTarget {
                leg,
                target: start[i],
                plane: Some(current.id),
                mode: StepMode::Hold,
                region,
            });
            continue;
        }

        let mut tp = plane.closest_xy(&targets[i]);
        if !plane.contains_xy(&targets[i]) {
            // Pull just inside so the landing is not exactly on the edge.
            let c = plane.centroid();
            let d = c - tp;
            if d.norm() > 1e-9 {
                tp += d.normalize() * 1e-3f64.min(d.norm());
            }
        }
        let (region, mut feasible) = safe_convex_region(plane, obstacles, &tp)?;
        if !feasible {
            tp = clamp_into_region(&region, tp, 0.02);
            feasible = region.contains(&tp);
        }
        if !feasible {
            let (region, _) = safe_convex_region(current, obstacles, &foot_xy)?;
            steps.push(FootstepTarget {
                leg,
                target: start[i],
                plane: Some(current.id),
                mode: StepMode::Hold,
                region,
            });
            continue;
        }

        let mode = if plane.id == current.id && linear_path {
            let mid = (foot_xy + tp) / 2.0;
            if plane.contains_xy(&mid) {
                StepMode::Rolling
            } else {
                StepMode::Swing
            }
        } else {
            StepMode::Swing
        };
        if mode == StepMode::Rolling {
            // The nominal target is a full-cycle advance; a rolling wheel
            // only covers half of it before the next support switch.
            tp = (foot_xy + tp) / 2.0;
        }
        steps.push(FootstepTarget {
            leg,
            target: Vector3::new(tp.x, tp.y, plane.height + geom.wheel_radius),
            plane: Some(plane.id),
            mode,
            region,
        });
    }
    let mut start_local = [Vector2::zeros(); N_LEGS];
    for i in 0..N_LEGS {
        start_local[i] = Vector2::new(x.ee[i].x, x.ee[i].z);
    }
    // The body rides relative to the lowest support plane; on rising terrain
    // the reference stays low and the collision filter lifts the body.
    let ground_z = steps
        .iter()
        .map(|s| s.target.z - legs[s.leg.index()].wheel_radius)
        .fold(f64::INFINITY, f64::min);
    Ok(FootstepPlan {
        steps,
        start,
        start_local,
        ground_z,
        t_start,
        t_land,
        apex: cfg.apex,
    })
}

/// Piecewise cubic yaw reference with zero rate at every knot (drive-wheel
/// landing time).
#[derive(Clone, Debug)]
pub struct YawSpline {
    /// (time, yaw) knots, strictly increasing in time.
    knots: Vec<(f64, f64)>,
}

/// sigma(s) = 3 s^2 - 2 s^3 and its first two derivatives.
fn smoothstep(s: f64) -> (f64, f64, f64) {
    (s * s * (3.0 - 2.0 * s), 6.0 * s * (1.0 - s), 6.0 - 12.0 * s)
}

impl YawSpline {
    /// Yaw value, rate, and acceleration at `t`. Constant beyond the ends.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let k = &self.knots;
        if t <= k[0].0 {
            return (k[0].1, 0.0, 0.0);
        }
        if t >= k[k.len() - 1].0 {
            return (k[k.len() - 1].1, 0.0, 0.0);
        }
        let i = k.partition_point(|&(kt, _)| kt <= t) - 1;
        let (t0, y0) = k[i];
        let (t1, y1) = k[i + 1];
        let dt = t1 - t0;
        let s = (t - t0) / dt;
        let (sig, d1, d2) = smoothstep(s);
        let dy = y1 - y0;
        (y0 + dy * sig, dy * d1 / dt, dy * d2 / (dt * dt))
    }
}

/// Yaw spline through the integrated commanded yaw at each landing time.
pub fn yaw_trajectory(script: &CommandScript, landing_times: &[f64]) -> Result<YawSpline> {
    if landing_times.len() < 2 {
        return Err(Error::InvalidParam("need at least two landing times".into()));
    }
    let mut knots = Vec::with_capacity(landing_times.len());
    let mut prev = f64::NEG_INFINITY;
    for &t in landing_times {
        if !(t.is_finite() && t > prev) {
            return Err(Error::InvalidParam(
                "landing times must be strictly increasing".into(),
            ));
        }
        prev = t;
        knots.push((t, script.integrated_yaw(t)));
    }
    Ok(YawSpline { knots })
}

/// World swing reference for one leg: position, velocity, acceleration.
/// Cubic in the horizontal plane, two cubic segments in z through the apex.
fn swing_reference(
    start: &Vector3<f64>,
    target: &Vector3<f64>,
    apex: f64,
    s: f64,
    duration: f64,
) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let (sig, d1, d2) = smoothstep(s);
    let dxy = target.xy() - start.xy();
    let z_apex = start.z.max(target.z) + apex;
    // Two half-duration segments: up to the apex, then down to the target.
    let (z0, z1, s2) = if s < 0.5 {
        (start.z, z_apex, 2.0 * s)
    } else {
        (z_apex, target.z, 2.0 * s - 1.0)
    };
    let (zs, zd1, zd2) = smoothstep(s2);
    let dz = z1 - z0;
    let pos = Vector3::new(
        start.x + dxy.x * sig,
        start.y + dxy.y * sig,
        z0 + dz * zs,
    );
    let vel = Vector3::new(
        dxy.x * d1 / duration,
        dxy.y * d1 / duration,
        dz * zd1 * 2.0 / duration,
    );
    let acc = Vector3::new(
        dxy.x * d2 / (duration * duration),
        dxy.y * d2 / (duration * duration),
        dz * zd2 * 4.0 / (duration * duration),
    );
    (pos, vel, acc)
}

/// Nominal input: feedforward along the plan plus proportional-derivative
/// correction, clamped to the input box.
pub fn reference_input(
    t: f64,
    x: &RobotState,
    plan: &FootstepPlan,
    script: &CommandScript,
    yaw_spline: &YawSpline,
    cfg: &PlannerConfig,
    limits: &InputLimits,
) -> RobotInput {
    let mut u = RobotInput::default();
    let (v_cmd, _) = script.sample(t);
    u.accel = cfg.kp_speed * (v_cmd - x.origin.speed);

    let (psi, psi_d, psi_dd) = yaw_spline.eval(t);
    u.yaw_accel = psi_dd
        + cfg.kp_yaw * (psi - x.origin.yaw)
        + cfg.kd_yaw * (psi_d - x.origin.yaw_rate);

    // The body rides at a fixed height above the lowest support plane.
    let body_z_ref = plan.ground_z + cfg.body_z - x.origin.p.z;
    u.body_ax = cfg.kp_body * (0.0 - x.body.x) + cfg.kd_body * (0.0 - x.body.vx);
    u.body_az = cfg.kp_body * (body_z_ref - x.body.z) + cfg.kd_body * (0.0 - x.body.vz);
    u.body_pitch_accel =
        cfg.kp_body * (0.0 - x.body.pitch) + cfg.kd_body * (0.0 - x.body.pitch_rate);

    let duration = plan.t_land - plan.t_start;
    let s = ((t - plan.t_start) / duration).clamp(0.0, 1.0);
    let (sy, cy) = x.origin.yaw.sin_cos();
    let p = x.origin.p;
    let w_rate = x.origin.yaw_rate;

    for leg in ALL_LEGS {
        let i = leg.index();
        let step = &plan.steps[i];
        let ee = x.ee[i];
        match step.mode {
            StepMode::Swing => {
                let (w, wd, wdd) =
                    swing_reference(&plan.start[i], &step.target, plan.apex, s, duration);
                // Reference in origin-local coordinates; the lateral
                // component is fixed by the leg geometry and not commanded.
                let dx = w.x - p.x;
                let dy = w.y - p.y;
                let lx = cy * dx + sy * dy;
                let ly = -sy * dx + cy * dy;
                let lz = w.z - p.z;
                let ldx = cy * wd.x + sy * wd.y - x.origin.speed + w_rate * ly;
                let ldz = wd.z;
                // Feedforward is exact for a straight-driving origin; the PD
                // terms absorb the yaw-rate coupling.
                let affx = cy * wdd.x + sy * wdd.y;
                let affz = wdd.z;
                u.ee[i].ax = affx + cfg.kp_foot * (lx - ee.x) + cfg.kd_foot * (ldx - ee.vx);
                u.ee[i].az = affz + cfg.kp_foot * (lz - ee.z) + cfg.kd_foot * (ldz - ee.vz);
            }
            StepMode::Rolling | StepMode::Hold => {
                // Hold the origin-local pose: the wheel rolls with the
                // chassis while staying on its contact plane.
                let lx_ref = plan.start_local[i].x;
                let lz_ref = step.target.z - p.z;
                u.ee[i].ax = cfg.kp_foot * (lx_ref - ee.x) + cfg.kd_foot * (0.0 - ee.vx);
                u.ee[i].az = cfg.kp_foot * (lz_ref - ee.z) + cfg.kd_foot * (0.0 - ee.vz);
            }
        }
    }

    let mut v = u.to_vector();
    for j in 0..v.len() {
        v[j] = v[j].clamp(limits.lower[j], limits.upper[j]);
    }
    RobotInput::from_vector(&v)
}

/// Per-tick planner output consumed by the harness.
#[derive(Clone, Debug)]
pub struct PlanTick {
    pub u_ref: RobotInput,
    pub gait: GaitPhase,
    /// True when this tick performed an origin exchange and replan.
    pub exchanged: bool,
    /// Legs currently airborne (toe collision rows).
    pub swing: [bool; N_LEGS],
    /// Legs whose footholds are constrained (stance and foot-lowering).
    pub constrained: [bool; N_LEGS],
    /// Per-leg wheel-center floor heights for the foot-height rows (world).
    pub floors: [f64; N_LEGS],
}

/// Stateful control-loop planner: holds the current half-cycle plan and the
/// yaw spline, re-aims the origin frame at each support switch.
pub struct Planner {
    pub cfg: PlannerConfig,
    pub legs: [LegGeometry; N_LEGS],
    pub limits: InputLimits,
    script: CommandScript,
    yaw_spline: YawSpline,
    plan: Option<FootstepPlan>,
    last_half: Option<u64>,
}

impl Planner {
    pub fn new(
        cfg: PlannerConfig,
        legs: [LegGeometry; N_LEGS],
        limits: InputLimits,
        script: CommandScript,
        duration: f64,
    ) -> Result<Self> {
        cfg.validate()?;
        let half = cfg.cycle / 2.0;
        let n = (duration / half).ceil() as usize + 1;
        let landing_times: Vec<f64> = (0..=n).map(|k| k as f64 * half).collect();
        let yaw_spline = yaw_trajectory(&script, &landing_times)?;
        Ok(Self {
            cfg,
            legs,
            limits,
            script,
            yaw_spline,
            plan: None,
            last_half: None,
        })
    }

    pub fn plan(&self) -> Option<&FootstepPlan> {
        self.plan.as_ref()
    }

    pub fn yaw_spline(&self) -> &YawSpline {
        &self.yaw_spline
    }

    /// One planner step. At support switches this re-expresses `x` in a new
    /// origin frame under the body before replanning.
    pub fn tick(
        &mut self,
        t: f64,
        x: &mut RobotState,
        planes: &[Plane],
        obstacles: &[Cuboid],
    ) -> Result<PlanTick> {
        let gait = gait_schedule(t, &self.cfg);
        let mut exchanged = false;
        if self.last_half != Some(gait.half_index) {
            if self.last_half.is_some() {
                self.exchange_origin(x);
                exchanged = true;
            }
            self.replan(t, x, &gait, planes, obstacles)?;
            self.last_half = Some(gait.half_index);
        }
        let plan = self.plan.as_ref().unwrap();
        let u_ref = reference_input(
            t,
            x,
            plan,
            &self.script,
            &self.yaw_spline,
            &self.cfg,
            &self.limits,
        );

        let mut swing = [false; N_LEGS];
        let mut constrained = [false; N_LEGS];
        let mut floors = [f64::NEG_INFINITY; N_LEGS];
        for leg in ALL_LEGS {
            let i = leg.index();
            let step = &plan.steps[i];
            let airborne = step.mode == StepMode::Swing && gait.phases[i] != LegPhase::Stance;
            swing[i] = airborne;
            // Foothold membership is only enforceable on the ground; a
            // lowering foot is still behind its landing region.
            constrained[i] = !airborne;
            floors[i] = match step.mode {
                StepMode::Swing => plan.start[i].z.min(step.target.z) - 1e-3,
                _ => step.target.z - 1e-3,
            };
        }
        Ok(PlanTick {
            u_ref,
            gait,
            exchanged,
            swing,
            constrained,
            floors,
        })
    }

    fn exchange_origin(&self, x: &mut RobotState) {
        // New frame under the body, heading kept. The body sits on the frame
        // x axis, so this translation is in the exact-preservation class and
        // no joint angle moves. Heading keeps tracking the yaw spline through
        // the yaw controller; a discrete re-aim here would rotate every hip
        // angle by the tracking error.
        let wb = world_body_position(x);
        let new_p = Vector3::new(wb.x, wb.y, x.origin.p.z);
        *x = crate::model::origin_exchange(x, new_p, x.origin.yaw, &self.legs);
    }

    fn replan(
        &mut self,
        t: f64,
        x: &RobotState,
        gait: &GaitPhase,
        planes: &[Plane],
        obstacles: &[Cuboid],
    ) -> Result<()> {
        let half = self.cfg.cycle / 2.0;
        let t_start = gait.half_index as f64 * half;
        let t_land = t_start + half;
        let (v, w) = self.script.sample(t);
        let targets = nominal_footsteps(v, w, x, &self.legs, self.cfg.cycle);
        let mut swing = [false; N_LEGS];
        for leg in gait.swinging.legs() {
            swing[leg.index()] = true;
        }
        let linear_path = w.abs() < 1e-6;
        self.plan = Some(adjust_to_planes(
            &targets,
            &swing,
            linear_path,
            x,
            &self.legs,
            planes,
            obstacles,
            &self.cfg,
            t_start,
            t_land,
        )?);
        Ok(())
    }
}
