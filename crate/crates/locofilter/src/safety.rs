//! ECBF constraint assembly and the QP safety filter.
//!
//! Every constraint is a scalar margin h(x) >= 0 of relative degree 2: the
//! input appears in the second time derivative. A row encodes
//! `L_f^2 h + L_g L_f h . u >= -K1 h - K2 L_f h + delta` and the filter picks
//! the input closest to the reference that satisfies all rows, with
//! quadratically penalized slack absorbing infeasibility.

use crate::dual::{atan2d, Dual2};
use crate::geometry::{
    sat_margin, ssat_smooth_dual, superellipsoid_dual, Cuboid, DualBox, HalfSpace2,
};
use crate::model::{
    drift, drift_jacobian_transpose_mul, idx, input_rows, LegGeometry, RobotState, InputVector,
    StateVector, N_INPUTS, N_LEGS,
};
use crate::smoothmath::{AbsVariant, MaxVariant, SmoothingParams};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

/// `K = [lambda^2, 2 lambda]` places both poles of the closed-loop h-dynamics
/// at `-lambda`.
pub fn pole_placement_gains(lambda: f64) -> [f64; 2] {
    assert!(lambda > 0.0, "pole placement needs lambda > 0");
    [lambda * lambda, 2.0 * lambda]
}

/// Constraint family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintKind {
    JointLimit,
    BodySsat,
    ToeSuperellipsoid,
    Foothold,
    FootHeight,
    Stability,
}

/// Stable identity of a row across ticks, used for QP warm starting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RowKey {
    pub kind: ConstraintKind,
    pub leg: u8,
    pub obstacle: u16,
    pub sub: u8,
}

impl RowKey {
    pub fn new(kind: ConstraintKind, leg: usize, obstacle: usize, sub: usize) -> Self {
        Self {
            kind,
            leg: leg as u8,
            obstacle: obstacle as u16,
            sub: sub as u8,
        }
    }
}

/// Maximum number of states any single constraint depends on.
pub const MAX_DEPS: usize = 8;

/// Sparse value/gradient/Hessian of a margin with respect to the full state.
#[derive(Clone, Copy, Debug)]
pub struct StateDeriv {
    pub h: f64,
    pub n: usize,
    pub idx: [usize; MAX_DEPS],
    pub grad: [f64; MAX_DEPS],
    pub hess: [[f64; MAX_DEPS]; MAX_DEPS],
}

impl StateDeriv {
    /// Package a dual result; `deps` maps dual slots to state indices.
    pub fn from_dual<const K: usize>(d: &Dual2<K>, deps: [usize; K]) -> Self {
        let mut out = Self {
            h: d.v,
            n: K,
            idx: [0; MAX_DEPS],
            grad: [0.0; MAX_DEPS],
            hess: [[0.0; MAX_DEPS]; MAX_DEPS],
        };
        out.idx[..K].copy_from_slice(&deps);
        out.grad[..K].copy_from_slice(&d.g);
        for i in 0..K {
            out.hess[i][..K].copy_from_slice(&d.h[i]);
        }
        out
    }

    /// Linear margin: constant gradient, zero Hessian.
    pub fn linear(h: f64, deps: &[(usize, f64)]) -> Self {
        let mut out = Self {
            h,
            n: deps.len(),
            idx: [0; MAX_DEPS],
            grad: [0.0; MAX_DEPS],
            hess: [[0.0; MAX_DEPS]; MAX_DEPS],
        };
        for (i, &(s, g)) in deps.iter().enumerate() {
            out.idx[i] = s;
            out.grad[i] = g;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.h.is_finite()
            && self.grad[..self.n].iter().all(|v| v.is_finite())
            && self.hess[..self.n]
                .iter()
                .all(|r| r[..self.n].iter().all(|v| v.is_finite()))
    }

    /// Dense gradient, for tests and diagnostics.
    pub fn dense_grad(&self) -> StateVector {
        let mut g = StateVector::zeros();
        for i in 0..self.n {
            g[self.idx[i]] = self.grad[i];
        }
        g
    }
}

/// One linear inequality `a . u >= lb - delta` for the filter QP.
#[derive(Clone, Debug)]
pub struct EcbfRow {
    pub key: RowKey,
    pub a: InputVector,
    pub lb: f64,
    pub h: f64,
    pub hdot: f64,
    /// Whether the QP instantiates a slack variable for this row.
    pub use_slack: bool,
    pub slack_weight: f64,
    /// `|a| = 0`: the margin is insensitive to the input; excluded from the
    /// QP but kept for reporting.
    pub vacuous: bool,
}

/// Assemble one ECBF row from the margin derivatives. `f` must be
/// `drift(x)`. Returns `None` when the derivatives are non-finite (the
/// constraint is dropped; callers count drops).
pub fn ecbf_row(
    sd: &StateDeriv,
    x: &RobotState,
    f: &StateVector,
    gains: [f64; 2],
    key: RowKey,
    use_slack: bool,
    slack_weight: f64,
) -> Option<EcbfRow> {
    if !sd.is_finite() {
        return None;
    }
    // L_f h, then phi = H f + (df/dx)^T grad so that
    // L_f^2 h = phi . f and (L_g L_f h)_j = phi[row_j] (unit g columns).
    let mut lfh = 0.0;
    for i in 0..sd.n {
        lfh += sd.grad[i] * f[sd.idx[i]];
    }
    let mut phi = drift_jacobian_transpose_mul(x, &sd.dense_grad());
    for i in 0..sd.n {
        let mut acc = 0.0;
        for j in 0..sd.n {
            acc += sd.hess[i][j] * f[sd.idx[j]];
        }
        phi[sd.idx[i]] += acc;
    }
    let lf2h = phi.dot(f);
    let mut a = InputVector::zeros();
    for (col, row) in input_rows().into_iter().enumerate().map(|(c, r)| (c, r)) {
        a[col] = phi[row];
    }
    let lb = -lf2h - gains[0] * sd.h - gains[1] * lfh;
    if !lb.is_finite() {
        return None;
    }
    let vacuous = a.iter().all(|&v| v == 0.0);
    Some(EcbfRow {
        key,
        a,
        lb,
        h: sd.h,
        hdot: lfh,
        use_slack,
        slack_weight,
        vacuous,
    })
}

/// Box input bounds.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct InputLimits {
    pub lower: InputVector,
    pub upper: InputVector,
}

impl Default for InputLimits {
    fn default() -> Self {
        let mut lower = InputVector::zeros();
        let mut upper = InputVector::zeros();
        for i in 0..N_INPUTS {
            // Origin and body accelerations are modest, leg accelerations
            // generous (light telescopic legs).
            let bound = if i < 5 { 10.0 } else { 50.0 };
            lower[i] = -bound;
            upper[i] = bound;
        }
        Self { lower, upper }
    }
}

/// Filter configuration; all values are deployment-tuned, none come from a
/// published source.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyConfig {
    pub lambda_joint: f64,
    pub lambda_collision: f64,
    pub lambda_foothold: f64,
    pub lambda_height: f64,
    pub lambda_stability: f64,
    pub w_u: f64,
    pub w_slack: f64,
    pub smoothing: SmoothingParams,
    pub superellipsoid_n: u32,
    pub body_half_extents: Vector3<f64>,
    pub hull_shrink: f64,
    pub input_limits: InputLimits,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            lambda_joint: 8.0,
            lambda_collision: 4.0,
            lambda_foothold: 4.0,
            lambda_height: 6.0,
            lambda_stability: 4.0,
            w_u: 1.0,
            w_slack: 1e6,
            smoothing: SmoothingParams::default(),
            superellipsoid_n: 4,
            body_half_extents: Vector3::new(0.4, 0.2, 0.1),
            hull_shrink: 0.05,
            input_limits: InputLimits::default(),
        }
    }
}

impl SafetyConfig {
    pub fn validate(&self) -> Result<()> {
        self.smoothing.validate()?;
        for (name, v) in [
            ("lambda_joint", self.lambda_joint),
            ("lambda_collision", self.lambda_collision),
            ("lambda_foothold", self.lambda_foothold),
            ("lambda_height", self.lambda_height),
            ("lambda_stability", self.lambda_stability),
            ("w_u", self.w_u),
            ("w_slack", self.w_slack),
            ("hull_shrink", self.hull_shrink),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidParam(format!("{name} must be positive")));
            }
        }
        if !(self.body_half_extents.min() > 0.0) {
            return Err(Error::InvalidParam("body half-extents must be positive".into()));
        }
        if self.superellipsoid_n < 1 {
            return Err(Error::InvalidParam("superellipsoid N must be >= 1".into()));
        }
        Ok(())
    }
}

/// Body collision cuboid at the current state.
pub fn body_cuboid(x: &RobotState, half_extents: &Vector3<f64>) -> Cuboid {
    Cuboid {
        center: crate::model::world_body_position(x),
        rotation: crate::geometry::rot_z(x.origin.yaw) * crate::geometry::rot_y(x.body.pitch),
        half_extents: *half_extents,
    }
}

/// Joint-limit rows: knee min/max and hip min/max per leg (sub = 0..3).
pub fn build_joint_limit_rows(
    x: &RobotState,
    legs: &[LegGeometry; N_LEGS],
    cfg: &SafetyConfig,
) -> Vec<EcbfRow> {
    let f = drift(x);
    let gains = pole_placement_gains(cfg.lambda_joint);
    let mut rows = Vec::with_capacity(4 * N_LEGS);
    for geom in legs {
        let li = geom.leg.index();
        let deps = [
            idx::BODY_X,
            idx::BODY_Z,
            idx::BODY_PITCH,
            idx::ee_x(li),
            idx::ee_z(li),
        ];
        let bx = Dual2::<5>::var(x.body.x, 0);
        let bz = Dual2::<5>::var(x.body.z, 1);
        let pitch = Dual2::<5>::var(x.body.pitch, 2);
        let ex = Dual2::<5>::var(x.ee[li].x, 3);
        let ez = Dual2::<5>::var(x.ee[li].z, 4);
        let (sp, cp) = pitch.sin_cos();
        let hip_x = bx + cp.scale(geom.anchor.x) + sp.scale(geom.anchor.z);
        let hip_z = bz - sp.scale(geom.anchor.x) + cp.scale(geom.anchor.z);
        // Leg frame: x down, y forward.
        let px = hip_z - ez;
        let py = ex - hip_x;
        let knee = (px.sq() + py.sq()).sqrt();
        let hip = atan2d(py, px);

        let margins = [
            knee - Dual2::constant(geom.knee_range.0),
            Dual2::constant(geom.knee_range.1) - knee,
            hip - Dual2::constant(geom.hip_range.0),
            Dual2::constant(geom.hip_range.1) - hip,
        ];
        for (sub, m) in margins.into_iter().enumerate() {
            let sd = StateDeriv::from_dual(&m, deps);
            let key = RowKey::new(ConstraintKind::JointLimit, li, 0, sub);
            if let Some(r) = ecbf_row(&sd, x, &f, gains, key, false, cfg.w_slack) {
                rows.push(r);
            }
        }
    }
    rows
}

/// Body/obstacle rows: one smooth SAT margin per obstacle, differentiated
/// through the body pose to the 7 states it depends on.
pub fn build_body_collision_rows(
    x: &RobotState,
    obstacles: &[Cuboid],
    cfg: &SafetyConfig,
) -> Vec<EcbfRow> {
    let f = drift(x);
    let gains = pole_placement_gains(cfg.lambda_collision);
    let deps = [
        idx::PX,
        idx::PY,
        idx::PZ,
        idx::YAW,
        idx::BODY_X,
        idx::BODY_Z,
        idx::BODY_PITCH,
    ];
    let px = Dual2::<7>::var(x.origin.p.x, 0);
    let py = Dual2::<7>::var(x.origin.p.y, 1);
    let pz = Dual2::<7>::var(x.origin.p.z, 2);
    let yaw = Dual2::<7>::var(x.origin.yaw, 3);
    let bx = Dual2::<7>::var(x.body.x, 4);
    let bz = Dual2::<7>::var(x.body.z, 5);
    let pitch = Dual2::<7>::var(x.body.pitch, 6);
    let (sy, cy) = yaw.sin_cos();
    let center = [px + bx * cy, py + bx * sy, pz + bz];
    let body = DualBox::from_yaw_pitch(
        center,
        yaw,
        pitch,
        &nalgebra::Matrix3::identity(),
        [
            cfg.body_half_extents.x,
            cfg.body_half_extents.y,
            cfg.body_half_extents.z,
        ],
    );
    let body_exact = body_cuboid(x, &cfg.body_half_extents);

    let mut rows = Vec::with_capacity(obstacles.len());
    for (oi, obs) in obstacles.iter().enumerate() {
        let d = ssat_smooth_dual(
            &body,
            &DualBox::from_const(obs),
            &cfg.smoothing,
            MaxVariant::Lse,
            AbsVariant::XTanh,
        );
        let mut sd = StateDeriv::from_dual(&d, deps);
        let exact = sat_margin(&body_exact, obs);
        let near = exact <= cfg.smoothing.switch_threshold;
        if !near {
            sd.h = exact;
        }
        let key = RowKey::new(ConstraintKind::BodySsat, 0, oi, 0);
        if let Some(r) = ecbf_row(&sd, x, &f, gains, key, near, cfg.w_slack) {
            rows.push(r);
        }
    }
    rows
}

/// Toe/obstacle rows: superellipsoid margins inflated by the wheel radius,
/// for the legs flagged in `swing`.
pub fn build_toe_collision_rows(
    x: &RobotState,
    obstacles: &[Cuboid],
    legs: &[LegGeometry; N_LEGS],
    swing: &[bool; N_LEGS],
    cfg: &SafetyConfig,
) -> Vec<EcbfRow> {
    let f = drift(x);
    let gains = pole_placement_gains(cfg.lambda_collision);
    let mut rows = Vec::new();
    for geom in legs {
        let li = geom.leg.index();
        if !swing[li] {
            continue;
        }
        let deps = [idx::PX, idx::PY, idx::PZ, idx::YAW, idx::ee_x(li), idx::ee_z(li)];
        let px = Dual2::<6>::var(x.origin.p.x, 0);
        let py = Dual2::<6>::var(x.origin.p.y, 1);
        let pz = Dual2::<6>::var(x.origin.p.z, 2);
        let yaw = Dual2::<6>::var(x.origin.yaw, 3);
        let ex = Dual2::<6>::var(x.ee[li].x, 4);
        let ez = Dual2::<6>::var(x.ee[li].z, 5);
        let (sy, cy) = yaw.sin_cos();
        let ly = geom.anchor.y;
        let w = [
            px + ex * cy - sy.scale(ly),
            py + ex * sy + cy.scale(ly),
            pz + ez,
        ];
        for (oi, obs) in obstacles.iter().enumerate() {
            let d = superellipsoid_dual(&w, obs, cfg.superellipsoid_n, geom.wheel_radius);
            // The margin grows like dist^(2N); a row this far out can never
            // activate and its polynomial derivatives are ill-conditioned.
            if d.v > 50.0 {
                continue;
            }
            let sd = StateDeriv::from_dual(&d, deps);
            let key = RowKey::new(ConstraintKind::ToeSuperellipsoid, li, oi, 0);
            if let Some(r) = ecbf_row(&sd, x, &f, gains, key, true, cfg.w_slack) {
                rows.push(r);
            }
        }
    }
    rows
}

/// Foothold rows: world toe xy inside each half-space of the safe region,
/// for the legs flagged in `constrained` (foot-lowering and stance phases).
pub fn build_foothold_rows(
    x: &RobotState,
    region: &[HalfSpace2],
    legs: &[LegGeometry; N_LEGS],
    constrained: &[bool; N_LEGS],
    cfg: &SafetyConfig,
) -> Vec<EcbfRow> {
    let f = drift(x);
    let gains = pole_placement_gains(cfg.lambda_foothold);
    let mut rows = Vec::new();
    for geom in legs {
        let li = geom.leg.index();
        if !constrained[li] {
            continue;
        }
        let deps = [idx::PX, idx::PY, idx::YAW, idx::ee_x(li)];
        let px = Dual2::<4>::var(x.origin.p.x, 0);
        let py = Dual2::<4>::var(x.origin.p.y, 1);
        let yaw = Dual2::<4>::var(x.origin.yaw, 2);
        let ex = Dual2::<4>::var(x.ee[li].x, 3);
        let (sy, cy) = yaw.sin_cos();
        let ly = geom.anchor.y;
        let wx = px + ex * cy - sy.scale(ly);
        let wy = py + ex * sy + cy.scale(ly);
        for (ei, hs) in region.iter().enumerate() {
            let h = wx.scale(hs.a.x) + wy.scale(hs.a.y) + Dual2::constant(hs.b);
            let sd = StateDeriv::from_dual(&h, deps);
            let key = RowKey::new(ConstraintKind::Foothold, li, ei, 0);
            if let Some(r) = ecbf_row(&sd, x, &f, gains, key, true, cfg.w_slack) {
                rows.push(r);
            }
        }
    }
    rows
}

/// Foot-height rows: toe z above the per-leg floor height.
pub fn build_foot_height_rows(
    x: &RobotState,
    floors: &[f64; N_LEGS],
    cfg: &SafetyConfig,
) -> Vec<EcbfRow> {
    let f = drift(x);
    let gains = pole_placement_gains(cfg.lambda_height);
    let mut rows = Vec::with_capacity(N_LEGS);
    for li in 0..N_LEGS {
        let h = x.origin.p.z + x.ee[li].z - floors[li];
        let sd = StateDeriv::linear(h, &[(idx::PZ, 1.0), (idx::ee_z(li), 1.0)]);
        let key = RowKey::new(ConstraintKind::FootHeight, li, 0, 0);
        if let Some(r) = ecbf_row(&sd, x, &f, gains, key, true, cfg.w_slack) {
            rows.push(r);
        }
    }
    rows
}

/// Static-stability rows: the body's forward position stays between bounds
/// tied to each foot's forward position (two rows per foot). The bounds come
/// from the anchor layout shrunk by `hull_shrink`, so the binding rows are
/// the extreme feet.
pub fn build_stability_rows(
    x: &RobotState,
    legs: &[LegGeometry; N_LEGS],
    cfg: &SafetyConfig,
) -> Vec<EcbfRow> {
    let f = drift(x);
    let gains = pole_placement_gains(cfg.lambda_stability);
    let a_max = legs.iter().map(|g| g.anchor.x).fold(f64::MIN, f64::max);
    let a_min = legs.iter().map(|g| g.anchor.x).fold(f64::MAX, f64::min);
    let mut rows = Vec::with_capacity(2 * N_LEGS);
    for geom in legs {
        let li = geom.leg.index();
        let rel = x.ee[li].x - x.body.x;
        let c_up = (a_max - cfg.hull_shrink) - geom.anchor.x;
        let c_lo = geom.anchor.x - (a_min + cfg.hull_shrink);
        for (sub, (h, sign)) in [(rel + c_up, 1.0), (-rel + c_lo, -1.0)].into_iter().enumerate() {
            let sd = StateDeriv::linear(h, &[(idx::ee_x(li), sign), (idx::BODY_X, -sign)]);
            let key = RowKey::new(ConstraintKind::Stability, li, 0, sub);
            if let Some(r) = ecbf_row(&sd, x, &f, gains, key, true, cfg.w_slack) {
                rows.push(r);
            }
        }
    }
    rows
}

/// Identity of a QP inequality, for warm starting across ticks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActiveKey {
    Row(RowKey),
    LowerBound(u8),
    UpperBound(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    IterationCap,
}

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub u_ref: InputVector,
    /// Diagonal tracking weights, all positive.
    pub w_u: InputVector,
    pub rows: Vec<EcbfRow>,
    pub limits: InputLimits,
}

impl QpProblem {
    pub fn new(u_ref: InputVector, w_u: f64, rows: Vec<EcbfRow>, limits: InputLimits) -> Self {
        Self {
            u_ref,
            w_u: InputVector::repeat(w_u),
            rows,
            limits,
        }
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub u: InputVector,
    /// Per-row slack, aligned with `QpProblem::rows` (0 for slack-free rows).
    pub slack: Vec<f64>,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub active: Vec<ActiveKey>,
}

struct Constraint {
    a_u: InputVector,
    /// Index into the slack block; coefficient is -1.
    slack: Option<usize>,
    lb: f64,
    key: ActiveKey,
}

const QP_MAX_ITERS: usize = 200;
const QP_FEAS_TOL: f64 = 1e-9;

/// Solve the safety-filter QP with a dense primal active-set method.
pub fn solve_qp(problem: &QpProblem) -> QpSolution {
    solve_qp_warm(problem, &[])
}

/// As [`solve_qp`], seeding the active set with the rows in `warm` that
/// still exist in this problem.
pub fn solve_qp_warm(problem: &QpProblem, warm: &[ActiveKey]) -> QpSolution {
    assert!(
        problem.w_u.iter().all(|&w| w > 0.0),
        "tracking weights must be positive"
    );
    // Variables: u (17) then one slack per slack-enabled row.
    let mut slack_weight = Vec::new();
    let mut slack_of_row = vec![None; problem.rows.len()];
    let mut cons: Vec<Constraint> = Vec::with_capacity(problem.rows.len() + 2 * N_INPUTS);
    for (ri, row) in problem.rows.iter().enumerate() {
        if row.vacuous {
            continue;
        }
        let slack = if row.use_slack {
            assert!(row.slack_weight > 0.0, "slack weights must be positive");
            slack_weight.push(row.slack_weight);
            slack_of_row[ri] = Some(slack_weight.len() - 1);
            slack_of_row[ri]
        } else {
            None
        };
        cons.push(Constraint {
            a_u: row.a,
            slack,
            lb: row.lb,
            key: ActiveKey::Row(row.key),
        });
    }
    for j in 0..N_INPUTS {
        let mut e = InputVector::zeros();
        e[j] = 1.0;
        cons.push(Constraint {
            a_u: e,
            slack: None,
            lb: problem.limits.lower[j],
            key: ActiveKey::LowerBound(j as u8),
        });
        cons.push(Constraint {
            a_u: -e,
            slack: None,
            lb: -problem.limits.upper[j],
            key: ActiveKey::UpperBound(j as u8),
        });
    }

    let n_slack = slack_weight.len();
    let inv_wu = problem.w_u.map(|w| 1.0 / w);
    let inv_ws: Vec<f64> = slack_weight.iter().map(|w| 1.0 / w).collect();

    // g_i W^-1 g_j^T for the Schur system.
    let gram = |ci: &Constraint, cj: &Constraint| -> f64 {
        let mut s = 0.0;
        for t in 0..N_INPUTS {
            s += ci.a_u[t] * cj.a_u[t] * inv_wu[t];
        }
        if let (Some(si), Some(sj)) = (ci.slack, cj.slack) {
            if si == sj {
                s += inv_ws[si];
            }
        }
        s
    };
    // g_i . z_ref (slack reference is 0).
    let g_dot_ref = |c: &Constraint| c.a_u.dot(&problem.u_ref);

    let mut active: Vec<usize> = warm
        .iter()
        .filter_map(|k| cons.iter().position(|c| c.key == *k))
        .collect();
    active.dedup();

    let mut u = problem.u_ref;
    let mut slack = vec![0.0; n_slack];
    let mut lambda: Vec<f64> = Vec::new();
    let mut status = QpStatus::IterationCap;
    let mut iterations = 0;

    for it in 0..QP_MAX_ITERS {
        iterations = it + 1;
        // Equality solve on the active set via the Schur complement
        // S lambda = lb_A - G_A z_ref.
        let m = active.len();
        lambda = vec![0.0; m];
        if m > 0 {
            let mut s = DMatrix::zeros(m, m);
            let mut r = DVector::zeros(m);
            for (i, &ai) in active.iter().enumerate() {
                for (j, &aj) in active.iter().enumerate() {
                    s[(i, j)] = gram(&cons[ai], &cons[aj]);
                }
                r[i] = cons[ai].lb - g_dot_ref(&cons[ai]);
            }
            // Tiny ridge guards duplicate rows; it perturbs multipliers by
            // O(1e-12) which is far below the drop tolerance.
            for i in 0..m {
                s[(i, i)] += 1e-12;
            }
            match s.clone().cholesky() {
                Some(ch) => {
                    let mut l = ch.solve(&r);
                    // One refinement step against the unridged system keeps
                    // the ridge from leaking into the multipliers.
                    let mut s0 = s.clone();
                    for i in 0..m {
                        s0[(i, i)] -= 1e-12;
                    }
                    let resid = &r - &s0 * &l;
                    l += ch.solve(&resid);
                    lambda = l.iter().copied().collect();
                }
                None => {
                    // Degenerate active set: drop the newest constraint.
                    active.pop();
                    continue;
                }
            }
        }

        // Primal iterate from the multipliers.
        u = problem.u_ref;
        slack.iter_mut().for_each(|s| *s = 0.0);
        for (i, &ai) in active.iter().enumerate() {
            let c = &cons[ai];
            for t in 0..N_INPUTS {
                u[t] += inv_wu[t] * c.a_u[t] * lambda[i];
            }
            if let Some(si) = c.slack {
                slack[si] -= inv_ws[si] * lambda[i];
            }
        }

        // Drop the most negative multiplier, if any.
        if let Some((drop_pos, &l)) = lambda
            .iter()
            .enumerate()
            .filter(|(_, &l)| l < -1e-10)
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        {
            let _ = l;
            active.remove(drop_pos);
            continue;
        }

        // Add the most violated inactive constraint.
        let mut worst = (QP_FEAS_TOL, None);
        for (ci, c) in cons.iter().enumerate() {
            if active.contains(&ci) {
                continue;
            }
            let mut v = c.a_u.dot(&u) - c.lb;
            if let Some(si) = c.slack {
                v -= slack[si];
            }
            if -v > worst.0 {
                worst = (-v, Some(ci));
            }
        }
        match worst.1 {
            Some(ci) => active.push(ci),
            None => {
                status = QpStatus::Optimal;
                break;
            }
        }
    }

    // At the iteration cap the active set can be one ahead of the last
    // multiplier solve; trim it so the KKT bookkeeping stays aligned.
    active.truncate(lambda.len());

    // KKT residuals: stationarity, primal feasibility, complementarity.
    // The solver's multipliers absorb the quadratic's factor 2, so
    // stationarity reads W (z - z_ref) = G_A^T lambda.
    let mut stat_u = InputVector::zeros();
    for t in 0..N_INPUTS {
        stat_u[t] = problem.w_u[t] * (u[t] - problem.u_ref[t]);
    }
    let mut stat_s: Vec<f64> = slack
        .iter()
        .zip(&slack_weight)
        .map(|(&s, &w)| w * s)
        .collect();
    let mut comp: f64 = 0.0;
    let mut feas: f64 = 0.0;
    for (i, &ai) in active.iter().enumerate() {
        let c = &cons[ai];
        for t in 0..N_INPUTS {
            stat_u[t] -= c.a_u[t] * lambda[i];
        }
        if let Some(si) = c.slack {
            stat_s[si] += lambda[i];
        }
        let mut v = c.a_u.dot(&u) - c.lb;
        if let Some(si) = c.slack {
            v -= slack[si];
        }
        comp = comp.max((lambda[i] * v).abs());
    }
    for c in &cons {
        let mut v = c.a_u.dot(&u) - c.lb;
        if let Some(si) = c.slack {
            v -= slack[si];
        }
        feas = feas.max(-v);
    }
    let kkt_residual = stat_u
        .iter()
        .chain(stat_s.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(comp)
        .max(feas.max(0.0));

    let per_row_slack = slack_of_row
        .iter()
        .map(|s| s.map_or(0.0, |si| slack[si]))
        .collect();
    QpSolution {
        u,
        slack: per_row_slack,
        status,
        kkt_residual,
        iterations,
        active: active.iter().map(|&ci| cons[ci].key).collect(),
    }
}

/// Stateful filter wrapper that warm-starts each tick from the previous
/// active set.
#[derive(Default)]
pub struct SafetyFilter {
    last_active: Vec<ActiveKey>,
}

impl SafetyFilter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn solve(&mut self, problem: &QpProblem) -> QpSolution {
        let sol = solve_qp_warm(problem, &self.last_active);
        self.last_active = sol.active.clone();
        sol
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_legs, integrate, EeState, RobotInput};
    use approx::assert_relative_eq;
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Standing pose: toes under their anchors, wheels on the ground.
    fn standing_state() -> RobotState {
        let legs = default_legs();
        let mut x = RobotState::default();
        x.body.z = 0.45;
        for g in &legs {
            x.ee[g.leg.index()] = EeState {
                x: g.anchor.x,
                z: g.wheel_radius,
                ..Default::default()
            };
        }
        x
    }

    #[test]
    fn pole_placement_examples_and_decay() {
        assert_eq!(pole_placement_gains(1.0), [1.0, 2.0]);
        assert_eq!(pole_placement_gains(5.0), [25.0, 10.0]);

        // hddot = -K1 h - K2 hdot from h(0)=1 decays without sign change
        // (critically damped).
        let k = pole_placement_gains(3.0);
        let (mut h, mut hd) = (1.0, 0.0);
        let dt = 1e-4;
        for _ in 0..200_000 {
            let hdd = -k[0] * h - k[1] * hd;
            hd += hdd * dt;
            h += hd * dt;
            assert!(h >= -1e-9, "h crossed zero");
        }
        assert!(h < 1e-6, "h did not decay: {h}");
    }

    #[test]
    fn ecbf_row_double_integrator_reduction() {
        // h = ee0 x position: row must reduce to u >= -K1 h - K2 hdot on the
        // matching input channel.
        let mut x = standing_state();
        x.ee[0].vx = 0.3;
        let f = drift(&x);
        let k = [4.0, 4.0];
        let sd = StateDeriv::linear(x.ee[0].x, &[(idx::ee_x(0), 1.0)]);
        let row = ecbf_row(
            &sd,
            &x,
            &f,
            k,
            RowKey::new(ConstraintKind::FootHeight, 0, 0, 0),
            true,
            1e6,
        )
        .unwrap();
        let mut expect_a = InputVector::zeros();
        expect_a[crate::model::input_idx::ee_ax(0)] = 1.0;
        assert_eq!(row.a, expect_a);
        assert_relative_eq!(row.lb, -k[0] * x.ee[0].x - k[1] * 0.3, epsilon = 1e-12);
        assert!(!row.vacuous);
    }

    #[test]
    fn ecbf_row_vacuous_when_input_unreachable() {
        // h = p_y: lateral origin position is not reachable by any input
        // at yaw 0 with zero speed (f and J couplings vanish).
        let x = RobotState::default();
        let f = drift(&x);
        let sd = StateDeriv::linear(x.origin.p.y, &[(idx::PY, 1.0)]);
        let row = ecbf_row(
            &sd,
            &x,
            &f,
            [1.0, 2.0],
            RowKey::new(ConstraintKind::FootHeight, 0, 0, 0),
            true,
            1e6,
        )
        .unwrap();
        assert!(row.vacuous);
    }

    /// Second time-difference of h along the true dynamics vs the row's
    /// model: hddot = -lb + a . u must hold at the linearization point.
    fn check_hddot_consistency<F>(x: &RobotState, sd: &StateDeriv, eval: F)
    where
        F: Fn(&RobotState) -> f64,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let u = RobotInput::from_vector(&InputVector::from_fn(|_, _| rng.gen::<f64>() - 0.5));
        let f = drift(x);
        let k = [1.0, 2.0];
        let row = ecbf_row(
            sd,
            x,
            &f,
            k,
            RowKey::new(ConstraintKind::FootHeight, 0, 0, 0),
            true,
            1e6,
        )
        .unwrap();
        // row: a.u >= -L_f^2 h - K eta  =>  predicted hddot = (a.u - lb) - K eta.
        let predicted = row.a.dot(&u.to_vector()) - row.lb - k[0] * row.h - k[1] * row.hdot;

        let dt = 1e-5;
        let plus = integrate(x, &u, dt).unwrap();
        let plus2 = integrate(&plus, &u, dt).unwrap();
        let h0 = eval(x);
        let h1 = eval(&plus);
        let h2 = eval(&plus2);
        let fd = (h2 - 2.0 * h1 + h0) / (dt * dt);
        let denom = fd.abs().max(1e-3);
        assert!(
            (predicted - fd).abs() / denom < 1e-3,
            "hddot mismatch: row {predicted} vs fd {fd}"
        );
    }

    #[test]
    fn joint_limit_rows_standing_and_fd() {
        let legs = default_legs();
        let cfg = SafetyConfig::default();
        let mut x = standing_state();
        x.origin.speed = 0.4;
        x.origin.yaw_rate = 0.2;
        x.body.vx = 0.1;
        x.ee[2].vz = -0.2;
        let rows = build_joint_limit_rows(&x, &legs, &cfg);
        assert_eq!(rows.len(), 24);
        for r in &rows {
            assert!(r.h > 0.0, "standing pose should be interior: {:?}", r.key);
        }

        // hddot consistency for a knee-min and a hip-max row via the scalar
        // joint evaluators.
        for g in &legs[..2] {
            let li = g.leg.index();
            let deps = [
                idx::BODY_X,
                idx::BODY_Z,
                idx::BODY_PITCH,
                idx::ee_x(li),
                idx::ee_z(li),
            ];
            let knee_sd = {
                let rows = build_joint_limit_rows(&x, &legs, &cfg);
                let _ = rows;
                // Rebuild the dual directly for the oracle.
                let bx = Dual2::<5>::var(x.body.x, 0);
                let bz = Dual2::<5>::var(x.body.z, 1);
                let pitch = Dual2::<5>::var(x.body.pitch, 2);
                let ex = Dual2::<5>::var(x.ee[li].x, 3);
                let ez = Dual2::<5>::var(x.ee[li].z, 4);
                let (sp, cp) = pitch.sin_cos();
                let hip_x = bx + cp.scale(g.anchor.x) + sp.scale(g.anchor.z);
                let hip_z = bz - sp.scale(g.anchor.x) + cp.scale(g.anchor.z);
                let px = hip_z - ez;
                let py = ex - hip_x;
                let knee = (px.sq() + py.sq()).sqrt() - Dual2::constant(g.knee_range.0);
                StateDeriv::from_dual(&knee, deps)
            };
            check_hddot_consistency(&x, &knee_sd, |s| {
                crate::model::joint_state(s, g).unwrap().knee - g.knee_range.0
            });
        }
    }

    #[test]
    fn body_collision_rows_fd_and_switching() {
        let cfg = SafetyConfig::default();
        let mut x = standing_state();
        x.origin.speed = 0.5;
        x.origin.yaw = 0.3;
        x.origin.yaw_rate = -0.2;
        x.body.vx = 0.05;
        x.body.pitch = 0.1;
        x.body.pitch_rate = 0.1;

        let near = Cuboid::axis_aligned(
            Vector3::new(0.9, 0.3, 0.45),
            Vector3::new(0.2, 0.2, 0.2),
        )
        .unwrap();
        let far = Cuboid::axis_aligned(Vector3::new(8.0, 0.0, 0.5), Vector3::new(0.3, 0.3, 0.3))
            .unwrap();
        let rows = build_body_collision_rows(&x, &[near, far], &cfg);
        assert_eq!(rows.len(), 2);
        // Far obstacle: exact margin reported, no slack instantiated.
        assert!(rows[1].h > 5.0);
        assert!(!rows[1].use_slack);
        assert!(rows[0].use_slack);

        // hddot consistency through the full smooth composite.
        let deps = [
            idx::PX,
            idx::PY,
            idx::PZ,
            idx::YAW,
            idx::BODY_X,
            idx::BODY_Z,
            idx::BODY_PITCH,
        ];
        let sp_ns = cfg.smoothing.without_switching();
        let mut cfg_ns = cfg.clone();
        cfg_ns.smoothing = sp_ns;
        let smooth_val = |s: &RobotState| {
            crate::geometry::ssat_value(
                &body_cuboid(s, &cfg.body_half_extents),
                &near,
                &cfg_ns.smoothing,
                MaxVariant::Lse,
                AbsVariant::XTanh,
            )
        };
        let sd = {
            let r = build_body_collision_rows(&x, &[near], &cfg_ns);
            let _ = r;
            let px = Dual2::<7>::var(x.origin.p.x, 0);
            let py = Dual2::<7>::var(x.origin.p.y, 1);
            let pz = Dual2::<7>::var(x.origin.p.z, 2);
            let yaw = Dual2::<7>::var(x.origin.yaw, 3);
            let bx = Dual2::<7>::var(x.body.x, 4);
            let bz = Dual2::<7>::var(x.body.z, 5);
            let pitch = Dual2::<7>::var(x.body.pitch, 6);
            let (sy, cy) = yaw.sin_cos();
            let center = [px + bx * cy, py + bx * sy, pz + bz];
            let body = DualBox::from_yaw_pitch(
                center,
                yaw,
                pitch,
                &nalgebra::Matrix3::identity(),
                [
                    cfg.body_half_extents.x,
                    cfg.body_half_extents.y,
                    cfg.body_half_extents.z,
                ],
            );
            let d = ssat_smooth_dual(
                &body,
                &DualBox::from_const(&near),
                &cfg_ns.smoothing,
                MaxVariant::Lse,
                AbsVariant::XTanh,
            );
            StateDeriv::from_dual(&d, deps)
        };
        check_hddot_consistency(&x, &sd, smooth_val);
    }

    #[test]
    fn toe_collision_rows_surface_and_center() {
        let cfg = SafetyConfig::default();
        let legs = default_legs();
        let obs = Cuboid::axis_aligned(Vector3::new(0.5, 0.25, 0.1), Vector3::new(0.1, 0.1, 0.1))
            .unwrap();
        let mut x = standing_state();
        let swing = [true, false, false, false, false, false];

        // Toe at the obstacle center: h = -1.
        x.ee[0].x = 0.5;
        x.ee[0].z = 0.1;
        let rows = build_toe_collision_rows(&x, &[obs], &legs, &swing, &cfg);
        assert_eq!(rows.len(), 1);
        assert_relative_eq!(rows[0].h, -1.0, epsilon = 1e-12);

        // Toe at a face plus the wheel radius: h ~ 0.
        x.ee[0].x = 0.5;
        x.ee[0].z = 0.1 + 0.1 + legs[0].wheel_radius;
        let rows = build_toe_collision_rows(&x, &[obs], &legs, &swing, &cfg);
        assert_relative_eq!(rows[0].h, 0.0, epsilon = 1e-9);

        // hddot consistency.
        let mut xm = x;
        xm.origin.speed = 0.3;
        xm.origin.yaw_rate = 0.4;
        xm.ee[0].vx = -0.2;
        xm.ee[0].vz = 0.3;
        let g0 = &legs[0];
        let deps = [idx::PX, idx::PY, idx::PZ, idx::YAW, idx::ee_x(0), idx::ee_z(0)];
        let px = Dual2::<6>::var(xm.origin.p.x, 0);
        let py = Dual2::<6>::var(xm.origin.p.y, 1);
        let pz = Dual2::<6>::var(xm.origin.p.z, 2);
        let yaw = Dual2::<6>::var(xm.origin.yaw, 3);
        let ex = Dual2::<6>::var(xm.ee[0].x, 4);
        let ez = Dual2::<6>::var(xm.ee[0].z, 5);
        let (sy, cy) = yaw.sin_cos();
        let w = [
            px + ex * cy - sy.scale(g0.anchor.y),
            py + ex * sy + cy.scale(g0.anchor.y),
            pz + ez,
        ];
        let d = superellipsoid_dual(&w, &obs, cfg.superellipsoid_n, g0.wheel_radius);
        let sd = StateDeriv::from_dual(&d, deps);
        check_hddot_consistency(&xm, &sd, |s| {
            crate::geometry::superellipsoid_margin(
                &crate::model::world_foot_position(s, g0),
                &obs,
                cfg.superellipsoid_n,
                g0.wheel_radius,
            )
            .unwrap()
            .h
        });
    }

    #[test]
    fn foothold_rows_signs() {
        let cfg = SafetyConfig::default();
        let legs = default_legs();
        let x = standing_state();
        // Square region centered on the LF foot's world xy.
        let foot = crate::model::world_foot_position(&x, &legs[0]);
        let c = Vector2::new(foot.x, foot.y);
        let region: Vec<HalfSpace2> = [
            (Vector2::new(1.0, 0.0), 0.3),
            (Vector2::new(-1.0, 0.0), 0.3),
            (Vector2::new(0.0, 1.0), 0.3),
            (Vector2::new(0.0, -1.0), 0.3),
        ]
        .into_iter()
        .map(|(a, m)| HalfSpace2 {
            a,
            b: m - a.dot(&c),
        })
        .collect();
        let constrained = [true, false, false, false, false, false];
        let rows = build_foothold_rows(&x, &region, &legs, &constrained, &cfg);
        assert_eq!(rows.len(), 4);
        for r in &rows {
            assert_relative_eq!(r.h, 0.3, epsilon = 1e-12);
        }

        // Move the foot onto the +x edge: that margin hits zero.
        let mut x2 = x;
        x2.ee[0].x += 0.3;
        let rows = build_foothold_rows(&x2, &region, &legs, &constrained, &cfg);
        assert_relative_eq!(rows[1].h, 0.0, epsilon = 1e-12);
        assert_relative_eq!(rows[0].h, 0.6, epsilon = 1e-12);
    }

    #[test]
    fn foot_height_rows() {
        let cfg = SafetyConfig::default();
        let x = standing_state();
        let floors = [0.0; 6];
        let rows = build_foot_height_rows(&x, &floors, &cfg);
        assert_eq!(rows.len(), 6);
        for r in &rows {
            assert_relative_eq!(r.h, 0.05, epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn stability_rows_signs_and_activation() {
        let cfg = SafetyConfig::default();
        let legs = default_legs();
        let x = standing_state();
        let rows = build_stability_rows(&x, &legs, &cfg);
        assert_eq!(rows.len(), 12);
        for r in &rows {
            assert!(r.h > 0.0, "nominal pose interior: {:?}", r.key);
        }

        // Push the body forward: the upper rows shrink and reach zero at the
        // shrunk front line (0.35 anchor - 0.05 shrink); the lower rows grow.
        // At the nominal stance every foot predicts the same front line, so
        // all upper rows activate together.
        let mut x2 = x;
        x2.body.x += 0.30;
        let rows = build_stability_rows(&x2, &legs, &cfg);
        for r in &rows {
            if r.key.sub == 0 {
                assert_relative_eq!(r.h, 0.0, epsilon = 1e-12);
            } else {
                assert!(r.h > 0.0, "{:?} h = {}", r.key, r.h);
            }
        }

        // A foot stepping forward loosens only its own upper row.
        let mut x3 = x2;
        x3.ee[0].x += 0.1;
        let rows = build_stability_rows(&x3, &legs, &cfg);
        for r in &rows {
            if r.key.sub == 0 {
                if r.key.leg == 0 {
                    assert_relative_eq!(r.h, 0.1, epsilon = 1e-12);
                } else {
                    assert_relative_eq!(r.h, 0.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn qp_unconstrained_returns_reference() {
        let u_ref = InputVector::from_fn(|i, _| i as f64 * 0.1 - 0.5);
        let p = QpProblem::new(u_ref, 1.0, vec![], InputLimits::default());
        let sol = solve_qp(&p);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!((sol.u - u_ref).norm(), 0.0, epsilon = 1e-12);
        assert!(sol.kkt_residual < 1e-10);
    }

    fn simple_row(a: InputVector, lb: f64, use_slack: bool, w: f64, tag: usize) -> EcbfRow {
        EcbfRow {
            key: RowKey::new(ConstraintKind::FootHeight, tag, 0, 0),
            a,
            lb,
            h: 1.0,
            hdot: 0.0,
            use_slack,
            slack_weight: w,
            vacuous: false,
        }
    }

    #[test]
    fn qp_single_row_projection() {
        // One violated half-space with near-rigid slack: the solution is the
        // weighted projection of u_ref onto a.u = lb.
        let mut a = InputVector::zeros();
        a[0] = 1.0;
        a[3] = 2.0;
        let u_ref = InputVector::repeat(-1.0);
        let lb = 4.0;
        let p = QpProblem::new(
            u_ref,
            1.0,
            vec![simple_row(a, lb, true, 1e12, 0)],
            InputLimits::default(),
        );
        let sol = solve_qp(&p);
        assert_eq!(sol.status, QpStatus::Optimal);
        // Closed form: u = u_ref + a (lb - a.u_ref) / |a|^2 for unit weights.
        let expect = u_ref + a * ((lb - a.dot(&u_ref)) / a.norm_squared());
        assert_relative_eq!((sol.u - expect).norm(), 0.0, epsilon = 1e-5);
        assert!(sol.kkt_residual < 1e-6);
    }

    #[test]
    fn qp_contradictory_rows_use_slack() {
        // u0 >= 1 and -u0 >= 1 cannot both hold; slack absorbs the gap and
        // the result stays finite with nonzero slack.
        let mut a1 = InputVector::zeros();
        a1[0] = 1.0;
        let mut a2 = InputVector::zeros();
        a2[0] = -1.0;
        let p = QpProblem::new(
            InputVector::zeros(),
            1.0,
            vec![
                simple_row(a1, 1.0, true, 10.0, 0),
                simple_row(a2, 1.0, true, 10.0, 1),
            ],
            InputLimits::default(),
        );
        let sol = solve_qp(&p);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.u.iter().all(|v| v.is_finite()));
        assert!(sol.slack.iter().any(|&s| s < -1e-3), "slack: {:?}", sol.slack);
        assert!(sol.kkt_residual < 1e-6);
    }

    #[test]
    fn qp_respects_box_bounds() {
        let mut limits = InputLimits::default();
        limits.upper[0] = 0.5;
        let u_ref = {
            let mut u = InputVector::zeros();
            u[0] = 3.0;
            u
        };
        let p = QpProblem::new(u_ref, 1.0, vec![], limits);
        let sol = solve_qp(&p);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert_relative_eq!(sol.u[0], 0.5, epsilon = 1e-9);
    }

    /// Brute-force oracle: enumerate every active subset, solve the equality
    /// QP, keep the best feasible KKT point.
    fn brute_force(
        w: &[f64],
        zref: &[f64],
        rows: &[(Vec<f64>, f64)], // (g, lb) over all variables
    ) -> Vec<f64> {
        let n = w.len();
        let m = rows.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 0..(1u32 << m) {
            let act: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            let k = act.len();
            if k > n {
                continue;
            }
            let mut s = DMatrix::zeros(k, k);
            let mut r = DVector::zeros(k);
            for (i, &ai) in act.iter().enumerate() {
                for (j, &aj) in act.iter().enumerate() {
                    s[(i, j)] = (0..n)
                        .map(|t| rows[ai].0[t] * rows[aj].0[t] / w[t])
                        .sum::<f64>();
                }
                r[i] = rows[ai].1
                    - (0..n).map(|t| rows[ai].0[t] * zref[t]).sum::<f64>();
            }
            let lam = match s.clone().qr().solve(&r) {
                Some(l) => l,
                None => continue,
            };
            if lam.iter().any(|&l| l < -1e-9) {
                continue;
            }
            let mut z = zref.to_vec();
            for (i, &ai) in act.iter().enumerate() {
                for t in 0..n {
                    z[t] += rows[ai].0[t] * lam[i] / w[t];
                }
            }
            let feasible = rows.iter().all(|(g, lb)| {
                (0..n).map(|t| g[t] * z[t]).sum::<f64>() >= lb - 1e-8
            });
            if !feasible {
                continue;
            }
            let obj: f64 = (0..n).map(|t| w[t] * (z[t] - zref[t]).powi(2)).sum();
            if best.as_ref().map_or(true, |(b, _)| obj < b - 1e-12) {
                best = Some((obj, z));
            }
        }
        best.expect("feasible subset exists").1
    }

    #[test]
    fn qp_matches_brute_force_enumeration() {
        // Random 3-variable, <=3-row problems on the first three inputs; the
        // remaining inputs stay at the reference and do not interact.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let wide = {
            let mut l = InputLimits::default();
            l.lower = InputVector::repeat(-1e6);
            l.upper = InputVector::repeat(1e6);
            l
        };
        for trial in 0..1000 {
            let n_rows = 1 + (trial % 3);
            let mut rows = Vec::new();
            let mut oracle_rows = Vec::new();
            for t in 0..n_rows {
                let mut a = InputVector::zeros();
                let mut g = vec![0.0; 3];
                for j in 0..3 {
                    let v = (rng.gen::<f64>() - 0.5) * 2.0;
                    a[j] = v;
                    g[j] = v;
                }
                let lb = (rng.gen::<f64>() - 0.5) * 2.0;
                rows.push(simple_row(a, lb, false, 1.0, t));
                oracle_rows.push((g, lb));
            }
            let mut u_ref = InputVector::zeros();
            let mut zref = vec![0.0; 3];
            for j in 0..3 {
                let v = (rng.gen::<f64>() - 0.5) * 2.0;
                u_ref[j] = v;
                zref[j] = v;
            }
            let p = QpProblem::new(u_ref, 1.0, rows, wide);
            let sol = solve_qp(&p);
            assert_eq!(sol.status, QpStatus::Optimal, "trial {trial}");
            assert!(sol.kkt_residual < 1e-6, "trial {trial}: {}", sol.kkt_residual);
            let z = brute_force(&[1.0; 3], &zref, &oracle_rows);
            for j in 0..3 {
                assert!(
                    (sol.u[j] - z[j]).abs() < 1e-6,
                    "trial {trial}: u[{j}] {} vs {}",
                    sol.u[j],
                    z[j]
                );
            }
        }
    }

    #[test]
    fn qp_kkt_on_random_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..1000 {
            let n_rows = 1 + rng.gen_range(0..8);
            let rows: Vec<EcbfRow> = (0..n_rows)
                .map(|t| {
                    let a = InputVector::from_fn(|_, _| (rng.gen::<f64>() - 0.5) * 2.0);
                    simple_row(a, rng.gen::<f64>() * 2.0 - 0.5, rng.gen::<bool>(), 100.0, t)
                })
                .collect();
            let u_ref = InputVector::from_fn(|_, _| (rng.gen::<f64>() - 0.5) * 4.0);
            let p = QpProblem::new(u_ref, 1.0, rows, InputLimits::default());
            let sol = solve_qp(&p);
            assert_eq!(sol.status, QpStatus::Optimal);
            assert!(sol.kkt_residual < 1e-6, "kkt {}", sol.kkt_residual);
        }
    }

    #[test]
    fn qp_deterministic_and_warm_start_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let rows: Vec<EcbfRow> = (0..5)
            .map(|t| {
                let a = InputVector::from_fn(|_, _| (rng.gen::<f64>() - 0.5) * 2.0);
                simple_row(a, 1.0, true, 1e4, t)
            })
            .collect();
        let u_ref = InputVector::repeat(-0.3);
        let p = QpProblem::new(u_ref, 1.0, rows, InputLimits::default());
        let cold = solve_qp(&p);
        let again = solve_qp(&p);
        assert_eq!(cold.u, again.u);
        let warm = solve_qp_warm(&p, &cold.active);
        assert_relative_eq!((warm.u - cold.u).norm(), 0.0, epsilon = 1e-9);
        assert!(warm.iterations <= cold.iterations);
    }

    #[test]
    fn filter_minimality() {
        // Reference already satisfies the rows: output tracks it exactly.
        let mut a = InputVector::zeros();
        a[0] = 1.0;
        let u_ref = InputVector::repeat(0.5);
        let p = QpProblem::new(
            u_ref,
            1.0,
            vec![simple_row(a, -1.0, true, 1e6, 0)],
            InputLimits::default(),
        );
        let sol = solve_qp(&p);
        assert!((sol.u - u_ref).norm() <= 1e-9);
    }

    #[test]
    fn forward_invariance_double_integrator() {
        // 1D testbed on the ee0 x channel: h = x, adversarial u_ref = -10
        // for 10 s at 1 kHz. The filtered trajectory must keep h >= -1e-6.
        let k = pole_placement_gains(4.0);
        let mut x = RobotState::default();
        x.ee[0].x = 1.0;
        let dt = 1e-3;
        let mut filter = SafetyFilter::new();
        for _ in 0..10_000 {
            let f = drift(&x);
            let sd = StateDeriv::linear(x.ee[0].x, &[(idx::ee_x(0), 1.0)]);
            let row = ecbf_row(
                &sd,
                &x,
                &f,
                k,
                RowKey::new(ConstraintKind::FootHeight, 0, 0, 0),
                false,
                1e6,
            )
            .unwrap();
            let mut u_ref = InputVector::zeros();
            u_ref[crate::model::input_idx::ee_ax(0)] = -10.0;
            let p = QpProblem::new(u_ref, 1.0, vec![row], InputLimits::default());
            let sol = filter.solve(&p);
            assert_eq!(sol.status, QpStatus::Optimal);
            x = integrate(&x, &RobotInput::from_vector(&sol.u), dt).unwrap();
            assert!(x.ee[0].x >= -1e-6, "h = {}", x.ee[0].x);
        }
    }
}
