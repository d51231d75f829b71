//! Ground-moving-origin whole-body kinematic model.
//!
//! The origin frame rides on the ground under the robot and follows unicycle
//! dynamics; the body pose and the six end effectors are expressed relative
//! to it as double integrators. The origin has no lateral state, so the body
//! center line always lies in the origin's x-z plane; each leg keeps a fixed
//! lateral offset given by its hip anchor.
//!
//! State layout (36): `[p_x, p_y, p_z, yaw, speed, yaw_rate]` for the origin,
//! `[x, z, pitch, vx, vz, pitch_rate]` for the body, then per leg
//! `[x, z, vx, vz]` in leg order LF, MF, RF, LR, MR, RR.
//! Input layout (17): `[accel, yaw_accel]`, 3 body accelerations, then 2 per
//! leg.

use crate::geometry::rot_z;
use crate::{Error, Result};
use nalgebra::{SMatrix, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

pub const N_STATES: usize = 36;
pub const N_INPUTS: usize = 17;
pub const N_LEGS: usize = 6;

pub type StateVector = SVector<f64, N_STATES>;
pub type InputVector = SVector<f64, N_INPUTS>;

/// State vector indices.
pub mod idx {
    pub const PX: usize = 0;
    pub const PY: usize = 1;
    pub const PZ: usize = 2;
    pub const YAW: usize = 3;
    pub const SPEED: usize = 4;
    pub const YAW_RATE: usize = 5;
    pub const BODY_X: usize = 6;
    pub const BODY_Z: usize = 7;
    pub const BODY_PITCH: usize = 8;
    pub const BODY_VX: usize = 9;
    pub const BODY_VZ: usize = 10;
    pub const BODY_PITCH_RATE: usize = 11;
    pub const EE_BASE: usize = 12;

    pub const fn ee_x(leg: usize) -> usize {
        EE_BASE + 4 * leg
    }
    pub const fn ee_z(leg: usize) -> usize {
        EE_BASE + 4 * leg + 1
    }
    pub const fn ee_vx(leg: usize) -> usize {
        EE_BASE + 4 * leg + 2
    }
    pub const fn ee_vz(leg: usize) -> usize {
        EE_BASE + 4 * leg + 3
    }
}

/// Input vector indices.
pub mod input_idx {
    pub const ACCEL: usize = 0;
    pub const YAW_ACCEL: usize = 1;
    pub const BODY_AX: usize = 2;
    pub const BODY_AZ: usize = 3;
    pub const BODY_PITCH_ACCEL: usize = 4;

    pub const fn ee_ax(leg: usize) -> usize {
        5 + 2 * leg
    }
    pub const fn ee_az(leg: usize) -> usize {
        5 + 2 * leg + 1
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct OriginState {
    pub p: Vector3<f64>,
    pub yaw: f64,
    pub speed: f64,
    pub yaw_rate: f64,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct BodyState {
    pub x: f64,
    pub z: f64,
    pub pitch: f64,
    pub vx: f64,
    pub vz: f64,
    pub pitch_rate: f64,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct EeState {
    pub x: f64,
    pub z: f64,
    pub vx: f64,
    pub vz: f64,
}

/// Full 36-dimensional robot state.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct RobotState {
    pub origin: OriginState,
    pub body: BodyState,
    pub ee: [EeState; N_LEGS],
}

impl RobotState {
    pub fn to_vector(&self) -> StateVector {
        let mut v = StateVector::zeros();
        v[idx::PX] = self.origin.p.x;
        v[idx::PY] = self.origin.p.y;
        v[idx::PZ] = self.origin.p.z;
        v[idx::YAW] = self.origin.yaw;
        v[idx::SPEED] = self.origin.speed;
        v[idx::YAW_RATE] = self.origin.yaw_rate;
        v[idx::BODY_X] = self.body.x;
        v[idx::BODY_Z] = self.body.z;
        v[idx::BODY_PITCH] = self.body.pitch;
        v[idx::BODY_VX] = self.body.vx;
        v[idx::BODY_VZ] = self.body.vz;
        v[idx::BODY_PITCH_RATE] = self.body.pitch_rate;
        for (i, ee) in self.ee.iter().enumerate() {
            v[idx::ee_x(i)] = ee.x;
            v[idx::ee_z(i)] = ee.z;
            v[idx::ee_vx(i)] = ee.vx;
            v[idx::ee_vz(i)] = ee.vz;
        }
        v
    }

    pub fn from_vector(v: &StateVector) -> Self {
        let mut s = Self::default();
        s.origin.p = Vector3::new(v[idx::PX], v[idx::PY], v[idx::PZ]);
        s.origin.yaw = v[idx::YAW];
        s.origin.speed = v[idx::SPEED];
        s.origin.yaw_rate = v[idx::YAW_RATE];
        s.body.x = v[idx::BODY_X];
        s.body.z = v[idx::BODY_Z];
        s.body.pitch = v[idx::BODY_PITCH];
        s.body.vx = v[idx::BODY_VX];
        s.body.vz = v[idx::BODY_VZ];
        s.body.pitch_rate = v[idx::BODY_PITCH_RATE];
        for i in 0..N_LEGS {
            s.ee[i] = EeState {
                x: v[idx::ee_x(i)],
                z: v[idx::ee_z(i)],
                vx: v[idx::ee_vx(i)],
                vz: v[idx::ee_vz(i)],
            };
        }
        s
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|x| x.is_finite())
    }
}

/// Per-leg input block.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct EeInput {
    pub ax: f64,
    pub az: f64,
}

/// Full 17-dimensional input.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct RobotInput {
    pub accel: f64,
    pub yaw_accel: f64,
    pub body_ax: f64,
    pub body_az: f64,
    pub body_pitch_accel: f64,
    pub ee: [EeInput; N_LEGS],
}

impl RobotInput {
    pub fn to_vector(&self) -> InputVector {
        let mut v = InputVector::zeros();
        v[input_idx::ACCEL] = self.accel;
        v[input_idx::YAW_ACCEL] = self.yaw_accel;
        v[input_idx::BODY_AX] = self.body_ax;
        v[input_idx::BODY_AZ] = self.body_az;
        v[input_idx::BODY_PITCH_ACCEL] = self.body_pitch_accel;
        for (i, ee) in self.ee.iter().enumerate() {
            v[input_idx::ee_ax(i)] = ee.ax;
            v[input_idx::ee_az(i)] = ee.az;
        }
        v
    }

    pub fn from_vector(v: &InputVector) -> Self {
        let mut u = Self {
            accel: v[input_idx::ACCEL],
            yaw_accel: v[input_idx::YAW_ACCEL],
            body_ax: v[input_idx::BODY_AX],
            body_az: v[input_idx::BODY_AZ],
            body_pitch_accel: v[input_idx::BODY_PITCH_ACCEL],
            ..Default::default()
        };
        for i in 0..N_LEGS {
            u.ee[i] = EeInput {
                ax: v[input_idx::ee_ax(i)],
                az: v[input_idx::ee_az(i)],
            };
        }
        u
    }
}

/// Leg identity, in state-vector order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LegId {
    LF,
    MF,
    RF,
    LR,
    MR,
    RR,
}

pub const ALL_LEGS: [LegId; 6] = [
    LegId::LF,
    LegId::MF,
    LegId::RF,
    LegId::LR,
    LegId::MR,
    LegId::RR,
];

impl LegId {
    pub const fn index(self) -> usize {
        match self {
            LegId::LF => 0,
            LegId::MF => 1,
            LegId::RF => 2,
            LegId::LR => 3,
            LegId::MR => 4,
            LegId::RR => 5,
        }
    }

    pub const fn is_left(self) -> bool {
        matches!(self, LegId::LF | LegId::MF | LegId::LR)
    }

    pub const fn is_middle(self) -> bool {
        matches!(self, LegId::MF | LegId::MR)
    }
}

/// Kinematic parameters of one leg.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LegGeometry {
    pub leg: LegId,
    /// Hip anchor offset in the body frame (m). The y component doubles as
    /// the leg's fixed lateral offset from the origin center line.
    pub anchor: Vector3<f64>,
    /// Hip angle range (rad), outward positive.
    pub hip_range: (f64, f64),
    /// Prismatic knee length range (m).
    pub knee_range: (f64, f64),
    pub wheel_radius: f64,
}

impl LegGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.hip_range.0 >= self.hip_range.1 || self.knee_range.0 >= self.knee_range.1 {
            return Err(Error::InvalidParam("leg joint ranges must be non-empty".into()));
        }
        if !(self.wheel_radius > 0.0) {
            return Err(Error::InvalidParam("wheel radius must be positive".into()));
        }
        Ok(())
    }
}

/// Default six-leg layout. Corner legs get the symmetric +-22.5 deg hip
/// range; middle legs -5 deg inward to +45 deg outward. The knee has a
/// 500 mm stroke.
pub fn default_legs() -> [LegGeometry; N_LEGS] {
    let deg = std::f64::consts::PI / 180.0;
    let mut out = [LegGeometry {
        leg: LegId::LF,
        anchor: Vector3::zeros(),
        hip_range: (-22.5 * deg, 22.5 * deg),
        knee_range: (0.12, 0.62),
        wheel_radius: 0.05,
    }; N_LEGS];
    for (i, leg) in ALL_LEGS.into_iter().enumerate() {
        let ax = match leg {
            LegId::LF | LegId::RF => 0.35,
            LegId::MF | LegId::MR => 0.0,
            LegId::LR | LegId::RR => -0.35,
        };
        let ay = if leg.is_left() { 0.25 } else { -0.25 };
        out[i].leg = leg;
        out[i].anchor = Vector3::new(ax, ay, 0.0);
        if leg.is_middle() {
            out[i].hip_range = (-5.0 * deg, 45.0 * deg);
        }
    }
    out
}

/// Knee extension plus hip rotation for one leg.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct JointState {
    pub knee: f64,
    pub hip: f64,
    pub feasible: bool,
}

/// Inverse kinematics in the leg plane: `p` is the toe offset from the hip in
/// leg-frame coordinates (x down the leg at zero hip angle, y forward).
pub fn leg_ik(p: &Vector2<f64>, geom: &LegGeometry) -> Result<JointState> {
    let r = p.norm();
    if r < 1e-9 {
        return Err(Error::InvalidParam(
            "toe at hip anchor: hip angle undefined".into(),
        ));
    }
    let hip = p.y.atan2(p.x);
    let feasible = r >= geom.knee_range.0
        && r <= geom.knee_range.1
        && hip >= geom.hip_range.0
        && hip <= geom.hip_range.1;
    Ok(JointState {
        knee: r,
        hip,
        feasible,
    })
}

/// Forward map of [`leg_ik`].
pub fn leg_fk(j: &JointState) -> Vector2<f64> {
    Vector2::new(j.knee * j.hip.cos(), j.knee * j.hip.sin())
}

/// Toe offset from the hip in the leg frame, from origin-relative states.
/// The leg plane is vertical: x points down (ground-ward), y forward.
pub fn leg_frame_offset(x: &RobotState, geom: &LegGeometry) -> Vector2<f64> {
    let ee = x.ee[geom.leg.index()];
    // Hip anchor in origin coordinates; the body pitches about its center.
    let (sp, cp) = x.body.pitch.sin_cos();
    let hip_x = x.body.x + cp * geom.anchor.x + sp * geom.anchor.z;
    let hip_z = x.body.z - sp * geom.anchor.x + cp * geom.anchor.z;
    let dx = ee.x - hip_x;
    let dz = ee.z - hip_z;
    Vector2::new(-dz, dx)
}

/// Joint state of one leg from the whole-body state.
pub fn joint_state(x: &RobotState, geom: &LegGeometry) -> Result<JointState> {
    leg_ik(&leg_frame_offset(x, geom), geom)
}

/// Drift field `f(x)`: unicycle origin, double-integrator local blocks.
pub fn drift(x: &RobotState) -> StateVector {
    let mut f = StateVector::zeros();
    let (s, c) = x.origin.yaw.sin_cos();
    f[idx::PX] = x.origin.speed * c;
    f[idx::PY] = x.origin.speed * s;
    f[idx::YAW] = x.origin.yaw_rate;
    f[idx::BODY_X] = x.body.vx;
    f[idx::BODY_Z] = x.body.vz;
    f[idx::BODY_PITCH] = x.body.pitch_rate;
    for i in 0..N_LEGS {
        f[idx::ee_x(i)] = x.ee[i].vx;
        f[idx::ee_z(i)] = x.ee[i].vz;
    }
    f
}

/// Dense Jacobian of the drift field (reference implementation; the safety
/// filter uses [`drift_jacobian_transpose_mul`]).
pub fn drift_jacobian(x: &RobotState) -> SMatrix<f64, N_STATES, N_STATES> {
    let mut j = SMatrix::zeros();
    let (s, c) = x.origin.yaw.sin_cos();
    j[(idx::PX, idx::YAW)] = -x.origin.speed * s;
    j[(idx::PX, idx::SPEED)] = c;
    j[(idx::PY, idx::YAW)] = x.origin.speed * c;
    j[(idx::PY, idx::SPEED)] = s;
    j[(idx::YAW, idx::YAW_RATE)] = 1.0;
    j[(idx::BODY_X, idx::BODY_VX)] = 1.0;
    j[(idx::BODY_Z, idx::BODY_VZ)] = 1.0;
    j[(idx::BODY_PITCH, idx::BODY_PITCH_RATE)] = 1.0;
    for i in 0..N_LEGS {
        j[(idx::ee_x(i), idx::ee_vx(i))] = 1.0;
        j[(idx::ee_z(i), idx::ee_vz(i))] = 1.0;
    }
    j
}

/// `(df/dx)^T v`, exploiting the fixed sparsity of the drift Jacobian. This
/// is the hot operation in constraint-row assembly.
pub fn drift_jacobian_transpose_mul(x: &RobotState, v: &StateVector) -> StateVector {
    let mut out = StateVector::zeros();
    let (s, c) = x.origin.yaw.sin_cos();
    out[idx::YAW] = -x.origin.speed * s * v[idx::PX] + x.origin.speed * c * v[idx::PY];
    out[idx::SPEED] = c * v[idx::PX] + s * v[idx::PY];
    out[idx::YAW_RATE] = v[idx::YAW];
    out[idx::BODY_VX] = v[idx::BODY_X];
    out[idx::BODY_VZ] = v[idx::BODY_Z];
    out[idx::BODY_PITCH_RATE] = v[idx::BODY_PITCH];
    for i in 0..N_LEGS {
        out[idx::ee_vx(i)] = v[idx::ee_x(i)];
        out[idx::ee_vz(i)] = v[idx::ee_z(i)];
    }
    out
}

/// Constant input matrix `g`: each input feeds exactly one rate row.
pub fn input_matrix() -> SMatrix<f64, N_STATES, N_INPUTS> {
    let mut g = SMatrix::zeros();
    for (row, col) in input_rows().into_iter().zip(0..N_INPUTS) {
        g[(row, col)] = 1.0;
    }
    g
}

/// State row driven by each input column, in column order.
pub const fn input_rows() -> [usize; N_INPUTS] {
    let mut rows = [0usize; N_INPUTS];
    rows[input_idx::ACCEL] = idx::SPEED;
    rows[input_idx::YAW_ACCEL] = idx::YAW_RATE;
    rows[input_idx::BODY_AX] = idx::BODY_VX;
    rows[input_idx::BODY_AZ] = idx::BODY_VZ;
    rows[input_idx::BODY_PITCH_ACCEL] = idx::BODY_PITCH_RATE;
    let mut i = 0;
    while i < N_LEGS {
        rows[input_idx::ee_ax(i)] = idx::ee_vx(i);
        rows[input_idx::ee_az(i)] = idx::ee_vz(i);
        i += 1;
    }
    rows
}

fn dynamics(v: &StateVector, u: &InputVector) -> StateVector {
    let x = RobotState::from_vector(v);
    let mut dv = drift(&x);
    for (row, col) in input_rows().into_iter().zip(0..N_INPUTS) {
        dv[row] += u[col];
    }
    dv
}

/// One explicit RK4 step of the kinematic model.
pub fn integrate(x: &RobotState, u: &RobotInput, dt: f64) -> Result<RobotState> {
    if !(dt > 0.0 && dt <= 0.01) {
        return Err(Error::InvalidParam(format!(
            "dt must be in (0, 0.01], got {dt}"
        )));
    }
    let v = x.to_vector();
    let uv = u.to_vector();
    let k1 = dynamics(&v, &uv);
    let k2 = dynamics(&(v + k1 * (dt / 2.0)), &uv);
    let k3 = dynamics(&(v + k2 * (dt / 2.0)), &uv);
    let k4 = dynamics(&(v + k3 * dt), &uv);
    let next = v + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    if !next.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("integration produced non-finite state"));
    }
    Ok(RobotState::from_vector(&next))
}

/// World position of the toe of `leg`.
pub fn world_foot_position(x: &RobotState, geom: &LegGeometry) -> Vector3<f64> {
    let ee = x.ee[geom.leg.index()];
    x.origin.p + rot_z(x.origin.yaw) * Vector3::new(ee.x, geom.anchor.y, ee.z)
}

/// World velocity of the toe of `leg`.
pub fn world_foot_velocity(x: &RobotState, geom: &LegGeometry) -> Vector3<f64> {
    let ee = x.ee[geom.leg.index()];
    let local = Vector3::new(ee.x, geom.anchor.y, ee.z);
    let local_rate = Vector3::new(ee.vx, 0.0, ee.vz);
    frame_point_velocity(x, &local, &local_rate)
}

/// World position of the body center.
pub fn world_body_position(x: &RobotState) -> Vector3<f64> {
    x.origin.p + rot_z(x.origin.yaw) * Vector3::new(x.body.x, 0.0, x.body.z)
}

/// World velocity of the body center.
pub fn world_body_velocity(x: &RobotState) -> Vector3<f64> {
    frame_point_velocity(
        x,
        &Vector3::new(x.body.x, 0.0, x.body.z),
        &Vector3::new(x.body.vx, 0.0, x.body.vz),
    )
}

/// World velocity of an origin-frame point with the given local rate.
fn frame_point_velocity(
    x: &RobotState,
    local: &Vector3<f64>,
    local_rate: &Vector3<f64>,
) -> Vector3<f64> {
    let r = rot_z(x.origin.yaw);
    let (s, c) = x.origin.yaw.sin_cos();
    // d/dyaw of Rz, times yaw_rate.
    let rdot = nalgebra::Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0) * x.origin.yaw_rate;
    r * Vector3::new(x.origin.speed, 0.0, 0.0) + rdot * local + r * local_rate
}

/// Re-express the state in a new origin frame so that world-frame quantities
/// are preserved.
///
/// The model has no lateral states, so the representation constrains the body
/// center line to the origin's x-z plane and each toe to its leg's fixed
/// lateral offset. The caller (the gait schedule) picks `new_p` / `new_yaw`
/// on the body center line; lateral components that the new frame cannot
/// express are dropped. Same-heading translations without a lateral
/// component are exact for every quantity; a yaw change toward the body's
/// direction of travel with the new frame under the body is exact for the
/// body.
pub fn origin_exchange(
    x: &RobotState,
    new_p: Vector3<f64>,
    new_yaw: f64,
    legs: &[LegGeometry; N_LEGS],
) -> RobotState {
    let mut out = *x;
    out.origin.p = new_p;
    out.origin.yaw = new_yaw;
    // The virtual origin keeps its forward speed and yaw rate.
    out.origin.speed = x.origin.speed;
    out.origin.yaw_rate = x.origin.yaw_rate;

    let r_new = rot_z(new_yaw);
    let (s, c) = new_yaw.sin_cos();
    let rdot_new =
        nalgebra::Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0) * out.origin.yaw_rate;
    let origin_vel = r_new * Vector3::new(out.origin.speed, 0.0, 0.0);

    // local = R' (w - p'); local_rate = R' (w_dot - p_dot' - Rdot' local).
    let reexpress = |w: Vector3<f64>, w_dot: Vector3<f64>| -> (Vector3<f64>, Vector3<f64>) {
        let local = r_new.transpose() * (w - new_p);
        let local_rate = r_new.transpose() * (w_dot - origin_vel - rdot_new * local);
        (local, local_rate)
    };

    let (bl, blr) = reexpress(world_body_position(x), world_body_velocity(x));
    out.body.x = bl.x;
    out.body.z = bl.z;
    out.body.vx = blr.x;
    out.body.vz = blr.z;

    for geom in legs {
        let i = geom.leg.index();
        let (fl, flr) = reexpress(world_foot_position(x, geom), world_foot_velocity(x, geom));
        out.ee[i].x = fl.x;
        out.ee[i].z = fl.z;
        out.ee[i].vx = flr.x;
        out.ee[i].vz = flr.z;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_state(rng: &mut ChaCha8Rng) -> RobotState {
        let v = StateVector::from_fn(|_, _| rng.gen::<f64>() * 2.0 - 1.0);
        RobotState::from_vector(&v)
    }

    fn random_input(rng: &mut ChaCha8Rng) -> RobotInput {
        let v = InputVector::from_fn(|_, _| rng.gen::<f64>() * 2.0 - 1.0);
        RobotInput::from_vector(&v)
    }

    #[test]
    fn vector_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_state(&mut rng);
        let v = x.to_vector();
        assert_eq!(RobotState::from_vector(&v).to_vector(), v);
        let u = random_input(&mut rng);
        let uv = u.to_vector();
        assert_eq!(RobotInput::from_vector(&uv).to_vector(), uv);
    }

    #[test]
    fn drift_hand_cases() {
        let x = RobotState::default();
        assert_eq!(drift(&x), StateVector::zeros());

        let mut x = RobotState::default();
        x.origin.speed = 1.0;
        let f = drift(&x);
        assert_eq!(f[idx::PX], 1.0);
        assert_eq!(f[idx::PY], 0.0);

        x.origin.yaw = std::f64::consts::FRAC_PI_2;
        let f = drift(&x);
        assert_relative_eq!(f[idx::PX], 0.0, epsilon = 1e-12);
        assert_relative_eq!(f[idx::PY], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn input_matrix_structure() {
        let g = input_matrix();
        // One 1 per column, at the documented row.
        for col in 0..N_INPUTS {
            let column = g.column(col);
            assert_eq!(column.iter().filter(|&&v| v != 0.0).count(), 1);
            assert_eq!(column[input_rows()[col]], 1.0);
        }
        assert_eq!(g.column(input_idx::ACCEL)[idx::SPEED], 1.0);
        assert_eq!(g.rank(1e-12), N_INPUTS);
    }

    #[test]
    fn drift_jacobian_matches_fd_and_sparse_mul() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let x = random_state(&mut rng);
            let j = drift_jacobian(&x);
            let v0 = x.to_vector();
            let eps = 1e-6;
            for col in 0..N_STATES {
                let mut vp = v0;
                let mut vm = v0;
                vp[col] += eps;
                vm[col] -= eps;
                let fd = (drift(&RobotState::from_vector(&vp))
                    - drift(&RobotState::from_vector(&vm)))
                    / (2.0 * eps);
                for row in 0..N_STATES {
                    assert_relative_eq!(j[(row, col)], fd[row], epsilon = 1e-8);
                }
            }
            let v = StateVector::from_fn(|_, _| rng.gen::<f64>() - 0.5);
            let dense = j.transpose() * v;
            let sparse = drift_jacobian_transpose_mul(&x, &v);
            assert_relative_eq!((dense - sparse).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn integrate_identity_and_constant_acceleration() {
        let x = RobotState::default();
        let u = RobotInput::default();
        let next = integrate(&x, &u, 1e-3).unwrap();
        assert_eq!(next.to_vector(), x.to_vector());

        // Straight-line constant acceleration: closed form p = a t^2 / 2.
        let mut u = RobotInput::default();
        u.accel = 2.0;
        u.ee[3].az = -1.0;
        let mut x = RobotState::default();
        let dt = 1e-3;
        for _ in 0..1000 {
            x = integrate(&x, &u, dt).unwrap();
        }
        assert_relative_eq!(x.origin.speed, 2.0, epsilon = 1e-10);
        assert_relative_eq!(x.origin.p.x, 1.0, epsilon = 1e-10);
        assert_relative_eq!(x.origin.p.y, 0.0, epsilon = 1e-12);
        assert_relative_eq!(x.ee[3].z, -0.5, epsilon = 1e-12);
        assert_relative_eq!(x.ee[3].vz, -1.0, epsilon = 1e-12);
    }

    #[test]
    fn integrate_unicycle_arc() {
        // Constant speed and yaw rate trace a circle of radius v/w.
        let mut x = RobotState::default();
        x.origin.speed = 1.2;
        x.origin.yaw_rate = 0.8;
        let u = RobotInput::default();
        let dt = 1e-3;
        for _ in 0..1000 {
            x = integrate(&x, &u, dt).unwrap();
        }
        let radius = 1.2 / 0.8;
        let angle = 0.8; // after 1 s
        assert_relative_eq!(x.origin.yaw, angle, epsilon = 1e-12);
        assert_relative_eq!(x.origin.p.x, radius * angle.sin(), epsilon = 1e-8);
        assert_relative_eq!(x.origin.p.y, radius * (1.0 - angle.cos()), epsilon = 1e-8);
    }

    #[test]
    fn directional_derivative_second_order_convergence() {
        // For smooth h, (h(x_+dt) - h(x_-dt)) / (2 dt) -> grad_h . (f + g u)
        // with O(dt^2) error along integrate trajectories.
        let h = |v: &StateVector| (v[idx::PX]).sin() + v[idx::SPEED].powi(2) + v[idx::YAW].cos();
        let grad_h = |v: &StateVector| {
            let mut g = StateVector::zeros();
            g[idx::PX] = v[idx::PX].cos();
            g[idx::SPEED] = 2.0 * v[idx::SPEED];
            g[idx::YAW] = -v[idx::YAW].sin();
            g
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_state(&mut rng);
        let u = random_input(&mut rng);
        let analytic = grad_h(&x.to_vector()).dot(&dynamics(&x.to_vector(), &u.to_vector()));

        let err_at = |dt: f64| {
            let plus = integrate(&x, &u, dt).unwrap();
            // Step backward by integrating the reversed field.
            let minus_v = {
                let v = x.to_vector();
                let k1 = dynamics(&v, &u.to_vector());
                let k2 = dynamics(&(v - k1 * (dt / 2.0)), &u.to_vector());
                let k3 = dynamics(&(v - k2 * (dt / 2.0)), &u.to_vector());
                let k4 = dynamics(&(v - k3 * dt), &u.to_vector());
                v - (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
            };
            let fd = (h(&plus.to_vector()) - h(&minus_v)) / (2.0 * dt);
            (fd - analytic).abs()
        };
        let e3 = err_at(1e-3);
        let e4 = err_at(1e-4);
        // Second-order central differences: error ratio ~100.
        assert!(e4 < e3 / 30.0, "e3 = {e3:.3e}, e4 = {e4:.3e}");
    }

    #[test]
    fn integrate_rejects_bad_dt() {
        let x = RobotState::default();
        let u = RobotInput::default();
        assert!(integrate(&x, &u, 0.0).is_err());
        assert!(integrate(&x, &u, 0.02).is_err());
    }

    #[test]
    fn leg_ik_hand_cases_and_round_trip() {
        let legs = default_legs();
        let g = &legs[0];
        let j = leg_ik(&Vector2::new(0.3, 0.0), g).unwrap();
        assert_relative_eq!(j.knee, 0.3, epsilon = 1e-15);
        assert_relative_eq!(j.hip, 0.0, epsilon = 1e-15);

        let j = leg_ik(&Vector2::new(0.0, 0.4), g).unwrap();
        assert_relative_eq!(j.knee, 0.4, epsilon = 1e-15);
        assert_relative_eq!(j.hip, std::f64::consts::FRAC_PI_2, epsilon = 1e-15);
        assert!(!j.feasible, "90 deg hip is out of range");

        assert!(leg_ik(&Vector2::zeros(), g).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let p = Vector2::new(rng.gen::<f64>() + 0.1, rng.gen::<f64>() - 0.5);
            let j = leg_ik(&p, g).unwrap();
            let back = leg_fk(&j);
            assert_relative_eq!((back - p).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn middle_legs_have_asymmetric_hip_range() {
        let deg = std::f64::consts::PI / 180.0;
        for g in default_legs() {
            g.validate().unwrap();
            if g.leg.is_middle() {
                assert_relative_eq!(g.hip_range.0, -5.0 * deg, epsilon = 1e-12);
                assert_relative_eq!(g.hip_range.1, 45.0 * deg, epsilon = 1e-12);
            } else {
                assert_relative_eq!(g.hip_range.0, -22.5 * deg, epsilon = 1e-12);
                assert_relative_eq!(g.hip_range.1, 22.5 * deg, epsilon = 1e-12);
            }
            assert_relative_eq!(g.knee_range.1 - g.knee_range.0, 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn world_foot_position_equivariance() {
        let legs = default_legs();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_state(&mut rng);

        // Translation.
        let mut xt = x;
        let d = Vector3::new(0.4, -0.9, 0.2);
        xt.origin.p += d;
        for g in &legs {
            assert_relative_eq!(
                (world_foot_position(&xt, g) - world_foot_position(&x, g) - d).norm(),
                0.0,
                epsilon = 1e-12
            );
        }

        // Yaw by pi negates xy offsets relative to the origin.
        let mut xr = x;
        xr.origin.yaw += std::f64::consts::PI;
        for g in &legs {
            let a = world_foot_position(&x, g) - x.origin.p;
            let b = world_foot_position(&xr, g) - x.origin.p;
            assert_relative_eq!(a.x, -b.x, epsilon = 1e-12);
            assert_relative_eq!(a.y, -b.y, epsilon = 1e-12);
            assert_relative_eq!(a.z, b.z, epsilon = 1e-12);
        }
    }

    #[test]
    fn origin_exchange_identity_and_translation() {
        let legs = default_legs();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10_000 {
            let x = random_state(&mut rng);
            let same = origin_exchange(&x, x.origin.p, x.origin.yaw, &legs);
            assert_relative_eq!(
                (same.to_vector() - x.to_vector()).norm(),
                0.0,
                epsilon = 1e-10
            );

            // Same-heading translation without a lateral component preserves
            // all world positions (the model has no lateral states).
            let shift = rot_z(x.origin.yaw)
                * Vector3::new(rng.gen::<f64>() - 0.5, 0.0, rng.gen::<f64>() - 0.5);
            let moved = origin_exchange(&x, x.origin.p + shift, x.origin.yaw, &legs);
            assert_relative_eq!(
                (world_body_position(&moved) - world_body_position(&x)).norm(),
                0.0,
                epsilon = 1e-10
            );
            for g in &legs {
                assert_relative_eq!(
                    (world_foot_position(&moved, g) - world_foot_position(&x, g)).norm(),
                    0.0,
                    epsilon = 1e-10
                );
            }

            // Moving the rotation center while turning induces a lateral
            // relative velocity, so the velocity identity needs yaw_rate 0.
            let mut xs = x;
            xs.origin.yaw_rate = 0.0;
            let moved = origin_exchange(&xs, xs.origin.p + shift, xs.origin.yaw, &legs);
            assert_relative_eq!(
                (world_body_velocity(&moved) - world_body_velocity(&xs)).norm(),
                0.0,
                epsilon = 1e-10
            );
            for g in &legs {
                assert_relative_eq!(
                    (world_foot_velocity(&moved, g) - world_foot_velocity(&xs, g)).norm(),
                    0.0,
                    epsilon = 1e-10
                );
            }
        }
    }

    #[test]
    fn origin_exchange_with_yaw_change_preserves_body() {
        // A yaw change is representable when the new frame sits under the
        // body and points along the body's direction of travel; that is how
        // the gait schedule re-aims the origin. The legs' fixed lateral
        // offsets rotate with the frame, so only the body is preserved.
        let legs = default_legs();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let mut x = random_state(&mut rng);
            x.origin.speed = 1.0 + rng.gen::<f64>();
            let wv = world_body_velocity(&x);
            let new_yaw = wv.y.atan2(wv.x);
            let wb = world_body_position(&x);
            let new_p = Vector3::new(wb.x, wb.y, x.origin.p.z);
            let moved = origin_exchange(&x, new_p, new_yaw, &legs);
            assert_relative_eq!(
                (world_body_position(&moved) - world_body_position(&x)).norm(),
                0.0,
                epsilon = 1e-10
            );
            assert_relative_eq!(
                (world_body_velocity(&moved) - world_body_velocity(&x)).norm(),
                0.0,
                epsilon = 1e-10
            );
        }
    }
}
