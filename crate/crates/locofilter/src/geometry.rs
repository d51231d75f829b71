//! Oriented-cuboid collision margins.
//!
//! The exact separating-axis margin ([`sat_margin`]) is the ground truth:
//! positive iff the two boxes are disjoint. The smooth margin
//! ([`ssat_margin`]) replaces `max` with a smooth maximum and `abs` with a
//! smooth absolute value, which makes the margin twice continuously
//! differentiable in the pose of either box; gradients and Hessians are
//! analytic via [`crate::dual`]. [`gjk_intersect`] and [`lp_min_scaling`]
//! are non-smooth baselines used for benchmarking and cross-checks.

use crate::dual::{dv_constant, dv_dot, dv_lin, dv_sub, DVec3, Dual2};
use crate::smoothmath::{
    self, lse_weights, smooth_max, AbsVariant, MaxVariant, SmoothingParams,
};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

/// Rotation about world z by `angle`.
pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation about world y by `angle`.
pub fn rot_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// An oriented box: pose plus half-extents.
#[derive(Clone, Copy, Debug)]
pub struct Cuboid {
    pub center: Vector3<f64>,
    pub rotation: Matrix3<f64>,
    pub half_extents: Vector3<f64>,
}

impl Cuboid {
    /// Validates orthonormality (1e-9), `det = +1` and positive extents.
    pub fn new(
        center: Vector3<f64>,
        rotation: Matrix3<f64>,
        half_extents: Vector3<f64>,
    ) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if ortho > 1e-9 {
            return Err(Error::InvalidParam(format!(
                "cuboid rotation not orthonormal (residual {ortho:.2e})"
            )));
        }
        if (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParam("cuboid rotation must have det +1".into()));
        }
        if !(half_extents.min() > 0.0) {
            return Err(Error::InvalidParam("cuboid half-extents must be positive".into()));
        }
        if !(center.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("cuboid center"));
        }
        Ok(Self {
            center,
            rotation,
            half_extents,
        })
    }

    /// Axis-aligned box.
    pub fn axis_aligned(center: Vector3<f64>, half_extents: Vector3<f64>) -> Result<Self> {
        Self::new(center, Matrix3::identity(), half_extents)
    }

    /// Box oriented as `Rz(yaw) * Ry(pitch)`.
    pub fn from_yaw_pitch(
        center: Vector3<f64>,
        yaw: f64,
        pitch: f64,
        half_extents: Vector3<f64>,
    ) -> Result<Self> {
        Self::new(center, rot_z(yaw) * rot_y(pitch), half_extents)
    }

    /// Grow every half-extent by `amount` (toe-sphere inflation).
    pub fn inflate(&self, amount: f64) -> Self {
        Self {
            half_extents: self.half_extents.add_scalar(amount),
            ..*self
        }
    }

    /// The eight corners in world coordinates.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let mut out = [Vector3::zeros(); 8];
        for (i, item) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            *item = self.center
                + self.rotation
                    * Vector3::new(
                        sx * self.half_extents.x,
                        sy * self.half_extents.y,
                        sz * self.half_extents.z,
                    );
        }
        out
    }

    /// Exact membership test for a world point.
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let local = self.rotation.transpose() * (p - self.center);
        local.x.abs() <= self.half_extents.x
            && local.y.abs() <= self.half_extents.y
            && local.z.abs() <= self.half_extents.z
    }
}

/// Pose parameters a smooth margin can be differentiated against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoseParam {
    X,
    Y,
    Z,
    Yaw,
    Pitch,
}

/// Which of the two cuboids owns the designated pose parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WhichBody {
    A,
    B,
}

/// Derivative target for the smooth margin: a fixed-order, duplicate-free
/// subset of `{x, y, z, yaw, pitch}` of one body. Yaw/pitch perturb the body
/// orientation as `Rz(yaw) * Ry(pitch) * R_residual`, matching the robot body
/// parameterization.
#[derive(Clone, Debug)]
pub struct PoseParameterization {
    pub body: WhichBody,
    pub params: Vec<PoseParam>,
}

impl PoseParameterization {
    pub fn new(body: WhichBody, params: Vec<PoseParam>) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::Empty("pose parameterization"));
        }
        for (i, p) in params.iter().enumerate() {
            if params[..i].contains(p) {
                return Err(Error::InvalidParam(format!(
                    "pose parameter {p:?} appears twice"
                )));
            }
        }
        Ok(Self { body, params })
    }

    /// Translation of the given body, in (x, y, z) order.
    pub fn translation(body: WhichBody) -> Self {
        Self {
            body,
            params: vec![PoseParam::X, PoseParam::Y, PoseParam::Z],
        }
    }

    /// Full five-parameter pose of the given body.
    pub fn full_pose(body: WhichBody) -> Self {
        Self {
            body,
            params: vec![
                PoseParam::X,
                PoseParam::Y,
                PoseParam::Z,
                PoseParam::Yaw,
                PoseParam::Pitch,
            ],
        }
    }
}

/// Separation margin with derivatives against the designated pose parameters.
#[derive(Clone, Debug)]
pub struct CollisionMargin {
    /// Margin in meters (superellipsoid: dimensionless); `> 0` means disjoint.
    pub h: f64,
    pub grad: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// One candidate separating axis (unit length).
#[derive(Clone, Copy, Debug)]
pub struct CandidateAxis {
    pub axis: Vector3<f64>,
    /// True if this slot is a parallel-edge cross product replaced by its
    /// deterministic fallback (the corresponding A-face normal).
    pub degenerate: bool,
}

const CROSS_DEGENERACY_EPS: f64 = 1e-8;

/// The 15 candidate separating axes: 3 face normals per box plus the 9
/// pairwise edge cross products.
pub fn candidate_axes(a: &Cuboid, b: &Cuboid) -> [CandidateAxis; 15] {
    let mut out = [CandidateAxis {
        axis: Vector3::zeros(),
        degenerate: false,
    }; 15];
    for k in 0..3 {
        out[k].axis = a.rotation.column(k).into();
        out[3 + k].axis = b.rotation.column(k).into();
    }
    for j in 0..3 {
        for k in 0..3 {
            let bcol: Vector3<f64> = b.rotation.column(k).into();
            let cross = Vector3::from(a.rotation.column(j)).cross(&bcol);
            let norm = cross.norm();
            let slot = &mut out[6 + 3 * j + k];
            if norm < CROSS_DEGENERACY_EPS {
                slot.axis = a.rotation.column(j).into();
                slot.degenerate = true;
            } else {
                slot.axis = cross / norm;
            }
        }
    }
    out
}

/// Exact separating-axis margin: the best separation over the 15 candidate
/// axes. Positive iff the boxes are disjoint.
///
/// Everything is expressed through `r = A^T B` and the frame-local center
/// offsets, so no axis is materialized or renormalized; cross-axis norms come
/// from `|a_i x b_j| = sqrt(1 - r_ij^2)`. Degenerate (parallel-edge) crosses
/// fall back to the A-face value, matching [`candidate_axes`].
pub fn sat_margin(a: &Cuboid, b: &Cuboid) -> f64 {
    let ac = rotation_cols(&a.rotation);
    let bc = rotation_cols(&b.rotation);
    let dpv = b.center - a.center;
    let dp = [dpv.x, dpv.y, dpv.z];
    let dot = |u: &[f64; 3], v: &[f64; 3]| u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    let mut r = [[0.0f64; 3]; 3];
    let mut ab = [[0.0f64; 3]; 3];
    let mut ta = [0.0f64; 3];
    let mut tb = [0.0f64; 3];
    for i in 0..3 {
        for j in 0..3 {
            let s = dot(&ac[i], &bc[j]);
            r[i][j] = s;
            ab[i][j] = s.abs();
        }
        ta[i] = dot(&ac[i], &dp);
        tb[i] = dot(&bc[i], &dp);
    }
    let ha = [a.half_extents.x, a.half_extents.y, a.half_extents.z];
    let hb = [b.half_extents.x, b.half_extents.y, b.half_extents.z];

    let mut best = f64::NEG_INFINITY;
    let mut aface = [0.0f64; 3];
    for i in 0..3 {
        let y = ta[i].abs() - ha[i] - (ab[i][0] * hb[0] + ab[i][1] * hb[1] + ab[i][2] * hb[2]);
        aface[i] = y;
        best = best.max(y);
    }
    for j in 0..3 {
        let y = tb[j].abs() - hb[j] - (ab[0][j] * ha[0] + ab[1][j] * ha[1] + ab[2][j] * ha[2]);
        best = best.max(y);
    }
    // Cross candidates stay unnormalized as (sep, q2) pairs with value
    // sep / sqrt(q2); the single sqrt runs at the very end. Candidates are
    // built independently and combined by a short tree of branch-free
    // compares (sign logic plus multiplies), which avoids both divisions
    // and a loop-carried select chain. The face best joins with q2 = 1.
    let mut ss = [0.0f64; 9];
    let mut qq = [0.0f64; 9];
    for i in 0..3 {
        let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
        for j in 0..3 {
            let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
            let q2 = (1.0 - r[i][j] * r[i][j]).max(0.0);
            let sep = (ta[i2] * r[i1][j] - ta[i1] * r[i2][j]).abs()
                - ha[i1] * ab[i2][j]
                - ha[i2] * ab[i1][j]
                - hb[j1] * ab[i][j2]
                - hb[j2] * ab[i][j1];
            let degen = q2 < CROSS_DEGENERACY_EPS * CROSS_DEGENERACY_EPS;
            let k = 3 * i + j;
            ss[k] = if degen { aface[i] } else { sep };
            qq[k] = if degen { 1.0 } else { q2 };
        }
    }
    let m01 = cross_max((ss[0], qq[0]), (ss[1], qq[1]));
    let m23 = cross_max((ss[2], qq[2]), (ss[3], qq[3]));
    let m45 = cross_max((ss[4], qq[4]), (ss[5], qq[5]));
    let m67 = cross_max((ss[6], qq[6]), (ss[7], qq[7]));
    let m8f = cross_max((ss[8], qq[8]), (best, 1.0));
    let a03 = cross_max(m01, m23);
    let a47 = cross_max(m45, m67);
    let top = cross_max(cross_max(a03, a47), m8f);
    top.0 / top.1.sqrt()
}

/// Larger of two unnormalized axis candidates `(sep, q2)` with value
/// `sep / sqrt(q2)`; the comparison happens on squares so no roots are
/// taken. Ties resolve to the second argument (equal values either way).
#[inline]
fn cross_max(x: (f64, f64), y: (f64, f64)) -> (f64, f64) {
    let (s1, q1) = x;
    let (s2, q2) = y;
    let pos = s1 >= 0.0;
    let othneg = s2 < 0.0;
    let lhs = s1 * s1 * q2;
    let rhs = s2 * s2 * q1;
    let better = (pos & (othneg | (lhs > rhs))) | (!pos & othneg & (lhs < rhs));
    if better {
        x
    } else {
        y
    }
}

/// A cuboid whose pose carries derivative seeds.
#[derive(Clone, Copy, Debug)]
pub(crate) struct DualBox<const K: usize> {
    pub center: DVec3<K>,
    /// Rotation columns (unit body axes).
    pub cols: [DVec3<K>; 3],
    pub half: [f64; 3],
    /// True when the component carries no derivative seeds; lets the margin
    /// replace dual dot products with fixed linear combinations.
    pub center_const: bool,
    pub cols_const: bool,
}

impl<const K: usize> DualBox<K> {
    pub fn from_const(c: &Cuboid) -> Self {
        let mut cols = [dv_constant([0.0; 3]); 3];
        for (k, col) in cols.iter_mut().enumerate() {
            *col = dv_constant([c.rotation[(0, k)], c.rotation[(1, k)], c.rotation[(2, k)]]);
        }
        Self {
            center: dv_constant([c.center.x, c.center.y, c.center.z]),
            cols,
            half: [c.half_extents.x, c.half_extents.y, c.half_extents.z],
            center_const: true,
            cols_const: true,
        }
    }

    /// Rotation `Rz(yaw) * Ry(pitch) * r_fix` with dual yaw/pitch.
    pub fn from_yaw_pitch(
        center: DVec3<K>,
        yaw: Dual2<K>,
        pitch: Dual2<K>,
        r_fix: &Matrix3<f64>,
        half: [f64; 3],
    ) -> Self {
        if let (Some(ys), Some(ps)) = (seed_slot(&yaw), seed_slot(&pitch)) {
            return Self::from_yaw_pitch_seeds(center, yaw.v, ys, pitch.v, ps, r_fix, half);
        }
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let zero = Dual2::constant(0.0);
        // Columns of Rz(yaw) * Ry(pitch).
        let m0 = [cy * cp, sy * cp, -sp];
        let m1 = [-sy, cy, zero];
        let m2 = [cy * sp, sy * sp, cp];
        let mut cols = [[zero; 3]; 3];
        for k in 0..3 {
            for r in 0..3 {
                cols[k][r] = m0[r].scale(r_fix[(0, k)])
                    + m1[r].scale(r_fix[(1, k)])
                    + m2[r].scale(r_fix[(2, k)]);
            }
        }
        Self {
            center,
            cols,
            half,
            center_const: false,
            cols_const: false,
        }
    }

    /// Rotation columns built from analytic angle derivatives. Every entry of
    /// `Rz(yaw) * Ry(pitch)` is a product of one yaw factor and one pitch
    /// factor, so the six derivative combinations up to second order are
    /// direct trig substitutions; this skips the dense dual arithmetic that a
    /// generic composite would pay for two one-hot seeds.
    #[allow(clippy::too_many_arguments)]
    fn from_yaw_pitch_seeds(
        center: DVec3<K>,
        yaw: f64,
        yaw_slot: Option<usize>,
        pitch: f64,
        pitch_slot: Option<usize>,
        r_fix: &Matrix3<f64>,
        half: [f64; 3],
    ) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        // Factor sequences under repeated differentiation (orders 0, 1, 2);
        // the `one` sequence is a factor with no dependence on that angle.
        let sy_q = [sy, cy, -sy];
        let cy_q = [cy, -sy, -cy];
        let sp_q = [sp, cp, -sp];
        let cp_q = [cp, -sp, -cp];
        let one = [1.0, 0.0, 0.0];
        // Columns of d^n/dyaw^n d^m/dpitch^m (Rz Ry) * r_fix, as [col][row].
        let rot = |n: usize, m: usize| -> [[f64; 3]; 3] {
            let m0 = [cy_q[n] * cp_q[m], sy_q[n] * cp_q[m], -one[n] * sp_q[m]];
            let m1 = [-sy_q[n] * one[m], cy_q[n] * one[m], 0.0];
            let m2 = [cy_q[n] * sp_q[m], sy_q[n] * sp_q[m], one[n] * cp_q[m]];
            let mut out = [[0.0; 3]; 3];
            for k in 0..3 {
                for r in 0..3 {
                    out[k][r] = m0[r] * r_fix[(0, k)]
                        + m1[r] * r_fix[(1, k)]
                        + m2[r] * r_fix[(2, k)];
                }
            }
            out
        };
        let v00 = rot(0, 0);
        let v10 = rot(1, 0);
        let v01 = rot(0, 1);
        let v20 = rot(2, 0);
        let v11 = rot(1, 1);
        let v02 = rot(0, 2);
        let mut cols = [[Dual2::constant(0.0); 3]; 3];
        for k in 0..3 {
            for r in 0..3 {
                let e = &mut cols[k][r];
                e.v = v00[k][r];
                if let Some(y) = yaw_slot {
                    e.g[y] = v10[k][r];
                    e.h[y][y] = v20[k][r];
                }
                if let Some(p) = pitch_slot {
                    e.g[p] = v01[k][r];
                    e.h[p][p] = v02[k][r];
                }
                if let (Some(y), Some(p)) = (yaw_slot, pitch_slot) {
                    e.h[y][p] = v11[k][r];
                    e.h[p][y] = v11[k][r];
                }
            }
        }
        Self {
            center,
            cols,
            half,
            center_const: false,
            cols_const: false,
        }
    }
}

/// `Some(slot)` if `d` is a bare seed (one-hot unit gradient, zero Hessian)
/// or a constant (`Some(None)` wrapped as slot `None`), else `None`.
#[allow(clippy::option_option)]
fn seed_slot<const K: usize>(d: &Dual2<K>) -> Option<Option<usize>> {
    let mut slot = None;
    for i in 0..K {
        if d.g[i] != 0.0 {
            if d.g[i] != 1.0 || slot.is_some() {
                return None;
            }
            slot = Some(i);
        }
        for j in 0..K {
            if d.h[i][j] != 0.0 {
                return None;
            }
        }
    }
    Some(slot)
}

/// Split a rotation into `Rz(yaw) * Ry(pitch) * r_fix`.
pub(crate) fn yaw_pitch_split(r: &Matrix3<f64>) -> (f64, f64, Matrix3<f64>) {
    let yaw = r[(1, 0)].atan2(r[(0, 0)]);
    let pitch = (-r[(2, 0)]).atan2((r[(0, 0)].powi(2) + r[(1, 0)].powi(2)).sqrt());
    let r_fix = rot_y(-pitch) * rot_z(-yaw) * r;
    (yaw, pitch, r_fix)
}

/// Smooth-abs kernel output: value and first two derivatives at a point.
type Triple = (f64, f64, f64);

/// Value of the smooth absolute value at its minimum (x = 0). The cuboid
/// axes are orthonormal, so several projections per axis are exact zeros;
/// they still pass through the smooth abs, which for the sqrt variant means
/// its eps floor.
#[inline]
fn sabs_floor(variant: AbsVariant, sp: &SmoothingParams) -> f64 {
    match variant {
        AbsVariant::XTanh => 0.0,
        AbsVariant::Sqrt => sp.eps_sqrt,
    }
}

/// Axes whose exact separation trails the best by more than this gap have
/// smooth-max weight below round-off, so both the smooth value and the dual
/// propagation can skip them entirely. The gap covers the worst-case offset
/// between the exact and smooth per-axis values on both sides (12 e_abs)
/// plus enough exp decay to push the relative weight under 1e-13. Each axis
/// combines seven smooth-abs terms, and the worst-case offsets of a dropped
/// axis (upward) and of the smooth maximum (downward) total 7 e_abs for
/// either abs variant.
fn preselect_gap(sp: &SmoothingParams, abs_variant: AbsVariant) -> f64 {
    let e_abs = match abs_variant {
        AbsVariant::XTanh => 1.0 / sp.alpha_abs,
        AbsVariant::Sqrt => sp.eps_sqrt,
    };
    30.0 / sp.alpha_max + 7.0 * e_abs
}

/// Scalar frame shared by the smooth 15-axis margins: the relative rotation
/// `r = A^T B`, the frame-local center offsets, and the exact separation per
/// axis slot. No candidate axis is materialized; every projection onto a
/// cross axis is a closed-form expression in `r` divided by the cross norm
/// `sqrt(1 - r_ij^2)`.
struct AxisFrame {
    r: [[f64; 3]; 3],
    ta: [f64; 3],
    tb: [f64; 3],
    ha: [f64; 3],
    hb: [f64; 3],
    /// Squared cross-axis norms `1 - r_ij^2`, clamped at zero.
    q2: [[f64; 3]; 3],
    /// Exact separation per axis slot, in [`candidate_axes`] order;
    /// degenerate crosses duplicate their A-face fallback.
    vals: [f64; 15],
}

impl AxisFrame {
    fn new(
        acols: &[[f64; 3]; 3],
        bcols: &[[f64; 3]; 3],
        ha: [f64; 3],
        hb: [f64; 3],
        dp: &[f64; 3],
    ) -> Self {
        let dot = |u: &[f64; 3], v: &[f64; 3]| u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
        let mut r = [[0.0; 3]; 3];
        let mut ta = [0.0; 3];
        let mut tb = [0.0; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = dot(&acols[i], &bcols[j]);
            }
            ta[i] = dot(&acols[i], dp);
            tb[i] = dot(&bcols[i], dp);
        }
        let mut vals = [0.0; 15];
        let mut q2 = [[0.0; 3]; 3];
        for i in 0..3 {
            vals[i] = ta[i].abs()
                - ha[i]
                - (r[i][0].abs() * hb[0] + r[i][1].abs() * hb[1] + r[i][2].abs() * hb[2]);
        }
        for j in 0..3 {
            vals[3 + j] = tb[j].abs()
                - hb[j]
                - (r[0][j].abs() * ha[0] + r[1][j].abs() * ha[1] + r[2][j].abs() * ha[2]);
        }
        for i in 0..3 {
            let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
            for j in 0..3 {
                let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
                let q = (1.0 - r[i][j] * r[i][j]).max(0.0);
                q2[i][j] = q;
                let slot = 6 + 3 * i + j;
                if q < CROSS_DEGENERACY_EPS * CROSS_DEGENERACY_EPS {
                    vals[slot] = vals[i];
                    continue;
                }
                let sep = (ta[i2] * r[i1][j] - ta[i1] * r[i2][j]).abs()
                    - ha[i1] * r[i2][j].abs()
                    - ha[i2] * r[i1][j].abs()
                    - hb[j1] * r[i][j2].abs()
                    - hb[j2] * r[i][j1].abs();
                vals[slot] = sep / q.sqrt();
            }
        }
        Self {
            r,
            ta,
            tb,
            ha,
            hb,
            q2,
            vals,
        }
    }

    fn degenerate(&self, i: usize, j: usize) -> bool {
        self.q2[i][j] < CROSS_DEGENERACY_EPS * CROSS_DEGENERACY_EPS
    }

    /// The five smooth-abs arguments of one axis slot, in a fixed order:
    /// offset term first, then the extent terms (faces put their own
    /// half-extent last). These are the points the dual path re-reads, so
    /// the products here must match its expressions exactly.
    fn axis_args(&self, slot: usize, out: &mut [f64; 5]) {
        if slot < 3 {
            let i = slot;
            *out = [
                self.ta[i],
                self.r[i][0] * self.hb[0],
                self.r[i][1] * self.hb[1],
                self.r[i][2] * self.hb[2],
                self.ha[i],
            ];
            return;
        }
        if slot < 6 {
            let j = slot - 3;
            *out = [
                self.tb[j],
                self.r[0][j] * self.ha[0],
                self.r[1][j] * self.ha[1],
                self.r[2][j] * self.ha[2],
                self.hb[j],
            ];
            return;
        }
        let (i, j) = ((slot - 6) / 3, (slot - 6) % 3);
        if self.degenerate(i, j) {
            // Parallel edges: deterministic fallback keeps the composite
            // continuous; it duplicates an A-face slot so it never attains
            // the maximum alone.
            return self.axis_args(i, out);
        }
        let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
        let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
        let iq = 1.0 / self.q2[i][j].sqrt();
        *out = [
            (self.ta[i2] * self.r[i1][j] - self.ta[i1] * self.r[i2][j]) * iq,
            self.r[i2][j] * self.ha[i1] * iq,
            self.r[i1][j] * self.ha[i2] * iq,
            self.r[i][j2] * self.hb[j1] * iq,
            self.r[i][j1] * self.hb[j2] * iq,
        ];
    }

    /// Kept axis slots and their smooth values after exact-value
    /// preselection; the exact maximizer always survives. `caches[k]` holds
    /// the kernel triples of kept axis `k` for the dual pass (term order:
    /// offset first, then extent terms, faces with the own-extent triple in
    /// entry five). All kernels run as one batch so the loop vectorizes.
    fn preselect(
        &self,
        sp: &SmoothingParams,
        abs_variant: AbsVariant,
        caches: &mut [[Triple; 6]; 15],
    ) -> ([usize; 15], [f64; 15], usize) {
        let vmax = self.vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let gap = preselect_gap(sp, abs_variant);
        let mut slots = [0usize; 15];
        let mut nk = 0;
        let mut args = [0.0f64; 75];
        for slot in 0..15 {
            if self.vals[slot] >= vmax - gap {
                let sub: &mut [f64; 5] = (&mut args[5 * nk..5 * nk + 5]).try_into().unwrap();
                self.axis_args(slot, sub);
                slots[nk] = slot;
                nk += 1;
            }
        }
        let na = 5 * nk;
        let mut v = [0.0f64; 75];
        let mut d1 = [0.0f64; 75];
        let mut d2 = [0.0f64; 75];
        match abs_variant {
            AbsVariant::XTanh => smoothmath::xtanh_batch(
                &args[..na],
                sp.alpha_abs,
                &mut v[..na],
                &mut d1[..na],
                &mut d2[..na],
            ),
            AbsVariant::Sqrt => smoothmath::sqrt_abs_batch(
                &args[..na],
                sp.eps_sqrt,
                &mut v[..na],
                &mut d1[..na],
                &mut d2[..na],
            ),
        }
        let z2 = 2.0 * sabs_floor(abs_variant, sp);
        let mut svals = [0.0f64; 15];
        for k in 0..nk {
            let b = 5 * k;
            let cache = &mut caches[k];
            for t in 0..4 {
                cache[t] = (v[b + t], d1[b + t], d2[b + t]);
            }
            let slot = slots[k];
            // Degenerate crosses duplicated a face slot's args above, so the
            // face/cross split here keys on the slot's effective kind.
            let cross = slot >= 6 && !self.degenerate((slot - 6) / 3, (slot - 6) % 3);
            if cross {
                cache[4] = (v[b + 4], d1[b + 4], d2[b + 4]);
                svals[k] = v[b] - v[b + 1] - v[b + 2] - v[b + 3] - v[b + 4] - z2;
            } else {
                cache[5] = (v[b + 4], d1[b + 4], d2[b + 4]);
                svals[k] = v[b] - v[b + 4] - z2 - v[b + 1] - v[b + 2] - v[b + 3];
            }
        }
        (slots, svals, nk)
    }
}

fn rotation_cols(r: &Matrix3<f64>) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (k, col) in out.iter_mut().enumerate() {
        *col = [r[(0, k)], r[(1, k)], r[(2, k)]];
    }
    out
}

/// Weights below this contribute less than round-off to the combined
/// derivatives, so their axes skip dual propagation entirely.
const WEIGHT_PRUNE: f64 = 1e-12;

/// Smooth 15-axis margin over dual poses. This is the single production path
/// for the smooth margin and all of its derivatives; callers choose what the
/// dual seeds refer to (pose parameters or robot states).
///
/// A scalar first pass computes the axis values and the smooth-max weights;
/// dual propagation then runs only over the axes whose weight is above
/// round-off. With a sharp max (large alpha) that is typically 2-4 of the 15
/// axes, which is what keeps whole-constraint-set assembly in budget.
pub(crate) fn ssat_smooth_dual<const K: usize>(
    a: &DualBox<K>,
    b: &DualBox<K>,
    sp: &SmoothingParams,
    max_variant: MaxVariant,
    abs_variant: AbsVariant,
) -> Dual2<K> {
    let vc = |c: &DVec3<K>| [c[0].v, c[1].v, c[2].v];
    let acols = [vc(&a.cols[0]), vc(&a.cols[1]), vc(&a.cols[2])];
    let bcols = [vc(&b.cols[0]), vc(&b.cols[1]), vc(&b.cols[2])];
    let dp0 = [
        b.center[0].v - a.center[0].v,
        b.center[1].v - a.center[1].v,
        b.center[2].v - a.center[2].v,
    ];
    let frame = AxisFrame::new(&acols, &bcols, a.half, b.half, &dp0);
    let mut caches = [[(0.0, 0.0, 0.0); 6]; 15];
    let (slots, svals, nk) = frame.preselect(sp, abs_variant, &mut caches);

    // Mark the dual dot products the kept axes read, then compute each once.
    let mut need_ta = [false; 3];
    let mut need_tb = [false; 3];
    let mut need_r = [[false; 3]; 3];
    for &slot in &slots[..nk] {
        if slot < 3 {
            need_ta[slot] = true;
            need_r[slot] = [true; 3];
        } else if slot < 6 {
            let j = slot - 3;
            need_tb[j] = true;
            for i in 0..3 {
                need_r[i][j] = true;
            }
        } else {
            let (i, j) = ((slot - 6) / 3, (slot - 6) % 3);
            if frame.degenerate(i, j) {
                need_ta[i] = true;
                need_r[i] = [true; 3];
            } else {
                let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
                let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
                need_ta[i1] = true;
                need_ta[i2] = true;
                need_r[i][j] = true;
                need_r[i1][j] = true;
                need_r[i2][j] = true;
                need_r[i][j1] = true;
                need_r[i][j2] = true;
            }
        }
    }
    let dp = dv_sub(&b.center, &a.center);
    let dp_const = a.center_const && b.center_const;
    let zero = Dual2::<K>::constant(0.0);
    let mut dta = [zero; 3];
    let mut dtb = [zero; 3];
    let mut dr = [[zero; 3]; 3];
    for i in 0..3 {
        if need_ta[i] {
            dta[i] = match (a.cols_const, dp_const) {
                (true, true) => Dual2::constant(frame.ta[i]),
                (true, false) => dv_lin(&acols[i], &dp),
                (false, true) => dv_lin(&dp0, &a.cols[i]),
                (false, false) => dv_dot(&a.cols[i], &dp),
            };
        }
        if need_tb[i] {
            dtb[i] = match (b.cols_const, dp_const) {
                (true, true) => Dual2::constant(frame.tb[i]),
                (true, false) => dv_lin(&bcols[i], &dp),
                (false, true) => dv_lin(&dp0, &b.cols[i]),
                (false, false) => dv_dot(&b.cols[i], &dp),
            };
        }
        for j in 0..3 {
            if need_r[i][j] {
                dr[i][j] = match (a.cols_const, b.cols_const) {
                    (true, true) => Dual2::constant(frame.r[i][j]),
                    (true, false) => dv_lin(&acols[i], &b.cols[j]),
                    (false, true) => dv_lin(&bcols[j], &a.cols[i]),
                    (false, false) => dv_dot(&a.cols[i], &b.cols[j]),
                };
            }
        }
    }

    // Every kernel triple below comes from the scalar pass cache; the dual
    // pass only reapplies them through the chain rule. The cached points are
    // bitwise identical to the dual values, so value and derivatives stay
    // mutually consistent.
    let sabs_c = |u: Dual2<K>, t: Triple| u.chain(t.0, t.1, t.2);
    // sabs(c * u) with the constant folded into the chain coefficients.
    let sabs_sc = |u: Dual2<K>, c: f64, t: Triple| u.chain(t.0, t.1 * c, t.2 * c * c);
    let z2 = 2.0 * sabs_floor(abs_variant, sp);

    let face_a = |i: usize, cache: &[Triple; 6]| -> Dual2<K> {
        let mut y = sabs_c(dta[i], cache[0]);
        for k in 0..3 {
            y = y - sabs_sc(dr[i][k], b.half[k], cache[1 + k]);
        }
        y.v -= cache[5].0 + z2;
        y
    };
    let dual_axis = |slot: usize, cache: &[Triple; 6]| -> Dual2<K> {
        if slot < 3 {
            return face_a(slot, cache);
        }
        if slot < 6 {
            let j = slot - 3;
            let mut y = sabs_c(dtb[j], cache[0]);
            for k in 0..3 {
                y = y - sabs_sc(dr[k][j], a.half[k], cache[1 + k]);
            }
            y.v -= cache[5].0 + z2;
            return y;
        }
        let (i, j) = ((slot - 6) / 3, (slot - 6) % 3);
        if frame.degenerate(i, j) {
            return face_a(i, cache);
        }
        let (i1, i2) = ((i + 1) % 3, (i + 2) % 3);
        let (j1, j2) = ((j + 1) % 3, (j + 2) % 3);
        let rij = dr[i][j];
        let q2d = rij.chain(1.0 - rij.v * rij.v, -2.0 * rij.v, -2.0);
        let qv = q2d.v;
        let p0 = 1.0 / qv.sqrt();
        // sabs(c * u / sqrt(q2)) as a single bivariate chain in (u, q2); the
        // partials of w = c u q2^{-1/2} fold into the kernel derivatives.
        let sabs_ratio = |u: Dual2<K>, c: f64, t: Triple| -> Dual2<K> {
            let (s0, s1, s2) = t;
            let w = c * u.v * p0;
            let wu = c * p0;
            let wq = -0.5 * w / qv;
            let wuq = -0.5 * wu / qv;
            let wqq = 0.75 * w / (qv * qv);
            u.chain2(
                q2d,
                s0,
                s1 * wu,
                s1 * wq,
                s2 * wu * wu,
                s2 * wu * wq + s1 * wuq,
                s2 * wq * wq + s1 * wqq,
            )
        };
        let num = dta[i2] * dr[i1][j] - dta[i1] * dr[i2][j];
        let mut y = sabs_ratio(num, 1.0, cache[0])
            - sabs_ratio(dr[i2][j], frame.ha[i1], cache[1])
            - sabs_ratio(dr[i1][j], frame.ha[i2], cache[2])
            - sabs_ratio(dr[i][j2], frame.hb[j1], cache[3])
            - sabs_ratio(dr[i][j1], frame.hb[j2], cache[4]);
        y.v -= z2;
        y
    };

    match max_variant {
        MaxVariant::Lse => {
            let alpha = sp.alpha_max;
            let mut w = [0.0f64; 15];
            let value = lse_weights(&svals[..nk], alpha, &mut w[..nk]);
            let mut out = Dual2::constant(value);
            let mut ys = [zero; 15];
            for k in 0..nk {
                if w[k] < WEIGHT_PRUNE {
                    continue;
                }
                ys[k] = dual_axis(slots[k], &caches[k]);
                for p in 0..K {
                    out.g[p] += w[k] * ys[k].g[p];
                }
                for p in 0..K {
                    for q in p..K {
                        out.h[p][q] += w[k] * (ys[k].h[p][q] + alpha * ys[k].g[p] * ys[k].g[q]);
                    }
                }
            }
            for p in 0..K {
                for q in p..K {
                    let v = out.h[p][q] - alpha * out.g[p] * out.g[q];
                    out.h[p][q] = v;
                    out.h[q][p] = v;
                }
            }
            out
        }
        MaxVariant::Boltzmann => {
            // Boltzmann combination weights can be negative near ties, so
            // prune on their magnitude; curvature comes from the generic
            // operator.
            let sm = smooth_max(&svals[..nk], MaxVariant::Boltzmann, sp.alpha_max)
                .expect("finite inputs");
            let mut keep = [false; 15];
            for k in 0..nk {
                keep[k] = sm.grad[k].abs() > WEIGHT_PRUNE
                    || (0..nk).any(|l| sm.hess[(k, l)].abs() > WEIGHT_PRUNE);
            }
            let mut ys = [zero; 15];
            let mut out = Dual2::constant(sm.value);
            for k in 0..nk {
                if !keep[k] {
                    continue;
                }
                ys[k] = dual_axis(slots[k], &caches[k]);
                let gk = sm.grad[k];
                for p in 0..K {
                    out.g[p] += gk * ys[k].g[p];
                }
                for p in 0..K {
                    for q in p..K {
                        out.h[p][q] += gk * ys[k].h[p][q];
                    }
                }
            }
            for k in 0..nk {
                if !keep[k] {
                    continue;
                }
                for l in 0..nk {
                    if !keep[l] {
                        continue;
                    }
                    let m = sm.hess[(k, l)];
                    if m == 0.0 {
                        continue;
                    }
                    for p in 0..K {
                        for q in p..K {
                            out.h[p][q] += m * ys[k].g[p] * ys[l].g[q];
                        }
                    }
                }
            }
            for p in 0..K {
                for q in p..K {
                    out.h[q][p] = out.h[p][q];
                }
            }
            out
        }
    }
}

/// Smooth margin value only (no derivative bookkeeping, no switching).
pub fn ssat_value(
    a: &Cuboid,
    b: &Cuboid,
    sp: &SmoothingParams,
    max_variant: MaxVariant,
    abs_variant: AbsVariant,
) -> f64 {
    let dp = b.center - a.center;
    let frame = AxisFrame::new(
        &rotation_cols(&a.rotation),
        &rotation_cols(&b.rotation),
        [a.half_extents.x, a.half_extents.y, a.half_extents.z],
        [b.half_extents.x, b.half_extents.y, b.half_extents.z],
        &[dp.x, dp.y, dp.z],
    );
    let mut scratch = [[(0.0, 0.0, 0.0); 6]; 15];
    let (_, svals, nk) = frame.preselect(sp, abs_variant, &mut scratch);
    match max_variant {
        MaxVariant::Lse => smoothmath::lse(&svals[..nk], sp.alpha_max),
        MaxVariant::Boltzmann => smoothmath::boltzmann(&svals[..nk], sp.alpha_max),
    }
}

/// Smooth separating-axis margin with analytic derivatives against `wrt`,
/// using the production LSE + xtanh smoothing.
pub fn ssat_margin(
    a: &Cuboid,
    b: &Cuboid,
    sp: &SmoothingParams,
    wrt: &PoseParameterization,
) -> Result<CollisionMargin> {
    ssat_margin_with(a, b, sp, wrt, MaxVariant::Lse, AbsVariant::XTanh)
}

/// Smooth margin with explicit smoothing-operator choices.
///
/// When the exact margin exceeds `sp.switch_threshold` the returned value is
/// the exact SAT margin (the boxes are far apart and the smoothing error band
/// is irrelevant); the derivatives always come from the smooth composite.
pub fn ssat_margin_with(
    a: &Cuboid,
    b: &Cuboid,
    sp: &SmoothingParams,
    wrt: &PoseParameterization,
    max_variant: MaxVariant,
    abs_variant: AbsVariant,
) -> Result<CollisionMargin> {
    sp.validate()?;
    if wrt.params.is_empty() || wrt.params.len() > 5 {
        return Err(Error::InvalidParam(
            "pose parameterization must designate 1..=5 parameters".into(),
        ));
    }
    match wrt.params.len() {
        1 => ssat_margin_k::<1>(a, b, sp, wrt, max_variant, abs_variant),
        2 => ssat_margin_k::<2>(a, b, sp, wrt, max_variant, abs_variant),
        3 => ssat_margin_k::<3>(a, b, sp, wrt, max_variant, abs_variant),
        4 => ssat_margin_k::<4>(a, b, sp, wrt, max_variant, abs_variant),
        5 => ssat_margin_k::<5>(a, b, sp, wrt, max_variant, abs_variant),
        _ => unreachable!(),
    }
}

fn ssat_margin_k<const K: usize>(
    a: &Cuboid,
    b: &Cuboid,
    sp: &SmoothingParams,
    wrt: &PoseParameterization,
    max_variant: MaxVariant,
    abs_variant: AbsVariant,
) -> Result<CollisionMargin> {
    let designated = match wrt.body {
        WhichBody::A => a,
        WhichBody::B => b,
    };

    let (yaw0, pitch0, r_fix) = yaw_pitch_split(&designated.rotation);
    let mut center = dv_constant::<K>([
        designated.center.x,
        designated.center.y,
        designated.center.z,
    ]);
    let mut yaw = Dual2::constant(yaw0);
    let mut pitch = Dual2::constant(pitch0);
    let mut needs_rotation = false;
    for (slot, p) in wrt.params.iter().enumerate() {
        match p {
            PoseParam::X => center[0] = Dual2::var(designated.center.x, slot),
            PoseParam::Y => center[1] = Dual2::var(designated.center.y, slot),
            PoseParam::Z => center[2] = Dual2::var(designated.center.z, slot),
            PoseParam::Yaw => {
                yaw = Dual2::var(yaw0, slot);
                needs_rotation = true;
            }
            PoseParam::Pitch => {
                pitch = Dual2::var(pitch0, slot);
                needs_rotation = true;
            }
        }
    }

    let dual_designated = if needs_rotation {
        DualBox::from_yaw_pitch(
            center,
            yaw,
            pitch,
            &r_fix,
            [
                designated.half_extents.x,
                designated.half_extents.y,
                designated.half_extents.z,
            ],
        )
    } else {
        let mut db = DualBox::from_const(designated);
        db.center = center;
        db.center_const = false;
        db
    };

    let d = match wrt.body {
        WhichBody::A => ssat_smooth_dual(&dual_designated, &DualBox::from_const(b), sp, max_variant, abs_variant),
        WhichBody::B => ssat_smooth_dual(&DualBox::from_const(a), &dual_designated, sp, max_variant, abs_variant),
    };

    let h = if sp.switch_threshold.is_finite() {
        let exact = sat_margin(a, b);
        if exact > sp.switch_threshold {
            exact
        } else {
            d.v
        }
    } else {
        d.v
    };

    let mut hess = DMatrix::zeros(K, K);
    for p in 0..K {
        for q in 0..K {
            hess[(p, q)] = d.h[p][q];
        }
    }
    Ok(CollisionMargin {
        h,
        grad: DVector::from_column_slice(&d.g),
        hessian: hess,
    })
}

/// Superellipsoid margin of a point against an (optionally inflated) box:
/// `h = sum((u_i / a_i)^(2N)) - 1` with `u = R^T (p - c)`. `-1` at the box
/// center, `0` on the surface, positive outside. Derivatives are with respect
/// to the world point.
pub fn superellipsoid_margin(
    point: &Vector3<f64>,
    cuboid: &Cuboid,
    n: u32,
    inflation: f64,
) -> Result<CollisionMargin> {
    if n < 1 {
        return Err(Error::InvalidParam("superellipsoid N must be >= 1".into()));
    }
    if !(inflation >= 0.0) {
        return Err(Error::InvalidParam("inflation must be non-negative".into()));
    }
    if !point.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("superellipsoid point"));
    }
    let semi = cuboid.half_extents.add_scalar(inflation);
    let local = cuboid.rotation.transpose() * (point - cuboid.center);
    let e = 2 * n as i32;
    let mut h = -1.0;
    let mut dl = Vector3::zeros();
    let mut ddl = Vector3::zeros();
    for i in 0..3 {
        let u = local[i] / semi[i];
        h += u.powi(e);
        dl[i] = e as f64 * u.powi(e - 1) / semi[i];
        ddl[i] = (e * (e - 1)) as f64 * u.powi(e - 2) / (semi[i] * semi[i]);
    }
    let grad = cuboid.rotation * dl;
    let hess = cuboid.rotation * Matrix3::from_diagonal(&ddl) * cuboid.rotation.transpose();
    let mut hd = DMatrix::zeros(3, 3);
    for i in 0..3 {
        for j in 0..3 {
            hd[(i, j)] = hess[(i, j)];
        }
    }
    Ok(CollisionMargin {
        h,
        grad: DVector::from_column_slice(grad.as_slice()),
        hessian: hd,
    })
}

/// Superellipsoid margin over a dual point (used by the toe constraint rows;
/// same formula as [`superellipsoid_margin`]).
pub(crate) fn superellipsoid_dual<const K: usize>(
    point: &DVec3<K>,
    cuboid: &Cuboid,
    n: u32,
    inflation: f64,
) -> Dual2<K> {
    let semi = cuboid.half_extents.add_scalar(inflation);
    let rel = [
        point[0] - Dual2::constant(cuboid.center.x),
        point[1] - Dual2::constant(cuboid.center.y),
        point[2] - Dual2::constant(cuboid.center.z),
    ];
    let e = 2 * n as i32;
    let mut h = Dual2::constant(-1.0);
    for i in 0..3 {
        // Row i of R^T is column i of R.
        let col = cuboid.rotation.column(i);
        let u = (rel[0].scale(col[0]) + rel[1].scale(col[1]) + rel[2].scale(col[2]))
            .scale(1.0 / semi[i]);
        h = h + u.powi(e);
    }
    h
}

const GJK_MAX_ITERS: usize = 64;

/// Support of a convex polytope given as its vertex set. GJK's interface:
/// it sees the shapes only through this argmax, which is what keeps the
/// algorithm generic (and is why SAT, which exploits the box structure
/// directly, beats it on cuboids).
fn poly_support(verts: &[Vector3<f64>; 8], dir: &Vector3<f64>) -> Vector3<f64> {
    let mut best = verts[0];
    let mut bd = best.dot(dir);
    for v in &verts[1..] {
        let d = v.dot(dir);
        if d > bd {
            bd = d;
            best = *v;
        }
    }
    best
}

/// Boolean GJK intersection over the two vertex sets. Falls back to the
/// exact SAT sign if the simplex iteration hits its cap on a degenerate
/// contact.
pub fn gjk_intersect(a: &Cuboid, b: &Cuboid) -> bool {
    let va = a.corners();
    let vb = b.corners();
    // Support of the Minkowski difference B - A.
    let support = |dir: &Vector3<f64>| poly_support(&vb, dir) - poly_support(&va, &-dir);

    let mut dir = a.center - b.center;
    if dir.norm_squared() < 1e-24 {
        return true;
    }
    let mut simplex: Vec<Vector3<f64>> = Vec::with_capacity(4);
    simplex.push(support(&dir));
    dir = -simplex[0];

    for _ in 0..GJK_MAX_ITERS {
        if dir.norm_squared() < 1e-24 {
            return true; // origin on the simplex
        }
        let p = support(&dir);
        if p.dot(&dir) < 0.0 {
            return false;
        }
        simplex.push(p);
        if next_simplex(&mut simplex, &mut dir) {
            return true;
        }
    }
    sat_margin(a, b) <= 0.0
}

/// Evolve the GJK simplex toward the origin; true if it contains the origin.
fn next_simplex(simplex: &mut Vec<Vector3<f64>>, dir: &mut Vector3<f64>) -> bool {
    match simplex.len() {
        2 => {
            let (b, a) = (simplex[0], simplex[1]);
            let ab = b - a;
            let ao = -a;
            if ab.dot(&ao) > 0.0 {
                *dir = ab.cross(&ao).cross(&ab);
            } else {
                simplex.remove(0);
                *dir = ao;
            }
            false
        }
        3 => {
            let (c, b, a) = (simplex[0], simplex[1], simplex[2]);
            let ab = b - a;
            let ac = c - a;
            let ao = -a;
            let abc = ab.cross(&ac);
            if abc.cross(&ac).dot(&ao) > 0.0 {
                if ac.dot(&ao) > 0.0 {
                    *simplex = vec![c, a];
                    *dir = ac.cross(&ao).cross(&ac);
                } else {
                    *simplex = vec![b, a];
                    return next_simplex(simplex, dir);
                }
            } else if ab.cross(&abc).dot(&ao) > 0.0 {
                *simplex = vec![b, a];
                return next_simplex(simplex, dir);
            } else if abc.dot(&ao) > 0.0 {
                *dir = abc;
            } else {
                *simplex = vec![b, c, a];
                *dir = -abc;
            }
            false
        }
        4 => {
            let (d, c, b, a) = (simplex[0], simplex[1], simplex[2], simplex[3]);
            let ao = -a;
            let abc = (b - a).cross(&(c - a));
            let acd = (c - a).cross(&(d - a));
            let adb = (d - a).cross(&(b - a));
            if abc.dot(&ao) > 0.0 {
                *simplex = vec![c, b, a];
                *dir = abc;
                return next_simplex(simplex, dir);
            }
            if acd.dot(&ao) > 0.0 {
                *simplex = vec![d, c, a];
                *dir = acd;
                return next_simplex(simplex, dir);
            }
            if adb.dot(&ao) > 0.0 {
                *simplex = vec![b, d, a];
                *dir = adb;
                return next_simplex(simplex, dir);
            }
            true
        }
        _ => false,
    }
}

/// Minimum uniform scaling `s >= 0` such that the two boxes, each scaled by
/// `s` about its own center, share a point. `s <= 1` iff the boxes intersect.
/// Solved as a 4-variable linear program (`x` in R^3 plus `s`) with the 12
/// face constraints `|u_i . (x - c)| <= s * e_i`.
pub fn lp_min_scaling(a: &Cuboid, b: &Cuboid) -> Result<f64> {
    // min s  s.t.  +-u . x - e s <= +-u . c  for each face of each box.
    let mut rows: Vec<[f64; 4]> = Vec::with_capacity(24);
    let mut rhs: Vec<f64> = Vec::with_capacity(24);
    for bx in [a, b] {
        for k in 0..3 {
            let u: Vector3<f64> = bx.rotation.column(k).into();
            let e = bx.half_extents[k];
            let c = u.dot(&bx.center);
            rows.push([u.x, u.y, u.z, -e]);
            rhs.push(c);
            rows.push([-u.x, -u.y, -u.z, -e]);
            rhs.push(-c);
        }
    }
    let objective = [0.0, 0.0, 0.0, 1.0];
    let sol = simplex_free_min(&objective, &rows, &rhs)?;
    Ok(sol[3])
}

/// Minimize `c . z` over free variables `z` subject to `A z <= b`, via a
/// two-phase dense simplex on the split-variable standard form. Sized for the
/// tiny LPs above; not a general-purpose solver.
fn simplex_free_min(c: &[f64], a_ub: &[[f64; 4]], b_ub: &[f64]) -> Result<Vec<f64>> {
    let n_free = c.len();
    let m = a_ub.len();
    // Columns: z+ (n), z- (n), slacks (m), artificials (appended in phase 1).
    let n_cols = 2 * n_free + m;
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut rhs: Vec<f64> = Vec::with_capacity(m);
    for (r, &b) in a_ub.iter().zip(b_ub) {
        let mut row = vec![0.0; n_cols];
        let sign = if b < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n_free {
            row[j] = sign * r[j];
            row[n_free + j] = -sign * r[j];
        }
        row[2 * n_free + rows.len()] = sign; // slack
        rows.push(row);
        rhs.push(sign * b);
    }
    let mut cost = vec![0.0; n_cols];
    for j in 0..n_free {
        cost[j] = c[j];
        cost[n_free + j] = -c[j];
    }
    let solution = two_phase_simplex(rows, rhs, cost)?;
    Ok((0..n_free)
        .map(|j| solution[j] - solution[n_free + j])
        .collect())
}

/// Two-phase simplex with Bland's rule. `rows`/`rhs` define `A z = b` with
/// `b >= 0`, `z >= 0`; returns the optimal `z`.
fn two_phase_simplex(
    mut rows: Vec<Vec<f64>>,
    mut rhs: Vec<f64>,
    cost: Vec<f64>,
) -> Result<Vec<f64>> {
    let m = rows.len();
    let n = cost.len();
    // Append artificial variables and build the phase-1 basis.
    for (i, row) in rows.iter_mut().enumerate() {
        row.resize(n + m, 0.0);
        row[n + i] = 1.0;
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    let phase1_cost: Vec<f64> = (0..n + m)
        .map(|j| if j >= n { 1.0 } else { 0.0 })
        .collect();

    run_simplex(&mut rows, &mut rhs, &mut basis, &phase1_cost, n + m)?;
    let p1_obj: f64 = basis
        .iter()
        .zip(&rhs)
        .filter(|(&b, _)| b >= n)
        .map(|(_, &v)| v)
        .sum();
    if p1_obj > 1e-8 {
        return Err(Error::Numerical("LP infeasible".into()));
    }
    // Drive any artificial still in the basis out (degenerate rows).
    for i in 0..m {
        if basis[i] >= n {
            if let Some(j) = (0..n).find(|&j| rows[i][j].abs() > 1e-9) {
                pivot(&mut rows, &mut rhs, &mut basis, i, j);
            }
        }
    }

    let mut full_cost = cost;
    full_cost.resize(n + m, f64::INFINITY); // artificials never re-enter
    run_simplex(&mut rows, &mut rhs, &mut basis, &full_cost, n)?;

    let mut z = vec![0.0; n];
    for (i, &b) in basis.iter().enumerate() {
        if b < n {
            z[b] = rhs[i];
        }
    }
    Ok(z)
}

fn run_simplex(
    rows: &mut [Vec<f64>],
    rhs: &mut [f64],
    basis: &mut [usize],
    cost: &[f64],
    n_enterable: usize,
) -> Result<()> {
    let m = rows.len();
    for _ in 0..10_000 {
        // Reduced costs: c_j - c_B . B^-1 A_j (tableau already reduced).
        let mut entering = None;
        for j in 0..n_enterable {
            if basis.contains(&j) {
                continue;
            }
            let mut rc = cost[j];
            for i in 0..m {
                rc -= cost[basis[i]] * rows[i][j];
            }
            if rc < -1e-10 {
                entering = Some(j); // Bland: first improving column
                break;
            }
        }
        let Some(j) = entering else { return Ok(()) };
        // Ratio test.
        let mut leave = None;
        let mut best = f64::INFINITY;
        for i in 0..m {
            if rows[i][j] > 1e-12 {
                let ratio = rhs[i] / rows[i][j];
                if ratio < best - 1e-12
                    || (ratio < best + 1e-12 && leave.map_or(true, |l: usize| basis[i] < basis[l]))
                {
                    best = ratio;
                    leave = Some(i);
                }
            }
        }
        let Some(i) = leave else {
            return Err(Error::Numerical("LP unbounded".into()));
        };
        pivot(rows, rhs, basis, i, j);
    }
    Err(Error::Numerical("simplex iteration cap".into()))
}

fn pivot(rows: &mut [Vec<f64>], rhs: &mut [f64], basis: &mut [usize], i: usize, j: usize) {
    let m = rows.len();
    let inv = 1.0 / rows[i][j];
    for v in rows[i].iter_mut() {
        *v *= inv;
    }
    rhs[i] *= inv;
    for r in 0..m {
        if r != i {
            let f = rows[r][j];
            if f != 0.0 {
                for col in 0..rows[r].len() {
                    rows[r][col] -= f * rows[i][col];
                }
                rhs[r] -= f * rhs[i];
            }
        }
    }
    basis[i] = j;
}

/// A planar half-space `a . p + b >= 0`, with `a` unit length.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct HalfSpace2 {
    pub a: nalgebra::Vector2<f64>,
    pub b: f64,
}

impl HalfSpace2 {
    /// Signed distance of `p` to the boundary, positive inside.
    pub fn margin(&self, p: &nalgebra::Vector2<f64>) -> f64 {
        self.a.dot(p) + self.b
    }
}

/// Counterclockwise convex hull vertices of `points` (Andrew monotone
/// chain). Needs at least 3 non-collinear points.
pub fn convex_hull_points(points: &[nalgebra::Vector2<f64>]) -> Result<Vec<nalgebra::Vector2<f64>>> {
    if points.len() < 3 {
        return Err(Error::Empty("convex hull needs at least 3 points"));
    }
    let mut pts: Vec<nalgebra::Vector2<f64>> = points.to_vec();
    pts.sort_by(|p, q| (p.x, p.y).partial_cmp(&(q.x, q.y)).unwrap());
    pts.dedup_by(|p, q| (*p - *q).norm() < 1e-12);

    let cross = |o: &nalgebra::Vector2<f64>, a: &nalgebra::Vector2<f64>, b: &nalgebra::Vector2<f64>| {
        (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
    };
    let chain = |iter: &mut dyn Iterator<Item = &nalgebra::Vector2<f64>>| {
        let mut half: Vec<nalgebra::Vector2<f64>> = Vec::new();
        for p in iter {
            while half.len() >= 2 && cross(&half[half.len() - 2], &half[half.len() - 1], p) <= 1e-12
            {
                half.pop();
            }
            half.push(*p);
        }
        half.pop();
        half
    };
    let mut hull = chain(&mut pts.iter());
    hull.extend(chain(&mut pts.iter().rev()));
    if hull.len() < 3 {
        return Err(Error::InvalidParam("hull points are collinear".into()));
    }
    Ok(hull)
}

/// Inward half-spaces of the convex hull of `points`, each moved inward by
/// `shrink`. Needs at least 3 non-collinear points.
pub fn convex_hull_halfspaces(
    points: &[nalgebra::Vector2<f64>],
    shrink: f64,
) -> Result<Vec<HalfSpace2>> {
    let hull = convex_hull_points(points)?;

    let mut out = Vec::with_capacity(hull.len());
    for i in 0..hull.len() {
        let p = hull[i];
        let q = hull[(i + 1) % hull.len()];
        let edge = q - p;
        // Inward normal for a counterclockwise hull.
        let a = nalgebra::Vector2::new(-edge.y, edge.x).normalize();
        out.push(HalfSpace2 {
            a,
            b: -a.dot(&p) - shrink,
        });
    }
    Ok(out)
}

/// Random cuboid matching the benchmark distribution: center uniform in
/// `[-2, 2]^3`, half-extents log-uniform in `[0.05, 1]`, rotation uniform.
pub fn random_cuboid<R: rand::Rng>(rng: &mut R) -> Cuboid {
    use rand::distributions::Distribution;
    let unif = rand::distributions::Uniform::new(-2.0, 2.0);
    let center = Vector3::new(unif.sample(rng), unif.sample(rng), unif.sample(rng));
    let lo = 0.05f64.ln();
    let hi = 1.0f64.ln();
    let he = Vector3::from_fn(|_, _| (lo + (hi - lo) * rng.gen::<f64>()).exp());
    // Uniform rotation via a random unit quaternion.
    let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        rng.gen::<f64>() * 2.0 - 1.0,
        rng.gen::<f64>() * 2.0 - 1.0,
        rng.gen::<f64>() * 2.0 - 1.0,
        rng.gen::<f64>() * 2.0 - 1.0,
    ));
    Cuboid {
        center,
        rotation: q.to_rotation_matrix().into_inner(),
        half_extents: he,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_cube(x: f64) -> Cuboid {
        Cuboid::axis_aligned(Vector3::new(x, 0.0, 0.0), Vector3::new(0.5, 0.5, 0.5)).unwrap()
    }

    #[test]
    fn candidate_axes_identical_boxes_degenerate_crosses() {
        let a = unit_cube(0.0);
        let b = unit_cube(0.0);
        let axes = candidate_axes(&a, &b);
        // Only the parallel pairs (x,x), (y,y), (z,z) collapse.
        for j in 0..3 {
            for k in 0..3 {
                assert_eq!(axes[6 + 3 * j + k].degenerate, j == k);
            }
        }
        assert!(axes[..6].iter().all(|ax| !ax.degenerate));
        for ax in axes {
            assert_relative_eq!(ax.axis.norm(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn candidate_axes_45_degree_rotation() {
        let a = unit_cube(0.0);
        let b = Cuboid::from_yaw_pitch(
            Vector3::zeros(),
            std::f64::consts::FRAC_PI_4,
            0.0,
            Vector3::new(0.5, 0.5, 0.5),
        )
        .unwrap();
        let axes = candidate_axes(&a, &b);
        // z x z is degenerate; x/y crosses are +-z family.
        assert!(axes[6 + 3 * 2 + 2].degenerate);
        let zx = axes[6]; // a_x x b_x
        assert!(!zx.degenerate);
        assert_relative_eq!(zx.axis.x.abs(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(zx.axis.y.abs(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(zx.axis.z.abs(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn candidate_axes_generic_pair_all_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_cuboid(&mut rng);
        let b = random_cuboid(&mut rng);
        for ax in candidate_axes(&a, &b) {
            assert!(ax.axis.iter().all(|v| v.is_finite()));
            assert_relative_eq!(ax.axis.norm(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn sat_margin_hand_cases() {
        assert_relative_eq!(sat_margin(&unit_cube(0.0), &unit_cube(3.0)), 2.0, epsilon = 1e-12);
        assert_relative_eq!(sat_margin(&unit_cube(0.0), &unit_cube(1.0)), 0.0, epsilon = 1e-12);
        assert_relative_eq!(sat_margin(&unit_cube(0.0), &unit_cube(0.5)), -0.5, epsilon = 1e-12);
    }

    #[test]
    fn sat_symmetry_and_rigid_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let a = random_cuboid(&mut rng);
            let b = random_cuboid(&mut rng);
            assert_relative_eq!(sat_margin(&a, &b), sat_margin(&b, &a), epsilon = 1e-12);

            let t = Vector3::new(0.3, -1.2, 0.8);
            let r = rot_z(0.7) * rot_y(-0.3);
            let map = |c: &Cuboid| Cuboid {
                center: r * c.center + t,
                rotation: r * c.rotation,
                half_extents: c.half_extents,
            };
            assert_relative_eq!(
                sat_margin(&map(&a), &map(&b)),
                sat_margin(&a, &b),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn ssat_far_pair_within_band() {
        let sp = SmoothingParams::default().without_switching();
        let wrt = PoseParameterization::translation(WhichBody::B);
        let m = ssat_margin(&unit_cube(0.0), &unit_cube(3.0), &sp, &wrt).unwrap();
        assert!(m.h > 2.0 - 1.0 / sp.alpha_abs, "h = {}", m.h);
        assert!(m.h < 2.0 + sp.upper_band(), "h = {}", m.h);
    }

    #[test]
    fn ssat_switching_returns_exact_value() {
        let sp = SmoothingParams::default(); // threshold 0.5 m
        let wrt = PoseParameterization::translation(WhichBody::B);
        let m = ssat_margin(&unit_cube(0.0), &unit_cube(3.0), &sp, &wrt).unwrap();
        assert_relative_eq!(m.h, 2.0, epsilon = 1e-12);
        // Derivatives still come from the smooth form.
        assert!(m.grad[0] > 0.5);
    }

    #[test]
    fn ssat_value_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sp = SmoothingParams::default().without_switching();
        let wrt_a = PoseParameterization::translation(WhichBody::A);
        for _ in 0..50 {
            let a = random_cuboid(&mut rng);
            let b = random_cuboid(&mut rng);
            let mab = ssat_margin(&a, &b, &sp, &wrt_a).unwrap();
            let mba = ssat_margin(&b, &a, &sp, &wrt_a).unwrap();
            assert_relative_eq!(mab.h, mba.h, epsilon = 1e-9);
        }
    }

    fn fd_check_pose_derivs(
        a: &Cuboid,
        b: &Cuboid,
        sp: &SmoothingParams,
        wrt: &PoseParameterization,
        tol: f64,
    ) {
        let k = wrt.params.len();
        let m = ssat_margin(a, b, sp, wrt).unwrap();
        let eps = 1e-6;
        let perturbed = |deltas: &[f64]| -> f64 {
            let designated = match wrt.body {
                WhichBody::A => b,
                WhichBody::B => b,
            };
            let _ = designated;
            let base = match wrt.body {
                WhichBody::A => a,
                WhichBody::B => b,
            };
            let (y0, p0, rfix) = yaw_pitch_split(&base.rotation);
            let mut c = base.center;
            let mut y = y0;
            let mut p = p0;
            for (slot, param) in wrt.params.iter().enumerate() {
                match param {
                    PoseParam::X => c.x += deltas[slot],
                    PoseParam::Y => c.y += deltas[slot],
                    PoseParam::Z => c.z += deltas[slot],
                    PoseParam::Yaw => y += deltas[slot],
                    PoseParam::Pitch => p += deltas[slot],
                }
            }
            let moved = Cuboid {
                center: c,
                rotation: rot_z(y) * rot_y(p) * rfix,
                half_extents: base.half_extents,
            };
            match wrt.body {
                WhichBody::A => ssat_value(&moved, b, sp, MaxVariant::Lse, AbsVariant::XTanh),
                WhichBody::B => ssat_value(a, &moved, sp, MaxVariant::Lse, AbsVariant::XTanh),
            }
        };
        for i in 0..k {
            let mut dp = vec![0.0; k];
            let mut dm = vec![0.0; k];
            dp[i] = eps;
            dm[i] = -eps;
            let fd = (perturbed(&dp) - perturbed(&dm)) / (2.0 * eps);
            let denom = fd.abs().max(1e-3);
            assert!(
                (m.grad[i] - fd).abs() / denom < tol,
                "grad[{i}] {} vs fd {}",
                m.grad[i],
                fd
            );
        }
    }

    #[test]
    fn ssat_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let sp = SmoothingParams::default().without_switching();
        for _ in 0..30 {
            let a = random_cuboid(&mut rng);
            let b = random_cuboid(&mut rng);
            fd_check_pose_derivs(&a, &b, &sp, &PoseParameterization::full_pose(WhichBody::B), 1e-4);
            fd_check_pose_derivs(&a, &b, &sp, &PoseParameterization::translation(WhichBody::A), 1e-4);
        }
    }

    #[test]
    fn ssat_hessian_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let sp = SmoothingParams::default().without_switching();
        let wrt = PoseParameterization::full_pose(WhichBody::B);
        for _ in 0..20 {
            let a = random_cuboid(&mut rng);
            let b = random_cuboid(&mut rng);
            let m = ssat_margin(&a, &b, &sp, &wrt).unwrap();
            let asym = (&m.hessian - m.hessian.transpose()).norm();
            assert!(asym < 1e-9, "asymmetry {asym}");
        }
    }

    #[test]
    fn superellipsoid_center_surface_exterior() {
        let bx = unit_cube(0.0);
        let c = superellipsoid_margin(&Vector3::zeros(), &bx, 4, 0.0).unwrap();
        assert_relative_eq!(c.h, -1.0, epsilon = 1e-15);

        let s = superellipsoid_margin(&Vector3::new(0.5, 0.0, 0.0), &bx, 4, 0.0).unwrap();
        assert_relative_eq!(s.h, 0.0, epsilon = 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let p = Vector3::new(
                rng.gen::<f64>() * 4.0 - 2.0,
                rng.gen::<f64>() * 4.0 - 2.0,
                rng.gen::<f64>() * 4.0 - 2.0,
            );
            let m = superellipsoid_margin(&p, &bx, 4, 0.1).unwrap();
            let inflated = bx.inflate(0.1);
            // Sign agrees with exact membership outside the corner-rounding band.
            let local = inflated.rotation.transpose() * (p - inflated.center);
            let linf = (local.x.abs() / inflated.half_extents.x)
                .max(local.y.abs() / inflated.half_extents.y)
                .max(local.z.abs() / inflated.half_extents.z);
            if linf > 1.05 {
                assert!(m.h > 0.0, "exterior point flagged inside: {p:?}");
            } else if linf < 0.9 {
                assert!(m.h < 0.0, "interior point flagged outside: {p:?}");
            }
        }
    }

    #[test]
    fn superellipsoid_derivatives_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let bx = random_cuboid(&mut rng);
            let p = bx.center
                + Vector3::new(
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 2.0 - 1.0,
                );
            let m = superellipsoid_margin(&p, &bx, 4, 0.05).unwrap();
            let eps = 1e-6;
            for i in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[i] += eps;
                pm[i] -= eps;
                let fd = (superellipsoid_margin(&pp, &bx, 4, 0.05).unwrap().h
                    - superellipsoid_margin(&pm, &bx, 4, 0.05).unwrap().h)
                    / (2.0 * eps);
                let denom = fd.abs().max(1e-3);
                assert!((m.grad[i] - fd).abs() / denom < 1e-4);
            }
        }
    }

    #[test]
    fn gjk_hand_cases() {
        assert!(!gjk_intersect(&unit_cube(0.0), &unit_cube(3.0)));
        assert!(gjk_intersect(&unit_cube(0.0), &unit_cube(0.0)));
        assert!(gjk_intersect(&unit_cube(0.0), &unit_cube(0.5)));
    }

    #[test]
    fn gjk_agrees_with_sat_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut checked = 0;
        for _ in 0..20_000 {
            let a = random_cuboid(&mut rng);
            let b = random_cuboid(&mut rng);
            let h = sat_margin(&a, &b);
            if h.abs() < 1e-9 {
                continue;
            }
            checked += 1;
            assert_eq!(gjk_intersect(&a, &b), h <= 0.0, "h = {h}");
        }
        assert!(checked > 19_000);
    }

    #[test]
    fn lp_hand_cases() {
        let s = lp_min_scaling(&unit_cube(0.0), &unit_cube(0.0)).unwrap();
        assert!(s <= 1.0);
        let s = lp_min_scaling(&unit_cube(0.0), &unit_cube(3.0)).unwrap();
        assert_relative_eq!(s, 3.0, epsilon = 1e-8);
        let s = lp_min_scaling(&unit_cube(0.0), &unit_cube(1.0)).unwrap();
        assert_relative_eq!(s, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn lp_sign_agrees_with_sat() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..500 {
            let a = random_cuboid(&mut rng);
            let b = random_cuboid(&mut rng);
            let h = sat_margin(&a, &b);
            if h.abs() < 1e-6 {
                continue;
            }
            let s = lp_min_scaling(&a, &b).unwrap();
            assert_eq!(s <= 1.0, h <= 0.0, "s = {s}, h = {h}");
        }
    }
}
