//! Real-time safety filtering for a six-wheeled-telescopic-legged platform.
//!
//! The crate is organized around a quadratic-program safety filter that
//! minimally modifies a nominal control input so that a set of exponential
//! control-barrier-function (ECBF) constraints stays satisfied. The
//! constraints cover joint limits, body/obstacle collision via a smooth
//! separating-axis margin, toe/obstacle collision via superellipsoids,
//! convex foothold membership, foot height, and static stability.
//!
//! Module map:
//! - [`smoothmath`]: smooth replacements for `max` and `abs` with first and
//!   second derivatives and certified error bounds.
//! - [`geometry`]: oriented-cuboid collision margins (exact SAT, smooth SAT
//!   with analytic derivatives, superellipsoid point margin, GJK and LP
//!   baselines).
//! - [`model`]: the 36-state / 17-input ground-moving-origin kinematic model,
//!   leg inverse kinematics, RK4 integration, origin exchange.
//! - [`safety`]: ECBF row assembly for every constraint family and the dense
//!   active-set QP filter.
//! - [`planner`]: reference motion generation (gait schedule, footsteps, yaw
//!   spline, convex safe regions, nominal input).
//! - [`simharness`]: closed-loop episode runner over declarative scenes with
//!   post-hoc exact-geometry safety verification.
//! - [`cli`]: benchmark / boundary-sweep / episode entry points.

pub mod cli;
pub mod dual;
pub mod geometry;
pub mod model;
pub mod planner;
pub mod safety;
pub mod simharness;
pub mod smoothmath;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("QP did not converge: {0}")]
    QpFailure(String),
    #[error("scene schema error: {0}")]
    Schema(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
