//! Cooperative object transport planning for formations of nonholonomic
//! mobile manipulators.
//!
//! The crate is split along the planning pipeline:
//!
//! - [`geom2d`]: planar polygons, half-planes, ellipses, visibility and
//!   boolean operations.
//! - [`global_planner`]: offline visibility-graph path, free-space
//!   corridors and the smoothed reference curve.
//! - [`robot_model`]: differential-drive base plus DH arm kinematics and the
//!   rigid formation built on top of it.
//! - [`nmpc`]: the receding-horizon constrained optimisation and its SQP
//!   solver.
//! - [`sim`]: closed-loop kinematic simulation and safety metrics.
//! - [`io`]: scenario, plan, metrics and trajectory file formats.
//!
//! Geometry and kinematics are generic over a [`Real`] scalar so the same
//! code runs on `f32`, `f64` and on the forward-mode [`autodiff::Dual`]
//! numbers the optimiser uses for exact derivatives. The `*64` aliases below
//! are the concrete types used by the planner and the file formats.

pub mod autodiff;
pub mod error;
pub mod geom2d;
pub mod global_planner;
pub mod io;
pub mod nmpc;
pub mod robot_model;
pub mod sim;

use std::fmt::Debug;

use num_traits::{Float, FloatConst};

pub use error::{Error, Result};

/// Scalar type accepted by the geometric and kinematic code.
pub trait Real: Float + FloatConst + Debug + Default + Send + Sync + 'static {
    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as num_traits::NumCast>::from(x).expect("finite literal")
    }

    /// The plain value, dropping any derivative parts.
    #[inline]
    fn value(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub type Point2f = geom2d::Point2<f64>;
pub type Polygon64 = geom2d::Polygon<f64>;
pub type HalfPlane64 = geom2d::HalfPlane<f64>;
pub type Ellipse64 = geom2d::Ellipse<f64>;
pub type MMRState64 = robot_model::MMRState<f64>;
pub type ControlInput64 = robot_model::ControlInput<f64>;
pub type FormationConfig64 = robot_model::FormationConfig<f64>;
