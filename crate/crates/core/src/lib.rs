//! Piecewise-ellipsoidal under-approximations of discriminating kernels for
//! linear time-invariant systems with bounded inputs and disturbances, and a
//! hybrid controller that keeps the state inside them.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod commands;
pub mod config;
pub mod controller;
pub mod ellipsoid;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod numeric;
pub mod quadrotor;
pub mod reach;
pub mod sim;

pub use config::RunConfig;
pub use controller::{ControlDecision, Controller, ControllerConfig, ControllerState, Mode, Variant};
pub use ellipsoid::{Ellipsoid, HyperRectangle};
pub use error::{Error, Result};
pub use kernel::{KernelApprox, KernelOptions, Partition};
pub use sim::{DisturbancePolicy, PerfPolicy, Trajectory};
pub use reach::{DirectionSet, InputBounds, LtiSystem, ReachSegment};
