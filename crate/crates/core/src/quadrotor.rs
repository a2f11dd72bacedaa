//! Hover linearization of a quadrotor and the sets of the desk-scale study.
//!
//! State: `x y z  x' y' z'  phi theta psi  phi' theta' psi'`. Inputs: collective
//! thrust acceleration and three body torques (unit inertia). The thrust is
//! expressed as a deviation from the midpoint of its admissible range, which
//! is taken as the hover operating point; the model input set is therefore
//! the box ellipsoid shifted to the origin.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector};

use crate::ellipsoid::{mvie_box, Ellipsoid, HyperRectangle};
use crate::error::Result;
use crate::reach::{InputBounds, LtiSystem};
use crate::sim::{self, PerfPolicy};

pub const GRAVITY: f64 = 9.81;

pub const INITIAL_STATE: [f64; 12] =
    [-0.4032, 0.7641, 3.6437, -1.2406, 0.0165, 3.0335, -0.0789, -0.4835, -0.3841, 0.0375, 0.6806, 0.5509];

#[derive(Clone, Debug)]
pub struct QuadrotorModel {
    pub system: LtiSystem,
    pub bounds: InputBounds,
    /// Constraint ellipsoid `K_eps`.
    pub constraint: Ellipsoid,
    /// Thrust and torque box in physical units.
    pub input_box: HyperRectangle,
    /// Thrust subtracted from the first input of the box.
    pub hover_thrust: f64,
    pub x0: DVector<f64>,
    pub x_ss: DVector<f64>,
    pub lqr_q: DMatrix<f64>,
    pub lqr_r: DMatrix<f64>,
}

/// Sign of the attitude-to-acceleration coupling.
///
/// `Standard` is the Z-Y-X rigid-body linearization (`x'' = g theta`,
/// `y'' = -g phi`). `Mirrored` flips both signs, as in frames where pitch and
/// roll are measured the other way round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TiltCoupling {
    #[default]
    Standard,
    Mirrored,
}

pub fn quadrotor_model() -> QuadrotorModel {
    quadrotor_model_with(TiltCoupling::Standard)
}

pub fn quadrotor_model_with(tilt: TiltCoupling) -> QuadrotorModel {
    let sign = match tilt {
        TiltCoupling::Standard => 1.0,
        TiltCoupling::Mirrored => -1.0,
    };
    let mut a = DMatrix::zeros(12, 12);
    for i in 0..3 {
        a[(i, i + 3)] = 1.0;
        a[(6 + i, 9 + i)] = 1.0;
    }
    a[(3, 7)] = sign * GRAVITY;
    a[(4, 6)] = -sign * GRAVITY;
    let mut b = DMatrix::zeros(12, 4);
    b[(5, 0)] = 1.0;
    b[(9, 1)] = 1.0;
    b[(10, 2)] = 1.0;
    b[(11, 3)] = 1.0;
    let mut g = DMatrix::zeros(12, 1);
    for i in 3..6 {
        g[(i, 0)] = 1.0;
    }
    let system = LtiSystem::new(a, b, g).expect("quadrotor matrices are consistent");

    let input_box = HyperRectangle::new(vec![0.5, -0.5, -0.5, -0.5], vec![5.4, 0.5, 0.5, 0.5]).expect("valid box");
    let u_phys = mvie_box(&input_box);
    let hover_thrust = u_phys.center()[0];
    let u = Ellipsoid::new(DVector::zeros(4), u_phys.shape().clone()).expect("box ellipsoid is nondegenerate");
    let v_box = HyperRectangle::new(vec![0.0], vec![0.1]).expect("valid box");
    let bounds = InputBounds::new(u, mvie_box(&v_box)).expect("valid bounds");

    // Each block bound is a ball, so the block-diagonal ellipsoid with those
    // radii is the largest one inside their product.
    let angle = FRAC_PI_2 * FRAC_PI_2;
    let radii2 = [9.0, 9.0, 9.0, 25.0, 25.0, 25.0, angle, angle, angle, 9.0, 9.0, 9.0];
    let mut center = DVector::zeros(12);
    center[2] = 4.0;
    let constraint = Ellipsoid::new(center, DMatrix::from_diagonal(&DVector::from_row_slice(&radii2))).expect("valid");

    let mut x_ss = DVector::zeros(12);
    x_ss[2] = 5.0;
    QuadrotorModel {
        system,
        bounds,
        constraint,
        input_box,
        hover_thrust,
        x0: DVector::from_row_slice(&INITIAL_STATE),
        x_ss,
        lqr_q: DMatrix::identity(12, 12) * 1e-5,
        lqr_r: DMatrix::from_diagonal(&DVector::from_row_slice(&[1e-6, 1e8, 1e8, 1e8])),
    }
}

impl QuadrotorModel {
    pub fn lqr_policy(&self) -> Result<PerfPolicy> {
        let gain = sim::lqr_gain(self.system.a(), self.system.b(), &self.lqr_q, &self.lqr_r)?;
        Ok(PerfPolicy::SaturatedLqr { gain, x_ss: self.x_ss.clone(), u_ss: DVector::zeros(4) })
    }
}
