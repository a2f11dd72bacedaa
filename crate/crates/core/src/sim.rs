//! Closed-loop simulation, disturbance and performance policies, LQR and
//! saturation, and the Monte-Carlo safety oracle.

use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controller::{ControlDecision, Controller, ControllerConfig, DecisionFlags, Mode};
use crate::ellipsoid::{self, Ellipsoid};
use crate::error::{Error, Result};
use crate::kernel::KernelApprox;
use crate::linalg;
use crate::numeric::TOL;
use crate::reach::{InputBounds, LtiSystem};

/// `nu + V G' l / sqrt(l' G V G' l)`, or `nu` when `G V G'` vanishes along `l`.
pub fn worst_case_disturbance(l: &DVector<f64>, g: &DMatrix<f64>, v: &Ellipsoid) -> DVector<f64> {
    let gtl = g.transpose() * l;
    let vgtl = v.shape() * &gtl;
    let denom = gtl.dot(&vgtl);
    if !(denom > 0.0) || denom.sqrt() <= 1e-14 * l.norm() {
        return v.center().clone();
    }
    v.center() + vgtl / denom.sqrt()
}

/// Projects `u_raw` onto the boundary of `U` along `u_raw` when it lies outside:
/// `mu + U u / sqrt(u' U u)`.
pub fn saturate(u_raw: &DVector<f64>, u: &Ellipsoid) -> DVector<f64> {
    if u.contains(u_raw).unwrap_or(false) {
        return u_raw.clone();
    }
    let dir = if u_raw.norm() > 0.0 { u_raw.clone() } else { u.center().clone() };
    let udir = u.shape() * &dir;
    let denom = dir.dot(&udir);
    if !(denom > 0.0) {
        return u.center().clone();
    }
    u.center() + udir / denom.sqrt()
}

/// Continuous-time LQR gain from the stationary solution of the Riccati ODE
/// `P' = A'P + PA - P B R^-1 B' P + Q`, integrated from `P = 0` with
/// step-doubling adaptive RK4 until `|P'|_inf < 1e-9 max(1, |P|_inf)`.
/// Accepted steps are projected back onto the positive semidefinite cone:
/// the flow blows up in finite time along negative directions, and rounding
/// produces them when `P` spans many orders of magnitude.
pub fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::DimensionMismatch("LQR matrices have inconsistent shapes".into()));
    }
    let r_inv = Cholesky::new(linalg::symmetrized(r))
        .ok_or_else(|| Error::InvalidArgument("R must be positive definite".into()))?
        .inverse();
    let s = linalg::symmetrized(&(b * &r_inv * b.transpose()));
    let at = a.transpose();
    let f = |p: &DMatrix<f64>| -> DMatrix<f64> { linalg::symmetrized(&(&at * p + p * a - p * &s * p + q)) };
    let rk4 = |p: &DMatrix<f64>, h: f64| -> DMatrix<f64> {
        let k1 = f(p);
        let k2 = f(&(p + &k1 * (0.5 * h)));
        let k3 = f(&(p + &k2 * (0.5 * h)));
        let k4 = f(&(p + &k3 * h));
        p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    };

    let mut p = DMatrix::zeros(n, n);
    let mut h = 1e-3;
    let mut converged = false;
    for _ in 0..2_000_000 {
        let deriv = f(&p);
        let scale = linalg::sup_norm(&p).max(1.0);
        if linalg::sup_norm(&deriv) < 1e-9 * scale {
            converged = true;
            break;
        }
        let full = rk4(&p, h);
        let half = rk4(&rk4(&p, 0.5 * h), 0.5 * h);
        let scale = linalg::sup_norm(&half).max(1e-300);
        let err = (&half - &full)
            .iter()
            .zip(half.iter())
            .map(|(e, v)| e.abs() / 15.0 / (1e-14 * scale + 1e-8 * v.abs()))
            .fold(0.0, f64::max);
        let tol = 1.0;
        if !err.is_finite() || half.iter().any(|v| !v.is_finite()) {
            h *= 0.25;
            if h < 1e-14 {
                break;
            }
            continue;
        }
        if err <= tol {
            let eig = linalg::SymEig::new(&half);
            p = if eig.min() < 0.0 { eig.map(|v| v.max(0.0)) } else { half };
        }
        let factor = if err > 0.0 { 0.9 * (tol / err).powf(0.2) } else { 5.0 };
        h *= factor.clamp(0.2, 5.0);
    }
    if !converged {
        return Err(Error::Stabilizability("Riccati flow did not reach a stationary point".into()));
    }
    let gain = &r_inv * b.transpose() * &p;
    if linalg::spectral_abscissa(&(a - b * &gain)) >= 0.0 {
        return Err(Error::Stabilizability("closed loop is not stable".into()));
    }
    Ok(gain)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisturbancePolicy {
    None,
    UniformRandom { seed: u64 },
    WorstCase,
    /// Alternates worst and anti-worst every `period` steps; `seed` picks the starting phase.
    AdversarialSwitching { period: usize, seed: u64 },
    /// Per-step samples, the last one held.
    Fixed { samples: Vec<Vec<f64>> },
}

impl DisturbancePolicy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::UniformRandom { .. } => "uniform",
            Self::WorstCase => "worst",
            Self::AdversarialSwitching { .. } => "adversarial",
            Self::Fixed { .. } => "fixed",
        }
    }
}

struct DisturbanceSource<'a> {
    policy: &'a DisturbancePolicy,
    rng: ChaCha8Rng,
    flip: bool,
}

impl<'a> DisturbanceSource<'a> {
    fn new(policy: &'a DisturbancePolicy, v: &Ellipsoid) -> Result<Self> {
        let (seed, flip) = match policy {
            DisturbancePolicy::UniformRandom { seed } => (*seed, false),
            DisturbancePolicy::AdversarialSwitching { period, seed } => {
                if *period == 0 {
                    return Err(Error::InvalidArgument("switching period must be positive".into()));
                }
                (*seed, seed % 2 == 1)
            }
            DisturbancePolicy::Fixed { samples } => {
                if samples.is_empty() {
                    return Err(Error::InvalidArgument("fixed disturbance needs samples".into()));
                }
                for s in samples {
                    if s.len() != v.dim() || !v.contains(&DVector::from_column_slice(s))? {
                        return Err(Error::InvalidArgument("fixed disturbance sample outside V".into()));
                    }
                }
                (0, false)
            }
            _ => (0, false),
        };
        Ok(Self { policy, rng: ChaCha8Rng::seed_from_u64(seed), flip })
    }

    /// Disturbance for step `i`, chosen after the control with knowledge of
    /// the outward direction `l`.
    fn sample(&mut self, i: usize, l: &DVector<f64>, g: &DMatrix<f64>, v: &Ellipsoid) -> DVector<f64> {
        match self.policy {
            DisturbancePolicy::None => v.center().clone(),
            DisturbancePolicy::UniformRandom { .. } => {
                if v.is_point() {
                    v.center().clone()
                } else {
                    v.sample_interior(&mut self.rng)
                }
            }
            DisturbancePolicy::WorstCase => worst_case_disturbance(l, g, v),
            DisturbancePolicy::AdversarialSwitching { period, .. } => {
                let worst = (i / period).is_multiple_of(2);
                if worst != self.flip {
                    worst_case_disturbance(l, g, v)
                } else {
                    worst_case_disturbance(&-l, g, v)
                }
            }
            DisturbancePolicy::Fixed { samples } => DVector::from_column_slice(&samples[i.min(samples.len() - 1)]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerfPolicy {
    ConstantInput {
        #[serde(with = "crate::linalg::serde_vector")]
        u: DVector<f64>,
    },
    /// `u = u_ss - gain (x - x_ss)`, then saturated.
    SaturatedLqr {
        #[serde(with = "crate::linalg::serde_matrix")]
        gain: DMatrix<f64>,
        #[serde(with = "crate::linalg::serde_vector")]
        x_ss: DVector<f64>,
        #[serde(with = "crate::linalg::serde_vector")]
        u_ss: DVector<f64>,
    },
    Fixed { samples: Vec<Vec<f64>> },
}

impl PerfPolicy {
    /// Raw (unsaturated) performance input.
    pub fn raw(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::ConstantInput { u } => u.clone(),
            Self::SaturatedLqr { gain, x_ss, u_ss } => u_ss - gain * (x - x_ss),
            Self::Fixed { samples } => DVector::from_column_slice(&samples[i.min(samples.len().saturating_sub(1))]),
        }
    }

    pub fn check(&self, sys: &LtiSystem) -> Result<()> {
        let (n, m) = (sys.n(), sys.m_u());
        let ok = match self {
            Self::ConstantInput { u } => u.len() == m,
            Self::SaturatedLqr { gain, x_ss, u_ss } => gain.shape() == (m, n) && x_ss.len() == n && u_ss.len() == m,
            Self::Fixed { samples } => !samples.is_empty() && samples.iter().all(|s| s.len() == m),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::DimensionMismatch("performance policy does not match the system".into()))
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub disturbances: Vec<Vec<f64>>,
    pub modes: Vec<Mode>,
    pub sigmas: Vec<f64>,
    pub ks: Vec<usize>,
    pub gammas: Vec<usize>,
    pub betas: Vec<f64>,
    /// Quadratic form of the state in the active tube slice.
    pub phis: Vec<f64>,
    /// Quadratic form of the state in the constraint set `K`.
    pub k_levels: Vec<f64>,
    pub safety_ok: Vec<bool>,
    pub flags: Vec<DecisionFlags>,
    pub final_time: f64,
    pub final_state: Vec<f64>,
    pub final_k_level: f64,
    /// The initial state was outside every tube start.
    pub init_best_effort: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Every logged state and the final state are in `K` at tolerance `tol`.
    pub fn all_safe(&self, tol: f64) -> bool {
        self.k_levels.iter().all(|&l| l <= 1.0 + tol) && self.final_k_level <= 1.0 + tol
    }

    /// First logged time with the state outside `K` at tolerance `tol`.
    pub fn first_violation(&self, tol: f64) -> Option<f64> {
        self.k_levels
            .iter()
            .position(|&l| l > 1.0 + tol)
            .map(|i| self.times[i])
            .or_else(|| (self.final_k_level > 1.0 + tol).then_some(self.final_time))
    }

    /// Steps before the finite horizon ran out.
    pub fn guaranteed_steps(&self) -> usize {
        self.flags.iter().position(|f| f.horizon_exhausted).unwrap_or(self.len())
    }

    pub fn mode_switches(&self) -> usize {
        self.modes.windows(2).filter(|w| w[0] != w[1]).count()
    }

    /// Fraction of steps at or after `t0` spent in `Safe`.
    pub fn safe_duty(&self, t0: f64) -> f64 {
        let (mut total, mut safe) = (0usize, 0usize);
        for (t, m) in self.times.iter().zip(&self.modes) {
            if *t >= t0 {
                total += 1;
                if *m == Mode::Safe {
                    safe += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            safe as f64 / total as f64
        }
    }

    fn push(&mut self, t: f64, x: &DVector<f64>, d: &ControlDecision, v: &DVector<f64>, sigma: f64, k: usize, level: f64) {
        self.times.push(t);
        self.states.push(x.iter().copied().collect());
        self.controls.push(d.u.iter().copied().collect());
        self.disturbances.push(v.iter().copied().collect());
        self.modes.push(d.mode);
        self.sigmas.push(sigma);
        self.ks.push(k);
        self.gammas.push(d.gamma);
        self.betas.push(d.beta);
        self.phis.push(d.phi);
        self.k_levels.push(level);
        self.safety_ok.push(level <= 1.0 + TOL.membership);
        self.flags.push(d.flags);
    }

    /// `t,sigma,k,mode,gamma,beta,x1..xn,u1..um,v1..mv,safety_ok`.
    pub fn to_csv(&self) -> String {
        let n = self.final_state.len();
        let m = self.controls.first().map_or(0, Vec::len);
        let mv = self.disturbances.first().map_or(0, Vec::len);
        let mut out = String::from("t,sigma,k,mode,gamma,beta");
        for (p, c) in [("x", n), ("u", m), ("v", mv)] {
            for i in 1..=c {
                let _ = write!(out, ",{p}{i}");
            }
        }
        out.push_str(",safety_ok\n");
        for i in 0..self.len() {
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                self.times[i],
                self.sigmas[i],
                self.ks[i],
                self.modes[i].as_str(),
                self.gammas[i],
                self.betas[i]
            );
            for v in self.states[i].iter().chain(&self.controls[i]).chain(&self.disturbances[i]) {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", self.safety_ok[i]);
        }
        out
    }

    /// Per-step controller log: `t,sigma,k,mode,gamma,beta,phi,u1..um,<flags>`.
    pub fn decisions_csv(&self) -> String {
        let m = self.controls.first().map_or(0, Vec::len);
        let mut out = String::from("t,sigma,k,mode,gamma,beta,phi");
        for i in 1..=m {
            let _ = write!(out, ",u{i}");
        }
        out.push_str(",horizon_exhausted,best_effort,sigma_reset,switched\n");
        for i in 0..self.len() {
            let f = self.flags[i];
            let _ = write!(
                out,
                "{},{},{},{},{},{},{}",
                self.times[i],
                self.sigmas[i],
                self.ks[i],
                self.modes[i].as_str(),
                self.gammas[i],
                self.betas[i],
                self.phis[i]
            );
            for v in &self.controls[i] {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{},{},{},{}", f.horizon_exhausted, f.best_effort, f.sigma_reset, f.switched);
        }
        out
    }
}

/// Simulation aborted by the controller; carries the trajectory up to the failure.
#[derive(Debug)]
pub struct SimFailure {
    pub error: Error,
    pub partial: Trajectory,
}

impl std::fmt::Display for SimFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} (after {} steps)", self.error, self.partial.len())
    }
}

impl std::error::Error for SimFailure {}

fn rk4_zoh(sys: &LtiSystem, x: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>, dt: f64) -> DVector<f64> {
    let forcing = sys.b() * u + sys.g() * v;
    let f = |y: &DVector<f64>| sys.a() * y + &forcing;
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (0.5 * dt)));
    let k3 = f(&(x + &k2 * (0.5 * dt)));
    let k4 = f(&(x + &k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

fn step_count(duration: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(duration >= 0.0) || !duration.is_finite() {
        return Err(Error::InvalidArgument(format!("need dt > 0 and duration >= 0, got {dt}, {duration}")));
    }
    Ok((duration / dt - 1e-9).ceil().max(0.0) as usize)
}

struct Level {
    center: DVector<f64>,
    inv: DMatrix<f64>,
}

impl Level {
    fn new(k: &Ellipsoid) -> Self {
        let inv = Cholesky::new(k.shape().clone()).map(|c| c.inverse()).unwrap_or_else(|| {
            linalg::SymEig::new(k.shape()).map(|v| 1.0 / v.max(f64::MIN_POSITIVE))
        });
        Self { center: k.center().clone(), inv }
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.center;
        d.dot(&(&self.inv * &d))
    }

    fn direction(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.inv * (x - &self.center)
    }
}

/// Runs the hybrid controller in closed loop with zero-order hold on `u`
/// and `v`, logging every step.
pub fn simulate_closed_loop(
    approx: &KernelApprox,
    config: &ControllerConfig,
    perf: &PerfPolicy,
    dist: &DisturbancePolicy,
    x0: &DVector<f64>,
    duration: f64,
    dt: f64,
) -> std::result::Result<Trajectory, Box<SimFailure>> {
    let fail = |error: Error, partial: Trajectory| Box::new(SimFailure { error, partial });
    let sys = &approx.system;
    let bounds = &approx.bounds;
    let setup = || -> Result<(Controller<'_>, usize, DisturbanceSource<'_>)> {
        perf.check(sys)?;
        let steps = step_count(duration, dt)?;
        Ok((Controller::new(approx, *config)?, steps, DisturbanceSource::new(dist, &bounds.v)?))
    };
    let (controller, steps, mut source) = setup().map_err(|e| fail(e, Trajectory::default()))?;
    let level = Level::new(&approx.constraint);
    let mut traj = Trajectory::default();
    let (mut state, init_flags) = controller.init(x0).map_err(|e| fail(e, Trajectory::default()))?;
    traj.init_best_effort = init_flags.best_effort;

    let mut x = x0.clone();
    for i in 0..steps {
        let t = i as f64 * dt;
        let u_perf = saturate(&perf.raw(i, &x), &bounds.u);
        let (next, decision) = match controller.step(&state, &x, dt, &u_perf) {
            Ok(r) => r,
            Err(e) => {
                traj.final_time = t;
                traj.final_k_level = level.eval(&x);
                traj.final_state = x.iter().copied().collect();
                return Err(fail(e, traj));
            }
        };
        let l = if decision.direction.norm() > 0.0 { decision.direction.clone() } else { level.direction(&x) };
        let v = source.sample(i, &l, sys.g(), &bounds.v);
        traj.push(t, &x, &decision, &v, state.sigma, state.k, level.eval(&x));
        x = rk4_zoh(sys, &x, &decision.u, &v, dt);
        state = next;
    }
    traj.final_time = steps as f64 * dt;
    traj.final_k_level = level.eval(&x);
    traj.final_state = x.iter().copied().collect();
    Ok(traj)
}

/// Performance policy alone (no supervision). The worst-case disturbance
/// pushes along the outward normal of the constraint level set.
pub fn simulate_unsupervised(
    sys: &LtiSystem,
    constraint: &Ellipsoid,
    bounds: &InputBounds,
    perf: &PerfPolicy,
    dist: &DisturbancePolicy,
    x0: &DVector<f64>,
    duration: f64,
    dt: f64,
) -> Result<Trajectory> {
    perf.check(sys)?;
    bounds.check(sys)?;
    let steps = step_count(duration, dt)?;
    let mut source = DisturbanceSource::new(dist, &bounds.v)?;
    let level = Level::new(constraint);
    let mut traj = Trajectory::default();
    let mut x = x0.clone();
    for i in 0..steps {
        let t = i as f64 * dt;
        let u = saturate(&perf.raw(i, &x), &bounds.u);
        let l = level.direction(&x);
        let v = source.sample(i, &l, sys.g(), &bounds.v);
        let decision = ControlDecision {
            u: u.clone(),
            mode: Mode::Perf,
            gamma: 0,
            beta: 0.0,
            sigma_rate: 1.0,
            phi: f64::NAN,
            direction: l,
            flags: DecisionFlags::default(),
        };
        traj.push(t, &x, &decision, &v, t, 0, level.eval(&x));
        x = rk4_zoh(sys, &x, &u, &v, dt);
    }
    traj.final_time = steps as f64 * dt;
    traj.final_k_level = level.eval(&x);
    traj.final_state = x.iter().copied().collect();
    Ok(traj)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRun {
    pub x0_index: usize,
    pub policy: String,
    pub contained: bool,
    /// Smallest distance from the state to the complement of `K` (negative outside).
    pub min_margin: f64,
    pub mode_switches: usize,
    pub steps: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub runs: Vec<OracleRun>,
    pub containment_rate: f64,
    pub min_margin: f64,
}

/// Simulates every `(x0, policy)` pair in parallel and summarises containment
/// in `K`. Runs are independent and seeded, so the report does not depend on
/// scheduling.
pub fn monte_carlo_safety_oracle(
    approx: &KernelApprox,
    config: &ControllerConfig,
    perf: &PerfPolicy,
    x0s: &[DVector<f64>],
    policies: &[DisturbancePolicy],
    horizon: f64,
    dt: f64,
) -> OracleReport {
    let jobs: Vec<(usize, &DisturbancePolicy)> =
        (0..x0s.len()).flat_map(|i| policies.iter().map(move |p| (i, p))).collect();
    let k = &approx.constraint;
    let runs: Vec<OracleRun> = jobs
        .par_iter()
        .map(|&(i, policy)| {
            let (traj, error) = match simulate_closed_loop(approx, config, perf, policy, &x0s[i], horizon, dt) {
                Ok(t) => (t, None),
                Err(f) => (f.partial, Some(f.error.to_string())),
            };
            let mut margin = f64::INFINITY;
            let mut states: Vec<&Vec<f64>> = traj.states.iter().collect();
            if !traj.final_state.is_empty() {
                states.push(&traj.final_state);
            }
            if states.is_empty() {
                margin = -ellipsoid::point_ellipsoid_distance(&x0s[i], k);
            }
            for s in states {
                margin = margin.min(-ellipsoid::point_ellipsoid_distance(&DVector::from_column_slice(s), k));
            }
            let contained = error.is_none() && traj.all_safe(TOL.membership);
            OracleRun {
                x0_index: i,
                policy: policy.name().to_string(),
                contained,
                min_margin: margin,
                mode_switches: traj.mode_switches(),
                steps: traj.len(),
                error,
            }
        })
        .collect();
    let contained = runs.iter().filter(|r| r.contained).count();
    let containment_rate = if runs.is_empty() { 1.0 } else { contained as f64 / runs.len() as f64 };
    let min_margin = runs.iter().map(|r| r.min_margin).fold(f64::INFINITY, f64::min);
    OracleReport { runs, containment_rate, min_margin }
}

/// Uniform sample of `count` points from an ellipsoid, from a seeded generator.
pub fn sample_states(e: &Ellipsoid, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| if rng.random::<f64>() < 0.3 { e.sample_boundary(&mut rng) } else { e.sample_interior(&mut rng) })
        .collect()
}
