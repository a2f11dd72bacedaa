//! Hybrid safety controller.
//!
//! Two modes: `Perf` passes the performance input through (optionally blended
//! with the safety law near the tube boundary) and `Safe` applies the optimal
//! safety law of the active tube. A pseudo-time `sigma` selects the tube
//! cross-section; it advances at rate 1 in `Safe` and at a configurable rate
//! in `Perf`.
//!
//! `FiniteH` follows the surviving chains over `[0, tau]`. `InfiniteH` uses
//! only directions with an invariance certificate at some `k*` and loops the
//! pseudo-time over `[t_{k*-1}, t_{k*}]`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ellipsoid::Ellipsoid;
use crate::error::{Error, Result};
use crate::kernel::KernelApprox;
use crate::numeric::TOL;
use crate::reach::{ReachSegment, TubeSlice};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Perf,
    Safe,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Perf => "perf",
            Mode::Safe => "safe",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "finite")]
    FiniteH,
    #[serde(rename = "infinite")]
    InfiniteH,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    /// Blend threshold in `[0, 1)`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Pseudo-time rate in `Perf`: 0 freezes, 1 tracks real time.
    #[serde(default = "default_rate")]
    pub sigma_rate_perf: f64,
    #[serde(default)]
    pub blending: bool,
    /// Pick the nearest tube instead of failing when the state is outside all of them.
    #[serde(default)]
    pub fallback: bool,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    /// How far past a tube boundary (in the quadratic form) the state may sit
    /// before it counts as having left the tube.
    #[serde(default = "default_escape_tol")]
    pub escape_tol: f64,
}

fn default_alpha() -> f64 {
    0.9
}
fn default_rate() -> f64 {
    1.0
}
fn default_variant() -> Variant {
    Variant::FiniteH
}
fn default_escape_tol() -> f64 {
    1e-2
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            alpha: default_alpha(),
            sigma_rate_perf: default_rate(),
            blending: false,
            fallback: false,
            variant: default_variant(),
            escape_tol: default_escape_tol(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must be in [0, 1), got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.sigma_rate_perf) {
            return Err(Error::Config(format!("sigma_rate_perf must be in [0, 1], got {}", self.sigma_rate_perf)));
        }
        if !(self.escape_tol >= 0.0) {
            return Err(Error::Config("escape_tol must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub mode: Mode,
    pub gamma: usize,
    pub sigma: f64,
    pub k: usize,
    pub t: f64,
    pub variant: Variant,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionFlags {
    pub horizon_exhausted: bool,
    pub best_effort: bool,
    pub sigma_reset: bool,
    pub switched: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlDecision {
    pub u: DVector<f64>,
    pub mode: Mode,
    pub gamma: usize,
    pub beta: f64,
    pub sigma_rate: f64,
    /// Quadratic form of the state in the active tube slice.
    pub phi: f64,
    /// `X^-1 (x - x_c)` of the active tube slice.
    pub direction: DVector<f64>,
    pub flags: DecisionFlags,
}

/// `mu - U B' l / sqrt(l' B U B' l)`: the input whose image under `B` is the
/// support vector of `B U` along `-l`.
pub fn safe_law(l: &DVector<f64>, b: &DMatrix<f64>, u: &Ellipsoid) -> Result<DVector<f64>> {
    let btl = b.transpose() * l;
    let ubtl = u.shape() * &btl;
    let denom = btl.dot(&ubtl);
    if !(denom > 0.0) || denom.sqrt() <= 1e-14 * l.norm() {
        return Err(Error::DegenerateDirection("direction is orthogonal to the control authority".into()));
    }
    Ok(u.center() - ubtl / denom.sqrt())
}

pub fn direction_vector(x: &DVector<f64>, slice: &TubeSlice) -> DVector<f64> {
    slice.direction(x)
}

pub fn phi_depth(x: &DVector<f64>, slice: &TubeSlice) -> f64 {
    slice.phi(x)
}

/// Blend weight: 0 below `alpha`, linear up to 1 at the boundary, 1 outside.
pub fn beta_weight(xi: f64, alpha: f64) -> f64 {
    if xi >= 1.0 {
        1.0
    } else if xi >= alpha {
        (xi - alpha) / (1.0 - alpha)
    } else {
        0.0
    }
}

/// Tube a direction is following, with the pseudo-time window it lives in.
#[derive(Clone, Copy, Debug)]
struct Track<'a> {
    id: usize,
    k: usize,
    segment: &'a ReachSegment,
}

impl Track<'_> {
    fn lo(&self) -> f64 {
        self.segment.interval.0
    }
    fn hi(&self) -> f64 {
        self.segment.interval.1
    }
}

pub struct Controller<'a> {
    approx: &'a KernelApprox,
    config: ControllerConfig,
    /// For `InfiniteH`: the certified directions and their `k*`.
    infinite: Vec<(usize, usize)>,
    finite: Vec<usize>,
}

impl<'a> Controller<'a> {
    pub fn new(approx: &'a KernelApprox, config: ControllerConfig) -> Result<Self> {
        config.validate()?;
        let (finite, infinite) = (approx.surviving(), approx.invariant_directions());
        match config.variant {
            Variant::FiniteH if finite.is_empty() => {
                return Err(Error::InvalidArgument("no direction chain reached K_0".into()))
            }
            Variant::InfiniteH if infinite.is_empty() => {
                return Err(Error::InvalidArgument("no direction carries an invariance certificate".into()))
            }
            _ => {}
        }
        Ok(Self { approx, config, infinite, finite })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn approx(&self) -> &KernelApprox {
        self.approx
    }

    /// Tracks usable at `(k, variant)`.
    fn tracks(&self, k: usize) -> Vec<Track<'a>> {
        match self.config.variant {
            Variant::FiniteH => self
                .finite
                .iter()
                .filter_map(|&id| self.approx.segment(id, k).map(|segment| Track { id, k, segment }))
                .collect(),
            Variant::InfiniteH => self
                .infinite
                .iter()
                .filter_map(|&(id, k)| self.approx.segment(id, k).map(|segment| Track { id, k, segment }))
                .collect(),
        }
    }

    fn track(&self, id: usize, k: usize) -> Option<Track<'a>> {
        self.tracks(k).into_iter().find(|t| t.id == id)
    }

    /// Pseudo-time of `to` matching the fractional position of `sigma` in `from`.
    fn map_sigma(from: &Track, to: &Track, sigma: f64) -> f64 {
        if from.id == to.id && from.k == to.k {
            return sigma;
        }
        let frac = ((sigma - from.lo()) / (from.hi() - from.lo())).clamp(0.0, 1.0);
        to.lo() + frac * (to.hi() - to.lo())
    }

    /// Picks the initial direction among tubes whose start contains `x0`
    /// (smallest quadratic form, then smallest id).
    pub fn init(&self, x0: &DVector<f64>) -> Result<(ControllerState, DecisionFlags)> {
        if x0.len() != self.approx.system.n() || x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("initial state has wrong length or is not finite".into()));
        }
        let k1 = match self.config.variant {
            Variant::FiniteH => 1,
            Variant::InfiniteH => 0,
        };
        let tracks = match self.config.variant {
            Variant::FiniteH => self.tracks(k1),
            Variant::InfiniteH => self
                .infinite
                .iter()
                .filter_map(|&(id, k)| self.approx.segment(id, k).map(|segment| Track { id, k, segment }))
                .collect(),
        };
        let scored: Vec<(Track, f64)> = tracks.iter().map(|t| (*t, t.segment.start_slice().phi(x0))).collect();
        let mut flags = DecisionFlags::default();
        let best = scored
            .iter()
            .filter(|(_, phi)| *phi <= 1.0 + TOL.membership)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.id.cmp(&b.0.id)));
        let (track, phi) = match best {
            Some(&(t, phi)) => (t, phi),
            None if self.config.fallback => {
                flags.best_effort = true;
                let (t, _) = tracks
                    .iter()
                    .map(|t| (*t, t.segment.start_slice().distance(x0)))
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.id.cmp(&b.0.id)))
                    .expect("controller has at least one track");
                (t, t.segment.start_slice().phi(x0))
            }
            None => return Err(Error::NotInKernel),
        };
        let mode = if phi < 1.0 - TOL.interior { Mode::Perf } else { Mode::Safe };
        Ok((
            ControllerState { mode, gamma: track.id, sigma: track.lo(), k: track.k, t: 0.0, variant: self.config.variant },
            flags,
        ))
    }

    /// One supervision step: chooses the mode, direction and input for the
    /// state `x` and advances the pseudo-time over `dt`.
    pub fn step(
        &self,
        state: &ControllerState,
        x: &DVector<f64>,
        dt: f64,
        u_perf: &DVector<f64>,
    ) -> Result<(ControllerState, ControlDecision)> {
        let mut flags = DecisionFlags::default();
        let mut sigma = state.sigma;
        let mut k = state.k;
        let tau = self.approx.horizon();

        if self.config.variant == Variant::FiniteH && sigma >= tau {
            flags.horizon_exhausted = true;
            let mut next = *state;
            next.mode = Mode::Perf;
            next.t += dt;
            let n = x.len();
            return Ok((
                next,
                ControlDecision {
                    u: u_perf.clone(),
                    mode: Mode::Perf,
                    gamma: state.gamma,
                    beta: 0.0,
                    sigma_rate: 0.0,
                    phi: f64::NAN,
                    direction: DVector::zeros(n),
                    flags,
                },
            ));
        }

        let current = self
            .track(state.gamma, k)
            .ok_or_else(|| Error::InvalidArgument(format!("direction {} has no tube at k = {k}", state.gamma)))?;

        if self.config.variant == Variant::InfiniteH && sigma >= current.hi() {
            let start_phi = current.segment.start_slice().phi(x);
            if start_phi <= 1.0 + self.config.escape_tol {
                sigma = current.lo();
                flags.sigma_reset = true;
            }
        }

        // Without blending a single held step of u_perf can carry the state well
        // past the boundary, so the Perf guard also checks a one-step Euler prediction.
        let sys = &self.approx.system;
        let x_pred = (!self.config.blending).then(|| {
            let v = self.approx.bounds.v.center();
            x + (sys.a() * x + sys.b() * u_perf + sys.g() * v) * dt
        });
        let mut perf_blocked = Vec::new();
        let tracks = self.tracks(k);
        let evaluated: Vec<(Track, f64, TubeSlice)> = tracks
            .iter()
            .map(|t| {
                let s = Self::map_sigma(&current, t, sigma);
                let slice = t.segment.slice_at(s);
                let phi = slice.phi(x);
                if let Some(xp) = &x_pred {
                    if phi < 1.0 - TOL.interior {
                        let ahead = t.segment.slice_at(s + self.config.sigma_rate_perf * dt).phi(xp);
                        if ahead >= 1.0 - TOL.interior {
                            perf_blocked.push(t.id);
                        }
                    }
                }
                (*t, phi, slice)
            })
            .collect();
        let pick_min = |cands: &mut dyn Iterator<Item = &(Track<'a>, f64, TubeSlice)>| {
            cands.min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.id.cmp(&b.0.id))).map(|(t, _, _)| t.id)
        };
        let cur_idx = evaluated.iter().position(|(t, _, _)| t.id == current.id).expect("current track is usable");
        let cur_phi = evaluated[cur_idx].1;
        let perf_ok = |id: usize, phi: f64| phi < 1.0 - TOL.interior && !perf_blocked.contains(&id);
        let at_top = self.config.variant == Variant::InfiniteH && sigma >= current.hi();

        let (mode, gamma) = if perf_ok(current.id, cur_phi) && !at_top {
            (Mode::Perf, current.id)
        } else if let Some(id) = pick_min(&mut evaluated.iter().filter(|(t, phi, _)| perf_ok(t.id, *phi))).filter(|_| !at_top) {
            (Mode::Perf, id)
        } else if cur_phi <= 1.0 + self.config.escape_tol {
            (Mode::Safe, current.id)
        } else if let Some(id) = pick_min(&mut evaluated.iter().filter(|(_, phi, _)| *phi <= 1.0 + self.config.escape_tol)) {
            (Mode::Safe, id)
        } else if self.config.fallback {
            flags.best_effort = true;
            let id = evaluated
                .iter()
                .map(|(t, _, s)| (t.id, s.distance(x)))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|(id, _)| id)
                .expect("at least one track");
            (Mode::Safe, id)
        } else {
            let distance = evaluated[cur_idx].2.distance(x);
            return Err(Error::SafetyViolationImminent { time: state.t, distance });
        };

        let (track, phi, slice) = evaluated.iter().find(|(t, _, _)| t.id == gamma).expect("chosen track exists");
        if track.id != current.id {
            flags.switched = true;
            sigma = Self::map_sigma(&current, track, sigma);
        }
        let direction = slice.direction(x);
        let bounds = &self.approx.bounds;
        let u_safe = safe_law(&direction, self.approx.system.b(), &bounds.u).unwrap_or_else(|_| bounds.u.center().clone());

        let (u, beta, rate) = match mode {
            Mode::Safe => (u_safe, 1.0, 1.0),
            Mode::Perf if self.config.blending => {
                let beta = beta_weight(*phi, self.config.alpha);
                (u_perf * (1.0 - beta) + &u_safe * beta, beta, self.config.sigma_rate_perf)
            }
            Mode::Perf => (u_perf.clone(), 0.0, self.config.sigma_rate_perf),
        };

        let mut next_sigma = sigma + rate * dt;
        match self.config.variant {
            Variant::FiniteH => {
                let times = self.approx.partition.times();
                let n = self.approx.n_intervals();
                next_sigma = next_sigma.min(tau);
                while k < n && next_sigma >= times[k] {
                    k += 1;
                }
            }
            Variant::InfiniteH => {
                k = track.k;
                next_sigma = next_sigma.min(track.hi());
            }
        }
        let next = ControllerState { mode, gamma, sigma: next_sigma, k, t: state.t + dt, variant: state.variant };
        Ok((next, ControlDecision { u, mode, gamma, beta, sigma_rate: rate, phi: *phi, direction, flags }))
    }
}

/// Single step without holding a [`Controller`].
pub fn automaton_step(
    state: &ControllerState,
    x: &DVector<f64>,
    dt: f64,
    approx: &KernelApprox,
    u_perf: &DVector<f64>,
    config: &ControllerConfig,
) -> Result<(ControllerState, ControlDecision)> {
    Controller::new(approx, *config)?.step(state, x, dt, u_perf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn safe_law_examples() {
        let u = safe_law(&dvector![1.0, 0.0], &DMatrix::identity(2, 2), &Ellipsoid::unit_ball(2)).unwrap();
        assert!((u - dvector![-1.0, 0.0]).norm() < 1e-15);
        let b = dmatrix![1.0; 0.5];
        let ub = Ellipsoid::new(dvector![0.0], dmatrix![1.0]).unwrap();
        let l = dvector![0.3, -0.2];
        assert_eq!(safe_law(&l, &b, &ub).unwrap(), safe_law(&(&l * 2.0), &b, &ub).unwrap());
        assert!((safe_law(&dvector![1.0, 0.0], &b, &ub).unwrap()[0] + 1.0).abs() < 1e-15);
        assert!(safe_law(&dvector![0.5, -1.0], &b, &ub).is_err());
    }

    #[test]
    fn direction_and_phi_examples() {
        let slice = |shape: DMatrix<f64>| TubeSlice {
            center: DVector::zeros(2),
            inv_shape: shape.clone().try_inverse().unwrap(),
            shape,
        };
        let unit = slice(DMatrix::identity(2, 2));
        assert_eq!(direction_vector(&dvector![0.0, 0.0], &unit), dvector![0.0, 0.0]);
        assert_eq!(direction_vector(&dvector![2.0, 0.0], &unit), dvector![2.0, 0.0]);
        let e = slice(DMatrix::from_diagonal(&dvector![4.0, 1.0]));
        assert!((direction_vector(&dvector![2.0, 0.0], &e) - dvector![0.5, 0.0]).norm() < 1e-15);
        assert_eq!(phi_depth(&dvector![0.0, 0.0], &unit), 0.0);
        assert!((phi_depth(&dvector![0.6, 0.8], &unit) - 1.0).abs() < 1e-15);
        let k = slice(DMatrix::from_diagonal(&dvector![0.25, 4.0]));
        assert!((phi_depth(&dvector![0.3, -0.7], &k) - 0.4825).abs() < 1e-12);
    }

    #[test]
    fn beta_examples() {
        assert_eq!(beta_weight(1.0, 0.3), 1.0);
        assert_eq!(beta_weight(0.0, 0.9), 0.0);
        assert!((beta_weight(0.95, 0.9) - 0.5).abs() < 1e-12);
        assert_eq!(beta_weight(2.0, 0.0), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(ControllerConfig::default().validate().is_ok());
        assert!(ControllerConfig { alpha: 1.0, ..Default::default() }.validate().is_err());
        assert!(ControllerConfig { sigma_rate_perf: 1.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn perf_guard_looks_one_step_ahead() {
        use crate::kernel::{discriminating_kernel_ia, make_uniform_partition, KernelOptions};
        use crate::reach::{DirectionSet, InputBounds, LtiSystem};
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        let sys = LtiSystem::new(one(0.0), one(1.0), one(1.0)).unwrap();
        let bounds = InputBounds::new(Ellipsoid::unit_ball(1), Ellipsoid::point(dvector![0.0])).unwrap();
        let k = Ellipsoid::unit_ball(1);
        let p = make_uniform_partition(1.0, 10).unwrap();
        let dirs = DirectionSet::from_vectors(vec![dvector![1.0]]).unwrap();
        let approx = discriminating_kernel_ia(&sys, &k, &bounds, &p, &dirs, KernelOptions::default()).unwrap();
        let edge = approx.segment(0, 1).unwrap().start().shape()[(0, 0)].sqrt();
        let x = dvector![0.95 * edge];
        let push = dvector![1.0];
        let mode = |blending: bool, dt: f64| {
            let c = Controller::new(&approx, ControllerConfig { blending, ..ControllerConfig::default() }).unwrap();
            let (state, _) = c.init(&x).unwrap();
            c.step(&state, &x, dt, &push).unwrap().1.mode
        };
        assert_eq!(mode(false, 0.2), Mode::Safe);
        assert_eq!(mode(false, 1e-3), Mode::Perf);
        assert_eq!(mode(true, 0.2), Mode::Perf);
    }
}
