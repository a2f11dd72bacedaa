//! Run configuration: JSON schema, validation, presets and the analysis hash.
//!
//! Matrices are row-major nested arrays. Sets are written as one of
//! `{"ellipsoid": {"center", "shape"}}`, `{"box": {"lower", "upper"}}` or
//! `{"point": [..]}`.

use std::f64::consts::FRAC_1_SQRT_2;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controller::{ControllerConfig, Variant};
use crate::ellipsoid::{mvie_box, Ellipsoid, HyperRectangle};
use crate::error::{Error, Result};
use crate::kernel::{make_uniform_partition, KernelOptions, Partition};
use crate::linalg::serde_matrix::{from_rows, to_rows};
use crate::quadrotor::{self, TiltCoupling};
use crate::reach::{DirectionSet, InputBounds, LtiSystem};
use crate::sim::{self, DisturbancePolicy, PerfPolicy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SetSpec {
    Ellipsoid { center: Vec<f64>, shape: Vec<Vec<f64>> },
    /// Replaced by its maximum-volume inscribed ellipsoid.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Point(Vec<f64>),
}

impl SetSpec {
    pub fn dim(&self) -> usize {
        match self {
            Self::Ellipsoid { center, .. } => center.len(),
            Self::Box { lower, .. } => lower.len(),
            Self::Point(p) => p.len(),
        }
    }

    pub fn to_ellipsoid(&self) -> Result<Ellipsoid> {
        match self {
            Self::Ellipsoid { center, shape } => {
                let shape = from_rows(shape).map_err(Error::Config)?;
                let center = DVector::from_column_slice(center);
                Ellipsoid::new(center.clone(), shape.clone()).or_else(|_| Ellipsoid::new_degenerate(center, shape))
            }
            Self::Box { lower, upper } => Ok(mvie_box(&HyperRectangle::new(lower.clone(), upper.clone())?)),
            Self::Point(p) => Ok(Ellipsoid::point(DVector::from_column_slice(p))),
        }
    }

    pub fn from_ellipsoid(e: &Ellipsoid) -> Self {
        Self::Ellipsoid { center: e.center().iter().copied().collect(), shape: to_rows(e.shape()) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DirectionSpec {
    Random {
        count: usize,
        seed: u64,
        #[serde(default)]
        include_axes: bool,
    },
    Explicit(Vec<Vec<f64>>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    #[serde(default)]
    pub stop_on_invariance: bool,
    #[serde(default = "default_steps")]
    pub steps_per_interval: usize,
}

fn default_steps() -> usize {
    10
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self { stop_on_invariance: false, steps_per_interval: default_steps() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PerfSpec {
    Constant(Vec<f64>),
    /// Infinite-horizon LQR on the model, steering towards `x_ss`.
    Lqr {
        q: Vec<Vec<f64>>,
        r: Vec<Vec<f64>>,
        x_ss: Vec<f64>,
        #[serde(default)]
        u_ss: Option<Vec<f64>>,
    },
    Gain {
        k: Vec<Vec<f64>>,
        x_ss: Vec<f64>,
        #[serde(default)]
        u_ss: Option<Vec<f64>>,
    },
    Fixed(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub initial_states: Vec<Vec<f64>>,
    pub duration: f64,
    pub dt: f64,
    pub perf: PerfSpec,
    pub disturbances: Vec<DisturbancePolicy>,
    /// Run the hybrid controller; `false` applies the saturated performance input alone.
    #[serde(default = "default_true")]
    pub safety_controller: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: String,
    pub system: SystemSpec,
    pub constraint: SetSpec,
    pub input: SetSpec,
    pub disturbance: SetSpec,
    pub horizon: f64,
    pub partition: usize,
    pub directions: DirectionSpec,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub simulation: Option<SimulationSpec>,
}

/// The part of a config a kernel depends on.
#[derive(Serialize)]
struct AnalysisKey<'a> {
    system: &'a SystemSpec,
    constraint: &'a SetSpec,
    input: &'a SetSpec,
    disturbance: &'a SetSpec,
    horizon: f64,
    partition: usize,
    directions: &'a DirectionSpec,
    analysis: &'a AnalysisSpec,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    from_rows(rows).map_err(|e| config_err(format!("{what}: {e}")))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 over the analysis-relevant sections.
    pub fn config_hash(&self) -> String {
        let key = AnalysisKey {
            system: &self.system,
            constraint: &self.constraint,
            input: &self.input,
            disturbance: &self.disturbance,
            horizon: self.horizon,
            partition: self.partition,
            directions: &self.directions,
            analysis: &self.analysis,
        };
        let bytes = serde_json::to_vec(&key).expect("analysis key serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Checks shapes and ranges before anything is computed.
    pub fn validate(&self) -> Result<()> {
        let a = matrix(&self.system.a, "system.a")?;
        let b = matrix(&self.system.b, "system.b")?;
        let g = matrix(&self.system.g, "system.g")?;
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(config_err("system.a must be square and non-empty"));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(config_err(format!("system.b must have {n} rows and at least one column")));
        }
        if g.nrows() != n || g.ncols() == 0 {
            return Err(config_err(format!("system.g must have {n} rows and at least one column")));
        }
        if a.iter().chain(b.iter()).chain(g.iter()).any(|v| !v.is_finite()) {
            return Err(config_err("system matrices must be finite"));
        }
        for (set, dim, what) in
            [(&self.constraint, n, "constraint"), (&self.input, b.ncols(), "input"), (&self.disturbance, g.ncols(), "disturbance")]
        {
            if set.dim() != dim {
                return Err(config_err(format!("{what} has dimension {}, expected {dim}", set.dim())));
            }
            if let SetSpec::Ellipsoid { shape, .. } = set {
                let s = matrix(shape, what)?;
                if s.shape() != (dim, dim) {
                    return Err(config_err(format!("{what} shape must be {dim}x{dim}")));
                }
            }
            set.to_ellipsoid().map_err(|e| config_err(format!("{what}: {e}")))?;
        }
        if self.constraint.to_ellipsoid()?.is_degenerate() {
            return Err(config_err("constraint set must be full-dimensional"));
        }
        if self.input.to_ellipsoid()?.is_degenerate() {
            return Err(config_err("input set must be full-dimensional"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(config_err(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.partition == 0 {
            return Err(config_err("partition must have at least one sub-interval"));
        }
        if self.analysis.steps_per_interval == 0 {
            return Err(config_err("analysis.steps_per_interval must be positive"));
        }
        match &self.directions {
            DirectionSpec::Random { count, .. } if *count == 0 => return Err(config_err("directions.count must be positive")),
            DirectionSpec::Explicit(v) if v.is_empty() => return Err(config_err("no explicit directions given")),
            DirectionSpec::Explicit(v) if v.iter().any(|d| d.len() != n) => {
                return Err(config_err(format!("explicit directions must have dimension {n}")))
            }
            _ => {}
        }
        self.controller.validate()?;
        if let Some(sim) = &self.simulation {
            self.validate_simulation(sim, n, b.ncols(), g.ncols())?;
        }
        Ok(())
    }

    fn validate_simulation(&self, sim: &SimulationSpec, n: usize, m: usize, q: usize) -> Result<()> {
        if sim.initial_states.is_empty() || sim.initial_states.iter().any(|x| x.len() != n) {
            return Err(config_err(format!("simulation.initial_states must be non-empty vectors of length {n}")));
        }
        if !(sim.dt > 0.0) || !(sim.duration >= 0.0) || !sim.duration.is_finite() {
            return Err(config_err("simulation needs dt > 0 and duration >= 0"));
        }
        if sim.disturbances.is_empty() {
            return Err(config_err("simulation.disturbances must list at least one policy"));
        }
        for d in &sim.disturbances {
            match d {
                DisturbancePolicy::Fixed { samples } if samples.is_empty() || samples.iter().any(|s| s.len() != q) => {
                    return Err(config_err(format!("fixed disturbance samples must have length {q}")))
                }
                DisturbancePolicy::AdversarialSwitching { period, .. } if *period == 0 => {
                    return Err(config_err("adversarial switching period must be positive"))
                }
                _ => {}
            }
        }
        let ok = match &sim.perf {
            PerfSpec::Constant(u) => u.len() == m,
            PerfSpec::Lqr { q: qm, r, x_ss, u_ss } => {
                matrix(qm, "perf.q")?.shape() == (n, n)
                    && matrix(r, "perf.r")?.shape() == (m, m)
                    && x_ss.len() == n
                    && u_ss.as_ref().is_none_or(|u| u.len() == m)
            }
            PerfSpec::Gain { k, x_ss, u_ss } => {
                matrix(k, "perf.k")?.shape() == (m, n) && x_ss.len() == n && u_ss.as_ref().is_none_or(|u| u.len() == m)
            }
            PerfSpec::Fixed(samples) => !samples.is_empty() && samples.iter().all(|s| s.len() == m),
        };
        if ok {
            Ok(())
        } else {
            Err(config_err("simulation.perf does not match the system dimensions"))
        }
    }

    pub fn system(&self) -> Result<LtiSystem> {
        LtiSystem::new(matrix(&self.system.a, "system.a")?, matrix(&self.system.b, "system.b")?, matrix(&self.system.g, "system.g")?)
    }

    pub fn bounds(&self) -> Result<InputBounds> {
        InputBounds::new(self.input.to_ellipsoid()?, self.disturbance.to_ellipsoid()?)
    }

    pub fn constraint_set(&self) -> Result<Ellipsoid> {
        self.constraint.to_ellipsoid()
    }

    pub fn partition(&self) -> Result<Partition> {
        make_uniform_partition(self.horizon, self.partition)
    }

    pub fn direction_set(&self) -> Result<DirectionSet> {
        let n = self.system.a.len();
        match &self.directions {
            DirectionSpec::Random { count, seed, include_axes } => DirectionSet::random(n, *count, *seed, *include_axes),
            DirectionSpec::Explicit(v) => DirectionSet::from_vectors(v.iter().map(|d| DVector::from_column_slice(d)).collect()),
        }
    }

    pub fn kernel_options(&self) -> KernelOptions {
        KernelOptions {
            stop_on_invariance: self.analysis.stop_on_invariance,
            steps_per_interval: self.analysis.steps_per_interval,
            parallel: true,
        }
    }

    pub fn perf_policy(&self, sys: &LtiSystem) -> Result<Option<PerfPolicy>> {
        let Some(sim) = &self.simulation else { return Ok(None) };
        let m = sys.m_u();
        let u_ss = |u: &Option<Vec<f64>>| u.as_ref().map_or_else(|| DVector::zeros(m), |u| DVector::from_column_slice(u));
        let policy = match &sim.perf {
            PerfSpec::Constant(u) => PerfPolicy::ConstantInput { u: DVector::from_column_slice(u) },
            PerfSpec::Lqr { q, r, x_ss, u_ss: us } => PerfPolicy::SaturatedLqr {
                gain: sim::lqr_gain(sys.a(), sys.b(), &matrix(q, "perf.q")?, &matrix(r, "perf.r")?)?,
                x_ss: DVector::from_column_slice(x_ss),
                u_ss: u_ss(us),
            },
            PerfSpec::Gain { k, x_ss, u_ss: us } => PerfPolicy::SaturatedLqr {
                gain: matrix(k, "perf.k")?,
                x_ss: DVector::from_column_slice(x_ss),
                u_ss: u_ss(us),
            },
            PerfSpec::Fixed(samples) => PerfPolicy::Fixed { samples: samples.clone() },
        };
        Ok(Some(policy))
    }

    /// Replaces the direction seed and every disturbance seed.
    pub fn override_seed(&mut self, new_seed: u64) {
        if let DirectionSpec::Random { seed, .. } = &mut self.directions {
            *seed = new_seed;
        }
        if let Some(sim) = &mut self.simulation {
            for d in &mut sim.disturbances {
                match d {
                    DisturbancePolicy::UniformRandom { seed } | DisturbancePolicy::AdversarialSwitching { seed, .. } => {
                        *seed = new_seed
                    }
                    _ => {}
                }
            }
        }
    }

    /// Replaces the direction count; explicit lists become a random draw.
    pub fn override_directions(&mut self, count: usize) {
        self.directions = match &self.directions {
            DirectionSpec::Random { seed, include_axes, .. } => {
                DirectionSpec::Random { count, seed: *seed, include_axes: *include_axes }
            }
            DirectionSpec::Explicit(_) => DirectionSpec::Random { count, seed: 0, include_axes: false },
        };
    }

    /// The planar example: one direction along (1, 1), invariance detection on.
    pub fn planar() -> Self {
        Self {
            name: "planar".into(),
            system: SystemSpec {
                a: vec![vec![0.0, 2.0], vec![-2.0, 0.0]],
                b: vec![vec![1.0], vec![0.5]],
                g: vec![vec![1.0], vec![1.0]],
            },
            constraint: SetSpec::Ellipsoid { center: vec![0.0, 0.0], shape: vec![vec![0.25, 0.0], vec![0.0, 4.0]] },
            input: SetSpec::Box { lower: vec![-1.0], upper: vec![1.0] },
            disturbance: SetSpec::Box { lower: vec![-0.1], upper: vec![0.1] },
            horizon: 1.0,
            partition: 100,
            directions: DirectionSpec::Explicit(vec![vec![FRAC_1_SQRT_2, FRAC_1_SQRT_2]]),
            analysis: AnalysisSpec { stop_on_invariance: true, steps_per_interval: default_steps() },
            controller: ControllerConfig { variant: Variant::InfiniteH, ..ControllerConfig::default() },
            simulation: Some(SimulationSpec {
                initial_states: vec![vec![0.3, -0.7]],
                duration: 25.0,
                dt: 1e-3,
                perf: PerfSpec::Constant(vec![-1.0]),
                disturbances: vec![DisturbancePolicy::UniformRandom { seed: 1 }],
                safety_controller: true,
            }),
        }
    }

    /// The quadrotor study in hover-deviation coordinates.
    pub fn quadrotor(tilt: TiltCoupling) -> Self {
        let m = quadrotor::quadrotor_model_with(tilt);
        let sys = &m.system;
        Self {
            name: "quadrotor".into(),
            system: SystemSpec { a: to_rows(sys.a()), b: to_rows(sys.b()), g: to_rows(sys.g()) },
            constraint: SetSpec::from_ellipsoid(&m.constraint),
            input: SetSpec::from_ellipsoid(&m.bounds.u),
            disturbance: SetSpec::from_ellipsoid(&m.bounds.v),
            horizon: 2.0,
            partition: 200,
            directions: DirectionSpec::Random { count: 15, seed: 7, include_axes: false },
            analysis: AnalysisSpec::default(),
            controller: ControllerConfig { alpha: 0.9, blending: true, fallback: true, ..ControllerConfig::default() },
            simulation: Some(SimulationSpec {
                initial_states: vec![m.x0.iter().copied().collect()],
                duration: 2.0,
                dt: 1e-3,
                perf: PerfSpec::Lqr {
                    q: to_rows(&m.lqr_q),
                    r: to_rows(&m.lqr_r),
                    x_ss: m.x_ss.iter().copied().collect(),
                    u_ss: None,
                },
                disturbances: vec![DisturbancePolicy::UniformRandom { seed: 1 }],
                safety_controller: true,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::planar().validate().unwrap();
        RunConfig::quadrotor(TiltCoupling::Standard).validate().unwrap();
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::quadrotor(TiltCoupling::Standard);
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.config_hash(), cfg.config_hash());
    }

    #[test]
    fn zero_horizon_rejected() {
        let mut cfg = RunConfig::planar();
        cfg.horizon = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut cfg = RunConfig::planar();
        cfg.system.b = vec![vec![1.0, 0.0], vec![0.5, 0.0]];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = RunConfig::planar();
        cfg.constraint = SetSpec::Box { lower: vec![-1.0; 3], upper: vec![1.0; 3] };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&RunConfig::planar().to_json()).unwrap();
        v["horizn"] = serde_json::json!(1.0);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn hash_ignores_controller_and_simulation() {
        let a = RunConfig::planar();
        let mut b = a.clone();
        b.controller.alpha = 0.5;
        b.simulation = None;
        assert_eq!(a.config_hash(), b.config_hash());
        b.partition = 50;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn box_set_becomes_inscribed_ellipsoid() {
        let e = SetSpec::Box { lower: vec![0.0, 0.0], upper: vec![2.0, 4.0] }.to_ellipsoid().unwrap();
        assert_eq!(e.center().as_slice(), &[1.0, 2.0]);
        assert_eq!(e.shape()[(1, 1)], 4.0);
    }

    #[test]
    fn seed_override_reaches_disturbances() {
        let mut cfg = RunConfig::planar();
        cfg.override_seed(99);
        let sim = cfg.simulation.unwrap();
        assert_eq!(sim.disturbances[0], DisturbancePolicy::UniformRandom { seed: 99 });
    }
}
