//! Offline analysis, online simulation and the scaling benchmark, with their
//! on-disk artifacts. Every file written here carries the tool version and
//! the analysis hash of the config it came from.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::controller::ControllerConfig;
use crate::ellipsoid::Ellipsoid;
use crate::error::{Error, Result};
use crate::kernel::{self, InvarianceRecord, KernelApprox, KernelOptions};
use crate::linalg;
use crate::numeric::TOL;
use crate::reach::{self, DirectionSet, InputBounds, LtiSystem, ReachSegment};
use crate::sim::{self, PerfPolicy, Trajectory};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const KERNEL_FILE: &str = "kernel.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.json";
pub const BENCH_FILE: &str = "bench.json";

pub fn tube_file_name(direction_id: usize, k: usize) -> String {
    format!("tube_dir{direction_id}_k{k}.json")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub dynamics_bound_s: f64,
    pub shrink_s: f64,
    pub recursion_s: f64,
    pub total_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub version: String,
    pub config_hash: String,
    pub name: String,
    pub m_bound: f64,
    pub partition_norm: f64,
    pub n_intervals: usize,
    pub n_directions: usize,
    pub direction_seed: Option<u64>,
    pub surviving: Vec<usize>,
    pub dropped: Vec<(usize, usize)>,
    pub invariance: Vec<InvarianceRecord>,
    pub total_error_gap: f64,
    pub kernel_volumes: Vec<(usize, f64)>,
    pub empty: bool,
    pub timing: PhaseTiming,
}

/// kernel.json: the approximation with its tube segments moved to separate files.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct KernelArtifact {
    version: String,
    config_hash: String,
    config: RunConfig,
    /// `(direction_id, k)` for every tube file written alongside.
    tubes: Vec<(usize, usize)>,
    kernel: KernelApprox,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TubeArtifact {
    version: String,
    config_hash: String,
    segment: ReachSegment,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Runs the offline phase in memory.
pub fn analyze(config: &RunConfig) -> Result<(KernelApprox, AnalysisSummary)> {
    config.validate()?;
    let sys = config.system()?;
    let bounds = config.bounds()?;
    let k = config.constraint_set()?;
    let p = config.partition()?;
    let dirs = config.direction_set()?;
    let total = Instant::now();

    let t = Instant::now();
    let m = reach::dynamics_bound(&sys, &k, &bounds);
    let dynamics_bound_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    kernel::shrink_constraint(&k, m, &p)?;
    let shrink_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let approx = kernel::discriminating_kernel_ia(&sys, &k, &bounds, &p, &dirs, config.kernel_options())?;
    let recursion_s = t.elapsed().as_secs_f64();

    let summary = AnalysisSummary {
        version: VERSION.into(),
        config_hash: config.config_hash(),
        name: config.name.clone(),
        m_bound: approx.m_bound,
        partition_norm: p.norm(),
        n_intervals: p.len(),
        n_directions: dirs.len(),
        direction_seed: dirs.seed(),
        surviving: approx.surviving(),
        dropped: approx.chains.iter().filter_map(|c| c.dropped_at.map(|k| (c.direction_id, k))).collect(),
        invariance: approx.invariance.clone(),
        total_error_gap: approx.total_error_gap(),
        kernel_volumes: approx.kernel_pieces().iter().map(|(id, e)| (*id, e.volume())).collect(),
        empty: approx.is_empty(),
        timing: PhaseTiming { dynamics_bound_s, shrink_s, recursion_s, total_s: total.elapsed().as_secs_f64() },
    };
    Ok((approx, summary))
}

/// Offline phase plus artifacts. An empty kernel still writes its artifacts
/// and then fails with [`Error::EmptyKernel`].
pub fn cmd_analyze(config: &RunConfig, out_dir: &Path) -> Result<AnalysisSummary> {
    let (approx, summary) = analyze(config)?;
    write_analysis(config, &approx, &summary, out_dir)?;
    if summary.empty {
        return Err(Error::EmptyKernel);
    }
    Ok(summary)
}

pub fn write_analysis(config: &RunConfig, approx: &KernelApprox, summary: &AnalysisSummary, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let hash = config.config_hash();
    let mut stripped = approx.clone();
    let mut tubes = Vec::new();
    for chain in &mut stripped.chains {
        for (k, slot) in chain.segments.iter_mut().enumerate() {
            if let Some(segment) = slot.take() {
                let artifact = TubeArtifact { version: VERSION.into(), config_hash: hash.clone(), segment };
                write_json(&out_dir.join(tube_file_name(chain.direction_id, k)), &artifact)?;
                tubes.push((chain.direction_id, k));
            }
        }
    }
    let artifact = KernelArtifact { version: VERSION.into(), config_hash: hash, config: config.clone(), tubes, kernel: stripped };
    write_json(&out_dir.join(KERNEL_FILE), &artifact)?;
    write_json(&out_dir.join(SUMMARY_FILE), summary)
}

/// Reassembles a [`KernelApprox`] from an analysis directory, rejecting
/// artifacts produced from a different analysis config.
pub fn load_analysis(config: &RunConfig, dir: &Path) -> Result<KernelApprox> {
    let hash = config.config_hash();
    let artifact: KernelArtifact = read_json(&dir.join(KERNEL_FILE))?;
    if artifact.config_hash != hash {
        return Err(Error::Stale(format!(
            "{} was built from config {}, current config is {}",
            dir.join(KERNEL_FILE).display(),
            artifact.config_hash,
            hash
        )));
    }
    let mut approx = artifact.kernel;
    for (id, k) in artifact.tubes {
        let path = dir.join(tube_file_name(id, k));
        let tube: TubeArtifact = read_json(&path)?;
        if tube.config_hash != hash {
            return Err(Error::Stale(format!("{} does not match config {hash}", path.display())));
        }
        let chain = approx
            .chains
            .get_mut(id)
            .filter(|c| k < c.segments.len())
            .ok_or_else(|| Error::Stale(format!("{} refers to a missing chain slot", path.display())))?;
        chain.segments[k] = Some(tube.segment);
    }
    Ok(approx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub x0_index: usize,
    pub disturbance_index: usize,
    pub policy: String,
    pub supervised: bool,
    pub steps: usize,
    pub completed: bool,
    pub error: Option<String>,
    pub all_safe: bool,
    pub first_violation: Option<f64>,
    /// Steps covered by the controller's guarantee (before the horizon ran out).
    pub guaranteed_steps: usize,
    pub guaranteed_safe: bool,
    pub init_best_effort: bool,
    pub mode_switches: usize,
    pub safe_duty: f64,
    pub trajectory_file: String,
}

impl RunReport {
    /// Supervised run that failed while the guarantee applied.
    pub fn guarantee_violated(&self) -> bool {
        self.supervised && (self.error.is_some() || (!self.init_best_effort && !self.guaranteed_safe))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub version: String,
    pub config_hash: String,
    pub controller: ControllerConfig,
    pub runs: Vec<RunReport>,
}

impl SimulationReport {
    pub fn guarantee_violated(&self) -> bool {
        self.runs.iter().any(RunReport::guarantee_violated)
    }
}

fn summarize(traj: &Trajectory, error: Option<String>) -> (bool, Option<f64>, usize, bool) {
    let g = traj.guaranteed_steps();
    let guaranteed_safe = traj.k_levels[..g.min(traj.k_levels.len())].iter().all(|&l| l <= 1.0 + TOL.membership)
        && (g < traj.len() || error.is_some() || traj.final_k_level <= 1.0 + TOL.membership);
    (traj.all_safe(TOL.membership), traj.first_violation(TOL.membership), g, guaranteed_safe)
}

/// Online phase for every `(x0, disturbance)` pair of the config's
/// simulation section. Reads the kernel from `analysis_dir` when the safety
/// controller is enabled.
pub fn cmd_simulate(config: &RunConfig, analysis_dir: &Path, out_dir: &Path) -> Result<SimulationReport> {
    config.validate()?;
    let sim_cfg = config.simulation.as_ref().ok_or_else(|| Error::Config("config has no simulation section".into()))?;
    let approx = if sim_cfg.safety_controller { Some(load_analysis(config, analysis_dir)?) } else { None };
    let sys = match &approx {
        Some(a) => a.system.clone(),
        None => config.system()?,
    };
    let perf = config.perf_policy(&sys)?.expect("simulation section present");
    simulate_all(config, approx.as_ref(), &sys, &perf, out_dir)
}

fn simulate_all(
    config: &RunConfig,
    approx: Option<&KernelApprox>,
    sys: &LtiSystem,
    perf: &PerfPolicy,
    out_dir: &Path,
) -> Result<SimulationReport> {
    let sim_cfg = config.simulation.as_ref().expect("checked by caller");
    fs::create_dir_all(out_dir)?;
    let constraint = config.constraint_set()?;
    let bounds = config.bounds()?;
    let hash = config.config_hash();
    let mut runs = Vec::new();
    for (i, x0) in sim_cfg.initial_states.iter().enumerate() {
        let x0 = DVector::from_column_slice(x0);
        for (j, dist) in sim_cfg.disturbances.iter().enumerate() {
            let (traj, error) = match approx {
                Some(a) => match sim::simulate_closed_loop(a, &config.controller, perf, dist, &x0, sim_cfg.duration, sim_cfg.dt) {
                    Ok(t) => (t, None),
                    Err(f) => (f.partial, Some(f.error.to_string())),
                },
                None => (sim::simulate_unsupervised(sys, &constraint, &bounds, perf, dist, &x0, sim_cfg.duration, sim_cfg.dt)?, None),
            };
            let stem = format!("x{i}_d{j}_{}", dist.name());
            let trajectory_file = format!("trajectory_{stem}.csv");
            let header = format!("# version={VERSION} config_hash={hash}\n");
            fs::write(out_dir.join(&trajectory_file), header.clone() + &traj.to_csv())?;
            fs::write(out_dir.join(format!("decisions_{stem}.csv")), header + &traj.decisions_csv())?;
            let (all_safe, first_violation, guaranteed_steps, guaranteed_safe) = summarize(&traj, error.clone());
            if let Some(t) = first_violation {
                log::warn!("run {stem}: state left K at t = {t}");
            }
            runs.push(RunReport {
                x0_index: i,
                disturbance_index: j,
                policy: dist.name().into(),
                supervised: approx.is_some(),
                steps: traj.len(),
                completed: error.is_none(),
                error,
                all_safe,
                first_violation,
                guaranteed_steps,
                guaranteed_safe,
                init_best_effort: traj.init_best_effort,
                mode_switches: traj.mode_switches(),
                safe_duty: traj.safe_duty(0.0),
                trajectory_file,
            });
        }
    }
    let report = SimulationReport { version: VERSION.into(), config_hash: hash, controller: config.controller, runs };
    write_json(&out_dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub dim: usize,
    /// Mean offline-phase wall time over the repetitions, seconds.
    pub mean_s: f64,
    pub samples_s: Vec<f64>,
    pub surviving: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub version: String,
    pub seed: u64,
    pub repetitions: usize,
    pub partition: usize,
    pub points: Vec<BenchPoint>,
    /// Least-squares slope of `log(time)` against `log(dim)`.
    pub exponent: f64,
}

/// Random stable test system of dimension `n`: Gaussian `A` shifted so its
/// spectral abscissa is -0.5, one input and one disturbance channel.
pub fn random_stable_system(n: usize, seed: u64) -> (LtiSystem, Ellipsoid, InputBounds) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |r: usize, c: usize, scale: f64| {
        DMatrix::from_fn(r, c, |_, _| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
    };
    let raw = gauss(n, n, 1.0 / (n as f64).sqrt());
    let shift = linalg::spectral_abscissa(&raw) + 0.5;
    let a = raw - DMatrix::identity(n, n) * shift;
    let mut b = gauss(n, 1, 1.0);
    b /= b.norm();
    let mut g = gauss(n, 1, 1.0);
    g /= g.norm();
    let sys = LtiSystem::new(a, b, g).expect("consistent shapes");
    let bounds = InputBounds::new(Ellipsoid::unit_ball(1), Ellipsoid::ball(DVector::zeros(1), 0.01).expect("positive radius"))
        .expect("valid bounds");
    (sys, Ellipsoid::unit_ball(n), bounds)
}

pub fn bench_scaling(dims: &[usize], repetitions: usize, seed: u64, partition: usize) -> Result<BenchReport> {
    if repetitions == 0 {
        return Err(Error::Config("repetitions must be positive".into()));
    }
    if dims.is_empty() || dims.iter().any(|&d| d < 2) {
        return Err(Error::Config("bench dimensions must all be >= 2".into()));
    }
    if partition == 0 {
        return Err(Error::Config("partition must be positive".into()));
    }
    let p = kernel::make_uniform_partition(0.5, partition)?;
    let options = KernelOptions { stop_on_invariance: false, steps_per_interval: 10, parallel: false };
    let mut points = Vec::new();
    for (i, &n) in dims.iter().enumerate() {
        let mut samples_s = Vec::with_capacity(repetitions);
        let mut surviving = 0;
        for rep in 0..repetitions {
            let sys_seed = seed.wrapping_add((i * 1000 + rep) as u64);
            let (sys, k, bounds) = random_stable_system(n, sys_seed);
            let dirs = DirectionSet::random(n, 1, sys_seed, false)?;
            let t = Instant::now();
            let approx = kernel::discriminating_kernel_ia(&sys, &k, &bounds, &p, &dirs, options)?;
            samples_s.push(t.elapsed().as_secs_f64());
            surviving += approx.surviving().len();
        }
        let mean_s = samples_s.iter().sum::<f64>() / repetitions as f64;
        points.push(BenchPoint { dim: n, mean_s, samples_s, surviving });
    }
    let exponent = loglog_slope(&points.iter().map(|p| (p.dim as f64, p.mean_s)).collect::<Vec<_>>());
    Ok(BenchReport { version: VERSION.into(), seed, repetitions, partition, points, exponent })
}

pub fn cmd_bench_scaling(dims: &[usize], repetitions: usize, seed: u64, partition: usize, out_dir: &Path) -> Result<BenchReport> {
    let report = bench_scaling(dims, repetitions, seed, partition)?;
    fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join(BENCH_FILE), &report)?;
    Ok(report)
}

fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.max(1e-12).ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx > 0.0 {
        sxy / sxx
    } else {
        f64::NAN
    }
}

/// Default output directory for a config: `out/<name>`.
pub fn default_output_dir(config: &RunConfig) -> PathBuf {
    let name = if config.name.is_empty() { "run" } else { &config.name };
    PathBuf::from("out").join(name)
}
