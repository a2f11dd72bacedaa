//! Piecewise-ellipsoidal under-approximation of the discriminating kernel.
//!
//! Starting from the eroded constraint `K↓`, each terminal direction builds a
//! chain `K_n = K↓, K_{k-1} = fuse(K↓, start of reach tube of K_k)` down to
//! `k = 0`. The union over directions of `K_0` is the kernel estimate and the
//! tubes are what the online controller follows.

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ellipsoid::{self, Ellipsoid};
use crate::error::{Error, Result};
use crate::numeric::TOL;
use crate::reach::{self, DirectionSet, InputBounds, LtiSystem, ReachSegment};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    times: Vec<f64>,
}

impl Partition {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 || times[0] != 0.0 {
            return Err(Error::InvalidArgument("partition needs t0 = 0 and at least one interval".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0]) || !w[1].is_finite()) {
            return Err(Error::InvalidArgument("partition times must be strictly increasing".into()));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of sub-intervals.
    pub fn len(&self) -> usize {
        self.times.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    /// Largest sub-interval length.
    pub fn norm(&self) -> f64 {
        self.times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }

    /// `(t_{k-1}, t_k)` for `k` in `1..=len`.
    pub fn interval(&self, k: usize) -> (f64, f64) {
        (self.times[k - 1], self.times[k])
    }

    /// Index `k` with `sigma` in `[t_{k-1}, t_k)`, clamped to `1..=len`.
    pub fn index_of(&self, sigma: f64) -> usize {
        let p = self.times.partition_point(|&t| t <= sigma);
        p.clamp(1, self.len())
    }
}

pub fn make_uniform_partition(tau: f64, n: usize) -> Result<Partition> {
    if !(tau > 0.0) || !tau.is_finite() || n == 0 {
        return Err(Error::InvalidArgument(format!("need tau > 0 and n >= 1, got tau = {tau}, n = {n}")));
    }
    let mut times: Vec<f64> = (0..=n).map(|i| tau * i as f64 / n as f64).collect();
    times[n] = tau;
    Partition::new(times)
}

/// `K↓(P)`: `K` eroded by a ball of radius `M ‖P‖`.
pub fn shrink_constraint(k: &Ellipsoid, m: f64, p: &Partition) -> Result<Ellipsoid> {
    if !(m >= 0.0) {
        return Err(Error::InvalidArgument(format!("dynamics bound must be >= 0, got {m}")));
    }
    let margin = m * p.norm();
    ellipsoid::erode_by_ball(k, margin)?.ok_or(Error::InfeasiblePartition { margin })
}

/// `K_k ⊆ start of the tube that ends in K_k`.
pub fn check_invariance(segment: &ReachSegment, k_k: &Ellipsoid) -> bool {
    ellipsoid::contains_ellipsoid(k_k, &segment.start())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelOptions {
    /// Stop a chain at the first sub-interval satisfying the invariance test.
    pub stop_on_invariance: bool,
    /// RK4 steps per sub-interval.
    pub steps_per_interval: usize,
    /// Compute direction chains on the rayon pool.
    pub parallel: bool,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self { stop_on_invariance: false, steps_per_interval: 10, parallel: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvarianceRecord {
    pub direction_id: usize,
    pub k: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorGap {
    pub k: usize,
    pub gap: f64,
}

/// One terminal direction's chain. `kernels[k]` is `K_k` and `segments[k]`
/// the tube over `[t_{k-1}, t_k]` ending in `K_k` (`segments[0]` is unused).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionChain {
    pub direction_id: usize,
    #[serde(with = "crate::linalg::serde_vector")]
    pub terminal_direction: DVector<f64>,
    pub kernels: Vec<Option<Ellipsoid>>,
    pub segments: Vec<Option<ReachSegment>>,
    /// Index `k` whose tube or fusion degenerated.
    pub dropped_at: Option<usize>,
    /// Largest `k` at which the invariance test held.
    pub invariant_at: Option<usize>,
    pub error_gaps: Vec<ErrorGap>,
}

impl DirectionChain {
    /// Reached `K_0`.
    pub fn survives(&self) -> bool {
        self.kernels.first().is_some_and(Option::is_some)
    }

    pub fn segment(&self, k: usize) -> Option<&ReachSegment> {
        self.segments.get(k).and_then(Option::as_ref)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelApprox {
    pub system: LtiSystem,
    pub bounds: InputBounds,
    pub constraint: Ellipsoid,
    pub eroded: Ellipsoid,
    pub m_bound: f64,
    pub partition: Partition,
    pub directions: DirectionSet,
    pub options: KernelOptions,
    pub chains: Vec<DirectionChain>,
    pub invariance: Vec<InvarianceRecord>,
}

impl KernelApprox {
    pub fn horizon(&self) -> f64 {
        self.partition.horizon()
    }

    pub fn n_intervals(&self) -> usize {
        self.partition.len()
    }

    pub fn segment(&self, direction_id: usize, k: usize) -> Option<&ReachSegment> {
        self.chains.get(direction_id).and_then(|c| c.segment(k))
    }

    /// Directions whose chain reached `K_0`.
    pub fn surviving(&self) -> Vec<usize> {
        self.chains.iter().filter(|c| c.survives()).map(|c| c.direction_id).collect()
    }

    /// Directions carrying an invariance certificate, with the index `k`.
    pub fn invariant_directions(&self) -> Vec<(usize, usize)> {
        self.chains.iter().filter_map(|c| c.invariant_at.map(|k| (c.direction_id, k))).collect()
    }

    /// Nothing certified: no chain reached `K_0` and none is invariant.
    pub fn is_empty(&self) -> bool {
        self.surviving().is_empty() && self.invariance.is_empty()
    }

    /// `{K_k}` over the directions that have it.
    pub fn intermediate_kernel(&self, k: usize) -> Vec<(usize, Ellipsoid)> {
        self.chains
            .iter()
            .filter_map(|c| c.kernels.get(k).cloned().flatten().map(|e| (c.direction_id, e)))
            .collect()
    }

    /// Final kernel pieces `K_0`.
    pub fn kernel_pieces(&self) -> Vec<(usize, Ellipsoid)> {
        self.intermediate_kernel(0)
    }

    /// Directions whose tube at `(sigma, k)` has `x` in its interior, ascending.
    pub fn membership_in_union(&self, k: usize, sigma: f64, x: &DVector<f64>) -> Vec<usize> {
        self.chains
            .iter()
            .filter_map(|c| c.segment(k).map(|s| (c.direction_id, s)))
            .filter(|(_, s)| s.slice_at(sigma).phi(x) < 1.0 - TOL.interior)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn total_error_gap(&self) -> f64 {
        self.chains.iter().flat_map(|c| c.error_gaps.iter()).map(|g| g.gap).sum()
    }
}

fn build_chain(
    sys: &LtiSystem,
    bounds: &InputBounds,
    eroded: &Ellipsoid,
    p: &Partition,
    id: usize,
    l_tau: &DVector<f64>,
    options: &KernelOptions,
) -> Result<DirectionChain> {
    let n = p.len();
    let mut chain = DirectionChain {
        direction_id: id,
        terminal_direction: l_tau.clone(),
        kernels: vec![None; n + 1],
        segments: vec![None; n + 1],
        dropped_at: None,
        invariant_at: None,
        error_gaps: Vec::new(),
    };
    chain.kernels[n] = Some(eroded.clone());
    for k in (1..=n).rev() {
        let target = chain.kernels[k].clone().expect("chain kernel set before use");
        let interval = p.interval(k);
        let step = (interval.1 - interval.0) / options.steps_per_interval.max(1) as f64;
        let seg = match reach::reach_tube_segment(sys, &target, bounds, interval, step, l_tau, id) {
            Ok(seg) => seg,
            Err(Error::SegmentDegenerate { time }) => {
                log::debug!("direction {id}: tube degenerated at t = {time} (k = {k})");
                chain.dropped_at = Some(k);
                break;
            }
            Err(e) => return Err(e),
        };
        let start = seg.start();
        let invariant = check_invariance(&seg, &target);
        chain.segments[k] = Some(seg);
        if invariant && chain.invariant_at.is_none() {
            chain.invariant_at = Some(k);
            if options.stop_on_invariance {
                break;
            }
        }
        match ellipsoid::fusion_intersect_ia(eroded, &start)? {
            Some(fused) => {
                chain.error_gaps.push(ErrorGap { k, gap: ellipsoid::error_gap_estimate(eroded, &start, &fused) });
                chain.kernels[k - 1] = Some(fused);
            }
            None => {
                log::debug!("direction {id}: fusion empty at k = {k}");
                chain.dropped_at = Some(k);
                break;
            }
        }
    }
    Ok(chain)
}

/// Runs the backward recursion for every terminal direction.
///
/// Degenerate chains are dropped rather than failing the run; an approximation
/// in which every chain was dropped is returned as is (see
/// [`KernelApprox::is_empty`]).
pub fn discriminating_kernel_ia(
    sys: &LtiSystem,
    k: &Ellipsoid,
    bounds: &InputBounds,
    p: &Partition,
    dirs: &DirectionSet,
    options: KernelOptions,
) -> Result<KernelApprox> {
    bounds.check(sys)?;
    if k.dim() != sys.n() || dirs.dim() != sys.n() {
        return Err(Error::DimensionMismatch("constraint or directions do not match the state dimension".into()));
    }
    if k.is_degenerate() {
        return Err(Error::InvalidEllipsoid("constraint set must be positive definite".into()));
    }
    let m_bound = reach::dynamics_bound(sys, k, bounds);
    let eroded = shrink_constraint(k, m_bound, p)?;
    let started = Instant::now();
    let run = |(id, l): (usize, &DVector<f64>)| build_chain(sys, bounds, &eroded, p, id, l, &options);
    let chains: Vec<DirectionChain> = if options.parallel {
        dirs.directions().par_iter().enumerate().map(run).collect::<Result<_>>()?
    } else {
        dirs.directions().iter().enumerate().map(run).collect::<Result<_>>()?
    };
    log::debug!("kernel recursion: {} directions in {:.3} s", chains.len(), started.elapsed().as_secs_f64());
    let invariance = chains
        .iter()
        .filter_map(|c| c.invariant_at.map(|k| InvarianceRecord { direction_id: c.direction_id, k }))
        .collect();
    Ok(KernelApprox {
        system: sys.clone(),
        bounds: bounds.clone(),
        constraint: k.clone(),
        eroded,
        m_bound,
        partition: p.clone(),
        directions: dirs.clone(),
        options,
        chains,
        invariance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector, DMatrix};

    #[test]
    fn uniform_partition_examples() {
        let p = make_uniform_partition(1.0, 100).unwrap();
        assert!((p.norm() - 0.01).abs() < 1e-15);
        let p = make_uniform_partition(2.0, 200).unwrap();
        assert!((p.norm() - 0.01).abs() < 1e-15);
        assert_eq!(make_uniform_partition(1.0, 1).unwrap().times(), &[0.0, 1.0]);
        assert!(make_uniform_partition(0.0, 10).is_err());
        assert!(make_uniform_partition(1.0, 0).is_err());
    }

    #[test]
    fn index_of_clamps() {
        let p = make_uniform_partition(1.0, 4).unwrap();
        assert_eq!(p.index_of(0.0), 1);
        assert_eq!(p.index_of(0.3), 2);
        assert_eq!(p.index_of(1.0), 4);
        assert_eq!(p.index_of(5.0), 4);
    }

    #[test]
    fn shrink_examples() {
        let p = make_uniform_partition(1.0, 10).unwrap();
        let b = Ellipsoid::unit_ball(2);
        assert_eq!(shrink_constraint(&b, 0.0, &p).unwrap(), b);
        let e = shrink_constraint(&b, 1.0, &p).unwrap();
        assert!((e.shape()[(0, 0)] - 0.81).abs() < 1e-12);
        let k = Ellipsoid::new(DVector::zeros(2), DMatrix::from_diagonal(&dvector![0.25, 4.0])).unwrap();
        let e = shrink_constraint(&k, 0.5, &p).unwrap();
        assert!((e.shape()[(0, 0)] - 0.25 * 0.81).abs() < 1e-12);
        assert!(matches!(shrink_constraint(&b, 20.0, &p), Err(Error::InfeasiblePartition { .. })));
    }

    #[test]
    fn pure_control_is_invariant() {
        let sys = LtiSystem::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 2), DMatrix::zeros(2, 1)).unwrap();
        let bounds = InputBounds::new(Ellipsoid::unit_ball(2), Ellipsoid::point(dvector![0.0])).unwrap();
        let k = Ellipsoid::unit_ball(2);
        let p = make_uniform_partition(0.5, 5).unwrap();
        let dirs = DirectionSet::from_vectors(vec![dvector![1.0, 0.0]]).unwrap();
        let approx = discriminating_kernel_ia(&sys, &k, &bounds, &p, &dirs, KernelOptions::default()).unwrap();
        assert_eq!(approx.chains[0].invariant_at, Some(5));
        assert!(approx.chains[0].survives());
        assert_eq!(approx.intermediate_kernel(5), vec![(0, approx.eroded.clone())]);
    }

    #[test]
    fn disturbance_dominant_1d_empties() {
        let sys = LtiSystem::new(dmatrix![0.0], dmatrix![0.1], dmatrix![1.0]).unwrap();
        let bounds = InputBounds::new(
            Ellipsoid::new(dvector![0.0], dmatrix![1.0]).unwrap(),
            Ellipsoid::new(dvector![0.0], dmatrix![0.04]).unwrap(),
        )
        .unwrap();
        let k = Ellipsoid::new(dvector![0.0], dmatrix![1.0]).unwrap();
        let p = make_uniform_partition(10.0, 200).unwrap();
        let dirs = DirectionSet::from_vectors(vec![dvector![1.0]]).unwrap();
        let approx = discriminating_kernel_ia(&sys, &k, &bounds, &p, &dirs, KernelOptions::default()).unwrap();
        assert!(approx.is_empty());
        assert!(approx.chains[0].invariant_at.is_none());
        let mut prev = f64::INFINITY;
        for k in (0..=200).rev() {
            if let Some((_, e)) = approx.intermediate_kernel(k).first() {
                assert!(e.volume() <= prev + 1e-12);
                prev = e.volume();
            }
        }
    }
}
