//! Internal ellipsoidal approximation of backward reach tubes.
//!
//! For `x' = Ax + Bu + Gv` with `u in E(mu, U)` and `v in E(nu, V)`, the
//! robust backward reach set of a target ellipsoid over a sub-interval is
//! under-approximated by an ellipsoid that touches the true set along the
//! adjoint direction curve `l(t) = exp(A'(t_k - t)) l_tau`. The center and
//! shape obey ODEs in backward time `s = t_k - t`, integrated with RK4.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ellipsoid::{self, Ellipsoid};
use crate::error::{Error, Result};
use crate::linalg::{self, SymEig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtiSystem {
    #[serde(with = "linalg::serde_matrix")]
    a: DMatrix<f64>,
    #[serde(with = "linalg::serde_matrix")]
    b: DMatrix<f64>,
    #[serde(with = "linalg::serde_matrix")]
    g: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, g: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::DimensionMismatch(format!("A must be square and nonempty, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != n || g.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "B and G need {n} rows, got {} and {}",
                b.nrows(),
                g.nrows()
            )));
        }
        if b.ncols() == 0 || g.ncols() == 0 {
            return Err(Error::DimensionMismatch("B and G need at least one column".into()));
        }
        if a.iter().chain(b.iter()).chain(g.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("system matrices must be finite".into()));
        }
        Ok(Self { a, b, g })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn m_v(&self) -> usize {
        self.g.ncols()
    }

    /// `Ax + Bu + Gv`.
    pub fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.g * v
    }
}

/// Control and disturbance sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputBounds {
    pub u: Ellipsoid,
    pub v: Ellipsoid,
}

impl InputBounds {
    pub fn new(u: Ellipsoid, v: Ellipsoid) -> Result<Self> {
        if u.is_degenerate() {
            return Err(Error::InvalidEllipsoid("control set must be positive definite".into()));
        }
        Ok(Self { u, v })
    }

    pub fn check(&self, sys: &LtiSystem) -> Result<()> {
        if self.u.dim() != sys.m_u() || self.v.dim() != sys.m_v() {
            return Err(Error::DimensionMismatch(format!(
                "input sets have dims {}/{}, system expects {}/{}",
                self.u.dim(),
                self.v.dim(),
                sys.m_u(),
                sys.m_v()
            )));
        }
        Ok(())
    }

    /// True when the disturbance cannot move the state (`G V G' = 0`).
    pub fn disturbance_free(&self, sys: &LtiSystem) -> bool {
        self.v.is_point() || sys.g.iter().all(|&x| x == 0.0)
    }
}

/// Unit terminal directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionSet {
    #[serde(with = "serde_vectors")]
    directions: Vec<DVector<f64>>,
    seed: Option<u64>,
}

impl DirectionSet {
    /// Normalizes the given vectors.
    pub fn from_vectors(vectors: Vec<DVector<f64>>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::InvalidArgument("direction set must be nonempty".into()));
        }
        let n = vectors[0].len();
        let mut directions = Vec::with_capacity(vectors.len());
        for v in vectors {
            if v.len() != n {
                return Err(Error::DimensionMismatch("directions of different length".into()));
            }
            let norm = v.norm();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::InvalidArgument("direction must be nonzero and finite".into()));
            }
            directions.push(v / norm);
        }
        Ok(Self { directions, seed: None })
    }

    /// `count` normalized Gaussian vectors from a seeded generator, optionally
    /// followed by the `2n` signed coordinate axes.
    pub fn random(n: usize, count: usize, seed: u64, include_axes: bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("direction dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut directions: Vec<DVector<f64>> = (0..count).map(|_| ellipsoid::random_unit(n, &mut rng)).collect();
        if include_axes {
            for i in 0..n {
                for sign in [1.0, -1.0] {
                    let mut e = DVector::zeros(n);
                    e[i] = sign;
                    directions.push(e);
                }
            }
        }
        if directions.is_empty() {
            return Err(Error::InvalidArgument("direction set must be nonempty".into()));
        }
        Ok(Self { directions, seed: Some(seed) })
    }

    pub fn directions(&self) -> &[DVector<f64>] {
        &self.directions
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.directions[0].len()
    }
}

/// `l(t) = exp(A'(t_end - t)) l_tau` on each grid time.
pub fn adjoint_directions(a: &DMatrix<f64>, l_tau: &DVector<f64>, grid: &[f64], t_end: f64) -> Result<Vec<DVector<f64>>> {
    let at = a.transpose();
    grid.iter()
        .map(|&t| {
            if t == t_end {
                Ok(l_tau.clone())
            } else {
                Ok(linalg::matrix_exponential(&at, t_end - t)? * l_tau)
            }
        })
        .collect()
}

/// Cross-section of a tube at one pseudo-time.
#[derive(Clone, Debug)]
pub struct TubeSlice {
    pub center: DVector<f64>,
    pub shape: DMatrix<f64>,
    pub inv_shape: DMatrix<f64>,
}

impl TubeSlice {
    fn from_shape(center: DVector<f64>, shape: DMatrix<f64>) -> Self {
        let inv_shape = match Cholesky::new(shape.clone()) {
            Some(c) => linalg::symmetrized(&c.inverse()),
            None => SymEig::new(&shape).map(|v| 1.0 / v.max(f64::MIN_POSITIVE)),
        };
        Self { center, shape, inv_shape }
    }

    /// `(x - c)' X^-1 (x - c)`.
    pub fn phi(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.center;
        d.dot(&(&self.inv_shape * &d))
    }

    /// `X^-1 (x - c)`.
    pub fn direction(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.inv_shape * (x - &self.center)
    }

    pub fn distance(&self, x: &DVector<f64>) -> f64 {
        ellipsoid::point_ellipsoid_distance(x, &self.ellipsoid())
    }

    pub fn ellipsoid(&self) -> Ellipsoid {
        Ellipsoid::new_degenerate(self.center.clone(), self.shape.clone()).expect("tube shapes are valid")
    }
}

/// One direction's tube over `[t_{k-1}, t_k]`, sampled on an increasing grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReachSegment {
    pub direction_id: usize,
    #[serde(with = "linalg::serde_vector")]
    pub terminal_direction: DVector<f64>,
    pub interval: (f64, f64),
    pub grid: Vec<f64>,
    #[serde(with = "serde_vectors")]
    pub ell: Vec<DVector<f64>>,
    #[serde(with = "serde_vectors")]
    pub centers: Vec<DVector<f64>>,
    #[serde(with = "serde_flat_matrices")]
    pub shapes: Vec<DMatrix<f64>>,
    #[serde(skip)]
    log_shapes: OnceLock<Vec<DMatrix<f64>>>,
}

impl PartialEq for ReachSegment {
    fn eq(&self, other: &Self) -> bool {
        self.direction_id == other.direction_id
            && self.terminal_direction == other.terminal_direction
            && self.interval == other.interval
            && self.grid == other.grid
            && self.ell == other.ell
            && self.centers == other.centers
            && self.shapes == other.shapes
    }
}

impl ReachSegment {
    /// Ellipsoid at `t_{k-1}`.
    pub fn start(&self) -> Ellipsoid {
        Ellipsoid::new_degenerate(self.centers[0].clone(), self.shapes[0].clone()).expect("tube shapes are valid")
    }

    /// Ellipsoid at `t_k` (the target).
    pub fn end(&self) -> Ellipsoid {
        let i = self.grid.len() - 1;
        Ellipsoid::new_degenerate(self.centers[i].clone(), self.shapes[i].clone()).expect("tube shapes are valid")
    }

    pub fn start_slice(&self) -> TubeSlice {
        TubeSlice::from_shape(self.centers[0].clone(), self.shapes[0].clone())
    }

    /// Tube cross-section at `sigma` (clamped to the interval). Centers are
    /// interpolated linearly, shapes log-Euclidean between samples.
    pub fn slice_at(&self, sigma: f64) -> TubeSlice {
        let last = self.grid.len() - 1;
        let sigma = sigma.clamp(self.grid[0], self.grid[last]);
        let i = match self.grid.partition_point(|&t| t <= sigma) {
            0 => 0,
            p => (p - 1).min(last.saturating_sub(1)),
        };
        if last == 0 || sigma == self.grid[i] {
            return TubeSlice::from_shape(self.centers[i].clone(), self.shapes[i].clone());
        }
        if sigma == self.grid[i + 1] {
            return TubeSlice::from_shape(self.centers[i + 1].clone(), self.shapes[i + 1].clone());
        }
        let w = (sigma - self.grid[i]) / (self.grid[i + 1] - self.grid[i]);
        let center = &self.centers[i] * (1.0 - w) + &self.centers[i + 1] * w;
        let logs = self.log_shapes.get_or_init(|| self.shapes.iter().map(linalg::sym_log).collect());
        let mixed = &logs[i] * (1.0 - w) + &logs[i + 1] * w;
        let eig = SymEig::new(&mixed);
        TubeSlice {
            center,
            shape: eig.map(f64::exp),
            inv_shape: eig.map(|v| (-v).exp()),
        }
    }
}

/// Orthogonal `S` with `S a = b` for unit `a`, `b`: the plane rotation taking
/// `a` to `b`, or a reflection when they are (nearly) opposite.
fn align(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let n = a.len();
    let c = a.dot(b);
    if c > -1.0 + 1e-8 {
        let k = b * a.transpose() - a * b.transpose();
        DMatrix::identity(n, n) + &k + (&k * &k) / (1.0 + c)
    } else {
        let w = a - b;
        let w = &w / w.norm();
        DMatrix::identity(n, n) - (&w * w.transpose()) * 2.0
    }
}

struct ShapeRhs<'a> {
    a: &'a DMatrix<f64>,
    r_sqrt: &'a DMatrix<f64>,
    d: Option<(&'a DMatrix<f64>, f64)>,
}

impl ShapeRhs<'_> {
    /// `dX/ds` in backward time along direction `l`.
    fn eval(&self, x: &DMatrix<f64>, l: &DVector<f64>) -> Option<DMatrix<f64>> {
        let eig = SymEig::new(x);
        if !(eig.min() > 0.0) {
            return None;
        }
        let x_sqrt = eig.map(|v| v.max(0.0).sqrt());
        let mut out = -(self.a * x) - x * self.a.transpose();

        let rl = self.r_sqrt * l;
        let xl = &x_sqrt * l;
        let (rn, xn) = (rl.norm(), xl.norm());
        let s = if rn > 1e-300 && xn > 1e-300 {
            align(&(rl / rn), &(xl / xn))
        } else {
            DMatrix::identity(x.nrows(), x.nrows())
        };
        let cross = &x_sqrt * &s * self.r_sqrt;
        out += &cross + cross.transpose();

        if let Some((d, d_scale)) = self.d {
            let lxl = l.dot(&(x * l)).max(0.0);
            let ldl = l.dot(&(d * l)).max(0.0);
            let floor = 0.1 * (d_scale / eig.max().max(f64::MIN_POSITIVE)).sqrt();
            let pi = if lxl > 0.0 { (ldl / lxl).sqrt() } else { floor }.max(floor);
            out -= x * pi + d / pi;
        }
        Some(linalg::symmetrized(&out))
    }
}

/// Internal approximation of the robust backward reach tube of `target` over
/// `interval = (t_{k-1}, t_k)` for terminal direction `l_tau`.
///
/// The grid uses `ceil(delta / step)` equal steps. Fails with
/// [`Error::SegmentDegenerate`] when the shape stops being positive definite.
pub fn reach_tube_segment(
    sys: &LtiSystem,
    target: &Ellipsoid,
    bounds: &InputBounds,
    interval: (f64, f64),
    step: f64,
    l_tau: &DVector<f64>,
    direction_id: usize,
) -> Result<ReachSegment> {
    let n = sys.n();
    bounds.check(sys)?;
    if target.dim() != n || l_tau.len() != n {
        return Err(Error::DimensionMismatch("target or direction does not match the state dimension".into()));
    }
    if target.is_degenerate() {
        return Err(Error::InvalidEllipsoid("reach target must be positive definite".into()));
    }
    let (t0, t1) = interval;
    let delta = t1 - t0;
    if !(delta > 0.0) || !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("bad interval ({t0}, {t1}) or step {step}")));
    }
    let steps = ((delta / step) - 1e-9).ceil().max(1.0) as usize;
    let h = delta / steps as f64;

    let bt = sys.b.transpose();
    let r = linalg::symmetrized(&(&sys.b * bounds.u.shape() * &bt));
    let r_sqrt = linalg::sym_sqrt(&r);
    let drift = &sys.b * bounds.u.center() + &sys.g * bounds.v.center();
    let d = linalg::symmetrized(&(&sys.g * bounds.v.shape() * sys.g.transpose()));
    let d_scale = SymEig::new(&d).max();
    let rhs = ShapeRhs {
        a: &sys.a,
        r_sqrt: &r_sqrt,
        d: if bounds.disturbance_free(sys) || d_scale <= 0.0 { None } else { Some((&d, d_scale)) },
    };
    let center_rhs = |c: &DVector<f64>| -(&sys.a * c) - &drift;
    let half = linalg::matrix_exponential(&sys.a.transpose(), 0.5 * h)?;

    let mut ell = Vec::with_capacity(steps + 1);
    let mut centers = Vec::with_capacity(steps + 1);
    let mut shapes = Vec::with_capacity(steps + 1);
    let mut l = l_tau.clone();
    let mut c = target.center().clone();
    let mut x = target.shape().clone();
    ell.push(l.clone());
    centers.push(c.clone());
    shapes.push(x.clone());

    for i in 0..steps {
        let l_mid = &half * &l;
        let l_next = &half * &l_mid;

        let k1 = center_rhs(&c);
        let k2 = center_rhs(&(&c + &k1 * (0.5 * h)));
        let k3 = center_rhs(&(&c + &k2 * (0.5 * h)));
        let k4 = center_rhs(&(&c + &k3 * h));
        c += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);

        let s = (i + 1) as f64 * h;
        let degenerate = || Error::SegmentDegenerate { time: t1 - s };
        let m1 = rhs.eval(&x, &l).ok_or_else(degenerate)?;
        let m2 = rhs.eval(&(&x + &m1 * (0.5 * h)), &l_mid).ok_or_else(degenerate)?;
        let m3 = rhs.eval(&(&x + &m2 * (0.5 * h)), &l_mid).ok_or_else(degenerate)?;
        let m4 = rhs.eval(&(&x + &m3 * h), &l_next).ok_or_else(degenerate)?;
        x += (m1 + m2 * 2.0 + m3 * 2.0 + m4) * (h / 6.0);
        linalg::symmetrize(&mut x);

        if !linalg::is_positive_definite(&x) || c.iter().any(|v| !v.is_finite()) {
            return Err(degenerate());
        }
        l = l_next;
        ell.push(l.clone());
        centers.push(c.clone());
        shapes.push(x.clone());
    }

    // Stored in increasing time order.
    ell.reverse();
    centers.reverse();
    shapes.reverse();
    let mut grid: Vec<f64> = (0..=steps).map(|i| t0 + i as f64 * h).collect();
    grid[steps] = t1;
    Ok(ReachSegment {
        direction_id,
        terminal_direction: l_tau.clone(),
        interval,
        grid,
        ell,
        centers,
        shapes,
        log_shapes: OnceLock::new(),
    })
}

/// Upper bound on `|Ax + Bu + Gv|` over `K x U x V`.
pub fn dynamics_bound(sys: &LtiSystem, k: &Ellipsoid, bounds: &InputBounds) -> f64 {
    let term = |m: &DMatrix<f64>, e: &Ellipsoid| {
        (m * e.center()).norm() + linalg::sigma_max(&(m * linalg::sym_sqrt(e.shape())))
    };
    term(&sys.a, k) + term(&sys.b, &bounds.u) + term(&sys.g, &bounds.v)
}

pub(crate) mod serde_vectors {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[DVector<f64>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| x.as_slice().to_vec()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DVector<f64>>, D::Error> {
        Ok(Vec::<Vec<f64>>::deserialize(d)?.into_iter().map(DVector::from_vec).collect())
    }
}

/// Square matrices as row-major flat arrays.
pub(crate) mod serde_flat_matrices {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|m| m.transpose().as_slice().to_vec()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
        Vec::<Vec<f64>>::deserialize(d)?
            .into_iter()
            .map(|flat| {
                let n = (flat.len() as f64).sqrt().round() as usize;
                if n * n != flat.len() {
                    return Err(D::Error::custom("flattened shape is not square"));
                }
                Ok(DMatrix::from_row_slice(n, n, &flat))
            })
            .collect()
    }
}
