//! Ellipsoid geometry.
//!
//! An ellipsoid `E(q, Q) = { z : (z-q)' Q^-1 (z-q) <= 1 }` is the only set
//! representation used by the crate: constraint sets, input and disturbance
//! bounds, reach-tube cross sections and kernel pieces are all ellipsoids.
//!
//! Shapes must be positive definite unless the ellipsoid was built with
//! [`Ellipsoid::new_degenerate`], which is how point disturbance sets and
//! zero-width boxes are represented.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::{self, SymEig};
use crate::numeric::TOL;

#[derive(Clone, Debug, PartialEq)]
pub struct Ellipsoid {
    center: DVector<f64>,
    shape: DMatrix<f64>,
    degenerate: bool,
}

impl Ellipsoid {
    /// Builds an ellipsoid with a positive definite shape matrix.
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>) -> Result<Self> {
        let e = Self::new_degenerate(center, shape)?;
        if e.degenerate {
            return Err(Error::InvalidEllipsoid("shape matrix is not positive definite".into()));
        }
        Ok(e)
    }

    /// Builds an ellipsoid whose shape only needs to be positive semidefinite.
    /// The `degenerate` flag is set when the shape is singular.
    pub fn new_degenerate(center: DVector<f64>, shape: DMatrix<f64>) -> Result<Self> {
        let n = center.len();
        if n == 0 {
            return Err(Error::InvalidEllipsoid("zero-dimensional ellipsoid".into()));
        }
        if shape.nrows() != n || shape.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "center has length {n} but shape is {}x{}",
                shape.nrows(),
                shape.ncols()
            )));
        }
        if center.iter().chain(shape.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidEllipsoid("non-finite entry".into()));
        }
        if !linalg::is_symmetric(&shape, TOL.symmetry) {
            return Err(Error::InvalidEllipsoid("shape matrix is not symmetric".into()));
        }
        let shape = linalg::symmetrized(&shape);
        let degenerate = !linalg::is_positive_definite(&shape);
        if degenerate {
            let eig = SymEig::new(&shape);
            if eig.min() < -1e-12 * eig.max().abs().max(1.0) {
                return Err(Error::InvalidEllipsoid("shape matrix is not positive semidefinite".into()));
            }
        }
        Ok(Self { center, shape, degenerate })
    }

    pub fn ball(center: DVector<f64>, radius: f64) -> Result<Self> {
        let n = center.len();
        Self::new(center, DMatrix::identity(n, n) * (radius * radius))
    }

    pub fn unit_ball(n: usize) -> Self {
        Self::ball(DVector::zeros(n), 1.0).expect("unit ball is valid")
    }

    /// Singleton set `{center}`.
    pub fn point(center: DVector<f64>) -> Self {
        let n = center.len();
        Self::new_degenerate(center, DMatrix::zeros(n, n)).expect("point ellipsoid is valid")
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// True when the shape matrix is identically zero.
    pub fn is_point(&self) -> bool {
        self.shape.iter().all(|&v| v == 0.0)
    }

    /// `E(q, c^2 Q)`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            center: self.center.clone(),
            shape: &self.shape * (factor * factor),
            degenerate: self.degenerate || factor == 0.0,
        }
    }

    /// Image `M E + shift`; the result may be degenerate.
    pub fn affine_image(&self, m: &DMatrix<f64>, shift: Option<&DVector<f64>>) -> Result<Self> {
        if m.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "map has {} columns, ellipsoid has dimension {}",
                m.ncols(),
                self.dim()
            )));
        }
        let mut center = m * &self.center;
        if let Some(s) = shift {
            center += s;
        }
        let shape = m * &self.shape * m.transpose();
        Self::new_degenerate(center, linalg::symmetrized(&shape))
    }

    fn check_dim(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "vector has length {}, ellipsoid has dimension {}",
                v.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `(x-q)' Q^-1 (x-q)`; infinite for degenerate ellipsoids when `x - q`
    /// leaves the range of `Q`.
    pub fn quadratic_form(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_dim(x)?;
        let d = x - &self.center;
        if !self.degenerate {
            let chol = Cholesky::new(self.shape.clone())
                .ok_or_else(|| Error::InvalidEllipsoid("shape lost positive definiteness".into()))?;
            return Ok(d.dot(&chol.solve(&d)));
        }
        let eig = SymEig::new(&self.shape);
        let scale = eig.max().max(0.0);
        let p = eig.vectors.transpose() * &d;
        let dscale = d.amax().max(1.0);
        let mut q = 0.0;
        for (i, &a) in eig.values.iter().enumerate() {
            if a > 1e-12 * scale && a > 0.0 {
                q += p[i] * p[i] / a;
            } else if p[i].abs() > 1e-12 * dscale {
                return Ok(f64::INFINITY);
            }
        }
        Ok(q)
    }

    /// Membership with the shared tolerance (`<= 1 + 1e-9`).
    pub fn contains(&self, x: &DVector<f64>) -> Result<bool> {
        Ok(self.quadratic_form(x)? <= 1.0 + TOL.membership)
    }

    /// `rho(l) = <l, q> + sqrt(<l, Q l>)`.
    pub fn support_function(&self, l: &DVector<f64>) -> f64 {
        l.dot(&self.center) + l.dot(&(&self.shape * l)).max(0.0).sqrt()
    }

    /// Boundary point attaining the support function along `l`.
    pub fn support_vector(&self, l: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(l)?;
        let ql = &self.shape * l;
        let denom = l.dot(&ql);
        if !(denom > 0.0) || denom.sqrt() <= 1e-14 * l.norm() * self.shape.amax().sqrt() {
            return Err(Error::DegenerateDirection("direction lies in the null space of the shape".into()));
        }
        Ok(&self.center + ql / denom.sqrt())
    }

    pub fn volume(&self) -> f64 {
        volume(self)
    }

    /// Uniform sample from the solid ellipsoid.
    pub fn sample_interior<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.dim();
        let dir = random_unit(n, rng);
        let radius: f64 = rng.random::<f64>().powf(1.0 / n as f64);
        &self.center + linalg::sym_sqrt(&self.shape) * (dir * radius)
    }

    /// Sample on the boundary (uniform direction in whitened coordinates).
    pub fn sample_boundary<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let dir = random_unit(self.dim(), rng);
        &self.center + linalg::sym_sqrt(&self.shape) * dir
    }
}

/// Uniformly distributed unit vector.
pub fn random_unit<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

#[derive(Serialize, Deserialize)]
struct EllipsoidRepr {
    center: Vec<f64>,
    shape: Vec<Vec<f64>>,
}

impl Serialize for Ellipsoid {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        EllipsoidRepr {
            center: self.center.iter().copied().collect(),
            shape: linalg::serde_matrix::to_rows(&self.shape),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Ellipsoid {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = EllipsoidRepr::deserialize(d)?;
        let shape = linalg::serde_matrix::from_rows(&repr.shape).map_err(D::Error::custom)?;
        Ellipsoid::new_degenerate(DVector::from_vec(repr.center), shape).map_err(D::Error::custom)
    }
}

/// Axis-aligned box `lower <= x <= upper`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperRectangle {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl HyperRectangle {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::DimensionMismatch("box bounds must have equal, nonzero length".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite()) {
            return Err(Error::InvalidArgument("box needs finite lower <= upper".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }
}

/// Maximum-volume ellipsoid inscribed in a box: centered, semi-axes equal to
/// the half-widths. Zero-width sides give a degenerate ellipsoid.
pub fn mvie_box(rect: &HyperRectangle) -> Ellipsoid {
    let n = rect.dim();
    let center = DVector::from_fn(n, |i, _| 0.5 * (rect.lower[i] + rect.upper[i]));
    let half = DVector::from_fn(n, |i, _| 0.5 * (rect.upper[i] - rect.lower[i]));
    let shape = DMatrix::from_diagonal(&half.map(|h| h * h));
    Ellipsoid::new_degenerate(center, shape).expect("box ellipsoid is valid")
}

/// Volume of the unit ball in `n` dimensions.
pub fn unit_ball_volume(n: usize) -> f64 {
    let (mut prev, mut cur) = (1.0, 2.0);
    if n == 0 {
        return prev;
    }
    for k in 2..=n {
        let next = prev * 2.0 * std::f64::consts::PI / k as f64;
        prev = cur;
        cur = next;
    }
    cur
}

/// `vol(unit ball) * sqrt(det Q)`; zero for degenerate shapes.
pub fn volume(e: &Ellipsoid) -> f64 {
    let eig = SymEig::new(e.shape());
    let det: f64 = eig.values.iter().map(|v| v.max(0.0)).product();
    unit_ball_volume(e.dim()) * det.sqrt()
}

/// Signed distance from a point to an ellipsoid given in its eigenbasis
/// (`p` = coordinates of `x - q`, `a` = ascending eigenvalues of `Q`).
///
/// Positive outside (Euclidean distance), negative inside (minus the
/// distance to the boundary). The nearest boundary point is
/// `z_i = a_i p_i / (a_i - lambda)` where `lambda < a_min` solves the
/// secular equation `sum a_i p_i^2 / (a_i - lambda)^2 = 1`.
fn signed_distance_canonical(p: &[f64], a: &[f64]) -> f64 {
    let n = p.len();
    let amin = a[0];
    let amax = a[n - 1];
    let quad: f64 = p.iter().zip(a).map(|(pi, ai)| pi * pi / ai).sum();
    let pnorm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    if quad == 1.0 {
        return 0.0;
    }
    let secular = |lam: f64| -> f64 {
        p.iter().zip(a).map(|(pi, ai)| ai * pi * pi / ((ai - lam) * (ai - lam))).sum()
    };

    if quad < 1.0 {
        let tie = |ai: f64| ai <= amin * (1.0 + 1e-12);
        let tie_mass: f64 = p.iter().zip(a).filter(|(_, &ai)| tie(ai)).map(|(pi, _)| pi * pi).sum();
        if tie_mass.sqrt() <= 1e-14 * pnorm.max(amin.sqrt()) {
            let mut rest_secular = 0.0;
            let mut rest_quad = 0.0;
            let mut d2 = 0.0;
            for (&pi, &ai) in p.iter().zip(a) {
                if tie(ai) {
                    continue;
                }
                let zi = ai * pi / (ai - amin);
                rest_secular += ai * pi * pi / ((ai - amin) * (ai - amin));
                rest_quad += zi * zi / ai;
                d2 += (zi - pi) * (zi - pi);
            }
            if rest_secular <= 1.0 {
                let z_tie = (amin * (1.0 - rest_quad)).max(0.0).sqrt();
                let p_tie = tie_mass.sqrt();
                d2 += (z_tie - p_tie) * (z_tie - p_tie);
                return -d2.sqrt();
            }
        }
    }

    if quad > 1.0 {
        let (mut lo, mut hi) = (amin - amax.sqrt() * pnorm, 0.0);
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if secular(mid) > 1.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let lam = 0.5 * (lo + hi);
        let s: f64 = p.iter().zip(a).map(|(pi, ai)| (pi / (ai - lam)).powi(2)).sum();
        return lam.abs() * s.sqrt();
    }

    // Inside: lambda in (0, amin). Solve for nu = amin - lambda so that
    // a_i - lambda = (a_i - amin) + nu keeps its relative precision near amin.
    let gaps: Vec<f64> = a.iter().map(|&ai| ai - amin).collect();
    let secular_nu = |nu: f64| -> f64 { p.iter().zip(a).zip(&gaps).map(|((pi, ai), gap)| ai * pi * pi / ((gap + nu) * (gap + nu))).sum() };
    let (mut lo, mut hi) = (0.0, amin);
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if secular_nu(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let nu = 0.5 * (lo + hi);
    let lam = amin - nu;
    let s: f64 = p.iter().zip(&gaps).map(|(pi, gap)| (pi / (gap + nu)).powi(2)).sum();
    -(lam.abs() * s.sqrt())
}

/// Signed Euclidean distance `max_{|l|=1} <l,x> - rho_E(l)`: the distance to
/// `E` for points outside, minus the distance to the boundary inside.
pub fn point_ellipsoid_distance(x: &DVector<f64>, e: &Ellipsoid) -> f64 {
    let eig = SymEig::new(e.shape());
    let p = eig.vectors.transpose() * (x - e.center());
    let a: Vec<f64> = eig.values.iter().map(|v| v.max(f64::MIN_POSITIVE)).collect();
    signed_distance_canonical(p.as_slice(), &a)
}

/// `max_{x in inner} (x - q_o)' Q_o^-1 (x - q_o)`.
///
/// With `x = q_i + L z`, `|z| <= 1` and `L = Q_i^(1/2)` this is the
/// maximisation of a convex quadratic over the unit ball, solved exactly in
/// the eigenbasis of `L Q_o^-1 L` with a secular equation for the multiplier
/// (including the hard case).
pub fn max_quadratic_over(inner: &Ellipsoid, outer: &Ellipsoid) -> Result<f64> {
    if inner.dim() != outer.dim() {
        return Err(Error::DimensionMismatch("containment test between different dimensions".into()));
    }
    let chol = Cholesky::new(outer.shape().clone())
        .ok_or_else(|| Error::InvalidEllipsoid("outer ellipsoid must be positive definite".into()))?;
    let w = chol.inverse();
    let l = linalg::sym_sqrt(inner.shape());
    let d = inner.center() - outer.center();
    let wd = &w * &d;
    let h = linalg::symmetrized(&(&l * &w * &l));
    let g = &l * &wd;
    let c = d.dot(&wd);

    let eig = SymEig::new(&h);
    let gt = eig.vectors.transpose() * g;
    let hs = eig.values.as_slice();
    let hmax = eig.max();
    let gnorm = gt.norm();
    let scale = hmax.abs().max(1.0);
    let tie = |hi: f64| hi >= hmax - 1e-12 * scale;

    let tie_mass: f64 = gt.iter().zip(hs).filter(|(_, &hi)| tie(hi)).map(|(gi, _)| gi * gi).sum();
    if tie_mass.sqrt() <= 1e-13 * scale.max(gnorm) {
        let mut rest = 0.0;
        let mut value = c;
        for (&gi, &hi) in gt.iter().zip(hs) {
            if tie(hi) {
                continue;
            }
            let zi = gi / (hmax - hi);
            rest += zi * zi;
            value += hi * zi * zi + 2.0 * gi * zi;
        }
        if rest <= 1.0 {
            return Ok(value + hmax * (1.0 - rest));
        }
    }

    // Solve for mu = lambda - hmax so that lambda - h_i = (hmax - h_i) + mu keeps
    // full relative precision when the root sits next to the top eigenvalue.
    let gaps: Vec<f64> = hs.iter().map(|&hv| hmax - hv).collect();
    let psi = |mu: f64| -> f64 { gt.iter().zip(&gaps).map(|(gi, gap)| (gi / (gap + mu)).powi(2)).sum() };
    let (mut lo, mut hi) = (0.0, gnorm);
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if psi(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let z: Vec<f64> = gt.iter().zip(&gaps).map(|(gi, gap)| gi / (gap + hi)).collect();
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut value = c;
    for ((&gi, &hv), zi) in gt.iter().zip(hs).zip(&z) {
        let zi = if norm > 0.0 { zi / norm } else { *zi };
        value += hv * zi * zi + 2.0 * gi * zi;
    }
    Ok(value)
}

/// `inner ⊆ outer` up to the shared containment tolerance.
pub fn contains_ellipsoid(inner: &Ellipsoid, outer: &Ellipsoid) -> bool {
    match max_quadratic_over(inner, outer) {
        Ok(v) => v <= 1.0 + TOL.containment,
        Err(_) => false,
    }
}

struct FusionCandidate {
    log_volume: f64,
    ellipsoid: Ellipsoid,
}

fn fusion_candidate(
    alpha: f64,
    w1: &DMatrix<f64>,
    w2: &DMatrix<f64>,
    e1: &Ellipsoid,
    e2: &Ellipsoid,
) -> Option<FusionCandidate> {
    let n = e1.dim();
    let w = linalg::symmetrized(&(w1 * alpha + w2 * (1.0 - alpha)));
    let eig = SymEig::new(&w);
    if eig.min() <= 0.0 {
        return None;
    }
    let x = eig.map(|v| 1.0 / v);
    let x_isqrt = eig.map(f64::sqrt);
    let center = &x * (w1 * e1.center() * alpha + w2 * e2.center() * (1.0 - alpha));

    // Largest s with E(c, s^2 X) inside E_i: in coordinates y = X^(-1/2)(x - c)
    // this is the inradius of E_i about the origin.
    let mut s = f64::INFINITY;
    for ei in [e1, e2] {
        let q = &x_isqrt * (ei.center() - &center);
        let shape = linalg::symmetrized(&(&x_isqrt * ei.shape() * &x_isqrt));
        let eig_i = SymEig::new(&shape);
        let p = eig_i.vectors.transpose() * q;
        let a: Vec<f64> = eig_i.values.iter().map(|v| v.max(f64::MIN_POSITIVE)).collect();
        let sd = -signed_distance_canonical(p.as_slice(), &a);
        s = s.min(sd);
    }
    s *= 1.0 - 1e-12;
    if !(s > 1e-8) {
        return None;
    }
    let log_det_x: f64 = -eig.values.iter().map(|v| v.ln()).sum::<f64>();
    let log_volume = n as f64 * s.ln() + 0.5 * log_det_x;
    let ellipsoid = Ellipsoid::new(center, linalg::symmetrized(&(x * (s * s)))).ok()?;
    Some(FusionCandidate { log_volume, ellipsoid })
}

/// Large-volume ellipsoid inside `e1 ∩ e2`.
///
/// Searches the family `X(α)^-1 ∝ α Q1^-1 + (1-α) Q2^-1` with the
/// information-weighted center; for each α the scale is the largest one
/// keeping the ellipsoid inside both operands, so every candidate is a
/// guaranteed subset. Volume is maximised over α by a coarse scan followed by
/// golden-section refinement (bracket tolerance 1e-6). Returns `None` when
/// no member of the family has positive volume.
pub fn fusion_intersect_ia(e1: &Ellipsoid, e2: &Ellipsoid) -> Result<Option<Ellipsoid>> {
    if e1.dim() != e2.dim() {
        return Err(Error::DimensionMismatch("fusion of ellipsoids of different dimension".into()));
    }
    let inv = |e: &Ellipsoid| {
        Cholesky::new(e.shape().clone())
            .map(|c| c.inverse())
            .ok_or_else(|| Error::InvalidEllipsoid("fusion operands must be positive definite".into()))
    };
    let w1 = inv(e1)?;
    let w2 = inv(e2)?;
    if e1.dim() == 1 {
        // The family sweeps every centre between the operands, so its optimum
        // is the intersection interval itself.
        let (r1, r2) = (e1.shape()[(0, 0)].sqrt(), e2.shape()[(0, 0)].sqrt());
        let lo = (e1.center()[0] - r1).max(e2.center()[0] - r2);
        let hi = (e1.center()[0] + r1).min(e2.center()[0] + r2);
        if !(hi - lo > 2e-8) {
            return Ok(None);
        }
        let half = 0.5 * (hi - lo);
        return Ok(Some(Ellipsoid::new(DVector::from_element(1, 0.5 * (lo + hi)), DMatrix::from_element(1, 1, half * half))?));
    }
    let eval = |alpha: f64| fusion_candidate(alpha, &w1, &w2, e1, e2);
    let score = |c: &Option<FusionCandidate>| c.as_ref().map_or(f64::NEG_INFINITY, |c| c.log_volume);

    const GRID: usize = 20;
    let mut best_alpha = 0.0;
    let mut best = eval(0.0);
    for i in 1..=GRID {
        let alpha = i as f64 / GRID as f64;
        let cand = eval(alpha);
        if score(&cand) > score(&best) {
            best = cand;
            best_alpha = alpha;
        }
    }
    if best.is_none() {
        return Ok(None);
    }

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = (best_alpha - 1.0 / GRID as f64).max(0.0);
    let mut b = (best_alpha + 1.0 / GRID as f64).min(1.0);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = eval(c);
    let mut fd = eval(d);
    while b - a > 1e-6 {
        if score(&fc) >= score(&fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = eval(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = eval(d);
        }
    }
    for cand in [fc, fd] {
        if score(&cand) > score(&best) {
            best = cand;
        }
    }
    Ok(best.map(|c| c.ellipsoid))
}

/// Inner approximation of the erosion `E ⊖ B(r)` by uniform scaling:
/// `E(q, c^2 Q)` with `c = 1 - r / sqrt(λ_min(Q))`, or `None` when `c <= 0`.
///
/// For any unit `l`: `c sqrt(l'Ql) + r <= sqrt(l'Ql)` because
/// `sqrt(l'Ql) >= sqrt(λ_min)`, so the result grown by the ball stays in `E`.
pub fn erode_by_ball(e: &Ellipsoid, r: f64) -> Result<Option<Ellipsoid>> {
    if !(r >= 0.0) {
        return Err(Error::InvalidArgument(format!("erosion radius must be >= 0, got {r}")));
    }
    if r == 0.0 {
        return Ok(Some(e.clone()));
    }
    let lmin = SymEig::new(e.shape()).min();
    if lmin <= 0.0 {
        return Ok(None);
    }
    let c = 1.0 - r / lmin.sqrt();
    if c <= 0.0 {
        return Ok(None);
    }
    Ok(Some(e.scaled(c)))
}

/// Upper bound on the volume lost when `fused` replaces `e1 ∩ e2`.
pub fn error_gap_estimate(e1: &Ellipsoid, e2: &Ellipsoid, fused: &Ellipsoid) -> f64 {
    (volume(e1).min(volume(e2)) - volume(fused)).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use std::f64::consts::PI;

    fn planar_k() -> Ellipsoid {
        Ellipsoid::new(DVector::zeros(2), DMatrix::from_diagonal(&dvector![0.25, 4.0])).unwrap()
    }

    #[test]
    fn membership_examples() {
        let b = Ellipsoid::unit_ball(2);
        assert!(b.contains(&dvector![0.0, 0.0]).unwrap());
        assert!(b.contains(&dvector![1.0, 0.0]).unwrap());
        assert!(!b.contains(&dvector![1.0 + 1e-6, 0.0]).unwrap());
        let k = planar_k();
        assert!((k.quadratic_form(&dvector![0.3, -0.7]).unwrap() - 0.4825).abs() < 1e-12);
        assert!(k.contains(&dvector![0.3, -0.7]).unwrap());
    }

    #[test]
    fn rejects_asymmetric_and_indefinite() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(Ellipsoid::new(DVector::zeros(2), asym).is_err());
        let indef = DMatrix::from_diagonal(&dvector![1.0, -1.0]);
        assert!(Ellipsoid::new_degenerate(DVector::zeros(2), indef).is_err());
        let singular = DMatrix::from_diagonal(&dvector![1.0, 0.0]);
        assert!(Ellipsoid::new(DVector::zeros(2), singular.clone()).is_err());
        assert!(Ellipsoid::new_degenerate(DVector::zeros(2), singular).unwrap().is_degenerate());
    }

    #[test]
    fn degenerate_membership() {
        let p = Ellipsoid::point(dvector![1.0, 2.0]);
        assert!(p.contains(&dvector![1.0, 2.0]).unwrap());
        assert!(!p.contains(&dvector![1.0, 2.1]).unwrap());
        let seg = Ellipsoid::new_degenerate(DVector::zeros(2), DMatrix::from_diagonal(&dvector![1.0, 0.0])).unwrap();
        assert!(seg.contains(&dvector![0.5, 0.0]).unwrap());
        assert!(!seg.contains(&dvector![0.5, 0.1]).unwrap());
    }

    #[test]
    fn support_function_examples() {
        let b = Ellipsoid::unit_ball(2);
        assert_eq!(b.support_function(&dvector![1.0, 0.0]), 1.0);
        assert_eq!(planar_k().support_function(&dvector![0.0, 1.0]), 2.0);
        assert_eq!(planar_k().support_function(&dvector![0.0, 0.0]), 0.0);
    }

    #[test]
    fn support_vector_examples() {
        let b = Ellipsoid::unit_ball(2);
        assert!((b.support_vector(&dvector![1.0, 0.0]).unwrap() - dvector![1.0, 0.0]).norm() < 1e-15);
        assert!((b.support_vector(&dvector![2.0, 0.0]).unwrap() - dvector![1.0, 0.0]).norm() < 1e-15);
        let v = planar_k().support_vector(&dvector![1.0, 0.0]).unwrap();
        assert!((v - dvector![0.5, 0.0]).norm() < 1e-15);
        let seg = Ellipsoid::new_degenerate(DVector::zeros(2), DMatrix::from_diagonal(&dvector![1.0, 0.0])).unwrap();
        assert!(matches!(seg.support_vector(&dvector![0.0, 1.0]), Err(Error::DegenerateDirection(_))));
    }

    #[test]
    fn distance_examples() {
        let b = Ellipsoid::unit_ball(2);
        assert!((point_ellipsoid_distance(&dvector![2.0, 0.0], &b) - 1.0).abs() < 1e-12);
        assert!((point_ellipsoid_distance(&dvector![0.0, 0.0], &b) + 1.0).abs() < 1e-12);
        let e = Ellipsoid::new(DVector::zeros(2), DMatrix::from_diagonal(&dvector![4.0, 1.0])).unwrap();
        assert!((point_ellipsoid_distance(&dvector![3.0, 0.0], &e) - 1.0).abs() < 1e-12);
        // Inside, nearest boundary point is along the short axis.
        assert!((point_ellipsoid_distance(&dvector![0.0, 0.0], &e) + 1.0).abs() < 1e-12);
        assert!((point_ellipsoid_distance(&dvector![1.0, 0.0], &e) + (2.0f64 / 3.0).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn containment_examples() {
        let b = Ellipsoid::unit_ball(2);
        assert!(contains_ellipsoid(&b.scaled(0.5), &b));
        assert!(!contains_ellipsoid(&b, &b.scaled(0.5)));
        let touching = Ellipsoid::ball(dvector![0.5, 0.0], 0.5).unwrap();
        assert!((max_quadratic_over(&touching, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!(contains_ellipsoid(&touching, &b));
        let shifted = Ellipsoid::ball(dvector![0.51, 0.0], 0.5).unwrap();
        assert!(!contains_ellipsoid(&shifted, &b));
    }

    #[test]
    fn containment_with_point_inner() {
        let b = Ellipsoid::unit_ball(2);
        assert!(contains_ellipsoid(&Ellipsoid::point(dvector![0.3, 0.3]), &b));
        assert!(!contains_ellipsoid(&Ellipsoid::point(dvector![1.3, 0.3]), &b));
    }

    #[test]
    fn fusion_examples() {
        let b = Ellipsoid::unit_ball(2);
        let f = fusion_intersect_ia(&b, &b).unwrap().unwrap();
        assert!((f.shape() - b.shape()).amax() < 1e-9);
        let f = fusion_intersect_ia(&b, &b.scaled(2.0)).unwrap().unwrap();
        assert!((f.shape() - b.shape()).amax() < 1e-9);
        assert!(f.center().norm() < 1e-9);
        let f = fusion_intersect_ia(&b.scaled(2.0), &b).unwrap().unwrap();
        assert!((f.shape() - b.shape()).amax() < 1e-9);
        let far = Ellipsoid::ball(dvector![3.0, 0.0], 1.0).unwrap();
        assert!(fusion_intersect_ia(&b, &far).unwrap().is_none());
        assert!(fusion_intersect_ia(&b, &Ellipsoid::unit_ball(3)).is_err());
    }

    #[test]
    fn fusion_in_one_dimension_is_the_intersection() {
        let a = Ellipsoid::new(dvector![0.0], dmatrix![1.0]).unwrap();
        let b = Ellipsoid::new(dvector![1.5], dmatrix![1.0]).unwrap();
        let f = fusion_intersect_ia(&a, &b).unwrap().unwrap();
        assert!((f.center()[0] - 0.75).abs() < 1e-15);
        assert!((f.shape()[(0, 0)] - 0.0625).abs() < 1e-15);
        let c = Ellipsoid::new(dvector![3.0], dmatrix![1.0]).unwrap();
        assert!(fusion_intersect_ia(&a, &c).unwrap().is_none());
    }

    #[test]
    fn fusion_offset_balls_inside_both() {
        let e1 = Ellipsoid::ball(dvector![-0.5, 0.0], 1.0).unwrap();
        let e2 = Ellipsoid::ball(dvector![0.5, 0.0], 1.0).unwrap();
        let f = fusion_intersect_ia(&e1, &e2).unwrap().unwrap();
        assert!(contains_ellipsoid(&f, &e1));
        assert!(contains_ellipsoid(&f, &e2));
        // Lens area of two unit circles at distance 1.
        let lens = 2.0 * (0.5f64).acos() - 0.5 * (3.0f64).sqrt();
        assert!(f.volume() <= lens);
        assert!(f.volume() > 0.5 * lens);
    }

    #[test]
    fn erosion_examples() {
        let b = Ellipsoid::unit_ball(2);
        let e = erode_by_ball(&b, 0.5).unwrap().unwrap();
        assert!((e.shape() - DMatrix::identity(2, 2) * 0.25).amax() < 1e-15);
        assert_eq!(erode_by_ball(&planar_k(), 0.0).unwrap().unwrap(), planar_k());
        let e = erode_by_ball(&planar_k(), 0.1).unwrap().unwrap();
        let want = DMatrix::from_diagonal(&dvector![0.16, 2.56]);
        assert!((e.shape() - want).amax() < 1e-12);
        assert!(erode_by_ball(&b, 1.0).unwrap().is_none());
        assert!(erode_by_ball(&b, -0.1).is_err());
    }

    #[test]
    fn volume_examples() {
        assert!((Ellipsoid::unit_ball(2).volume() - PI).abs() < 1e-14);
        assert!((planar_k().volume() - PI).abs() < 1e-14);
        assert_eq!(Ellipsoid::point(dvector![1.0, 1.0]).volume(), 0.0);
        assert!((unit_ball_volume(3) - 4.0 / 3.0 * PI).abs() < 1e-14);
        assert_eq!(unit_ball_volume(1), 2.0);
    }

    #[test]
    fn mvie_box_examples() {
        let r = HyperRectangle::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(mvie_box(&r), Ellipsoid::unit_ball(2));
        let r = HyperRectangle::new(vec![0.5, -0.5, -0.5, -0.5], vec![5.4, 0.5, 0.5, 0.5]).unwrap();
        let e = mvie_box(&r);
        assert!((e.center() - dvector![2.95, 0.0, 0.0, 0.0]).norm() < 1e-15);
        let want = DMatrix::from_diagonal(&dvector![2.45 * 2.45, 0.25, 0.25, 0.25]);
        assert!((e.shape() - want).amax() < 1e-14);
        let r = HyperRectangle::new(vec![0.0, 0.0], vec![2.0, 4.0]).unwrap();
        let e = mvie_box(&r);
        assert_eq!(e.center(), &dvector![1.0, 2.0]);
        assert_eq!(e.shape(), &DMatrix::from_diagonal(&dvector![1.0, 4.0]));
        let flat = HyperRectangle::new(vec![0.0, 1.0], vec![2.0, 1.0]).unwrap();
        assert!(mvie_box(&flat).is_degenerate());
        assert!(HyperRectangle::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn error_gap_examples() {
        let b = Ellipsoid::unit_ball(2);
        assert_eq!(error_gap_estimate(&b, &b, &b), 0.0);
        let big = b.scaled(2.0);
        assert!(error_gap_estimate(&b, &big, &b).abs() < 1e-12);
    }

    #[test]
    fn json_roundtrip_is_bit_exact() {
        let e = Ellipsoid::new(
            dvector![0.1, -1.0 / 3.0],
            DMatrix::from_row_slice(2, 2, &[std::f64::consts::E, 0.1 + 0.2, 0.1 + 0.2, 7.0 / 9.0]),
        )
        .unwrap();
        let s = serde_json::to_string(&e).unwrap();
        assert!(s.starts_with("{\"center\":"));
        let back: Ellipsoid = serde_json::from_str(&s).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn max_quadratic_with_clustered_eigenvalues() {
        // Nearly equal shapes with a tiny offset: the multiplier sits within
        // ~1e-11 of the top eigenvalue.
        let outer = Ellipsoid::unit_ball(2);
        let inner = Ellipsoid::new(dvector![3e-9, -1e-10], dmatrix![1.0 + 3e-6, 1e-7; 1e-7, 1.0 + 2.7e-6]).unwrap();
        let l = crate::linalg::sym_sqrt(inner.shape());
        let grid = (0..2_000_000)
            .map(|i| {
                let t = i as f64 * std::f64::consts::TAU / 2_000_000.0;
                let x = inner.center() + &l * dvector![t.cos(), t.sin()];
                x.norm_squared()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        let exact = max_quadratic_over(&inner, &outer).unwrap();
        assert!(exact >= grid - 1e-13 && exact - grid < 1e-11, "{exact} vs {grid}");
    }
}
