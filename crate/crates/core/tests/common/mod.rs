#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use safekernel::{Ellipsoid, InputBounds, LtiSystem};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    gaussian_matrix(n, n, rng).qr().q()
}

/// Symmetric positive definite matrix with eigenvalues in `[lo, hi]`.
pub fn random_spd(n: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let q = random_orthogonal(n, rng);
    let d = DVector::from_fn(n, |_, _| lo + (hi - lo) * rng.random::<f64>());
    let m = &q * DMatrix::from_diagonal(&d) * q.transpose();
    (&m + m.transpose()) * 0.5
}

pub fn random_ellipsoid(n: usize, center_spread: f64, rng: &mut ChaCha8Rng) -> Ellipsoid {
    let c = DVector::from_fn(n, |_, _| center_spread * (2.0 * rng.random::<f64>() - 1.0));
    Ellipsoid::new(c, random_spd(n, 0.05, 2.0, rng)).unwrap()
}

pub fn random_unit(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    safekernel::ellipsoid::random_unit(n, rng)
}

pub fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

/// Exact backward reach interval of `x' = a x + b u + g v` from the target
/// interval `(c, r)` after time `s`, with `u in [mu - ru, mu + ru]` and
/// `v in [nu - rv, nu + rv]`.
pub fn interval_reach(a: f64, b: f64, g: f64, (mu, ru): (f64, f64), (nu, rv): (f64, f64), (c, r): (f64, f64), s: f64) -> (f64, f64) {
    let decay = (-a * s).exp();
    let integral = if a.abs() < 1e-12 { s } else { (1.0 - decay) / a };
    (decay * c - (b * mu + g * nu) * integral, decay * r + (b.abs() * ru - g.abs() * rv) * integral)
}

/// Interval version of the whole recursion, in closed form.
pub struct Interval1d {
    pub a: f64,
    pub b: f64,
    pub g: f64,
    pub u: (f64, f64),
    pub v: (f64, f64),
    pub k: (f64, f64),
}

impl Interval1d {
    pub fn random(r: &mut ChaCha8Rng) -> Self {
        Self {
            a: 2.0 * r.random::<f64>() - 1.0,
            b: 0.5 + r.random::<f64>(),
            g: 0.5 * r.random::<f64>(),
            u: (0.2 * (2.0 * r.random::<f64>() - 1.0), 0.5 + r.random::<f64>()),
            v: (0.0, 0.1 * r.random::<f64>()),
            k: (2.0 * r.random::<f64>() - 1.0, 1.0 + r.random::<f64>()),
        }
    }

    pub fn problem(&self) -> (LtiSystem, InputBounds, Ellipsoid) {
        let sys = LtiSystem::new(scalar(self.a), scalar(self.b), scalar(self.g)).unwrap();
        let bounds = InputBounds::new(
            Ellipsoid::new(DVector::from_element(1, self.u.0), scalar(self.u.1 * self.u.1)).unwrap(),
            Ellipsoid::new_degenerate(DVector::from_element(1, self.v.0), scalar(self.v.1 * self.v.1)).unwrap(),
        )
        .unwrap();
        let k = Ellipsoid::new(DVector::from_element(1, self.k.0), scalar(self.k.1 * self.k.1)).unwrap();
        (sys, bounds, k)
    }

    /// Centre and radius of `K_k` for `k = 0..=n`; `None` once the chain is dropped.
    pub fn kernel(&self, tau: f64, n: usize) -> Vec<Option<(f64, f64)>> {
        let (a, b, g) = (self.a, self.b, self.g);
        let m = a.abs() * (self.k.0.abs() + self.k.1) + b.abs() * (self.u.0.abs() + self.u.1) + g.abs() * (self.v.0.abs() + self.v.1);
        let delta = tau / n as f64;
        let eroded = (self.k.0, self.k.1 - m * delta);
        let mut out = vec![None; n + 1];
        out[n] = Some(eroded);
        for k in (1..=n).rev() {
            let (c, r) = out[k].unwrap();
            let (sc, sr) = interval_reach(a, b, g, self.u, self.v, (c, r), delta);
            if sr <= 0.0 {
                break;
            }
            let lo = (sc - sr).max(eroded.0 - eroded.1);
            let hi = (sc + sr).min(eroded.0 + eroded.1);
            if hi <= lo {
                break;
            }
            out[k - 1] = Some((0.5 * (lo + hi), 0.5 * (hi - lo)));
        }
        out
    }
}
