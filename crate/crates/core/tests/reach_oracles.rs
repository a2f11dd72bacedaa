mod common;

use common::*;
use nalgebra::DVector;
use rand::Rng;
use safekernel::linalg::matrix_exponential;
use safekernel::reach::{reach_tube_segment, InputBounds, LtiSystem};
use safekernel::Ellipsoid;

#[test]
fn one_dimensional_segments_match_the_interval_formula() {
    let mut r = rng(21);
    for _ in 0..100 {
        let a = 2.0 * r.random::<f64>() - 1.0;
        let b = (0.2 + 1.8 * r.random::<f64>()) * if r.random::<bool>() { 1.0 } else { -1.0 };
        let g = 2.0 * r.random::<f64>() - 1.0;
        let u = (0.3 * (2.0 * r.random::<f64>() - 1.0), 0.2 + r.random::<f64>());
        let v = (0.05 * (2.0 * r.random::<f64>() - 1.0), 0.05 * r.random::<f64>());
        let target = (2.0 * r.random::<f64>() - 1.0, 0.5 + r.random::<f64>());
        let delta = 0.02 + 0.2 * r.random::<f64>();
        let sys = LtiSystem::new(scalar(a), scalar(b), scalar(g)).unwrap();
        let bounds = InputBounds::new(
            Ellipsoid::new(DVector::from_element(1, u.0), scalar(u.1 * u.1)).unwrap(),
            Ellipsoid::new(DVector::from_element(1, v.0), scalar(v.1 * v.1)).unwrap(),
        )
        .unwrap();
        let t = Ellipsoid::new(DVector::from_element(1, target.0), scalar(target.1 * target.1)).unwrap();
        let seg = reach_tube_segment(&sys, &t, &bounds, (0.0, delta), delta / 10.0, &DVector::from_element(1, 1.0), 0).unwrap();
        let (c, rad) = interval_reach(a, b, g, u, v, target, delta);
        let start = seg.start();
        assert!((start.center()[0] - c).abs() < 1e-6, "center {} vs {c}", start.center()[0]);
        assert!((start.shape()[(0, 0)].sqrt() - rad).abs() < 1e-6, "radius {} vs {rad}", start.shape()[(0, 0)].sqrt());
    }
}

fn support(e: &Ellipsoid, l: &DVector<f64>) -> f64 {
    e.support_function(l)
}

/// `rho_T(e^{-A' d} l) + int_0^d rho_U(-B' e^{-A' s} l) - rho_V(G' e^{-A' s} l) ds`,
/// an upper bound on the support function of the robust backward reach set.
fn support_bound(sys: &LtiSystem, target: &Ellipsoid, bounds: &InputBounds, delta: f64, l: &DVector<f64>) -> f64 {
    let at = sys.a().transpose();
    let integrand = |s: f64| {
        let m = matrix_exponential(&at, -s).unwrap() * l;
        support(&bounds.u, &(-(sys.b().transpose() * &m))) - support(&bounds.v, &(sys.g().transpose() * &m))
    };
    let n = 400;
    let h = delta / n as f64;
    let mut integral = integrand(0.0) + integrand(delta);
    for i in 1..n {
        integral += integrand(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    integral *= h / 3.0;
    support(target, &(matrix_exponential(&at, -delta).unwrap() * l)) + integral
}

fn random_case(seed: u64, n: usize, with_disturbance: bool) -> (LtiSystem, Ellipsoid, InputBounds) {
    let mut r = rng(seed);
    let a = gaussian_matrix(n, n, &mut r) * 0.8;
    let b = gaussian_matrix(n, 1 + (seed as usize % 2), &mut r);
    let g = gaussian_matrix(n, 1, &mut r);
    let sys = LtiSystem::new(a, b.clone(), g).unwrap();
    let m = b.ncols();
    let u = Ellipsoid::new(DVector::zeros(m), random_spd(m, 0.2, 1.0, &mut r)).unwrap();
    let v = if with_disturbance {
        Ellipsoid::new(DVector::zeros(1), scalar(0.01)).unwrap()
    } else {
        Ellipsoid::point(DVector::zeros(1))
    };
    let target = Ellipsoid::new(DVector::from_fn(n, |_, _| 0.2 * r.random::<f64>()), random_spd(n, 0.5, 2.0, &mut r)).unwrap();
    (sys, target, InputBounds::new(u, v).unwrap())
}

#[test]
fn internal_tube_support_stays_below_the_quadrature_bound() {
    for seed in 0..30 {
        let n = 2 + seed as usize % 2;
        let (sys, target, bounds) = random_case(seed, n, seed % 3 != 0);
        let mut r = rng(1000 + seed);
        let l_tau = random_unit(n, &mut r);
        let delta = 0.2;
        let seg = reach_tube_segment(&sys, &target, &bounds, (0.0, delta), 0.002, &l_tau, 0).unwrap();
        let start = seg.start();
        for _ in 0..40 {
            let l = random_unit(n, &mut r);
            let bound = support_bound(&sys, &target, &bounds, delta, &l);
            assert!(support(&start, &l) <= bound + 1e-6, "seed {seed}: {} > {bound}", support(&start, &l));
        }
    }
}

#[test]
fn internal_tube_is_tight_along_the_adjoint_direction() {
    for seed in 0..30 {
        let n = 2 + seed as usize % 2;
        let (sys, target, bounds) = random_case(seed, n, seed % 2 == 0);
        let mut r = rng(2000 + seed);
        let l_tau = random_unit(n, &mut r);
        let delta = 0.2;
        let seg = reach_tube_segment(&sys, &target, &bounds, (0.0, delta), 0.002, &l_tau, 0).unwrap();
        let l0 = &seg.ell[0];
        let want = support_bound(&sys, &target, &bounds, delta, l0);
        let got = support(&seg.start(), l0);
        assert!((got - want).abs() < 1e-5 * want.abs().max(1.0), "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn tube_slices_interpolate_between_grid_points() {
    let (sys, target, bounds) = random_case(3, 3, true);
    let seg = reach_tube_segment(&sys, &target, &bounds, (0.0, 0.1), 0.01, &random_unit(3, &mut rng(3)), 0).unwrap();
    for (i, &t) in seg.grid.iter().enumerate() {
        let s = seg.slice_at(t).ellipsoid();
        assert!((s.center() - &seg.centers[i]).amax() < 1e-12);
        assert!((s.shape() - &seg.shapes[i]).amax() < 1e-9 * seg.shapes[i].amax());
    }
    let end = seg.slice_at(0.1).ellipsoid();
    assert!((end.shape() - target.shape()).amax() < 1e-9);
}
