mod common;

use common::{gram_kernel, kernel_strategy, local_state, max_abs_diff, random_state};
use nalgebra::DMatrix;
use phononflux::lattice::CMat;
use phononflux::propagator::{green_function, horizon, propagator_symbol, spectral_energy};
use phononflux::{dispersion, Dynamics, FieldState, InteractionMatrix, TorusGrid};
use proptest::prelude::*;

/// `-Σ_z V(z) u(x - z)` in real space.
fn force(v: &InteractionMatrix, grid: TorusGrid, u: &[f64]) -> Vec<f64> {
    let n = v.components();
    let mut out = vec![0.0; u.len()];
    for x in 0..grid.len() {
        let xc = grid.signed_coords(x);
        for (z, m) in v.support() {
            let y: Vec<i64> = xc.iter().zip(z).map(|(a, b)| a - b).collect();
            let y = grid.wrap(&y);
            for a in 0..n {
                for b in 0..n {
                    out[x * n + a] -= m[(a, b)] * u[y * n + b];
                }
            }
        }
    }
    out
}

fn rk4(v: &InteractionMatrix, y: &FieldState, t: f64, steps: usize) -> FieldState {
    let g = y.grid();
    let dt = t / steps as f64;
    let (mut u, mut p) = (y.u.clone(), y.v.clone());
    let axpy = |a: &[f64], s: f64, b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + s * y).collect() };
    for _ in 0..steps {
        let k1u = p.clone();
        let k1v = force(v, g, &u);
        let u2 = axpy(&u, 0.5 * dt, &k1u);
        let p2 = axpy(&p, 0.5 * dt, &k1v);
        let k2u = p2.clone();
        let k2v = force(v, g, &u2);
        let u3 = axpy(&u, 0.5 * dt, &k2u);
        let p3 = axpy(&p, 0.5 * dt, &k2v);
        let k3u = p3.clone();
        let k3v = force(v, g, &u3);
        let u4 = axpy(&u, dt, &k3u);
        let p4 = axpy(&p, dt, &k3v);
        let k4u = p4.clone();
        let k4v = force(v, g, &u4);
        for i in 0..u.len() {
            u[i] += dt / 6.0 * (k1u[i] + 2.0 * k2u[i] + 2.0 * k3u[i] + k4u[i]);
            p[i] += dt / 6.0 * (k1v[i] + 2.0 * k2v[i] + 2.0 * k3v[i] + k4v[i]);
        }
    }
    FieldState::new(g, y.components(), u, p).unwrap()
}

fn rel_diff(a: &FieldState, b: &FieldState) -> f64 {
    let scale = a.sup_norm().max(b.sup_norm()).max(1e-300);
    max_abs_diff(&a.u, &b.u).max(max_abs_diff(&a.v, &b.v)) / scale
}

#[test]
fn spectral_flow_matches_runge_kutta() {
    let coeffs = [0.9, 0.2, -0.1, 0.7, 0.4, -0.3, 0.1, 0.5];
    for (v, n) in [
        (InteractionMatrix::elastic(1, 1.0).unwrap(), 32),
        (gram_kernel(1, 2, &coeffs, 0.6), 24),
        (InteractionMatrix::elastic(2, 0.7).unwrap(), 12),
    ] {
        let g = TorusGrid::new(v.dim(), n).unwrap();
        let y0 = random_state(g, v.components(), 3);
        let dy = Dynamics::new(v.clone(), g).unwrap();
        let exact = dy.evolve(&y0, 10.0).unwrap();
        let oracle = rk4(&v, &y0, 10.0, 4000);
        assert!(rel_diff(&exact, &oracle) < 1e-6, "{}", rel_diff(&exact, &oracle));
    }
}

#[test]
fn green_function_propagates_point_sources() {
    let v = InteractionMatrix::elastic(1, 1.0).unwrap();
    let g = TorusGrid::new(1, 64).unwrap();
    let data = dispersion(&v, g, None).unwrap();
    let gf = green_function(&data, 3.0, 31).unwrap();
    let dy = Dynamics::new(v.clone(), g).unwrap();
    let mut y0 = FieldState::zeros(g, 1);
    y0.u[0] = 1.0;
    let y = dy.evolve(&y0, 3.0).unwrap();
    for x in 0..g.len() {
        let z = g.signed_coords(x);
        let m: DMatrix<f64> = gf.get(&z);
        assert!((m[(0, 0)] - y.u[x]).abs() < 1e-12);
        assert!((m[(1, 0)] - y.v[x]).abs() < 1e-12);
    }
}

#[test]
fn light_cone_leakage_is_small() {
    let v = InteractionMatrix::elastic(1, 1.0).unwrap();
    let g = TorusGrid::new(1, 512).unwrap();
    let data = dispersion(&v, g, None).unwrap();
    assert!(horizon(&data) > 100.0);
    let dy = Dynamics::new(v, g).unwrap();
    let y0 = local_state(g, 1, 2, 9);
    let y = dy.evolve(&y0, 20.0).unwrap();
    // Beyond distance 2 + 3t the solution is exponentially small.
    let far = (0..g.len())
        .filter(|&x| g.signed_coords(x)[0].abs() > 2 + 60)
        .map(|x| y.u[x].abs().max(y.v[x].abs()))
        .fold(0.0, f64::max);
    assert!(far < 1e-12, "{far}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn symbol_satisfies_group_law(v in kernel_strategy(2, 2), s in -5.0f64..5.0, t in -5.0f64..5.0) {
        let g = TorusGrid::new(v.dim(), 6).unwrap();
        let data = dispersion(&v, g, None).unwrap();
        let (gs, gt, gst) = (propagator_symbol(&data, s), propagator_symbol(&data, t), propagator_symbol(&data, s + t));
        for k in 0..g.len() {
            let prod = gt.node(k) * gs.node(k);
            let err = (prod - gst.node(k)).iter().map(|c| c.norm()).fold(0.0, f64::max);
            prop_assert!(err < 1e-9);
        }
    }

    #[test]
    fn symbol_preserves_energy_form(v in kernel_strategy(2, 2), t in -20.0f64..20.0) {
        let n = v.components();
        let g = TorusGrid::new(v.dim(), 6).unwrap();
        let data = dispersion(&v, g, None).unwrap();
        let gt = propagator_symbol(&data, t);
        for k in 0..g.len() {
            let mut e = CMat::zeros(2 * n, 2 * n);
            e.view_mut((0, 0), (n, n)).copy_from(&data.node(k).symbol);
            e.view_mut((n, n), (n, n)).fill_with_identity();
            let gk = gt.node(k);
            let defect = gk.adjoint() * &e * gk - &e;
            let scale = e.iter().map(|c| c.norm()).fold(1.0, f64::max);
            prop_assert!(defect.iter().map(|c| c.norm()).fold(0.0, f64::max) < 1e-9 * scale);
        }
    }

    #[test]
    fn evolution_is_reversible_and_conserves_energy(v in kernel_strategy(2, 2), seed in 0u64..1000, t in 0.0f64..30.0) {
        let g = TorusGrid::new(v.dim(), 8).unwrap();
        let dy = Dynamics::new(v, g).unwrap();
        let y0 = random_state(g, dy.interaction().components(), seed);
        let y = dy.evolve(&y0, t).unwrap();
        let back = dy.evolve(&y, -t).unwrap();
        prop_assert!(rel_diff(&back, &y0) < 1e-9);
        let (h0, h1) = (dy.hamiltonian(&y0), dy.hamiltonian(&y));
        prop_assert!((h1 - h0).abs() < 1e-10 * h0);
    }

    #[test]
    fn real_and_spectral_energy_agree(v in kernel_strategy(2, 2), seed in 0u64..1000) {
        let g = TorusGrid::new(v.dim(), 8).unwrap();
        let dy = Dynamics::new(v, g).unwrap();
        let y = random_state(g, dy.interaction().components(), seed);
        let a = dy.hamiltonian(&y);
        let b = spectral_energy(&y, dy.dispersion(), dy.transform());
        prop_assert!((a - b).abs() < 1e-9 * a);
    }

    #[test]
    fn pairing_duality_holds(v in kernel_strategy(2, 2), s1 in 0u64..1000, s2 in 0u64..1000, t in -15.0f64..15.0) {
        let g = TorusGrid::new(v.dim(), 8).unwrap();
        let dy = Dynamics::new(v, g).unwrap();
        let n = dy.interaction().components();
        let y = random_state(g, n, s1);
        let psi = random_state(g, n, s2 + 5000);
        let lhs = dy.evolve(&y, t).unwrap().pairing(&psi);
        let rhs = y.pairing(&dy.evolve_conjugate(&psi, t).unwrap());
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn evolution_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, t in 0.0f64..10.0) {
        let v = InteractionMatrix::elastic(1, 1.0).unwrap();
        let g = TorusGrid::new(1, 16).unwrap();
        let dy = Dynamics::new(v, g).unwrap();
        let y1 = random_state(g, 1, seed);
        let y2 = random_state(g, 1, seed + 1);
        let comb = |p: &FieldState, q: &FieldState| {
            FieldState::new(
                g,
                1,
                p.u.iter().zip(&q.u).map(|(x, y)| x + a * y).collect(),
                p.v.iter().zip(&q.v).map(|(x, y)| x + a * y).collect(),
            )
            .unwrap()
        };
        let lhs = dy.evolve(&comb(&y1, &y2), t).unwrap();
        let rhs = comb(&dy.evolve(&y1, t).unwrap(), &dy.evolve(&y2, t).unwrap());
        prop_assert!(rel_diff(&lhs, &rhs) < 1e-11);
    }
}

#[test]
fn symbol_at_zero_time_is_identity() {
    let v = InteractionMatrix::elastic(2, 1.0).unwrap();
    let data = dispersion(&v, TorusGrid::new(2, 4).unwrap(), None).unwrap();
    let g0 = propagator_symbol(&data, 0.0);
    for k in 0..16 {
        let err = (g0.node(k) - CMat::identity(2, 2)).iter().map(|c| c.norm()).fold(0.0, f64::max);
        assert!(err < 1e-15);
    }
}

#[test]
fn state_with_a_vanishing_half_round_trips() {
    // Returning to a pure displacement leaves a velocity plane of rounding
    // noise only, which must not be mistaken for an imaginary residue.
    let g = TorusGrid::new(1, 128).unwrap();
    let dy = Dynamics::new(InteractionMatrix::elastic(1, 1.0).unwrap(), g).unwrap();
    let mut y0 = FieldState::zeros(g, 1);
    y0.u[0] = 1.0;
    let y = dy.evolve(&y0, 40.0).unwrap();
    let back = dy.evolve(&y, -40.0).unwrap();
    assert!(max_abs_diff(&back.u, &y0.u) < 1e-12);
    assert!(back.v.iter().all(|x| x.abs() < 1e-12));
}
