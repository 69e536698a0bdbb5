#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use phononflux::lattice::CMat;
use phononflux::{FieldState, InteractionMatrix, TorusGrid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `V(z) = Σ_y a(y) a(y - z)^T + m² δ_{z0}` with `a` supported on `{0, e_1, …, e_d}`.
/// Positive definite by construction.
pub fn gram_kernel(d: usize, n: usize, coeffs: &[f64], mass: f64) -> InteractionMatrix {
    let mut a: Vec<(Vec<i64>, DMatrix<f64>)> = Vec::new();
    for s in 0..=d {
        let mut y = vec![0i64; d];
        if s > 0 {
            y[s - 1] = 1;
        }
        let m = DMatrix::from_fn(n, n, |r, c| coeffs[s * n * n + r * n + c]);
        a.push((y, m));
    }
    let mut entries = Vec::new();
    for (y1, a1) in &a {
        for (y2, a2) in &a {
            let z: Vec<i64> = y1.iter().zip(y2).map(|(p, q)| p - q).collect();
            entries.push((z, a1 * a2.transpose()));
        }
    }
    entries.push((vec![0; d], DMatrix::identity(n, n) * (mass * mass)));
    InteractionMatrix::new(d, n, entries).unwrap()
}

pub fn kernel_strategy(max_d: usize, max_n: usize) -> impl Strategy<Value = InteractionMatrix> {
    (1..=max_d, 1..=max_n)
        .prop_flat_map(|(d, n)| {
            (
                Just(d),
                Just(n),
                prop::collection::vec(-1.0f64..1.0, (d + 1) * n * n),
                0.3f64..1.5,
            )
        })
        .prop_map(|(d, n, c, m)| gram_kernel(d, n, &c, m))
}

pub fn random_state(grid: TorusGrid, n: usize, seed: u64) -> FieldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = grid.len() * n;
    let u = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let v = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    FieldState::new(grid, n, u, v).unwrap()
}

/// A field supported in the box `|x|_∞ <= r` around the origin.
pub fn local_state(grid: TorusGrid, n: usize, r: i64, seed: u64) -> FieldState {
    let mut y = random_state(grid, n, seed);
    for site in 0..grid.len() {
        if grid.signed_coords(site).iter().any(|c| c.abs() > r) {
            for i in 0..n {
                y.u[site * n + i] = 0.0;
                y.v[site * n + i] = 0.0;
            }
        }
    }
    y
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn sorted_eigen(m: &CMat) -> (Vec<f64>, CMat) {
    let eig = SymmetricEigen::new(m.clone());
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = CMat::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Limit covariance of two Gibbs half-spaces built directly from the
/// eigenvectors `B` of `V̂`:
/// `q⁰⁰ = T̄ V̂⁻¹`, `q¹¹ = T̄ I`, `q¹⁰ = -q⁰¹ = -iΔT B diag(sgn ∂_d ω_k / ω_k) B*`.
/// Signs come from central differences of the sorted eigenvalues and vanish
/// on the planes `θ_d ∈ {0, π}` by evenness of `ω`.
pub fn gibbs_limit_oracle(v: &InteractionMatrix, g: TorusGrid, k: usize, t_plus: f64, t_minus: f64) -> CMat {
    let n = v.components();
    let d = g.dim();
    let theta = g.theta(k);
    let sym = v.symbol(&theta);
    let (vals, b) = sorted_eigen(&sym);
    let tbar = 0.5 * (t_plus + t_minus);
    let dt = 0.5 * (t_plus - t_minus);
    let md = g.multi_index(k)[d - 1];
    let h = 1e-6;
    let mut p = theta.clone();
    let mut m = theta.clone();
    p[d - 1] += h;
    m[d - 1] -= h;
    let (vp, _) = sorted_eigen(&v.symbol(&p));
    let (vm, _) = sorted_eigen(&v.symbol(&m));
    let diag = CMat::from_fn(n, n, |r, c| {
        if r != c || md == 0 || md == g.points() / 2 {
            return Complex64::new(0.0, 0.0);
        }
        let sgn = (vp[r].sqrt() - vm[r].sqrt()).signum();
        Complex64::new(sgn / vals[r].sqrt(), 0.0)
    });
    let odd = &b * diag * b.adjoint();
    let inv = sym.clone().try_inverse().unwrap();
    let mut out = CMat::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(&(inv * Complex64::new(tbar, 0.0)));
    out.view_mut((n, n), (n, n)).copy_from(&(CMat::identity(n, n) * Complex64::new(tbar, 0.0)));
    out.view_mut((n, 0), (n, n)).copy_from(&(&odd * Complex64::new(0.0, -dt)));
    out.view_mut((0, n), (n, n)).copy_from(&(&odd * Complex64::new(0.0, dt)));
    out
}

