//! Exact evolution through the Fourier symbol of the Green function
//!
//! ```text
//! Ĝ_t(θ) = ⎡ cos Ωt      sin Ωt Ω⁻¹ ⎤
//!          ⎣ -sin Ωt Ω   cos Ωt     ⎦
//! ```
//!
//! assembled from the eigenprojections of `V̂(θ)`, so that `sin Ωt Ω⁻¹` is a
//! matrix sinc and needs no inverse at `ω = 0`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::FieldState;
use crate::grid::{real_part_checked, TorusGrid, Transform};
use crate::lattice::{dispersion, CMat, DispersionData, InteractionMatrix};
use crate::random_fields::SpectralDensity;

/// `Ĝ_t(θ)` on every node.
#[derive(Clone, Debug)]
pub struct PropagatorSymbol {
    pub t: f64,
    n: usize,
    nodes: Vec<CMat>,
}

fn sinc(w: f64, t: f64) -> f64 {
    let x = w * t;
    if x.abs() < 1e-8 {
        t * (1.0 - x * x / 6.0)
    } else {
        (x).sin() / w
    }
}

impl PropagatorSymbol {
    pub fn nodes(&self) -> &[CMat] {
        &self.nodes
    }

    pub fn node(&self, k: usize) -> &CMat {
        &self.nodes[k]
    }

    pub fn components(&self) -> usize {
        self.n
    }

    /// `out = Ĝ_t(θ_k) w` for a `2n`-vector `w`.
    #[inline]
    pub(crate) fn apply_node(&self, k: usize, w: &[Complex64], out: &mut [Complex64]) {
        let g = &self.nodes[k];
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for (c, x) in w.iter().enumerate() {
                acc += g[(r, c)] * x;
            }
            *o = acc;
        }
    }
}

pub fn propagator_symbol(data: &DispersionData, t: f64) -> PropagatorSymbol {
    let n = data.components();
    let nodes = data
        .nodes()
        .par_iter()
        .map(|s| {
            let cos = s.matrix_function(|w| (w * t).cos());
            let sinc_m = s.matrix_function(|w| sinc(w, t));
            let msin = s.matrix_function(|w| -w * (w * t).sin());
            let mut g = CMat::zeros(2 * n, 2 * n);
            g.view_mut((0, 0), (n, n)).copy_from(&cos);
            g.view_mut((0, n), (n, n)).copy_from(&sinc_m);
            g.view_mut((n, 0), (n, n)).copy_from(&msin);
            g.view_mut((n, n), (n, n)).copy_from(&cos);
            g
        })
        .collect();
    PropagatorSymbol { t, n, nodes }
}

/// Largest `t` for which a disturbance travelling at the maximal group
/// speed stays a quarter torus away from wrapping around.
pub fn horizon(data: &DispersionData) -> f64 {
    let speed = data.max_group_speed();
    if speed == 0.0 {
        f64::INFINITY
    } else {
        data.grid().points() as f64 / (4.0 * speed)
    }
}

/// Warns (without failing) when `t` exceeds the no-wraparound horizon.
pub fn check_horizon(data: &DispersionData, t: f64) -> bool {
    let h = horizon(data);
    if t.abs() > h {
        log::warn!("t = {t} exceeds the no-wraparound horizon {h:.3} of grid {}", data.grid());
        false
    } else {
        true
    }
}

/// Crystal on a fixed torus: interaction, dispersion and cached FFT plans.
#[derive(Clone, Debug)]
pub struct Dynamics {
    v: InteractionMatrix,
    data: DispersionData,
    transform: Transform,
}

impl Dynamics {
    pub fn new(v: InteractionMatrix, grid: TorusGrid) -> Result<Self> {
        let data = dispersion(&v, grid, None)?;
        Ok(Self::from_parts(v, data))
    }

    pub fn from_parts(v: InteractionMatrix, data: DispersionData) -> Self {
        let transform = Transform::new(data.grid());
        Dynamics { v, data, transform }
    }

    pub fn interaction(&self) -> &InteractionMatrix {
        &self.v
    }

    pub fn dispersion(&self) -> &DispersionData {
        &self.data
    }

    pub fn transform(&self) -> &Transform {
        &self.transform
    }

    pub fn grid(&self) -> TorusGrid {
        self.data.grid()
    }

    pub fn symbol(&self, t: f64) -> PropagatorSymbol {
        propagator_symbol(&self.data, t)
    }

    pub fn evolve(&self, y0: &FieldState, t: f64) -> Result<FieldState> {
        self.evolve_with(y0, &self.symbol(t))
    }

    /// Evolution with a precomputed symbol, for repeated use at one time.
    pub fn evolve_with(&self, y0: &FieldState, symbol: &PropagatorSymbol) -> Result<FieldState> {
        let g = self.grid();
        if y0.grid() != g || y0.components() != self.v.components() {
            return Err(Error::GridMismatch {
                expected: format!("{} with n = {}", g, self.v.components()),
                found: format!("{} with n = {}", y0.grid(), y0.components()),
            });
        }
        y0.check_finite()?;
        let n = y0.components();
        let planes = y0.to_spectral(&self.transform);
        let mut out = vec![vec![Complex64::new(0.0, 0.0); g.len()]; 2 * n];
        let mut w = vec![Complex64::new(0.0, 0.0); 2 * n];
        let mut r = vec![Complex64::new(0.0, 0.0); 2 * n];
        for k in 0..g.len() {
            for (a, x) in w.iter_mut().enumerate() {
                *x = planes[a][k];
            }
            symbol.apply_node(k, &w, &mut r);
            for (a, x) in r.iter().enumerate() {
                out[a][k] = *x;
            }
        }
        let mut y = FieldState::from_spectral(g, n, out, &self.transform)?;
        y.time = y0.time + symbol.t;
        Ok(y)
    }

    /// Adjoint flow `Φ_t` with `⟨Y(t), Ψ⟩ = ⟨Y₀, Φ_t⟩`; it is the ordinary
    /// flow applied with the roles of `u` and `v` exchanged.
    pub fn evolve_conjugate(&self, psi: &FieldState, t: f64) -> Result<FieldState> {
        Ok(self.evolve(&psi.swapped(), t)?.swapped())
    }

    pub fn hamiltonian(&self, y: &FieldState) -> f64 {
        hamiltonian(y, &self.v)
    }

    pub fn green_function(&self, t: f64, window_radius: usize) -> Result<GreenFunction> {
        green_function(&self.data, t, window_radius)
    }
}

/// Convenience wrapper building the dispersion on the state's grid.
pub fn evolve(y0: &FieldState, v: &InteractionMatrix, t: f64) -> Result<FieldState> {
    Dynamics::new(v.clone(), y0.grid())?.evolve(y0, t)
}

/// `H = ½ Σ |v|² + ½ Σ_{x,y} (V(x - y) u(y), u(x))` with periodic wraparound.
pub fn hamiltonian(y: &FieldState, v: &InteractionMatrix) -> f64 {
    let g = y.grid();
    let n = y.components();
    let kinetic: f64 = y.v.iter().map(|x| x * x).sum();
    let mut potential = 0.0;
    let support: Vec<(Vec<i64>, &DMatrix<f64>)> =
        v.support().map(|(z, m)| (z.clone(), m)).collect();
    for x in 0..g.len() {
        let xc: Vec<i64> = g.multi_index(x).iter().map(|&c| c as i64).collect();
        let ux = &y.u[x * n..(x + 1) * n];
        for (z, m) in &support {
            let yc: Vec<i64> = xc.iter().zip(z).map(|(a, b)| a - b).collect();
            let ys = g.wrap(&yc);
            let uy = &y.u[ys * n..(ys + 1) * n];
            for a in 0..n {
                for b in 0..n {
                    potential += ux[a] * m[(a, b)] * uy[b];
                }
            }
        }
    }
    0.5 * (kinetic + potential)
}

/// `½ N^{-d} Σ_θ Ŷ* diag(V̂, I) Ŷ`, the Hamiltonian evaluated in Fourier space.
pub fn spectral_energy(y: &FieldState, data: &DispersionData, transform: &Transform) -> f64 {
    let n = y.components();
    let planes = y.to_spectral(transform);
    let mut total = 0.0;
    for (k, s) in data.nodes().iter().enumerate() {
        for a in 0..n {
            total += planes[n + a][k].norm_sqr();
            for b in 0..n {
                total += (planes[a][k].conj() * s.symbol[(a, b)] * planes[b][k]).re;
            }
        }
    }
    0.5 * total / data.grid().len() as f64
}

/// Real-space Green function `G_t(z)`, one real `2n × 2n` matrix per site.
#[derive(Clone, Debug)]
pub struct GreenFunction {
    grid: TorusGrid,
    pub t: f64,
    n: usize,
    radius: usize,
    entries: Vec<DMatrix<f64>>,
}

impl GreenFunction {
    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn components(&self) -> usize {
        self.n
    }

    /// `G_t(z)`, zero outside the window.
    pub fn get(&self, z: &[i64]) -> DMatrix<f64> {
        if z.iter().any(|c| c.unsigned_abs() as usize > self.radius) {
            return DMatrix::zeros(2 * self.n, 2 * self.n);
        }
        self.entries[self.grid.wrap(z)].clone()
    }

    /// Entry at a flat torus index (only meaningful inside the window).
    pub fn at_site(&self, site: usize) -> &DMatrix<f64> {
        &self.entries[site]
    }

    /// Lattice vectors of the window with their matrices.
    pub fn window(&self) -> impl Iterator<Item = (Vec<i64>, &DMatrix<f64>)> + '_ {
        let r = self.radius as i64;
        (0..self.grid.len()).filter_map(move |site| {
            let z = self.grid.signed_coords(site);
            z.iter().all(|c| c.abs() <= r).then(|| (z, &self.entries[site]))
        })
    }
}

/// `G_t(z) = N^{-d} Σ_θ e^{-izθ} Ĝ_t(θ)` for `‖z‖_∞ ≤ window_radius`.
pub fn green_function(data: &DispersionData, t: f64, window_radius: usize) -> Result<GreenFunction> {
    let g = data.grid();
    if 2 * window_radius >= g.points() {
        return Err(Error::WindowTooLarge {
            radius: window_radius,
            points: g.points(),
        });
    }
    build_green(data, t, window_radius)
}

/// `G_t` on every site of the torus, including the antipodal layer
/// `z_k = -N/2` that a centered window cannot hold.
pub fn periodic_green_function(data: &DispersionData, t: f64) -> Result<GreenFunction> {
    build_green(data, t, data.grid().points() / 2)
}

fn build_green(data: &DispersionData, t: f64, window_radius: usize) -> Result<GreenFunction> {
    let g = data.grid();
    let n = data.components();
    let dim = 2 * n;
    let symbol = propagator_symbol(data, t);
    let transform = Transform::new(g);
    let mut entries = vec![DMatrix::zeros(dim, dim); g.len()];
    for r in 0..dim {
        for c in 0..dim {
            let mut plane: Vec<Complex64> = symbol.nodes.iter().map(|m| m[(r, c)]).collect();
            transform.to_spatial(&mut plane);
            let real = real_part_checked(&plane, 1e-10, "Green function")?;
            for (site, x) in real.into_iter().enumerate() {
                entries[site][(r, c)] = x;
            }
        }
    }
    let radius = window_radius as i64;
    for (site, e) in entries.iter_mut().enumerate() {
        if g.signed_coords(site).iter().any(|c| c.abs() > radius) {
            e.fill(0.0);
        }
    }
    Ok(GreenFunction {
        grid: g,
        t,
        n,
        radius: window_radius,
        entries,
    })
}

/// `Q̂_t(θ) = Ĝ_t(θ) q̂(θ) Ĝ_t(θ)*` on every node.
pub fn evolve_covariance_spectral(
    q: &SpectralDensity,
    data: &DispersionData,
    t: f64,
) -> Result<SpectralDensity> {
    if q.grid() != data.grid() || q.components() != data.components() {
        return Err(Error::GridMismatch {
            expected: format!("{} with n = {}", data.grid(), data.components()),
            found: format!("{} with n = {}", q.grid(), q.components()),
        });
    }
    let symbol = propagator_symbol(data, t);
    let blocks = q
        .blocks()
        .par_iter()
        .zip(symbol.nodes.par_iter())
        .map(|(b, g)| g * b * g.adjoint())
        .collect();
    SpectralDensity::new(q.grid(), q.components(), blocks, None, format!("{} at t={t}", q.label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn chain(n: usize) -> Dynamics {
        Dynamics::new(InteractionMatrix::elastic(1, 1.0).unwrap(), TorusGrid::new(1, n).unwrap()).unwrap()
    }

    #[test]
    fn symbol_at_zero_time_is_identity() {
        let dynm = chain(16);
        for g in dynm.symbol(0.0).nodes() {
            assert!((g - CMat::identity(2, 2)).norm() < 1e-15);
        }
    }

    #[test]
    fn quarter_period_symbol() {
        let dynm = chain(16);
        let k = 4;
        let w = dynm.dispersion().omega(k, 0);
        let g = dynm.symbol(PI / (2.0 * w));
        let m = g.node(k);
        assert!(m[(0, 0)].norm() < 1e-14 && m[(1, 1)].norm() < 1e-14);
        assert!((m[(0, 1)].re - 1.0 / w).abs() < 1e-14);
        assert!((m[(1, 0)].re + w).abs() < 1e-14);
    }

    #[test]
    fn zero_frequency_node_is_free_shear() {
        let dynm = Dynamics::new(InteractionMatrix::elastic(1, 0.0).unwrap(), TorusGrid::new(1, 8).unwrap()).unwrap();
        let g = dynm.symbol(2.5);
        let m = g.node(0);
        assert!((m - CMat::from_row_slice(2, 2, &[1.0, 2.5, 0.0, 1.0].map(|x| Complex64::new(x, 0.0)))).norm() < 1e-15);
    }

    #[test]
    fn green_function_at_zero_time_is_delta() {
        let dynm = chain(32);
        let gf = dynm.green_function(0.0, 10).unwrap();
        for (z, m) in gf.window() {
            let expect = if z == [0] { DMatrix::identity(2, 2) } else { DMatrix::zeros(2, 2) };
            assert!((m - expect).norm() < 1e-14);
        }
        assert!(dynm.green_function(0.0, 16).is_err());
    }

    #[test]
    fn unit_momentum_has_half_energy() {
        let g = TorusGrid::new(1, 16).unwrap();
        let mut y = FieldState::zeros(g, 1);
        assert_eq!(hamiltonian(&y, &InteractionMatrix::elastic(1, 1.0).unwrap()), 0.0);
        y.v[3] = 1.0;
        assert_eq!(hamiltonian(&y, &InteractionMatrix::elastic(1, 1.0).unwrap()), 0.5);
    }
}
