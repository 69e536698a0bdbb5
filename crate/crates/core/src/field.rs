//! Displacement/velocity fields on the torus.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{plane_scale, real_part_checked_against, TorusGrid, Transform};

/// `Y = (u, v)` with `n` components per site, stored site-major:
/// entry `site * n + α`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldState {
    grid: TorusGrid,
    n: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub time: f64,
}

impl FieldState {
    pub fn new(grid: TorusGrid, n: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let len = grid.len() * n;
        if n == 0 || u.len() != len || v.len() != len {
            return Err(Error::InvalidInput(format!(
                "field arrays must have {len} entries, got u: {}, v: {}",
                u.len(),
                v.len()
            )));
        }
        let state = FieldState {
            grid,
            n,
            u,
            v,
            time: 0.0,
        };
        state.check_finite()?;
        Ok(state)
    }

    pub fn zeros(grid: TorusGrid, n: usize) -> Self {
        let len = grid.len() * n;
        FieldState {
            grid,
            n,
            u: vec![0.0; len],
            v: vec![0.0; len],
            time: 0.0,
        }
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn components(&self) -> usize {
        self.n
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.u.iter().chain(&self.v).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("field state".into()));
        }
        Ok(())
    }

    /// Component `i ∈ {0, 1}` (`u` or `v`) as a slice.
    pub fn part(&self, i: usize) -> &[f64] {
        if i == 0 {
            &self.u
        } else {
            &self.v
        }
    }

    /// `Σ_x (Y(x), Ψ(x))` over both parts.
    pub fn pairing(&self, psi: &FieldState) -> f64 {
        dot(&self.u, &psi.u) + dot(&self.v, &psi.v)
    }

    /// `(u, v) ↦ (v, u)`.
    pub fn swapped(&self) -> FieldState {
        FieldState {
            grid: self.grid,
            n: self.n,
            u: self.v.clone(),
            v: self.u.clone(),
            time: self.time,
        }
    }

    /// Largest absolute entry.
    pub fn sup_norm(&self) -> f64 {
        self.u.iter().chain(&self.v).fold(0.0, |a, x| a.max(x.abs()))
    }

    /// Spectral planes `[û_1..û_n, v̂_1..v̂_n]`, each of length `N^d`.
    pub fn to_spectral(&self, transform: &Transform) -> Vec<Vec<Complex64>> {
        let n = self.n;
        let mut out = Vec::with_capacity(2 * n);
        for part in [&self.u, &self.v] {
            for a in 0..n {
                let vals: Vec<f64> = part.iter().skip(a).step_by(n).copied().collect();
                out.push(transform.real_to_spectral(&vals));
            }
        }
        out
    }

    /// Inverse of [`to_spectral`](Self::to_spectral), refusing an imaginary
    /// residue above `1e-10` of the largest entry over all planes.
    pub fn from_spectral(
        grid: TorusGrid,
        n: usize,
        mut planes: Vec<Vec<Complex64>>,
        transform: &Transform,
    ) -> Result<Self> {
        let len = grid.len();
        let mut u = vec![0.0; len * n];
        let mut v = vec![0.0; len * n];
        for plane in planes.iter_mut() {
            transform.to_spatial(plane);
        }
        let scale = planes.iter().map(|p| plane_scale(p)).fold(0.0, f64::max);
        for (r, plane) in planes.iter().enumerate() {
            let real = real_part_checked_against(plane, 1e-10, scale, "evolved field")?;
            let (target, a) = if r < n { (&mut u, r) } else { (&mut v, r - n) };
            for (site, x) in real.into_iter().enumerate() {
                target[site * n + a] = x;
            }
        }
        FieldState::new(grid, n, u, v)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
