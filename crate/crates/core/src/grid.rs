//! Periodic lattice `{0..N-1}^d` shared by the spatial torus and its dual
//! frequency grid `θ_m = 2πm/N`.
//!
//! Flat indices are row-major with the last axis fastest. The same flat index
//! addresses a site `x` in real space and a node `θ_m` in frequency space.
//!
//! Fourier convention (used everywhere in the crate):
//!
//! ```text
//! Ŷ(θ) = Σ_x Y(x) e^{+i x·θ}          Y(x) = N^{-d} Σ_θ Ŷ(θ) e^{-i x·θ}
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Discretized torus with `n` points per axis in `d` dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TorusGrid {
    d: usize,
    n: usize,
}

impl TorusGrid {
    pub fn new(d: usize, n: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidInput("grid dimension must be at least 1".into()));
        }
        if n < 2 || !n.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "points per axis must be even and >= 2, got {n}"
            )));
        }
        if (n as f64).powi(d as i32) > 1e8 {
            return Err(Error::InvalidInput(format!("grid {n}^{d} is too large")));
        }
        Ok(TorusGrid { d, n })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Points per axis.
    pub fn points(&self) -> usize {
        self.n
    }

    /// Total node count `N^d`.
    pub fn len(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Grid spacing `2π/N` in frequency space.
    pub fn spacing(&self) -> f64 {
        2.0 * PI / self.n as f64
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.d];
        for a in (0..self.d).rev() {
            idx[a] = flat % self.n;
            flat /= self.n;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, &i| acc * self.n + i % self.n)
    }

    /// Flat index of a signed lattice vector, wrapped onto the torus.
    pub fn wrap(&self, x: &[i64]) -> usize {
        let n = self.n as i64;
        x.iter()
            .fold(0usize, |acc, &c| acc * self.n + c.rem_euclid(n) as usize)
    }

    /// Signed coordinates in `[-N/2, N/2)` of a flat site index.
    pub fn signed_coords(&self, flat: usize) -> Vec<i64> {
        let half = (self.n / 2) as i64;
        self.multi_index(flat)
            .into_iter()
            .map(|c| {
                let c = c as i64;
                if c >= half {
                    c - self.n as i64
                } else {
                    c
                }
            })
            .collect()
    }

    /// Frequency vector `θ ∈ [0, 2π)^d` of a node.
    pub fn theta(&self, flat: usize) -> Vec<f64> {
        let h = self.spacing();
        self.multi_index(flat).into_iter().map(|m| h * m as f64).collect()
    }

    /// Node holding `-θ mod 2π`.
    pub fn conjugate(&self, flat: usize) -> usize {
        let idx: Vec<usize> = self
            .multi_index(flat)
            .into_iter()
            .map(|m| (self.n - m) % self.n)
            .collect();
        self.flat_index(&idx)
    }

    /// Flat index shifted by `delta` steps along `axis` (periodic).
    pub fn shift(&self, flat: usize, axis: usize, delta: i64) -> usize {
        let mut idx = self.multi_index(flat);
        idx[axis] = (idx[axis] as i64 + delta).rem_euclid(self.n as i64) as usize;
        self.flat_index(&idx)
    }

    /// Nodes lying on the coarser grid of `N / stride` points per axis.
    pub fn is_on_subgrid(&self, flat: usize, stride: usize) -> bool {
        self.multi_index(flat).iter().all(|&m| m % stride == 0)
    }
}

impl fmt::Display for TorusGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}^{}", self.n, self.d)
    }
}

/// Cached FFT plans for one grid.
#[derive(Clone)]
pub struct Transform {
    grid: TorusGrid,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Transform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Transform").field("grid", &self.grid).finish()
    }
}

impl Transform {
    pub fn new(grid: TorusGrid) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(grid.points());
        let inverse = planner.plan_fft_inverse(grid.points());
        Transform {
            grid,
            forward,
            inverse,
        }
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    fn apply(&self, plane: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
        let n = self.grid.points();
        let d = self.grid.dim();
        assert_eq!(plane.len(), self.grid.len(), "plane does not match grid");
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        for axis in 0..d {
            let stride = n.pow((d - 1 - axis) as u32);
            if stride == 1 {
                fft.process(plane);
                continue;
            }
            let block = stride * n;
            for outer in (0..plane.len()).step_by(block) {
                for inner in 0..stride {
                    let base = outer + inner;
                    for (k, c) in line.iter_mut().enumerate() {
                        *c = plane[base + k * stride];
                    }
                    fft.process(&mut line);
                    for (k, c) in line.iter().enumerate() {
                        plane[base + k * stride] = *c;
                    }
                }
            }
        }
    }

    /// In place `Y(x) ↦ Ŷ(θ) = Σ_x Y(x) e^{+ixθ}`.
    pub fn to_spectral(&self, plane: &mut [Complex64]) {
        self.apply(plane, &self.inverse);
    }

    /// In place `Ŷ(θ) ↦ Y(x) = N^{-d} Σ_θ Ŷ(θ) e^{-ixθ}`.
    pub fn to_spatial(&self, plane: &mut [Complex64]) {
        self.apply(plane, &self.forward);
        let scale = 1.0 / self.grid.len() as f64;
        for c in plane.iter_mut() {
            *c *= scale;
        }
    }

    pub fn real_to_spectral(&self, values: &[f64]) -> Vec<Complex64> {
        let mut plane: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.to_spectral(&mut plane);
        plane
    }
}

/// Splits a complex plane into its real part after checking the imaginary
/// residue is below `rel_tol` of the plane's scale.
pub fn real_part_checked(plane: &[Complex64], rel_tol: f64, what: &str) -> Result<Vec<f64>> {
    real_part_checked_against(plane, rel_tol, plane_scale(plane), what)
}

/// Largest modulus in the plane.
pub fn plane_scale(plane: &[Complex64]) -> f64 {
    plane.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// As [`real_part_checked`], with the residue measured against an external
/// `scale`, for planes that are parts of a larger object.
pub fn real_part_checked_against(plane: &[Complex64], rel_tol: f64, scale: f64, what: &str) -> Result<Vec<f64>> {
    let residue = plane.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    if residue > rel_tol * scale.max(f64::MIN_POSITIVE) && residue > 1e-300 {
        return Err(Error::ImaginaryResidue {
            what: what.to_string(),
            residue,
            scale,
        });
    }
    Ok(plane.iter().map(|c| c.re).collect())
}
