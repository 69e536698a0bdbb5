//! Interaction matrices, their Fourier symbols, dispersion relations and the
//! numeric checks of the standing conditions on the crystal.

mod conditions;
mod dispersion;

pub use conditions::{check_conditions, ConditionReport, ConditionStatus, ConditionTolerances, Verdict};
pub use dispersion::{
    critical_set, dispersion, Cluster, CriticalMask, DispersionData, NodeSpectrum, OMEGA_FLOOR,
    PSD_TOL,
};

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type CMat = DMatrix<Complex64>;

/// Largest tolerated entrywise mismatch between `V(-z)` and `V(z)^T`.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Finite-support force kernel `z ↦ V(z) ∈ R^{n×n}` on `Z^d`.
///
/// Entries are keyed by lattice vector, so the order in which they were
/// supplied is irrelevant.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionMatrix {
    d: usize,
    n: usize,
    support: BTreeMap<Vec<i64>, DMatrix<f64>>,
}

impl InteractionMatrix {
    /// Builds a kernel from `(z, V(z))` pairs, summing duplicate `z`.
    pub fn new(
        d: usize,
        n: usize,
        entries: impl IntoIterator<Item = (Vec<i64>, DMatrix<f64>)>,
    ) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(Error::InvalidInput("d and n must be positive".into()));
        }
        let mut support: BTreeMap<Vec<i64>, DMatrix<f64>> = BTreeMap::new();
        for (z, v) in entries {
            if z.len() != d {
                return Err(Error::InvalidInput(format!(
                    "lattice vector {z:?} does not have {d} components"
                )));
            }
            if v.nrows() != n || v.ncols() != n {
                return Err(Error::InvalidInput(format!(
                    "V({z:?}) is {}x{}, expected {n}x{n}",
                    v.nrows(),
                    v.ncols()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("V({z:?})")));
            }
            support
                .entry(z)
                .and_modify(|acc| *acc += &v)
                .or_insert(v);
        }
        let zero = DMatrix::zeros(n, n);
        for (z, v) in &support {
            let minus: Vec<i64> = z.iter().map(|c| -c).collect();
            let partner = support.get(&minus).unwrap_or(&zero);
            let violation = (partner - v.transpose()).abs().max();
            if violation > SYMMETRY_TOL {
                return Err(Error::NotSymmetric {
                    z: z.clone(),
                    violation,
                });
            }
        }
        Ok(InteractionMatrix { d, n, support })
    }

    /// The simple elastic lattice: `V(0) = 2d + m²`, `V(±e_k) = -1`.
    pub fn elastic(d: usize, m: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidInput("d must be at least 1".into()));
        }
        if !(m >= 0.0 && m.is_finite()) {
            return Err(Error::InvalidInput(format!("mass must be non-negative, got {m}")));
        }
        let mut entries = vec![(vec![0; d], DMatrix::from_element(1, 1, 2.0 * d as f64 + m * m))];
        for k in 0..d {
            for s in [-1, 1] {
                let mut z = vec![0; d];
                z[k] = s;
                entries.push((z, DMatrix::from_element(1, 1, -1.0)));
            }
        }
        Self::new(d, 1, entries)
    }

    /// Direct sum of kernels on the same lattice (block diagonal `V`).
    pub fn direct_sum(parts: &[InteractionMatrix]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("direct sum of nothing".into()))?;
        let d = first.d;
        if parts.iter().any(|p| p.d != d) {
            return Err(Error::InvalidInput("direct sum needs a common dimension".into()));
        }
        let n: usize = parts.iter().map(|p| p.n).sum();
        let mut support: BTreeMap<Vec<i64>, DMatrix<f64>> = BTreeMap::new();
        let mut offset = 0;
        for p in parts {
            for (z, v) in &p.support {
                let block = support.entry(z.clone()).or_insert_with(|| DMatrix::zeros(n, n));
                block.view_mut((offset, offset), (p.n, p.n)).copy_from(v);
            }
            offset += p.n;
        }
        Self::new(d, n, support)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn components(&self) -> usize {
        self.n
    }

    pub fn support(&self) -> impl Iterator<Item = (&Vec<i64>, &DMatrix<f64>)> {
        self.support.iter()
    }

    pub fn get(&self, z: &[i64]) -> Option<&DMatrix<f64>> {
        self.support.get(z)
    }

    /// `max ‖z‖_∞` over the support.
    pub fn support_radius(&self) -> usize {
        self.support
            .keys()
            .flat_map(|z| z.iter().map(|c| c.unsigned_abs() as usize))
            .max()
            .unwrap_or(0)
    }

    /// Worst entrywise violation of `V(-z) = V(z)^T`.
    pub fn symmetry_violation(&self) -> f64 {
        let zero = DMatrix::zeros(self.n, self.n);
        self.support
            .iter()
            .map(|(z, v)| {
                let minus: Vec<i64> = z.iter().map(|c| -c).collect();
                (self.support.get(&minus).unwrap_or(&zero) - v.transpose()).abs().max()
            })
            .fold(0.0, f64::max)
    }

    /// `V̂(θ) = Σ_z V(z) e^{i z·θ}`.
    pub fn symbol(&self, theta: &[f64]) -> CMat {
        assert_eq!(theta.len(), self.d, "theta has wrong dimension");
        let mut out = CMat::zeros(self.n, self.n);
        for (z, v) in &self.support {
            let phase = Complex64::from_polar(1.0, dot(z, theta));
            out.zip_apply(v, |o, x| *o += phase * x);
        }
        hermitize(&mut out);
        out
    }

    /// `∂V̂/∂θ_k = Σ_z i z_k V(z) e^{i z·θ}`, exact.
    pub fn symbol_derivative(&self, theta: &[f64], k: usize) -> CMat {
        let mut out = CMat::zeros(self.n, self.n);
        for (z, v) in &self.support {
            if z[k] == 0 {
                continue;
            }
            let c = Complex64::new(0.0, z[k] as f64) * Complex64::from_polar(1.0, dot(z, theta));
            out.zip_apply(v, |o, x| *o += c * x);
        }
        out
    }
}

pub(crate) fn dot(z: &[i64], theta: &[f64]) -> f64 {
    z.iter().zip(theta).map(|(&a, &b)| a as f64 * b).sum()
}

/// Replaces `m` by `(m + m*)/2`, removing round-off anti-Hermitian parts.
pub(crate) fn hermitize(m: &mut CMat) {
    let adj = m.adjoint();
    *m += adj;
    *m *= Complex64::new(0.5, 0.0);
}

/// JSON model description.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ModelSpec {
    Elastic(ElasticSpec),
    Explicit(ExplicitModel),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ElasticSpec {
    #[serde(rename = "type")]
    pub kind: ElasticTag,
    pub d: usize,
    pub m: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ElasticTag {
    Elastic,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExplicitModel {
    pub d: usize,
    pub n: usize,
    pub entries: Vec<ModelEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub z: Vec<i64>,
    #[serde(rename = "V")]
    pub v: Vec<Vec<f64>>,
}

impl ModelSpec {
    pub fn elastic(d: usize, m: f64) -> Self {
        ModelSpec::Elastic(ElasticSpec {
            kind: ElasticTag::Elastic,
            d,
            m,
        })
    }

    pub fn build(&self) -> Result<InteractionMatrix> {
        match self {
            ModelSpec::Elastic(e) => InteractionMatrix::elastic(e.d, e.m),
            ModelSpec::Explicit(m) => {
                let mut entries = Vec::with_capacity(m.entries.len());
                for e in &m.entries {
                    if e.v.len() != m.n || e.v.iter().any(|row| row.len() != m.n) {
                        return Err(Error::InvalidInput(format!(
                            "V for z = {:?} must be {}x{}",
                            e.z, m.n, m.n
                        )));
                    }
                    let mat = DMatrix::from_fn(m.n, m.n, |r, c| e.v[r][c]);
                    entries.push((e.z.clone(), mat));
                }
                InteractionMatrix::new(m.d, m.n, entries)
            }
        }
    }
}

impl From<&InteractionMatrix> for ModelSpec {
    fn from(v: &InteractionMatrix) -> Self {
        ModelSpec::Explicit(ExplicitModel {
            d: v.d,
            n: v.n,
            entries: v
                .support
                .iter()
                .map(|(z, m)| ModelEntry {
                    z: z.clone(),
                    v: (0..v.n).map(|r| (0..v.n).map(|c| m[(r, c)]).collect()).collect(),
                })
                .collect(),
        })
    }
}
