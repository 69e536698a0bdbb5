//! Time-evolved covariances (Monte Carlo and exact), the limit covariance
//! `q̂∞`, finitely supported test functions avoiding the critical set,
//! quadratic forms and Gaussianity diagnostics.

use std::collections::HashMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldState;
use crate::grid::{real_part_checked, TorusGrid, Transform};
use crate::lattice::{critical_set, CMat, DispersionData, OMEGA_FLOOR};
use crate::propagator::{evolve_covariance_spectral, horizon, periodic_green_function, Dynamics};
use crate::random_fields::{
    clipped_density, GaussianSampler, SpectralDensity, TwoTempSampler, TwoTempSpec,
};
use crate::stats::{self, Estimate, MomentReport};

/// Default tolerance below which `∂ω/∂θ_d` is treated as zero.
pub const SIGN_TOL: f64 = 1e-8;

/// Leak of a certified test function's spectrum onto the critical mask.
pub const LEAK_TOL: f64 = 1e-8;

/// Initial measure of an ensemble: stationary or glued, optionally clipped.
#[derive(Clone, Debug)]
pub enum InitialMeasure {
    Stationary(SpectralDensity),
    TwoTemperature(TwoTempSpec),
}

impl InitialMeasure {
    pub fn grid(&self) -> TorusGrid {
        match self {
            InitialMeasure::Stationary(q) => q.grid(),
            InitialMeasure::TwoTemperature(s) => s.grid(),
        }
    }

    pub fn components(&self) -> usize {
        match self {
            InitialMeasure::Stationary(q) => q.components(),
            InitialMeasure::TwoTemperature(s) => s.components(),
        }
    }

    /// `(q₊, q₋)`; a stationary measure has both sides equal.
    pub fn sides(&self) -> (&SpectralDensity, &SpectralDensity) {
        match self {
            InitialMeasure::Stationary(q) => (q, q),
            InitialMeasure::TwoTemperature(s) => (&s.plus, &s.minus),
        }
    }
}

/// Initial measure together with the optional odd clipping transform.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub measure: InitialMeasure,
    pub clip: Option<f64>,
}

impl Ensemble {
    pub fn gaussian(measure: InitialMeasure) -> Self {
        Ensemble { measure, clip: None }
    }

    /// Covariance densities `(q₊, q₋)` of the (possibly clipped) measure.
    pub fn covariance_sides(&self) -> Result<(SpectralDensity, SpectralDensity)> {
        let (p, m) = self.measure.sides();
        match self.clip {
            None => Ok((p.clone(), m.clone())),
            Some(c) => Ok((clipped_density(p, c)?, clipped_density(m, c)?)),
        }
    }

    /// A Gaussian measure with the same initial covariance as the ensemble.
    ///
    /// Clipping commutes with gluing only for a sharp seam, so a clipped
    /// two-temperature ensemble with a ramp has no such representation here.
    pub fn covariance_measure(&self) -> Result<InitialMeasure> {
        let Some(c) = self.clip else { return Ok(self.measure.clone()) };
        match &self.measure {
            InitialMeasure::Stationary(q) => Ok(InitialMeasure::Stationary(clipped_density(q, c)?)),
            InitialMeasure::TwoTemperature(s) if s.cutoff == 0 => Ok(InitialMeasure::TwoTemperature(
                TwoTempSpec::new(clipped_density(&s.minus, c)?, clipped_density(&s.plus, c)?, 0)?,
            )),
            InitialMeasure::TwoTemperature(_) => Err(Error::InvalidInput(
                "clipped glued fields have a closed-form covariance only for a sharp seam".into(),
            )),
        }
    }

    pub fn sampler(&self) -> Result<EnsembleSampler> {
        let inner = match &self.measure {
            InitialMeasure::Stationary(q) => SamplerKind::Stationary(GaussianSampler::new(q)?),
            InitialMeasure::TwoTemperature(s) => SamplerKind::TwoTemp(Box::new(TwoTempSampler::new(s)?)),
        };
        Ok(EnsembleSampler {
            inner,
            clip: self.clip,
        })
    }
}

#[derive(Clone, Debug)]
enum SamplerKind {
    Stationary(GaussianSampler),
    TwoTemp(Box<TwoTempSampler>),
}

#[derive(Clone, Debug)]
pub struct EnsembleSampler {
    inner: SamplerKind,
    clip: Option<f64>,
}

impl EnsembleSampler {
    /// Member `index` of the ensemble seeded by `seed`.
    pub fn sample(&self, seed: u64, index: u64) -> Result<FieldState> {
        let y = match &self.inner {
            SamplerKind::Stationary(s) => s.sample(seed, index)?,
            SamplerKind::TwoTemp(s) => s.sample(seed, index)?,
        };
        match self.clip {
            None => Ok(y),
            Some(c) => crate::random_fields::nongaussian_transform(&y, c),
        }
    }
}

/// Runs `f` on ensemble members `0..m` in parallel and returns the results
/// in index order, so that any later reduction is thread-count independent.
pub fn ensemble_map<T: Send>(
    m: usize,
    f: impl Fn(u64) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    (0..m as u64).into_par_iter().map(f).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mc,
    Exact,
    Spectral,
    Limit,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Mc => "mc",
            Method::Exact => "exact",
            Method::Spectral => "spectral",
            Method::Limit => "limit",
        }
    }
}

/// `Q^{ij}(x, y)` as one `2n × 2n` matrix per site pair.
#[derive(Clone, Debug)]
pub struct CovarianceEntry {
    pub x: usize,
    pub y: usize,
    pub value: DMatrix<f64>,
    pub stderr: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct CovarianceEstimate {
    grid: TorusGrid,
    n: usize,
    pub t: f64,
    pub samples: usize,
    pub method: Method,
    pub within_horizon: bool,
    entries: Vec<CovarianceEntry>,
    index: HashMap<(usize, usize), usize>,
}

impl CovarianceEstimate {
    fn new(
        grid: TorusGrid,
        n: usize,
        t: f64,
        samples: usize,
        method: Method,
        within_horizon: bool,
        entries: Vec<CovarianceEntry>,
    ) -> Self {
        let index = entries.iter().enumerate().map(|(k, e)| ((e.x, e.y), k)).collect();
        CovarianceEstimate {
            grid,
            n,
            t,
            samples,
            method,
            within_horizon,
            entries,
            index,
        }
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn components(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[CovarianceEntry] {
        &self.entries
    }

    pub fn get(&self, x: usize, y: usize) -> Option<&CovarianceEntry> {
        self.index.get(&(x, y)).map(|&k| &self.entries[k])
    }

    /// Largest `|Q(x, y) - Q(y, x)^T|` over pairs present in both orders,
    /// in units of the combined standard error when one is reported.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for e in &self.entries {
            let Some(f) = self.get(e.y, e.x) else { continue };
            for r in 0..2 * self.n {
                for c in 0..2 * self.n {
                    let diff = (e.value[(r, c)] - f.value[(c, r)]).abs();
                    let se = (e.stderr[(r, c)].powi(2) + f.stderr[(c, r)].powi(2)).sqrt();
                    worst = worst.max(if se > 0.0 { diff / se } else { diff });
                }
            }
        }
        worst
    }
}

fn site_vector(y: &FieldState, site: usize) -> Vec<f64> {
    let n = y.components();
    let mut out = Vec::with_capacity(2 * n);
    out.extend_from_slice(&y.u[site * n..(site + 1) * n]);
    out.extend_from_slice(&y.v[site * n..(site + 1) * n]);
    out
}

/// Ensemble estimate of `E Y(x, t) ⊗ Y(y, t)` at the requested pairs.
pub fn mc_covariance(
    ensemble: &Ensemble,
    dynamics: &Dynamics,
    t: f64,
    pairs: &[(usize, usize)],
    samples: usize,
    seed: u64,
) -> Result<CovarianceEstimate> {
    if samples < 2 {
        return Err(Error::InvalidInput("an ensemble needs at least two samples".into()));
    }
    let g = dynamics.grid();
    if ensemble.measure.grid() != g {
        return Err(Error::GridMismatch {
            expected: g.to_string(),
            found: ensemble.measure.grid().to_string(),
        });
    }
    let n = ensemble.measure.components();
    let dim = 2 * n;
    let within_horizon = crate::propagator::check_horizon(dynamics.dispersion(), t);
    let sampler = ensemble.sampler()?;
    let symbol = dynamics.symbol(t);
    let products = ensemble_map(samples, |i| {
        let y0 = sampler.sample(seed, i)?;
        let y = dynamics.evolve_with(&y0, &symbol)?;
        let mut out = Vec::with_capacity(pairs.len() * dim * dim);
        for &(x, z) in pairs {
            let a = site_vector(&y, x);
            let b = site_vector(&y, z);
            for ar in &a {
                for bc in &b {
                    out.push(ar * bc);
                }
            }
        }
        Ok(out)
    })?;
    let width = pairs.len() * dim * dim;
    let mut columns = vec![Vec::with_capacity(samples); width];
    for p in &products {
        for (col, &x) in columns.iter_mut().zip(p) {
            col.push(x);
        }
    }
    let est: Vec<Estimate> = columns.iter().map(|c| stats::mean(c)).collect();
    let entries = pairs
        .iter()
        .enumerate()
        .map(|(k, &(x, y))| {
            let base = k * dim * dim;
            CovarianceEntry {
                x,
                y,
                value: DMatrix::from_fn(dim, dim, |r, c| est[base + r * dim + c].value),
                stderr: DMatrix::from_fn(dim, dim, |r, c| est[base + r * dim + c].stderr),
            }
        })
        .collect();
    Ok(CovarianceEstimate::new(g, n, t, samples, Method::Mc, within_horizon, entries))
}

/// Noise-free `Q_t(x, y) = Σ G_t(x - x′) Q₀(x′, y′) G_t(y - y′)^T` for every
/// pair of `sites`, with `Q₀` the covariance of `measure` (Gaussian part).
///
/// Green-function entries below `1e-14` of its largest entry are dropped.
pub fn exact_covariance_propagation(
    measure: &InitialMeasure,
    dynamics: &Dynamics,
    t: f64,
    sites: &[usize],
) -> Result<CovarianceEstimate> {
    let data = dynamics.dispersion();
    let g = data.grid();
    if measure.grid() != g {
        return Err(Error::GridMismatch {
            expected: g.to_string(),
            found: measure.grid().to_string(),
        });
    }
    let h = horizon(data);
    if t.abs() > h {
        return Err(Error::HorizonExceeded { t, horizon: h });
    }
    let n = measure.components();
    let dim = 2 * n;
    let gf = periodic_green_function(data, t)?;
    let gmax = gf.window().map(|(_, m)| m.abs().max()).fold(0.0, f64::max);
    let kernel: Vec<(Vec<i64>, DMatrix<f64>)> = gf
        .window()
        .filter(|(_, m)| m.abs().max() >= 1e-14 * gmax)
        .map(|(z, m)| (z, m.clone()))
        .collect();

    let transform = dynamics.transform();
    // (weights ζ(site), spectral density) for each side of the seam.
    let sides: Vec<(Vec<f64>, &SpectralDensity)> = match measure {
        InitialMeasure::Stationary(q) => vec![(vec![1.0; g.len()], q)],
        InitialMeasure::TwoTemperature(s) => {
            let w: Vec<(f64, f64)> = (0..g.len()).map(|x| s.weights(x)).collect();
            vec![
                (w.iter().map(|p| p.0).collect(), &s.minus),
                (w.iter().map(|p| p.1).collect(), &s.plus),
            ]
        }
    };

    // B_y(x′) = Σ_± ζ_±(x′) Σ_{y′} q_±(x′ - y′) ζ_±(y′) G_t(y - y′)^T.
    let b_of = |y: usize| -> Result<Vec<DMatrix<f64>>> {
        let yc: Vec<i64> = g.multi_index(y).iter().map(|&c| c as i64).collect();
        let mut b = vec![DMatrix::zeros(dim, dim); g.len()];
        for (zeta, q) in &sides {
            // ĥ[k][c] = F[ζ(y′) G(y - y′)[c][k]].
            let mut hhat = vec![vec![Vec::new(); dim]; dim];
            for (k, row) in hhat.iter_mut().enumerate() {
                for (c, slot) in row.iter_mut().enumerate() {
                    let mut plane = vec![Complex64::new(0.0, 0.0); g.len()];
                    for (z, m) in &kernel {
                        let yp: Vec<i64> = yc.iter().zip(z).map(|(a, b)| a - b).collect();
                        let site = g.wrap(&yp);
                        plane[site] = Complex64::new(zeta[site] * m[(c, k)], 0.0);
                    }
                    transform.to_spectral(&mut plane);
                    *slot = plane;
                }
            }
            for r in 0..dim {
                for c in 0..dim {
                    let mut plane = vec![Complex64::new(0.0, 0.0); g.len()];
                    for (k, hk) in hhat.iter().enumerate() {
                        for (node, p) in plane.iter_mut().enumerate() {
                            *p += q.node(node)[(r, k)] * hk[c][node];
                        }
                    }
                    transform.to_spatial(&mut plane);
                    let real = real_part_checked(&plane, 1e-9, "covariance convolution")?;
                    for (site, x) in real.into_iter().enumerate() {
                        b[site][(r, c)] += zeta[site] * x;
                    }
                }
            }
        }
        Ok(b)
    };

    let per_y: Vec<Vec<CovarianceEntry>> = sites
        .par_iter()
        .map(|&y| {
            let b = b_of(y)?;
            let entries = sites
                .iter()
                .map(|&x| {
                    let xc: Vec<i64> = g.multi_index(x).iter().map(|&c| c as i64).collect();
                    let mut q = DMatrix::zeros(dim, dim);
                    for (z, m) in &kernel {
                        let xp: Vec<i64> = xc.iter().zip(z).map(|(a, b)| a - b).collect();
                        q += m * &b[g.wrap(&xp)];
                    }
                    CovarianceEntry {
                        x,
                        y,
                        value: q,
                        stderr: DMatrix::zeros(dim, dim),
                    }
                })
                .collect();
            Ok(entries)
        })
        .collect::<Result<_>>()?;
    let entries = per_y.into_iter().flatten().collect();
    Ok(CovarianceEstimate::new(g, n, t, 0, Method::Exact, true, entries))
}

/// Translation-invariant covariance at the given pairs from a spectral density.
pub fn covariance_from_density(
    q: &SpectralDensity,
    t: f64,
    pairs: &[(usize, usize)],
    method: Method,
) -> Result<CovarianceEstimate> {
    let g = q.grid();
    let real = q.real_space(&Transform::new(g))?;
    let dim = 2 * q.components();
    let entries = pairs
        .iter()
        .map(|&(x, y)| {
            let d: Vec<i64> = g
                .multi_index(x)
                .iter()
                .zip(g.multi_index(y))
                .map(|(&a, b)| a as i64 - b as i64)
                .collect();
            CovarianceEntry {
                x,
                y,
                value: real[g.wrap(&d)].clone(),
                stderr: DMatrix::zeros(dim, dim),
            }
        })
        .collect();
    Ok(CovarianceEstimate::new(g, q.components(), t, 0, method, true, entries))
}

/// `q̂∞ = q̂∞⁺ + q̂∞⁻` on every node.
#[derive(Clone, Debug)]
pub struct LimitCovariance {
    grid: TorusGrid,
    n: usize,
    plus: Vec<CMat>,
    minus: Vec<CMat>,
}

impl LimitCovariance {
    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn components(&self) -> usize {
        self.n
    }

    /// Even part `q̂∞⁺(θ_k)`.
    pub fn plus(&self, k: usize) -> &CMat {
        &self.plus[k]
    }

    /// Odd part `q̂∞⁻(θ_k)`.
    pub fn minus(&self, k: usize) -> &CMat {
        &self.minus[k]
    }

    pub fn node(&self, k: usize) -> CMat {
        &self.plus[k] + &self.minus[k]
    }

    /// The `n × n` block `q̂∞^{ij}(θ_k)`.
    pub fn block(&self, k: usize, i: usize, j: usize) -> CMat {
        self.node(k).view((i * self.n, j * self.n), (self.n, self.n)).into_owned()
    }

    pub fn density(&self) -> Result<SpectralDensity> {
        let blocks = (0..self.grid.len()).map(|k| self.node(k)).collect();
        SpectralDensity::new(self.grid, self.n, blocks, None, "limit")
    }

    /// Real-space `q∞(z)` on the whole torus.
    pub fn real_space(&self) -> Result<Vec<DMatrix<f64>>> {
        self.density()?.real_space(&Transform::new(self.grid))
    }
}

/// `Ĉ(θ) = [[0, Ω⁻¹], [-Ω, 0]]`, or `None` when `Ω` is singular.
fn c_hat(s: &crate::lattice::NodeSpectrum, n: usize) -> Option<CMat> {
    if s.is_singular() {
        return None;
    }
    let mut c = CMat::zeros(2 * n, 2 * n);
    c.view_mut((0, n), (n, n)).copy_from(&s.matrix_function(|w| 1.0 / w));
    c.view_mut((n, 0), (n, n)).copy_from(&(-s.omega_matrix()));
    Some(c)
}

/// Limit covariance of the glued measure with sides `q_plus`, `q_minus`:
///
/// ```text
/// 𝐪± = (q̂₊ ± q̂₋)/2
/// M₀⁺ = ½(𝐪⁺ + Ĉ 𝐪⁺ Ĉ*)        M₀⁻ = ½(Ĉ 𝐪⁻ - 𝐪⁻ Ĉ*)
/// q̂∞⁺ = Σ_σ Π̃_σ M₀⁺ Π̃_σ         q̂∞⁻ = Σ_σ i sgn(∂_d ω_σ) Π̃_σ M₀⁻ Π̃_σ
/// ```
///
/// with `Π̃_σ = diag(Π_σ, Π_σ)` and the sign taken as zero where
/// `|∂_d ω_σ| < sign_tol`.
pub fn limit_covariance(
    data: &DispersionData,
    q_plus: &SpectralDensity,
    q_minus: &SpectralDensity,
    sign_tol: f64,
) -> Result<LimitCovariance> {
    q_plus.same_shape(q_minus)?;
    let g = data.grid();
    if q_plus.grid() != g || q_plus.components() != data.components() {
        return Err(Error::GridMismatch {
            expected: format!("{} with n = {}", g, data.components()),
            found: format!("{} with n = {}", q_plus.grid(), q_plus.components()),
        });
    }
    let n = data.components();
    let half = Complex64::new(0.5, 0.0);
    let parts: Vec<(CMat, CMat)> = (0..g.len())
        .into_par_iter()
        .map(|k| {
            let s = data.node(k);
            let qp = (q_plus.node(k) + q_minus.node(k)) * half;
            let qm = (q_plus.node(k) - q_minus.node(k)) * half;
            let Some(c) = c_hat(s, n) else {
                if qp.norm() + qm.norm() > 0.0 {
                    return Err(Error::SingularSymbol {
                        node: k,
                        theta: g.theta(k),
                    });
                }
                return Ok((CMat::zeros(2 * n, 2 * n), CMat::zeros(2 * n, 2 * n)));
            };
            let cs = c.adjoint();
            let m_plus = (&qp + &c * &qp * &cs) * half;
            let m_minus = (&c * &qm - &qm * &cs) * half;
            let mut plus = CMat::zeros(2 * n, 2 * n);
            let mut minus = CMat::zeros(2 * n, 2 * n);
            for cl in &s.clusters {
                let mut p = CMat::zeros(2 * n, 2 * n);
                p.view_mut((0, 0), (n, n)).copy_from(&cl.projection);
                p.view_mut((n, n), (n, n)).copy_from(&cl.projection);
                plus += &p * &m_plus * &p;
                let sgn = DispersionData::velocity_sign(cl, sign_tol);
                if sgn != 0.0 {
                    minus += &p * &m_minus * &p * Complex64::new(0.0, sgn);
                }
            }
            Ok((plus, minus))
        })
        .collect::<Result<_>>()?;
    let (plus, minus) = parts.into_iter().unzip();
    Ok(LimitCovariance { grid: g, n, plus, minus })
}

/// Real-space limit covariance of a scalar elastic lattice from its
/// convolution form with `ℰ = F⁻¹ω⁻²` and `P = -i F⁻¹(sgn(sin θ_d)/ω)`.
///
/// Returns `q∞(z)` as a `2 × 2` matrix for every `‖z‖_∞ ≤ window`.
pub fn scalar_limit_covariance(
    m: f64,
    q_plus: &SpectralDensity,
    q_minus: &SpectralDensity,
    window: usize,
) -> Result<Vec<(Vec<i64>, DMatrix<f64>)>> {
    q_plus.same_shape(q_minus)?;
    if q_plus.components() != 1 {
        return Err(Error::InvalidInput("the convolution form needs n = 1".into()));
    }
    let g = q_plus.grid();
    let d = g.dim();
    if 2 * (window + 1) >= g.points() {
        return Err(Error::WindowTooLarge {
            radius: window,
            points: g.points(),
        });
    }
    let transform = Transform::new(g);
    let half_n = g.points() / 2;
    let mut e_hat = Vec::with_capacity(g.len());
    let mut p_hat = Vec::with_capacity(g.len());
    for k in 0..g.len() {
        let th = g.theta(k);
        let w2: f64 = th.iter().map(|t| 2.0 * (1.0 - t.cos())).sum::<f64>() + m * m;
        if w2.sqrt() < OMEGA_FLOOR {
            return Err(Error::SingularSymbol { node: k, theta: th });
        }
        e_hat.push(Complex64::new(1.0 / w2, 0.0));
        let md = g.multi_index(k)[d - 1];
        let sgn = if md == 0 || md == half_n { 0.0 } else { th[d - 1].sin().signum() };
        p_hat.push(Complex64::new(0.0, -sgn / w2.sqrt()));
    }
    transform.to_spatial(&mut e_hat);
    transform.to_spatial(&mut p_hat);
    let e = real_part_checked(&e_hat, 1e-10, "fundamental solution")?;
    let p = real_part_checked(&p_hat, 1e-10, "sign kernel")?;

    let real_plus = q_plus.real_space(&transform)?;
    let real_minus = q_minus.real_space(&transform)?;
    let bold = |i: usize, j: usize, sign: f64| -> Vec<f64> {
        real_plus
            .iter()
            .zip(&real_minus)
            .map(|(a, b)| 0.5 * (a[(i, j)] + sign * b[(i, j)]))
            .collect()
    };
    let (p00, p01, p10, p11) = (bold(0, 0, 1.0), bold(0, 1, 1.0), bold(1, 0, 1.0), bold(1, 1, 1.0));
    let (m00, m01, m10, m11) = (bold(0, 0, -1.0), bold(0, 1, -1.0), bold(1, 0, -1.0), bold(1, 1, -1.0));

    // (-Δ + m²) f on the torus.
    let laplace = |f: &[f64]| -> Vec<f64> {
        (0..g.len())
            .map(|x| {
                let mut acc = (2.0 * d as f64 + m * m) * f[x];
                for a in 0..d {
                    acc -= f[g.shift(x, a, 1)] + f[g.shift(x, a, -1)];
                }
                acc
            })
            .collect()
    };
    // (k * f)(z) = Σ_y k(z - y) f(y), direct sum.
    let conv_at = |k: &[f64], f: &[f64], z: &[i64]| -> f64 {
        (0..g.len())
            .filter(|&y| f[y] != 0.0)
            .map(|y| {
                let yc = g.multi_index(y);
                let diff: Vec<i64> = z.iter().zip(&yc).map(|(&a, &b)| a - b as i64).collect();
                k[g.wrap(&diff)] * f[y]
            })
            .sum()
    };
    let odd00: Vec<f64> = m01.iter().zip(&m10).map(|(a, b)| a - b).collect();
    let odd10: Vec<f64> = m11.iter().zip(laplace(&m00)).map(|(a, b)| a + b).collect();

    let r = window as i64 + 1;
    let mut offsets = Vec::new();
    for site in 0..g.len() {
        let z = g.signed_coords(site);
        if z.iter().all(|c| c.abs() <= r) {
            offsets.push(z);
        }
    }
    let mut q00 = vec![0.0; g.len()];
    let mut q10 = HashMap::new();
    let values: Vec<(usize, f64, f64)> = offsets
        .par_iter()
        .map(|z| {
            let s = g.wrap(z);
            let a = 0.5 * (p00[s] + conv_at(&e, &p11, z) + conv_at(&p, &odd00, z));
            let b = 0.5 * (p10[s] - p01[s] + conv_at(&p, &odd10, z));
            (s, a, b)
        })
        .collect();
    for (s, a, b) in values {
        q00[s] = a;
        q10.insert(s, b);
    }
    let mut out = Vec::new();
    for z in offsets.iter().filter(|z| z.iter().all(|c| c.unsigned_abs() as usize <= window)) {
        let s = g.wrap(z);
        // q^{11} = (-Δ + m²) q^{00}, from neighbours inside the enlarged window.
        let mut q11 = (2.0 * d as f64 + m * m) * q00[s];
        for a in 0..d {
            q11 -= q00[g.shift(s, a, 1)] + q00[g.shift(s, a, -1)];
        }
        let b = q10[&s];
        out.push((z.clone(), DMatrix::from_row_slice(2, 2, &[q00[s], -b, b, q11])));
    }
    Ok(out)
}

/// Finitely supported test function `Ψ = (Ψ⁰, Ψ¹)` with its spectrum.
#[derive(Clone, Debug)]
pub struct TestFunction {
    psi: FieldState,
    radius: usize,
    spectrum: Vec<Vec<Complex64>>,
    /// Largest `|Ψ̂|` on the critical mask relative to `max |Ψ̂|`.
    pub leak: f64,
    pub certified: bool,
    pub theta0: Vec<f64>,
    pub width: f64,
}

impl TestFunction {
    pub fn field(&self) -> &FieldState {
        &self.psi
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    /// Spectral planes `[Ψ̂⁰_1..Ψ̂⁰_n, Ψ̂¹_1..Ψ̂¹_n]`.
    pub fn spectrum(&self) -> &[Vec<Complex64>] {
        &self.spectrum
    }

    pub fn grid(&self) -> TorusGrid {
        self.psi.grid()
    }

    /// Sites where `Ψ` may be nonzero.
    pub fn support(&self) -> Vec<usize> {
        let g = self.grid();
        let r = self.radius as i64;
        (0..g.len())
            .filter(|&s| g.signed_coords(s).iter().all(|c| c.abs() <= r))
            .collect()
    }

    /// Builds a test function from explicit site values.
    pub fn from_field(psi: FieldState, radius: usize) -> Result<Self> {
        let g = psi.grid();
        let r = radius as i64;
        for site in 0..g.len() {
            if g.signed_coords(site).iter().any(|c| c.abs() > r) {
                let n = psi.components();
                if psi.u[site * n..(site + 1) * n].iter().chain(&psi.v[site * n..(site + 1) * n]).any(|&x| x != 0.0) {
                    return Err(Error::InvalidInput(format!("test function is nonzero outside radius {radius}")));
                }
            }
        }
        let spectrum = psi.to_spectral(&Transform::new(g));
        Ok(TestFunction {
            psi,
            radius,
            spectrum,
            leak: f64::NAN,
            certified: false,
            theta0: Vec::new(),
            width: 0.0,
        })
    }
}

/// Description of a test function for [`make_test_function`].
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TestFunctionSpec {
    pub theta0: Vec<f64>,
    pub width: f64,
    /// Spatial truncation radius; chosen automatically when absent.
    #[serde(default)]
    pub support_radius: Option<usize>,
    /// Weights of the `2n` components `(Ψ⁰, Ψ¹)`; defaults to `Ψ⁰_1` only.
    #[serde(default)]
    pub polarization: Option<Vec<f64>>,
}

fn periodic_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = (x - y).rem_euclid(2.0 * std::f64::consts::PI);
            let d = d.min(2.0 * std::f64::consts::PI - d);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Flat-top profile that falls from 1 to below `1e-10` at radius `width`.
fn bump_profile(r: f64, width: f64) -> f64 {
    let eps = 0.1 * width;
    let plateau = width - 4.5 * eps;
    0.5 * statrs::function::erf::erfc((r - plateau) / eps)
}

/// Test function whose spectrum is a smooth bump at `±θ₀` of radius
/// `width`, truncated in space and re-checked against the critical mask.
pub fn make_test_function(
    data: &DispersionData,
    spec: &TestFunctionSpec,
    critical_tol: f64,
) -> Result<TestFunction> {
    let g = data.grid();
    let d = g.dim();
    let n = data.components();
    if spec.theta0.len() != d {
        return Err(Error::InvalidInput(format!("theta0 must have {d} components")));
    }
    if !(spec.width > 0.0) {
        return Err(Error::InvalidInput("width must be positive".into()));
    }
    let pol = match &spec.polarization {
        Some(p) if p.len() == 2 * n => p.clone(),
        Some(p) => {
            return Err(Error::InvalidInput(format!(
                "polarization has {} entries, expected {}",
                p.len(),
                2 * n
            )))
        }
        None => {
            let mut p = vec![0.0; 2 * n];
            p[0] = 1.0;
            p
        }
    };
    let mask = critical_set(data, critical_tol).mask();
    let minus: Vec<f64> = spec.theta0.iter().map(|t| -t).collect();
    let dist = |k: usize| {
        let th = g.theta(k);
        periodic_distance(&th, &spec.theta0).min(periodic_distance(&th, &minus))
    };
    if let Some(bad) = (0..g.len()).find(|&k| mask[k] && dist(k) < spec.width) {
        let masked: Vec<Vec<f64>> = (0..g.len()).filter(|&j| mask[j]).map(|j| g.theta(j)).collect();
        let mut candidates: Vec<(f64, usize)> = (0..g.len())
            .filter(|&k| !mask[k])
            .map(|k| (periodic_distance(&g.theta(k), &spec.theta0), k))
            .collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0));
        let suggestion = candidates.into_iter().map(|(_, k)| k).find(|&k| {
            let c = g.theta(k);
            let cm: Vec<f64> = c.iter().map(|t| -t).collect();
            masked.iter().all(|m| {
                periodic_distance(m, &c) >= spec.width && periodic_distance(m, &cm) >= spec.width
            })
        });
        let hint = match suggestion {
            Some(k) => format!("; nearest admissible centre is {:?}", g.theta(k)),
            None => "; no admissible centre for this width".into(),
        };
        return Err(Error::TestFunctionRejected {
            reason: format!(
                "bump of width {} around {:?} reaches the critical node {:?}{hint}",
                spec.width,
                spec.theta0,
                g.theta(bad)
            ),
        });
    }

    let transform = Transform::new(g);
    let profile: Vec<f64> = (0..g.len())
        .map(|k| {
            let th = g.theta(k);
            bump_profile(periodic_distance(&th, &spec.theta0), spec.width)
                + bump_profile(periodic_distance(&th, &minus), spec.width)
        })
        .collect();
    let mut plane: Vec<Complex64> = profile.iter().map(|&b| Complex64::new(b, 0.0)).collect();
    transform.to_spatial(&mut plane);
    let shape = real_part_checked(&plane, 1e-10, "test function")?;

    let build = |radius: usize| -> Result<(FieldState, Vec<Vec<Complex64>>, f64)> {
        let r = radius as i64;
        let mut u = vec![0.0; g.len() * n];
        let mut v = vec![0.0; g.len() * n];
        for site in 0..g.len() {
            if g.signed_coords(site).iter().any(|c| c.abs() > r) {
                continue;
            }
            for a in 0..n {
                u[site * n + a] = pol[a] * shape[site];
                v[site * n + a] = pol[n + a] * shape[site];
            }
        }
        let psi = FieldState::new(g, n, u, v)?;
        let spectrum = psi.to_spectral(&transform);
        let mut peak: f64 = 0.0;
        let mut on_mask: f64 = 0.0;
        for k in 0..g.len() {
            let mag = spectrum.iter().map(|p| p[k].norm_sqr()).sum::<f64>().sqrt();
            peak = peak.max(mag);
            if mask[k] {
                on_mask = on_mask.max(mag);
            }
        }
        Ok((psi, spectrum, if peak > 0.0 { on_mask / peak } else { f64::INFINITY }))
    };

    let max_radius = g.points() / 2 - 1;
    let radius = match spec.support_radius {
        Some(r) if r > max_radius => {
            return Err(Error::WindowTooLarge {
                radius: r,
                points: g.points(),
            })
        }
        Some(r) => r,
        None => {
            let mut hi = 2.min(max_radius);
            while hi < max_radius && build(hi)?.2 >= LEAK_TOL {
                hi = (2 * hi).min(max_radius);
            }
            let mut lo = hi / 2;
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if build(mid)?.2 < LEAK_TOL {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            hi
        }
    };
    let (psi, spectrum, leak) = build(radius)?;
    Ok(TestFunction {
        psi,
        radius,
        spectrum,
        leak,
        certified: leak < LEAK_TOL,
        theta0: spec.theta0.clone(),
        width: spec.width,
    })
}

/// `N^{-d} Σ_θ Ψ̂(θ)* q̂(θ) Ψ̂(θ)` for a translation-invariant kernel given
/// node by node.
pub fn quadratic_form_spectral(blocks: &[CMat], psi: &TestFunction) -> Result<f64> {
    let g = psi.grid();
    if blocks.len() != g.len() {
        return Err(Error::GridMismatch {
            expected: format!("{} nodes", g.len()),
            found: format!("{} nodes", blocks.len()),
        });
    }
    let spec = psi.spectrum();
    let dim = spec.len();
    let mut total = Complex64::new(0.0, 0.0);
    let mut scale = 0.0;
    for (k, q) in blocks.iter().enumerate() {
        for r in 0..dim {
            for c in 0..dim {
                let term = spec[r][k].conj() * q[(r, c)] * spec[c][k];
                total += term;
                scale += term.norm();
            }
        }
    }
    let volume = g.len() as f64;
    if total.im.abs() > 1e-9 * scale.max(f64::MIN_POSITIVE) && total.im.abs() > 1e-300 {
        return Err(Error::ImaginaryResidue {
            what: "quadratic form".into(),
            residue: total.im.abs() / volume,
            scale: scale / volume,
        });
    }
    Ok(total.re / volume)
}

/// `𝒬(Ψ, Ψ) = Σ_{x,y} (Q(x, y) Ψ(y), Ψ(x))` from a real-space estimate,
/// with its standard error (independent-entry propagation).
pub fn quadratic_form(cov: &CovarianceEstimate, psi: &TestFunction) -> Result<Estimate> {
    let support = psi.support();
    let f = psi.field();
    let mut value = 0.0;
    let mut var = 0.0;
    for &x in &support {
        let a = site_vector(f, x);
        if a.iter().all(|&v| v == 0.0) {
            continue;
        }
        for &y in &support {
            let b = site_vector(f, y);
            if b.iter().all(|&v| v == 0.0) {
                continue;
            }
            let e = cov.get(x, y).ok_or_else(|| {
                Error::InvalidInput(format!("covariance estimate lacks the pair ({x}, {y})"))
            })?;
            for (r, ar) in a.iter().enumerate() {
                for (c, bc) in b.iter().enumerate() {
                    value += ar * e.value[(r, c)] * bc;
                    var += (ar * e.stderr[(r, c)] * bc).powi(2);
                }
            }
        }
    }
    Ok(Estimate {
        value,
        stderr: var.sqrt(),
    })
}

/// `𝒬_t(Ψ, Ψ)` for a translation-invariant initial density, exactly.
pub fn quadratic_form_at(
    q: &SpectralDensity,
    data: &DispersionData,
    psi: &TestFunction,
    t: f64,
) -> Result<f64> {
    let qt = evolve_covariance_spectral(q, data, t)?;
    quadratic_form_spectral(qt.blocks(), psi)
}

impl LimitCovariance {
    pub fn quadratic_form(&self, psi: &TestFunction) -> Result<f64> {
        let blocks: Vec<CMat> = (0..self.grid.len()).map(|k| self.node(k)).collect();
        quadratic_form_spectral(&blocks, psi)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EcfRow {
    pub lambda: f64,
    pub re: Estimate,
    pub im: Estimate,
    pub target: f64,
}

impl EcfRow {
    /// Largest deviation from the Gaussian target in standard errors.
    pub fn z_score(&self) -> f64 {
        self.re.z_score(self.target).max(self.im.z_score(0.0))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CltReport {
    pub t: f64,
    pub samples: usize,
    pub q_limit: f64,
    pub moments: MomentReport,
    pub ecf: Vec<EcfRow>,
}

/// Samples `⟨Y(t), Ψ⟩` over an ensemble (one evolution per member) and
/// compares it with the Gaussian law of variance `𝒬∞(Ψ, Ψ)`.
///
/// The characteristic function is probed at `λ = f · 𝒬∞^{-1/2}` for each
/// factor `f`.
pub fn clt_diagnostics(
    ensemble: &Ensemble,
    dynamics: &Dynamics,
    psi: &TestFunction,
    t: f64,
    samples: usize,
    seed: u64,
    factors: &[f64],
) -> Result<CltReport> {
    if !psi.certified {
        return Err(Error::TestFunctionRejected {
            reason: format!("spectral leak {:e} onto the critical set is too large", psi.leak),
        });
    }
    if samples < 2 {
        return Err(Error::InvalidInput("an ensemble needs at least two samples".into()));
    }
    crate::propagator::check_horizon(dynamics.dispersion(), t);
    let (qp, qm) = ensemble.covariance_sides()?;
    let lim = limit_covariance(dynamics.dispersion(), &qp, &qm, SIGN_TOL)?;
    let q_limit = lim.quadratic_form(psi)?;
    let xs = pairing_samples(ensemble, dynamics, psi, t, samples, seed)?;
    let ecf = factors
        .iter()
        .map(|&f| {
            let lambda = f / q_limit.sqrt();
            let (re, im) = stats::characteristic_function(&xs, lambda);
            EcfRow {
                lambda,
                re,
                im,
                target: (-0.5 * lambda * lambda * q_limit).exp(),
            }
        })
        .collect();
    Ok(CltReport {
        t,
        samples,
        q_limit,
        moments: stats::moments(&xs),
        ecf,
    })
}

/// `⟨Y_i(t), Ψ⟩` for ensemble members `i = 0..samples`, in index order.
pub fn pairing_samples(
    ensemble: &Ensemble,
    dynamics: &Dynamics,
    psi: &TestFunction,
    t: f64,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let sampler = ensemble.sampler()?;
    let symbol = dynamics.symbol(t);
    let support = psi.support();
    let f = psi.field();
    let n = f.components();
    ensemble_map(samples, |i| {
        let y0 = sampler.sample(seed, i)?;
        let y = if t == 0.0 { y0 } else { dynamics.evolve_with(&y0, &symbol)? };
        let mut acc = 0.0;
        for &s in &support {
            for a in 0..n {
                let k = s * n + a;
                acc += y.u[k] * f.u[k] + y.v[k] * f.v[k];
            }
        }
        Ok(acc)
    })
}
