//! Translation-invariant Gaussian measures given by spectral densities, Gibbs
//! and finite-range (Fejér) densities, two-temperature gluing and the odd
//! clipping transform.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldState;
use crate::grid::{real_part_checked, TorusGrid, Transform};
use crate::lattice::{hermitize, CMat, DispersionData, OMEGA_FLOOR};

/// Eigenvalues of a density block above `-SAMPLER_PSD_TOL` (relative) are
/// clipped to zero before taking the square root.
pub const SAMPLER_PSD_TOL: f64 = 1e-9;

/// Covariance symbol `q̂(θ)` of a translation-invariant measure: one
/// `2n × 2n` Hermitian block per grid node, ordered `(u, v)`.
#[derive(Clone, Debug)]
pub struct SpectralDensity {
    grid: TorusGrid,
    n: usize,
    blocks: Vec<CMat>,
    /// Per-axis range beyond which real-space correlations vanish.
    pub range: Option<usize>,
    pub label: String,
}

impl SpectralDensity {
    pub fn new(
        grid: TorusGrid,
        n: usize,
        mut blocks: Vec<CMat>,
        range: Option<usize>,
        label: impl Into<String>,
    ) -> Result<Self> {
        if blocks.len() != grid.len() {
            return Err(Error::GridMismatch {
                expected: format!("{} nodes", grid.len()),
                found: format!("{} blocks", blocks.len()),
            });
        }
        for (node, b) in blocks.iter_mut().enumerate() {
            if b.nrows() != 2 * n || b.ncols() != 2 * n {
                return Err(Error::InvalidInput(format!(
                    "density block at node {node} is {}x{}, expected {}x{}",
                    b.nrows(),
                    b.ncols(),
                    2 * n,
                    2 * n
                )));
            }
            if b.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
                return Err(Error::NonFinite(format!("density block at node {node}")));
            }
            hermitize(b);
        }
        Ok(SpectralDensity {
            grid,
            n,
            blocks,
            range,
            label: label.into(),
        })
    }

    pub fn zeros(grid: TorusGrid, n: usize) -> Self {
        SpectralDensity {
            grid,
            n,
            blocks: vec![CMat::zeros(2 * n, 2 * n); grid.len()],
            range: Some(0),
            label: "zero".into(),
        }
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn components(&self) -> usize {
        self.n
    }

    pub fn blocks(&self) -> &[CMat] {
        &self.blocks
    }

    pub fn node(&self, k: usize) -> &CMat {
        &self.blocks[k]
    }

    /// The `n × n` block `q̂^{ij}(θ)` at a node, `i, j ∈ {0, 1}`.
    pub fn block(&self, node: usize, i: usize, j: usize) -> CMat {
        self.blocks[node]
            .view((i * self.n, j * self.n), (self.n, self.n))
            .into_owned()
    }

    /// `a · self + b · other` on the same grid.
    pub fn combine(&self, a: f64, other: &SpectralDensity, b: f64) -> Result<SpectralDensity> {
        self.same_shape(other)?;
        let blocks = self
            .blocks
            .iter()
            .zip(&other.blocks)
            .map(|(x, y)| x * Complex64::new(a, 0.0) + y * Complex64::new(b, 0.0))
            .collect();
        let range = match (self.range, other.range) {
            (Some(r), Some(s)) => Some(r.max(s)),
            _ => None,
        };
        SpectralDensity::new(self.grid, self.n, blocks, range, "combination")
    }

    pub(crate) fn same_shape(&self, other: &SpectralDensity) -> Result<()> {
        if self.grid != other.grid || self.n != other.n {
            return Err(Error::GridMismatch {
                expected: format!("{} with n = {}", self.grid, self.n),
                found: format!("{} with n = {}", other.grid, other.n),
            });
        }
        Ok(())
    }

    /// Smallest eigenvalue over all nodes together with its node.
    pub fn min_eigenvalue(&self) -> (usize, f64) {
        self.blocks
            .iter()
            .enumerate()
            .map(|(k, b)| {
                let e = SymmetricEigen::new(b.clone());
                (k, e.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
            })
            .fold((0, f64::INFINITY), |a, x| if x.1 < a.1 { x } else { a })
    }

    /// Largest `‖q̂(-θ) - q̂(θ)^T‖` over the grid.
    pub fn conjugate_symmetry_violation(&self) -> f64 {
        (0..self.grid.len())
            .map(|k| (&self.blocks[self.grid.conjugate(k)] - self.blocks[k].transpose()).norm())
            .fold(0.0, f64::max)
    }

    /// Real-space correlations `q(z) = N^{-d} Σ_θ q̂(θ) e^{-izθ}` on the
    /// whole torus, one real `2n × 2n` matrix per site.
    pub fn real_space(&self, transform: &Transform) -> Result<Vec<DMatrix<f64>>> {
        let dim = 2 * self.n;
        let len = self.grid.len();
        let mut out = vec![DMatrix::zeros(dim, dim); len];
        for r in 0..dim {
            for c in 0..dim {
                let mut plane: Vec<Complex64> = self.blocks.iter().map(|b| b[(r, c)]).collect();
                transform.to_spatial(&mut plane);
                let real = real_part_checked(&plane, 1e-10, "real-space correlation")?;
                for (site, x) in real.into_iter().enumerate() {
                    out[site][(r, c)] = x;
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`real_space`](Self::real_space).
    pub fn from_real_space(
        grid: TorusGrid,
        n: usize,
        q: &[DMatrix<f64>],
        range: Option<usize>,
        label: impl Into<String>,
    ) -> Result<Self> {
        let dim = 2 * n;
        let transform = Transform::new(grid);
        let mut blocks = vec![CMat::zeros(dim, dim); grid.len()];
        for r in 0..dim {
            for c in 0..dim {
                let vals: Vec<f64> = q.iter().map(|m| m[(r, c)]).collect();
                let plane = transform.real_to_spectral(&vals);
                for (b, x) in blocks.iter_mut().zip(plane) {
                    b[(r, c)] = x;
                }
            }
        }
        SpectralDensity::new(grid, n, blocks, range, label)
    }
}

/// Gibbs density at temperature `T`: `q̂^{00} = T V̂⁻¹`, `q̂^{11} = T I`.
pub fn gibbs_spectral_density(data: &DispersionData, temperature: f64) -> Result<SpectralDensity> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "temperature must be non-negative, got {temperature}"
        )));
    }
    let g = data.grid();
    let n = data.components();
    if temperature == 0.0 {
        let mut q = SpectralDensity::zeros(g, n);
        q.label = "gibbs T=0".into();
        return Ok(q);
    }
    let mut blocks = Vec::with_capacity(g.len());
    for (node, s) in data.nodes().iter().enumerate() {
        if s.clusters.iter().any(|c| c.omega < OMEGA_FLOOR) {
            return Err(Error::SingularSymbol {
                node,
                theta: g.theta(node),
            });
        }
        let inv = s.matrix_function(|w| 1.0 / (w * w));
        let mut b = CMat::zeros(2 * n, 2 * n);
        b.view_mut((0, 0), (n, n))
            .copy_from(&(inv * Complex64::new(temperature, 0.0)));
        for a in 0..n {
            b[(n + a, n + a)] = Complex64::new(temperature, 0.0);
        }
        blocks.push(b);
    }
    SpectralDensity::new(g, n, blocks, None, format!("gibbs T={temperature}"))
}

/// `(1 - cos N₀θ)/(1 - cos θ)`, written as a ratio of squared sines so that
/// it stays accurate near `θ = 0`.
pub fn fejer(n0: usize, theta: f64) -> f64 {
    let den = (0.5 * theta).sin();
    if den.abs() < 1e-7 {
        let n0 = n0 as f64;
        // Second-order Taylor expansion around the removable singularity.
        let x = theta * theta;
        return n0 * n0 * (1.0 - (n0 * n0 - 1.0) * x / 12.0);
    }
    let num = (0.5 * n0 as f64 * theta).sin();
    (num * num) / (den * den)
}

/// Finite-range density `q̂^{00} = q̂^{11} = scale · Π_k f̂(θ_k) · I`, whose
/// real-space correlation is a product of triangles `N₀ - |z_k|`.
pub fn triangular_density(grid: TorusGrid, n: usize, n0: usize, scale: f64) -> Result<SpectralDensity> {
    if n0 == 0 {
        return Err(Error::InvalidInput("N0 must be at least 1".into()));
    }
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::InvalidInput(format!("scale must be non-negative, got {scale}")));
    }
    if 2 * n0 > grid.points() {
        log::warn!("triangle range {n0} wraps around a torus of {} points", grid.points());
    }
    let blocks = (0..grid.len())
        .map(|node| {
            let f: f64 = grid.theta(node).iter().map(|&t| fejer(n0, t)).product();
            CMat::from_diagonal_element(2 * n, 2 * n, Complex64::new(scale * f, 0.0))
        })
        .collect();
    SpectralDensity::new(grid, n, blocks, Some(n0), format!("triangular N0={n0}"))
}

/// JSON description of a density.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum DensitySpec {
    Gibbs {
        #[serde(rename = "T")]
        temperature: f64,
    },
    Triangular {
        #[serde(rename = "N0")]
        n0: usize,
        #[serde(default = "one")]
        scale: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl DensitySpec {
    pub fn build(&self, data: &DispersionData) -> Result<SpectralDensity> {
        match *self {
            DensitySpec::Gibbs { temperature } => gibbs_spectral_density(data, temperature),
            DensitySpec::Triangular { n0, scale } => {
                triangular_density(data.grid(), data.components(), n0, scale)
            }
        }
    }
}

/// Precomputed square roots `S(θ)` with `S S* = N^d q̂(θ)` for repeated
/// sampling from one density.
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    grid: TorusGrid,
    n: usize,
    roots: Vec<CMat>,
    transform: Transform,
}

impl GaussianSampler {
    pub fn new(q: &SpectralDensity) -> Result<Self> {
        let g = q.grid();
        let dim = 2 * q.components();
        let volume = g.len() as f64;
        let mut roots = Vec::with_capacity(g.len());
        for (node, b) in q.blocks().iter().enumerate() {
            let scale = 1.0 + b.norm();
            let self_conjugate = g.conjugate(node) == node;
            let (values, vectors): (Vec<f64>, CMat) = if self_conjugate {
                // q̂ is real here, and a real root keeps the sample real.
                let re = DMatrix::from_fn(dim, dim, |r, c| b[(r, c)].re);
                let e = SymmetricEigen::new(re);
                (
                    e.eigenvalues.iter().copied().collect(),
                    e.eigenvectors.map(|x| Complex64::new(x, 0.0)),
                )
            } else {
                let e = SymmetricEigen::new(b.clone());
                (e.eigenvalues.iter().copied().collect(), e.eigenvectors)
            };
            let mut root = vectors;
            for (c, &l) in values.iter().enumerate() {
                if l < -SAMPLER_PSD_TOL * scale {
                    return Err(Error::NotPsd { node, eigenvalue: l });
                }
                let s = (l.max(0.0) * volume).sqrt();
                root.column_mut(c).scale_mut(s);
            }
            roots.push(root);
        }
        Ok(GaussianSampler {
            grid: g,
            n: q.components(),
            roots,
            transform: Transform::new(g),
        })
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    /// One field drawn with the given RNG.
    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<FieldState> {
        let g = self.grid;
        let n = self.n;
        let dim = 2 * n;
        let len = g.len();
        let mut spec = vec![vec![Complex64::new(0.0, 0.0); len]; dim];
        let mut xi = vec![Complex64::new(0.0, 0.0); dim];
        let half = std::f64::consts::FRAC_1_SQRT_2;
        for node in 0..len {
            let partner = g.conjugate(node);
            if partner < node {
                continue;
            }
            if partner == node {
                for x in xi.iter_mut() {
                    *x = Complex64::new(rng.sample(StandardNormal), 0.0);
                }
            } else {
                for x in xi.iter_mut() {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    *x = Complex64::new(half * re, half * im);
                }
            }
            let root = &self.roots[node];
            for r in 0..dim {
                let mut acc = Complex64::new(0.0, 0.0);
                for c in 0..dim {
                    acc += root[(r, c)] * xi[c];
                }
                spec[r][node] = acc;
                if partner != node {
                    spec[r][partner] = acc.conj();
                }
            }
        }
        let mut u = vec![0.0; len * n];
        let mut v = vec![0.0; len * n];
        for (r, plane) in spec.iter_mut().enumerate() {
            self.transform.to_spatial(plane);
            let real = real_part_checked(plane, 1e-10, "Gaussian sample")?;
            let (target, a) = if r < n { (&mut u, r) } else { (&mut v, r - n) };
            for (site, x) in real.into_iter().enumerate() {
                target[site * n + a] = x;
            }
        }
        FieldState::new(g, n, u, v)
    }

    /// Sample number `index` of the ensemble with master seed `seed`; the
    /// result does not depend on which other samples are drawn.
    pub fn sample(&self, seed: u64, index: u64) -> Result<FieldState> {
        self.sample_with(&mut sample_rng(seed, index))
    }
}

/// Independent RNG stream for ensemble member `index`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One draw of the Gaussian field with spectral density `q`.
pub fn gaussian_sample(q: &SpectralDensity, seed: u64) -> Result<FieldState> {
    GaussianSampler::new(q)?.sample(seed, 0)
}

/// Gluing profile `ζ₊` as a function of the signed coordinate `s` along the
/// last axis; `ζ₋ = 1 - ζ₊`.
pub fn zeta_plus(s: i64, cutoff: usize) -> f64 {
    if cutoff == 0 {
        return if s >= 0 { 1.0 } else { 0.0 };
    }
    let a = cutoff as f64;
    ((s as f64 + a) / (2.0 * a)).clamp(0.0, 1.0)
}

/// Two densities glued across the plane `x_d = 0`.
#[derive(Clone, Debug)]
pub struct TwoTempSpec {
    pub minus: SpectralDensity,
    pub plus: SpectralDensity,
    pub cutoff: usize,
}

impl TwoTempSpec {
    pub fn new(minus: SpectralDensity, plus: SpectralDensity, cutoff: usize) -> Result<Self> {
        minus.same_shape(&plus)?;
        Ok(TwoTempSpec { minus, plus, cutoff })
    }

    pub fn grid(&self) -> TorusGrid {
        self.plus.grid()
    }

    pub fn components(&self) -> usize {
        self.plus.components()
    }

    /// `(ζ₋, ζ₊)` at a site.
    pub fn weights(&self, site: usize) -> (f64, f64) {
        let s = *self.grid().signed_coords(site).last().expect("d >= 1");
        let p = zeta_plus(s, self.cutoff);
        (1.0 - p, p)
    }

    /// Initial covariance `Q₀(x, y) = Σ_± q_±(x - y) ζ_±(x_d) ζ_±(y_d)` from the
    /// real-space correlations of both sides.
    pub fn initial_covariance(
        &self,
        q_minus: &[DMatrix<f64>],
        q_plus: &[DMatrix<f64>],
        x: usize,
        y: usize,
    ) -> DMatrix<f64> {
        let g = self.grid();
        let diff: Vec<i64> = g
            .multi_index(x)
            .iter()
            .zip(g.multi_index(y))
            .map(|(&a, b)| a as i64 - b as i64)
            .collect();
        let z = g.wrap(&diff);
        let (mx, px) = self.weights(x);
        let (my, py) = self.weights(y);
        &q_minus[z] * (mx * my) + &q_plus[z] * (px * py)
    }
}

/// Ensemble sampler for the glued measure.
#[derive(Clone, Debug)]
pub struct TwoTempSampler {
    spec: TwoTempSpec,
    minus: GaussianSampler,
    plus: GaussianSampler,
}

impl TwoTempSampler {
    pub fn new(spec: &TwoTempSpec) -> Result<Self> {
        Ok(TwoTempSampler {
            minus: GaussianSampler::new(&spec.minus)?,
            plus: GaussianSampler::new(&spec.plus)?,
            spec: spec.clone(),
        })
    }

    pub fn sample(&self, seed: u64, index: u64) -> Result<FieldState> {
        let mut rng = sample_rng(seed, index);
        let ym = self.minus.sample_with(&mut rng)?;
        let yp = self.plus.sample_with(&mut rng)?;
        let n = self.spec.components();
        let mut out = ym.clone();
        for site in 0..self.spec.grid().len() {
            let (wm, wp) = self.spec.weights(site);
            for a in 0..n {
                let k = site * n + a;
                out.u[k] = wm * ym.u[k] + wp * yp.u[k];
                out.v[k] = wm * ym.v[k] + wp * yp.v[k];
            }
        }
        Ok(out)
    }
}

pub fn two_temperature_sample(spec: &TwoTempSpec, seed: u64) -> Result<FieldState> {
    TwoTempSampler::new(spec)?.sample(seed, 0)
}

/// Odd clipping `x ↦ max(-c, min(c, x))` applied to every entry.
pub fn nongaussian_transform(y: &FieldState, clip: f64) -> Result<FieldState> {
    if !(clip > 0.0) {
        return Err(Error::InvalidInput(format!("clip level must be positive, got {clip}")));
    }
    let mut out = y.clone();
    for x in out.u.iter_mut().chain(out.v.iter_mut()) {
        *x = x.clamp(-clip, clip);
    }
    Ok(out)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// `E[clip_c(m + s Z)]` for standard normal `Z`, `s ≥ 0`.
fn clipped_normal_mean(m: f64, s: f64, c: f64) -> f64 {
    if s < 1e-300 {
        return m.clamp(-c, c);
    }
    let a = (-c - m) / s;
    let b = (c - m) / s;
    let (pa, pb) = (std_normal_cdf(a), std_normal_cdf(b));
    -c * pa + c * (1.0 - pb) + m * (pb - pa) + s * (std_normal_pdf(a) - std_normal_pdf(b))
}

/// `E[clip_c(X) clip_c(Y)]` for a centered Gaussian pair with standard
/// deviations `sx`, `sy` and correlation `rho`.
pub fn clipped_product_moment(sx: f64, sy: f64, rho: f64, c: f64) -> f64 {
    if sx == 0.0 || sy == 0.0 {
        return 0.0;
    }
    let rho = rho.clamp(-1.0, 1.0);
    let cond_s = sy * (1.0 - rho * rho).max(0.0).sqrt();
    // Integrate over z = X/sx; the integrand has kinks at z = ±c/sx.
    let f = |z: f64| {
        let x = (sx * z).clamp(-c, c);
        x * clipped_normal_mean(rho * sy * z, cond_s, c) * std_normal_pdf(z)
    };
    let k = c / sx;
    let mut points = vec![-10.0, 10.0];
    if k < 10.0 {
        points.extend([-k, k]);
    }
    points.sort_by(f64::total_cmp);
    points
        .windows(2)
        .map(|w| gauss_legendre(&f, w[0], w[1], 64))
        .sum()
}

/// Composite Gauss–Legendre rule with `panels` panels of 8 nodes.
pub(crate) fn gauss_legendre(f: &impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    const X: [f64; 4] = [
        0.183_434_642_495_649_8,
        0.525_532_409_916_329,
        0.796_666_477_413_626_7,
        0.960_289_856_497_536_3,
    ];
    const W: [f64; 4] = [
        0.362_683_783_378_362,
        0.313_706_645_877_887_3,
        0.222_381_034_453_374_5,
        0.101_228_536_290_376_3,
    ];
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = a + (p as f64 + 0.5) * h;
        let half = 0.5 * h;
        for (x, w) in X.iter().zip(W) {
            total += w * half * (f(mid + half * x) + f(mid - half * x));
        }
    }
    total
}

/// Spectral density of `clip_c(Y)` for a centered Gaussian field `Y` with
/// density `q`. Clipping acts entrywise, so every correlation is a
/// bivariate-normal expectation given by [`clipped_product_moment`].
pub fn clipped_density(q: &SpectralDensity, clip: f64) -> Result<SpectralDensity> {
    let g = q.grid();
    let transform = Transform::new(g);
    let real = q.real_space(&transform)?;
    let dim = 2 * q.components();
    let sd: Vec<f64> = (0..dim).map(|a| real[0][(a, a)].max(0.0).sqrt()).collect();
    let clipped: Vec<DMatrix<f64>> = real
        .iter()
        .map(|m| {
            DMatrix::from_fn(dim, dim, |r, c| {
                let s = sd[r] * sd[c];
                if s == 0.0 || m[(r, c)].abs() <= 1e-15 * s {
                    0.0
                } else {
                    clipped_product_moment(sd[r], sd[c], m[(r, c)] / s, clip)
                }
            })
        })
        .collect();
    SpectralDensity::from_real_space(
        g,
        q.components(),
        &clipped,
        q.range,
        format!("{} clipped at {clip}", q.label),
    )
}
