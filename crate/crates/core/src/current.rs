//! Energy-current densities: pointwise, ensemble means, the limit current
//! of the long-time measure and the Second Law verdict.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::covariance::{ensemble_map, CovarianceEstimate, Ensemble, LimitCovariance, Method};
use crate::error::{Error, Result};
use crate::field::FieldState;
use crate::grid::TorusGrid;
use crate::lattice::{DispersionData, InteractionMatrix, Verdict};
use crate::propagator::Dynamics;
use crate::stats;

#[derive(Clone, Debug, Serialize)]
pub struct CurrentEstimate {
    /// Direction, zero-based.
    pub k: usize,
    pub site: usize,
    /// Signed coordinate of `site` along the last axis.
    pub x_offset: i64,
    pub t: f64,
    pub value: f64,
    pub stderr: f64,
    pub method: Method,
}

/// Terms `(m, z, sign)` of the current through the plane just below `x′`:
/// every bond from `x′ + m e_k` to `x′ + m e_k - z` that crosses the plane.
fn crossing_terms(v: &InteractionMatrix, k: usize) -> Vec<(i64, Vec<i64>, f64)> {
    let mut out = Vec::new();
    for (z, _) in v.support() {
        let zk = z[k];
        if zk < 0 {
            for m in zk..0 {
                out.push((m, z.clone(), 1.0));
            }
        } else if zk > 0 {
            for m in 0..zk {
                out.push((m, z.clone(), -1.0));
            }
        }
    }
    out
}

fn check_direction(v: &InteractionMatrix, k: usize) -> Result<()> {
    if k >= v.dim() {
        return Err(Error::InvalidInput(format!(
            "direction {k} out of range for d = {}",
            v.dim()
        )));
    }
    Ok(())
}

fn offset_site(g: TorusGrid, base: usize, k: usize, m: i64, z: Option<&[i64]>) -> usize {
    let mut c: Vec<i64> = g.multi_index(base).iter().map(|&c| c as i64).collect();
    c[k] += m;
    if let Some(z) = z {
        for (a, b) in c.iter_mut().zip(z) {
            *a -= b;
        }
    }
    g.wrap(&c)
}

/// Energy current `j^k(x′)` of one state across the plane separating
/// `x′ - e_k` from `x′`; positive values flow towards `+e_k`.
///
/// ```text
/// j^k(x′) = ½ Σ_z [ Σ_{z_k ≤ m ≤ -1} (v(x′+me_k), V(z) u(x′+me_k-z))
///                 - Σ_{0 ≤ m ≤ z_k-1} (v(x′+me_k), V(z) u(x′+me_k-z)) ]
/// ```
pub fn local_current(y: &FieldState, v: &InteractionMatrix, site: usize, k: usize) -> Result<f64> {
    check_direction(v, k)?;
    if y.components() != v.components() || y.grid().dim() != v.dim() {
        return Err(Error::InvalidInput("field and interaction have different shapes".into()));
    }
    let g = y.grid();
    let n = y.components();
    let mut total = 0.0;
    for (m, z, sign) in crossing_terms(v, k) {
        let a = offset_site(g, site, k, m, None);
        let b = offset_site(g, site, k, m, Some(&z));
        let vz = v.get(&z).expect("support entry");
        let mut acc = 0.0;
        for al in 0..n {
            for be in 0..n {
                acc += y.v[a * n + al] * vz[(al, be)] * y.u[b * n + be];
            }
        }
        total += sign * acc;
    }
    Ok(0.5 * total)
}

/// Site pairs `(x, y)` whose covariance enters the mean current at `site`.
pub fn current_pairs(v: &InteractionMatrix, grid: TorusGrid, site: usize, k: usize) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(usize, usize)> = crossing_terms(v, k)
        .into_iter()
        .map(|(m, z, _)| {
            (
                offset_site(grid, site, k, m, None),
                offset_site(grid, site, k, m, Some(&z)),
            )
        })
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

/// `E j^k(x′, t)` from a covariance estimate, using the velocity–displacement
/// block `Q^{10}(x, y) = E v(x) ⊗ u(y)`; standard errors add linearly.
pub fn mean_current_from_covariance(
    cov: &CovarianceEstimate,
    v: &InteractionMatrix,
    site: usize,
    k: usize,
) -> Result<CurrentEstimate> {
    check_direction(v, k)?;
    let g = cov.grid();
    let n = cov.components();
    let mut value = 0.0;
    let mut stderr = 0.0;
    for (m, z, sign) in crossing_terms(v, k) {
        let a = offset_site(g, site, k, m, None);
        let b = offset_site(g, site, k, m, Some(&z));
        let e = cov.get(a, b).ok_or_else(|| {
            Error::InvalidInput(format!("covariance estimate lacks the pair ({a}, {b})"))
        })?;
        let vz = v.get(&z).expect("support entry");
        for al in 0..n {
            for be in 0..n {
                value += sign * e.value[(n + al, be)] * vz[(al, be)];
                stderr += (e.stderr[(n + al, be)] * vz[(al, be)]).abs();
            }
        }
    }
    Ok(CurrentEstimate {
        k,
        site,
        x_offset: *g.signed_coords(site).last().expect("d >= 1"),
        t: cov.t,
        value: 0.5 * value,
        stderr: 0.5 * stderr,
        method: cov.method,
    })
}

/// Ensemble mean of `j^k` at each of `sites`, one evolution per member.
///
/// With `average` the per-sample currents are first averaged over `sites`
/// (all of which must be equivalent by symmetry) and a single estimate is
/// returned at `sites[0]`.
#[allow(clippy::too_many_arguments)]
pub fn mc_mean_current(
    ensemble: &Ensemble,
    dynamics: &Dynamics,
    t: f64,
    k: usize,
    sites: &[usize],
    average: bool,
    samples: usize,
    seed: u64,
) -> Result<Vec<CurrentEstimate>> {
    if sites.is_empty() || samples < 2 {
        return Err(Error::InvalidInput("need at least one site and two samples".into()));
    }
    let v = dynamics.interaction();
    check_direction(v, k)?;
    crate::propagator::check_horizon(dynamics.dispersion(), t);
    let sampler = ensemble.sampler()?;
    let symbol = dynamics.symbol(t);
    let per_sample = ensemble_map(samples, |i| {
        let y0 = sampler.sample(seed, i)?;
        let y = if t == 0.0 { y0 } else { dynamics.evolve_with(&y0, &symbol)? };
        sites.iter().map(|&s| local_current(&y, v, s, k)).collect::<Result<Vec<f64>>>()
    })?;
    let g = dynamics.grid();
    let make = |site: usize, xs: &[f64]| {
        let e = stats::mean(xs);
        CurrentEstimate {
            k,
            site,
            x_offset: *g.signed_coords(site).last().expect("d >= 1"),
            t,
            value: e.value,
            stderr: e.stderr,
            method: Method::Mc,
        }
    };
    if average {
        let xs: Vec<f64> = per_sample.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
        return Ok(vec![make(sites[0], &xs)]);
    }
    Ok(sites
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let xs: Vec<f64> = per_sample.iter().map(|r| r[j]).collect();
            make(s, &xs)
        })
        .collect())
}

/// `j∞^k = -(i/2) N^{-d} Σ_θ Σ_{αβ} (q̂∞^{10})_{αβ} conj(∂_k V̂_{αβ})` for every `k`.
pub fn limit_current(lim: &LimitCovariance, v: &InteractionMatrix) -> Result<Vec<f64>> {
    let g = lim.grid();
    if g.dim() != v.dim() || lim.components() != v.components() {
        return Err(Error::GridMismatch {
            expected: format!("d = {}, n = {}", v.dim(), v.components()),
            found: format!("d = {}, n = {}", g.dim(), lim.components()),
        });
    }
    let n = lim.components();
    let volume = g.len() as f64;
    let mut out = Vec::with_capacity(g.dim());
    for k in 0..g.dim() {
        let mut total = Complex64::new(0.0, 0.0);
        let mut scale = 0.0;
        for node in 0..g.len() {
            let q10 = lim.block(node, 1, 0);
            let dv = v.symbol_derivative(&g.theta(node), k);
            for a in 0..n {
                for b in 0..n {
                    let term = q10[(a, b)] * dv[(a, b)].conj();
                    total += term;
                    scale += term.norm();
                }
            }
        }
        let j = total * Complex64::new(0.0, -0.5) / volume;
        let scale = 0.5 * scale / volume;
        if j.im.abs() > 1e-9 * scale.max(1.0) {
            return Err(Error::ImaginaryResidue {
                what: format!("limit current along axis {k}"),
                residue: j.im.abs(),
                scale,
            });
        }
        out.push(j.re);
    }
    Ok(out)
}

/// Real-space form `-½ Σ_z z_k Σ_{αβ} q∞^{10}(z)_{αβ} V_{αβ}(z)`.
pub fn limit_current_real_space(q: &[DMatrix<f64>], grid: TorusGrid, v: &InteractionMatrix) -> Vec<f64> {
    let n = v.components();
    (0..v.dim())
        .map(|k| {
            let mut total = 0.0;
            for (z, vz) in v.support() {
                let q10 = &q[grid.wrap(z)];
                for a in 0..n {
                    for b in 0..n {
                        total += z[k] as f64 * q10[(n + a, b)] * vz[(a, b)];
                    }
                }
            }
            -0.5 * total
        })
        .collect()
}

/// Limit current for Gibbs sides:
/// `j∞^k = -ΔT N^{-d} Σ_θ Σ_γ sgn(∂_d ω_γ) ∂_k ω_γ`, `ΔT = (T₊ - T₋)/2`.
pub fn gibbs_limit_current(data: &DispersionData, t_plus: f64, t_minus: f64, sign_tol: f64) -> Vec<f64> {
    let g = data.grid();
    let d = g.dim();
    let delta = 0.5 * (t_plus - t_minus);
    let mut sums = vec![0.0; d];
    for s in data.nodes() {
        for c in &s.clusters {
            let sgn = DispersionData::velocity_sign(c, sign_tol);
            if sgn == 0.0 {
                continue;
            }
            for (acc, w) in sums.iter_mut().zip(&c.velocity) {
                *acc += c.rank as f64 * sgn * w;
            }
        }
    }
    sums.iter().map(|s| -delta * s / g.len() as f64).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct SecondLawReport {
    pub t_plus: f64,
    pub t_minus: f64,
    pub current: f64,
    /// `C = -j∞^d / (T₊ - T₋)`, absent when the temperatures coincide.
    pub conductance: Option<f64>,
    pub verdict: Verdict,
}

/// Energy must flow from hot to cold: `sign j∞^d = -sign(T₊ - T₋)` with
/// `C > 0`, or `j∞^d ≈ 0` within `tol` at equal temperatures.
pub fn second_law_check(t_plus: f64, t_minus: f64, j_limit: &[f64], tol: f64) -> SecondLawReport {
    let jd = *j_limit.last().expect("d >= 1");
    let dt = t_plus - t_minus;
    let (conductance, pass) = if dt == 0.0 {
        (None, jd.abs() <= tol)
    } else {
        let c = -jd / dt;
        (Some(c), c > 0.0 && jd.abs() > tol)
    };
    SecondLawReport {
        t_plus,
        t_minus,
        current: jd,
        conductance,
        verdict: if pass { Verdict::Pass } else { Verdict::Fail },
    }
}
