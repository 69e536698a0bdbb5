use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;

use super::{hermitize, CMat, InteractionMatrix};
use crate::error::{Error, Result};
use crate::grid::TorusGrid;

/// Frequencies below this are treated as zero in every division.
pub const OMEGA_FLOOR: f64 = 1e-12;

/// Relative tolerance for a negative eigenvalue of `V̂` before it counts as
/// a violation of non-negativity.
pub const PSD_TOL: f64 = 1e-10;

/// Eigenvalues of `V̂` this small (relative to `1 + ‖V̂‖`) are snapped to zero.
const ZERO_EIGEN_REL: f64 = 1e-13;

/// One group of numerically equal frequencies at a node.
#[derive(Clone, Debug)]
pub struct Cluster {
    pub omega: f64,
    pub rank: usize,
    /// Orthogonal projection onto the eigenspace of the cluster.
    pub projection: CMat,
    /// `∇ω` of the cluster (zero when `omega` is below the floor).
    pub velocity: Vec<f64>,
}

impl Cluster {
    pub fn is_singular(&self) -> bool {
        self.omega < OMEGA_FLOOR
    }
}

#[derive(Clone, Debug)]
pub struct NodeSpectrum {
    pub symbol: CMat,
    /// Branches `ω_1 ≤ … ≤ ω_n`.
    pub omegas: Vec<f64>,
    pub clusters: Vec<Cluster>,
    /// Smallest raw eigenvalue of the symbol before clamping.
    pub min_eigenvalue: f64,
    branch_cluster: Vec<usize>,
}

impl NodeSpectrum {
    pub fn cluster_of_branch(&self, branch: usize) -> &Cluster {
        &self.clusters[self.branch_cluster[branch]]
    }

    /// `Σ_σ f(ω_σ) Π_σ`.
    pub fn matrix_function(&self, f: impl Fn(f64) -> f64) -> CMat {
        let n = self.symbol.nrows();
        let mut out = CMat::zeros(n, n);
        for c in &self.clusters {
            out += &c.projection * Complex64::new(f(c.omega), 0.0);
        }
        out
    }

    /// `Ω(θ) = V̂(θ)^{1/2}`.
    pub fn omega_matrix(&self) -> CMat {
        self.matrix_function(|w| w)
    }

    pub fn is_singular(&self) -> bool {
        self.clusters.iter().any(Cluster::is_singular)
    }
}

/// Dispersion relations and spectral projections on every node of a grid.
#[derive(Clone, Debug)]
pub struct DispersionData {
    grid: TorusGrid,
    n: usize,
    cluster_tol: f64,
    nodes: Vec<NodeSpectrum>,
}

impl DispersionData {
    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn components(&self) -> usize {
        self.n
    }

    pub fn cluster_tol(&self) -> f64 {
        self.cluster_tol
    }

    pub fn nodes(&self) -> &[NodeSpectrum] {
        &self.nodes
    }

    pub fn node(&self, k: usize) -> &NodeSpectrum {
        &self.nodes[k]
    }

    pub fn omega(&self, node: usize, branch: usize) -> f64 {
        self.nodes[node].omegas[branch]
    }

    /// Group velocity `∇ω_k` at a node, refused for frequencies below the floor.
    pub fn group_velocity(&self, node: usize, branch: usize) -> Result<&[f64]> {
        let c = self.nodes[node].cluster_of_branch(branch);
        if c.is_singular() {
            return Err(Error::SingularBranch {
                node,
                branch,
                omega: c.omega,
            });
        }
        Ok(&c.velocity)
    }

    /// Largest `|∇ω_k|` over the grid.
    pub fn max_group_speed(&self) -> f64 {
        self.nodes
            .iter()
            .flat_map(|s| s.clusters.iter())
            .map(|c| c.velocity.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn max_omega(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|s| s.omegas.last().copied())
            .fold(0.0, f64::max)
    }

    /// `sgn(∂ω/∂θ_d)` of a cluster, zero when `|∂ω/∂θ_d| < tol`.
    pub fn velocity_sign(cluster: &Cluster, tol: f64) -> f64 {
        let v = *cluster.velocity.last().expect("d >= 1");
        if v.abs() < tol {
            0.0
        } else {
            v.signum()
        }
    }

    /// Determinant of the Hessian of each branch by central differences on
    /// the grid, indexed `[branch][node]`.
    pub fn hessian_determinants(&self) -> Vec<Vec<f64>> {
        let g = self.grid;
        let d = g.dim();
        let h = g.spacing();
        (0..self.n)
            .map(|k| {
                let w = |node: usize| self.nodes[node].omegas[k];
                (0..g.len())
                    .into_par_iter()
                    .map(|node| {
                        let mut hess = DMatrix::<f64>::zeros(d, d);
                        for a in 0..d {
                            let p = g.shift(node, a, 1);
                            let m = g.shift(node, a, -1);
                            hess[(a, a)] = (w(p) - 2.0 * w(node) + w(m)) / (h * h);
                            for b in (a + 1)..d {
                                let pp = g.shift(p, b, 1);
                                let pm = g.shift(p, b, -1);
                                let mp = g.shift(m, b, 1);
                                let mm = g.shift(m, b, -1);
                                let v = (w(pp) - w(pm) - w(mp) + w(mm)) / (4.0 * h * h);
                                hess[(a, b)] = v;
                                hess[(b, a)] = v;
                            }
                        }
                        hess.determinant()
                    })
                    .collect()
            })
            .collect()
    }
}

fn decompose(symbol: &CMat) -> (Vec<f64>, CMat) {
    let n = symbol.nrows();
    if n == 1 {
        return (vec![symbol[(0, 0)].re], CMat::from_element(1, 1, Complex64::new(1.0, 0.0)));
    }
    let eig = SymmetricEigen::new(symbol.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMat::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Diagonalizes `V̂(θ)` on every grid node.
///
/// Frequencies within `cluster_tol` of each other form one cluster; when
/// `cluster_tol` is `None` it defaults to `1e-8 · max ω`. Group velocities
/// use the Hellmann–Feynman rule `tr(Π ∂V̂)/(2ω rank Π)` per cluster.
pub fn dispersion(
    v: &InteractionMatrix,
    grid: TorusGrid,
    cluster_tol: Option<f64>,
) -> Result<DispersionData> {
    if v.dim() != grid.dim() {
        return Err(Error::GridMismatch {
            expected: format!("d = {}", v.dim()),
            found: format!("grid {grid}"),
        });
    }
    let n = v.components();
    let d = grid.dim();
    let raw: Vec<(CMat, Vec<f64>, CMat)> = (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let theta = grid.theta(node);
            let mut symbol = v.symbol(&theta);
            hermitize(&mut symbol);
            let (values, vectors) = decompose(&symbol);
            (symbol, values, vectors)
        })
        .collect();

    let mut max_omega: f64 = 0.0;
    for (node, (symbol, values, _)) in raw.iter().enumerate() {
        let scale = 1.0 + symbol.norm();
        if values[0] < -PSD_TOL * scale {
            return Err(Error::NotPositive {
                node,
                theta: grid.theta(node),
                eigenvalue: values[0],
            });
        }
        max_omega = max_omega.max(values[n - 1].max(0.0).sqrt());
    }
    let cluster_tol = cluster_tol.unwrap_or(1e-8 * max_omega);

    let nodes = raw
        .into_par_iter()
        .enumerate()
        .map(|(node, (symbol, values, vectors))| {
            let theta = grid.theta(node);
            let scale = 1.0 + symbol.norm();
            let omegas: Vec<f64> = values
                .iter()
                .map(|&l| if l <= ZERO_EIGEN_REL * scale { 0.0 } else { l.sqrt() })
                .collect();
            let derivs: Vec<CMat> = (0..d).map(|a| v.symbol_derivative(&theta, a)).collect();
            let mut clusters = Vec::new();
            let mut branch_cluster = vec![0; n];
            let mut start = 0;
            while start < n {
                let mut end = start + 1;
                while end < n && omegas[end] - omegas[end - 1] <= cluster_tol {
                    end += 1;
                }
                let cols = vectors.columns(start, end - start);
                let projection = cols * cols.adjoint();
                let rank = end - start;
                let omega = omegas[start..end].iter().sum::<f64>() / rank as f64;
                let velocity = if omega < OMEGA_FLOOR {
                    vec![0.0; d]
                } else {
                    derivs
                        .iter()
                        .map(|dv| (&projection * dv).trace().re / (2.0 * omega * rank as f64))
                        .collect()
                };
                for b in &mut branch_cluster[start..end] {
                    *b = clusters.len();
                }
                clusters.push(Cluster {
                    omega,
                    rank,
                    projection,
                    velocity,
                });
                start = end;
            }
            NodeSpectrum {
                symbol,
                omegas,
                clusters,
                min_eigenvalue: values[0],
                branch_cluster,
            }
        })
        .collect();

    Ok(DispersionData {
        grid,
        n,
        cluster_tol,
        nodes,
    })
}

/// Grid proxy for the critical set, broken down by cause.
#[derive(Clone, Debug)]
pub struct CriticalMask {
    pub zero_frequency: Vec<bool>,
    pub zero_velocity: Vec<bool>,
    pub degenerate_hessian: Vec<bool>,
    pub crossing: Vec<bool>,
}

impl CriticalMask {
    pub fn is_critical(&self, node: usize) -> bool {
        self.zero_frequency[node]
            || self.zero_velocity[node]
            || self.degenerate_hessian[node]
            || self.crossing[node]
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.zero_frequency.len()).map(|k| self.is_critical(k)).collect()
    }

    pub fn fraction(flags: &[bool]) -> f64 {
        flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64
    }

    pub fn total_fraction(&self) -> f64 {
        Self::fraction(&self.mask())
    }
}

/// Marks nodes where `values` vanishes to `tol`, plus the node of smaller
/// magnitude on every grid edge across which `values` changes sign.
fn mark_zeros(grid: TorusGrid, values: &[f64], tol: f64, out: &mut [bool]) {
    for node in 0..grid.len() {
        if values[node].abs() < tol {
            out[node] = true;
        }
        for a in 0..grid.dim() {
            let next = grid.shift(node, a, 1);
            if values[node] * values[next] < 0.0 {
                let pick = if values[node].abs() <= values[next].abs() { node } else { next };
                out[pick] = true;
            }
        }
    }
}

/// Nodes near the critical set: vanishing frequency, vanishing `∂ω/∂θ_d`,
/// degenerate Hessian, or a crossing of distinct eigenvalue clusters.
pub fn critical_set(data: &DispersionData, tol: f64) -> CriticalMask {
    let g = data.grid();
    let len = g.len();
    let d = g.dim();
    let n = data.components();
    let mut zero_frequency = vec![false; len];
    let mut zero_velocity = vec![false; len];
    let mut degenerate_hessian = vec![false; len];
    let mut crossing = vec![false; len];

    for (node, s) in data.nodes().iter().enumerate() {
        if s.omegas.iter().any(|&w| w < tol) {
            zero_frequency[node] = true;
        }
    }
    for k in 0..n {
        let vd: Vec<f64> = data
            .nodes()
            .iter()
            .map(|s| s.cluster_of_branch(k).velocity[d - 1])
            .collect();
        mark_zeros(g, &vd, tol, &mut zero_velocity);
    }
    for det in data.hessian_determinants() {
        mark_zeros(g, &det, tol, &mut degenerate_hessian);
    }
    // Gap between consecutive clusters, keyed by the lower branch index.
    for k in 0..n.saturating_sub(1) {
        let gap: Vec<Option<f64>> = data
            .nodes()
            .iter()
            .map(|s| {
                let (a, b) = (s.branch_cluster[k], s.branch_cluster[k + 1]);
                (a != b).then(|| s.omegas[k + 1] - s.omegas[k])
            })
            .collect();
        for node in 0..len {
            let Some(here) = gap[node] else { continue };
            if here < tol {
                crossing[node] = true;
                continue;
            }
            let steepest = (0..d)
                .flat_map(|a| [g.shift(node, a, 1), g.shift(node, a, -1)])
                .filter_map(|nb| gap[nb].map(|x| (x - here).abs()))
                .fold(0.0, f64::max);
            let local_min = (0..d)
                .flat_map(|a| [g.shift(node, a, 1), g.shift(node, a, -1)])
                .all(|nb| gap[nb].is_none_or(|x| x >= here));
            if local_min && here <= steepest {
                crossing[node] = true;
            }
        }
    }
    CriticalMask {
        zero_frequency,
        zero_velocity,
        degenerate_hessian,
        crossing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(m: f64, n: usize) -> DispersionData {
        let v = InteractionMatrix::elastic(1, m).unwrap();
        dispersion(&v, TorusGrid::new(1, n).unwrap(), None).unwrap()
    }

    #[test]
    fn elastic_chain_dispersion_and_velocity() {
        let n = 64;
        let data = chain(1.0, n);
        for node in 0..n {
            let th = data.grid().theta(node)[0];
            let w = (3.0 - 2.0 * th.cos()).sqrt();
            assert!((data.omega(node, 0) - w).abs() < 1e-12);
            let v = data.group_velocity(node, 0).unwrap()[0];
            assert!((v - th.sin() / w).abs() < 1e-12);
        }
        let quarter = n / 4;
        assert!((data.omega(quarter, 0) - 3f64.sqrt()).abs() < 1e-12);
        assert!((data.group_velocity(quarter, 0).unwrap()[0] - 1.0 / 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn spectral_square_root_and_resolution_of_identity() {
        let a = InteractionMatrix::elastic(2, 1.0).unwrap();
        let b = InteractionMatrix::elastic(2, 0.5).unwrap();
        let v = InteractionMatrix::direct_sum(&[a, b]).unwrap();
        let data = dispersion(&v, TorusGrid::new(2, 8).unwrap(), None).unwrap();
        for s in data.nodes() {
            let om = s.omega_matrix();
            let err = (&om * &om - &s.symbol).norm();
            assert!(err <= 1e-9 * (1.0 + s.symbol.norm()));
            let mut sum = CMat::zeros(2, 2);
            for c in &s.clusters {
                sum += &c.projection;
                assert!((&c.projection * &c.projection - &c.projection).norm() < 1e-9);
            }
            assert!((sum - CMat::identity(2, 2)).norm() < 1e-9);
        }
    }

    #[test]
    fn degenerate_pair_forms_single_cluster() {
        let a = InteractionMatrix::elastic(1, 1.0).unwrap();
        let v = InteractionMatrix::direct_sum(&[a.clone(), a]).unwrap();
        let data = dispersion(&v, TorusGrid::new(1, 32).unwrap(), None).unwrap();
        for s in data.nodes() {
            assert_eq!(s.clusters.len(), 1);
            assert_eq!(s.clusters[0].rank, 2);
            assert!((&s.clusters[0].projection - CMat::identity(2, 2)).norm() < 1e-12);
        }
    }

    #[test]
    fn massless_chain_has_singular_branch_at_origin() {
        let data = chain(0.0, 16);
        assert_eq!(data.omega(0, 0), 0.0);
        assert!(matches!(data.group_velocity(0, 0), Err(Error::SingularBranch { .. })));
        assert!(data.group_velocity(3, 0).is_ok());
    }

    #[test]
    fn negative_symbol_rejected() {
        let v = InteractionMatrix::new(
            1,
            1,
            vec![
                (vec![0], DMatrix::from_element(1, 1, 1.0)),
                (vec![1], DMatrix::from_element(1, 1, -1.0)),
                (vec![-1], DMatrix::from_element(1, 1, -1.0)),
            ],
        )
        .unwrap();
        let err = dispersion(&v, TorusGrid::new(1, 8).unwrap(), None).unwrap_err();
        assert!(matches!(err, Error::NotPositive { .. }));
    }

    #[test]
    fn critical_mask_on_elastic_chain() {
        let data = chain(1.0, 16);
        let mask = critical_set(&data, 1e-8);
        assert!(mask.is_critical(0));
        assert!(mask.is_critical(8));
        assert!(!mask.is_critical(4), "theta = pi/2 must be admissible");
        assert!(mask.zero_velocity[0] && mask.zero_velocity[8]);
        assert_eq!(CriticalMask::fraction(&mask.zero_velocity), 2.0 / 16.0);
    }

    #[test]
    fn critical_mask_on_elastic_plane() {
        let v = InteractionMatrix::elastic(2, 1.0).unwrap();
        let g = TorusGrid::new(2, 16).unwrap();
        let data = dispersion(&v, g, None).unwrap();
        let mask = critical_set(&data, 1e-8);
        for m1 in 0..16 {
            assert!(mask.is_critical(g.flat_index(&[m1, 0])));
            assert!(mask.is_critical(g.flat_index(&[m1, 8])));
        }
    }

    #[test]
    fn hessian_matches_second_derivative_at_quarter_turn() {
        // ω'' = cos/ω - sin²/ω³ at θ = π/2 is -3^{-3/2}.
        let n = 1024;
        let data = chain(1.0, n);
        let det = &data.hessian_determinants()[0];
        let exact = -(3f64).powf(-1.5);
        assert!((det[n / 4] - exact).abs() < 1e-5);
    }
}
