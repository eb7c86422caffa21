//! ICAR structure matrices, BYM2 random effects and the precision / mixing
//! hyperpriors.

use std::collections::VecDeque;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Symmetric, irreflexive neighbour lists over areas `0..K`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Spatial(format!("edge ({i},{j}) out of range for {n} areas")));
            }
            if i == j {
                return Err(Error::Spatial(format!("self-loop on area {i}")));
            }
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Self { neighbors })
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Undirected edges with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, ns)| ns.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors.iter().enumerate().all(|(i, ns)| {
            ns.iter()
                .all(|&j| j != i && self.neighbors[j].binary_search(&i).is_ok())
        })
    }

    pub fn is_connected(&self) -> bool {
        if self.neighbors.is_empty() {
            return false;
        }
        let mut seen = vec![false; self.len()];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        count == self.len()
    }

    /// Permutes area labels: new area `perm[i]` is old area `i`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let edges: Vec<_> = self.edges().into_iter().map(|(i, j)| (perm[i], perm[j])).collect();
        Self::from_edges(self.len(), &edges).expect("permutation preserves validity")
    }

    /// Reads an edge list CSV (`i,j` per row, 0-indexed, header optional).
    pub fn read_edge_csv(path: &Path, n_areas: Option<usize>) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut edges = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec?;
            if rec.len() < 2 {
                return Err(schema(path, row + 1, "expected two columns i,j"));
            }
            let (a, b) = (rec[0].parse::<usize>(), rec[1].parse::<usize>());
            match (a, b) {
                (Ok(i), Ok(j)) => edges.push((i, j)),
                _ if row == 0 => continue,
                _ => return Err(schema(path, row + 1, "non-integer area index")),
            }
        }
        let n = n_areas.unwrap_or_else(|| edges.iter().map(|&(i, j)| i.max(j) + 1).max().unwrap_or(0));
        Self::from_edges(n, &edges)
    }

    pub fn write_edge_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["i", "j"])?;
        for (i, j) in self.edges() {
            w.write_record([i.to_string(), j.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn schema(path: &Path, row: usize, message: &str) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        row,
        message: message.to_string(),
    }
}

/// Raw ICAR structure matrix: degree on the diagonal, -1 for neighbours.
pub fn icar_structure(adj: &Adjacency) -> Result<DMatrix<f64>> {
    let k = adj.len();
    if k < 2 {
        return Err(Error::Spatial("ICAR needs at least two areas".into()));
    }
    if !adj.is_symmetric() {
        return Err(Error::Spatial("adjacency is not symmetric".into()));
    }
    if !adj.is_connected() {
        return Err(Error::Disconnected);
    }
    let mut q = DMatrix::zeros(k, k);
    for i in 0..k {
        q[(i, i)] = adj.degree(i) as f64;
        for &j in adj.neighbors(i) {
            q[(i, j)] = -1.0;
        }
    }
    Ok(q)
}

/// ICAR structure scaled so the geometric mean of the constrained marginal
/// variances is one.
#[derive(Debug, Clone)]
pub struct ScaledIcar {
    /// Raw structure matrix (rank K-1).
    pub structure: DMatrix<f64>,
    /// Multiplier applied to the raw structure.
    pub scale: f64,
    /// Scaled structure matrix.
    pub scaled: DMatrix<f64>,
    /// Sum-to-zero generalized inverse of the scaled structure.
    pub ginv: DMatrix<f64>,
    /// Diagonal of `ginv`.
    pub marginal_variances: Vec<f64>,
    /// Nonzero eigenvalues of the scaled structure (K-1 of them).
    pub eigenvalues: Vec<f64>,
    /// Matching orthonormal eigenvectors, one per column (K x (K-1)).
    pub eigenvectors: DMatrix<f64>,
}

const RANK_TOL: f64 = 1e-9;

pub fn scale_icar(structure: &DMatrix<f64>) -> Result<ScaledIcar> {
    let k = structure.nrows();
    if k < 2 || structure.ncols() != k {
        return Err(Error::Spatial("structure must be square with K >= 2".into()));
    }
    let eig = SymmetricEigen::new(structure.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let keep: Vec<usize> = (0..k).filter(|&i| eig.eigenvalues[i] > RANK_TOL * max).collect();
    if keep.len() != k - 1 {
        return Err(Error::Spatial(format!(
            "structure has rank {} but K-1 = {} is required",
            keep.len(),
            k - 1
        )));
    }
    let vecs = DMatrix::from_fn(k, keep.len(), |r, c| eig.eigenvectors[(r, keep[c])]);
    let raw_vals: Vec<f64> = keep.iter().map(|&i| eig.eigenvalues[i]).collect();
    let raw_ginv = ginv_from(&vecs, &raw_vals);
    let log_gm = (0..k).map(|i| raw_ginv[(i, i)].ln()).sum::<f64>() / k as f64;
    let scale = log_gm.exp();
    let eigenvalues: Vec<f64> = raw_vals.iter().map(|v| v * scale).collect();
    let ginv = raw_ginv / scale;
    let marginal_variances = (0..k).map(|i| ginv[(i, i)]).collect();
    Ok(ScaledIcar {
        structure: structure.clone(),
        scale,
        scaled: structure * scale,
        ginv,
        marginal_variances,
        eigenvalues,
        eigenvectors: vecs,
    })
}

fn ginv_from(vecs: &DMatrix<f64>, vals: &[f64]) -> DMatrix<f64> {
    let scaled = DMatrix::from_fn(vecs.nrows(), vecs.ncols(), |r, c| vecs[(r, c)] / vals[c]);
    &scaled * vecs.transpose()
}

impl ScaledIcar {
    pub fn from_adjacency(adj: &Adjacency) -> Result<Self> {
        scale_icar(&icar_structure(adj)?)
    }

    pub fn len(&self) -> usize {
        self.structure.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn geometric_mean_variance(&self) -> f64 {
        let k = self.marginal_variances.len() as f64;
        (self.marginal_variances.iter().map(|v| v.ln()).sum::<f64>() / k).exp()
    }

    /// Maps K-1 standard-normal coordinates to a sum-to-zero ICAR field.
    pub fn field_from_coords(&self, z: &[f64]) -> Vec<f64> {
        let k = self.len();
        let mut u = vec![0.0; k];
        for (c, &zc) in z.iter().enumerate() {
            let s = zc / self.eigenvalues[c].sqrt();
            for (r, ur) in u.iter_mut().enumerate() {
                *ur += self.eigenvectors[(r, c)] * s;
            }
        }
        u
    }

    /// Inverse of [`Self::field_from_coords`] for a sum-to-zero field.
    pub fn coords_from_field(&self, u: &[f64]) -> Vec<f64> {
        (0..self.eigenvalues.len())
            .map(|c| {
                let proj: f64 = u.iter().enumerate().map(|(r, x)| self.eigenvectors[(r, c)] * x).sum();
                proj * self.eigenvalues[c].sqrt()
            })
            .collect()
    }

    pub fn draw_field<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.eigenvalues.len()).map(|_| rng.sample(StandardNormal)).collect();
        self.field_from_coords(&z)
    }

    /// Quadratic form `u' Q* u` of the scaled structure.
    pub fn quadratic_form(&self, u: &[f64]) -> f64 {
        let v = DVector::from_column_slice(u);
        (v.transpose() * &self.scaled * &v)[(0, 0)]
    }

    /// Covariance of the BYM2 effect: `((1-phi) I + phi Q*^-) / tau`.
    pub fn bym2_covariance(&self, tau: f64, phi: f64) -> DMatrix<f64> {
        let k = self.len();
        let mut cov = &self.ginv * (phi / tau);
        for i in 0..k {
            cov[(i, i)] += (1.0 - phi) / tau;
        }
        cov
    }
}

/// Non-centred BYM2 components.
#[derive(Debug, Clone, PartialEq)]
pub struct Bym2Params {
    pub tau: f64,
    pub phi: f64,
    /// Structured (scaled ICAR, sum-to-zero) component.
    pub u: Vec<f64>,
    /// Unstructured standard-normal component.
    pub v: Vec<f64>,
}

impl Bym2Params {
    pub fn effect(&self) -> Vec<f64> {
        bym2_effect(&self.u, &self.v, self.tau, self.phi)
    }

    pub fn draw<R: Rng + ?Sized>(icar: &ScaledIcar, tau: f64, phi: f64, rng: &mut R) -> Self {
        let u = icar.draw_field(rng);
        let v = (0..icar.len()).map(|_| rng.sample(StandardNormal)).collect();
        Self { tau, phi, u, v }
    }
}

/// `b = (sqrt(1-phi) v + sqrt(phi) u) / sqrt(tau)`.
pub fn bym2_effect(u: &[f64], v: &[f64], tau: f64, phi: f64) -> Vec<f64> {
    let (a, c, s) = ((1.0 - phi).sqrt(), phi.sqrt(), 1.0 / tau.sqrt());
    u.iter().zip(v).map(|(ui, vi)| s * (a * vi + c * ui)).collect()
}

/// Joint log density of the non-centred BYM2 components `(u, v)`.
///
/// The structured quadratic form is evaluated on the centred field, and the
/// sum-to-zero constraint enters as a Gaussian penalty on `mean(u)` with SD
/// `1e-3 / sqrt(K)`. At `phi = 0` only `v` contributes, at `phi = 1` only `u`.
pub fn bym2_logdensity(u: &[f64], v: &[f64], tau: f64, phi: f64, icar: &ScaledIcar) -> Result<f64> {
    if !(0.0..=1.0).contains(&phi) {
        return Err(Error::Spatial(format!("phi = {phi} outside [0, 1]")));
    }
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Spatial(format!("tau = {tau} must be positive")));
    }
    let k = icar.len();
    if u.len() != k || v.len() != k {
        return Err(Error::Spatial("component length does not match graph".into()));
    }
    let mut lp = 0.0;
    if phi < 1.0 {
        lp += v.iter().map(|x| -0.5 * (LN_2PI + x * x)).sum::<f64>();
    }
    if phi > 0.0 {
        let mean_u = u.iter().sum::<f64>() / k as f64;
        let centred: Vec<f64> = u.iter().map(|x| x - mean_u).collect();
        let log_det: f64 = icar.eigenvalues.iter().map(|l| l.ln()).sum();
        lp += -0.5 * ((k - 1) as f64 * LN_2PI - log_det + icar.quadratic_form(&centred));
        let sd = SUM_TO_ZERO_SD / (k as f64).sqrt();
        lp += -0.5 * (LN_2PI + 2.0 * sd.ln() + (mean_u / sd).powi(2));
    }
    Ok(lp)
}

pub const SUM_TO_ZERO_SD: f64 = 1e-3;

/// Penalised-complexity prior on a precision `tau` with `P(1/sqrt(tau) > u) = alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PcPrecPrior {
    pub u: f64,
    pub alpha: f64,
}

impl PcPrecPrior {
    pub fn new(u: f64, alpha: f64) -> Result<Self> {
        if !(u > 0.0) || !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Spatial(format!("invalid PC prior (u = {u}, alpha = {alpha})")));
        }
        Ok(Self { u, alpha })
    }

    pub fn rate(&self) -> f64 {
        -self.alpha.ln() / self.u
    }

    pub fn logdensity(&self, tau: f64) -> f64 {
        let lambda = self.rate();
        (0.5 * lambda).ln() - 1.5 * tau.ln() - lambda / tau.sqrt()
    }
}

/// Log density of the type-2 Gumbel PC prior for a precision.
pub fn pc_prec_logdensity(tau: f64, u: f64, alpha: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Spatial(format!("tau = {tau} must be positive")));
    }
    Ok(PcPrecPrior::new(u, alpha)?.logdensity(tau))
}

/// Beta prior on the BYM2 mixing proportion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPrior {
    pub a: f64,
    pub b: f64,
}

fn xlogy(a: f64, y: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a * y.ln()
    }
}

impl BetaPrior {
    pub fn logdensity(&self, x: f64) -> f64 {
        ln_gamma(self.a + self.b) - ln_gamma(self.a) - ln_gamma(self.b)
            + xlogy(self.a - 1.0, x)
            + xlogy(self.b - 1.0, 1.0 - x)
    }

    pub fn mean(&self) -> f64 {
        self.a / (self.a + self.b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn path(n: usize) -> Adjacency {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Adjacency::from_edges(n, &edges).unwrap()
    }

    fn grid(rows: usize, cols: usize) -> Adjacency {
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    edges.push((i, i + 1));
                }
                if r + 1 < rows {
                    edges.push((i, i + cols));
                }
            }
        }
        Adjacency::from_edges(rows * cols, &edges).unwrap()
    }

    #[test]
    fn path_structure_matches_definition() {
        let q = icar_structure(&path(3)).unwrap();
        let expect = DMatrix::from_row_slice(3, 3, &[1., -1., 0., -1., 2., -1., 0., -1., 1.]);
        assert_eq!(q, expect);
        for r in 0..3 {
            assert_eq!(q.row(r).sum(), 0.0);
        }
    }

    #[test]
    fn two_node_structure_and_scale() {
        let q = icar_structure(&path(2)).unwrap();
        assert_eq!(q, DMatrix::from_row_slice(2, 2, &[1., -1., -1., 1.]));
        // constrained pair: u = (x, -x), Var(x) = 1/4 under the raw structure
        let s = scale_icar(&q).unwrap();
        assert_relative_eq!(s.scale, 0.25, epsilon = 1e-12);
    }

    #[test]
    fn single_area_and_disconnected_graphs_are_rejected() {
        assert!(icar_structure(&path(1)).is_err());
        let adj = Adjacency::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        assert!(matches!(icar_structure(&adj), Err(Error::Disconnected)));
    }

    #[test]
    fn structure_is_psd_with_one_null_direction() {
        let q = icar_structure(&grid(4, 5)).unwrap();
        let eig = SymmetricEigen::new(q);
        let zeros = eig.eigenvalues.iter().filter(|v| v.abs() < 1e-9).count();
        assert_eq!(zeros, 1);
        assert!(eig.eigenvalues.iter().all(|&v| v > -1e-9));
    }

    #[test]
    fn scaling_normalises_and_is_idempotent() {
        let s = ScaledIcar::from_adjacency(&grid(5, 6)).unwrap();
        // recompute the generalized inverse of the scaled matrix independently
        let k = s.len();
        let ones = DMatrix::from_element(k, k, 1.0 / k as f64);
        let inv = (&s.scaled + &ones).try_inverse().unwrap() - &ones;
        let gm = ((0..k).map(|i| inv[(i, i)].ln()).sum::<f64>() / k as f64).exp();
        assert_relative_eq!(gm, 1.0, epsilon = 1e-6);
        let again = scale_icar(&s.scaled).unwrap();
        assert_relative_eq!(again.scale, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn coordinates_round_trip_and_sum_to_zero() {
        let s = ScaledIcar::from_adjacency(&grid(3, 4)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let u = s.draw_field(&mut rng);
        assert!(u.iter().sum::<f64>().abs() < 1e-10);
        let z = s.coords_from_field(&u);
        let back = s.field_from_coords(&z);
        for (a, b) in u.iter().zip(&back) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn phi_zero_reduces_to_iid_density() {
        let s = ScaledIcar::from_adjacency(&grid(3, 3)).unwrap();
        let u = vec![5.0; 9];
        let v: Vec<f64> = (0..9).map(|i| i as f64 * 0.1 - 0.4).collect();
        let lp = bym2_logdensity(&u, &v, 3.0, 0.0, &s).unwrap();
        let iid: f64 = v.iter().map(|x| crate::numeric::normal_logpdf(*x, 0.0, 1.0)).sum();
        assert_relative_eq!(lp, iid, epsilon = 1e-12);
    }

    #[test]
    fn structured_term_ignores_constants_but_penalises_the_sum() {
        let s = ScaledIcar::from_adjacency(&grid(3, 3)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let u = s.draw_field(&mut rng);
        let v = vec![0.0; 9];
        let base = bym2_logdensity(&u, &v, 1.0, 1.0, &s).unwrap();
        let shifted: Vec<f64> = u.iter().map(|x| x + 0.01).collect();
        let moved = bym2_logdensity(&shifted, &v, 1.0, 1.0, &s).unwrap();
        let sd = SUM_TO_ZERO_SD / 3.0;
        assert_relative_eq!(base - moved, 0.5 * (0.01 / sd).powi(2), epsilon = 1e-6);
        assert!(bym2_logdensity(&u, &v, 1.0, 1.2, &s).is_err());
    }

    #[test]
    fn pc_prior_rate_and_normalisation() {
        let p = PcPrecPrior::new(1.0, 0.01).unwrap();
        assert_relative_eq!(p.rate(), 4.605_170_185_988_091, epsilon = 1e-12);
        let f = |x: f64| (p.logdensity(x.exp()) + x).exp();
        let total = crate::numeric::adaptive_simpson(&f, -60.0, 60.0, 1e-14);
        assert_relative_eq!(total, 1.0, epsilon = 1e-6);
        assert!(pc_prec_logdensity(-1.0, 1.0, 0.01).is_err());
        assert!(pc_prec_logdensity(1.0, 0.0, 0.01).is_err());
        assert!(pc_prec_logdensity(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn beta_half_one_mean() {
        let b = BetaPrior { a: 0.5, b: 1.0 };
        assert_relative_eq!(b.mean(), 1.0 / 3.0, epsilon = 1e-12);
        let f = |x: f64| x * b.logdensity(x).exp();
        // substitute x = t^2 to remove the integrable singularity at 0
        let g = |t: f64| 2.0 * t * f(t * t);
        assert_relative_eq!(crate::numeric::adaptive_simpson(&g, 1e-100, 1.0, 1e-13), 1.0 / 3.0, epsilon = 1e-9);
    }
}
