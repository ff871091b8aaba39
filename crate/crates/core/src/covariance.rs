//! Empirical covariance kernel, its eigenfunctions, and principal scores.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::curves::{curve_mean, dot_trapezoid, trapezoid_weights, GridFunction};
use crate::error::{FqrError, Result};

/// Negative eigenvalues within this fraction of the largest one are clamped to zero.
pub const CLAMP_TOLERANCE: f64 = 1e-10;
/// Eigenvalues below this fraction of the largest one do not count as usable components.
pub const USABLE_TOLERANCE: f64 = 1e-12;

/// The covariance kernel sampled on the evaluation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelOnGrid {
    matrix: DMatrix<f64>,
}

impl KernelOnGrid {
    pub fn grid_size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn get(&self, g: usize, h: usize) -> f64 {
        self.matrix[(g, h)]
    }
}

/// `K̂(t_g, t_h) = n⁻¹ Σᵢ (X̂ᵢ(t_g) − X̄(t_g)) (X̂ᵢ(t_h) − X̄(t_h))`.
pub fn empirical_kernel(curves: &[GridFunction]) -> Result<KernelOnGrid> {
    if curves.len() < 2 {
        return Err(FqrError::validation("the covariance kernel needs at least two curves"));
    }
    let mean = curve_mean(curves)?;
    let g = mean.grid_size();
    let n = curves.len();
    let centered = DMatrix::from_fn(g, n, |row, col| curves[col].values()[row] - mean.values()[row]);
    let mut matrix = &centered * centered.transpose();
    matrix /= n as f64;
    // mirror the lower triangle so the kernel is exactly symmetric
    for col in 1..g {
        for row in 0..col {
            matrix[(row, col)] = matrix[(col, row)];
        }
    }
    Ok(KernelOnGrid { matrix })
}

/// Leading eigenpairs of the kernel's integral operator under trapezoid quadrature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSystem {
    eigenvalues: Vec<f64>,
    eigenfunctions: Vec<GridFunction>,
}

impl EigenSystem {
    pub fn new(eigenvalues: Vec<f64>, eigenfunctions: Vec<GridFunction>) -> Result<Self> {
        if eigenvalues.len() != eigenfunctions.len() {
            return Err(FqrError::validation("eigenvalue and eigenfunction counts differ"));
        }
        if let Some(f) = eigenfunctions.first() {
            if eigenfunctions.iter().any(|e| e.grid_size() != f.grid_size()) {
                return Err(FqrError::validation("eigenfunctions live on different grids"));
            }
        }
        Ok(Self { eigenvalues, eigenfunctions })
    }

    pub fn count(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenfunctions(&self) -> &[GridFunction] {
        &self.eigenfunctions
    }

    /// `j` is 1-based, matching the component numbering of the scores.
    pub fn eigenfunction(&self, j: usize) -> &GridFunction {
        &self.eigenfunctions[j - 1]
    }

    pub fn grid_size(&self) -> Option<usize> {
        self.eigenfunctions.first().map(GridFunction::grid_size)
    }

    /// Number of leading components whose eigenvalue is materially positive.
    pub fn usable_count(&self) -> usize {
        let top = self.eigenvalues.first().copied().unwrap_or(0.0);
        if top <= 0.0 {
            return 0;
        }
        self.eigenvalues.iter().take_while(|&&k| k > USABLE_TOLERANCE * top).count()
    }

    /// Keeps the first `m` components.
    pub fn truncated(&self, m: usize) -> EigenSystem {
        let m = m.min(self.count());
        EigenSystem {
            eigenvalues: self.eigenvalues[..m].to_vec(),
            eigenfunctions: self.eigenfunctions[..m].to_vec(),
        }
    }

    /// Same system with the sign of component `j` (1-based) reversed.
    pub fn with_flipped_sign(&self, j: usize) -> EigenSystem {
        let mut out = self.clone();
        out.eigenfunctions[j - 1] = out.eigenfunctions[j - 1].scaled(-1.0);
        out
    }
}

/// Eigendecomposes the kernel and keeps the `max_components` leading pairs.
///
/// With trapezoid weights `w` the symmetric matrix `D^{1/2} K D^{1/2}`,
/// `D = diag(w)`, is diagonalized and its eigenvectors mapped back through
/// `D^{-1/2}`, which gives eigenfunctions orthonormal under the quadrature.
/// Each eigenfunction is signed so that its largest-magnitude entry is positive.
pub fn eigendecompose(kernel: &KernelOnGrid, max_components: usize) -> Result<EigenSystem> {
    let g = kernel.grid_size();
    if max_components == 0 || max_components > g {
        return Err(FqrError::validation(format!(
            "max_components must lie in 1..={g}, got {max_components}"
        )));
    }
    let sqrt_w: Vec<f64> = trapezoid_weights(g).into_iter().map(f64::sqrt).collect();
    let weighted = DMatrix::from_fn(g, g, |r, c| sqrt_w[r] * kernel.matrix[(r, c)] * sqrt_w[c]);
    if weighted.iter().any(|v| !v.is_finite()) {
        return Err(FqrError::numerical("kernel contains non-finite entries"));
    }
    let eig = SymmetricEigen::try_new(weighted, f64::EPSILON, 0)
        .ok_or_else(|| FqrError::numerical("symmetric eigen-solver did not converge"))?;

    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let top = eig.eigenvalues[order[0]].max(0.0);
    let floor = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let clamp = CLAMP_TOLERANCE * top.max(floor);

    let mut eigenvalues = Vec::with_capacity(max_components);
    let mut eigenfunctions = Vec::with_capacity(max_components);
    for &idx in order.iter().take(max_components) {
        let mut kappa = eig.eigenvalues[idx];
        if kappa < 0.0 {
            if kappa < -clamp {
                return Err(FqrError::numerical(format!(
                    "kernel is not positive semidefinite: eigenvalue {kappa:e}"
                )));
            }
            kappa = 0.0;
        }
        let mut phi: Vec<f64> = eig.eigenvectors.column(idx).iter().zip(&sqrt_w).map(|(v, s)| v / s).collect();
        apply_sign_convention(&mut phi);
        eigenvalues.push(kappa);
        eigenfunctions.push(GridFunction::new(phi)?);
    }
    EigenSystem::new(eigenvalues, eigenfunctions)
}

fn apply_sign_convention(phi: &mut [f64]) {
    let mut best = 0;
    for (i, v) in phi.iter().enumerate() {
        if v.abs() > phi[best].abs() {
            best = i;
        }
    }
    if phi[best] < 0.0 {
        phi.iter_mut().for_each(|v| *v = -*v);
    }
}

/// Estimated principal scores with a leading column of ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresMatrix {
    n: usize,
    m: usize,
    /// Row-major, `n × (m + 1)`.
    data: Vec<f64>,
}

impl ScoresMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Score `ξ̂_{ij}`; `j = 0` is the intercept column.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * (self.m + 1) + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * (self.m + 1)..(i + 1) * (self.m + 1)]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    /// Keeps the intercept and the first `m` score columns.
    pub fn prefix(&self, m: usize) -> Result<ScoresMatrix> {
        if m > self.m {
            return Err(FqrError::validation(format!("requested {m} score columns, only {} available", self.m)));
        }
        let data = (0..self.n).flat_map(|i| self.row(i)[..=m].iter().copied()).collect();
        Ok(ScoresMatrix { n: self.n, m, data })
    }

    /// The regression design `n × (m + 1)`.
    pub fn design(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.m + 1, &self.data)
    }
}

/// `ξ̂_{ij} = ∫ (X̂ᵢ − X̄) φ̂ⱼ` for `j = 1..=m`, plus `ξ̂_{i0} = 1`.
pub fn compute_scores(curves: &[GridFunction], eig: &EigenSystem, m: usize) -> Result<ScoresMatrix> {
    let n = curves.len();
    if m == 0 || m > eig.count() {
        return Err(FqrError::validation(format!(
            "cut-off m = {m} must lie in 1..={} (retained components)",
            eig.count()
        )));
    }
    if m + 1 > n {
        return Err(FqrError::validation(format!("cut-off m = {m} exceeds n - 1 = {}", n.saturating_sub(1))));
    }
    let mean = curve_mean(curves)?;
    if eig.grid_size() != Some(mean.grid_size()) {
        return Err(FqrError::validation("curves and eigenfunctions use different grids"));
    }
    let mut data = Vec::with_capacity(n * (m + 1));
    let mut centered = vec![0.0; mean.grid_size()];
    for curve in curves {
        for ((c, x), mu) in centered.iter_mut().zip(curve.values()).zip(mean.values()) {
            *c = x - mu;
        }
        data.push(1.0);
        for phi in &eig.eigenfunctions[..m] {
            data.push(dot_trapezoid(&centered, phi.values()));
        }
    }
    Ok(ScoresMatrix { n, m, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::l2_inner;

    fn gf(v: &[f64]) -> GridFunction {
        GridFunction::new(v.to_vec()).unwrap()
    }

    fn pm_one(g: usize) -> Vec<GridFunction> {
        vec![GridFunction::constant(g, 1.0).unwrap(), GridFunction::constant(g, -1.0).unwrap()]
    }

    // plain triple loop over the displayed definition
    fn brute_kernel(curves: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = curves.len() as f64;
        let g = curves[0].len();
        let mean: Vec<f64> = (0..g).map(|k| curves.iter().map(|c| c[k]).sum::<f64>() / n).collect();
        (0..g)
            .map(|s| (0..g).map(|t| curves.iter().map(|c| (c[s] - mean[s]) * (c[t] - mean[t])).sum::<f64>() / n).collect())
            .collect()
    }

    #[test]
    fn kernel_examples() {
        let k = empirical_kernel(&pm_one(4)).unwrap();
        assert!(k.matrix().iter().all(|&v| v == 1.0));

        let same = vec![gf(&[1.0, 2.0, 3.0]); 5];
        assert!(empirical_kernel(&same).unwrap().matrix().iter().all(|&v| v == 0.0));

        let k = empirical_kernel(&[gf(&[1.0, 0.0]), gf(&[0.0, 1.0])]).unwrap();
        let oracle = brute_kernel(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(oracle, vec![vec![0.25, -0.25], vec![-0.25, 0.25]]);
        for s in 0..2 {
            for t in 0..2 {
                assert!((k.get(s, t) - oracle[s][t]).abs() < 1e-15);
            }
        }
        assert!(empirical_kernel(&[gf(&[1.0, 0.0])]).is_err());
    }

    #[test]
    fn kernel_matches_brute_force_and_is_symmetric() {
        let raw: Vec<Vec<f64>> = (0..7).map(|i| (0..9).map(|g| ((i * 13 + g * 7) % 11) as f64 - 5.0).collect()).collect();
        let curves: Vec<_> = raw.iter().map(|r| gf(r)).collect();
        let k = empirical_kernel(&curves).unwrap();
        let oracle = brute_kernel(&raw);
        for s in 0..9 {
            for t in 0..9 {
                assert!((k.get(s, t) - oracle[s][t]).abs() < 1e-12);
                assert_eq!(k.get(s, t), k.get(t, s));
            }
        }
    }

    #[test]
    fn rank_one_constant_kernel() {
        let k = empirical_kernel(&pm_one(21)).unwrap();
        let eig = eigendecompose(&k, 21).unwrap();
        assert!((eig.eigenvalues()[0] - 1.0).abs() < 1e-12);
        assert!(eig.eigenfunction(1).values().iter().all(|v| (v - 1.0).abs() < 1e-10));
        assert!(eig.eigenvalues()[1..].iter().all(|&v| v.abs() < 1e-12));
        assert_eq!(eig.usable_count(), 1);
    }

    #[test]
    fn zero_kernel_has_zero_spectrum() {
        let k = empirical_kernel(&vec![gf(&[0.5, 1.0, -2.0, 3.0]); 3]).unwrap();
        let eig = eigendecompose(&k, 4).unwrap();
        assert!(eig.eigenvalues().iter().all(|&v| v == 0.0));
        assert_eq!(eig.usable_count(), 0);
        assert!(eigendecompose(&k, 0).is_err());
        assert!(eigendecompose(&k, 5).is_err());
    }

    #[test]
    fn eigenpairs_solve_the_discretized_problem() {
        let g = 41;
        let curves: Vec<_> = (0..12)
            .map(|i| {
                let a = (i as f64 * 0.7).sin();
                let b = (i as f64 * 1.3).cos();
                GridFunction::from_fn(g, |t| a * t + b * (3.0 * t).sin() + 0.1 * i as f64 * t * t).unwrap()
            })
            .collect();
        let k = empirical_kernel(&curves).unwrap();
        let eig = eigendecompose(&k, 3).unwrap();
        let w = trapezoid_weights(g);
        for j in 1..=3 {
            let phi = eig.eigenfunction(j).values();
            for s in 0..g {
                let lhs: f64 = (0..g).map(|t| k.get(s, t) * w[t] * phi[t]).sum();
                assert!((lhs - eig.eigenvalues()[j - 1] * phi[s]).abs() < 1e-10);
            }
            for l in 1..=3 {
                let ip = l2_inner(eig.eigenfunction(j), eig.eigenfunction(l)).unwrap();
                assert!((ip - if j == l { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
            let max_entry = phi.iter().cloned().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(max_entry > 0.0);
        }
        assert!(eig.eigenvalues().windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn scores_examples() {
        let curves = pm_one(11);
        let eig = eigendecompose(&empirical_kernel(&curves).unwrap(), 2).unwrap();
        let s = compute_scores(&curves, &eig, 1).unwrap();
        assert_eq!(s.column(0), vec![1.0, 1.0]);
        let col = s.column(1);
        assert!((col[0] - 1.0).abs() < 1e-10 && (col[1] + 1.0).abs() < 1e-10);

        // m out of range
        assert!(compute_scores(&curves, &eig, 0).is_err());
        assert!(compute_scores(&curves, &eig, 2).is_err());
        assert!(compute_scores(&curves, &eig, 3).is_err());

        let same = vec![GridFunction::constant(11, 0.3).unwrap(); 4];
        let s = compute_scores(&same, &eig, 1).unwrap();
        assert!(s.column(1).iter().all(|v| v.abs() < 1e-15));
        assert_eq!(s.column(0), vec![1.0; 4]);
    }

    #[test]
    fn full_reconstruction_of_kernel() {
        let g = 15;
        let curves: Vec<_> =
            (0..6).map(|i| GridFunction::from_fn(g, |t| ((i + 1) as f64 * t).sin() + (i as f64) * t).unwrap()).collect();
        let k = empirical_kernel(&curves).unwrap();
        let eig = eigendecompose(&k, g).unwrap();
        let top = eig.eigenvalues()[0];
        for s in 0..g {
            for t in 0..g {
                let rec: f64 = (1..=g)
                    .map(|j| eig.eigenvalues()[j - 1] * eig.eigenfunction(j).values()[s] * eig.eigenfunction(j).values()[t])
                    .sum();
                assert!((rec - k.get(s, t)).abs() < 1e-6 * top);
            }
        }
    }
}
