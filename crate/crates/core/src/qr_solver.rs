//! Check-loss minimization for finite-dimensional quantile regression.
//!
//! `min_β n⁻¹ Σᵢ ρ_u(yᵢ − zᵢ'β)` with `ρ_u(r) = {u − 1(r ≤ 0)} r` is a linear
//! program. The solver runs a primal-dual interior point method on the
//! bounded dual
//!
//! ```text
//! max  y'd   s.t.  Z'd = (1 − u) Z'1,  0 ≤ d ≤ 1
//! ```
//!
//! to get close to the optimum, then walks to an exact basic solution: `p`
//! observations interpolated exactly, improved edge by edge until every
//! directional derivative is nonnegative. At a basic optimum the subgradient
//! `n⁻¹ Σ {u − 1(yᵢ ≤ zᵢ'β)} zᵢ` is bounded by `(p / n) maxᵢ ‖zᵢ‖`, which is
//! reported as an optimality certificate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FqrError, Result};

const MAX_IPM_ITERATIONS: usize = 200;
const IPM_STEP_DAMPING: f64 = 0.99995;
/// Relative duality-gap tolerance accepted at the final solution.
pub const GAP_TOLERANCE: f64 = 1e-8;
/// Additive slack on the certificate bound.
pub const CERTIFICATE_SLACK: f64 = 1e-6;

/// A minimizer of the empirical check loss at one quantile level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QrSolution {
    pub u: f64,
    /// Intercept first, then one coefficient per design column.
    pub coefficients: Vec<f64>,
    /// Attained mean check loss.
    pub objective: f64,
    /// Euclidean norm of the subgradient vector at `coefficients`.
    pub subgradient_norm: f64,
    /// `(p / n) maxᵢ ‖zᵢ‖`.
    pub certificate_bound: f64,
    /// Primal minus dual objective (mean scale) at termination.
    pub duality_gap: f64,
    pub iterations: usize,
}

impl QrSolution {
    pub fn certificate_holds(&self) -> bool {
        self.subgradient_norm <= self.certificate_bound + CERTIFICATE_SLACK
    }
}

/// `ρ_u(r) = {u − 1(r ≤ 0)} r`.
#[inline]
pub fn rho(u: f64, r: f64) -> f64 {
    if r <= 0.0 {
        (u - 1.0) * r
    } else {
        u * r
    }
}

fn check_level(u: f64) -> Result<()> {
    if !(u > 0.0 && u < 1.0) {
        return Err(FqrError::validation(format!("quantile level {u} must lie strictly inside (0, 1)")));
    }
    Ok(())
}

/// Mean check loss of a residual vector.
pub fn check_loss(residuals: &[f64], u: f64) -> Result<f64> {
    check_level(u)?;
    if residuals.is_empty() {
        return Err(FqrError::validation("check loss of an empty residual vector"));
    }
    Ok(residuals.iter().map(|&r| rho(u, r)).sum::<f64>() / residuals.len() as f64)
}

/// `n⁻¹ Σᵢ {u − 1(yᵢ ≤ zᵢ'β)} zᵢ`.
pub fn subgradient_vector(design: &DMatrix<f64>, responses: &[f64], coefficients: &[f64], u: f64) -> Vec<f64> {
    let n = design.nrows();
    let p = design.ncols();
    let mut g = vec![0.0; p];
    for (i, &y) in responses.iter().enumerate().take(n) {
        let fitted: f64 = (0..p).map(|j| design[(i, j)] * coefficients[j]).sum();
        let psi = if y <= fitted { u - 1.0 } else { u };
        for (j, gj) in g.iter_mut().enumerate() {
            *gj += psi * design[(i, j)];
        }
    }
    g.iter_mut().for_each(|v| *v /= n as f64);
    g
}

/// `(p / n) maxᵢ ‖zᵢ‖`, the subgradient bound at a basic solution.
pub fn certificate_bound(design: &DMatrix<f64>) -> f64 {
    let n = design.nrows();
    let max_row = design.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    design.ncols() as f64 / n as f64 * max_row
}

/// Minimizes the mean check loss of `responses` on `design` at level `u`.
///
/// The first design column must be the intercept (all ones). Rank-deficient
/// designs are accepted: dependent columns get coefficient zero.
pub fn solve_check_loss(design: &DMatrix<f64>, responses: &[f64], u: f64) -> Result<QrSolution> {
    check_level(u)?;
    let n = design.nrows();
    let p = design.ncols();
    if responses.len() != n {
        return Err(FqrError::validation(format!("design has {n} rows but {} responses", responses.len())));
    }
    if p == 0 {
        return Err(FqrError::validation("design has no columns"));
    }
    if n < p + 1 {
        return Err(FqrError::validation(format!(
            "need n ≥ m + 2 observations, got n = {n} with m = {}",
            p - 1
        )));
    }
    if design.column(0).iter().any(|&v| v != 1.0) {
        return Err(FqrError::validation("first design column must be the intercept (all ones)"));
    }
    if design.iter().chain(responses).any(|v| !v.is_finite()) {
        return Err(FqrError::validation("design and responses must be finite"));
    }

    let active = independent_columns(design);
    let z = design.select_columns(active.iter());

    // scale responses to unit magnitude; the problem is positively homogeneous
    let scale = responses.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let y: Vec<f64> = responses.iter().map(|v| v / scale).collect();

    let (warm, dual, ipm_iterations) = interior_point(&z, &y, u)?;
    let vertex = walk_to_basic_optimum(&z, &y, u, &warm, &dual)?;

    let mut coefficients = vec![0.0; p];
    for (k, &j) in active.iter().enumerate() {
        coefficients[j] = vertex.beta[k] * scale;
    }
    let residuals: Vec<f64> = (0..n)
        .map(|i| responses[i] - (0..p).map(|j| design[(i, j)] * coefficients[j]).sum::<f64>())
        .collect();
    let objective = check_loss(&residuals, u)?;
    let duality_gap = vertex.gap * scale;
    if vertex.gap > GAP_TOLERANCE * (1.0 + objective / scale) {
        return Err(FqrError::numerical(format!(
            "check-loss solver stopped with relative duality gap {:e}",
            vertex.gap
        )));
    }
    let g = subgradient_vector(design, responses, &coefficients, u);
    Ok(QrSolution {
        u,
        coefficients,
        objective,
        subgradient_norm: g.iter().map(|v| v * v).sum::<f64>().sqrt(),
        certificate_bound: certificate_bound(design),
        duality_gap,
        iterations: ipm_iterations + vertex.pivots,
    })
}

/// Greedy modified Gram–Schmidt over columns; keeps the intercept first.
fn independent_columns(design: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..design.ncols() {
        let col = design.column(j).into_owned();
        let norm0 = col.norm();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = col;
        for q in &basis {
            let c = q.dot(&v);
            v.axpy(-c, q, 1.0);
        }
        let norm = v.norm();
        if norm > 1e-10 * norm0 {
            basis.push(v / norm);
            keep.push(j);
        }
    }
    keep
}

fn step_bound(x: &[f64], dx: &[f64]) -> f64 {
    x.iter().zip(dx).filter(|(_, &d)| d < 0.0).map(|(&v, &d)| -v / d).fold(1e20, f64::min)
}

fn weighted_gram(z: &DMatrix<f64>, q: &[f64]) -> DMatrix<f64> {
    let p = z.ncols();
    let mut m = DMatrix::zeros(p, p);
    for (i, &qi) in q.iter().enumerate() {
        for a in 0..p {
            let za = qi * z[(i, a)];
            for b in 0..=a {
                m[(a, b)] += za * z[(i, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            m[(b, a)] = m[(a, b)];
        }
    }
    m
}

fn solve_spd(m: DMatrix<f64>, rhs: DVector<f64>) -> Result<DVector<f64>> {
    if let Some(chol) = m.clone().cholesky() {
        return Ok(chol.solve(&rhs));
    }
    m.lu().solve(&rhs).ok_or_else(|| FqrError::numerical("singular normal matrix in interior point step"))
}

/// Frisch–Newton predictor-corrector iterations on the bounded dual.
/// Returns approximate primal coefficients, the dual weights
/// `aᵢ = dᵢ − (1 − u) ∈ [u − 1, u]` (with `Z'a = 0`) and the iteration count.
fn interior_point(z: &DMatrix<f64>, y: &[f64], u: f64) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let n = z.nrows();
    let ones = vec![1.0; n];
    let c: Vec<f64> = y.iter().map(|v| -v).collect();
    let b = z.tr_mul(&DVector::from_element(n, 1.0 - u));

    let mut x = vec![1.0 - u; n];
    let mut s = vec![u; n];
    let c_vec = DVector::from_column_slice(&c);
    let mut yd = solve_spd(weighted_gram(z, &ones), z.tr_mul(&c_vec))?;
    let mut r: Vec<f64> = (c_vec - z * &yd).iter().map(|&v| if v == 0.0 { 0.001 } else { v }).collect();
    let mut zz: Vec<f64> = r.iter().map(|&v| v.max(0.0)).collect();
    let mut w: Vec<f64> = zz.iter().zip(&r).map(|(a, b)| a - b).collect();

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let gap = |x: &[f64], yd: &DVector<f64>, w: &[f64]| dot(&c, x) - yd.dot(&b) + w.iter().sum::<f64>();

    let mut it = 0;
    let mut current_gap = gap(&x, &yd, &w);
    let tol = GAP_TOLERANCE * 1e-2 * n as f64;
    while current_gap > tol && it < MAX_IPM_ITERATIONS {
        it += 1;
        let q: Vec<f64> = (0..n).map(|i| 1.0 / (zz[i] / x[i] + w[i] / s[i])).collect();
        r = (0..n).map(|i| zz[i] - w[i]).collect();
        let gram = weighted_gram(z, &q);
        let qr: Vec<f64> = (0..n).map(|i| q[i] * r[i]).collect();
        let dy = solve_spd(gram.clone(), z.tr_mul(&DVector::from_vec(qr)))?;
        let zdy = z * &dy;
        let mut dx: Vec<f64> = (0..n).map(|i| q[i] * (zdy[i] - r[i])).collect();
        let mut ds: Vec<f64> = dx.iter().map(|v| -v).collect();
        let mut dz: Vec<f64> = (0..n).map(|i| -zz[i] * (dx[i] / x[i] + 1.0)).collect();
        let mut dw: Vec<f64> = (0..n).map(|i| -w[i] * (ds[i] / s[i] + 1.0)).collect();
        let mut fp = (IPM_STEP_DAMPING * step_bound(&x, &dx).min(step_bound(&s, &ds))).min(1.0);
        let mut fd = (IPM_STEP_DAMPING * step_bound(&w, &dw).min(step_bound(&zz, &dz))).min(1.0);
        let mut step = dy;

        if fp.min(fd) < 1.0 {
            let mu0 = dot(&zz, &x) + dot(&w, &s);
            let g: f64 = (0..n)
                .map(|i| (zz[i] + fd * dz[i]) * (x[i] + fp * dx[i]) + (w[i] + fd * dw[i]) * (s[i] + fp * ds[i]))
                .sum();
            let mu = mu0 * (g / mu0).powi(3) / (2.0 * n as f64);
            let dxdz: Vec<f64> = (0..n).map(|i| dx[i] * dz[i]).collect();
            let dsdw: Vec<f64> = (0..n).map(|i| ds[i] * dw[i]).collect();
            let xi: Vec<f64> = (0..n).map(|i| mu * (1.0 / x[i] - 1.0 / s[i])).collect();
            let rhs: Vec<f64> = (0..n).map(|i| q[i] * (r[i] + dxdz[i] - dsdw[i] - xi[i])).collect();
            let dy = solve_spd(gram, z.tr_mul(&DVector::from_vec(rhs)))?;
            let zdy = z * &dy;
            dx = (0..n).map(|i| q[i] * (zdy[i] + xi[i] - r[i] - dxdz[i] + dsdw[i])).collect();
            ds = dx.iter().map(|v| -v).collect();
            dz = (0..n).map(|i| mu / x[i] - zz[i] - zz[i] * dx[i] / x[i] - dxdz[i]).collect();
            dw = (0..n).map(|i| mu / s[i] - w[i] - w[i] * ds[i] / s[i] - dsdw[i]).collect();
            fp = (IPM_STEP_DAMPING * step_bound(&x, &dx).min(step_bound(&s, &ds))).min(1.0);
            fd = (IPM_STEP_DAMPING * step_bound(&w, &dw).min(step_bound(&zz, &dz))).min(1.0);
            step = dy;
        }

        for i in 0..n {
            x[i] += fp * dx[i];
            s[i] += fp * ds[i];
            w[i] += fd * dw[i];
            zz[i] += fd * dz[i];
        }
        yd.axpy(fd, &step, 1.0);
        current_gap = gap(&x, &yd, &w);
        if !current_gap.is_finite() {
            return Err(FqrError::numerical("interior point iterates diverged"));
        }
    }
    let dual = x.iter().map(|d| (d - (1.0 - u)).clamp(u - 1.0, u)).collect();
    Ok((yd.iter().map(|v| -v).collect(), dual, it))
}

struct Vertex {
    beta: Vec<f64>,
    gap: f64,
    pivots: usize,
}

fn residual_floor(y: f64, fitted: f64) -> f64 {
    1e-11 * (1.0 + y.abs() + fitted.abs())
}

/// Picks `p` rows with the smallest residuals whose design rows are independent.
fn initial_basis(z: &DMatrix<f64>, residuals: &[f64]) -> Result<Vec<usize>> {
    let p = z.ncols();
    let mut order: Vec<usize> = (0..z.nrows()).collect();
    order.sort_by(|&a, &b| residuals[a].abs().total_cmp(&residuals[b].abs()).then(a.cmp(&b)));
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(p);
    let mut rows = Vec::with_capacity(p);
    for i in order {
        let row = z.row(i).transpose();
        let norm0 = row.norm();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = row;
        for q in &basis {
            let c = q.dot(&v);
            v.axpy(-c, q, 1.0);
        }
        let norm = v.norm();
        if norm > 1e-8 * norm0 {
            basis.push(v / norm);
            rows.push(i);
            if rows.len() == p {
                return Ok(rows);
            }
        }
    }
    Err(FqrError::numerical("design has no nonsingular set of interpolation rows"))
}

/// Exterior edge walk over basic solutions (each one interpolating `p`
/// observations), starting from the basis closest to `warm`.
fn walk_to_basic_optimum(z: &DMatrix<f64>, y: &[f64], u: f64, warm: &[f64], dual: &[f64]) -> Result<Vertex> {
    let n = z.nrows();
    let p = z.ncols();
    let warm = DVector::from_column_slice(warm);
    let fitted = z * &warm;
    let residuals: Vec<f64> = (0..n).map(|i| y[i] - fitted[i]).collect();
    let mut basis = initial_basis(z, &residuals)?;
    let max_pivots = 100 + 20 * n;

    for pivots in 0..=max_pivots {
        let zh = z.select_rows(basis.iter());
        let inv = zh
            .try_inverse()
            .ok_or_else(|| FqrError::numerical("basis matrix became singular during the edge walk"))?;
        let yh = DVector::from_iterator(p, basis.iter().map(|&i| y[i]));
        let beta = &inv * yh;
        let fitted = z * &beta;
        let mut in_basis = vec![false; n];
        basis.iter().for_each(|&i| in_basis[i] = true);
        let r: Vec<f64> = (0..n)
            .map(|i| {
                let raw = y[i] - fitted[i];
                if in_basis[i] || raw.abs() <= residual_floor(y[i], fitted[i]) {
                    0.0
                } else {
                    raw
                }
            })
            .collect();
        // column h of `dir` holds zᵢ'δ_h for the edge δ_h = Z_H⁻¹ e_h
        let dir = z * &inv;

        let mut best: Option<(f64, usize, f64)> = None;
        for h in 0..p {
            for s in [1.0, -1.0] {
                let mut deriv = if s > 0.0 { 1.0 - u } else { u };
                let mut scale = 1.0;
                for i in (0..n).filter(|&i| !in_basis[i]) {
                    let a = s * dir[(i, h)];
                    scale += a.abs();
                    deriv += if r[i] > 0.0 {
                        -u * a
                    } else if r[i] < 0.0 {
                        (1.0 - u) * a
                    } else {
                        (-u * a).max((1.0 - u) * a)
                    };
                }
                if deriv < -1e-11 * scale && best.is_none_or(|(d, _, _)| deriv < d) {
                    best = Some((deriv, h, s));
                }
            }
        }

        let Some((deriv, h, s)) = best else {
            let gap = dual_gap(y, u, &r, dual);
            return Ok(Vertex { beta: beta.iter().copied().collect(), gap, pivots });
        };

        // line search: the loss along the edge is convex piecewise linear
        let mut breaks: Vec<(f64, f64, usize)> = (0..n)
            .filter(|&i| !in_basis[i] && r[i] != 0.0)
            .filter_map(|i| {
                let a = s * dir[(i, h)];
                let t = r[i] / a;
                (a != 0.0 && t > 0.0).then_some((t, a.abs(), i))
            })
            .collect();
        breaks.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
        let mut slope = deriv;
        let mut entering = None;
        for &(_, weight, i) in &breaks {
            slope += weight;
            if slope >= 0.0 {
                entering = Some(i);
                break;
            }
        }
        let entering = entering.ok_or_else(|| FqrError::numerical("check loss is unbounded along an edge"))?;
        basis[h] = entering;
    }
    Err(FqrError::numerical(format!("edge walk did not terminate within {max_pivots} pivots")))
}

/// Primal objective at the vertex minus the dual objective `y'a` of the
/// interior point weights, in mean scale. Nonnegative up to rounding by weak duality.
fn dual_gap(y: &[f64], u: f64, r: &[f64], dual: &[f64]) -> f64 {
    let primal: f64 = r.iter().map(|&ri| rho(u, ri)).sum();
    let lower: f64 = y.iter().zip(dual).map(|(yi, ai)| yi * ai).sum();
    (primal - lower).max(0.0) / y.len() as f64
}
