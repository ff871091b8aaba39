//! Choosing the cut-off level `m`.
//!
//! With `S(u) = Σᵢ ρ_u(Yᵢ − â(u) − Σⱼ b̂ⱼ(u) ξ̂ᵢⱼ)`:
//!
//! ```text
//! AIC(u)  = log(S(u)/n) + (m + 1)/n
//! BIC(u)  = log(S(u)/n) + (m + 1) log(n)/n
//! GACV(u) = S(u) / (n − (m + 1))
//! ```
//!
//! Over a grid of levels the integrated criteria are plain averages.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::curves::{interpolate, DiscreteCurve, InterpolationRule};
use crate::error::{FqrError, Result};
use crate::estimator::{PcaBasis, QuantileIndexSet};

/// Upper end of the default candidate range.
pub const DEFAULT_MAX_CANDIDATE: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    Aic,
    Bic,
    Gacv,
}

impl CriterionKind {
    pub const ALL: [CriterionKind; 3] = [CriterionKind::Aic, CriterionKind::Bic, CriterionKind::Gacv];

    pub fn as_str(&self) -> &'static str {
        match self {
            CriterionKind::Aic => "aic",
            CriterionKind::Bic => "bic",
            CriterionKind::Gacv => "gacv",
        }
    }
}

impl std::str::FromStr for CriterionKind {
    type Err = FqrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aic" => Ok(CriterionKind::Aic),
            "bic" => Ok(CriterionKind::Bic),
            "gacv" => Ok(CriterionKind::Gacv),
            other => Err(FqrError::validation(format!("unknown criterion {other:?}"))),
        }
    }
}

/// Criterion value at one level from the minimized check-loss sum.
pub fn criterion_at(kind: CriterionKind, sum_check_loss: f64, n: usize, m: usize) -> Result<f64> {
    if n <= m + 1 {
        return Err(FqrError::validation(format!("criterion needs n > m + 1, got n = {n}, m = {m}")));
    }
    if !(sum_check_loss >= 0.0) || !sum_check_loss.is_finite() {
        return Err(FqrError::validation(format!("check-loss sum must be finite and nonnegative, got {sum_check_loss}")));
    }
    let nf = n as f64;
    let dim = (m + 1) as f64;
    match kind {
        CriterionKind::Gacv => Ok(sum_check_loss / (nf - dim)),
        CriterionKind::Aic | CriterionKind::Bic => {
            if sum_check_loss == 0.0 {
                return Err(FqrError::validation("degenerate perfect fit: log of zero check loss"));
            }
            let penalty = if kind == CriterionKind::Aic { dim / nf } else { dim * nf.ln() / nf };
            Ok((sum_check_loss / nf).ln() + penalty)
        }
    }
}

/// Average of [`criterion_at`] over the level grid.
pub fn integrated_criterion(kind: CriterionKind, sum_losses: &[f64], n: usize, m: usize) -> Result<f64> {
    if sum_losses.is_empty() {
        return Err(FqrError::validation("integrated criterion needs at least one level"));
    }
    let total = sum_losses.iter().map(|&s| criterion_at(kind, s, n, m)).sum::<Result<f64>>()?;
    Ok(total / sum_losses.len() as f64)
}

/// `1..=min(20, n − 2, usable)`.
pub fn default_candidates(n: usize, usable: usize) -> Vec<usize> {
    (1..=DEFAULT_MAX_CANDIDATE.min(n.saturating_sub(2)).min(usable)).collect()
}

/// Minimized check-loss sums for one candidate cut-off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateFit {
    pub m: usize,
    /// `S(u)` per level, or why the candidate could not be fitted.
    pub sum_losses: std::result::Result<Vec<f64>, String>,
}

/// Fits at every candidate cut-off, sharing one eigendecomposition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffScan {
    pub n: usize,
    pub levels: QuantileIndexSet,
    pub candidates: Vec<CandidateFit>,
}

/// The chosen cut-off and the integrated criterion of every feasible candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub kind: CriterionKind,
    pub m: usize,
    pub scores: BTreeMap<usize, f64>,
}

impl CutoffScan {
    /// Candidates beyond the basis' retained components are recorded as infeasible.
    pub fn run(basis: &PcaBasis, responses: &[f64], levels: &QuantileIndexSet, candidates: &[usize]) -> Result<Self> {
        if candidates.is_empty() {
            return Err(FqrError::validation("no candidate cut-offs given"));
        }
        let n = basis.n();
        let candidates = candidates
            .iter()
            .map(|&m| {
                let sum_losses = if m == 0 || m + 2 > n || m > basis.max_m() {
                    Err(format!("m = {m} is infeasible (n = {n}, usable components = {})", basis.max_m()))
                } else {
                    basis
                        .fit(responses, levels, m)
                        .map(|model| model.fits().iter().map(|f| f.objective * n as f64).collect())
                        .map_err(|e| e.to_string())
                };
                CandidateFit { m, sum_losses }
            })
            .collect();
        Ok(Self { n, levels: levels.clone(), candidates })
    }

    /// Argmin of the integrated criterion; ties go to the smallest `m`.
    pub fn select(&self, kind: CriterionKind) -> Result<Selection> {
        let mut scores = BTreeMap::new();
        for c in &self.candidates {
            if let Ok(losses) = &c.sum_losses {
                if let Ok(v) = integrated_criterion(kind, losses, self.n, c.m) {
                    scores.insert(c.m, v);
                }
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for (&m, &v) in &scores {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((m, v));
            }
        }
        let (m, _) = best.ok_or_else(|| FqrError::validation("every candidate cut-off is infeasible"))?;
        Ok(Selection { kind, m, scores })
    }

    /// Long-format table: `m,level,criterion_value`, plus an `integrated` row per `m`.
    pub fn to_csv(&self, kind: CriterionKind) -> String {
        let mut out = String::from("m,level,criterion_value\n");
        for c in &self.candidates {
            let Ok(losses) = &c.sum_losses else { continue };
            let mut values = Vec::new();
            for (u, &s) in self.levels.levels().iter().zip(losses) {
                if let Ok(v) = criterion_at(kind, s, self.n, c.m) {
                    let _ = writeln!(out, "{},{},{:.16e}", c.m, u, v);
                    values.push(v);
                }
            }
            if values.len() == losses.len() && !values.is_empty() {
                let avg = values.iter().sum::<f64>() / values.len() as f64;
                let _ = writeln!(out, "{},integrated,{:.16e}", c.m, avg);
            }
        }
        out
    }
}

/// Fits every candidate and returns the cut-off minimizing the integrated criterion.
pub fn select_cutoff(
    kind: CriterionKind,
    curves: &[DiscreteCurve],
    responses: &[f64],
    levels: &QuantileIndexSet,
    candidates: &[usize],
    rule: InterpolationRule,
    grid_size: usize,
) -> Result<Selection> {
    let max_candidate = candidates.iter().copied().max().unwrap_or(0);
    if max_candidate == 0 {
        return Err(FqrError::validation("no positive candidate cut-offs given"));
    }
    let grid = curves.iter().map(|c| interpolate(c, rule, grid_size)).collect::<Result<Vec<_>>>()?;
    let basis = PcaBasis::from_grid_up_to(grid, rule, max_candidate)?;
    CutoffScan::run(&basis, responses, levels, candidates)?.select(kind)
}
