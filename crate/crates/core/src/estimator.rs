//! PCA-truncated functional quantile regression.
//!
//! [`PcaBasis`] holds everything that depends only on the covariates
//! (interpolated curves, their mean, the empirical eigensystem and the score
//! matrix). Fitting a cut-off `m` reuses the leading `m` score columns, so
//! models for several cut-offs share one eigendecomposition.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{compute_scores, eigendecompose, empirical_kernel, EigenSystem, ScoresMatrix};
use crate::curves::{curve_mean, interpolate, l2_inner, DiscreteCurve, GridFunction, InterpolationRule};
use crate::error::{FqrError, Result};
use crate::monotonize::QuantileCurve;
use crate::qr_solver::{solve_check_loss, QrSolution};

/// Quantile levels must stay inside `[LEVEL_MARGIN, 1 − LEVEL_MARGIN]`.
pub const LEVEL_MARGIN: f64 = 0.01;

/// Strictly increasing quantile levels bounded away from 0 and 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct QuantileIndexSet(Vec<f64>);

impl QuantileIndexSet {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(FqrError::validation("at least one quantile level is required"));
        }
        if let Some(u) = levels.iter().find(|&&u| !(LEVEL_MARGIN..=1.0 - LEVEL_MARGIN).contains(&u)) {
            return Err(FqrError::validation(format!(
                "quantile level {u} lies outside [{LEVEL_MARGIN}, {}]",
                1.0 - LEVEL_MARGIN
            )));
        }
        if levels.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(FqrError::validation("quantile levels must be strictly increasing (duplicates rejected)"));
        }
        Ok(Self(levels))
    }

    /// `{lo, lo + step, …, hi}`, rounded to 12 decimals to avoid drift.
    pub fn evenly_spaced(lo: f64, hi: f64, step: f64) -> Result<Self> {
        let k = ((hi - lo) / step).round() as usize;
        Self::new((0..=k).map(|i| ((lo + i as f64 * step) * 1e12).round() / 1e12).collect())
    }

    pub fn levels(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn position(&self, u: f64) -> Option<usize> {
        self.0.iter().position(|&v| v == u)
    }
}

impl TryFrom<Vec<f64>> for QuantileIndexSet {
    type Error = FqrError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<QuantileIndexSet> for Vec<f64> {
    fn from(s: QuantileIndexSet) -> Self {
        s.0
    }
}

/// Covariate-side quantities shared by fits at every cut-off.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    rule: InterpolationRule,
    curves: Vec<GridFunction>,
    mean: GridFunction,
    eig: EigenSystem,
    scores: ScoresMatrix,
}

impl PcaBasis {
    /// Interpolates the curves and keeps up to `max_m` principal components.
    pub fn from_curves(
        curves: &[DiscreteCurve],
        rule: InterpolationRule,
        grid_size: usize,
        max_m: usize,
    ) -> Result<Self> {
        let grid = curves.iter().map(|c| interpolate(c, rule, grid_size)).collect::<Result<Vec<_>>>()?;
        Self::from_grid(grid, rule, max_m)
    }

    /// Same as [`PcaBasis::from_curves`] for curves already on the grid.
    pub fn from_grid(curves: Vec<GridFunction>, rule: InterpolationRule, max_m: usize) -> Result<Self> {
        Self::build(curves, rule, max_m, true)
    }

    /// Keeps at most `max_m` components, fewer if the spectrum or `n` cannot
    /// support them. Fails only when not even one component is usable.
    pub fn from_grid_up_to(curves: Vec<GridFunction>, rule: InterpolationRule, max_m: usize) -> Result<Self> {
        let cap = max_m.min(curves.len().saturating_sub(2));
        Self::build(curves, rule, cap, false)
    }

    fn build(curves: Vec<GridFunction>, rule: InterpolationRule, max_m: usize, strict: bool) -> Result<Self> {
        let n = curves.len();
        if max_m == 0 {
            return Err(FqrError::validation("cut-off m must be at least 1"));
        }
        if n < max_m + 2 {
            return Err(FqrError::validation(format!("n = {n} observations cannot support cut-off m = {max_m}")));
        }
        let kernel = empirical_kernel(&curves)?;
        let eig = eigendecompose(&kernel, max_m.min(kernel.grid_size()))?;
        let usable = eig.usable_count();
        let max_m = if strict { max_m } else { usable.min(max_m).max(1) };
        let eig = eig.truncated(max_m);
        if usable < max_m {
            return Err(FqrError::validation(format!(
                "cut-off m = {max_m} exceeds the {usable} usable principal components"
            )));
        }
        let scores = compute_scores(&curves, &eig, max_m)?;
        let mean = curve_mean(&curves)?;
        Ok(Self { rule, curves, mean, eig, scores })
    }

    pub fn n(&self) -> usize {
        self.curves.len()
    }

    pub fn max_m(&self) -> usize {
        self.scores.m()
    }

    pub fn grid_size(&self) -> usize {
        self.mean.grid_size()
    }

    pub fn rule(&self) -> InterpolationRule {
        self.rule
    }

    pub fn mean_curve(&self) -> &GridFunction {
        &self.mean
    }

    pub fn eigensystem(&self) -> &EigenSystem {
        &self.eig
    }

    pub fn scores(&self) -> &ScoresMatrix {
        &self.scores
    }

    pub fn curves(&self) -> &[GridFunction] {
        &self.curves
    }

    /// Replaces the eigensystem (e.g. with flipped signs) and recomputes scores.
    pub fn with_eigensystem(&self, eig: EigenSystem) -> Result<Self> {
        let scores = compute_scores(&self.curves, &eig, self.max_m())?;
        Ok(Self { eig, scores, ..self.clone() })
    }

    /// Solves one check-loss problem per level on the first `m` scores.
    pub fn fit(&self, responses: &[f64], levels: &QuantileIndexSet, m: usize) -> Result<FqrModel> {
        if responses.len() != self.n() {
            return Err(FqrError::validation(format!(
                "{} responses for {} curves",
                responses.len(),
                self.n()
            )));
        }
        if m == 0 || m > self.max_m() {
            return Err(FqrError::validation(format!("cut-off m = {m} outside 1..={}", self.max_m())));
        }
        let scores = self.scores.prefix(m)?;
        let design = scores.design();
        let fits = levels
            .levels()
            .par_iter()
            .map(|&u| solve_check_loss(&design, responses, u))
            .collect::<Result<Vec<_>>>()?;
        Ok(FqrModel {
            grid_size: self.grid_size(),
            rule: self.rule,
            m,
            levels: levels.clone(),
            mean_curve: self.mean.clone(),
            eigensystem: self.eig.truncated(m),
            fits,
            training: Some(TrainingData { scores, responses: responses.to_vec() }),
        })
    }
}

/// Training scores and responses kept for in-sample diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingData {
    pub scores: ScoresMatrix,
    pub responses: Vec<f64>,
}

/// A fitted functional quantile regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FqrModel {
    grid_size: usize,
    rule: InterpolationRule,
    m: usize,
    levels: QuantileIndexSet,
    mean_curve: GridFunction,
    eigensystem: EigenSystem,
    fits: Vec<QrSolution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainingData>,
}

impl FqrModel {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn rule(&self) -> InterpolationRule {
        self.rule
    }

    pub fn levels(&self) -> &QuantileIndexSet {
        &self.levels
    }

    pub fn mean_curve(&self) -> &GridFunction {
        &self.mean_curve
    }

    pub fn eigensystem(&self) -> &EigenSystem {
        &self.eigensystem
    }

    pub fn fits(&self) -> &[QrSolution] {
        &self.fits
    }

    pub fn training(&self) -> Option<&TrainingData> {
        self.training.as_ref()
    }

    pub fn fit_at(&self, u: f64) -> Result<&QrSolution> {
        self.levels
            .position(u)
            .map(|k| &self.fits[k])
            .ok_or_else(|| FqrError::validation(format!("quantile level {u} was not fitted")))
    }

    /// `â(u)`.
    pub fn intercept(&self, u: f64) -> Result<f64> {
        Ok(self.fit_at(u)?.coefficients[0])
    }

    /// `b̂(·, u) = Σⱼ b̂ⱼ(u) φ̂ⱼ`.
    pub fn slope(&self, u: f64) -> Result<GridFunction> {
        let fit = self.fit_at(u)?;
        let mut acc = GridFunction::constant(self.grid_size, 0.0)?;
        for (j, phi) in self.eigensystem.eigenfunctions().iter().enumerate() {
            acc = acc.axpy(fit.coefficients[j + 1], phi)?;
        }
        Ok(acc)
    }

    /// Serializes to JSON; floats round-trip exactly.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: FqrModel = serde_json::from_str(s)?;
        if model.fits.len() != model.levels.len() || model.eigensystem.count() != model.m {
            return Err(FqrError::validation("model document is internally inconsistent"));
        }
        Ok(model)
    }
}

/// Interpolates, eigendecomposes, scores and fits at every level.
pub fn fit_fqr(
    curves: &[DiscreteCurve],
    responses: &[f64],
    levels: &QuantileIndexSet,
    m: usize,
    rule: InterpolationRule,
    grid_size: usize,
) -> Result<FqrModel> {
    if responses.len() != curves.len() {
        return Err(FqrError::validation(format!("{} responses for {} curves", responses.len(), curves.len())));
    }
    if responses.len() < m + 2 {
        return Err(FqrError::validation(format!("n = {} must be at least m + 2 = {}", responses.len(), m + 2)));
    }
    PcaBasis::from_curves(curves, rule, grid_size, m)?.fit(responses, levels, m)
}

/// The estimated slope surface on the evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeSurface {
    pub levels: QuantileIndexSet,
    /// One slope function per level.
    pub slopes: Vec<GridFunction>,
}

impl SlopeSurface {
    pub fn grid_size(&self) -> usize {
        self.slopes.first().map(GridFunction::grid_size).unwrap_or(0)
    }
}

pub fn slope_surface(model: &FqrModel) -> SlopeSurface {
    let slopes = model.levels.levels().iter().map(|&u| model.slope(u).expect("fitted level")).collect();
    SlopeSurface { levels: model.levels.clone(), slopes }
}

/// `Q̂(u | x) = â(u) + ∫ b̂(t, u) (x(t) − X̄(t)) dt`.
pub fn predict_quantile(model: &FqrModel, x: &GridFunction, u: f64) -> Result<f64> {
    let centered = x.sub(&model.mean_curve)?;
    Ok(model.intercept(u)? + l2_inner(&model.slope(u)?, &centered)?)
}

/// Interpolates a raw curve with the model's rule before predicting.
pub fn predict_quantile_curve(model: &FqrModel, x: &DiscreteCurve, u: f64) -> Result<f64> {
    predict_quantile(model, &interpolate(x, model.rule, model.grid_size)?, u)
}

/// `u ↦ Q̂(u | x)` over all fitted levels.
pub fn predict_all_levels(model: &FqrModel, x: &GridFunction) -> Result<QuantileCurve> {
    let centered = x.sub(&model.mean_curve)?;
    let values = model
        .levels
        .levels()
        .iter()
        .map(|&u| Ok(model.intercept(u)? + l2_inner(&model.slope(u)?, &centered)?))
        .collect::<Result<Vec<_>>>()?;
    QuantileCurve::new(model.levels.clone(), values)
}

/// Norm of `n⁻¹ Σᵢ {u − 1(Yᵢ ≤ fittedᵢ)} ξ̂ᵢⱼ` over `j = 1..=m`.
pub fn normal_equation_residual(model: &FqrModel, u: f64) -> Result<f64> {
    let fit = model.fit_at(u)?;
    let training = model
        .training
        .as_ref()
        .ok_or_else(|| FqrError::validation("model carries no training data for diagnostics"))?;
    let n = training.scores.n();
    let mut acc = vec![0.0; model.m];
    for (i, &y) in training.responses.iter().enumerate() {
        let row = training.scores.row(i);
        let fitted: f64 = row.iter().zip(&fit.coefficients).map(|(z, b)| z * b).sum();
        let psi = if y <= fitted { u - 1.0 } else { u };
        for (a, z) in acc.iter_mut().zip(&row[1..]) {
            *a += psi * z;
        }
    }
    Ok(acc.iter().map(|a| (a / n as f64).powi(2)).sum::<f64>().sqrt())
}

/// Share of training responses at or below their fitted `u`-quantile.
pub fn fitted_coverage(model: &FqrModel, u: f64) -> Result<f64> {
    let fit = model.fit_at(u)?;
    let training = model
        .training
        .as_ref()
        .ok_or_else(|| FqrError::validation("model carries no training data for diagnostics"))?;
    let below = training
        .responses
        .iter()
        .enumerate()
        .filter(|(i, &y)| {
            let fitted: f64 = training.scores.row(*i).iter().zip(&fit.coefficients).map(|(z, b)| z * b).sum();
            y <= fitted
        })
        .count();
    Ok(below as f64 / training.responses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::grid_points;

    fn toy_curves(n: usize, g: usize) -> Vec<DiscreteCurve> {
        (0..n)
            .map(|i| {
                let a = ((i * 7 % 13) as f64 - 6.0) / 3.0;
                let b = ((i * 5 % 11) as f64 - 5.0) / 4.0;
                let times: Vec<f64> = grid_points(g).collect();
                let values = times.iter().map(|t| a * t + b * (std::f64::consts::PI * t).cos()).collect();
                DiscreteCurve::new(format!("s{i}"), times, values).unwrap()
            })
            .collect()
    }

    #[test]
    fn index_set_validation() {
        assert!(QuantileIndexSet::new(vec![]).is_err());
        assert!(QuantileIndexSet::new(vec![0.5, 0.5]).is_err());
        assert!(QuantileIndexSet::new(vec![0.6, 0.5]).is_err());
        assert!(QuantileIndexSet::new(vec![0.005]).is_err());
        let s = QuantileIndexSet::evenly_spaced(0.15, 0.85, 0.05).unwrap();
        assert_eq!(s.len(), 15);
        assert_eq!(s.levels()[14], 0.85);
    }

    #[test]
    fn constant_response_gives_flat_prediction() {
        let curves = toy_curves(20, 21);
        let y = vec![4.2; 20];
        let levels = QuantileIndexSet::new(vec![0.25, 0.5, 0.75]).unwrap();
        let model = fit_fqr(&curves, &y, &levels, 2, InterpolationRule::LeftStep, 21).unwrap();
        for &u in levels.levels() {
            assert!(model.fit_at(u).unwrap().objective < 1e-12);
            for c in &curves {
                assert!((predict_quantile_curve(&model, c, u).unwrap() - 4.2).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn slope_reconstruction_and_prediction_identities() {
        let curves = toy_curves(30, 41);
        let y: Vec<f64> = curves.iter().enumerate().map(|(i, c)| c.values()[10] + ((i * 3 % 7) as f64) / 7.0).collect();
        let levels = QuantileIndexSet::new(vec![0.3, 0.5]).unwrap();
        let model = fit_fqr(&curves, &y, &levels, 2, InterpolationRule::MidpointStep, 41).unwrap();
        for &u in levels.levels() {
            let b = model.slope(u).unwrap();
            let coefs = &model.fit_at(u).unwrap().coefficients;
            for j in 1..=2 {
                let ip = l2_inner(&b, model.eigensystem().eigenfunction(j)).unwrap();
                assert!((ip - coefs[j]).abs() < 1e-6);
            }
            let a = model.intercept(u).unwrap();
            assert!((predict_quantile(&model, model.mean_curve(), u).unwrap() - a).abs() < 1e-12);
            let shifted = model.mean_curve().add(model.eigensystem().eigenfunction(1)).unwrap();
            assert!((predict_quantile(&model, &shifted, u).unwrap() - (a + coefs[1])).abs() < 1e-6);
        }
        assert!(model.fit_at(0.9).is_err());
        assert!(predict_quantile(&model, model.mean_curve(), 0.9).is_err());
    }

    #[test]
    fn insufficient_components_rejected() {
        // every curve is a multiple of the same shape: one usable component
        let g = 11;
        let curves: Vec<_> = (0..8)
            .map(|i| {
                let times: Vec<f64> = grid_points(g).collect();
                let values = times.iter().map(|t| i as f64 * t).collect();
                DiscreteCurve::new(format!("{i}"), times, values).unwrap()
            })
            .collect();
        let y: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let levels = QuantileIndexSet::new(vec![0.5]).unwrap();
        assert!(fit_fqr(&curves, &y, &levels, 1, InterpolationRule::LeftStep, g).is_ok());
        assert!(matches!(fit_fqr(&curves, &y, &levels, 2, InterpolationRule::LeftStep, g), Err(FqrError::Validation(_))));
        assert!(fit_fqr(&curves[..3], &y[..3], &levels, 2, InterpolationRule::LeftStep, g).is_err());
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let curves = toy_curves(15, 21);
        let y: Vec<f64> = (0..15).map(|i| (i as f64).sin()).collect();
        let levels = QuantileIndexSet::new(vec![0.2, 0.8]).unwrap();
        let model = fit_fqr(&curves, &y, &levels, 2, InterpolationRule::LeftStep, 21).unwrap();
        let back = FqrModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
    }
}
