//! Cosine-basis simulation design and the Monte Carlo study harness.
//!
//! ```text
//! X(t) = Σⱼ γⱼ Zⱼ φⱼ(t),   φⱼ(t) = √2 cos(jπt),   γⱼ = (−1)^{j+1} j^{−α/2}
//! Y    = ∫ ϱ(t) X(t) dt + ε = Σⱼ ϱⱼ γⱼ Zⱼ + ε
//! ϱ₁ = 0.3,   ϱⱼ = 4 (−1)^{j+1} j^{−2}  (j ≥ 2)
//! ```
//!
//! with `Zⱼ ~ U[−√3, √3]`, `j = 1..=50`, and `ε` standard normal or standard
//! Cauchy. The conditional quantile is `F_ε⁻¹(u) + Σⱼ ϱⱼ γⱼ Zⱼ` and the slope
//! surface is `ϱ(t)` at every level. Each curve is observed on 201 equally
//! spaced points.
//!
//! All randomness flows from a 64-bit seed: replication `r` of a design gets
//! `derive_seed(seed, r)`, and within a replication the training sample and
//! the fresh evaluation draws use separate ChaCha streams.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::curves::{grid_points, l2_inner, DiscreteCurve, GridFunction, InterpolationRule, DEFAULT_GRID_SIZE};
use crate::error::{FqrError, Result};
use crate::estimator::{predict_all_levels, slope_surface, FqrModel, PcaBasis, QuantileIndexSet, SlopeSurface};
use crate::model_select::{default_candidates, CriterionKind, CutoffScan};

/// Number of cosine terms in the generator.
pub const BASIS_TERMS: usize = 50;
/// Decay exponent of the slope coefficients, `ϱⱼ ≍ j^{−β}`.
pub const SLOPE_DECAY: f64 = 2.0;
/// Default number of fresh covariate draws for the `dP_X` integral.
pub const DEFAULT_N_FRESH: usize = 1000;
/// Default Monte Carlo repetitions.
pub const DEFAULT_REPETITIONS: usize = 100;

const STREAM_TRAIN: u64 = 1;
const STREAM_FRESH: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorLaw {
    Normal,
    Cauchy,
}

impl ErrorLaw {
    pub fn as_str(&self) -> &'static str {
        match self {
            ErrorLaw::Normal => "normal",
            ErrorLaw::Cauchy => "cauchy",
        }
    }

    /// `F_ε⁻¹(u)`.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(FqrError::validation(format!("quantile level {u} must lie strictly inside (0, 1)")));
        }
        Ok(match self {
            ErrorLaw::Normal => normal_quantile(u),
            ErrorLaw::Cauchy => (PI * (u - 0.5)).tan(),
        })
    }

    fn sample(&self, rng: &mut impl RngCore) -> f64 {
        let u = open_unit(rng);
        match self {
            ErrorLaw::Normal => normal_quantile(u),
            ErrorLaw::Cauchy => (PI * (u - 0.5)).tan(),
        }
    }
}

impl std::str::FromStr for ErrorLaw {
    type Err = FqrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(ErrorLaw::Normal),
            "cauchy" => Ok(ErrorLaw::Cauchy),
            other => Err(FqrError::validation(format!("unknown error law {other:?}"))),
        }
    }
}

/// Standard normal quantile.
pub fn normal_quantile(u: f64) -> f64 {
    Normal::standard().inverse_cdf(u)
}

/// Uniform draw on the open interval (0, 1) with 53 random bits.
fn open_unit(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

/// SplitMix64 finalizer applied to `seed` and `index`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One cell of the simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub alpha: f64,
    pub error_law: ErrorLaw,
    pub n: usize,
    pub grid_size: usize,
    pub basis_terms: usize,
    pub seed: u64,
    pub levels: QuantileIndexSet,
}

impl DesignSpec {
    pub fn new(alpha: f64, error_law: ErrorLaw, n: usize, seed: u64, levels: QuantileIndexSet) -> Result<Self> {
        let spec = Self { alpha, error_law, n, grid_size: DEFAULT_GRID_SIZE, basis_terms: BASIS_TERMS, seed, levels };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0) {
            return Err(FqrError::validation(format!("alpha must exceed 1, got {}", self.alpha)));
        }
        if self.n < 10 {
            return Err(FqrError::validation(format!("sample size must be at least 10, got {}", self.n)));
        }
        if self.basis_terms == 0 {
            return Err(FqrError::validation("basis_terms must be at least 1"));
        }
        if self.grid_size < 2 {
            return Err(FqrError::validation("grid_size must be at least 2"));
        }
        Ok(())
    }

    /// The design for replication `r`, with its own derived seed.
    pub fn replication(&self, r: usize) -> DesignSpec {
        DesignSpec { seed: derive_seed(self.seed, r as u64), ..self.clone() }
    }

    /// `round(n^{1/(α + 2β)})`, at least 1.
    pub fn oracle_m(&self) -> usize {
        ((self.n as f64).powf(1.0 / (self.alpha + 2.0 * SLOPE_DECAY)).round() as usize).max(1)
    }

    pub fn truth(&self) -> TruthHandle {
        TruthHandle::new(self.alpha, self.basis_terms, self.error_law)
    }
}

/// `√2 cos(jπt)`.
pub fn design_basis(j: usize, t: f64) -> f64 {
    2f64.sqrt() * (j as f64 * PI * t).cos()
}

/// Population quantities of the design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthHandle {
    /// `ϱ₁ … ϱ_J`.
    pub slope_coefs: Vec<f64>,
    /// `γ₁ … γ_J`; the population eigenvalues are `γⱼ²`.
    pub gammas: Vec<f64>,
    pub error_law: ErrorLaw,
}

impl TruthHandle {
    pub fn new(alpha: f64, basis_terms: usize, error_law: ErrorLaw) -> Self {
        let sign = |j: usize| if j % 2 == 1 { 1.0 } else { -1.0 };
        let slope_coefs = (1..=basis_terms)
            .map(|j| if j == 1 { 0.3 } else { 4.0 * sign(j) * (j as f64).powi(-2) })
            .collect();
        let gammas = (1..=basis_terms).map(|j| sign(j) * (j as f64).powf(-alpha / 2.0)).collect();
        Self { slope_coefs, gammas, error_law }
    }

    /// `ϱ(t)` on the grid.
    pub fn slope_function(&self, grid_size: usize) -> Result<GridFunction> {
        GridFunction::from_fn(grid_size, |t| {
            self.slope_coefs.iter().enumerate().map(|(k, r)| r * design_basis(k + 1, t)).sum()
        })
    }

    /// `∫ ϱ X = Σⱼ ϱⱼ γⱼ Zⱼ`.
    pub fn signal(&self, z: &[f64]) -> f64 {
        self.slope_coefs.iter().zip(&self.gammas).zip(z).map(|((r, g), z)| r * g * z).sum()
    }

    /// `Var(Σⱼ ϱⱼ γⱼ Zⱼ) = Σⱼ (ϱⱼ γⱼ)²`.
    pub fn signal_variance(&self) -> f64 {
        self.slope_coefs.iter().zip(&self.gammas).map(|(r, g)| (r * g).powi(2)).sum()
    }
}

/// `F_ε⁻¹(u) + Σⱼ ϱⱼ γⱼ Zⱼ`.
pub fn true_quantile(truth: &TruthHandle, z: &[f64], u: f64) -> Result<f64> {
    Ok(truth.error_law.quantile(u)? + truth.signal(z))
}

/// Covariate draws: latent scores and the sampled curves.
#[derive(Debug, Clone)]
pub struct CovariateSample {
    /// `Zᵢⱼ`, one row per subject.
    pub z: Vec<Vec<f64>>,
    /// `Xᵢ` at the grid points.
    pub curves: Vec<GridFunction>,
}

/// Draws `n` covariate curves from the design.
pub fn draw_covariates(truth: &TruthHandle, n: usize, grid_size: usize, rng: &mut impl RngCore) -> Result<CovariateSample> {
    let terms = truth.gammas.len();
    let t: Vec<f64> = grid_points(grid_size).collect();
    // γⱼ φⱼ(t_g), row j
    let table: Vec<Vec<f64>> =
        (0..terms).map(|k| t.iter().map(|&tg| truth.gammas[k] * design_basis(k + 1, tg)).collect()).collect();
    let root3 = 3f64.sqrt();
    let mut z_all = Vec::with_capacity(n);
    let mut curves = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..terms).map(|_| root3 * (2.0 * open_unit(rng) - 1.0)).collect();
        let mut x = vec![0.0; grid_size];
        for (zj, row) in z.iter().zip(&table) {
            for (xg, b) in x.iter_mut().zip(row) {
                *xg += zj * b;
            }
        }
        curves.push(GridFunction::new(x)?);
        z_all.push(z);
    }
    Ok(CovariateSample { z: z_all, curves })
}

/// A simulated training sample.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub curves: Vec<DiscreteCurve>,
    pub responses: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    pub truth: TruthHandle,
}

/// Draws the training sample of `spec`; deterministic in `spec.seed`.
pub fn gen_dataset(spec: &DesignSpec) -> Result<Dataset> {
    spec.validate()?;
    let truth = spec.truth();
    let mut rng = stream_rng(spec.seed, STREAM_TRAIN);
    let sample = draw_covariates(&truth, spec.n, spec.grid_size, &mut rng)?;
    let responses = sample.z.iter().map(|z| truth.signal(z) + truth.error_law.sample(&mut rng)).collect();
    let times: Vec<f64> = grid_points(spec.grid_size).collect();
    let curves = sample
        .curves
        .into_iter()
        .enumerate()
        .map(|(i, x)| DiscreteCurve::new(format!("{i}"), times.clone(), x.values().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { curves, responses, z: sample.z, truth })
}

/// Level-averaged `∫ (b̂(t, u) − ϱ(t))² dt`.
pub fn qamise_slope(estimate: &SlopeSurface, truth: &TruthHandle) -> Result<f64> {
    let rho = truth.slope_function(estimate.grid_size())?;
    let mut total = 0.0;
    for b in &estimate.slopes {
        let d = b.sub(&rho)?;
        total += l2_inner(&d, &d)?;
    }
    Ok(total / estimate.slopes.len() as f64)
}

/// Level-averaged `∫ (Q̂(u | x) − Q(u | x))² dP_X(x)`, with `P_X` replaced by
/// `n_fresh` independent draws from the design (a stream separate from training).
pub fn qamise_quantile(model: &FqrModel, truth: &TruthHandle, spec: &DesignSpec, n_fresh: usize) -> Result<f64> {
    let mut rng = stream_rng(spec.seed, STREAM_FRESH);
    qamise_quantile_with(model, truth, n_fresh, &mut rng)
}

pub fn qamise_quantile_with(model: &FqrModel, truth: &TruthHandle, n_fresh: usize, rng: &mut impl RngCore) -> Result<f64> {
    if n_fresh == 0 {
        return Err(FqrError::validation("n_fresh must be at least 1"));
    }
    let fresh = draw_covariates(truth, n_fresh, model.grid_size(), rng)?;
    let levels = model.levels().levels();
    let offsets = levels.iter().map(|&u| truth.error_law.quantile(u)).collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for (z, x) in fresh.z.iter().zip(&fresh.curves) {
        let predicted = predict_all_levels(model, x)?;
        let signal = truth.signal(z);
        for (q, a) in predicted.values().iter().zip(&offsets) {
            total += (q - (a + signal)).powi(2);
        }
    }
    Ok(total / (n_fresh * levels.len()) as f64)
}

/// How the cut-off is chosen in a study cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MPolicy {
    Fixed(usize),
    /// `round(n^{1/(α + 2β)})`.
    Oracle,
    Criterion(CriterionKind),
}

impl MPolicy {
    pub fn label(&self) -> String {
        match self {
            MPolicy::Fixed(m) => format!("fixed:{m}"),
            MPolicy::Oracle => "oracle".into(),
            MPolicy::Criterion(k) => k.as_str().into(),
        }
    }
}

impl std::str::FromStr for MPolicy {
    type Err = FqrError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "oracle" {
            return Ok(MPolicy::Oracle);
        }
        if let Some(m) = s.strip_prefix("fixed:") {
            let m: usize = m.parse().map_err(|_| FqrError::validation(format!("bad fixed cut-off in {s:?}")))?;
            if m == 0 {
                return Err(FqrError::validation("fixed cut-off must be at least 1"));
            }
            return Ok(MPolicy::Fixed(m));
        }
        s.parse::<CriterionKind>()
            .map(MPolicy::Criterion)
            .map_err(|_| FqrError::validation(format!("unknown cut-off policy {s:?}")))
    }
}

/// Results of one replication under one policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub m: usize,
    pub slope_qamise: f64,
    pub quantile_qamise: f64,
}

/// Runs one replication of `spec` (already carrying its replication seed)
/// under every policy, sharing the dataset and the eigendecomposition.
pub fn run_replication(
    spec: &DesignSpec,
    policies: &[MPolicy],
    n_fresh: usize,
) -> Result<Vec<Result<ReplicationOutcome>>> {
    let data = gen_dataset(spec)?;
    let fixed_max = policies
        .iter()
        .map(|p| match p {
            MPolicy::Fixed(m) => *m,
            MPolicy::Oracle => spec.oracle_m(),
            MPolicy::Criterion(_) => default_candidates(spec.n, usize::MAX).len(),
        })
        .max()
        .unwrap_or(1);
    let grid = data
        .curves
        .iter()
        .map(|c| crate::curves::interpolate(c, InterpolationRule::LeftStep, spec.grid_size))
        .collect::<Result<Vec<_>>>()?;
    let basis = PcaBasis::from_grid_up_to(grid, InterpolationRule::LeftStep, fixed_max)?;

    let mut scan: Option<CutoffScan> = None;
    let outcomes = policies
        .iter()
        .map(|policy| {
            let m = match policy {
                MPolicy::Fixed(m) => *m,
                MPolicy::Oracle => spec.oracle_m(),
                MPolicy::Criterion(kind) => {
                    if scan.is_none() {
                        let candidates = default_candidates(spec.n, basis.max_m());
                        scan = Some(CutoffScan::run(&basis, &data.responses, &spec.levels, &candidates)?);
                    }
                    scan.as_ref().expect("scan computed").select(*kind)?.m
                }
            };
            let model = basis.fit(&data.responses, &spec.levels, m)?;
            Ok(ReplicationOutcome {
                m,
                slope_qamise: qamise_slope(&slope_surface(&model), &data.truth)?,
                quantile_qamise: qamise_quantile(&model, &data.truth, spec, n_fresh)?,
            })
        })
        .collect();
    Ok(outcomes)
}

/// Aggregated Monte Carlo results for one design cell and policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCell {
    pub alpha: f64,
    pub error_law: ErrorLaw,
    pub n: usize,
    pub policy: MPolicy,
    pub levels: Vec<f64>,
    /// Successful replications entering the averages.
    pub replications: usize,
    pub failures: usize,
    pub slope_qamise: f64,
    pub slope_se: f64,
    pub quantile_qamise: f64,
    pub quantile_se: f64,
    /// Histogram of the cut-off used.
    pub selected_m: BTreeMap<usize, usize>,
    /// Per-replication values in replication order.
    pub outcomes: Vec<ReplicationOutcome>,
}

/// Monte Carlo study results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub repetitions: usize,
    pub n_fresh: usize,
    pub cells: Vec<StudyCell>,
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let k = values.len();
    if k == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    if k == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    (mean, (var / k as f64).sqrt())
}

/// Runs `repetitions` replications of every design under every policy.
///
/// Replications run in parallel; results are reduced in replication order so
/// the report is bit-identical for identical inputs.
pub fn run_study(specs: &[DesignSpec], policies: &[MPolicy], repetitions: usize, n_fresh: usize) -> Result<StudyReport> {
    if repetitions == 0 {
        return Err(FqrError::validation("at least one repetition is required"));
    }
    if policies.is_empty() {
        return Err(FqrError::validation("at least one cut-off policy is required"));
    }
    if n_fresh == 0 {
        return Err(FqrError::validation("n_fresh must be at least 1"));
    }
    let mut cells = Vec::new();
    for spec in specs {
        spec.validate()?;
        let per_rep: Vec<Vec<Option<ReplicationOutcome>>> = (0..repetitions)
            .into_par_iter()
            .map(|r| match run_replication(&spec.replication(r), policies, n_fresh) {
                Ok(outs) => outs.into_iter().map(|o| o.ok()).collect(),
                Err(_) => vec![None; policies.len()],
            })
            .collect();
        for (k, policy) in policies.iter().enumerate() {
            let outcomes: Vec<ReplicationOutcome> = per_rep.iter().filter_map(|row| row[k]).collect();
            let slopes: Vec<f64> = outcomes.iter().map(|o| o.slope_qamise).collect();
            let quants: Vec<f64> = outcomes.iter().map(|o| o.quantile_qamise).collect();
            let (slope_qamise, slope_se) = mean_and_se(&slopes);
            let (quantile_qamise, quantile_se) = mean_and_se(&quants);
            let mut selected_m = BTreeMap::new();
            for o in &outcomes {
                *selected_m.entry(o.m).or_insert(0) += 1;
            }
            cells.push(StudyCell {
                alpha: spec.alpha,
                error_law: spec.error_law,
                n: spec.n,
                policy: *policy,
                levels: spec.levels.levels().to_vec(),
                replications: outcomes.len(),
                failures: repetitions - outcomes.len(),
                slope_qamise,
                slope_se,
                quantile_qamise,
                quantile_se,
                selected_m,
                outcomes,
            });
        }
    }
    Ok(StudyReport { repetitions, n_fresh, cells })
}

impl StudyReport {
    /// One row per cell; floats with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "alpha,error_law,n,policy,replications,failures,slope_qamise,slope_se,quantile_qamise,quantile_se,selected_m\n",
        );
        for c in &self.cells {
            let hist: Vec<String> = c.selected_m.iter().map(|(m, k)| format!("{m}:{k}")).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                c.alpha,
                c.error_law.as_str(),
                c.n,
                c.policy.label(),
                c.replications,
                c.failures,
                c.slope_qamise,
                c.slope_se,
                c.quantile_qamise,
                c.quantile_se,
                hist.join(";")
            );
        }
        out
    }

    pub fn cell(&self, alpha: f64, law: ErrorLaw, n: usize, policy: MPolicy) -> Option<&StudyCell> {
        self.cells.iter().find(|c| c.alpha == alpha && c.error_law == law && c.n == n && c.policy == policy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateTarget {
    Slope,
    Quantile,
}

impl RateTarget {
    /// Exponent of `n` in the convergence rate for smoothness `(α, β)`.
    pub fn reference_slope(&self, alpha: f64, beta: f64) -> f64 {
        let denom = alpha + 2.0 * beta;
        match self {
            RateTarget::Slope => -(2.0 * beta - 1.0) / denom,
            RateTarget::Quantile => -(alpha + 2.0 * beta - 1.0) / denom,
        }
    }
}

/// Least-squares fit of `log QAMISE` against `log n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub target: RateTarget,
    pub alpha: f64,
    pub error_law: ErrorLaw,
    pub ns: Vec<usize>,
    pub qamise: Vec<f64>,
    pub slope: f64,
    pub reference_slope: f64,
}

/// Empirical log-log slope over the oracle-policy cells of one design.
pub fn rate_check(report: &StudyReport, alpha: f64, error_law: ErrorLaw, target: RateTarget) -> Result<RateFit> {
    let mut points: Vec<(usize, f64)> = report
        .cells
        .iter()
        .filter(|c| c.policy == MPolicy::Oracle && c.alpha == alpha && c.error_law == error_law && c.replications > 0)
        .map(|c| (c.n, if target == RateTarget::Slope { c.slope_qamise } else { c.quantile_qamise }))
        .collect();
    points.sort_by_key(|p| p.0);
    points.dedup_by_key(|p| p.0);
    if points.len() < 2 {
        return Err(FqrError::validation("rate check needs oracle-policy results at two or more sample sizes"));
    }
    if points.iter().any(|p| !(p.1 > 0.0)) {
        return Err(FqrError::validation("rate check needs positive QAMISE values"));
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(RateFit {
        target,
        alpha,
        error_law,
        ns: points.iter().map(|p| p.0).collect(),
        qamise: points.iter().map(|p| p.1).collect(),
        slope: sxy / sxx,
        reference_slope: target.reference_slope(alpha, SLOPE_DECAY),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

/// Study configuration, read from TOML.
///
/// ```toml
/// alpha = [1.1, 2.0]
/// error_law = "normal"
/// n_list = [100, 200, 500]
/// levels = [0.5]
/// policy = ["oracle", "bic", "fixed:3"]
/// R = 100
/// seed = 7
/// n_fresh = 1000
/// rate_check = true
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub alpha: OneOrMany<f64>,
    pub error_law: OneOrMany<ErrorLaw>,
    pub n_list: Vec<usize>,
    pub levels: Vec<f64>,
    pub policy: OneOrMany<String>,
    #[serde(rename = "R", default = "default_reps")]
    pub repetitions: usize,
    pub seed: u64,
    #[serde(default = "default_n_fresh")]
    pub n_fresh: usize,
    #[serde(default = "default_grid")]
    pub grid_size: usize,
    #[serde(default = "default_terms")]
    pub basis_terms: usize,
    #[serde(default)]
    pub rate_check: bool,
}

fn default_reps() -> usize {
    DEFAULT_REPETITIONS
}
fn default_n_fresh() -> usize {
    DEFAULT_N_FRESH
}
fn default_grid() -> usize {
    DEFAULT_GRID_SIZE
}
fn default_terms() -> usize {
    BASIS_TERMS
}

impl StudyConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: StudyConfig = toml::from_str(text).map_err(|e| FqrError::Config(e.to_string()))?;
        cfg.specs()?;
        cfg.policies()?;
        if cfg.rate_check {
            let mut ns = cfg.n_list.clone();
            ns.sort_unstable();
            ns.dedup();
            if ns.len() < 2 {
                return Err(FqrError::validation("rate_check requires at least two distinct sample sizes"));
            }
            if !cfg.policies()?.contains(&MPolicy::Oracle) {
                return Err(FqrError::validation("rate_check requires the oracle policy"));
            }
        }
        Ok(cfg)
    }

    /// Every `(alpha, error_law, n)` combination; each cell gets its own seed.
    pub fn specs(&self) -> Result<Vec<DesignSpec>> {
        let levels = QuantileIndexSet::new(self.levels.clone())?;
        let mut specs = Vec::new();
        let mut cell = 0u64;
        for alpha in self.alpha.to_vec() {
            for law in self.error_law.to_vec() {
                for &n in &self.n_list {
                    let spec = DesignSpec {
                        alpha,
                        error_law: law,
                        n,
                        grid_size: self.grid_size,
                        basis_terms: self.basis_terms,
                        seed: derive_seed(self.seed, 1_000_000 + cell),
                        levels: levels.clone(),
                    };
                    spec.validate()?;
                    specs.push(spec);
                    cell += 1;
                }
            }
        }
        if specs.is_empty() {
            return Err(FqrError::validation("study configuration produces no design cells"));
        }
        Ok(specs)
    }

    pub fn policies(&self) -> Result<Vec<MPolicy>> {
        self.policy.to_vec().iter().map(|s| s.parse()).collect()
    }

    pub fn run(&self) -> Result<StudyReport> {
        run_study(&self.specs()?, &self.policies()?, self.repetitions, self.n_fresh)
    }

    /// Slope and quantile rate fits for every `(alpha, error_law)` pair.
    pub fn rate_fits(&self, report: &StudyReport) -> Result<Vec<RateFit>> {
        let mut fits = Vec::new();
        for alpha in self.alpha.to_vec() {
            for law in self.error_law.to_vec() {
                for target in [RateTarget::Slope, RateTarget::Quantile] {
                    fits.push(rate_check(report, alpha, law, target)?);
                }
            }
        }
        Ok(fits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn median() -> QuantileIndexSet {
        QuantileIndexSet::new(vec![0.5]).unwrap()
    }

    #[test]
    fn coefficient_values() {
        let truth = TruthHandle::new(2.0, 50, ErrorLaw::Normal);
        assert_eq!(truth.slope_coefs[0], 0.3);
        assert_eq!(truth.slope_coefs[1], -1.0);
        assert!((truth.slope_coefs[2] - 4.0 / 9.0).abs() < 1e-15);
        assert!((truth.gammas[1] + 0.5).abs() < 1e-15);
        assert_eq!(truth.gammas[0], 1.0);
    }

    #[test]
    fn quantile_examples() {
        let normal = TruthHandle::new(2.0, 50, ErrorLaw::Normal);
        let cauchy = TruthHandle::new(2.0, 50, ErrorLaw::Cauchy);
        let zero = vec![0.0; 50];
        assert!(true_quantile(&normal, &zero, 0.5).unwrap().abs() < 1e-12);
        assert!((true_quantile(&cauchy, &zero, 0.75).unwrap() - 1.0).abs() < 1e-12);
        // reference value of Φ⁻¹(0.975)
        assert!((true_quantile(&normal, &zero, 0.975).unwrap() - 1.959963984540054).abs() < 1e-9);
        let z: Vec<f64> = (0..50).map(|j| (j as f64 * 0.37).sin()).collect();
        let q = true_quantile(&normal, &z, 0.975).unwrap();
        assert!((q - 1.959963984540054 - normal.signal(&z)).abs() < 1e-9);
        assert!(true_quantile(&normal, &zero, 1.0).is_err());
        assert!(true_quantile(&normal, &zero, 0.0).is_err());
    }

    #[test]
    fn normal_quantile_table() {
        for (u, q) in [(0.841344746068543, 1.0), (0.05, -1.6448536269514722), (0.999, 3.090232306167813)] {
            assert!((normal_quantile(u) - q).abs() < 1e-9, "{u}");
        }
    }

    #[test]
    fn oracle_cutoffs() {
        let s = |alpha, n| DesignSpec::new(alpha, ErrorLaw::Normal, n, 1, median()).unwrap().oracle_m();
        assert_eq!(s(2.0, 100), 2);
        assert_eq!(s(2.0, 200), 2);
        assert_eq!(s(2.0, 500), 3);
        assert_eq!(s(1.1, 500), 3);
    }

    #[test]
    fn reference_rates() {
        assert!((RateTarget::Slope.reference_slope(2.0, 2.0) + 0.5).abs() < 1e-15);
        assert!((RateTarget::Quantile.reference_slope(2.0, 2.0) + 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn spec_validation() {
        assert!(DesignSpec::new(1.0, ErrorLaw::Normal, 100, 0, median()).is_err());
        assert!(DesignSpec::new(2.0, ErrorLaw::Normal, 9, 0, median()).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DesignSpec::new(2.0, ErrorLaw::Cauchy, 12, 99, median()).unwrap();
        let a = gen_dataset(&spec).unwrap();
        let b = gen_dataset(&spec).unwrap();
        assert_eq!(a.responses, b.responses);
        assert_eq!(a.curves, b.curves);
        let c = gen_dataset(&spec.replication(1)).unwrap();
        assert_ne!(a.responses, c.responses);
        assert_eq!(a.curves[0].times().len(), 201);
    }

    #[test]
    fn design_basis_is_orthonormal_on_grid() {
        for j in 1..=10 {
            for k in 1..=10 {
                let f = GridFunction::from_fn(201, |t| design_basis(j, t)).unwrap();
                let g = GridFunction::from_fn(201, |t| design_basis(k, t)).unwrap();
                let ip = l2_inner(&f, &g).unwrap();
                assert!((ip - if j == k { 1.0 } else { 0.0 }).abs() <= 2e-3);
            }
        }
    }

    #[test]
    fn zero_slope_qamise_equals_squared_norm() {
        let truth = TruthHandle::new(2.0, 50, ErrorLaw::Normal);
        // partial sum oracle
        let oracle: f64 = 0.09 + (2..=50).map(|j| 16.0 * (j as f64).powi(-4)).sum::<f64>();
        assert!((oracle - 1.4071).abs() < 1e-3);
        let zero = SlopeSurface {
            levels: QuantileIndexSet::new(vec![0.25, 0.5]).unwrap(),
            slopes: vec![GridFunction::constant(201, 0.0).unwrap(); 2],
        };
        assert!((qamise_slope(&zero, &truth).unwrap() - oracle).abs() < 2e-3);
        let exact = SlopeSurface { levels: median(), slopes: vec![truth.slope_function(201).unwrap()] };
        assert_eq!(qamise_slope(&exact, &truth).unwrap(), 0.0);
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("oracle".parse::<MPolicy>().unwrap(), MPolicy::Oracle);
        assert_eq!("fixed:4".parse::<MPolicy>().unwrap(), MPolicy::Fixed(4));
        assert_eq!("gacv".parse::<MPolicy>().unwrap(), MPolicy::Criterion(CriterionKind::Gacv));
        assert!("fixed:0".parse::<MPolicy>().is_err());
        assert!("cv".parse::<MPolicy>().is_err());
    }

    #[test]
    fn config_parsing() {
        let cfg = StudyConfig::from_toml(
            "alpha = 2.0\nerror_law = \"normal\"\nn_list = [20, 40]\nlevels = [0.5]\npolicy = \"oracle\"\nR = 2\nseed = 3\nrate_check = true\n",
        )
        .unwrap();
        assert_eq!(cfg.specs().unwrap().len(), 2);
        assert_eq!(cfg.n_fresh, DEFAULT_N_FRESH);
        let bad = StudyConfig::from_toml(
            "alpha = 2.0\nerror_law = \"normal\"\nn_list = [20]\nlevels = [0.5]\npolicy = \"oracle\"\nseed = 3\nrate_check = true\n",
        );
        assert!(matches!(bad, Err(FqrError::Validation(_))));
        assert!(matches!(StudyConfig::from_toml("alpha = 2.0"), Err(FqrError::Config(_))));
    }

    #[test]
    fn rate_check_needs_two_sizes() {
        let report = StudyReport { repetitions: 1, n_fresh: 1, cells: vec![] };
        assert!(rate_check(&report, 2.0, ErrorLaw::Normal, RateTarget::Slope).is_err());
    }
}
