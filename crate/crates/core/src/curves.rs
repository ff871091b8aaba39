//! Discretely observed covariate curves and L2 algebra on a uniform grid.
//!
//! Every curve enters the pipeline as a [`DiscreteCurve`] sampled on its own
//! time points in `[0, 1]`. Before any integral is taken it is interpolated
//! with a step rule and sampled onto the shared evaluation grid
//! `t_g = g / (G - 1)`, producing a [`GridFunction`]. All integrals over
//! `[0, 1]` are trapezoid sums on that grid.

use std::collections::HashMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{FqrError, Result};

/// Default evaluation grid size (201 equally spaced points on `[0, 1]`).
pub const DEFAULT_GRID_SIZE: usize = 201;

// Absolute slack used when locating a grid point inside an observed segment.
const TIME_SNAP: f64 = 1e-12;

/// One subject's sampled covariate path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteCurve {
    subject_id: String,
    times: Vec<f64>,
    values: Vec<f64>,
}

impl DiscreteCurve {
    /// Builds a curve, checking that times are strictly increasing from 0 to 1
    /// and that values are finite.
    pub fn new(subject_id: impl Into<String>, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let subject_id = subject_id.into();
        if times.len() != values.len() {
            return Err(FqrError::validation(format!(
                "subject {subject_id}: {} times but {} values",
                times.len(),
                values.len()
            )));
        }
        if times.len() < 2 {
            return Err(FqrError::validation(format!(
                "subject {subject_id}: at least two observations are required"
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(FqrError::validation(format!(
                "subject {subject_id}: observation times must be strictly increasing"
            )));
        }
        if times[0] != 0.0 || times[times.len() - 1] != 1.0 {
            return Err(FqrError::validation(format!(
                "subject {subject_id}: observation times must start at 0 and end at 1"
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(FqrError::validation(format!("subject {subject_id}: non-finite value {v}")));
        }
        Ok(Self { subject_id, times, values })
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Evaluates the step interpolant at `t ∈ [0, 1]`.
    pub fn eval(&self, rule: InterpolationRule, t: f64) -> f64 {
        let segments = self.times.len() - 1;
        // index of the segment [t_l, t_{l+1}) containing t; t = 1 falls in the last one
        let l = self.times.partition_point(|&s| s <= t + TIME_SNAP).saturating_sub(1).min(segments - 1);
        match rule {
            InterpolationRule::LeftStep => self.values[l],
            InterpolationRule::MidpointStep => 0.5 * (self.values[l] + self.values[l + 1]),
        }
    }
}

/// Step interpolation rule turning discrete observations into a curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InterpolationRule {
    /// Value at the left end point of each observed segment.
    #[default]
    LeftStep,
    /// Average of the two end points of each observed segment.
    MidpointStep,
}

impl InterpolationRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            InterpolationRule::LeftStep => "left_step",
            InterpolationRule::MidpointStep => "midpoint_step",
        }
    }
}

impl std::str::FromStr for InterpolationRule {
    type Err = FqrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left_step" => Ok(InterpolationRule::LeftStep),
            "midpoint_step" => Ok(InterpolationRule::MidpointStep),
            other => Err(FqrError::validation(format!("unknown interpolation rule {other:?}"))),
        }
    }
}

/// Quadrature rule attached to a grid function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    #[default]
    Trapezoid,
}

/// A function sampled on the uniform grid `t_g = g / (G - 1)`, `g = 0..G`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    values: Vec<f64>,
    #[serde(default)]
    quadrature: Quadrature,
}

impl GridFunction {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(FqrError::validation("a grid function needs at least two grid points"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FqrError::validation("grid function values must be finite"));
        }
        Ok(Self { values, quadrature: Quadrature::Trapezoid })
    }

    pub fn constant(grid_size: usize, c: f64) -> Result<Self> {
        Self::new(vec![c; grid_size])
    }

    /// Samples `f` at every grid point.
    pub fn from_fn(grid_size: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(grid_points(grid_size).map(f).collect())
    }

    pub fn grid_size(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn quadrature(&self) -> Quadrature {
        self.quadrature
    }

    pub fn scaled(&self, c: f64) -> GridFunction {
        GridFunction { values: self.values.iter().map(|v| c * v).collect(), quadrature: self.quadrature }
    }

    pub fn add(&self, other: &GridFunction) -> Result<GridFunction> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        self.zip_with(other, |a, b| a - b)
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: f64, other: &GridFunction) -> Result<GridFunction> {
        self.zip_with(other, |a, b| a + c * b)
    }

    pub fn norm(&self) -> f64 {
        l2_inner(self, self).map(f64::sqrt).unwrap_or(0.0)
    }

    fn zip_with(&self, other: &GridFunction, f: impl Fn(f64, f64) -> f64) -> Result<GridFunction> {
        check_same_grid(self, other)?;
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Ok(GridFunction { values, quadrature: self.quadrature })
    }
}

/// The grid points `g / (G - 1)`.
pub fn grid_points(grid_size: usize) -> impl Iterator<Item = f64> {
    let step = (grid_size.max(2) - 1) as f64;
    (0..grid_size).map(move |g| g as f64 / step)
}

/// Trapezoid weights on the uniform grid of size `grid_size`.
pub fn trapezoid_weights(grid_size: usize) -> Vec<f64> {
    let h = 1.0 / (grid_size - 1) as f64;
    let mut w = vec![h; grid_size];
    w[0] = 0.5 * h;
    w[grid_size - 1] = 0.5 * h;
    w
}

fn check_same_grid(f: &GridFunction, g: &GridFunction) -> Result<()> {
    if f.grid_size() != g.grid_size() {
        return Err(FqrError::validation(format!(
            "grid size mismatch: {} vs {}",
            f.grid_size(),
            g.grid_size()
        )));
    }
    Ok(())
}

/// Parses the curve CSV (`subject_id,t,value`) into validated curves.
///
/// Subjects are returned in order of first appearance; each subject's
/// observations are sorted by time.
pub fn load_curves<R: Read>(source: R) -> Result<Vec<DiscreteCurve>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = reader.headers().map_err(|e| csv_error(e, 1))?.clone();
    let expected = ["subject_id", "t", "value"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(FqrError::Parse { line: 1, message: "expected header subject_id,t,value".into() });
    }

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| csv_error(e, line))?;
        if record.len() != 3 {
            return Err(FqrError::Parse { line, message: format!("expected 3 fields, found {}", record.len()) });
        }
        let id = record[0].to_string();
        let t = parse_f64(&record[1], line, "t")?;
        let v = parse_f64(&record[2], line, "value")?;
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push((t, v));
    }

    order
        .into_iter()
        .map(|id| {
            let mut obs = rows.remove(&id).unwrap_or_default();
            obs.sort_by(|a, b| a.0.total_cmp(&b.0));
            if let Some(w) = obs.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(FqrError::validation(format!("subject {id}: duplicate observation at t = {}", w[0].0)));
            }
            let (times, values) = obs.into_iter().unzip();
            DiscreteCurve::new(id, times, values)
        })
        .collect()
}

pub(crate) fn parse_f64(field: &str, line: usize, name: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| FqrError::Parse { line, message: format!("column {name}: cannot parse {field:?} as a number") })
}

pub(crate) fn csv_error(e: csv::Error, fallback_line: usize) -> FqrError {
    if let csv::ErrorKind::Io(_) = e.kind() {
        return FqrError::Io(std::io::Error::other(e.to_string()));
    }
    let line = e.position().map(|p| p.line() as usize).unwrap_or(fallback_line);
    FqrError::Parse { line, message: e.to_string() }
}

/// Samples the step interpolant of `curve` onto the uniform grid.
pub fn interpolate(curve: &DiscreteCurve, rule: InterpolationRule, grid_size: usize) -> Result<GridFunction> {
    if grid_size < 2 {
        return Err(FqrError::validation("grid size must be at least 2"));
    }
    GridFunction::new(grid_points(grid_size).map(|t| curve.eval(rule, t)).collect())
}

/// Pointwise mean of a nonempty set of curves on a common grid.
pub fn curve_mean(curves: &[GridFunction]) -> Result<GridFunction> {
    let first = curves.first().ok_or_else(|| FqrError::validation("cannot average an empty set of curves"))?;
    let mut acc = vec![0.0; first.grid_size()];
    for c in curves {
        check_same_grid(first, c)?;
        for (a, v) in acc.iter_mut().zip(c.values()) {
            *a += v;
        }
    }
    let n = curves.len() as f64;
    GridFunction::new(acc.into_iter().map(|a| a / n).collect())
}

/// Trapezoid approximation of `∫₀¹ f(t) g(t) dt`.
pub fn l2_inner(f: &GridFunction, g: &GridFunction) -> Result<f64> {
    check_same_grid(f, g)?;
    Ok(dot_trapezoid(f.values(), g.values()))
}

pub(crate) fn dot_trapezoid(a: &[f64], b: &[f64]) -> f64 {
    let last = a.len() - 1;
    let interior: f64 = a[1..last].iter().zip(&b[1..last]).map(|(x, y)| x * y).sum();
    let ends = 0.5 * (a[0] * b[0] + a[last] * b[last]);
    (interior + ends) / last as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn abc_curve() -> DiscreteCurve {
        DiscreteCurve::new("a", vec![0.0, 0.5, 1.0], vec![1.0, 2.0, 3.0]).unwrap()
    }

    #[test]
    fn load_single_subject() {
        let csv = "subject_id,t,value\na,0,1\na,0.5,2\na,1,3\n";
        let curves = load_curves(csv.as_bytes()).unwrap();
        assert_eq!(curves.len(), 1);
        assert_eq!(curves[0].times(), &[0.0, 0.5, 1.0]);
        assert_eq!(curves[0].values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn load_sorts_rows() {
        let sorted = load_curves("subject_id,t,value\na,0,1\na,0.5,2\na,1,3\n".as_bytes()).unwrap();
        let shuffled = load_curves("subject_id,t,value\na,1,3\na,0,1\na,0.5,2\n".as_bytes()).unwrap();
        assert_eq!(sorted, shuffled);
    }

    #[test]
    fn load_rejects_missing_endpoint() {
        let err = load_curves("subject_id,t,value\na,0,1\na,0.5,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, FqrError::Validation(ref m) if m.contains("subject a")), "{err}");
    }

    #[test]
    fn load_rejects_duplicates_and_bad_rows() {
        let dup = load_curves("subject_id,t,value\na,0,1\na,0,2\na,1,3\n".as_bytes()).unwrap_err();
        assert!(matches!(dup, FqrError::Validation(_)));
        let bad = load_curves("subject_id,t,value\na,0,1\na,zero,2\n".as_bytes()).unwrap_err();
        assert!(matches!(bad, FqrError::Parse { line: 3, .. }), "{bad}");
        let header = load_curves("id,time,value\na,0,1\n".as_bytes()).unwrap_err();
        assert!(matches!(header, FqrError::Parse { line: 1, .. }));
    }

    #[test]
    fn step_rules_at_quarter() {
        let c = abc_curve();
        assert_eq!(c.eval(InterpolationRule::LeftStep, 0.25), 1.0);
        assert_eq!(c.eval(InterpolationRule::MidpointStep, 0.25), 1.5);
        // right end extends the last segment
        assert_eq!(c.eval(InterpolationRule::LeftStep, 1.0), 2.0);
        assert_eq!(c.eval(InterpolationRule::MidpointStep, 1.0), 2.5);
    }

    #[test]
    fn left_step_reproduces_grid_samples() {
        let g = 11;
        let times: Vec<f64> = grid_points(g).collect();
        let values: Vec<f64> = times.iter().map(|t| (3.0 * t).sin()).collect();
        let c = DiscreteCurve::new("x", times, values.clone()).unwrap();
        let f = interpolate(&c, InterpolationRule::LeftStep, g).unwrap();
        assert_eq!(&f.values()[..g - 1], &values[..g - 1]);
    }

    #[test]
    fn mean_examples() {
        let one = GridFunction::constant(5, 1.0).unwrap();
        let minus = GridFunction::constant(5, -1.0).unwrap();
        assert_eq!(curve_mean(&[one.clone(), minus]).unwrap().values(), &[0.0; 5]);
        assert_eq!(curve_mean(&[one.clone()]).unwrap(), one);
        let a = GridFunction::new(vec![1.0, 2.0]).unwrap();
        let b = GridFunction::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(curve_mean(&[a, b]).unwrap().values(), &[2.0, 3.0]);
        assert!(curve_mean(&[]).is_err());
    }

    #[test]
    fn inner_product_examples() {
        for g in [2, 3, 17, 201] {
            let one = GridFunction::constant(g, 1.0).unwrap();
            assert!((l2_inner(&one, &one).unwrap() - 1.0).abs() < 1e-15);
        }
        let one = GridFunction::constant(101, 1.0).unwrap();
        let t = GridFunction::from_fn(101, |t| t).unwrap();
        assert!((l2_inner(&one, &t).unwrap() - 0.5).abs() < 1e-15);

        let mismatch = GridFunction::constant(7, 1.0).unwrap();
        assert!(l2_inner(&one, &mismatch).is_err());
    }

    #[test]
    fn cosine_norm_against_fine_quadrature() {
        let phi = |t: f64| 2f64.sqrt() * (std::f64::consts::PI * t).cos();
        // independent oracle: composite Simpson on 100001 points
        let fine = 100_001usize;
        let h = 1.0 / (fine - 1) as f64;
        let oracle: f64 = (0..fine)
            .map(|k| {
                let w = if k == 0 || k == fine - 1 { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
                w * phi(k as f64 * h).powi(2)
            })
            .sum::<f64>()
            * h
            / 3.0;
        assert!((oracle - 1.0).abs() < 1e-12);
        let f = GridFunction::from_fn(201, phi).unwrap();
        assert!((l2_inner(&f, &f).unwrap() - oracle).abs() < 1e-3);
    }

    proptest! {
        #[test]
        fn inner_is_psd_and_symmetric(a in prop::collection::vec(-10.0..10.0f64, 2..40), seed in 0.0..1.0f64) {
            let f = GridFunction::new(a.clone()).unwrap();
            let g = GridFunction::new(a.iter().map(|v| v * seed - 1.0).collect()).unwrap();
            let ff = l2_inner(&f, &f).unwrap();
            prop_assert!(ff >= 0.0);
            if a.iter().any(|v| *v != 0.0) { prop_assert!(ff > 0.0); }
            prop_assert!((l2_inner(&f, &g).unwrap() - l2_inner(&g, &f).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn mean_commutes_with_scaling(rows in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 6), 1..6), c in -3.0..3.0f64) {
            let curves: Vec<_> = rows.into_iter().map(|r| GridFunction::new(r).unwrap()).collect();
            let scaled: Vec<_> = curves.iter().map(|f| f.scaled(c)).collect();
            let lhs = curve_mean(&scaled).unwrap();
            let rhs = curve_mean(&curves).unwrap().scaled(c);
            for (x, y) in lhs.values().iter().zip(rhs.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn left_step_hits_observations(vals in prop::collection::vec(-5.0..5.0f64, 2..12)) {
            let k = vals.len();
            let times: Vec<f64> = (0..k).map(|i| i as f64 / (k - 1) as f64).collect();
            let c = DiscreteCurve::new("p", times.clone(), vals.clone()).unwrap();
            for l in 0..k - 1 {
                prop_assert_eq!(c.eval(InterpolationRule::LeftStep, times[l]), vals[l]);
                let mid = c.eval(InterpolationRule::MidpointStep, times[l]);
                prop_assert_eq!(mid, 0.5 * (vals[l] + vals[l + 1]));
            }
        }
    }
}
