//! Monotone versions of an estimated conditional quantile curve `u ↦ Q̂(u | x)`.
//!
//! Per-level fits can cross. Three repairs are provided: sorting the values
//! (rearrangement), the L2 projection onto nondecreasing sequences computed by
//! pool-adjacent-violators (isotonization), and convex combinations of the two.
//! For a nondecreasing target none of them increases the Lq distance to it.

use serde::{Deserialize, Serialize};

use crate::error::{FqrError, Result};
use crate::estimator::QuantileIndexSet;

/// Default weight on the rearranged curve in [`blend`].
pub const DEFAULT_BLEND: f64 = 0.5;

/// Values of a quantile curve on a finite level grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileCurve {
    levels: QuantileIndexSet,
    values: Vec<f64>,
}

impl QuantileCurve {
    pub fn new(levels: QuantileIndexSet, values: Vec<f64>) -> Result<Self> {
        if levels.len() != values.len() {
            return Err(FqrError::validation(format!(
                "{} levels but {} quantile values",
                levels.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FqrError::validation("quantile values must be finite"));
        }
        Ok(Self { levels, values })
    }

    pub fn levels(&self) -> &QuantileIndexSet {
        &self.levels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.values.windows(2).all(|w| w[0] <= w[1])
    }

    fn with_values(&self, values: Vec<f64>) -> QuantileCurve {
        QuantileCurve { levels: self.levels.clone(), values }
    }
}

/// Sorts the values in ascending order; levels are unchanged.
pub fn rearrange(curve: &QuantileCurve) -> QuantileCurve {
    let mut values = curve.values.clone();
    values.sort_by(f64::total_cmp);
    curve.with_values(values)
}

/// Least-squares nondecreasing fit with uniform weights (pool adjacent violators).
pub fn isotonize_pava(curve: &QuantileCurve) -> QuantileCurve {
    curve.with_values(pava(&curve.values))
}

pub(crate) fn pava(values: &[f64]) -> Vec<f64> {
    // blocks of (sum, count), merged left to right
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (s1, c1) = blocks[blocks.len() - 1];
            let (s0, c0) = blocks[blocks.len() - 2];
            if s0 / c0 as f64 > s1 / c1 as f64 {
                blocks.pop();
                let last = blocks.len() - 1;
                blocks[last] = (s0 + s1, c0 + c1);
            } else {
                break;
            }
        }
    }
    blocks.into_iter().flat_map(|(s, c)| std::iter::repeat_n(s / c as f64, c)).collect()
}

/// Pointwise `λ a + (1 − λ) b`.
pub fn blend(a: &QuantileCurve, b: &QuantileCurve, lambda: f64) -> Result<QuantileCurve> {
    if a.levels != b.levels {
        return Err(FqrError::validation("cannot blend curves on different level grids"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(FqrError::validation(format!("blend weight {lambda} outside [0, 1]")));
    }
    let values = a.values.iter().zip(&b.values).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
    Ok(a.with_values(values))
}

/// `(mean_u |estimate − truth|^q)^{1/q}`, or the maximum when `q` is infinite.
pub fn lq_error(estimate: &QuantileCurve, truth: &QuantileCurve, q: f64) -> Result<f64> {
    if estimate.levels != truth.levels {
        return Err(FqrError::validation("estimate and truth use different level grids"));
    }
    if !(q >= 1.0) {
        return Err(FqrError::validation(format!("Lq exponent must be at least 1, got {q}")));
    }
    let diffs = estimate.values.iter().zip(&truth.values).map(|(a, b)| (a - b).abs());
    if q.is_infinite() {
        return Ok(diffs.fold(0.0, f64::max));
    }
    let k = estimate.values.len() as f64;
    Ok((diffs.map(|d| d.powf(q)).sum::<f64>() / k).powf(1.0 / q))
}

/// Which monotone repair to apply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method", content = "lambda")]
pub enum Monotonizer {
    Rearrange,
    Isotonize,
    /// `λ · rearranged + (1 − λ) · isotonized`.
    Blend(f64),
}

impl Monotonizer {
    pub fn apply(&self, curve: &QuantileCurve) -> Result<QuantileCurve> {
        match *self {
            Monotonizer::Rearrange => Ok(rearrange(curve)),
            Monotonizer::Isotonize => Ok(isotonize_pava(curve)),
            Monotonizer::Blend(lambda) => blend(&rearrange(curve), &isotonize_pava(curve), lambda),
        }
    }
}

impl std::str::FromStr for Monotonizer {
    type Err = FqrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rearrange" => Ok(Monotonizer::Rearrange),
            "isotonize" | "pava" => Ok(Monotonizer::Isotonize),
            "blend" => Ok(Monotonizer::Blend(DEFAULT_BLEND)),
            other => match other.strip_prefix("blend:") {
                Some(l) => l
                    .parse()
                    .map(Monotonizer::Blend)
                    .map_err(|_| FqrError::validation(format!("bad blend weight in {other:?}"))),
                None => Err(FqrError::validation(format!("unknown monotonizer {other:?}"))),
            },
        }
    }
}
