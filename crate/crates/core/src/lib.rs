//! Functional linear quantile regression.
//!
//! A scalar response `Y` is related to a random curve `X(t)`, `t ∈ [0, 1]`,
//! through conditional quantiles that are linear in the curve:
//!
//! ```text
//! Q(u | X) = a(u) + ∫ b(t, u) (X(t) - E X(t)) dt
//! ```
//!
//! The slope surface `b(t, u)` is estimated by truncating the Karhunen–Loève
//! expansion of the covariate at `m` empirical principal components and
//! solving one check-loss regression per quantile level on the estimated
//! scores. The crate covers the whole pipeline:
//!
//! * [`curves`]: curve ingestion, step interpolation, trapezoid L2 algebra.
//! * [`covariance`]: empirical covariance kernel, eigenfunctions, scores.
//! * [`qr_solver`]: exact check-loss minimization with an optimality certificate.
//! * [`estimator`]: slope surface, plug-in conditional quantiles, diagnostics.
//! * [`monotonize`]: rearrangement, isotonization and their blends.
//! * [`model_select`]: AIC / BIC / GACV and their integrated versions.
//! * [`simulate`]: the cosine-basis simulation design and Monte Carlo harness.
//! * [`cli`]: the `fqr` command-line front end.

// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod covariance;
pub mod curves;
pub mod error;
pub mod estimator;
pub mod model_select;
pub mod monotonize;
pub mod qr_solver;
pub mod simulate;

pub use covariance::{compute_scores, eigendecompose, empirical_kernel, EigenSystem, KernelOnGrid, ScoresMatrix};
pub use curves::{curve_mean, interpolate, l2_inner, load_curves, DiscreteCurve, GridFunction, InterpolationRule};
pub use error::{FqrError, Result};
pub use estimator::{
    fit_fqr, normal_equation_residual, predict_quantile, slope_surface, FqrModel, PcaBasis, QuantileIndexSet,
    SlopeSurface,
};
pub use model_select::{criterion_at, integrated_criterion, select_cutoff, CriterionKind, CutoffScan};
pub use monotonize::{blend, isotonize_pava, lq_error, rearrange, QuantileCurve};
pub use qr_solver::{check_loss, solve_check_loss, subgradient_vector, QrSolution};
