//! Fits the estimator on simulated curves at three quantile levels and
//! predicts conditional quantiles for a few new subjects.

use fqr::curves::InterpolationRule;
use fqr::estimator::{fit_fqr, normal_equation_residual, predict_quantile, QuantileIndexSet};
use fqr::simulate::{draw_covariates, gen_dataset, true_quantile, DesignSpec, ErrorLaw};
use rand::SeedableRng;

fn main() -> fqr::Result<()> {
    let levels = QuantileIndexSet::new(vec![0.25, 0.5, 0.75])?;
    let spec = DesignSpec::new(2.0, ErrorLaw::Normal, 200, 1, levels.clone())?;
    let data = gen_dataset(&spec)?;

    let model = fit_fqr(&data.curves, &data.responses, &levels, 3, InterpolationRule::LeftStep, 201)?;
    println!("m = {}, leading eigenvalues {:?}", model.m(), model.eigensystem().eigenvalues());
    for (fit, &u) in model.fits().iter().zip(levels.levels()) {
        println!(
            "u = {u:.2}: objective {:.4}, subgradient {:.2e} <= {:.2e}, normal-equation residual {:.2e}",
            fit.objective,
            fit.subgradient_norm,
            fit.certificate_bound,
            normal_equation_residual(&model, u)?
        );
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let fresh = draw_covariates(&data.truth, 3, 201, &mut rng)?;
    for (k, (z, x)) in fresh.z.iter().zip(&fresh.curves).enumerate() {
        for &u in levels.levels() {
            println!(
                "subject {k}, u = {u:.2}: predicted {:+.3}, true {:+.3}",
                predict_quantile(&model, x, u)?,
                true_quantile(&data.truth, z, u)?
            );
        }
    }
    Ok(())
}
