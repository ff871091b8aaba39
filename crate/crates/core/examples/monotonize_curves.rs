//! Repairs crossing quantile predictions by rearrangement, isotonic
//! regression and their blend, and compares Lq errors against the truth.

use fqr::curves::InterpolationRule;
use fqr::estimator::{fit_fqr, predict_all_levels, QuantileIndexSet};
use fqr::monotonize::{lq_error, Monotonizer, QuantileCurve};
use fqr::simulate::{draw_covariates, gen_dataset, true_quantile, DesignSpec, ErrorLaw};
use rand::SeedableRng;

fn main() -> fqr::Result<()> {
    let levels = QuantileIndexSet::evenly_spaced(0.15, 0.85, 0.05)?;
    let spec = DesignSpec::new(2.0, ErrorLaw::Normal, 100, 3, levels.clone())?;
    let data = gen_dataset(&spec)?;
    let model = fit_fqr(&data.curves, &data.responses, &levels, 4, InterpolationRule::LeftStep, 201)?;

    let methods = [Monotonizer::Rearrange, Monotonizer::Isotonize, Monotonizer::Blend(0.5)];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let fresh = draw_covariates(&data.truth, 200, 201, &mut rng)?;
    let mut shown = 0;
    for (z, x) in fresh.z.iter().zip(&fresh.curves) {
        let raw = predict_all_levels(&model, x)?;
        if raw.is_nondecreasing() {
            continue;
        }
        let truth = levels.levels().iter().map(|&u| true_quantile(&data.truth, z, u)).collect::<fqr::Result<Vec<_>>>()?;
        let truth = QuantileCurve::new(levels.clone(), truth)?;
        println!("raw    {:?}", rounded(raw.values()));
        for q in [1.0, 2.0, f64::INFINITY] {
            print!("q = {q:>3}: raw {:.4}", lq_error(&raw, &truth, q)?);
            for m in &methods {
                print!(", {m:?} {:.4}", lq_error(&m.apply(&raw)?, &truth, q)?);
            }
            println!();
        }
        shown += 1;
        if shown == 3 {
            break;
        }
    }
    if shown == 0 {
        println!("no crossing curves among the fresh subjects");
    }
    Ok(())
}

fn rounded(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{x:.2}")).collect()
}
