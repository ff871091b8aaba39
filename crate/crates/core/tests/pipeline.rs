use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fqr::curves::{interpolate, l2_inner, load_curves, InterpolationRule};
use fqr::estimator::{
    fit_fqr, normal_equation_residual, predict_quantile, predict_quantile_curve, slope_surface, PcaBasis,
    QuantileIndexSet,
};
use fqr::simulate::{
    draw_covariates, gen_dataset, qamise_quantile, qamise_quantile_with, run_study, DesignSpec, ErrorLaw, MPolicy,
    TruthHandle,
};

fn median() -> QuantileIndexSet {
    QuantileIndexSet::new(vec![0.5]).unwrap()
}

fn median_of(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

#[test]
fn csv_fit_and_predict_round_trip() {
    let spec = DesignSpec::new(2.0, ErrorLaw::Normal, 60, 5, QuantileIndexSet::new(vec![0.25, 0.5, 0.75]).unwrap()).unwrap();
    let data = gen_dataset(&spec).unwrap();
    let mut csv = String::from("subject_id,t,value\n");
    for c in &data.curves {
        for (t, v) in c.times().iter().zip(c.values()) {
            csv.push_str(&format!("{},{},{}\n", c.subject_id(), t, v));
        }
    }
    let loaded = load_curves(csv.as_bytes()).unwrap();
    assert_eq!(loaded, data.curves);

    let model = fit_fqr(&loaded, &data.responses, &spec.levels, 3, InterpolationRule::LeftStep, 201).unwrap();
    for fit in model.fits() {
        assert!(fit.certificate_holds());
    }
    let x = interpolate(&loaded[0], InterpolationRule::LeftStep, 201).unwrap();
    for &u in spec.levels.levels() {
        assert_eq!(predict_quantile_curve(&model, &loaded[0], u).unwrap(), predict_quantile(&model, &x, u).unwrap());
    }
}

#[test]
fn slope_coefficients_are_recovered_by_projection() {
    let spec = DesignSpec::new(1.1, ErrorLaw::Cauchy, 80, 9, QuantileIndexSet::new(vec![0.3, 0.7]).unwrap()).unwrap();
    let data = gen_dataset(&spec).unwrap();
    let model = fit_fqr(&data.curves, &data.responses, &spec.levels, 4, InterpolationRule::MidpointStep, 201).unwrap();
    let surface = slope_surface(&model);
    for (k, b) in surface.slopes.iter().enumerate() {
        for j in 1..=4 {
            let coef = l2_inner(b, model.eigensystem().eigenfunction(j)).unwrap();
            assert!((coef - model.fits()[k].coefficients[j]).abs() < 1e-6);
        }
    }
    // x = mean + φ̂₁ predicts â(u) + b̂₁(u)
    let x = model.mean_curve().add(model.eigensystem().eigenfunction(1)).unwrap();
    for (k, &u) in spec.levels.levels().iter().enumerate() {
        let c = &model.fits()[k].coefficients;
        assert!((predict_quantile(&model, &x, u).unwrap() - (c[0] + c[1])).abs() < 1e-6);
    }
}

#[test]
fn eigenvalue_ratio_matches_population() {
    // population eigenvalues of the design are j^{-alpha}, so kappa_1 / kappa_2 = 4 at alpha = 2
    let base = DesignSpec::new(2.0, ErrorLaw::Normal, 500, 123, median()).unwrap();
    let ratios: Vec<f64> = (0..100)
        .map(|r| {
            let data = gen_dataset(&base.replication(r)).unwrap();
            let basis = PcaBasis::from_curves(&data.curves, InterpolationRule::LeftStep, 201, 2).unwrap();
            let k = basis.eigensystem().eigenvalues();
            k[0] / k[1]
        })
        .collect();
    let med = median_of(ratios);
    assert!((med - 4.0).abs() <= 1.2, "median ratio {med}");
}

#[test]
fn normal_equation_residual_shrinks_with_n() {
    let residuals = |n: usize| {
        let base = DesignSpec::new(2.0, ErrorLaw::Normal, n, 77, median()).unwrap();
        median_of(
            (0..50)
                .map(|r| {
                    let data = gen_dataset(&base.replication(r)).unwrap();
                    let model = fit_fqr(&data.curves, &data.responses, &base.levels, 3, InterpolationRule::LeftStep, 201).unwrap();
                    normal_equation_residual(&model, 0.5).unwrap()
                })
                .collect(),
        )
    };
    let small = residuals(100);
    let large = residuals(500);
    assert!(large < small, "{large} vs {small}");
}

#[test]
fn latent_scores_have_unit_variance() {
    let truth = TruthHandle::new(2.0, 3, ErrorLaw::Normal);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let sample = draw_covariates(&truth, 100_000, 11, &mut rng).unwrap();
    for j in 0..3 {
        let mean = sample.z.iter().map(|z| z[j]).sum::<f64>() / 1e5;
        let var = sample.z.iter().map(|z| (z[j] - mean).powi(2)).sum::<f64>() / (1e5 - 1.0);
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }
}

#[test]
fn flat_model_quantile_error_is_signal_variance() {
    // constant responses at the true median intercept give a = 0 and b = 0,
    // so the error reduces to Var(Σ ϱⱼ γⱼ Zⱼ) = Σ (ϱⱼ γⱼ)²
    let spec = DesignSpec::new(2.0, ErrorLaw::Normal, 30, 4, median()).unwrap();
    let data = gen_dataset(&spec).unwrap();
    let model = fit_fqr(&data.curves, &vec![0.0; 30], &spec.levels, 2, InterpolationRule::LeftStep, 201).unwrap();
    assert!(model.fits()[0].coefficients.iter().all(|c| c.abs() < 1e-12));
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = qamise_quantile_with(&model, &data.truth, 100_000, &mut rng).unwrap();
    let analytic = data.truth.signal_variance();
    assert!((q - analytic).abs() < 0.02 * analytic, "{q} vs {analytic}");
}

#[test]
fn fresh_draws_are_reproducible() {
    let spec = DesignSpec::new(2.0, ErrorLaw::Cauchy, 40, 6, median()).unwrap();
    let data = gen_dataset(&spec).unwrap();
    let model = fit_fqr(&data.curves, &data.responses, &spec.levels, 2, InterpolationRule::LeftStep, 201).unwrap();
    let a = qamise_quantile(&model, &data.truth, &spec, 200).unwrap();
    let b = qamise_quantile(&model, &data.truth, &spec, 200).unwrap();
    assert_eq!(a, b);
}

#[test]
fn study_is_deterministic_and_counts_replications() {
    let specs = vec![DesignSpec::new(2.0, ErrorLaw::Normal, 30, 1, median()).unwrap()];
    let policies = [MPolicy::Oracle, MPolicy::Fixed(2), MPolicy::Criterion(fqr::CriterionKind::Bic)];
    let a = run_study(&specs, &policies, 3, 50).unwrap();
    let b = run_study(&specs, &policies, 3, 50).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.cells.len(), 3);
    for c in &a.cells {
        assert_eq!(c.replications + c.failures, 3);
        assert_eq!(c.selected_m.values().sum::<usize>(), c.replications);
    }
    assert_eq!(a.to_csv().lines().count(), 4);
}
