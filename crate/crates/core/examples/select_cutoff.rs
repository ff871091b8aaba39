//! Scans cut-offs 1..=20 and reports the integrated AIC, BIC and GACV choices.

use fqr::curves::{interpolate, InterpolationRule};
use fqr::estimator::{PcaBasis, QuantileIndexSet};
use fqr::model_select::{default_candidates, CriterionKind, CutoffScan};
use fqr::simulate::{gen_dataset, DesignSpec, ErrorLaw};

fn main() -> fqr::Result<()> {
    let levels = QuantileIndexSet::evenly_spaced(0.15, 0.85, 0.05)?;
    for law in [ErrorLaw::Normal, ErrorLaw::Cauchy] {
        let spec = DesignSpec::new(2.0, law, 200, 11, levels.clone())?;
        let data = gen_dataset(&spec)?;
        let grid = data
            .curves
            .iter()
            .map(|c| interpolate(c, InterpolationRule::LeftStep, 201))
            .collect::<fqr::Result<Vec<_>>>()?;
        let basis = PcaBasis::from_grid_up_to(grid, InterpolationRule::LeftStep, 20)?;
        let scan = CutoffScan::run(&basis, &data.responses, &levels, &default_candidates(200, basis.max_m()))?;
        print!("{} errors:", law.as_str());
        for kind in CriterionKind::ALL {
            let s = scan.select(kind)?;
            print!(" {} -> m = {} ({:.4})", kind.as_str(), s.m, s.scores[&s.m]);
        }
        println!();
    }
    Ok(())
}
