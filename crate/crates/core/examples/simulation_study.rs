//! Monte Carlo study on the cosine design with the oracle cut-off, followed by
//! log-log rate fits.
//!
//! ```text
//! cargo run --release --example simulation_study -- [repetitions] [alpha]
//! ```

use fqr::estimator::QuantileIndexSet;
use fqr::simulate::{rate_check, run_study, DesignSpec, ErrorLaw, MPolicy, RateTarget};

fn main() -> fqr::Result<()> {
    let mut args = std::env::args().skip(1);
    let reps: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);
    let alpha: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(2.0);
    let levels = QuantileIndexSet::new(vec![0.5])?;

    let specs = [100, 200, 500]
        .iter()
        .enumerate()
        .map(|(k, &n)| DesignSpec::new(alpha, ErrorLaw::Normal, n, 2024 + k as u64, levels.clone()))
        .collect::<fqr::Result<Vec<_>>>()?;
    let started = std::time::Instant::now();
    let report = run_study(&specs, &[MPolicy::Oracle], reps, 1000)?;
    println!("{} repetitions per cell in {:.1?}", reps, started.elapsed());

    println!("{:>5} {:>3} {:>14} {:>12} {:>14} {:>12}", "n", "m", "slope QAMISE", "se", "quant QAMISE", "se");
    for c in &report.cells {
        let m = c.selected_m.keys().next().copied().unwrap_or(0);
        println!(
            "{:>5} {:>3} {:>14.6} {:>12.6} {:>14.6} {:>12.6}",
            c.n, m, c.slope_qamise, c.slope_se, c.quantile_qamise, c.quantile_se
        );
    }
    for target in [RateTarget::Slope, RateTarget::Quantile] {
        let fit = rate_check(&report, alpha, ErrorLaw::Normal, target)?;
        println!("{target:?} rate: fitted {:.3}, reference {:.3}", fit.slope, fit.reference_slope);
    }
    Ok(())
}
