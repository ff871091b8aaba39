//! Solves a quantile regression on a random design and checks the returned
//! vertex against its subgradient certificate and random perturbations.

use fqr::qr_solver::{check_loss, solve_check_loss};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};

fn main() -> fqr::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
    let (n, p) = (300, 6);
    let design = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
    let y: Vec<f64> = (0..n)
        .map(|i| design.row(i).sum() + fqr::simulate::normal_quantile(rng.random_range(0.001..0.999)))
        .collect();

    for u in [0.1, 0.5, 0.9] {
        let sol = solve_check_loss(&design, &y, u)?;
        let mut best = f64::INFINITY;
        for _ in 0..1000 {
            let probe: Vec<f64> = sol.coefficients.iter().map(|b| b + rng.random_range(-0.01..0.01)).collect();
            let r: Vec<f64> = (0..n).map(|i| y[i] - (0..p).map(|j| design[(i, j)] * probe[j]).sum::<f64>()).collect();
            best = best.min(check_loss(&r, u)?);
        }
        println!(
            "u = {u}: objective {:.6} (best probe {:.6}), subgradient {:.3e} <= {:.3e}: {}, {} iterations",
            sol.objective,
            best,
            sol.subgradient_norm,
            sol.certificate_bound,
            sol.certificate_holds(),
            sol.iterations
        );
    }
    Ok(())
}
