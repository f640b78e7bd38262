//! Fits a GP to noisy samples of `f(z) = sin(z₁)·cos(z₂)` and predicts the
//! gradient with its covariance, next to the true gradient.
//!
//! Run with `cargo run --release --example gp_derivative`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sdgp::gp::{fit_all, Dataset, FitConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 0.05)?;
    let n = 150;
    let inputs: DMatrix<f64> = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-2.0..2.0));
    let targets = DMatrix::from_fn(n, 1, |i, _| inputs[(i, 0)].sin() * inputs[(i, 1)].cos() + noise.sample(&mut rng));
    let data = Dataset::new(inputs, targets, vec![0.05])?;

    let (model, report) = fit_all(&data, &FitConfig::default())?.remove(0);
    println!(
        "fitted: sf2 {:.3}, lengthscales {:?}, noise var {:.2e}, log ML {:.2}",
        model.kernel.output_variance, model.kernel.lengthscales, model.noise_variance, report.log_marginal_likelihood
    );

    for z in [[0.0, 0.0], [1.0, -0.5], [-1.5, 1.2]] {
        let pred = model.predict_derivative(&z)?;
        let truth = DVector::from_vec(vec![z[0].cos() * z[1].cos(), -z[0].sin() * z[1].sin()]);
        let std: Vec<f64> = (0..2).map(|i| pred.covariance.get(i, i).sqrt()).collect();
        println!(
            "z = {z:?}: gradient [{:.3}, {:.3}] ± [{:.3}, {:.3}], true [{:.3}, {:.3}]",
            pred.mean[0], pred.mean[1], std[0], std[1], truth[0], truth[1]
        );
    }
    Ok(())
}
