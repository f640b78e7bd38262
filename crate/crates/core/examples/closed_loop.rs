//! Certifies a sampled-data gain for the quadrotor, then checks it in
//! simulation: the nonlinear plant at several control frequencies and
//! linear plants drawn from the uncertainty set under random sampling.
//!
//! Run with `cargo run --release --example closed_loop -- [N] [seed]`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdgp::gp::{fit_all, FitConfig};
use sdgp::linearize::{linearize_at, sample_realization, to_norm_bounded};
use sdgp::lmi::nominal_stability_check;
use sdgp::sdp::{min_control_frequency, McfOptions};
use sdgp::sim::{
    generate_dataset, simulate_closed_loop, InputBox, LinearPlant, Quadrotor, SampledController, SamplingPolicy,
};

fn deviation(x: &[f64], x_e: &[f64]) -> f64 {
    x.iter().zip(x_e).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(600);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);

    let plant = Quadrotor::default();
    let x_e = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let u_e = plant.params.hover_input().to_vec();
    let x0 = [1.2, 0.0, 0.2, 0.0, 0.0, 0.0];

    let data = generate_dataset(&plant, &InputBox::quadrotor_default(), n, &[0.1; 6], seed)?;
    let fit = FitConfig {
        restarts: 2,
        noise_from_dataset: true,
        max_points: Some(300),
        seed,
        ..FitConfig::default()
    };
    let models: Vec<_> = fit_all(&data, &fit)?.into_iter().map(|(m, _)| m).collect();
    let lin = linearize_at(&models, &DMatrix::zeros(6, 8), &x_e, &u_e, 0.99)?;
    let sys = to_norm_bounded(&lin);
    let design = min_control_frequency(&sys, &McfOptions::default())?;
    println!("N = {n}: minimum control frequency {:.2} Hz", design.min_frequency);

    for xi in [1.0, 1.25, 1.5, 2.0] {
        let t_s = design.t_s_max / xi;
        let ctrl = SampledController::new(design.gain.clone(), x_e.clone(), u_e.clone(), t_s, SamplingPolicy::Periodic)?;
        let traj = simulate_closed_loop(&plant, &ctrl, &x0, 10.0, None, 0)?;
        println!(
            "  nonlinear, {:.2} Hz: |x(10) - x_e| = {:.3e} ({:?})",
            1.0 / t_s,
            deviation(traj.final_state(), &x_e),
            traj.status
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_w = f64::NEG_INFINITY;
    let mut worst_ratio: f64 = 0.0;
    for trial in 0..20 {
        let delta: Vec<f64> = (0..sys.p_u()).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let (a, b) = sample_realization(&sys, &delta)?;
        let (w, _) = nominal_stability_check(&a, &b, design.t_s_max, &design.certificate.values, &design.layout)?;
        worst_w = worst_w.max(w);
        let lin_plant = LinearPlant::new(a, b, x_e.clone(), u_e.clone())?;
        let ctrl = SampledController::new(
            design.gain.clone(),
            x_e.clone(),
            u_e.clone(),
            design.t_s_max,
            SamplingPolicy::UniformRandom { lower_fraction: 0.5 },
        )?;
        let traj = simulate_closed_loop(&lin_plant, &ctrl, &x0, 10.0, None, trial)?;
        worst_ratio = worst_ratio.max(deviation(traj.final_state(), &x_e) / deviation(&x0, &x_e));
    }
    println!("  20 uncertain linear plants: worst lambda_max(W) {worst_w:.3e}, worst |x(10)|/|x(0)| {worst_ratio:.3e}");
    Ok(())
}
