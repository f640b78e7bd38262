//! Cost-optimal robust gains for the quadrotor at multiples of the minimum
//! control frequency, and the simulated quadratic cost they achieve.
//!
//! Run with `cargo run --release --example performance -- [N] [seed]`.

use std::time::Instant;

use nalgebra::DMatrix;
use sdgp::gp::{fit_all, FitConfig};
use sdgp::linearize::{linearize_at, to_norm_bounded};
use sdgp::numerics::SymMatrix;
use sdgp::sdp::{min_control_frequency, optimize_performance, McfOptions, PerformanceOptions};
use sdgp::sim::{
    evaluate_cost, generate_dataset, simulate_closed_loop, InputBox, Quadrotor, SampledController, SamplingPolicy,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(400);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);

    let plant = Quadrotor::default();
    let x_e = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let u_e = plant.params.hover_input().to_vec();
    let q_cost = SymMatrix::from_diagonal(&[100.0, 1.0, 100.0, 1.0, 100.0, 1.0]);
    let r_cost = SymMatrix::from_diagonal(&[0.01, 0.01]);
    let initial = [
        [1.2, 0.0, 0.2, 0.0, 0.0, 0.0],
        [0.8, 0.0, 0.2, 0.0, 0.0, 0.0],
        [1.2, 0.0, -0.2, 0.0, 0.0, 0.0],
    ];

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
    let mcf = min_control_frequency(&sys, &McfOptions::default())?;
    println!("N = {n}: minimum control frequency {:.2} Hz", mcf.min_frequency);

    for xi in [1.0, 1.25, 1.5, 2.0] {
        let t_s = mcf.t_s_max / xi;
        let start = Instant::now();
        let (eta, design) = match optimize_performance(&sys, t_s, &q_cost, &r_cost, &PerformanceOptions::default()) {
            Ok(r) => r,
            Err(e) => {
                println!("  xi {xi}: {e}");
                continue;
            }
        };
        let ctrl = SampledController::new(design.gain.clone(), x_e.clone(), u_e.clone(), t_s, SamplingPolicy::Periodic)?;
        let mut total = 0.0;
        for x0 in &initial {
            let traj = simulate_closed_loop(&plant, &ctrl, x0, 10.0, None, 0)?;
            total += evaluate_cost(&traj, &q_cost, &r_cost, &x_e, &u_e)?;
        }
        println!(
            "  xi {xi}: {:.2} Hz, eta {eta:.4e}, eps ({:.2e}, {:.2e}), mean cost {:.4} ({:.1?})",
            1.0 / t_s,
            design.eps_used.0,
            design.eps_used.1,
            total / initial.len() as f64,
            start.elapsed()
        );
    }
    Ok(())
}
