//! Minimum control frequency for the planar quadrotor learned from noisy data.
//!
//! Run with `cargo run --release --example quadrotor_mcf -- [N] [seed]`.

use std::time::Instant;

use nalgebra::DMatrix;
use sdgp::gp::{fit_all, FitConfig};
use sdgp::linearize::{linearize_at, to_norm_bounded};
use sdgp::sdp::{min_control_frequency, McfOptions};
use sdgp::sim::{generate_dataset, InputBox, Quadrotor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(600);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);

    let plant = Quadrotor::default();
    let x_e = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let u_e = plant.params.hover_input();

    let start = Instant::now();
    let data = generate_dataset(&plant, &InputBox::quadrotor_default(), n, &[0.1; 6], seed)?;
    let fit = FitConfig {
        restarts: 2,
        noise_from_dataset: true,
        max_points: Some(300),
        seed,
        ..FitConfig::default()
    };
    let models: Vec<_> = fit_all(&data, &fit)?.into_iter().map(|(m, _)| m).collect();
    println!("fitted {} GPs on N = {n} in {:.1?}", models.len(), start.elapsed());
    for (i, m) in models.iter().enumerate() {
        println!("  output {i}: sf2 {:.3e} ls {:?}", m.kernel.output_variance, m.kernel.lengthscales);
    }

    // the whole vector field is learned: the known part is zero
    let lin = linearize_at(&models, &DMatrix::zeros(6, 8), &x_e, &u_e, 0.99)?;
    println!("nominal A:\n{:.3}nominal B:\n{:.3}", lin.a_nominal, lin.b_nominal);
    println!("bound A:\n{:.3}bound B:\n{:.3}", lin.a_bound, lin.b_bound);
    let sys = to_norm_bounded(&lin);

    let start = Instant::now();
    match min_control_frequency(&sys, &McfOptions::default()) {
        Ok(design) => {
            println!(
                "T_s_max = {:.4e} s, minimum control frequency = {:.2} Hz (eps = {:.3e}) in {:.1?}",
                design.t_s_max,
                design.min_frequency,
                design.eps_used.0,
                start.elapsed()
            );
            println!("gain K:\n{:.4}", design.gain);
        }
        Err(e) => println!("no certificate: {e} ({:.1?})", start.elapsed()),
    }
    Ok(())
}
