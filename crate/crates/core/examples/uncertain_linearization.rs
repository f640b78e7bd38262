//! Learns the quadrotor's Jacobian at hover from data of growing size and
//! shows how the elementwise uncertainty bounds shrink.
//!
//! Run with `cargo run --release --example uncertain_linearization`.

use nalgebra::DMatrix;
use sdgp::gp::{fit_all, FitConfig};
use sdgp::linearize::{linearize_at, to_norm_bounded};
use sdgp::sim::{generate_dataset, InputBox, Quadrotor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let plant = Quadrotor::default();
    let x_e = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let u_e = plant.params.hover_input();
    let (a, b) = plant.jacobian(&x_e, &u_e);
    println!("exact A:{a:.3}exact B:{b:.3}");

    for n in [100, 300, 600] {
        let data = generate_dataset(&plant, &InputBox::quadrotor_default(), n, &[0.1; 6], 11)?;
        let fit = FitConfig {
            restarts: 2,
            noise_from_dataset: true,
            max_points: Some(300),
            seed: 11,
            ..FitConfig::default()
        };
        let models: Vec<_> = fit_all(&data, &fit)?.into_iter().map(|(m, _)| m).collect();
        let lin = linearize_at(&models, &DMatrix::zeros(6, 8), &x_e, &u_e, 0.99)?;
        let err = (&lin.a_nominal - &a).amax().max((&lin.b_nominal - &b).amax());
        println!(
            "N = {n}: max |error| {err:.3}, max bound on A {:.3}, on B {:.3}, joint probability {:.3}",
            lin.a_bound.amax(),
            lin.b_bound.amax(),
            lin.joint_probability
        );
        let sys = to_norm_bounded(&lin);
        println!("  norm-bounded form: H {:?}, E {:?}, F {:?}", sys.h.shape(), sys.e.shape(), sys.f.shape());
    }
    Ok(())
}
