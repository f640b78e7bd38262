//! A reduced data-vs-frequency sweep on the quadrotor written to CSV, then
//! rendered to SVG.
//!
//! Run with `cargo run --release --example sweep -- [output dir]`.

use std::path::PathBuf;

use sdgp::experiment::{run_cost_grid, run_mcf_vs_n, run_trajectories, ExperimentConfig};
use sdgp::render::render_outputs;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::init();
    let out = std::env::args().nth(1).map_or_else(|| PathBuf::from("sweep_results"), PathBuf::from);
    let cfg = ExperimentConfig {
        dataset_sizes: vec![200, 400],
        trials: 2,
        frequencies_hz: vec![15.0, 25.0],
        frequency_multipliers: vec![1.0, 2.0],
        trajectory_dataset_size: 400,
        output_dir: out.clone(),
        ..ExperimentConfig::default()
    };
    let provenance = cfg.provenance();

    let mcf = run_mcf_vs_n(&cfg)?;
    mcf.write(&out, &provenance)?;
    for s in &mcf.summary {
        println!("N = {}: median {:.2} Hz, feasible {:.2}", s.n, s.median_f_c_min_hz, s.feasible_fraction);
    }
    let grid = run_cost_grid(&cfg)?;
    grid.write(&out, &provenance)?;
    for c in &grid.cells {
        println!("N = {}, {:.1} Hz: mean cost {:?}", c.n, c.f_c_hz, c.mean_cost);
    }
    for r in run_trajectories(&cfg, &out)? {
        println!("xi {} trial {}: {}", r.xi, r.trial, r.status);
    }
    for p in render_outputs(&out)?.written {
        println!("-> {}", p.display());
    }
    Ok(())
}
