//! Renders the CSVs of a results directory into SVG plots.
//!
//! Run with `cargo run --release --example render_results -- <results dir>`.

use std::path::PathBuf;

use sdgp::render::render_outputs;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map_or_else(|| PathBuf::from("results"), PathBuf::from);
    let report = render_outputs(&dir)?;
    if let Some(note) = report.note {
        println!("{note}");
    }
    for p in report.written {
        println!("-> {}", p.display());
    }
    Ok(())
}
