//! Command-line front end. Every stage reads and writes JSON/CSV files so the
//! pipeline can be run one step at a time or as whole sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use sdgp::experiment::{
    run_cost_grid, run_mcf_vs_n, run_trajectories, trial_dataset, write_trajectory, ExperimentConfig,
};
use sdgp::gp::{fit_all, Dataset, FitConfig, GpCheckpoint, GpModel};
use sdgp::linearize::{linearize_at, to_norm_bounded, NormBoundedSystem};
use sdgp::render::render_outputs;
use sdgp::sdp::{min_control_frequency, optimize_performance, ControllerDesign};
use sdgp::sim::{evaluate_cost, simulate_closed_loop, SampledController};

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "sdgp", version, about = "Learned sampled-data controllers with a certified minimum control frequency")]
struct Cli {
    /// Experiment config (JSON); omitted fields take the quadrotor defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective config as JSON.
    Config,
    /// Sample noisy derivative data from the configured plant -> dataset.csv
    Generate {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Fit one GP per state derivative -> models.json
    Fit {
        #[arg(long)]
        data: PathBuf,
    },
    /// Uncertain linearization at the equilibrium -> linearization.json, system.json
    Linearize {
        #[arg(long)]
        models: PathBuf,
    },
    /// Minimum control frequency and a certified gain -> design.json
    Mcf {
        #[arg(long)]
        system: PathBuf,
    },
    /// Cost-optimal robust gain at a fixed sampling bound -> synthesis.json
    Synthesize {
        #[arg(long)]
        system: PathBuf,
        /// Sampling-interval bound in seconds.
        #[arg(long)]
        ts: f64,
    },
    /// Closed-loop run of a design from the config's x0 -> trajectory.csv
    Simulate {
        #[arg(long)]
        design: PathBuf,
        /// Sampling interval; defaults to the design's bound.
        #[arg(long)]
        ts: Option<f64>,
    },
    /// Sweeps over dataset sizes, frequencies and trials.
    Experiment {
        #[command(subcommand)]
        kind: ExperimentKind,
    },
    /// Turn result CSVs into SVG plots.
    Render {
        /// Results directory; defaults to the output directory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ExperimentKind {
    /// Minimum control frequency against dataset size -> mcf_vs_n.csv, mcf_vs_n_summary.csv
    McfVsN,
    /// Mean closed-loop cost over (N, f_c) -> cost_grid.csv, cost_grid_trials.csv
    CostGrid,
    /// Trajectories at multiples of the minimum control frequency
    Trajectories,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if cli.jobs.is_some() {
        cfg.jobs = cli.jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value)?)?;
    Ok(path)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = cfg.output_dir.clone();
    match &cli.command {
        Command::Config => println!("{}", cfg.to_json()?),
        Command::Generate { n } => {
            let data = trial_dataset(&cfg, 0, n.unwrap_or(cfg.trajectory_dataset_size))?;
            fs::create_dir_all(&out)?;
            let path = out.join("dataset.csv");
            data.write_csv(fs::File::create(&path)?)?;
            println!("{} samples -> {}", data.len(), path.display());
        }
        Command::Fit { data } => {
            let data = Dataset::read_csv(fs::File::open(data)?)?;
            let fit = FitConfig {
                seed: cfg.seed,
                ..cfg.fit.clone()
            };
            let fitted = fit_all(&data, &fit)?;
            for (_, r) in &fitted {
                println!(
                    "output {}: log marginal likelihood {:.4}, {} iterations, converged {}",
                    r.output_index, r.log_marginal_likelihood, r.iterations, r.converged
                );
            }
            let checkpoints: Vec<GpCheckpoint> = fitted.iter().map(|(m, _)| m.to_checkpoint()).collect();
            println!("-> {}", write_json(&out, "models.json", &checkpoints)?.display());
        }
        Command::Linearize { models } => {
            let checkpoints: Vec<GpCheckpoint> = read_json(models)?;
            let models = checkpoints.into_iter().map(GpModel::from_checkpoint).collect::<std::result::Result<Vec<_>, _>>()?;
            let (n, m) = (cfg.state_dim(), cfg.input_dim());
            let lin = linearize_at(&models, &DMatrix::zeros(n, n + m), &cfg.x_e, &cfg.u_e, cfg.prob_per_row)?;
            println!("nominal A:{:.4}nominal B:{:.4}", lin.a_nominal, lin.b_nominal);
            println!("joint probability {:.4}", lin.joint_probability);
            write_json(&out, "linearization.json", &lin)?;
            println!("-> {}", write_json(&out, "system.json", &to_norm_bounded(&lin))?.display());
        }
        Command::Mcf { system } => {
            let sys: NormBoundedSystem = read_json(system)?;
            let design = min_control_frequency(&sys, &cfg.mcf)?;
            println!(
                "T_s,max = {:.6e} s, minimum control frequency {:.4} Hz, eps = {:.3e}",
                design.t_s_max, design.min_frequency, design.eps_used.0
            );
            println!("K ={:.6}", design.gain);
            println!("-> {}", write_json(&out, "design.json", &design)?.display());
        }
        Command::Synthesize { system, ts } => {
            let sys: NormBoundedSystem = read_json(system)?;
            let (q, r) = cfg.cost_weights();
            let (eta, design) = optimize_performance(&sys, *ts, &q, &r, &cfg.performance)?;
            println!("cost bound eta = {eta:.6e} at T_s = {ts} s");
            println!("K ={:.6}", design.gain);
            println!("-> {}", write_json(&out, "synthesis.json", &design)?.display());
        }
        Command::Simulate { design, ts } => {
            let design: ControllerDesign = read_json(design)?;
            let t_s = ts.unwrap_or(design.t_s_max);
            let ctrl = SampledController::new(design.gain, cfg.x_e.clone(), cfg.u_e.clone(), t_s, cfg.sampling_policy)?;
            let plant = cfg.plant();
            let traj = simulate_closed_loop(plant.as_ref(), &ctrl, &cfg.x0, cfg.horizon, None, cfg.seed)?;
            let (q, r) = cfg.cost_weights();
            let cost = evaluate_cost(&traj, &q, &r, &cfg.x_e, &cfg.u_e)?;
            fs::create_dir_all(&out)?;
            let path = out.join("trajectory.csv");
            write_trajectory(&path, &cfg.provenance(), &traj)?;
            println!("status {:?}, cost {cost:.6}, final state {:?}", traj.status, traj.final_state());
            println!("-> {}", path.display());
            if traj.is_diverged() {
                return Err("closed loop diverged".into());
            }
        }
        Command::Experiment { kind } => {
            let provenance = cfg.provenance();
            let failed = match kind {
                ExperimentKind::McfVsN => {
                    let res = run_mcf_vs_n(&cfg)?;
                    res.write(&out, &provenance)?;
                    for s in &res.summary {
                        println!(
                            "N = {}: median minimum control frequency {:.3} Hz, feasible fraction {:.2}",
                            s.n, s.median_f_c_min_hz, s.feasible_fraction
                        );
                    }
                    res.trials.iter().filter(|t| t.status.starts_with("error")).count()
                }
                ExperimentKind::CostGrid => {
                    let res = run_cost_grid(&cfg)?;
                    res.write(&out, &provenance)?;
                    for c in &res.cells {
                        println!(
                            "N = {}, {:.2} Hz: mean cost {}, feasible fraction {:.2}",
                            c.n,
                            c.f_c_hz,
                            c.mean_cost.map_or("-".into(), |v| format!("{v:.4}")),
                            c.feasible_fraction
                        );
                    }
                    res.trials.iter().filter(|t| t.status.starts_with("error")).count()
                }
                ExperimentKind::Trajectories => {
                    let runs = run_trajectories(&cfg, &out)?;
                    for r in &runs {
                        println!("xi {} trial {}: {} (final deviation {:?})", r.xi, r.trial, r.status, r.final_deviation);
                    }
                    runs.iter().filter(|r| r.status.starts_with("error")).count()
                }
            };
            println!("results in {}", out.display());
            if failed > 0 {
                return Err(format!("{failed} sweep cells failed; see the status column").into());
            }
        }
        Command::Render { dir } => {
            let dir = dir.clone().unwrap_or(out);
            let report = render_outputs(&dir)?;
            if let Some(note) = report.note {
                println!("{note}");
            }
            for p in report.written {
                println!("-> {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .parse_default_env()
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
