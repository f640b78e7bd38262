//! Sweep harness: configuration, the data-vs-frequency sweep, the cost grid
//! and closed-loop trajectories at multiples of the minimum control
//! frequency. Every CSV starts with a provenance comment carrying the crate
//! version and a hash of the configuration.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gp::{fit_all, Dataset, FitConfig, GpError, GpModel};
use crate::linearize::{linearize_at, to_norm_bounded, LinearizeError, NormBoundedSystem};
use crate::matrix_json;
use crate::numerics::SymMatrix;
use crate::sdp::{min_control_frequency, optimize_performance, ControllerDesign, McfOptions, PerformanceOptions, SdpError};
use crate::sim::{
    evaluate_cost, generate_dataset, simulate_closed_loop, InputBox, LinearPlant, Plant, Quadrotor, QuadrotorParams,
    SampledController, SamplingPolicy, SimError, Trajectory,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Linearize(#[from] LinearizeError),
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PlantConfig {
    Quadrotor {
        params: QuadrotorParams,
    },
    /// `ẋ = A(x − x_e) + B(u − u_e)`
    Linear {
        #[serde(with = "matrix_json")]
        a: DMatrix<f64>,
        #[serde(with = "matrix_json")]
        b: DMatrix<f64>,
    },
}

/// Where the uncertain linear model comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    /// GP regression on generated data (the known model part is zero).
    Learned,
    /// The plant's exact Jacobian, without uncertainty.
    Analytic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub plant: PlantConfig,
    pub model_source: ModelSource,
    pub input_box: InputBox,
    pub noise_stddev: Vec<f64>,
    pub x_e: Vec<f64>,
    pub u_e: Vec<f64>,
    /// Initial state for trajectory runs.
    pub x0: Vec<f64>,
    /// Initial states averaged over in the cost grid.
    pub initial_conditions: Vec<Vec<f64>>,
    pub prob_per_row: f64,
    pub dataset_sizes: Vec<usize>,
    pub trials: usize,
    pub fit: FitConfig,
    pub mcf: McfOptions,
    pub performance: PerformanceOptions,
    /// `ξ` values: trajectories run at `ξ · f_c,min`.
    pub frequency_multipliers: Vec<f64>,
    /// Control frequencies of the cost grid.
    pub frequencies_hz: Vec<f64>,
    pub cost_q_diag: Vec<f64>,
    pub cost_r_diag: Vec<f64>,
    pub horizon: f64,
    pub sampling_policy: SamplingPolicy,
    /// Dataset size used for trajectory runs.
    pub trajectory_dataset_size: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; `None` uses the available parallelism.
    pub jobs: Option<usize>,
}

impl Default for ExperimentConfig {
    /// The planar quadrotor hovering at `x = 1 m`.
    fn default() -> Self {
        let params = QuadrotorParams::default();
        let x_e = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let offset = |dx: f64, dz: f64| vec![1.0 + dx, 0.0, dz, 0.0, 0.0, 0.0];
        Self {
            plant: PlantConfig::Quadrotor { params },
            model_source: ModelSource::Learned,
            input_box: InputBox::quadrotor_default(),
            noise_stddev: vec![0.1; 6],
            x_e,
            u_e: params.hover_input().to_vec(),
            x0: offset(0.2, 0.2),
            // the stated start, its mirror images in x and z, and the offset
            // moved entirely to z
            initial_conditions: vec![
                offset(0.2, 0.2),
                offset(-0.2, 0.2),
                offset(0.2, -0.2),
                offset(-0.2, -0.2),
                offset(0.0, 0.2),
            ],
            prob_per_row: 0.99,
            dataset_sizes: vec![200, 400, 800],
            trials: 5,
            fit: FitConfig {
                restarts: 2,
                noise_from_dataset: true,
                max_points: Some(300),
                ..FitConfig::default()
            },
            mcf: McfOptions::default(),
            performance: PerformanceOptions::default(),
            frequency_multipliers: vec![1.0, 1.25, 1.5, 2.0],
            frequencies_hz: (0..8).map(|k| 10.0 + 20.0 * k as f64 / 7.0).collect(),
            cost_q_diag: vec![100.0, 1.0, 100.0, 1.0, 100.0, 1.0],
            cost_r_diag: vec![0.01, 0.01],
            horizon: 10.0,
            sampling_policy: SamplingPolicy::Periodic,
            trajectory_dataset_size: 600,
            seed: 0,
            output_dir: PathBuf::from("results"),
            jobs: None,
        }
    }
}

fn invalid(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::InvalidConfig(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String, ExperimentError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn state_dim(&self) -> usize {
        self.x_e.len()
    }

    pub fn input_dim(&self) -> usize {
        self.u_e.len()
    }

    /// Checks everything the sweeps rely on; run before any computation.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let (n, m) = (self.state_dim(), self.input_dim());
        match &self.plant {
            PlantConfig::Quadrotor { params } => {
                if !params.is_valid() {
                    return Err(invalid("quadrotor parameters must be positive"));
                }
                if (n, m) != (6, 2) {
                    return Err(invalid(format!("quadrotor needs a 6-state, 2-input equilibrium, got ({n}, {m})")));
                }
            }
            PlantConfig::Linear { a, b } => {
                if a.shape() != (n, n) || b.shape() != (n, m) {
                    return Err(invalid(format!(
                        "linear plant A {:?}, B {:?} does not match equilibrium ({n}, {m})",
                        a.shape(),
                        b.shape()
                    )));
                }
            }
        }
        if n == 0 || m == 0 {
            return Err(invalid("state and input dimensions must be positive"));
        }
        InputBox::new(self.input_box.lower.clone(), self.input_box.upper.clone())
            .map_err(|e| invalid(e.to_string()))?;
        if self.input_box.dim() != n + m {
            return Err(invalid(format!("input box has {} coordinates, need {}", self.input_box.dim(), n + m)));
        }
        if self.noise_stddev.len() != n || self.noise_stddev.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(invalid("noise_stddev needs one finite nonnegative entry per state"));
        }
        if self.x0.len() != n || self.initial_conditions.iter().any(|x| x.len() != n) {
            return Err(invalid("initial states must match the state dimension"));
        }
        if self.initial_conditions.is_empty() {
            return Err(invalid("initial_conditions is empty"));
        }
        if !(self.prob_per_row > 0.0 && self.prob_per_row < 1.0) {
            return Err(invalid(format!("prob_per_row must lie in (0, 1), got {}", self.prob_per_row)));
        }
        if self.dataset_sizes.is_empty() || self.dataset_sizes.iter().any(|&s| s < 2) {
            return Err(invalid("dataset_sizes must be nonempty with every size at least 2"));
        }
        if self.trajectory_dataset_size < 2 {
            return Err(invalid("trajectory_dataset_size must be at least 2"));
        }
        if self.trials == 0 {
            return Err(invalid("trials must be at least 1"));
        }
        if self.mcf.eps_grid.is_empty() || self.mcf.eps_grid.iter().any(|e| !(*e > 0.0)) {
            return Err(invalid("mcf.eps_grid must be nonempty and positive"));
        }
        let perf_grid = self.performance.eps1_grid.iter().chain(&self.performance.eps2_grid);
        if self.performance.eps1_grid.is_empty()
            || self.performance.eps2_grid.is_empty()
            || perf_grid.clone().any(|e| !(*e > 0.0))
        {
            return Err(invalid("performance ε grids must be nonempty and positive"));
        }
        if self.frequency_multipliers.is_empty() || self.frequency_multipliers.iter().any(|x| !(*x >= 1.0)) {
            return Err(invalid("frequency_multipliers must be nonempty with every ξ ≥ 1"));
        }
        if self.frequencies_hz.is_empty() {
            return Err(invalid("frequencies_hz is empty"));
        }
        if self.frequencies_hz.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(invalid("frequencies must be positive"));
        }
        if self.cost_q_diag.len() != n || self.cost_r_diag.len() != m {
            return Err(invalid("cost weights must match the state and input dimensions"));
        }
        if self.cost_q_diag.iter().chain(&self.cost_r_diag).any(|w| !(*w > 0.0)) {
            return Err(invalid("cost weights must be positive"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(invalid("horizon must be positive"));
        }
        if let SamplingPolicy::UniformRandom { lower_fraction } = self.sampling_policy {
            if !(lower_fraction > 0.0 && lower_fraction <= 1.0) {
                return Err(invalid("sampling lower_fraction must lie in (0, 1]"));
            }
        }
        if self.jobs == Some(0) {
            return Err(invalid("jobs must be at least 1"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `# sdgp <version> config_hash=<hash>`
    pub fn provenance(&self) -> String {
        format!("# sdgp {} config_hash={}", env!("CARGO_PKG_VERSION"), self.hash())
    }

    pub fn plant(&self) -> Box<dyn Plant> {
        match &self.plant {
            PlantConfig::Quadrotor { params } => Box::new(Quadrotor::new(*params)),
            PlantConfig::Linear { a, b } => Box::new(
                LinearPlant::new(a.clone(), b.clone(), self.x_e.clone(), self.u_e.clone())
                    .expect("validated dimensions"),
            ),
        }
    }

    /// Exact Jacobians `(A, B)` of the plant at the equilibrium.
    pub fn jacobian(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        match &self.plant {
            PlantConfig::Quadrotor { params } => Quadrotor::new(*params).jacobian(&self.x_e, &self.u_e),
            PlantConfig::Linear { a, b } => (a.clone(), b.clone()),
        }
    }

    pub fn cost_weights(&self) -> (SymMatrix, SymMatrix) {
        (SymMatrix::from_diagonal(&self.cost_q_diag), SymMatrix::from_diagonal(&self.cost_r_diag))
    }

    fn pool(&self) -> Result<rayon::ThreadPool, ExperimentError> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(j) = self.jobs {
            b = b.num_threads(j);
        }
        b.build().map_err(|e| ExperimentError::Pool(e.to_string()))
    }
}

/// Deterministic per-cell seed from the base seed and cell coordinates.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    // splitmix64 finalizer over the running state
    let mut x = base;
    for &t in tags.iter().chain(std::iter::once(&0x5eed)) {
        x = x.wrapping_add(t).wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

/// Dataset of `size` points for a trial. Smaller sizes of the same trial are
/// prefixes of larger ones, so a trial's data only grows with `N`.
pub fn trial_dataset(config: &ExperimentConfig, trial: usize, size: usize) -> Result<Dataset, ExperimentError> {
    let max = config.dataset_sizes.iter().copied().chain([config.trajectory_dataset_size, size]).max().unwrap_or(size);
    let plant = config.plant();
    let data = generate_dataset(
        plant.as_ref(),
        &config.input_box,
        max,
        &config.noise_stddev,
        derive_seed(config.seed, &[1, trial as u64]),
    )?;
    Ok(data.truncated(size))
}

/// Fits one GP per state derivative.
pub fn fit_models(config: &ExperimentConfig, data: &Dataset, trial: usize) -> Result<Vec<GpModel>, ExperimentError> {
    let fit = FitConfig {
        seed: derive_seed(config.seed, &[2, trial as u64, data.len() as u64]),
        ..config.fit.clone()
    };
    Ok(fit_all(data, &fit)?.into_iter().map(|(m, _)| m).collect())
}

/// The uncertain linear model for one trial and dataset size.
pub fn uncertain_system(config: &ExperimentConfig, trial: usize, size: usize) -> Result<NormBoundedSystem, ExperimentError> {
    match config.model_source {
        ModelSource::Analytic => {
            let (a, b) = config.jacobian();
            Ok(NormBoundedSystem::certain(a, b))
        }
        ModelSource::Learned => {
            let data = trial_dataset(config, trial, size)?;
            let models = fit_models(config, &data, trial)?;
            let (n, m) = (config.state_dim(), config.input_dim());
            let lin = linearize_at(&models, &DMatrix::zeros(n, n + m), &config.x_e, &config.u_e, config.prob_per_row)?;
            Ok(to_norm_bounded(&lin))
        }
    }
}

/// Simulates `design`'s gain at sampling bound `t_s` from each initial
/// condition and returns the mean cost; `None` if any run diverges.
pub fn mean_cost(
    config: &ExperimentConfig,
    gain: &DMatrix<f64>,
    t_s: f64,
    initial_conditions: &[Vec<f64>],
    seed: u64,
) -> Result<Option<f64>, ExperimentError> {
    let plant = config.plant();
    let ctrl = SampledController::new(gain.clone(), config.x_e.clone(), config.u_e.clone(), t_s, config.sampling_policy)?;
    let (q, r) = config.cost_weights();
    let mut total = 0.0;
    for (i, x0) in initial_conditions.iter().enumerate() {
        let traj = simulate_closed_loop(plant.as_ref(), &ctrl, x0, config.horizon, None, derive_seed(seed, &[i as u64]))?;
        if traj.is_diverged() {
            return Ok(None);
        }
        total += evaluate_cost(&traj, &q, &r, &config.x_e, &config.u_e)?;
    }
    Ok(Some(total / initial_conditions.len() as f64))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

fn status_of(e: &ExperimentError) -> String {
    match e {
        ExperimentError::Sdp(SdpError::InfeasibleAtAllFrequencies { .. } | SdpError::InfeasibleAtGivenTs { .. }) => {
            "infeasible".into()
        }
        other => format!("error: {}", other.to_string().replace([',', '\n'], ";")),
    }
}

fn write_with_header(path: &Path, provenance: &str, rows: Vec<Vec<String>>) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::File::create(path)?;
    writeln!(file, "{provenance}")?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

// ---------------------------------------------------------------------------
// Minimum control frequency vs. amount of data

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McfTrial {
    pub n: usize,
    pub trial: usize,
    /// `feasible`, `infeasible` or `error: <message>`
    pub status: String,
    pub f_c_min_hz: Option<f64>,
    pub t_s_max_s: Option<f64>,
    pub eps_used: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McfSummary {
    pub n: usize,
    /// Median over trials with infeasible trials counted as an infinite
    /// frequency requirement.
    pub median_f_c_min_hz: f64,
    pub feasible_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McfVsN {
    pub trials: Vec<McfTrial>,
    pub summary: Vec<McfSummary>,
}

impl McfVsN {
    pub const TRIALS_FILE: &'static str = "mcf_vs_n.csv";
    pub const SUMMARY_FILE: &'static str = "mcf_vs_n_summary.csv";

    pub fn write(&self, dir: &Path, provenance: &str) -> Result<(), ExperimentError> {
        let mut rows = vec![["N", "trial", "status", "f_c_min_hz", "t_s_max_s", "eps_used"].map(String::from).to_vec()];
        rows.extend(self.trials.iter().map(|t| {
            vec![
                t.n.to_string(),
                t.trial.to_string(),
                t.status.clone(),
                fmt_opt(t.f_c_min_hz),
                fmt_opt(t.t_s_max_s),
                fmt_opt(t.eps_used),
            ]
        }));
        write_with_header(&dir.join(Self::TRIALS_FILE), provenance, rows)?;
        let mut rows = vec![["N", "median_f_c_min_hz", "feasible_fraction"].map(String::from).to_vec()];
        rows.extend(
            self.summary
                .iter()
                .map(|s| vec![s.n.to_string(), format!("{}", s.median_f_c_min_hz), format!("{}", s.feasible_fraction)]),
        );
        write_with_header(&dir.join(Self::SUMMARY_FILE), provenance, rows)
    }
}

fn summarize(sizes: &[usize], trials: &[McfTrial]) -> Vec<McfSummary> {
    sizes
        .iter()
        .map(|&n| {
            let mut f: Vec<f64> = trials
                .iter()
                .filter(|t| t.n == n)
                .map(|t| t.f_c_min_hz.unwrap_or(f64::INFINITY))
                .collect();
            let feasible = f.iter().filter(|v| v.is_finite()).count();
            let fraction = feasible as f64 / f.len().max(1) as f64;
            McfSummary {
                n,
                median_f_c_min_hz: if f.is_empty() { f64::INFINITY } else { median(&mut f) },
                feasible_fraction: fraction,
            }
        })
        .collect()
}

/// For every dataset size and trial: learn, linearize, find the minimum
/// control frequency. Failures are recorded per trial; the sweep continues.
pub fn run_mcf_vs_n(config: &ExperimentConfig) -> Result<McfVsN, ExperimentError> {
    config.validate()?;
    let cells: Vec<(usize, usize)> = config
        .dataset_sizes
        .iter()
        .flat_map(|&n| (0..config.trials).map(move |t| (n, t)))
        .collect();
    let trials: Vec<McfTrial> = config.pool()?.install(|| {
        cells
            .par_iter()
            .map(|&(n, trial)| {
                let outcome = uncertain_system(config, trial, n)
                    .and_then(|sys| Ok(min_control_frequency(&sys, &config.mcf)?));
                log::info!("mcf-vs-n: N = {n}, trial {trial}: {:?}", outcome.as_ref().map(|d| d.min_frequency));
                match outcome {
                    Ok(d) => McfTrial {
                        n,
                        trial,
                        status: "feasible".into(),
                        f_c_min_hz: Some(d.min_frequency),
                        t_s_max_s: Some(d.t_s_max),
                        eps_used: Some(d.eps_used.0),
                    },
                    Err(e) => McfTrial {
                        n,
                        trial,
                        status: status_of(&e),
                        f_c_min_hz: None,
                        t_s_max_s: None,
                        eps_used: None,
                    },
                }
            })
            .collect()
    });
    let summary = summarize(&config.dataset_sizes, &trials);
    Ok(McfVsN { trials, summary })
}

// ---------------------------------------------------------------------------
// Cost over (N, f_c)

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTrial {
    pub n: usize,
    pub trial: usize,
    pub f_c_hz: f64,
    pub status: String,
    pub mean_cost: Option<f64>,
    pub eta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostCell {
    pub n: usize,
    pub f_c_hz: f64,
    pub feasible_fraction: f64,
    /// Mean over feasible trials of the per-trial mean cost.
    pub mean_cost: Option<f64>,
    pub median_cost: Option<f64>,
    /// Mean of the optimized cost bound over feasible trials.
    pub eta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostGrid {
    pub trials: Vec<CostTrial>,
    pub cells: Vec<CostCell>,
}

impl CostGrid {
    pub const CELLS_FILE: &'static str = "cost_grid.csv";
    pub const TRIALS_FILE: &'static str = "cost_grid_trials.csv";

    pub fn write(&self, dir: &Path, provenance: &str) -> Result<(), ExperimentError> {
        let mut rows = vec![["N", "f_c_hz", "feasible_fraction", "mean_cost", "eta"].map(String::from).to_vec()];
        rows.extend(self.cells.iter().map(|c| {
            vec![
                c.n.to_string(),
                format!("{}", c.f_c_hz),
                format!("{}", c.feasible_fraction),
                fmt_opt(c.mean_cost),
                fmt_opt(c.eta),
            ]
        }));
        write_with_header(&dir.join(Self::CELLS_FILE), provenance, rows)?;
        let mut rows = vec![["N", "trial", "f_c_hz", "status", "mean_cost", "eta"].map(String::from).to_vec()];
        rows.extend(self.trials.iter().map(|t| {
            vec![
                t.n.to_string(),
                t.trial.to_string(),
                format!("{}", t.f_c_hz),
                t.status.clone(),
                fmt_opt(t.mean_cost),
                fmt_opt(t.eta),
            ]
        }));
        write_with_header(&dir.join(Self::TRIALS_FILE), provenance, rows)
    }
}

/// Cost-optimal design at sampling bound `t_s` and its simulated mean cost.
pub fn cost_at(
    config: &ExperimentConfig,
    sys: &NormBoundedSystem,
    t_s: f64,
    initial_conditions: &[Vec<f64>],
    seed: u64,
) -> Result<(ControllerDesign, Option<f64>), ExperimentError> {
    let (q, r) = config.cost_weights();
    let (_, design) = optimize_performance(sys, t_s, &q, &r, &config.performance)?;
    let cost = mean_cost(config, &design.gain, t_s, initial_conditions, seed)?;
    Ok((design, cost))
}

/// For every dataset size, trial and control frequency: optimize the cost
/// bound, simulate the initial conditions and average the cost.
pub fn run_cost_grid(config: &ExperimentConfig) -> Result<CostGrid, ExperimentError> {
    config.validate()?;
    let cells: Vec<(usize, usize)> = config
        .dataset_sizes
        .iter()
        .flat_map(|&n| (0..config.trials).map(move |t| (n, t)))
        .collect();
    let per_cell: Vec<Vec<CostTrial>> = config.pool()?.install(|| {
        cells
            .par_iter()
            .map(|&(n, trial)| {
                let sys = uncertain_system(config, trial, n);
                config
                    .frequencies_hz
                    .iter()
                    .map(|&f_c| {
                        let (status, mean_cost, eta) = match &sys {
                            Err(e) => (status_of(e), None, None),
                            Ok(sys) => {
                                let seed = derive_seed(config.seed, &[3, trial as u64]);
                                let outcome = cost_at(config, sys, 1.0 / f_c, &config.initial_conditions, seed);
                                log::info!("cost-grid: N = {n}, trial {trial}, {f_c:.2} Hz: {:?}", outcome.as_ref().map(|o| o.1));
                                match outcome {
                                    Ok((d, Some(c))) => ("feasible".to_string(), Some(c), d.eta),
                                    Ok((d, None)) => ("diverged".to_string(), None, d.eta),
                                    Err(e) => (status_of(&e), None, None),
                                }
                            }
                        };
                        CostTrial {
                            n,
                            trial,
                            f_c_hz: f_c,
                            status,
                            mean_cost,
                            eta,
                        }
                    })
                    .collect()
            })
            .collect()
    });
    let mut trials: Vec<CostTrial> = per_cell.into_iter().flatten().collect();
    trials.sort_by(|a, b| a.n.cmp(&b.n).then(a.f_c_hz.total_cmp(&b.f_c_hz)).then(a.trial.cmp(&b.trial)));
    let mut out = Vec::new();
    for &n in &config.dataset_sizes {
        for &f_c in &config.frequencies_hz {
            let cell: Vec<&CostTrial> = trials.iter().filter(|t| t.n == n && t.f_c_hz == f_c).collect();
            let mut costs: Vec<f64> = cell.iter().filter_map(|t| t.mean_cost).collect();
            let etas: Vec<f64> = cell.iter().filter(|t| t.mean_cost.is_some()).filter_map(|t| t.eta).collect();
            let k = costs.len();
            out.push(CostCell {
                n,
                f_c_hz: f_c,
                feasible_fraction: k as f64 / cell.len().max(1) as f64,
                mean_cost: (k > 0).then(|| costs.iter().sum::<f64>() / k as f64),
                median_cost: (k > 0).then(|| median(&mut costs)),
                eta: (!etas.is_empty()).then(|| etas.iter().sum::<f64>() / etas.len() as f64),
            });
        }
    }
    Ok(CostGrid { trials, cells: out })
}

// ---------------------------------------------------------------------------
// Trajectories at multiples of the minimum control frequency

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRun {
    pub xi: f64,
    pub trial: usize,
    pub f_c_hz: Option<f64>,
    pub status: String,
    pub final_deviation: Option<f64>,
    pub file: Option<String>,
}

pub fn trajectory_file_name(xi: f64, trial: usize) -> String {
    format!("trajectory_xi{xi}_trial{trial}.csv")
}

/// Per trial: minimum control frequency from `trajectory_dataset_size`
/// points, then for every `ξ` a cost-optimal gain at `T_s,max/ξ` simulated
/// from `x0`. Trajectory CSVs are written into `dir`.
pub fn run_trajectories(config: &ExperimentConfig, dir: &Path) -> Result<Vec<TrajectoryRun>, ExperimentError> {
    config.validate()?;
    fs::create_dir_all(dir)?;
    let provenance = config.provenance();
    let plant = config.plant();
    let (q, r) = config.cost_weights();
    let per_trial: Vec<Vec<TrajectoryRun>> = config.pool()?.install(|| {
        (0..config.trials)
            .into_par_iter()
            .map(|trial| {
                let mcf = uncertain_system(config, trial, config.trajectory_dataset_size)
                    .and_then(|sys| Ok((min_control_frequency(&sys, &config.mcf)?, sys)));
                config
                    .frequency_multipliers
                    .iter()
                    .map(|&xi| {
                        let failed = |status: String| TrajectoryRun {
                            xi,
                            trial,
                            f_c_hz: None,
                            status,
                            final_deviation: None,
                            file: None,
                        };
                        let (design, sys) = match &mcf {
                            Ok(v) => v,
                            Err(e) => return failed(status_of(e)),
                        };
                        let t_s = design.t_s_max / xi;
                        let run = || -> Result<Trajectory, ExperimentError> {
                            let (_, d) = optimize_performance(sys, t_s, &q, &r, &config.performance)?;
                            let ctrl = SampledController::new(
                                d.gain,
                                config.x_e.clone(),
                                config.u_e.clone(),
                                t_s,
                                config.sampling_policy,
                            )?;
                            Ok(simulate_closed_loop(
                                plant.as_ref(),
                                &ctrl,
                                &config.x0,
                                config.horizon,
                                None,
                                derive_seed(config.seed, &[4, trial as u64]),
                            )?)
                        };
                        match run() {
                            Ok(traj) => {
                                let name = trajectory_file_name(xi, trial);
                                let written = write_trajectory(&dir.join(&name), &provenance, &traj);
                                let dev = traj
                                    .final_state()
                                    .iter()
                                    .zip(&config.x_e)
                                    .map(|(a, b)| (a - b).powi(2))
                                    .sum::<f64>()
                                    .sqrt();
                                TrajectoryRun {
                                    xi,
                                    trial,
                                    f_c_hz: Some(1.0 / t_s),
                                    status: match (written, traj.is_diverged()) {
                                        (Err(e), _) => status_of(&e),
                                        (Ok(()), true) => "diverged".into(),
                                        (Ok(()), false) => "completed".into(),
                                    },
                                    final_deviation: Some(dev),
                                    file: Some(name),
                                }
                            }
                            Err(e) => failed(status_of(&e)),
                        }
                    })
                    .collect()
            })
            .collect()
    });
    let runs: Vec<TrajectoryRun> = per_trial.into_iter().flatten().collect();
    let mut rows = vec![["xi", "trial", "f_c_hz", "status", "final_deviation", "file"].map(String::from).to_vec()];
    rows.extend(runs.iter().map(|r| {
        vec![
            format!("{}", r.xi),
            r.trial.to_string(),
            fmt_opt(r.f_c_hz),
            r.status.clone(),
            fmt_opt(r.final_deviation),
            r.file.clone().unwrap_or_default(),
        ]
    }));
    write_with_header(&dir.join("trajectories.csv"), &provenance, rows)?;
    Ok(runs)
}

pub fn write_trajectory(path: &Path, provenance: &str, traj: &Trajectory) -> Result<(), ExperimentError> {
    let mut file = fs::File::create(path)?;
    writeln!(file, "{provenance}")?;
    traj.write_csv(file)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_linear() -> ExperimentConfig {
        ExperimentConfig {
            plant: PlantConfig::Linear {
                a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, -1.0]),
                b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            },
            model_source: ModelSource::Analytic,
            input_box: InputBox::new(vec![-1.0; 3], vec![1.0; 3]).unwrap(),
            noise_stddev: vec![0.05; 2],
            x_e: vec![0.0; 2],
            u_e: vec![0.0],
            x0: vec![0.5, 0.0],
            initial_conditions: vec![vec![0.5, 0.0], vec![0.0, 0.5]],
            dataset_sizes: vec![20, 40],
            trials: 2,
            mcf: McfOptions {
                eps_grid: vec![0.1, 1.0, 10.0],
                ..McfOptions::default()
            },
            frequencies_hz: vec![20.0, 40.0],
            cost_q_diag: vec![1.0, 1.0],
            cost_r_diag: vec![0.1],
            horizon: 5.0,
            trajectory_dataset_size: 20,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert!(cfg.provenance().starts_with("# sdgp "));
        // partial configs fill in defaults
        let partial = ExperimentConfig::from_json(r#"{"trials": 2, "seed": 7}"#).unwrap();
        assert_eq!(partial.trials, 2);
        assert_eq!(partial.dataset_sizes, cfg.dataset_sizes);
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let cases: Vec<Box<dyn Fn(&mut ExperimentConfig)>> = vec![
            Box::new(|c| c.frequencies_hz.clear()),
            Box::new(|c| c.dataset_sizes.clear()),
            Box::new(|c| c.trials = 0),
            Box::new(|c| c.prob_per_row = 1.0),
            Box::new(|c| c.frequency_multipliers = vec![0.5]),
            Box::new(|c| c.noise_stddev = vec![0.1; 3]),
            Box::new(|c| c.cost_r_diag = vec![0.0, 1.0]),
            Box::new(|c| c.jobs = Some(0)),
        ];
        for (i, mutate) in cases.iter().enumerate() {
            let mut cfg = ExperimentConfig::default();
            mutate(&mut cfg);
            assert!(matches!(cfg.validate(), Err(ExperimentError::InvalidConfig(_))), "case {i}");
        }
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a = derive_seed(0, &[1, 0]);
        assert_eq!(a, derive_seed(0, &[1, 0]));
        assert_ne!(a, derive_seed(0, &[1, 1]));
        assert_ne!(a, derive_seed(1, &[1, 0]));
    }

    #[test]
    fn nested_datasets() {
        let cfg = ExperimentConfig::default();
        let small = trial_dataset(&cfg, 0, 200).unwrap();
        let large = trial_dataset(&cfg, 0, 400).unwrap();
        assert_eq!(small.inputs, large.inputs.rows(0, 200).into_owned());
    }

    #[test]
    fn analytic_system_is_always_feasible() {
        let cfg = tiny_linear();
        let res = run_mcf_vs_n(&cfg).unwrap();
        assert_eq!(res.trials.len(), 4);
        assert!(res.summary.iter().all(|s| s.feasible_fraction == 1.0));
        let dir = tempfile::tempdir().unwrap();
        res.write(dir.path(), &cfg.provenance()).unwrap();
        let first = fs::read(dir.path().join(McfVsN::TRIALS_FILE)).unwrap();
        run_mcf_vs_n(&cfg).unwrap().write(dir.path(), &cfg.provenance()).unwrap();
        assert_eq!(first, fs::read(dir.path().join(McfVsN::TRIALS_FILE)).unwrap());
        let text = String::from_utf8(first).unwrap();
        assert!(text.starts_with("# sdgp "));
        assert!(text.lines().nth(1).unwrap().starts_with("N,trial,status,f_c_min_hz,t_s_max_s,eps_used"));
    }

    #[test]
    fn single_cell_cost_matches_direct_evaluation() {
        let cfg = ExperimentConfig {
            dataset_sizes: vec![20],
            trials: 1,
            frequencies_hz: vec![30.0],
            ..tiny_linear()
        };
        let grid = run_cost_grid(&cfg).unwrap();
        assert_eq!(grid.cells.len(), 1);
        let sys = uncertain_system(&cfg, 0, 20).unwrap();
        let (_, direct) = cost_at(&cfg, &sys, 1.0 / 30.0, &cfg.initial_conditions, derive_seed(cfg.seed, &[3, 0])).unwrap();
        assert_eq!(grid.cells[0].mean_cost, direct);
        assert!(direct.is_some());
    }

    #[test]
    fn trajectories_are_written_per_multiplier() {
        let cfg = ExperimentConfig {
            trials: 1,
            ..tiny_linear()
        };
        let dir = tempfile::tempdir().unwrap();
        let runs = run_trajectories(&cfg, dir.path()).unwrap();
        assert_eq!(runs.len(), 4);
        for r in &runs {
            assert_eq!(r.status, "completed", "{r:?}");
            assert!(dir.path().join(r.file.as_ref().unwrap()).exists());
        }
    }
}
