//! Plant models, training-data generation, sampled-data closed-loop
//! simulation with zero-order hold, and the quadratic cost.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{Dataset, GpError};
use crate::matrix_json;
use crate::numerics::SymMatrix;

/// States with a larger Euclidean norm end the simulation as diverged.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("invalid controller: {0}")]
    InvalidController(String),
    #[error("integration step {step} exceeds a tenth of the sampling interval {t_s}")]
    StepTooLarge { step: f64, t_s: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("trajectory has no sample instants")]
    EmptyTrajectory,
    #[error("malformed trajectory CSV: {0}")]
    Format(String),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Continuous-time dynamics `ẋ = f(x, u)`.
pub trait Plant: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn derivative(&self, x: &[f64], u: &[f64], dx: &mut [f64]);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadrotorParams {
    pub mass: f64,
    pub arm: f64,
    pub gravity: f64,
    pub inertia_yy: f64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self::new(0.1, 0.1, 9.81)
    }
}

impl QuadrotorParams {
    /// Thin-rod inertia `m·d²/12`.
    pub fn new(mass: f64, arm: f64, gravity: f64) -> Self {
        Self {
            mass,
            arm,
            gravity,
            inertia_yy: mass * arm * arm / 12.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.mass, self.arm, self.gravity, self.inertia_yy]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
    }

    /// Equal thrusts that hold the hover.
    pub fn hover_input(&self) -> [f64; 2] {
        let t = self.mass * self.gravity / 2.0;
        [t, t]
    }
}

/// Planar quadrotor with state `[x, ẋ, z, ż, θ, θ̇]` and rotor thrusts `[T₁, T₂]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Quadrotor {
    pub params: QuadrotorParams,
}

pub fn quadrotor_derivative(state: &[f64], input: &[f64], p: &QuadrotorParams) -> [f64; 6] {
    let theta = state[4];
    let thrust = input[0] + input[1];
    [
        state[1],
        -thrust * theta.sin() / p.mass,
        state[3],
        thrust * theta.cos() / p.mass - p.gravity,
        state[5],
        (input[0] - input[1]) * p.arm / p.inertia_yy,
    ]
}

impl Quadrotor {
    pub fn new(params: QuadrotorParams) -> Self {
        Self { params }
    }

    /// Analytic Jacobians `(∂f/∂x, ∂f/∂u)`.
    pub fn jacobian(&self, state: &[f64], input: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let p = &self.params;
        let (s, c) = state[4].sin_cos();
        let thrust = input[0] + input[1];
        let mut a = DMatrix::zeros(6, 6);
        a[(0, 1)] = 1.0;
        a[(2, 3)] = 1.0;
        a[(4, 5)] = 1.0;
        a[(1, 4)] = -thrust * c / p.mass;
        a[(3, 4)] = -thrust * s / p.mass;
        let k = p.arm / p.inertia_yy;
        let b = DMatrix::from_row_slice(
            6,
            2,
            &[0.0, 0.0, -s / p.mass, -s / p.mass, 0.0, 0.0, c / p.mass, c / p.mass, 0.0, 0.0, k, -k],
        );
        (a, b)
    }
}

impl Plant for Quadrotor {
    fn state_dim(&self) -> usize {
        6
    }
    fn input_dim(&self) -> usize {
        2
    }
    fn derivative(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        dx.copy_from_slice(&quadrotor_derivative(x, u, &self.params));
    }
}

/// `ẋ = A(x − x_e) + B(u − u_e)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearPlant {
    #[serde(with = "matrix_json")]
    pub a: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub b: DMatrix<f64>,
    pub x_e: Vec<f64>,
    pub u_e: Vec<f64>,
}

impl LinearPlant {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, x_e: Vec<f64>, u_e: Vec<f64>) -> Result<Self, SimError> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || x_e.len() != n || u_e.len() != b.ncols() {
            return Err(SimError::DimensionMismatch(format!(
                "A {:?}, B {:?}, x_e {}, u_e {}",
                a.shape(),
                b.shape(),
                x_e.len(),
                u_e.len()
            )));
        }
        Ok(Self { a, b, x_e, u_e })
    }
}

impl Plant for LinearPlant {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    fn derivative(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        let n = self.state_dim();
        for (i, d) in dx.iter_mut().enumerate().take(n) {
            let mut v = 0.0;
            for j in 0..n {
                v += self.a[(i, j)] * (x[j] - self.x_e[j]);
            }
            for j in 0..self.u_e.len() {
                v += self.b[(i, j)] * (u[j] - self.u_e[j]);
            }
            *d = v;
        }
    }
}

/// Axis-aligned bounds on `z = (x, u)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InputBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, SimError> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(SimError::InvalidBox(format!(
                "{} lower and {} upper bounds",
                lower.len(),
                upper.len()
            )));
        }
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] < upper[i]) || !lower[i].is_finite() || !upper[i].is_finite()) {
            return Err(SimError::InvalidBox(format!(
                "coordinate {i}: need finite lower < upper, got [{}, {}]",
                lower[i], upper[i]
            )));
        }
        Ok(Self { lower, upper })
    }

    /// Position in `[0, 2]` m, velocities and pitch rate in `[−5, 5]`, pitch in
    /// `[−π/2, π/2]`, thrusts in `[0, 2]` N.
    pub fn quadrotor_default() -> Self {
        let h = std::f64::consts::FRAC_PI_2;
        Self {
            lower: vec![0.0, -5.0, 0.0, -5.0, -h, -5.0, 0.0, 0.0],
            upper: vec![2.0, 5.0, 2.0, 5.0, h, 5.0, 2.0, 2.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.len() == self.dim() && z.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| l <= v && v <= u)
    }
}

/// Samples `z` uniformly from the box and records `f(z)` plus Gaussian noise.
pub fn generate_dataset(
    plant: &dyn Plant,
    domain: &InputBox,
    n_points: usize,
    noise_stddev: &[f64],
    seed: u64,
) -> Result<Dataset, SimError> {
    generate_residual_dataset(plant, None, domain, n_points, noise_stddev, seed)
}

/// As [`generate_dataset`], with the derivative of a known model subtracted.
pub fn generate_residual_dataset(
    plant: &dyn Plant,
    known: Option<&dyn Plant>,
    domain: &InputBox,
    n_points: usize,
    noise_stddev: &[f64],
    seed: u64,
) -> Result<Dataset, SimError> {
    let n = plant.state_dim();
    let m = plant.input_dim();
    if domain.dim() != n + m {
        return Err(SimError::InvalidBox(format!(
            "box has {} coordinates, plant needs {}",
            domain.dim(),
            n + m
        )));
    }
    if noise_stddev.len() != n {
        return Err(SimError::DimensionMismatch(format!(
            "{} noise levels for {n} states",
            noise_stddev.len()
        )));
    }
    if n_points == 0 {
        return Err(SimError::InvalidBox("at least one point is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<Normal<f64>> = noise_stddev
        .iter()
        .map(|&s| Normal::new(0.0, s).map_err(|_| SimError::DimensionMismatch(format!("bad noise level {s}"))))
        .collect::<Result<_, _>>()?;
    let mut inputs = DMatrix::zeros(n_points, n + m);
    let mut targets = DMatrix::zeros(n_points, n);
    let mut z = vec![0.0; n + m];
    let mut dx = vec![0.0; n];
    let mut dk = vec![0.0; n];
    for r in 0..n_points {
        for (k, v) in z.iter_mut().enumerate() {
            *v = rng.random_range(domain.lower[k]..=domain.upper[k]);
            inputs[(r, k)] = *v;
        }
        plant.derivative(&z[..n], &z[n..], &mut dx);
        if let Some(known) = known {
            known.derivative(&z[..n], &z[n..], &mut dk);
        }
        for i in 0..n {
            let known_part = if known.is_some() { dk[i] } else { 0.0 };
            targets[(r, i)] = dx[i] - known_part + noise[i].sample(&mut rng);
        }
    }
    Ok(Dataset::new(inputs, targets, noise_stddev.to_vec())?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingPolicy {
    Periodic,
    /// Intervals i.i.d. uniform in `[lower_fraction·T_s, T_s]`.
    UniformRandom { lower_fraction: f64 },
}

/// `u = u_e + K(x(t_k) − x_e)`, held between sampling instants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledController {
    #[serde(with = "matrix_json")]
    pub gain: DMatrix<f64>,
    pub x_e: Vec<f64>,
    pub u_e: Vec<f64>,
    pub sampling_interval: f64,
    pub sampling_policy: SamplingPolicy,
}

impl SampledController {
    pub fn new(
        gain: DMatrix<f64>,
        x_e: Vec<f64>,
        u_e: Vec<f64>,
        sampling_interval: f64,
        sampling_policy: SamplingPolicy,
    ) -> Result<Self, SimError> {
        if gain.shape() != (u_e.len(), x_e.len()) {
            return Err(SimError::InvalidController(format!(
                "gain is {:?}, expected ({}, {})",
                gain.shape(),
                u_e.len(),
                x_e.len()
            )));
        }
        if !(sampling_interval > 0.0 && sampling_interval.is_finite()) {
            return Err(SimError::InvalidController(format!(
                "sampling interval must be positive, got {sampling_interval}"
            )));
        }
        if let SamplingPolicy::UniformRandom { lower_fraction } = sampling_policy {
            if !(0.0 < lower_fraction && lower_fraction <= 1.0) {
                return Err(SimError::InvalidController(format!(
                    "lower fraction must lie in (0, 1], got {lower_fraction}"
                )));
            }
        }
        Ok(Self {
            gain,
            x_e,
            u_e,
            sampling_interval,
            sampling_policy,
        })
    }

    pub fn control(&self, x: &[f64]) -> Vec<f64> {
        let dx = DVector::from_iterator(x.len(), x.iter().zip(&self.x_e).map(|(a, b)| a - b));
        let du = &self.gain * dx;
        self.u_e.iter().zip(du.iter()).map(|(a, b)| a + b).collect()
    }

    fn next_interval(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self.sampling_policy {
            SamplingPolicy::Periodic => self.sampling_interval,
            SamplingPolicy::UniformRandom { lower_fraction } if lower_fraction < 1.0 => {
                rng.random_range(lower_fraction * self.sampling_interval..=self.sampling_interval)
            }
            SamplingPolicy::UniformRandom { .. } => self.sampling_interval,
        }
    }

    /// Integrator step used when none is given: `T_s/20`, at most 1 ms.
    pub fn default_step(&self) -> f64 {
        (self.sampling_interval / 20.0).min(1e-3)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SimStatus {
    Completed,
    Diverged { time: f64 },
}

/// Integrated states at every integrator step. `inputs[i]` is the input
/// applied from `times[i]` on; it only changes at sample instants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub is_sample: Vec<bool>,
    pub status: SimStatus,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn sample_instants(&self) -> impl Iterator<Item = usize> + '_ {
        self.is_sample.iter().enumerate().filter(|(_, s)| **s).map(|(i, _)| i)
    }

    pub fn is_diverged(&self) -> bool {
        matches!(self.status, SimStatus::Diverged { .. })
    }

    /// `t, x_1..x_n, u_1..u_m, is_sample_instant`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), SimError> {
        let n = self.states.first().map_or(0, Vec::len);
        let m = self.inputs.first().map_or(0, Vec::len);
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.extend((1..=m).map(|i| format!("u_{i}")));
        header.push("is_sample_instant".into());
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut row = vec![format!("{:e}", self.times[i])];
            row.extend(self.states[i].iter().map(|v| format!("{v:e}")));
            row.extend(self.inputs[i].iter().map(|v| format!("{v:e}")));
            row.push(if self.is_sample[i] { "1" } else { "0" }.into());
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, SimError> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let header = rdr.headers()?.clone();
        let n = header.iter().filter(|h| h.starts_with("x_")).count();
        let m = header.iter().filter(|h| h.starts_with("u_")).count();
        if header.len() != n + m + 2 || header.get(0) != Some("t") || header.get(n + m + 1) != Some("is_sample_instant") {
            return Err(SimError::Format(format!("unexpected header {header:?}")));
        }
        let mut traj = Trajectory {
            times: vec![],
            states: vec![],
            inputs: vec![],
            is_sample: vec![],
            status: SimStatus::Completed,
        };
        for rec in rdr.records() {
            let rec = rec?;
            let num = |k: usize| -> Result<f64, SimError> {
                rec.get(k)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| SimError::Format(format!("bad value in column {k}")))
            };
            traj.times.push(num(0)?);
            traj.states.push((1..=n).map(num).collect::<Result<_, _>>()?);
            traj.inputs.push((n + 1..=n + m).map(num).collect::<Result<_, _>>()?);
            traj.is_sample.push(num(n + m + 1)? != 0.0);
        }
        Ok(traj)
    }
}

fn rk4_step(plant: &dyn Plant, x: &mut [f64], u: &[f64], h: f64, k: &mut [Vec<f64>; 5]) {
    let n = x.len();
    let [k1, k2, k3, k4, tmp] = k;
    plant.derivative(x, u, k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    plant.derivative(tmp, u, k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    plant.derivative(tmp, u, k3);
    for i in 0..n {
        tmp[i] = x[i] + h * k3[i];
    }
    plant.derivative(tmp, u, k4);
    for i in 0..n {
        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Integrates `plant` over `[0, t_end]` with the input held constant.
pub fn integrate_open_loop(plant: &dyn Plant, x0: &[f64], u: &[f64], t_end: f64, steps: usize) -> Vec<f64> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut k: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
    let h = t_end / steps as f64;
    for _ in 0..steps {
        rk4_step(plant, &mut x, u, h, &mut k);
    }
    x
}

/// Sampled-data closed loop: RK4 at (at most) `step` between sampling
/// instants, the feedback recomputed and held at every instant.
///
/// `step` defaults to [`SampledController::default_step`]. Divergence
/// (`‖x‖ > 1e6`) ends the run early and is recorded in the status.
pub fn simulate_closed_loop(
    plant: &dyn Plant,
    controller: &SampledController,
    x0: &[f64],
    horizon: f64,
    step: Option<f64>,
    seed: u64,
) -> Result<Trajectory, SimError> {
    let n = plant.state_dim();
    if x0.len() != n || controller.x_e.len() != n || controller.u_e.len() != plant.input_dim() {
        return Err(SimError::DimensionMismatch(format!(
            "plant ({n}, {}), controller ({}, {}), x0 {}",
            plant.input_dim(),
            controller.x_e.len(),
            controller.u_e.len(),
            x0.len()
        )));
    }
    let step = step.unwrap_or_else(|| controller.default_step());
    let t_s = controller.sampling_interval;
    if !(step > 0.0) || step > t_s / 10.0 * (1.0 + 1e-12) {
        return Err(SimError::StepTooLarge { step, t_s });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut k: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
    let mut x = x0.to_vec();
    let mut t = 0.0;
    let mut traj = Trajectory {
        times: vec![],
        states: vec![],
        inputs: vec![],
        is_sample: vec![],
        status: SimStatus::Completed,
    };
    let end_tol = 1e-12 * horizon.max(1.0);
    while t < horizon - end_tol {
        let u = controller.control(&x);
        let interval = controller.next_interval(&mut rng).min(horizon - t);
        let substeps = (interval / step - 1e-9).ceil().max(1.0) as usize;
        let h = interval / substeps as f64;
        traj.times.push(t);
        traj.states.push(x.clone());
        traj.inputs.push(u.clone());
        traj.is_sample.push(true);
        let t_k = t;
        for s in 1..=substeps {
            rk4_step(plant, &mut x, &u, h, &mut k);
            t = if s == substeps { t_k + interval } else { t_k + s as f64 * h };
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm <= DIVERGENCE_NORM) {
                traj.times.push(t);
                traj.states.push(x.clone());
                traj.inputs.push(u.clone());
                traj.is_sample.push(false);
                traj.status = SimStatus::Diverged { time: t };
                return Ok(traj);
            }
            if s < substeps {
                traj.times.push(t);
                traj.states.push(x.clone());
                traj.inputs.push(u.clone());
                traj.is_sample.push(false);
            }
        }
    }
    // closing row: final state, input still the one held over the last interval
    let last_u = traj.inputs.last().cloned().unwrap_or_else(|| controller.control(&x));
    traj.times.push(t);
    traj.states.push(x);
    traj.inputs.push(last_u);
    traj.is_sample.push(false);
    Ok(traj)
}

/// `J = Σ_k (t_{k+1} − t_k)·[x̃(t_k)ᵀ Q x̃(t_k) + ũ_kᵀ R ũ_k]`, the last
/// interval running to the end of the trajectory.
pub fn evaluate_cost(
    traj: &Trajectory,
    q_cost: &SymMatrix,
    r_cost: &SymMatrix,
    x_e: &[f64],
    u_e: &[f64],
) -> Result<f64, SimError> {
    let samples: Vec<usize> = traj.sample_instants().collect();
    if samples.is_empty() {
        return Err(SimError::EmptyTrajectory);
    }
    if q_cost.dim() != x_e.len() || r_cost.dim() != u_e.len() {
        return Err(SimError::DimensionMismatch(format!(
            "Q is {}, R is {}, equilibrium ({}, {})",
            q_cost.dim(),
            r_cost.dim(),
            x_e.len(),
            u_e.len()
        )));
    }
    let t_end = *traj.times.last().expect("nonempty");
    let quad = |m: &SymMatrix, v: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..v.len() {
            for j in 0..v.len() {
                s += v[i] * m.get(i, j) * v[j];
            }
        }
        s
    };
    let mut cost = 0.0;
    for (idx, &k) in samples.iter().enumerate() {
        let t_next = samples.get(idx + 1).map_or(t_end, |&j| traj.times[j]);
        let dx: Vec<f64> = traj.states[k].iter().zip(x_e).map(|(a, b)| a - b).collect();
        let du: Vec<f64> = traj.inputs[k].iter().zip(u_e).map(|(a, b)| a - b).collect();
        cost += (t_next - traj.times[k]) * (quad(q_cost, &dx) + quad(r_cost, &du));
    }
    Ok(cost)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hover() -> (Vec<f64>, Vec<f64>) {
        (vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0], vec![0.4905, 0.4905])
    }

    #[test]
    fn quadrotor_cases() {
        let p = QuadrotorParams::default();
        let (x, u) = hover();
        assert!(quadrotor_derivative(&x, &u, &p).iter().all(|v| v.abs() < 1e-12));
        let d = quadrotor_derivative(&x, &[0.0, 0.0], &p);
        assert_eq!(d, [0.0, 0.0, 0.0, -9.81, 0.0, 0.0]);
        let d = quadrotor_derivative(&x, &[1.0, 0.0], &p);
        assert!((d[5] - 1200.0).abs() < 1e-9);
        assert!(p.hover_input().iter().all(|t| (t - 0.4905).abs() < 1e-12));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let q = Quadrotor::default();
        let x = [0.3, -1.0, 1.2, 0.4, 0.7, -2.0];
        let u = [0.8, 0.3];
        let (a, b) = q.jacobian(&x, &u);
        let h = 1e-6;
        for j in 0..8 {
            let mut zp: Vec<f64> = x.iter().chain(&u).copied().collect();
            let mut zm = zp.clone();
            zp[j] += h;
            zm[j] -= h;
            let fp = quadrotor_derivative(&zp[..6], &zp[6..], &q.params);
            let fm = quadrotor_derivative(&zm[..6], &zm[6..], &q.params);
            for i in 0..6 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                let an = if j < 6 { a[(i, j)] } else { b[(i, j - 6)] };
                assert!((fd - an).abs() < 1e-5 * (1.0 + an.abs()), "({i},{j}) {fd} vs {an}");
            }
        }
    }

    #[test]
    fn dataset_generation() {
        let q = Quadrotor::default();
        let bx = InputBox::quadrotor_default();
        let d = generate_dataset(&q, &bx, 200, &[0.0; 6], 3).unwrap();
        for r in 0..d.len() {
            let z: Vec<f64> = d.inputs.row(r).iter().copied().collect();
            assert!(bx.contains(&z));
            let f = quadrotor_derivative(&z[..6], &z[6..], &q.params);
            for i in 0..6 {
                assert_eq!(d.targets[(r, i)], f[i]);
            }
        }
        let a = generate_dataset(&q, &bx, 50, &[0.1; 6], 9).unwrap();
        let b = generate_dataset(&q, &bx, 50, &[0.1; 6], 9).unwrap();
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
        // residual against the true model is pure noise
        let r = generate_residual_dataset(&q, Some(&q), &bx, 20, &[0.0; 6], 1).unwrap();
        assert!(r.targets.iter().all(|v| *v == 0.0));
        assert!(matches!(
            InputBox::new(vec![0.0, 1.0], vec![1.0, 1.0]),
            Err(SimError::InvalidBox(_))
        ));
    }

    #[test]
    fn rk4_is_fourth_order() {
        let q = Quadrotor::default();
        let x0 = [1.0, 0.5, 0.5, -0.3, 0.3, 1.0];
        let u = [0.5, 0.45];
        let reference = integrate_open_loop(&q, &x0, &u, 1.0, 16 * 400);
        let err = |steps| {
            let x = integrate_open_loop(&q, &x0, &u, 1.0, steps);
            x.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        };
        let ratio = err(200) / err(400);
        assert!(ratio >= 12.0, "ratio {ratio}");
    }

    #[test]
    fn equilibrium_is_invariant() {
        let (x_e, u_e) = hover();
        let c = SampledController::new(DMatrix::zeros(2, 6), x_e.clone(), u_e.clone(), 0.05, SamplingPolicy::Periodic).unwrap();
        let tr = simulate_closed_loop(&Quadrotor::default(), &c, &x_e, 10.0, None, 0).unwrap();
        assert_eq!(tr.status, SimStatus::Completed);
        assert!((tr.times.last().unwrap() - 10.0).abs() < 1e-9);
        for s in &tr.states {
            assert!(s.iter().zip(&x_e).all(|(a, b)| (a - b).abs() < 1e-9));
        }
    }

    #[test]
    fn zoh_and_sampling_bound() {
        let plant = LinearPlant::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            vec![0.0; 2],
            vec![0.0],
        )
        .unwrap();
        let k = DMatrix::from_row_slice(1, 2, &[-1.0, -1.5]);
        let c = SampledController::new(k, vec![0.0; 2], vec![0.0], 0.2, SamplingPolicy::UniformRandom { lower_fraction: 0.5 }).unwrap();
        let tr = simulate_closed_loop(&plant, &c, &[1.0, 0.0], 15.0, None, 42).unwrap();
        let samples: Vec<usize> = tr.sample_instants().collect();
        for w in samples.windows(2) {
            let dt = tr.times[w[1]] - tr.times[w[0]];
            assert!(dt <= 0.2 + 1e-12 && dt >= 0.1 - 1e-12, "interval {dt}");
            for i in w[0]..w[1] {
                assert_eq!(tr.inputs[i], tr.inputs[w[0]]);
            }
        }
        assert!(tr.final_state().iter().all(|v| v.abs() < 1e-2));
        // step must respect the sampling interval
        assert!(matches!(
            simulate_closed_loop(&plant, &c, &[1.0, 0.0], 1.0, Some(0.05), 0),
            Err(SimError::StepTooLarge { .. })
        ));
    }

    #[test]
    fn divergence_is_recorded() {
        let plant = LinearPlant::new(DMatrix::from_element(1, 1, 5.0), DMatrix::from_element(1, 1, 1.0), vec![0.0], vec![0.0]).unwrap();
        let c = SampledController::new(DMatrix::zeros(1, 1), vec![0.0], vec![0.0], 0.1, SamplingPolicy::Periodic).unwrap();
        let tr = simulate_closed_loop(&plant, &c, &[1.0], 10.0, None, 0).unwrap();
        assert!(tr.is_diverged());
    }

    #[test]
    fn cost_cases() {
        let q = SymMatrix::from_diagonal(&[100.0, 1.0, 100.0, 1.0, 100.0, 1.0]);
        let r = SymMatrix::from_diagonal(&[0.01, 0.01]);
        let (x_e, u_e) = hover();
        let mut x1 = x_e.clone();
        x1[0] += 1.0;
        let tr = Trajectory {
            times: vec![0.0, 1.0],
            states: vec![x1.clone(), x1],
            inputs: vec![u_e.clone(), u_e.clone()],
            is_sample: vec![true, false],
            status: SimStatus::Completed,
        };
        assert!((evaluate_cost(&tr, &q, &r, &x_e, &u_e).unwrap() - 100.0).abs() < 1e-12);
        let c = SampledController::new(DMatrix::zeros(2, 6), x_e.clone(), u_e.clone(), 0.1, SamplingPolicy::Periodic).unwrap();
        let pinned = simulate_closed_loop(&Quadrotor::default(), &c, &x_e, 2.0, None, 0).unwrap();
        assert!(evaluate_cost(&pinned, &q, &r, &x_e, &u_e).unwrap() < 1e-20);
        // quadratic homogeneity on a linear plant
        let plant = LinearPlant::new(-DMatrix::identity(2, 2), DMatrix::identity(2, 2), vec![0.0; 2], vec![0.0; 2]).unwrap();
        let c = SampledController::new(-0.5 * DMatrix::identity(2, 2), vec![0.0; 2], vec![0.0; 2], 0.1, SamplingPolicy::Periodic).unwrap();
        let q2 = SymMatrix::identity(2);
        let j1 = evaluate_cost(&simulate_closed_loop(&plant, &c, &[1.0, -2.0], 3.0, None, 0).unwrap(), &q2, &q2, &[0.0; 2], &[0.0; 2]).unwrap();
        let j2 = evaluate_cost(&simulate_closed_loop(&plant, &c, &[0.5, -1.0], 3.0, None, 0).unwrap(), &q2, &q2, &[0.0; 2], &[0.0; 2]).unwrap();
        assert!((j1 - 4.0 * j2).abs() < 1e-10 * j1);
        let empty = Trajectory {
            times: vec![],
            states: vec![],
            inputs: vec![],
            is_sample: vec![],
            status: SimStatus::Completed,
        };
        assert!(matches!(evaluate_cost(&empty, &q2, &q2, &[0.0; 2], &[0.0; 2]), Err(SimError::EmptyTrajectory)));
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let plant = LinearPlant::new(-DMatrix::identity(2, 2), DMatrix::identity(2, 1).columns(0, 1).into_owned(), vec![0.0; 2], vec![0.0]).unwrap();
        let c = SampledController::new(DMatrix::from_row_slice(1, 2, &[-0.2, 0.1]), vec![0.0; 2], vec![0.0], 0.1, SamplingPolicy::Periodic).unwrap();
        let tr = simulate_closed_loop(&plant, &c, &[1.0, 2.0], 1.0, None, 0).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let back = Trajectory::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, tr);
    }
}
