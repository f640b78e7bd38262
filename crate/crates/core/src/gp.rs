//! Gaussian process regression with a squared-exponential kernel.
//!
//! One independent GP is fitted per output dimension. Besides the usual
//! posterior mean and variance, a model predicts the distribution of the
//! gradient of the latent function, which the linearization stage turns into
//! Jacobian estimates with confidence bounds.

use std::io::{Read, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix_json;
use crate::numerics::{dot, sym_eig, CholeskyFactor, NumericsError, SymMatrix};

#[derive(Debug, Error)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("degenerate data for output {output}: targets are constant and the noise fit collapsed")]
    DegenerateData { output: usize },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("output index {index} out of range for {outputs} outputs")]
    OutputOutOfRange { index: usize, outputs: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub const MIN_OUTPUT_VARIANCE: f64 = 1e-8;
pub const MIN_LENGTHSCALE: f64 = 1e-4;
pub const MIN_NOISE_VARIANCE: f64 = 1e-10;

/// Squared-exponential kernel `σ²·exp(−½ rᵀL⁻²r)` with per-dimension lengthscales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeKernel {
    pub output_variance: f64,
    pub lengthscales: Vec<f64>,
}

/// Kernel value and its first derivatives at a pair of points.
#[derive(Clone, Debug)]
pub struct KernelDerivatives {
    pub value: f64,
    /// ∂k/∂z
    pub grad_z: DVector<f64>,
    /// ∂²k/∂z∂z′
    pub cross_hessian: DMatrix<f64>,
}

impl SeKernel {
    pub fn new(output_variance: f64, lengthscales: Vec<f64>) -> Self {
        assert!(output_variance > 0.0, "output variance must be positive");
        assert!(
            lengthscales.iter().all(|&l| l > 0.0),
            "lengthscales must be positive"
        );
        Self {
            output_variance,
            lengthscales,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn eval(&self, z: &[f64], zp: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for ((a, b), l) in z.iter().zip(zp).zip(&self.lengthscales) {
            let d = (a - b) / l;
            r2 += d * d;
        }
        self.output_variance * (-0.5 * r2).exp()
    }

    /// Prior covariance of the gradient, `σ²·L⁻²`.
    pub fn prior_gradient_covariance(&self) -> SymMatrix {
        let d: Vec<f64> = self
            .lengthscales
            .iter()
            .map(|l| self.output_variance / (l * l))
            .collect();
        SymMatrix::from_diagonal(&d)
    }
}

pub fn se_kernel_derivatives(
    kernel: &SeKernel,
    z: &[f64],
    z_prime: &[f64],
) -> Result<KernelDerivatives, GpError> {
    let n = kernel.input_dim();
    check_dim(n, z.len())?;
    check_dim(n, z_prime.len())?;
    let value = kernel.eval(z, z_prime);
    // s = L⁻²(z − z′)
    let s = DVector::from_iterator(
        n,
        (0..n).map(|i| (z[i] - z_prime[i]) / (kernel.lengthscales[i] * kernel.lengthscales[i])),
    );
    let grad_z = -&s * value;
    let mut cross_hessian = -(&s * s.transpose());
    for i in 0..n {
        cross_hessian[(i, i)] += 1.0 / (kernel.lengthscales[i] * kernel.lengthscales[i]);
    }
    cross_hessian *= value;
    Ok(KernelDerivatives {
        value,
        grad_z,
        cross_hessian,
    })
}

fn check_dim(expected: usize, found: usize) -> Result<(), GpError> {
    if expected != found {
        Err(GpError::DimensionMismatch { expected, found })
    } else {
        Ok(())
    }
}

/// Training data: inputs `z = (x, u)` (one row per observation), residual
/// derivative targets and the per-output noise standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub noise_stddev: Vec<f64>,
}

impl Dataset {
    pub fn new(
        inputs: DMatrix<f64>,
        targets: DMatrix<f64>,
        noise_stddev: Vec<f64>,
    ) -> Result<Self, GpError> {
        if inputs.nrows() == 0 {
            return Err(GpError::InvalidDataset("dataset has no rows".into()));
        }
        if inputs.nrows() != targets.nrows() {
            return Err(GpError::InvalidDataset(format!(
                "{} input rows but {} target rows",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        if noise_stddev.len() != targets.ncols() {
            return Err(GpError::InvalidDataset(format!(
                "{} noise levels for {} outputs",
                noise_stddev.len(),
                targets.ncols()
            )));
        }
        if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(GpError::InvalidDataset("non-finite value".into()));
        }
        if noise_stddev.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(GpError::InvalidDataset("noise levels must be finite and nonnegative".into()));
        }
        Ok(Self {
            inputs,
            targets,
            noise_stddev,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.targets.ncols()
    }

    /// First `n` rows.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            inputs: self.inputs.rows(0, n).into_owned(),
            targets: self.targets.rows(0, n).into_owned(),
            noise_stddev: self.noise_stddev.clone(),
        }
    }

    /// CSV with a `# noise_stddev=a;b;...` comment line, then header
    /// `z_1,...,z_{n_z},y_1,...,y_n`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), GpError> {
        let noise: Vec<String> = self.noise_stddev.iter().map(|s| format!("{s}")).collect();
        writeln!(w, "# noise_stddev={}", noise.join(";"))?;
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (1..=self.input_dim()).map(|i| format!("z_{i}")).collect();
        header.extend((1..=self.output_dim()).map(|i| format!("y_{i}")));
        wr.write_record(&header)?;
        for r in 0..self.len() {
            let row: Vec<String> = self
                .inputs
                .row(r)
                .iter()
                .chain(self.targets.row(r).iter())
                .map(|v| format!("{v:e}"))
                .collect();
            wr.write_record(&row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(mut r: R) -> Result<Self, GpError> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let mut noise = None;
        let mut body = String::new();
        for line in text.lines() {
            if let Some(c) = line.strip_prefix('#') {
                if let Some(v) = c.trim().strip_prefix("noise_stddev=") {
                    let parsed: Result<Vec<f64>, _> = v.split(';').map(|s| s.trim().parse::<f64>()).collect();
                    noise = Some(parsed.map_err(|e| GpError::InvalidDataset(format!("noise_stddev: {e}")))?);
                }
                continue;
            }
            body.push_str(line);
            body.push('\n');
        }
        let mut rd = csv::Reader::from_reader(body.as_bytes());
        let headers = rd.headers()?.clone();
        let n_z = headers.iter().filter(|h| h.starts_with("z_")).count();
        let n_y = headers.iter().filter(|h| h.starts_with("y_")).count();
        if n_z + n_y != headers.len() || n_z == 0 || n_y == 0 {
            return Err(GpError::InvalidDataset(format!(
                "unexpected header {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let mut zs = Vec::new();
        let mut ys = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let vals: Result<Vec<f64>, _> = rec.iter().map(|s| s.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| GpError::InvalidDataset(format!("bad number: {e}")))?;
            zs.extend_from_slice(&vals[..n_z]);
            ys.extend_from_slice(&vals[n_z..]);
        }
        let rows = zs.len() / n_z;
        let noise = noise.unwrap_or_else(|| vec![0.0; n_y]);
        Dataset::new(
            DMatrix::from_row_slice(rows, n_z, &zs),
            DMatrix::from_row_slice(rows, n_y, &ys),
            noise,
        )
    }
}

/// Fitted GP for one output dimension.
#[derive(Clone, Debug)]
pub struct GpModel {
    pub kernel: SeKernel,
    pub noise_variance: f64,
    /// Training inputs, rows are points.
    pub inputs: Arc<DMatrix<f64>>,
    targets: DVector<f64>,
    alpha: DVector<f64>,
    gram_factor: CholeskyFactor,
}

/// Posterior distribution of the latent gradient at a point.
#[derive(Clone, Debug)]
pub struct DerivativePrediction {
    pub mean: DVector<f64>,
    pub covariance: SymMatrix,
}

/// Row-major copy of the inputs with each column divided by its lengthscale.
fn scaled_rows(inputs: &DMatrix<f64>, lengthscales: &[f64]) -> Vec<f64> {
    let (n, d) = inputs.shape();
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        for j in 0..d {
            out.push(inputs[(i, j)] / lengthscales[j]);
        }
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn gram(inputs: &DMatrix<f64>, kernel: &SeKernel, noise_variance: f64) -> SymMatrix {
    let d = inputs.ncols();
    let s = scaled_rows(inputs, &kernel.lengthscales);
    SymMatrix::from_fn(inputs.nrows(), |i, j| {
        let k = kernel.output_variance * (-0.5 * sq_dist(&s[i * d..(i + 1) * d], &s[j * d..(j + 1) * d])).exp();
        if i == j {
            k + noise_variance
        } else {
            k
        }
    })
}

impl GpModel {
    /// Conditions the GP on `(inputs, targets)` with fixed hyperparameters.
    /// Zero rows gives the prior.
    pub fn new(
        kernel: SeKernel,
        noise_variance: f64,
        inputs: Arc<DMatrix<f64>>,
        targets: DVector<f64>,
    ) -> Result<Self, GpError> {
        check_dim(kernel.input_dim(), inputs.ncols())?;
        check_dim(inputs.nrows(), targets.len())?;
        let k = gram(&inputs, &kernel, noise_variance);
        let gram_factor = CholeskyFactor::new(&k)?;
        let mut alpha = targets.clone();
        gram_factor.solve_in_place(alpha.as_mut_slice());
        Ok(Self {
            kernel,
            noise_variance,
            inputs,
            targets,
            alpha,
            gram_factor,
        })
    }

    pub fn prior(kernel: SeKernel, noise_variance: f64) -> Self {
        let d = kernel.input_dim();
        Self::new(
            kernel,
            noise_variance,
            Arc::new(DMatrix::zeros(0, d)),
            DVector::zeros(0),
        )
        .expect("empty gram matrix always factorizes")
    }

    pub fn num_points(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.input_dim()
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn gram_factor(&self) -> &CholeskyFactor {
        &self.gram_factor
    }

    fn cross_cov(&self, z: &[f64]) -> Vec<f64> {
        let n = self.num_points();
        (0..n)
            .map(|i| {
                let row: Vec<f64> = self.inputs.row(i).iter().copied().collect();
                self.kernel.eval(z, &row)
            })
            .collect()
    }

    pub fn predict(&self, z_star: &[f64]) -> Result<(f64, f64), GpError> {
        check_dim(self.input_dim(), z_star.len())?;
        let mut k = self.cross_cov(z_star);
        let mean = dot(&k, self.alpha.as_slice());
        self.gram_factor.solve_lower_in_place(&mut k);
        let var = self.kernel.output_variance - dot(&k, &k);
        let var = if var < 0.0 { 0.0 } else { var };
        Ok((mean, var))
    }

    pub fn predict_derivative(&self, z_star: &[f64]) -> Result<DerivativePrediction, GpError> {
        let d = self.input_dim();
        check_dim(d, z_star.len())?;
        let n = self.num_points();
        let inv_l2: Vec<f64> = self.kernel.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        // rows of `dt` are the columns of D: ∂k(z*, z_i)/∂z*
        let mut dt = vec![vec![0.0; n]; d];
        for i in 0..n {
            let zi: Vec<f64> = self.inputs.row(i).iter().copied().collect();
            let k = self.kernel.eval(z_star, &zi);
            for c in 0..d {
                dt[c][i] = -inv_l2[c] * (z_star[c] - zi[c]) * k;
            }
        }
        let mean = DVector::from_iterator(d, dt.iter().map(|row| dot(row, self.alpha.as_slice())));
        for row in dt.iter_mut() {
            self.gram_factor.solve_lower_in_place(row);
        }
        let raw = SymMatrix::from_fn(d, |a, b| {
            let prior = if a == b {
                self.kernel.output_variance * inv_l2[a]
            } else {
                0.0
            };
            prior - dot(&dt[a], &dt[b])
        });
        Ok(DerivativePrediction {
            mean,
            covariance: floor_eigenvalues(&raw)?,
        })
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.num_points() as f64;
        -0.5 * dot(self.targets.as_slice(), self.alpha.as_slice())
            - 0.5 * self.gram_factor.log_det()
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }

    pub fn to_checkpoint(&self) -> GpCheckpoint {
        GpCheckpoint {
            kernel: self.kernel.clone(),
            noise_variance: self.noise_variance,
            inputs: (*self.inputs).clone(),
            targets: self.targets.as_slice().to_vec(),
            alpha: self.alpha.as_slice().to_vec(),
        }
    }

    pub fn from_checkpoint(c: GpCheckpoint) -> Result<Self, GpError> {
        Self::new(
            c.kernel,
            c.noise_variance,
            Arc::new(c.inputs),
            DVector::from_vec(c.targets),
        )
    }
}

/// Drops negative eigenvalues of a symmetric matrix that should be PSD.
fn floor_eigenvalues(m: &SymMatrix) -> Result<SymMatrix, GpError> {
    let eig = sym_eig(m)?;
    if eig.values.first().is_none_or(|&v| v >= 0.0) {
        return Ok(m.clone());
    }
    let d = m.dim();
    let v = &eig.vectors;
    let lam: Vec<f64> = eig.values.iter().map(|&l| l.max(0.0)).collect();
    Ok(SymMatrix::from_fn(d, |i, j| {
        (0..d).map(|k| v[(i, k)] * lam[k] * v[(j, k)]).sum()
    }))
}

/// Serialized form of a [`GpModel`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GpCheckpoint {
    pub kernel: SeKernel,
    pub noise_variance: f64,
    #[serde(with = "matrix_json")]
    pub inputs: DMatrix<f64>,
    pub targets: Vec<f64>,
    pub alpha: Vec<f64>,
}

// ---------------------------------------------------------------------------
// Hyperparameter fitting

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub restarts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Fix σ_n to this value instead of fitting it.
    pub fixed_noise_stddev: Option<f64>,
    /// Fix σ_n to the dataset's recorded noise level for the output.
    pub noise_from_dataset: bool,
    /// Fit hyperparameters on at most this many points; the returned model
    /// still conditions on the full dataset.
    pub max_points: Option<usize>,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iters: 200,
            grad_tol: 1e-6,
            fixed_noise_stddev: None,
            noise_from_dataset: false,
            max_points: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub output_index: usize,
    pub log_marginal_likelihood: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub restarts: usize,
}

/// Log-parameter vector `[log σ_η, log l_1.., log σ_n]`, with the noise entry
/// dropped when it is fixed.
#[derive(Clone, Debug)]
struct LogParams {
    dim: usize,
    fixed_noise: Option<f64>,
}

impl LogParams {
    fn len(&self) -> usize {
        1 + self.dim + usize::from(self.fixed_noise.is_none())
    }

    fn unpack(&self, theta: &[f64]) -> (SeKernel, f64) {
        let sf = theta[0].exp();
        let ls = theta[1..=self.dim].iter().map(|t| t.exp()).collect();
        let sn2 = match self.fixed_noise {
            Some(s) => (s * s).max(MIN_NOISE_VARIANCE),
            None => (2.0 * theta[self.dim + 1]).exp(),
        };
        (
            SeKernel {
                output_variance: sf * sf,
                lengthscales: ls,
            },
            sn2,
        )
    }
}

/// Log marginal likelihood and its gradient with respect to the log
/// parameters `(log σ_η, log l_1.., log σ_n)`; the noise component is omitted
/// when `fixed_noise_stddev` is given.
pub fn log_marginal_likelihood_with_grad(
    inputs: &DMatrix<f64>,
    y: &DVector<f64>,
    theta: &[f64],
    fixed_noise_stddev: Option<f64>,
) -> Result<(f64, Vec<f64>), GpError> {
    let lp = LogParams {
        dim: inputs.ncols(),
        fixed_noise: fixed_noise_stddev,
    };
    check_dim(lp.len(), theta.len())?;
    let (kernel, sn2) = lp.unpack(theta);
    lml_and_grad(inputs, y, &kernel, sn2, &lp)
}

fn lml_and_grad(
    inputs: &DMatrix<f64>,
    y: &DVector<f64>,
    kernel: &SeKernel,
    sn2: f64,
    lp: &LogParams,
) -> Result<(f64, Vec<f64>), GpError> {
    let n = inputs.nrows();
    let d = inputs.ncols();
    let k = gram(inputs, kernel, sn2);
    let f = CholeskyFactor::new(&k)?;
    let mut alpha = y.as_slice().to_vec();
    f.solve_in_place(&mut alpha);
    let lml = -0.5 * dot(y.as_slice(), &alpha) - 0.5 * f.log_det()
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // W = ααᵀ − K̄⁻¹
    let mut w = f.inverse_dense();
    for i in 0..n {
        for j in 0..n {
            w[i * n + j] = alpha[i] * alpha[j] - w[i * n + j];
        }
    }
    let mut grad = vec![0.0; lp.len()];
    let s = scaled_rows(inputs, &kernel.lengthscales);
    // Off-diagonal pairs counted twice; diagonal terms have zero distance.
    for i in 0..n {
        let si = &s[i * d..(i + 1) * d];
        // diagonal: K_f = σ², only the σ_η derivative is nonzero
        grad[0] += 0.5 * w[i * n + i] * 2.0 * kernel.output_variance;
        for j in 0..i {
            let sj = &s[j * d..(j + 1) * d];
            let kf = kernel.output_variance * (-0.5 * sq_dist(si, sj)).exp();
            let wk = w[i * n + j] * kf; // × 2 (symmetry) × ½
            grad[0] += 2.0 * wk;
            for c in 0..d {
                let dc = si[c] - sj[c];
                grad[1 + c] += wk * dc * dc;
            }
        }
    }
    if lp.fixed_noise.is_none() {
        let tr: f64 = (0..n).map(|i| w[i * n + i]).sum();
        grad[d + 1] = sn2 * tr;
    }
    Ok((lml, grad))
}

fn column_std(m: &DMatrix<f64>, c: usize) -> f64 {
    let n = m.nrows() as f64;
    let mean = m.column(c).sum() / n;
    (m.column(c).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Projection box in log space: floors from the degeneracy limits, caps far
/// above the data scales so unidentifiable directions cannot run away.
fn bounds(lp: &LogParams, input_scales: &[f64], target_scale: f64) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![0.5 * MIN_OUTPUT_VARIANCE.ln()];
    let mut hi = vec![(1e3 * target_scale).ln()];
    for &s in input_scales {
        lo.push(MIN_LENGTHSCALE.ln());
        hi.push((1e3 * s).ln().max(MIN_LENGTHSCALE.ln() + 1.0));
    }
    if lp.fixed_noise.is_none() {
        lo.push(0.5 * MIN_NOISE_VARIANCE.ln());
        hi.push((1e2 * target_scale).ln());
    }
    (lo, hi)
}

struct Optimum {
    theta: Vec<f64>,
    lml: f64,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

/// Gradient components that could still move the iterate inside the box.
fn projected_grad_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    x.iter()
        .zip(g)
        .zip(lo.iter().zip(hi))
        .map(|((&xi, &gi), (&l, &h))| {
            // g is the ascent direction of the likelihood
            if (xi <= l && gi < 0.0) || (xi >= h && gi > 0.0) {
                0.0
            } else {
                gi * gi
            }
        })
        .sum::<f64>()
        .sqrt()
}

/// Ascent with limited-memory quasi-Newton directions, Armijo backtracking
/// and projection onto the parameter box.
fn maximize(
    mut eval: impl FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    x0: Vec<f64>,
    lo: &[f64],
    hi: &[f64],
    max_iters: usize,
    tol: f64,
) -> Option<Optimum> {
    const MEMORY: usize = 8;
    let mut x = x0;
    project(&mut x, lo, hi);
    let (mut fx, mut g) = eval(&x)?;
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut iterations = 0;
    let mut pg = projected_grad_norm(&x, &g, lo, hi);
    while iterations < max_iters && pg > tol {
        iterations += 1;
        // two-loop recursion on the negated objective; direction is ascent
        let mut q: Vec<f64> = g.clone();
        let mut alphas = vec![0.0; s_hist.len()];
        for k in (0..s_hist.len()).rev() {
            let rho = 1.0 / dot(&y_hist[k], &s_hist[k]);
            alphas[k] = rho * dot(&s_hist[k], &q);
            for (qi, yi) in q.iter_mut().zip(&y_hist[k]) {
                *qi -= alphas[k] * yi;
            }
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for k in 0..s_hist.len() {
            let rho = 1.0 / dot(&y_hist[k], &s_hist[k]);
            let beta = rho * dot(&y_hist[k], &q);
            for (qi, si) in q.iter_mut().zip(&s_hist[k]) {
                *qi += (alphas[k] - beta) * si;
            }
        }
        // for the concave objective, q ≈ −H⁻¹g with H the negated Hessian;
        // fall back to steepest ascent when the direction is not uphill
        let mut dir = q;
        if dot(&dir, &g) <= 0.0 {
            dir = g.clone();
            s_hist.clear();
            y_hist.clear();
        }
        let dnorm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut step = if s_hist.is_empty() { (1.0 / dnorm).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            project(&mut xn, lo, hi);
            let dx: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let gain = dot(&g, &dx);
            if gain <= 0.0 {
                step *= 0.5;
                continue;
            }
            if let Some((fn_, gn)) = eval(&xn) {
                if fn_ >= fx + 1e-4 * gain {
                    accepted = Some((xn, fn_, gn, dx));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn, dx)) = accepted else {
            break;
        };
        // curvature pair for the negated objective: y = −(g_new − g_old)
        let yv: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| b - a).collect();
        if dot(&yv, &dx) > 1e-12 * dot(&dx, &dx).sqrt() * dot(&yv, &yv).sqrt() {
            s_hist.push(dx);
            y_hist.push(yv);
            if s_hist.len() > MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        let improvement = fn_ - fx;
        x = xn;
        fx = fn_;
        g = gn;
        pg = projected_grad_norm(&x, &g, lo, hi);
        if improvement.abs() <= 1e-14 * fx.abs().max(1.0) && pg > tol {
            // stalled on a flat ridge; further steps cannot make progress
            break;
        }
    }
    Some(Optimum {
        theta: x,
        lml: fx,
        grad_norm: pg,
        iterations,
        converged: pg <= tol,
    })
}

/// Fits the hyperparameters of output `output_index` by maximizing the log
/// marginal likelihood from several random starts, then conditions on the
/// full dataset.
pub fn fit_hyperparameters(
    dataset: &Dataset,
    output_index: usize,
    config: &FitConfig,
) -> Result<(GpModel, FitReport), GpError> {
    if output_index >= dataset.output_dim() {
        return Err(GpError::OutputOutOfRange {
            index: output_index,
            outputs: dataset.output_dim(),
        });
    }
    if dataset.len() < 2 {
        return Err(GpError::InvalidDataset("fitting needs at least two points".into()));
    }
    let d = dataset.input_dim();
    let full_inputs = Arc::new(dataset.inputs.clone());
    let full_y = dataset.targets.column(output_index).into_owned();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (output_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (fit_inputs, fit_y) = match config.max_points {
        Some(m) if m >= 2 && m < dataset.len() => {
            let idx = rand::seq::index::sample(&mut rng, dataset.len(), m).into_vec();
            let mut idx = idx;
            idx.sort_unstable();
            let zi = DMatrix::from_fn(m, d, |r, c| dataset.inputs[(idx[r], c)]);
            let yi = DVector::from_iterator(m, idx.iter().map(|&r| full_y[r]));
            (zi, yi)
        }
        _ => (dataset.inputs.clone(), full_y.clone()),
    };

    let input_scales: Vec<f64> = (0..d)
        .map(|c| {
            let s = column_std(&fit_inputs, c);
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    let y_std = {
        let n = fit_y.len() as f64;
        let mean = fit_y.sum() / n;
        (fit_y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
    };
    let constant_targets = y_std == 0.0;
    let target_scale = if constant_targets {
        fit_y.amax().max(1.0)
    } else {
        fit_y.amax().max(y_std)
    };

    let fixed_noise = config.fixed_noise_stddev.or(if config.noise_from_dataset {
        Some(dataset.noise_stddev[output_index])
    } else {
        None
    });
    let lp = LogParams {
        dim: d,
        fixed_noise,
    };
    let (lo, hi) = bounds(&lp, &input_scales, target_scale);

    let mut best: Option<Optimum> = None;
    let restarts = config.restarts.max(1);
    for r in 0..restarts {
        let mut draw = |scale: f64| {
            if r == 0 {
                scale.ln()
            } else {
                scale.ln() + rng.random_range((1e-2f64).ln()..(1e2f64).ln())
            }
        };
        let mut x0 = vec![draw(target_scale)];
        for &s in &input_scales {
            x0.push(draw(s));
        }
        if lp.fixed_noise.is_none() {
            x0.push(draw(0.1 * target_scale));
        }
        let opt = maximize(
            |th| {
                let (kernel, sn2) = lp.unpack(th);
                lml_and_grad(&fit_inputs, &fit_y, &kernel, sn2, &lp).ok()
            },
            x0,
            &lo,
            &hi,
            config.max_iters,
            config.grad_tol,
        );
        if let Some(opt) = opt {
            if best.as_ref().is_none_or(|b| opt.lml > b.lml) {
                best = Some(opt);
            }
        }
    }
    let best = best.ok_or(NumericsError::NotPositiveDefinite {
        dim: fit_inputs.nrows(),
        max_jitter: 0.0,
    })?;
    let (kernel, sn2) = lp.unpack(&best.theta);
    if constant_targets && lp.fixed_noise.is_none() && sn2 <= MIN_NOISE_VARIANCE * 1.0001 {
        return Err(GpError::DegenerateData {
            output: output_index,
        });
    }
    log::debug!(
        "output {output_index}: lml {:.4} |grad| {:.2e} after {} iterations (converged: {})",
        best.lml,
        best.grad_norm,
        best.iterations,
        best.converged
    );
    let model = GpModel::new(kernel, sn2, full_inputs, full_y)?;
    let report = FitReport {
        output_index,
        log_marginal_likelihood: best.lml,
        grad_norm: best.grad_norm,
        iterations: best.iterations,
        converged: best.converged,
        restarts,
    };
    Ok((model, report))
}

/// Fits every output dimension independently, in parallel.
pub fn fit_all(dataset: &Dataset, config: &FitConfig) -> Result<Vec<(GpModel, FitReport)>, GpError> {
    (0..dataset.output_dim())
        .into_par_iter()
        .map(|i| fit_hyperparameters(dataset, i, config))
        .collect()
}

/// Conditions one GP per output on the dataset with the given hyperparameters
/// (no fitting). Useful when hyperparameters are shared across experiments.
pub fn condition_all(
    dataset: &Dataset,
    kernels: &[(SeKernel, f64)],
) -> Result<Vec<GpModel>, GpError> {
    check_dim(dataset.output_dim(), kernels.len())?;
    let inputs = Arc::new(dataset.inputs.clone());
    kernels
        .iter()
        .enumerate()
        .map(|(i, (k, sn2))| {
            GpModel::new(
                k.clone(),
                *sn2,
                inputs.clone(),
                dataset.targets.column(i).into_owned(),
            )
        })
        .collect()
}
