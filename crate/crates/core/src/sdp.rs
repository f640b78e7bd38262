//! Dense log-det barrier SDP solver and the synthesis drivers built on it.
//!
//! Feasibility is decided by maximizing a common slack `t` such that every
//! sense-adjusted constraint satisfies `S_i(x) ⪰ (t + δ_i)·I`; minimization
//! continues from a strictly feasible point with the same barrier. The
//! drivers find the largest certified sampling interval by bisection and the
//! best cost bound at a fixed interval.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linearize::NormBoundedSystem;
use crate::lmi::{
    cost_constraint, robust_stability_constraints, AffineLmi, DecisionLayout, LmiError, Slot,
};
use crate::matrix_json;
use crate::numerics::{dot, sym_eigenvalues, CholeskyFactor, NumericsError, SymMatrix};

#[derive(Debug, Error)]
pub enum SdpError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),
    #[error("no sampling interval of at least {t_min:e} s is feasible for any multiplier")]
    InfeasibleAtAllFrequencies { t_min: f64 },
    #[error("no controller satisfies the cost and stability conditions at T_s = {t_s} s")]
    InfeasibleAtGivenTs { t_s: f64 },
    #[error("Q1 in the certificate is not positive definite")]
    NotPositiveDefinite,
    #[error(transparent)]
    Lmi(#[from] LmiError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// A set of affine matrix inequalities over `num_vars` scalars, with an
/// optional linear objective to minimize.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdpProblem {
    pub num_vars: usize,
    pub constraints: Vec<AffineLmi>,
    pub objective: Vec<(usize, f64)>,
}

impl SdpProblem {
    pub fn feasibility(num_vars: usize, constraints: Vec<AffineLmi>) -> Self {
        Self {
            num_vars,
            constraints,
            objective: Vec::new(),
        }
    }

    fn validate(&self) -> Result<(), SdpError> {
        if self.constraints.is_empty() {
            return Err(SdpError::InvalidProblem("no constraints".into()));
        }
        for c in &self.constraints {
            if let Some(k) = c.max_var_index() {
                if k >= self.num_vars {
                    return Err(SdpError::InvalidProblem(format!(
                        "constraint '{}' references variable {k} of {}",
                        c.label, self.num_vars
                    )));
                }
            }
        }
        if let Some(&(k, _)) = self.objective.iter().find(|(k, _)| *k >= self.num_vars) {
            return Err(SdpError::InvalidProblem(format!("objective references variable {k}")));
        }
        Ok(())
    }

    pub fn objective_value(&self, values: &[f64]) -> f64 {
        self.objective.iter().map(|&(k, c)| c * values[k]).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub mu_initial: f64,
    pub mu_factor: f64,
    pub newton_tol: f64,
    pub mu_min: f64,
    /// Newton iterations allowed per phase.
    pub max_newton: usize,
    /// Variables are confined to a ball of this radius.
    pub ball_radius: f64,
    /// Phase one stops as soon as the common slack reaches this value.
    pub slack_target: f64,
    /// Phase two stops once the duality gap falls below this fraction of |objective|.
    pub objective_rel_tol: f64,
    pub record_trace: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            mu_initial: 1.0,
            mu_factor: 0.2,
            newton_tol: 1e-9,
            mu_min: 1e-10,
            max_newton: 200,
            ball_radius: 1e7,
            slack_target: 1e-6,
            objective_rel_tol: 1e-6,
            record_trace: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    Feasible,
    Infeasible,
    IterationLimit,
    /// The solver reported success but the independent eigenvalue check failed.
    VerificationFailed,
    /// Minimization stopped because the objective cannot beat the given cutoff.
    CutOff,
}

impl SolveStatus {
    pub fn is_success(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::Feasible)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub phase: u8,
    pub newton_iteration: usize,
    pub mu: f64,
    pub slack: f64,
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub status: SolveStatus,
    pub values: Vec<f64>,
    /// Per constraint, in the units the constraint was written in: `λ_max`
    /// for negative senses, `λ_min` for positive semidefinite ones.
    pub margins: Vec<f64>,
    /// Largest common slack reached in phase one (normalized units).
    pub min_slack: f64,
    pub objective_value: Option<f64>,
    pub newton_iterations: usize,
    pub trace: Vec<TraceEntry>,
}

/// Constraint prepared for the barrier: sign folded in, dense constant.
struct Prepared {
    dim: usize,
    offset: f64,
    constant: Vec<f64>,
    vars: Vec<(usize, Vec<(u32, u32, f64)>)>,
    /// union of coefficient positions (lower triangle)
    pattern: Vec<(u32, u32)>,
    /// pattern index of every coefficient entry, parallel to `vars`
    entry_pos: Vec<Vec<u32>>,
}

impl Prepared {
    fn new(c: &AffineLmi) -> Self {
        let d = c.size;
        let s = c.sense.sign();
        let mut constant = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                constant[i * d + j] = s * c.constant.get(i, j);
            }
        }
        let mut slot = vec![u32::MAX; d * (d + 1) / 2];
        let mut pattern = Vec::new();
        let mut vars = Vec::with_capacity(c.coefficients.len());
        let mut entry_pos = Vec::with_capacity(c.coefficients.len());
        for (k, coef) in &c.coefficients {
            let mut pos = Vec::with_capacity(coef.entries.len());
            let entries = coef
                .entries
                .iter()
                .map(|&(r, col, v)| {
                    let key = (r as usize) * (r as usize + 1) / 2 + col as usize;
                    if slot[key] == u32::MAX {
                        slot[key] = pattern.len() as u32;
                        pattern.push((r, col));
                    }
                    pos.push(slot[key]);
                    (r, col, s * v)
                })
                .collect();
            vars.push((*k, entries));
            entry_pos.push(pos);
        }
        Self {
            dim: d,
            offset: c.strictness_margin(),
            constant,
            vars,
            pattern,
            entry_pos,
        }
    }

    /// Lower triangle of `S(x) − shift·I`, row-major.
    fn slack_matrix(&self, x: &[f64], shift: f64) -> Vec<f64> {
        let d = self.dim;
        let mut s = self.constant.clone();
        for (k, entries) in &self.vars {
            let xk = x[*k];
            if xk != 0.0 {
                for &(r, c, v) in entries {
                    s[r as usize * d + c as usize] += xk * v;
                }
            }
        }
        for i in 0..d {
            s[i * d + i] -= shift + self.offset;
        }
        s
    }
}

/// Which barrier problem a Newton iteration works on.
#[derive(Clone, Copy)]
enum Phase {
    /// variables `(x, t)`, minimize `−t/μ + φ`
    Slack { t_cap: f64 },
    /// variables `x`, minimize `cᵀx/μ + φ`
    Objective,
}

struct Barrier<'a> {
    prepared: &'a [Prepared],
    num_vars: usize,
    objective: &'a [(usize, f64)],
    radius2: f64,
    phase: Phase,
}

impl Barrier<'_> {
    fn dim(&self) -> usize {
        match self.phase {
            Phase::Slack { .. } => self.num_vars + 1,
            Phase::Objective => self.num_vars,
        }
    }

    fn split<'z>(&self, z: &'z [f64]) -> (&'z [f64], f64) {
        match self.phase {
            Phase::Slack { .. } => (&z[..self.num_vars], z[self.num_vars]),
            Phase::Objective => (z, 0.0),
        }
    }

    /// Barrier value, `None` outside the domain.
    fn value(&self, z: &[f64], mu: f64) -> Option<f64> {
        let (x, t) = self.split(z);
        let xx = dot(x, x);
        if xx >= self.radius2 {
            return None;
        }
        let mut f = -(self.radius2 - xx).ln();
        match self.phase {
            Phase::Slack { t_cap } => {
                if t >= t_cap {
                    return None;
                }
                f += -t / mu - (t_cap - t).ln();
            }
            Phase::Objective => {
                f += self.objective.iter().map(|&(k, c)| c * x[k]).sum::<f64>() / mu;
            }
        }
        for p in self.prepared {
            let s = p.slack_matrix(x, t);
            let chol = CholeskyFactor::factor_dense_row_major(&s, p.dim)?;
            f -= chol.log_det();
        }
        Some(f)
    }

    /// Value, gradient and Hessian (row-major), `None` outside the domain.
    fn derivatives(&self, z: &[f64], mu: f64) -> Option<(f64, Vec<f64>, Vec<f64>)> {
        let nz = self.dim();
        let (x, t) = self.split(z);
        let mut grad = vec![0.0; nz];
        let mut hess = vec![0.0; nz * nz];
        let xx = dot(x, x);
        let gap = self.radius2 - xx;
        if gap <= 0.0 {
            return None;
        }
        let mut f = -gap.ln();
        for i in 0..self.num_vars {
            grad[i] += 2.0 * x[i] / gap;
            for j in 0..self.num_vars {
                hess[i * nz + j] += 4.0 * x[i] * x[j] / (gap * gap);
            }
            hess[i * nz + i] += 2.0 / gap;
        }
        let t_index = self.num_vars;
        match self.phase {
            Phase::Slack { t_cap } => {
                if t >= t_cap {
                    return None;
                }
                f += -t / mu - (t_cap - t).ln();
                grad[t_index] += -1.0 / mu + 1.0 / (t_cap - t);
                hess[t_index * nz + t_index] += 1.0 / ((t_cap - t) * (t_cap - t));
            }
            Phase::Objective => {
                for &(k, c) in self.objective {
                    f += c * x[k] / mu;
                    grad[k] += c / mu;
                }
            }
        }
        let with_t = matches!(self.phase, Phase::Slack { .. });
        for p in self.prepared {
            let d = p.dim;
            let s = p.slack_matrix(x, t);
            let chol = CholeskyFactor::factor_dense_row_major(&s, d)?;
            f -= chol.log_det();
            let g = chol.inverse_dense();
            let np = p.pattern.len();
            // G² on the pattern, for the coupling with t
            let g2: Vec<f64> = if with_t {
                p.pattern
                    .iter()
                    .map(|&(r, c)| dot(&g[r as usize * d..(r as usize + 1) * d], &g[c as usize * d..(c as usize + 1) * d]))
                    .collect()
            } else {
                Vec::new()
            };
            let g_pat: Vec<f64> = p.pattern.iter().map(|&(r, c)| g[r as usize * d + c as usize]).collect();
            if with_t {
                // ∂/∂t of −logdet(S − tI) is tr(G); second derivative tr(G²)
                grad[t_index] += (0..d).map(|i| g[i * d + i]).sum::<f64>();
                hess[t_index * nz + t_index] += dot(&g, &g);
            }
            let mut m = vec![0.0; np];
            for (jj, (j, entries_j)) in p.vars.iter().enumerate() {
                let pos_j = &p.entry_pos[jj];
                // gradient: −tr(G A_j); Hessian/t coupling: −tr(G² A_j)
                let mut tr_g = 0.0;
                let mut tr_g2 = 0.0;
                for (&(r, c, v), &q) in entries_j.iter().zip(pos_j) {
                    let w = if r == c { v } else { 2.0 * v };
                    tr_g += w * g_pat[q as usize];
                    if with_t {
                        tr_g2 += w * g2[q as usize];
                    }
                }
                grad[*j] -= tr_g;
                if with_t {
                    hess[*j * nz + t_index] -= tr_g2;
                    hess[t_index * nz + *j] -= tr_g2;
                }
                // M = G A_j G on the pattern
                m.iter_mut().for_each(|v| *v = 0.0);
                for &(a, b, v) in entries_j {
                    let (a, b) = (a as usize, b as usize);
                    let ga = &g[a * d..(a + 1) * d];
                    let gb = &g[b * d..(b + 1) * d];
                    if a == b {
                        for (mq, &(r, c)) in m.iter_mut().zip(&p.pattern) {
                            *mq += v * ga[r as usize] * ga[c as usize];
                        }
                    } else {
                        for (mq, &(r, c)) in m.iter_mut().zip(&p.pattern) {
                            let (r, c) = (r as usize, c as usize);
                            *mq += v * (ga[r] * gb[c] + gb[r] * ga[c]);
                        }
                    }
                }
                for (kk, (k, entries_k)) in p.vars.iter().enumerate().skip(jj) {
                    let pos_k = &p.entry_pos[kk];
                    let mut h = 0.0;
                    for (&(r, c, v), &q) in entries_k.iter().zip(pos_k) {
                        let w = if r == c { v } else { 2.0 * v };
                        h += w * m[q as usize];
                    }
                    hess[*j * nz + *k] += h;
                    if kk != jj {
                        hess[*k * nz + *j] += h;
                    }
                }
            }
        }
        Some((f, grad, hess))
    }
}

/// Solves `H Δ = −g` after diagonal equilibration.
fn newton_direction(grad: &[f64], hess: &[f64]) -> Option<Vec<f64>> {
    let n = grad.len();
    let scale: Vec<f64> = (0..n)
        .map(|i| {
            let h = hess[i * n + i];
            if h > 0.0 {
                1.0 / h.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let scaled = SymMatrix::from_fn(n, |i, j| hess[i * n + j] * scale[i] * scale[j]);
    let factor = CholeskyFactor::new(&scaled).ok()?;
    let mut rhs: Vec<f64> = (0..n).map(|i| -grad[i] * scale[i]).collect();
    factor.solve_in_place(&mut rhs);
    Some(rhs.iter().zip(&scale).map(|(v, s)| v * s).collect())
}

enum Centering {
    Converged,
    /// an early-exit predicate fired
    Stopped,
    IterationLimit,
    Breakdown(String),
}

/// Damped Newton iterations on the barrier at fixed `μ`.
fn center(
    barrier: &Barrier<'_>,
    z: &mut Vec<f64>,
    mu: f64,
    options: &SolverOptions,
    iterations: &mut usize,
    mut stop: impl FnMut(&[f64]) -> bool,
) -> Centering {
    loop {
        if stop(z) {
            return Centering::Stopped;
        }
        let Some((f, grad, hess)) = barrier.derivatives(z, mu) else {
            return Centering::Breakdown("iterate left the barrier domain".into());
        };
        let Some(dir) = newton_direction(&grad, &hess) else {
            return Centering::Breakdown("Newton system is not positive definite".into());
        };
        let decrement = -dot(&grad, &dir);
        if decrement / 2.0 <= options.newton_tol {
            return Centering::Converged;
        }
        if *iterations >= options.max_newton {
            return Centering::IterationLimit;
        }
        *iterations += 1;
        let mut step = 1.0;
        let mut moved = false;
        while step > 1e-14 {
            let cand: Vec<f64> = z.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            if let Some(fc) = barrier.value(&cand, mu) {
                if fc <= f - 0.25 * step * decrement {
                    *z = cand;
                    moved = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !moved {
            // no decrease possible at working precision: treat as centered
            return Centering::Converged;
        }
    }
}

fn evaluate_margins(problem: &SdpProblem, values: &[f64]) -> Result<(Vec<f64>, bool), SdpError> {
    let mut margins = Vec::with_capacity(problem.constraints.len());
    let mut ok = true;
    for c in &problem.constraints {
        let lam = c.extreme_eigenvalue(values)?;
        margins.push(lam * c.scale);
        ok &= c.is_satisfied(values)?;
    }
    Ok((margins, ok))
}

fn initial_slack(prepared: &[Prepared], x: &[f64]) -> f64 {
    // λ_min(S) ≥ −‖S‖_F, so this start is strictly inside
    let worst = prepared
        .iter()
        .map(|p| {
            let s = p.slack_matrix(x, 0.0);
            let d = p.dim;
            let mut fro = 0.0;
            for i in 0..d {
                for j in 0..=i {
                    let v = s[i * d + j];
                    fro += if i == j { v * v } else { 2.0 * v * v };
                }
            }
            fro.sqrt()
        })
        .fold(0.0, f64::max);
    -worst - 1.0
}

struct PhaseOne {
    status: SolveStatus,
    x: Vec<f64>,
    slack: f64,
    iterations: usize,
}

fn phase_one(
    problem: &SdpProblem,
    prepared: &[Prepared],
    start: Option<&[f64]>,
    options: &SolverOptions,
    trace: &mut Vec<TraceEntry>,
) -> Result<PhaseOne, SdpError> {
    let nv = problem.num_vars;
    let radius2 = options.ball_radius * options.ball_radius;
    let mut x = match start {
        Some(s) if s.len() == nv && dot(s, s) < 0.25 * radius2 => s.to_vec(),
        _ => vec![0.0; nv],
    };
    let t_cap = 1.0;
    let t0 = initial_slack(prepared, &x).min(t_cap - 1.0);
    x.push(t0);
    let mut z = x;
    let barrier = Barrier {
        prepared,
        num_vars: nv,
        objective: &[],
        radius2,
        phase: Phase::Slack { t_cap },
    };
    let nu = prepared.iter().map(|p| p.dim).sum::<usize>() as f64 + 2.0;
    let target = options.slack_target;
    let mut mu = options.mu_initial;
    let mut iterations = 0;
    let status = loop {
        let outcome = center(&barrier, &mut z, mu, options, &mut iterations, |z| z[nv] >= target);
        let t = z[nv];
        if options.record_trace {
            trace.push(TraceEntry {
                phase: 1,
                newton_iteration: iterations,
                mu,
                slack: t,
                objective: t,
            });
        }
        log::trace!("phase 1: mu {mu:.2e} slack {t:.3e} newton {iterations}");
        match outcome {
            Centering::Stopped => break SolveStatus::Feasible,
            Centering::IterationLimit => break SolveStatus::IterationLimit,
            Centering::Breakdown(msg) => return Err(SdpError::NumericalBreakdown(msg)),
            Centering::Converged => {}
        }
        if t + 1.1 * nu * mu < 0.0 {
            break SolveStatus::Infeasible;
        }
        mu *= options.mu_factor;
        if mu < options.mu_min {
            break if t > 0.0 {
                SolveStatus::Feasible
            } else {
                SolveStatus::Infeasible
            };
        }
    };
    let slack = z[nv];
    z.truncate(nv);
    Ok(PhaseOne {
        status,
        x: z,
        slack,
        iterations,
    })
}

/// Decides feasibility of all constraints (their margins included).
pub fn solve_feasibility(problem: &SdpProblem, options: &SolverOptions) -> Result<SolveResult, SdpError> {
    solve_feasibility_from(problem, None, options)
}

/// As [`solve_feasibility`], starting Newton from `start` when given.
pub fn solve_feasibility_from(
    problem: &SdpProblem,
    start: Option<&[f64]>,
    options: &SolverOptions,
) -> Result<SolveResult, SdpError> {
    problem.validate()?;
    let prepared: Vec<Prepared> = problem.constraints.iter().map(Prepared::new).collect();
    let mut trace = Vec::new();
    let p1 = phase_one(problem, &prepared, start, options, &mut trace)?;
    let (margins, verified) = evaluate_margins(problem, &p1.x)?;
    let status = match p1.status {
        SolveStatus::Feasible if !verified => SolveStatus::VerificationFailed,
        s => s,
    };
    Ok(SolveResult {
        status,
        values: p1.x,
        margins,
        min_slack: p1.slack,
        objective_value: None,
        newton_iterations: p1.iterations,
        trace,
    })
}

/// Minimizes the problem's objective. With `cutoff`, gives up (status
/// `CutOff`) once the objective provably cannot go below it.
///
/// `Optimal` means the duality gap closed to `objective_rel_tol`; `Feasible`
/// means the Newton budget ran out first and the returned point is strictly
/// feasible with `objective_value` an upper bound.
pub fn solve_minimize(
    problem: &SdpProblem,
    start: Option<&[f64]>,
    cutoff: Option<f64>,
    options: &SolverOptions,
) -> Result<SolveResult, SdpError> {
    problem.validate()?;
    let prepared: Vec<Prepared> = problem.constraints.iter().map(Prepared::new).collect();
    let mut trace = Vec::new();
    let p1 = phase_one(problem, &prepared, start, options, &mut trace)?;
    if p1.status != SolveStatus::Feasible {
        let (margins, _) = evaluate_margins(problem, &p1.x)?;
        return Ok(SolveResult {
            status: p1.status,
            values: p1.x,
            margins,
            min_slack: p1.slack,
            objective_value: None,
            newton_iterations: p1.iterations,
            trace,
        });
    }
    let radius2 = options.ball_radius * options.ball_radius;
    let barrier = Barrier {
        prepared: &prepared,
        num_vars: problem.num_vars,
        objective: &problem.objective,
        radius2,
        phase: Phase::Objective,
    };
    let nu = prepared.iter().map(|p| p.dim).sum::<usize>() as f64 + 1.0;
    let mut x = p1.x.clone();
    let mut iterations = 0;
    // start where the objective term is comparable to the barrier
    let mut mu = options.mu_initial.max(problem.objective_value(&x).abs() / nu);
    let status = loop {
        let outcome = center(&barrier, &mut x, mu, options, &mut iterations, |_| false);
        let obj = problem.objective_value(&x);
        if options.record_trace {
            trace.push(TraceEntry {
                phase: 2,
                newton_iteration: iterations,
                mu,
                slack: p1.slack,
                objective: obj,
            });
        }
        log::trace!("phase 2: mu {mu:.2e} objective {obj:.6e} newton {iterations}");
        match outcome {
            // every iterate is strictly feasible, so the point is still a valid
            // (if not optimal) certificate
            Centering::IterationLimit => break SolveStatus::Feasible,
            Centering::Breakdown(msg) => return Err(SdpError::NumericalBreakdown(msg)),
            _ => {}
        }
        let gap = nu * mu;
        if let Some(c) = cutoff {
            if obj - 1.1 * gap > c {
                break SolveStatus::CutOff;
            }
        }
        if gap <= options.objective_rel_tol * obj.abs().max(1e-12) {
            break SolveStatus::Optimal;
        }
        mu *= options.mu_factor;
        if mu < options.mu_min {
            break SolveStatus::Optimal;
        }
    };
    let (margins, verified) = evaluate_margins(problem, &x)?;
    let status = match status {
        SolveStatus::Optimal | SolveStatus::Feasible if !verified => SolveStatus::VerificationFailed,
        s => s,
    };
    let objective_value = Some(problem.objective_value(&x));
    Ok(SolveResult {
        status,
        values: x,
        margins,
        min_slack: p1.slack,
        objective_value,
        newton_iterations: p1.iterations + iterations,
        trace,
    })
}

// ---------------------------------------------------------------------------
// Synthesis drivers

/// A synthesized gain with the certificate that proves it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerDesign {
    #[serde(with = "matrix_json")]
    pub gain: DMatrix<f64>,
    pub t_s_max: f64,
    pub min_frequency: f64,
    pub eps_used: (f64, f64),
    pub eta: Option<f64>,
    pub layout: DecisionLayout,
    pub certificate: SolveResult,
}

/// `K = Y·Q₁⁻¹` from a certificate.
pub fn extract_gain(certificate: &SolveResult, layout: &DecisionLayout) -> Result<DMatrix<f64>, SdpError> {
    let q1 = layout.extract(&certificate.values, Slot::Q1);
    let y = layout.extract(&certificate.values, Slot::Y);
    let f = CholeskyFactor::factor_with_jitter(&SymMatrix::from_lower(&q1), 0.0)
        .ok_or(SdpError::NotPositiveDefinite)?;
    // K Q1 = Y  ⇔  Q1 Kᵀ = Yᵀ
    Ok(f.solve(&y.transpose()).transpose())
}

/// The default multiplier grid `{10⁻³, 10⁻²·⁷, …, 10³}`.
pub fn default_eps_grid() -> Vec<f64> {
    (0..=20).map(|k| 10f64.powf(-3.0 + 0.3 * k as f64)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McfOptions {
    pub eps_grid: Vec<f64>,
    pub t_start: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub rel_tol: f64,
    pub solver: SolverOptions,
}

impl Default for McfOptions {
    fn default() -> Self {
        Self {
            eps_grid: default_eps_grid(),
            t_start: 1e-3,
            t_min: 1e-6,
            t_max: 100.0,
            rel_tol: 1e-3,
            solver: SolverOptions::default(),
        }
    }
}

/// Robust stability feasibility at a fixed sampling bound and multipliers.
pub fn robust_feasibility(
    sys: &NormBoundedSystem,
    t_s: f64,
    eps1: f64,
    eps2: f64,
    start: Option<&[f64]>,
    options: &SolverOptions,
) -> Result<SolveResult, SdpError> {
    let layout = DecisionLayout::new(sys.n(), sys.m());
    let problem = SdpProblem::feasibility(
        layout.num_vars(),
        robust_stability_constraints(sys, t_s, eps1, eps2, &layout)?,
    );
    solve_feasibility_from(&problem, start, options)
}

struct Probe<'a> {
    sys: &'a NormBoundedSystem,
    eps: f64,
    options: &'a SolverOptions,
    warm: Option<Vec<f64>>,
    solves: usize,
}

impl Probe<'_> {
    /// Feasibility at `t`; anything but a verified success counts as infeasible.
    fn check(&mut self, t: f64) -> Result<Option<SolveResult>, SdpError> {
        self.solves += 1;
        let res = match robust_feasibility(self.sys, t, self.eps, 1.0 / self.eps, self.warm.as_deref(), self.options) {
            Ok(r) => r,
            Err(SdpError::NumericalBreakdown(msg)) => {
                log::warn!("eps {:.3e}, T_s {t:.4e}: numerical breakdown ({msg}), treated as infeasible", self.eps);
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        log::debug!(
            "eps {:.3e}, T_s {t:.6e}: {:?} (slack {:.2e}, {} Newton)",
            self.eps,
            res.status,
            res.min_slack,
            res.newton_iterations
        );
        match res.status {
            SolveStatus::Feasible => {
                self.warm = Some(res.values.clone());
                Ok(Some(res))
            }
            SolveStatus::Infeasible => Ok(None),
            other => {
                log::warn!("eps {:.3e}, T_s {t:.4e}: {other:?}, treated as infeasible", self.eps);
                Ok(None)
            }
        }
    }
}

/// Largest sampling bound with a robust stability certificate, searched over
/// the multiplier grid with `ε₁ = ε`, `ε₂ = 1/ε`.
///
/// Per multiplier: geometric bracketing from `t_start` (shrinking ×0.1 down
/// to `t_min`, growing ×2 up to `t_max`), then bisection until the bracket
/// ratio is below `1 + rel_tol`. Multipliers that cannot beat the best bound
/// found so far are discarded after one solve.
pub fn min_control_frequency(sys: &NormBoundedSystem, options: &McfOptions) -> Result<ControllerDesign, SdpError> {
    if options.eps_grid.is_empty() || options.eps_grid.iter().any(|&e| !(e > 0.0)) {
        return Err(SdpError::InvalidProblem("multiplier grid must be nonempty and positive".into()));
    }
    if !(options.t_min > 0.0 && options.t_min <= options.t_start && options.t_start <= options.t_max) {
        return Err(SdpError::InvalidProblem("need 0 < t_min <= t_start <= t_max".into()));
    }
    // multipliers near 1 first: they usually give the best bound, which then
    // prunes the rest of the grid cheaply
    let mut grid = options.eps_grid.clone();
    grid.sort_by(|a, b| a.ln().abs().total_cmp(&b.ln().abs()));

    let layout = DecisionLayout::new(sys.n(), sys.m());
    let mut best: Option<(f64, f64, SolveResult)> = None;
    let mut total_solves = 0;
    let mut warm: Option<Vec<f64>> = None;
    for &eps in &grid {
        let mut probe = Probe {
            sys,
            eps,
            options: &options.solver,
            warm: warm.clone(),
            solves: 0,
        };
        let (mut lo, mut lo_res, mut hi) = match &best {
            Some((t_best, _, _)) => {
                let t = t_best * (1.0 + options.rel_tol);
                match probe.check(t)? {
                    Some(r) => (t, r, None),
                    None => {
                        total_solves += probe.solves;
                        continue;
                    }
                }
            }
            None => {
                let mut t = options.t_start;
                let mut found = probe.check(t)?;
                let mut hi = None;
                while found.is_none() {
                    hi = Some(t);
                    t *= 0.1;
                    if t < options.t_min * (1.0 - 1e-12) {
                        break;
                    }
                    found = probe.check(t)?;
                }
                match found {
                    Some(r) => (t, r, hi),
                    None => {
                        total_solves += probe.solves;
                        continue;
                    }
                }
            }
        };
        if hi.is_none() {
            loop {
                if lo >= options.t_max {
                    break;
                }
                let t = (2.0 * lo).min(options.t_max);
                match probe.check(t)? {
                    Some(r) => {
                        lo = t;
                        lo_res = r;
                    }
                    None => {
                        hi = Some(t);
                        break;
                    }
                }
            }
        }
        if let Some(mut h) = hi {
            while h / lo > 1.0 + options.rel_tol {
                let mid = (lo * h).sqrt();
                match probe.check(mid)? {
                    Some(r) => {
                        lo = mid;
                        lo_res = r;
                    }
                    None => h = mid,
                }
            }
        }
        total_solves += probe.solves;
        log::debug!("eps {eps:.3e}: T_s_max {lo:.6e}");
        if best.as_ref().is_none_or(|(t, _, _)| lo > *t) {
            warm = Some(lo_res.values.clone());
            best = Some((lo, eps, lo_res));
        }
    }
    log::debug!("minimum control frequency search used {total_solves} solves");
    let Some((t_s_max, eps, certificate)) = best else {
        return Err(SdpError::InfeasibleAtAllFrequencies { t_min: options.t_min });
    };
    let gain = extract_gain(&certificate, &layout)?;
    Ok(ControllerDesign {
        gain,
        t_s_max,
        min_frequency: 1.0 / t_s_max,
        eps_used: (eps, 1.0 / eps),
        eta: None,
        layout,
        certificate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerformanceOptions {
    pub eps1_grid: Vec<f64>,
    pub eps2_grid: Vec<f64>,
    /// Skip pairs that the scaling symmetry proves no better than a pair
    /// already solved. Exact; disable only to cross-check.
    pub skip_dominated: bool,
    pub solver: SolverOptions,
}

impl Default for PerformanceOptions {
    fn default() -> Self {
        let coarse: Vec<f64> = (0..=4).map(|k| 10f64.powi(k - 2)).collect();
        Self {
            eps1_grid: coarse.clone(),
            eps2_grid: coarse,
            skip_dominated: true,
            solver: SolverOptions::default(),
        }
    }
}

/// Smallest cost bound `η` with a robust stability certificate at sampling
/// bound `t_s`, searched over the grid of `(ε₁, ε₂)` pairs.
pub fn optimize_performance(
    sys: &NormBoundedSystem,
    t_s: f64,
    q_cost: &SymMatrix,
    r_cost: &SymMatrix,
    options: &PerformanceOptions,
) -> Result<(f64, ControllerDesign), SdpError> {
    if options.eps1_grid.is_empty() || options.eps2_grid.is_empty() {
        return Err(SdpError::InvalidProblem("multiplier grids must be nonempty".into()));
    }
    let layout = DecisionLayout::with_eta(sys.n(), sys.m());
    let cost = cost_constraint(q_cost, r_cost, &layout)?;
    let eta = layout.eta_index().expect("layout has η");
    let mut best: Option<(f64, (f64, f64), SolveResult)> = None;
    let mut warm: Option<Vec<f64>> = None;
    // Scaling every matrix variable by 1/c and both multipliers by c maps
    // certificates onto certificates and divides η by c². Along a fixed ratio
    // ε₁/ε₂ the largest pair that solves is therefore the best one, so pairs
    // are visited by decreasing product and smaller pairs on a solved ratio
    // are skipped.
    let mut pairs: Vec<(f64, f64)> = options
        .eps1_grid
        .iter()
        .flat_map(|&e1| options.eps2_grid.iter().map(move |&e2| (e1, e2)))
        .collect();
    pairs.sort_by(|a, b| (b.0 * b.1).total_cmp(&(a.0 * a.1)).then(a.0.total_cmp(&b.0)));
    let mut solved_ratios: Vec<f64> = Vec::new();
    for (e1, e2) in pairs {
        let ratio = e1 / e2;
        if options.skip_dominated && solved_ratios.iter().any(|r| (r / ratio - 1.0).abs() < 1e-9) {
            continue;
        }
        let mut constraints = robust_stability_constraints(sys, t_s, e1, e2, &layout)?;
        constraints.push(cost.clone());
        let problem = SdpProblem {
            num_vars: layout.num_vars(),
            constraints,
            objective: vec![(eta, 1.0)],
        };
        let cutoff = best.as_ref().map(|b| b.0);
        let res = match solve_minimize(&problem, warm.as_deref(), cutoff, &options.solver) {
            Ok(r) => r,
            Err(SdpError::NumericalBreakdown(msg)) => {
                log::warn!("eps ({e1:.2e}, {e2:.2e}): numerical breakdown ({msg}), skipped");
                continue;
            }
            Err(e) => return Err(e),
        };
        log::debug!("eps ({e1:.2e}, {e2:.2e}): {:?} eta {:?}", res.status, res.objective_value);
        if res.status.is_success() || res.status == SolveStatus::CutOff {
            solved_ratios.push(ratio);
        }
        if !res.status.is_success() {
            continue;
        }
        let value = res.objective_value.expect("optimal results carry an objective");
        if best.as_ref().is_none_or(|b| value < b.0) {
            warm = Some(res.values.clone());
            best = Some((value, (e1, e2), res));
        }
    }
    let Some((value, eps_used, certificate)) = best else {
        return Err(SdpError::InfeasibleAtGivenTs { t_s });
    };
    let gain = extract_gain(&certificate, &layout)?;
    Ok((
        value,
        ControllerDesign {
            gain,
            t_s_max: t_s,
            min_frequency: 1.0 / t_s,
            eps_used,
            eta: Some(value),
            layout,
            certificate,
        },
    ))
}

/// Rescales a certificate by `1/c` on every matrix variable (η by `1/c²`).
pub fn rescale_certificate(values: &[f64], layout: &DecisionLayout, c: f64) -> Vec<f64> {
    let mut out: Vec<f64> = values.iter().map(|v| v / c).collect();
    if let Some(k) = layout.eta_index() {
        out[k] = values[k] / (c * c);
    }
    out
}

/// Eigenvalues of every constraint at `values` (normalized units), for
/// diagnostics.
pub fn constraint_spectra(problem: &SdpProblem, values: &[f64]) -> Result<Vec<Vec<f64>>, SdpError> {
    problem
        .constraints
        .iter()
        .map(|c| Ok(sym_eigenvalues(&c.evaluate(values))?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmi::{nominal_synthesis_constraints, Sense, SparseSym};

    fn scalar_lmi(label: &str, constant: f64, coef: f64, sense: Sense) -> AffineLmi {
        AffineLmi::new(
            label,
            SymMatrix::from_diagonal(&[constant]),
            vec![(0, SparseSym { entries: vec![(0, 0, coef)] })],
            sense,
        )
    }

    #[test]
    fn scalar_feasible() {
        // x·I₂ − I₂ ⪰ 0
        let c = AffineLmi::new(
            "x >= 1",
            SymMatrix::from_diagonal(&[-1.0, -1.0]),
            vec![(0, SparseSym { entries: vec![(0, 0, 1.0), (1, 1, 1.0)] })],
            Sense::PositiveSemidefinite,
        )
        .normalized();
        let res = solve_feasibility(&SdpProblem::feasibility(1, vec![c]), &SolverOptions::default()).unwrap();
        assert_eq!(res.status, SolveStatus::Feasible);
        assert!(res.values[0] >= 1.0);
    }

    #[test]
    fn contradictory_intervals_infeasible() {
        // x ≤ −1 and x ≥ 1
        let a = scalar_lmi("x <= -1", 1.0, 1.0, Sense::NegativeSemidefinite);
        let b = scalar_lmi("x >= 1", -1.0, 1.0, Sense::PositiveSemidefinite);
        let res = solve_feasibility(&SdpProblem::feasibility(1, vec![a, b]), &SolverOptions::default()).unwrap();
        assert_eq!(res.status, SolveStatus::Infeasible);
    }

    #[test]
    fn invalid_problem_rejected() {
        let a = scalar_lmi("x", 1.0, 1.0, Sense::PositiveSemidefinite);
        assert!(matches!(
            solve_feasibility(&SdpProblem::feasibility(0, vec![a]), &SolverOptions::default()),
            Err(SdpError::InvalidProblem(_))
        ));
    }

    #[test]
    fn minimize_scalar() {
        // minimize x subject to x ≥ 2
        let c = scalar_lmi("x >= 2", -2.0, 1.0, Sense::PositiveSemidefinite).normalized();
        let p = SdpProblem {
            num_vars: 1,
            constraints: vec![c],
            objective: vec![(0, 1.0)],
        };
        let res = solve_minimize(&p, None, None, &SolverOptions::default()).unwrap();
        assert_eq!(res.status, SolveStatus::Optimal);
        assert!((res.objective_value.unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn scalar_plant_nominal_synthesis() {
        let a = DMatrix::from_element(1, 1, -1.0);
        let b = DMatrix::from_element(1, 1, 1.0);
        let layout = DecisionLayout::new(1, 1);
        let cons = nominal_synthesis_constraints(&a, &b, 0.5, &layout).unwrap();
        let res = solve_feasibility(&SdpProblem::feasibility(layout.num_vars(), cons), &SolverOptions::default()).unwrap();
        assert_eq!(res.status, SolveStatus::Feasible);
        let (neg, psd) = crate::lmi::nominal_stability_check(&a, &b, 0.5, &res.values, &layout).unwrap();
        assert!(neg < 0.0 && psd >= -1e-8);
        let k = extract_gain(&res, &layout).unwrap()[(0, 0)];
        // exact discretization of ẋ = −x + u under ZOH with u = k·x(t_k)
        let phi = (-0.5f64).exp();
        let closed = phi + (1.0 - phi) * k;
        assert!(closed.abs() < 1.0, "gain {k}");
    }

    #[test]
    fn gain_extraction_cases() {
        let layout = DecisionLayout::new(2, 1);
        let mut v = vec![0.0; layout.num_vars()];
        layout.assign(&mut v, Slot::Q1, &DMatrix::identity(2, 2));
        let y = DMatrix::from_row_slice(1, 2, &[0.5, -2.0]);
        layout.assign(&mut v, Slot::Y, &y);
        let res = SolveResult {
            status: SolveStatus::Feasible,
            values: v.clone(),
            margins: vec![],
            min_slack: 0.0,
            objective_value: None,
            newton_iterations: 0,
            trace: vec![],
        };
        assert_eq!(extract_gain(&res, &layout).unwrap(), y);
        let q1 = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        layout.assign(&mut v, Slot::Q1, &q1);
        let res = SolveResult { values: v.clone(), ..res };
        let k = extract_gain(&res, &layout).unwrap();
        assert!((&k * &q1 - &y).amax() < 1e-14);
        let scaled = SolveResult {
            values: rescale_certificate(&v, &layout, 7.0),
            ..res.clone()
        };
        assert!((extract_gain(&scaled, &layout).unwrap() - k).amax() < 1e-10);
        layout.assign(&mut v, Slot::Y, &DMatrix::zeros(1, 2));
        let res = SolveResult { values: v, ..res };
        assert!(extract_gain(&res, &layout).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn default_grid_shape() {
        let g = default_eps_grid();
        assert_eq!(g.len(), 21);
        assert!((g[0] - 1e-3).abs() < 1e-15 && (g[20] - 1e3).abs() < 1e-9);
    }

    fn small_system(bound: f64) -> NormBoundedSystem {
        NormBoundedSystem::from_bounds(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, -1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            &DMatrix::from_element(2, 2, bound),
            &DMatrix::from_row_slice(2, 1, &[0.0, bound]),
        )
    }

    fn quick_options() -> McfOptions {
        McfOptions {
            eps_grid: (0..=6).map(|k| 10f64.powi(k - 3)).collect(),
            ..McfOptions::default()
        }
    }

    #[test]
    fn barrier_derivatives_match_finite_differences() {
        let sys = small_system(0.1);
        let layout = DecisionLayout::new(2, 1);
        let mut cons = robust_stability_constraints(&sys, 0.05, 1.0, 1.0, &layout).unwrap();
        cons.push(scalar_lmi("x0 >= -3", 3.0, 1.0, Sense::PositiveSemidefinite).normalized());
        let problem = SdpProblem::feasibility(layout.num_vars(), cons);
        let prepared: Vec<Prepared> = problem.constraints.iter().map(Prepared::new).collect();
        let p1 = phase_one(&problem, &prepared, None, &SolverOptions::default(), &mut Vec::new()).unwrap();
        assert_eq!(p1.status, SolveStatus::Feasible);
        let objective = [(0usize, 1.0), (5, -0.5)];
        for phase in [Phase::Slack { t_cap: 1.0 }, Phase::Objective] {
            let barrier = Barrier {
                prepared: &prepared,
                num_vars: problem.num_vars,
                objective: &objective,
                radius2: 1e14,
                phase,
            };
            let mut z = p1.x.clone();
            if matches!(phase, Phase::Slack { .. }) {
                z.push(p1.slack * 0.5);
            }
            let mu = 0.3;
            let (_, grad, hess) = barrier.derivatives(&z, mu).unwrap();
            let nz = z.len();
            for k in 0..nz {
                let h = 1e-6 * z[k].abs().max(1.0);
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[k] += h;
                zm[k] -= h;
                let fd = (barrier.value(&zp, mu).unwrap() - barrier.value(&zm, mu).unwrap()) / (2.0 * h);
                assert!((fd - grad[k]).abs() <= 1e-5 * (1.0 + grad[k].abs()), "grad {k}: {fd} vs {}", grad[k]);
                let gp = barrier.derivatives(&zp, mu).unwrap().1;
                let gm = barrier.derivatives(&zm, mu).unwrap().1;
                for j in 0..nz {
                    let fd = (gp[j] - gm[j]) / (2.0 * h);
                    let an = hess[j * nz + k];
                    assert!((fd - an).abs() <= 1e-4 * (1.0 + an.abs()), "hess ({j},{k}): {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn bisection_endpoint_brackets_the_boundary() {
        let sys = small_system(0.1);
        let opts = quick_options();
        let d = min_control_frequency(&sys, &opts).unwrap();
        let (e1, e2) = d.eps_used;
        assert!((d.min_frequency * d.t_s_max - 1.0).abs() < 1e-12);
        assert_eq!(d.certificate.status, SolveStatus::Feasible);
        let at = robust_feasibility(&sys, d.t_s_max, e1, e2, None, &opts.solver).unwrap();
        assert_eq!(at.status, SolveStatus::Feasible);
        let above = robust_feasibility(&sys, 1.002 * d.t_s_max, e1, e2, None, &opts.solver).unwrap();
        assert_eq!(above.status, SolveStatus::Infeasible);
        // the certified gain matches K = Y Q1⁻¹ on the returned certificate
        assert_eq!(d.gain, extract_gain(&d.certificate, &d.layout).unwrap());
    }

    #[test]
    fn more_uncertainty_never_raises_the_bound() {
        let opts = quick_options();
        let t: Vec<f64> = [0.02, 0.05, 0.1]
            .iter()
            .map(|&b| min_control_frequency(&small_system(b), &opts).unwrap().t_s_max)
            .collect();
        assert!(t[0] >= t[1] * (1.0 - 2e-3) && t[1] >= t[2] * (1.0 - 2e-3), "{t:?}");
        assert!(t[0] > t[2]);
    }

    #[test]
    fn rescaled_certificate_stays_feasible() {
        let sys = small_system(0.1);
        let d = min_control_frequency(&sys, &quick_options()).unwrap();
        let (e1, e2) = d.eps_used;
        for c in [0.1, 10.0] {
            let values = rescale_certificate(&d.certificate.values, &d.layout, c);
            let cons = robust_stability_constraints(&sys, d.t_s_max, c * e1, c * e2, &d.layout).unwrap();
            for con in &cons {
                let lam = con.extreme_eigenvalue(&values).unwrap();
                match con.sense {
                    Sense::StrictNegative => assert!(lam < 0.0, "c {c}: {lam}"),
                    _ => assert!(lam >= -1e-8, "c {c}: {lam}"),
                }
            }
            let scaled = SolveResult {
                values,
                ..d.certificate.clone()
            };
            let k = extract_gain(&scaled, &d.layout).unwrap();
            assert!((k - &d.gain).amax() <= 1e-10 * d.gain.amax().max(1.0));
        }
    }

    #[test]
    fn robust_certificate_covers_realizations() {
        use rand::{Rng, SeedableRng};
        let sys = small_system(0.1);
        let d = min_control_frequency(&sys, &quick_options()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let delta: Vec<f64> = (0..sys.p_u()).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let (a, b) = crate::linearize::sample_realization(&sys, &delta).unwrap();
            let (w, m) = crate::lmi::nominal_stability_check(&a, &b, d.t_s_max, &d.certificate.values, &d.layout).unwrap();
            assert!(w < 0.0 && m >= -1e-8, "W {w}, M {m}");
        }
    }

    #[test]
    fn autonomous_stable_system_allows_long_intervals() {
        let sys = NormBoundedSystem::certain(
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -2.0]),
            DMatrix::from_row_slice(2, 1, &[0.3, 1.0]),
        );
        let d = min_control_frequency(&sys, &McfOptions::default()).unwrap();
        assert!(d.t_s_max >= 1.0, "{}", d.t_s_max);
    }

    #[test]
    fn hopeless_uncertainty_is_reported() {
        // the sign of the input gain is unknown
        let sys = NormBoundedSystem::from_bounds(
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
            &DMatrix::zeros(1, 1),
            &DMatrix::from_element(1, 1, 2.0),
        );
        let opts = McfOptions {
            t_min: 1e-4,
            ..quick_options()
        };
        assert!(matches!(
            min_control_frequency(&sys, &opts),
            Err(SdpError::InfeasibleAtAllFrequencies { .. })
        ));
    }

    #[test]
    fn cost_bound_improves_with_faster_sampling() {
        let sys = small_system(0.05);
        let d = min_control_frequency(&sys, &quick_options()).unwrap();
        let q = SymMatrix::identity(2);
        let r = SymMatrix::from_diagonal(&[0.1]);
        let opts = PerformanceOptions::default();
        let etas: Vec<f64> = [1.0, 2.0, 4.0]
            .iter()
            .map(|&xi| optimize_performance(&sys, d.t_s_max / xi, &q, &r, &opts).unwrap().0)
            .collect();
        assert!(etas[1] <= etas[0] * (1.0 + 1e-4) && etas[2] <= etas[1] * (1.0 + 1e-4), "{etas:?}");
        assert!(matches!(
            optimize_performance(&sys, 1.5 * d.t_s_max, &q, &r, &opts),
            Err(SdpError::InfeasibleAtGivenTs { .. })
        ));
    }

    #[test]
    fn design_json_round_trip() {
        let d = min_control_frequency(&small_system(0.1), &quick_options()).unwrap();
        let json = serde_json::to_string(&d).unwrap();
        let back: ControllerDesign = serde_json::from_str(&json).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn skipping_dominated_pairs_keeps_the_optimum() {
        let sys = small_system(0.05);
        let t_s = 0.5 * min_control_frequency(&sys, &quick_options()).unwrap().t_s_max;
        let q = SymMatrix::identity(2);
        let r = SymMatrix::from_diagonal(&[0.1]);
        let fast = PerformanceOptions::default();
        let full = PerformanceOptions {
            skip_dominated: false,
            ..PerformanceOptions::default()
        };
        let (eta_fast, d_fast) = optimize_performance(&sys, t_s, &q, &r, &fast).unwrap();
        let (eta_full, d_full) = optimize_performance(&sys, t_s, &q, &r, &full).unwrap();
        assert!((eta_fast - eta_full).abs() <= 1e-4 * eta_full, "{eta_fast} vs {eta_full}");
        assert!((&d_fast.gain - &d_full.gain).amax() <= 1e-3 * d_full.gain.amax());
    }
}
