//! Probabilistic linearization of the learned dynamics and its norm-bounded
//! reformulation.
//!
//! Each GP's gradient posterior at the operating point gives one row of the
//! Jacobian `[A B]` together with a confidence box. The box is rewritten as
//! `A = Â + HΔE`, `B = B̂ + HΔF` with diagonal `Δ`, `|δ_i| ≤ 1`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{GpError, GpModel};
use crate::matrix_json;
use crate::numerics::{chi2_quantile, NumericsError};

#[derive(Debug, Error)]
pub enum LinearizeError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("uncertainty entry {index} = {value} lies outside [-1, 1]")]
    DeltaOutOfRange { index: usize, value: f64 },
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Posterior variances below this are treated as exactly zero.
const ZERO_VARIANCE: f64 = 1e-14;

/// Jacobian estimate `[Â B̂]` with elementwise bounds `[Ā B̄]` holding jointly
/// with probability at least `prob_per_row^n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UncertainLinearization {
    #[serde(with = "matrix_json")]
    pub a_nominal: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub b_nominal: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub a_bound: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub b_bound: DMatrix<f64>,
    pub prob_per_row: f64,
    pub gamma: f64,
    pub joint_probability: f64,
    pub x_e: Vec<f64>,
    pub u_e: Vec<f64>,
}

impl UncertainLinearization {
    pub fn n(&self) -> usize {
        self.a_nominal.nrows()
    }

    pub fn m(&self) -> usize {
        self.b_nominal.ncols()
    }
}

/// Linearizes the learned dynamics at `(x_e, u_e)`.
///
/// `known_jacobian` is the `n × (n+m)` Jacobian of the known model part; the
/// GP for output `i` contributes its gradient mean to row `i` and the bound
/// `γ·sqrt(diag Σ′_i)` with `γ² = χ²_{n+m}(prob_per_row)`.
pub fn linearize_at(
    gp_models: &[GpModel],
    known_jacobian: &DMatrix<f64>,
    x_e: &[f64],
    u_e: &[f64],
    prob_per_row: f64,
) -> Result<UncertainLinearization, LinearizeError> {
    let n = gp_models.len();
    let m = u_e.len();
    let n_z = n + m;
    if x_e.len() != n {
        return Err(LinearizeError::DimensionMismatch(format!(
            "{} GP models but state of size {}",
            n,
            x_e.len()
        )));
    }
    if known_jacobian.shape() != (n, n_z) {
        return Err(LinearizeError::DimensionMismatch(format!(
            "known Jacobian is {:?}, expected ({n}, {n_z})",
            known_jacobian.shape()
        )));
    }
    let gamma = chi2_quantile(prob_per_row, n_z as u32)?.sqrt();
    let z_e: Vec<f64> = x_e.iter().chain(u_e).copied().collect();
    let mut nominal = known_jacobian.clone();
    let mut bound = DMatrix::zeros(n, n_z);
    for (i, model) in gp_models.iter().enumerate() {
        let d = model.predict_derivative(&z_e)?;
        for j in 0..n_z {
            nominal[(i, j)] += d.mean[j];
            let var = d.covariance.get(j, j);
            bound[(i, j)] = if var < ZERO_VARIANCE {
                0.0
            } else {
                gamma * var.sqrt()
            };
        }
    }
    Ok(UncertainLinearization {
        a_nominal: nominal.columns(0, n).into_owned(),
        b_nominal: nominal.columns(n, m).into_owned(),
        a_bound: bound.columns(0, n).into_owned(),
        b_bound: bound.columns(n, m).into_owned(),
        prob_per_row,
        gamma,
        joint_probability: prob_per_row.powi(n as i32),
        x_e: x_e.to_vec(),
        u_e: u_e.to_vec(),
    })
}

/// `A = Â + HΔE`, `B = B̂ + HΔF` with diagonal `Δ` of size `p_u = n² + nm`.
///
/// The entries of `Δ` follow the row-major order of `Ā` and then `B̄`: entry
/// `(i, j)` of `Ā` is governed by `δ[i·n + j]`, entry `(i, j)` of `B̄` by
/// `δ[n² + i·m + j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormBoundedSystem {
    #[serde(with = "matrix_json")]
    pub a_nominal: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub b_nominal: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub h: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub e: DMatrix<f64>,
    #[serde(with = "matrix_json")]
    pub f: DMatrix<f64>,
}

impl NormBoundedSystem {
    /// Builds the reformulation directly from nominal matrices and bounds.
    pub fn from_bounds(
        a_nominal: DMatrix<f64>,
        b_nominal: DMatrix<f64>,
        a_bound: &DMatrix<f64>,
        b_bound: &DMatrix<f64>,
    ) -> Self {
        let n = a_nominal.nrows();
        let m = b_nominal.ncols();
        assert_eq!(a_nominal.shape(), (n, n));
        assert_eq!(b_nominal.nrows(), n);
        assert_eq!(a_bound.shape(), (n, n));
        assert_eq!(b_bound.shape(), (n, m));
        let p_u = n * n + n * m;
        let mut h = DMatrix::zeros(n, p_u);
        let mut e = DMatrix::zeros(p_u, n);
        let mut f = DMatrix::zeros(p_u, m);
        for i in 0..n {
            for j in 0..n {
                h[(i, i * n + j)] = 1.0;
                e[(i * n + j, j)] = a_bound[(i, j)];
            }
            for j in 0..m {
                h[(i, n * n + i * m + j)] = 1.0;
                f[(n * n + i * m + j, j)] = b_bound[(i, j)];
            }
        }
        Self {
            a_nominal,
            b_nominal,
            h,
            e,
            f,
        }
    }

    /// A system without uncertainty (`E = F = 0`).
    pub fn certain(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        let (n, m) = (a.nrows(), b.ncols());
        Self::from_bounds(a, b, &DMatrix::zeros(n, n), &DMatrix::zeros(n, m))
    }

    pub fn n(&self) -> usize {
        self.a_nominal.nrows()
    }

    pub fn m(&self) -> usize {
        self.b_nominal.ncols()
    }

    pub fn p_u(&self) -> usize {
        self.h.ncols()
    }

    /// Recovers `Ā` from `E`.
    pub fn a_bound(&self) -> DMatrix<f64> {
        let n = self.n();
        DMatrix::from_fn(n, n, |i, j| self.e[(i * n + j, j)])
    }

    /// Recovers `B̄` from `F`.
    pub fn b_bound(&self) -> DMatrix<f64> {
        let (n, m) = (self.n(), self.m());
        DMatrix::from_fn(n, m, |i, j| self.f[(n * n + i * m + j, j)])
    }

    /// Same nominal model with the uncertainty scaled by `alpha ≥ 0`.
    pub fn with_scaled_uncertainty(&self, alpha: f64) -> Self {
        Self {
            e: &self.e * alpha,
            f: &self.f * alpha,
            ..self.clone()
        }
    }
}

pub fn to_norm_bounded(lin: &UncertainLinearization) -> NormBoundedSystem {
    NormBoundedSystem::from_bounds(
        lin.a_nominal.clone(),
        lin.b_nominal.clone(),
        &lin.a_bound,
        &lin.b_bound,
    )
}

/// Realization `(Â + HΔE, B̂ + HΔF)` for `Δ = diag(delta)`.
pub fn sample_realization(
    sys: &NormBoundedSystem,
    delta: &[f64],
) -> Result<(DMatrix<f64>, DMatrix<f64>), LinearizeError> {
    if delta.len() != sys.p_u() {
        return Err(LinearizeError::DimensionMismatch(format!(
            "delta has {} entries, expected {}",
            delta.len(),
            sys.p_u()
        )));
    }
    if let Some((index, &value)) = delta
        .iter()
        .enumerate()
        .find(|(_, d)| !(d.abs() <= 1.0))
    {
        return Err(LinearizeError::DeltaOutOfRange { index, value });
    }
    let mut h_delta = sys.h.clone();
    for (k, mut col) in h_delta.column_iter_mut().enumerate() {
        col *= delta[k];
    }
    Ok((
        &sys.a_nominal + &h_delta * &sys.e,
        &sys.b_nominal + &h_delta * &sys.f,
    ))
}

/// The `δ` vector whose realization equals `Â + Ā∘Ω`, `B̂ + B̄∘Ψ`.
pub fn delta_from_hadamard(omega: &DMatrix<f64>, psi: &DMatrix<f64>) -> Vec<f64> {
    let n = omega.nrows();
    let m = psi.ncols();
    let mut delta = Vec::with_capacity(n * n + n * m);
    for i in 0..n {
        delta.extend(omega.row(i).iter());
    }
    for i in 0..n {
        delta.extend(psi.row(i).iter());
    }
    delta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::SeKernel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn hadamard_two_by_two_example() {
        let sys = NormBoundedSystem::from_bounds(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(2, 1),
            &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            &DMatrix::zeros(2, 1),
        );
        let omega = DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 0.0, 1.0]);
        let delta = delta_from_hadamard(&omega, &DMatrix::zeros(2, 1));
        let (a, _) = sample_realization(&sys, &delta).unwrap();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[0.5, -2.0, 0.0, 4.0]));
    }

    #[test]
    fn structure_of_h_e_f() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, m) = (3, 2);
        let ab = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..1.0));
        let bb = DMatrix::from_fn(n, m, |_, _| rng.random_range(0.0..1.0));
        let sys = NormBoundedSystem::from_bounds(DMatrix::zeros(n, n), DMatrix::zeros(n, m), &ab, &bb);
        assert_eq!(sys.p_u(), n * n + n * m);
        for i in 0..n {
            assert_eq!(sys.h.row(i).sum(), (n + m) as f64);
        }
        assert!(sys.h.iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(sys.e.rows(n * n, n * m).iter().all(|&v| v == 0.0));
        assert!(sys.f.rows(0, n * n).iter().all(|&v| v == 0.0));
        assert_eq!(sys.a_bound(), ab);
        assert_eq!(sys.b_bound(), bb);
    }

    #[test]
    fn zero_uncertainty_realizes_nominal() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -3.0]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let sys = NormBoundedSystem::certain(a.clone(), b.clone());
        assert!(sys.e.iter().all(|&v| v == 0.0) && sys.f.iter().all(|&v| v == 0.0));
        let (ar, br) = sample_realization(&sys, &vec![0.7; sys.p_u()]).unwrap();
        assert_eq!((ar, br), (a, b));
    }

    #[test]
    fn delta_out_of_range_rejected() {
        let sys = NormBoundedSystem::certain(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1));
        assert!(matches!(
            sample_realization(&sys, &[1.5, 0.0]),
            Err(LinearizeError::DeltaOutOfRange { index: 0, .. })
        ));
        assert!(matches!(
            sample_realization(&sys, &[0.0]),
            Err(LinearizeError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn random_realizations_stay_inside_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n = rng.random_range(1..=4);
            let m = rng.random_range(1..=2);
            let ab = DMatrix::from_fn(n, n, |_, _| rng.random_range(0.0..2.0));
            let bb = DMatrix::from_fn(n, m, |_, _| rng.random_range(0.0..2.0));
            let sys = NormBoundedSystem::from_bounds(DMatrix::zeros(n, n), DMatrix::zeros(n, m), &ab, &bb);
            let delta: Vec<f64> = (0..sys.p_u()).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let (a, b) = sample_realization(&sys, &delta).unwrap();
            assert!(a.iter().zip(ab.iter()).all(|(x, bound)| x.abs() <= *bound));
            assert!(b.iter().zip(bb.iter()).all(|(x, bound)| x.abs() <= *bound));
        }
    }

    fn prior_models(n: usize, n_z: usize) -> Vec<GpModel> {
        (0..n)
            .map(|_| GpModel::prior(SeKernel::new(1.0, vec![1.0; n_z]), 0.01))
            .collect()
    }

    #[test]
    fn prior_linearization_bounds() {
        let models = prior_models(2, 3);
        let lin = linearize_at(&models, &DMatrix::zeros(2, 3), &[0.0, 0.0], &[0.0], 0.9).unwrap();
        let gamma = chi2_quantile(0.9, 3).unwrap().sqrt();
        assert!((lin.gamma - gamma).abs() < 1e-12);
        assert!(lin.a_bound.iter().chain(lin.b_bound.iter()).all(|&v| (v - gamma).abs() < 1e-12));
        assert!((lin.joint_probability - 0.81).abs() < 1e-15);

        let zero = linearize_at(&models, &DMatrix::zeros(2, 3), &[0.0, 0.0], &[0.0], 0.0).unwrap();
        assert_eq!(zero.gamma, 0.0);
        assert!(zero.a_bound.iter().chain(zero.b_bound.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn gamma_monotone_in_probability() {
        let models = prior_models(1, 2);
        let mut prev = 0.0;
        for k in 0..20 {
            let p = k as f64 / 20.0;
            let lin = linearize_at(&models, &DMatrix::zeros(1, 2), &[0.0], &[0.0], p).unwrap();
            assert!(lin.gamma >= prev);
            prev = lin.gamma;
        }
    }

    #[test]
    fn bounds_shrink_with_more_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let kernel = SeKernel::new(1.0, vec![0.7, 0.9, 1.3]);
        let z: DMatrix<f64> = DMatrix::from_fn(40, 3, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(40, 2, |r, c| (z[(r, c)]).sin());
        let bound_with = |rows: usize| {
            let inputs = Arc::new(z.rows(0, rows).into_owned());
            let models: Vec<GpModel> = (0..2)
                .map(|c| GpModel::new(kernel.clone(), 0.01, inputs.clone(), y.view((0, c), (rows, 1)).column(0).into_owned()).unwrap())
                .collect();
            let lin = linearize_at(&models, &DMatrix::zeros(2, 3), &[0.1, -0.2], &[0.3], 0.95).unwrap();
            (lin.a_bound, lin.b_bound)
        };
        let mut prev = bound_with(0);
        for rows in [5, 10, 20, 40] {
            let cur = bound_with(rows);
            assert!(cur.0.iter().zip(prev.0.iter()).all(|(c, p)| *c <= p + 1e-9));
            assert!(cur.1.iter().zip(prev.1.iter()).all(|(c, p)| *c <= p + 1e-9));
            prev = cur;
        }
    }

    #[test]
    fn json_round_trip() {
        let models = prior_models(2, 3);
        let lin = linearize_at(&models, &DMatrix::from_fn(2, 3, |i, j| (i + 2 * j) as f64), &[0.0, 1.0], &[0.5], 0.99).unwrap();
        let back: UncertainLinearization = serde_json::from_str(&serde_json::to_string(&lin).unwrap()).unwrap();
        assert_eq!(back, lin);
        let sys = to_norm_bounded(&lin);
        let back: NormBoundedSystem = serde_json::from_str(&serde_json::to_string(&sys).unwrap()).unwrap();
        assert_eq!(back, sys);
    }
}
