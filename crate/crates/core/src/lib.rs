//! Learning-based robust sampled-data control.
//!
//! The pipeline learns the unknown part of a continuous-time system with
//! Gaussian processes, turns the learned gradients into a linear model with
//! norm-bounded uncertainty, and synthesizes a state-feedback gain through
//! linear matrix inequalities that certify stability for every sampling
//! interval up to a bound `T_s`. Bisection over `T_s` yields the minimum
//! control frequency; a cost inequality adds performance optimization.
//!
//! Modules, bottom-up:
//!
//! - [`numerics`]: packed symmetric matrices, Cholesky, Jacobi eigensolver, chi-squared quantile
//! - [`gp`]: SE-kernel GP regression, hyperparameter fitting, gradient prediction
//! - [`linearize`]: probabilistic linearization and the norm-bounded reformulation
//! - [`lmi`]: affine matrix constraints for stability and cost
//! - [`sdp`]: barrier SDP solver, minimum control frequency, performance optimization
//! - [`sim`]: plant models, dataset generation, sampled-data simulation, cost
//! - [`experiment`] and [`render`]: sweep harness, CSV outputs and SVG plots

pub mod experiment;
pub mod gp;
pub mod linearize;
pub mod lmi;
pub mod numerics;
pub mod render;
pub mod sdp;
pub mod sim;

/// Serde adapter storing a dense matrix as `{rows, cols, data}` with `data`
/// in row-major order.
pub mod matrix_json {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Repr {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter());
        }
        Repr {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let r = Repr::deserialize(d)?;
        if r.data.len() != r.rows * r.cols {
            return Err(D::Error::custom(format!(
                "matrix data has {} entries, expected {}x{}",
                r.data.len(),
                r.rows,
                r.cols
            )));
        }
        Ok(DMatrix::from_row_slice(r.rows, r.cols, &r.data))
    }
}
