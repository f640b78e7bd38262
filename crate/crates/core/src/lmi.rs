//! Affine matrix inequalities for sampled-data stability and performance.
//!
//! Every inequality is an [`AffineLmi`]: a symmetric matrix `C + Σ x_k A_k`
//! over the scalar decision variables of a [`DecisionLayout`], together with
//! the required definiteness. Builders work block-wise and store only the
//! lower block triangle.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linearize::NormBoundedSystem;
use crate::numerics::{max_eigenvalue, min_eigenvalue, CholeskyFactor, NumericsError, SymMatrix};

#[derive(Debug, Error)]
pub enum LmiError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{0} is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Absolute tolerance on `λ_min` for non-strict constraints (normalized units).
pub const PSD_TOLERANCE: f64 = 1e-9;

/// Matrix-valued decision variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    Q1,
    Q2,
    Q3,
    Z1,
    Z2,
    Z3,
    R,
    Y,
    Eta,
}

const SLOTS: [Slot; 9] = [
    Slot::Q1,
    Slot::Q2,
    Slot::Q3,
    Slot::Z1,
    Slot::Z2,
    Slot::Z3,
    Slot::R,
    Slot::Y,
    Slot::Eta,
];

/// Flat indexing of all scalar decision variables.
///
/// Symmetric slots (`Q1, Z1, Z3, R`) store their lower triangle row by row,
/// full slots (`Q2, Q3, Z2, Y`) store all entries row-major, `η` is a single
/// scalar present only when `with_eta` is set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionLayout {
    pub n: usize,
    pub m: usize,
    pub with_eta: bool,
}

impl DecisionLayout {
    pub fn new(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            with_eta: false,
        }
    }

    pub fn with_eta(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            with_eta: true,
        }
    }

    pub fn is_symmetric(slot: Slot) -> bool {
        matches!(slot, Slot::Q1 | Slot::Z1 | Slot::Z3 | Slot::R)
    }

    pub fn shape(&self, slot: Slot) -> (usize, usize) {
        match slot {
            Slot::Y => (self.m, self.n),
            Slot::Eta => (1, 1),
            _ => (self.n, self.n),
        }
    }

    pub fn slot_len(&self, slot: Slot) -> usize {
        let n = self.n;
        match slot {
            Slot::Eta => usize::from(self.with_eta),
            Slot::Y => self.m * n,
            s if Self::is_symmetric(s) => n * (n + 1) / 2,
            _ => n * n,
        }
    }

    pub fn offset(&self, slot: Slot) -> usize {
        SLOTS
            .iter()
            .take_while(|&&s| s != slot)
            .map(|&s| self.slot_len(s))
            .sum()
    }

    pub fn num_vars(&self) -> usize {
        SLOTS.iter().map(|&s| self.slot_len(s)).sum()
    }

    /// Flat index of entry `(i, j)` of a slot. For symmetric slots `(i, j)`
    /// and `(j, i)` share an index.
    pub fn index(&self, slot: Slot, i: usize, j: usize) -> usize {
        let (rows, cols) = self.shape(slot);
        assert!(i < rows && j < cols, "entry ({i}, {j}) outside {slot:?}");
        let local = if Self::is_symmetric(slot) {
            let (r, c) = if i >= j { (i, j) } else { (j, i) };
            r * (r + 1) / 2 + c
        } else {
            i * cols + j
        };
        self.offset(slot) + local
    }

    pub fn eta_index(&self) -> Option<usize> {
        self.with_eta.then(|| self.offset(Slot::Eta))
    }

    /// The slot matrix from a flat assignment.
    pub fn extract(&self, values: &[f64], slot: Slot) -> DMatrix<f64> {
        let (rows, cols) = self.shape(slot);
        DMatrix::from_fn(rows, cols, |i, j| values[self.index(slot, i, j)])
    }

    /// Writes a slot matrix into a flat assignment (lower triangle for
    /// symmetric slots).
    pub fn assign(&self, values: &mut [f64], slot: Slot, mat: &DMatrix<f64>) {
        let (rows, cols) = self.shape(slot);
        assert_eq!(mat.shape(), (rows, cols));
        for i in 0..rows {
            for j in 0..cols {
                if !Self::is_symmetric(slot) || i >= j {
                    values[self.index(slot, i, j)] = mat[(i, j)];
                }
            }
        }
    }

    /// `(flat index, entries)` for every scalar in a slot; entries are the
    /// positions where the scalar appears in the slot matrix.
    fn scalars(&self, slot: Slot) -> Vec<(usize, Vec<(usize, usize)>)> {
        let (rows, cols) = self.shape(slot);
        let mut out = Vec::new();
        if slot == Slot::Eta && !self.with_eta {
            return out;
        }
        for i in 0..rows {
            for j in 0..cols {
                if Self::is_symmetric(slot) {
                    if j > i {
                        continue;
                    }
                    let pos = if i == j { vec![(i, i)] } else { vec![(i, j), (j, i)] };
                    out.push((self.index(slot, i, j), pos));
                } else {
                    out.push((self.index(slot, i, j), vec![(i, j)]));
                }
            }
        }
        out
    }
}

/// Required definiteness of an [`AffineLmi`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    /// `≺ 0`, enforced with a margin of `1e-7·(1 + ‖C‖_F)`.
    StrictNegative,
    /// `⪯ 0` up to [`PSD_TOLERANCE`].
    NegativeSemidefinite,
    /// `⪰ 0` up to [`PSD_TOLERANCE`].
    PositiveSemidefinite,
}

impl Sense {
    /// `+1` if the matrix itself must be positive, `−1` if its negation must.
    pub fn sign(self) -> f64 {
        match self {
            Sense::PositiveSemidefinite => 1.0,
            _ => -1.0,
        }
    }
}

/// Lower-triangle triplets `(row, col, value)` with `row ≥ col`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseSym {
    pub entries: Vec<(u32, u32, f64)>,
}

impl SparseSym {
    pub fn to_sym(&self, dim: usize) -> SymMatrix {
        let mut s = SymMatrix::zeros(dim);
        for &(r, c, v) in &self.entries {
            s.add_to(r as usize, c as usize, v);
        }
        s
    }
}

/// `C + Σ_k x_k A_k` with a definiteness requirement.
///
/// Constructors normalize `C` to unit Frobenius norm; `scale` is the factor
/// that was divided out, so `scale · evaluate(x)` is the matrix as written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineLmi {
    pub label: String,
    pub size: usize,
    pub constant: SymMatrix,
    pub coefficients: Vec<(usize, SparseSym)>,
    pub sense: Sense,
    pub scale: f64,
}

impl AffineLmi {
    /// Wraps raw data without normalization (`scale = 1`).
    pub fn new(
        label: impl Into<String>,
        constant: SymMatrix,
        coefficients: Vec<(usize, SparseSym)>,
        sense: Sense,
    ) -> Self {
        let size = constant.dim();
        for (_, c) in &coefficients {
            assert!(
                c.entries.iter().all(|&(r, col, _)| (r as usize) < size && col <= r),
                "coefficient outside the lower triangle of a {size}x{size} block"
            );
        }
        Self {
            label: label.into(),
            size,
            constant,
            coefficients,
            sense,
            scale: 1.0,
        }
    }

    /// Divides everything by `‖C‖_F` (no-op for a zero constant).
    pub fn normalized(mut self) -> Self {
        let norm = self.constant.frobenius_norm();
        if norm > 0.0 && norm.is_finite() {
            self.constant.scale(1.0 / norm);
            for (_, c) in self.coefficients.iter_mut() {
                c.entries.iter_mut().for_each(|e| e.2 /= norm);
            }
            self.scale *= norm;
        }
        self
    }

    pub fn max_var_index(&self) -> Option<usize> {
        self.coefficients.iter().map(|(k, _)| *k).max()
    }

    /// Normalized matrix at `values`.
    pub fn evaluate(&self, values: &[f64]) -> SymMatrix {
        let mut s = self.constant.clone();
        for (k, c) in &self.coefficients {
            let x = values[*k];
            if x != 0.0 {
                for &(r, col, v) in &c.entries {
                    s.add_to(r as usize, col as usize, x * v);
                }
            }
        }
        s
    }

    /// Margin demanded of a `StrictNegative` constraint, normalized units.
    pub fn strictness_margin(&self) -> f64 {
        match self.sense {
            Sense::StrictNegative => 1e-7 * (1.0 + self.constant.frobenius_norm()),
            _ => 0.0,
        }
    }

    /// Extreme eigenvalue in the direction of the sense (`λ_max` for
    /// negative senses, `λ_min` otherwise), normalized units.
    pub fn extreme_eigenvalue(&self, values: &[f64]) -> Result<f64, NumericsError> {
        let m = self.evaluate(values);
        match self.sense {
            Sense::PositiveSemidefinite => min_eigenvalue(&m),
            _ => max_eigenvalue(&m),
        }
    }

    /// Independent check of a candidate assignment: strict constraints need
    /// `λ_max ≤ −margin/2`, non-strict ones `λ` within [`PSD_TOLERANCE`].
    pub fn is_satisfied(&self, values: &[f64]) -> Result<bool, NumericsError> {
        let lam = self.extreme_eigenvalue(values)?;
        Ok(match self.sense {
            Sense::StrictNegative => lam <= -0.5 * self.strictness_margin(),
            Sense::NegativeSemidefinite => lam <= PSD_TOLERANCE,
            Sense::PositiveSemidefinite => lam >= -PSD_TOLERANCE,
        })
    }
}

/// Block-structured assembly of an [`AffineLmi`].
struct BlockBuilder {
    layout: DecisionLayout,
    offsets: Vec<usize>,
    sizes: Vec<usize>,
    constant: SymMatrix,
    coeffs: BTreeMap<usize, BTreeMap<(u32, u32), f64>>,
}

impl BlockBuilder {
    fn new(layout: DecisionLayout, sizes: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut acc = 0;
        for &s in sizes {
            offsets.push(acc);
            acc += s;
        }
        Self {
            layout,
            offsets,
            sizes: sizes.to_vec(),
            constant: SymMatrix::zeros(acc),
            coeffs: BTreeMap::new(),
        }
    }

    /// Places `m` at block `(bi, bj)`, `bi ≥ bj`; on diagonal blocks only the
    /// lower triangle of `m` is used.
    fn constant(&mut self, bi: usize, bj: usize, m: &DMatrix<f64>) {
        assert!(bi >= bj);
        assert_eq!(m.shape(), (self.sizes[bi], self.sizes[bj]));
        for a in 0..m.nrows() {
            for b in 0..m.ncols() {
                if bi == bj && b > a {
                    continue;
                }
                let v = m[(a, b)];
                if v != 0.0 {
                    self.constant.add_to(self.offsets[bi] + a, self.offsets[bj] + b, v);
                }
            }
        }
    }

    fn push(&mut self, var: usize, bi: usize, bj: usize, a: usize, b: usize, v: f64) {
        if v == 0.0 || (bi == bj && b > a) {
            return;
        }
        let key = ((self.offsets[bi] + a) as u32, (self.offsets[bj] + b) as u32);
        *self.coeffs.entry(var).or_default().entry(key).or_insert(0.0) += v;
    }

    /// Adds `scale · left · X · right` to block `(bi, bj)`, where `X` is the
    /// slot matrix or its transpose. On a diagonal block the term itself must
    /// be symmetric; use [`Self::sym_term`] for `T + Tᵀ`.
    fn term(
        &mut self,
        bi: usize,
        bj: usize,
        left: &DMatrix<f64>,
        slot: Slot,
        transpose: bool,
        right: &DMatrix<f64>,
        scale: f64,
    ) {
        self.term_impl(bi, bj, left, slot, transpose, right, scale, false);
    }

    /// Adds `scale · (T + Tᵀ)` with `T = left · X · right` to diagonal block `bi`.
    fn sym_term(
        &mut self,
        bi: usize,
        left: &DMatrix<f64>,
        slot: Slot,
        transpose: bool,
        right: &DMatrix<f64>,
        scale: f64,
    ) {
        self.term_impl(bi, bi, left, slot, transpose, right, scale, true);
    }

    #[allow(clippy::too_many_arguments)]
    fn term_impl(
        &mut self,
        bi: usize,
        bj: usize,
        left: &DMatrix<f64>,
        slot: Slot,
        transpose: bool,
        right: &DMatrix<f64>,
        scale: f64,
        symmetrize: bool,
    ) {
        assert!(bi >= bj);
        assert_eq!(left.nrows(), self.sizes[bi]);
        assert_eq!(right.ncols(), self.sizes[bj]);
        for (var, positions) in self.layout.scalars(slot) {
            for &(i, j) in &positions {
                // unit matrix E_ij, or E_ji when transposed
                let (i, j) = if transpose { (j, i) } else { (i, j) };
                for a in 0..left.nrows() {
                    let la = left[(a, i)];
                    if la == 0.0 {
                        continue;
                    }
                    for b in 0..right.ncols() {
                        let rb = right[(j, b)];
                        if rb == 0.0 {
                            continue;
                        }
                        let v = scale * la * rb;
                        if symmetrize {
                            // (T + Tᵀ)_{ab}: T_ab lands at (a,b), its mirror at (b,a)
                            self.push(var, bi, bj, a, b, v);
                            self.push(var, bi, bj, b, a, v);
                        } else {
                            self.push(var, bi, bj, a, b, v);
                        }
                    }
                }
            }
        }
    }

    fn finish(self, label: &str, sense: Sense) -> AffineLmi {
        let coefficients = self
            .coeffs
            .into_iter()
            .map(|(k, m)| {
                let entries = m
                    .into_iter()
                    .filter(|(_, v)| *v != 0.0)
                    .map(|((r, c), v)| (r, c, v))
                    .collect();
                (k, SparseSym { entries })
            })
            .filter(|(_, s)| !s.entries.is_empty())
            .collect();
        AffineLmi::new(label, self.constant, coefficients, sense).normalized()
    }
}

fn eye(n: usize) -> DMatrix<f64> {
    DMatrix::identity(n, n)
}

fn check_system(a: &DMatrix<f64>, b: &DMatrix<f64>, layout: &DecisionLayout) -> Result<(), LmiError> {
    if a.shape() != (layout.n, layout.n) || b.shape() != (layout.n, layout.m) {
        return Err(LmiError::DimensionMismatch(format!(
            "system ({:?}, {:?}) does not fit layout n={}, m={}",
            a.shape(),
            b.shape(),
            layout.n,
            layout.m
        )));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<(), LmiError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(LmiError::InvalidParameter(format!("{name} must be positive, got {v}")))
    }
}

/// Adds the sampled-data stability block `W_{A,B}` (blocks 0..3) to `bb`.
fn add_w_block(bb: &mut BlockBuilder, a: &DMatrix<f64>, b: &DMatrix<f64>, t_s: f64) {
    let i_n = eye(a.nrows());
    // (0,0): Q2 + Q2ᵀ + T Z1
    bb.sym_term(0, &i_n, Slot::Q2, false, &i_n, 1.0);
    bb.term(0, 0, &i_n, Slot::Z1, false, &i_n, t_s);
    // (1,0): Q3ᵀ − Q2 + A Q1 + T Z2ᵀ + B Y
    bb.term(1, 0, &i_n, Slot::Q3, true, &i_n, 1.0);
    bb.term(1, 0, &i_n, Slot::Q2, false, &i_n, -1.0);
    bb.term(1, 0, a, Slot::Q1, false, &i_n, 1.0);
    bb.term(1, 0, &i_n, Slot::Z2, true, &i_n, t_s);
    bb.term(1, 0, b, Slot::Y, false, &i_n, 1.0);
    // (1,1): −Q3 − Q3ᵀ + T Z3
    bb.sym_term(1, &i_n, Slot::Q3, false, &i_n, -1.0);
    bb.term(1, 1, &i_n, Slot::Z3, false, &i_n, t_s);
    // (2,0): T Q2, (2,1): T Q3, (2,2): −T R
    bb.term(2, 0, &i_n, Slot::Q2, false, &i_n, t_s);
    bb.term(2, 1, &i_n, Slot::Q3, false, &i_n, t_s);
    bb.term(2, 2, &i_n, Slot::R, false, &i_n, -t_s);
}

/// Adds `[[2Q1 − R, 0, YᵀBᵀ], [*, Z1, Z2], [*, *, Z3]]` (blocks 0..3) to `bb`.
fn add_relaxed_psd_block(bb: &mut BlockBuilder, b: &DMatrix<f64>) {
    let n = b.nrows();
    let i_n = eye(n);
    bb.term(0, 0, &i_n, Slot::Q1, false, &i_n, 2.0);
    bb.term(0, 0, &i_n, Slot::R, false, &i_n, -1.0);
    bb.term(2, 0, b, Slot::Y, false, &i_n, 1.0);
    bb.term(1, 1, &i_n, Slot::Z1, false, &i_n, 1.0);
    bb.term(2, 1, &i_n, Slot::Z2, true, &i_n, 1.0);
    bb.term(2, 2, &i_n, Slot::Z3, false, &i_n, 1.0);
}

/// The two robust stability inequalities for a norm-bounded system at
/// sampling bound `t_s` and fixed multipliers `eps1`, `eps2`:
///
/// ```text
/// [ W_{Â,B̂}   [0;H;0]   ε₁[Q₁Eᵀ+YᵀFᵀ; 0; 0] ]
/// [    *       −ε₁I              0           ]  ≺ 0
/// [    *         *              −ε₁I         ]
///
/// [ 2Q₁−R   0   YᵀB̂ᵀ   0   ε₂YᵀFᵀ ]
/// [   *    Z₁    Z₂    0     0    ]
/// [   *     *    Z₃    H     0    ]  ⪰ 0
/// [   *     *     *   ε₂I    0    ]
/// [   *     *     *    *    ε₂I   ]
/// ```
pub fn robust_stability_constraints(
    sys: &NormBoundedSystem,
    t_s: f64,
    eps1: f64,
    eps2: f64,
    layout: &DecisionLayout,
) -> Result<Vec<AffineLmi>, LmiError> {
    check_system(&sys.a_nominal, &sys.b_nominal, layout)?;
    check_positive("sampling interval", t_s)?;
    check_positive("eps1", eps1)?;
    check_positive("eps2", eps2)?;
    let n = layout.n;
    let p = sys.p_u();
    let i_n = eye(n);
    let i_p = eye(p);
    let sizes = [n, n, n, p, p];

    let mut neg = BlockBuilder::new(*layout, &sizes);
    add_w_block(&mut neg, &sys.a_nominal, &sys.b_nominal, t_s);
    neg.constant(3, 1, &sys.h.transpose());
    neg.term(4, 0, &sys.e, Slot::Q1, false, &i_n, eps1);
    neg.term(4, 0, &sys.f, Slot::Y, false, &i_n, eps1);
    neg.constant(3, 3, &(-eps1 * &i_p));
    neg.constant(4, 4, &(-eps1 * &i_p));

    let mut pos = BlockBuilder::new(*layout, &sizes);
    add_relaxed_psd_block(&mut pos, &sys.b_nominal);
    pos.constant(3, 2, &sys.h.transpose());
    pos.term(4, 0, &sys.f, Slot::Y, false, &i_n, eps2);
    pos.constant(3, 3, &(eps2 * &i_p));
    pos.constant(4, 4, &(eps2 * &i_p));

    Ok(vec![
        neg.finish("robust stability (negative definite)", Sense::StrictNegative),
        pos.finish("robust stability (positive semidefinite)", Sense::PositiveSemidefinite),
    ])
}

/// Stability inequalities for a known system `(A, B)`: `W_{A,B} ≺ 0` and the
/// relaxed positive semidefinite block with `2Q₁ − R` in place of `Q₁R⁻¹Q₁`.
pub fn nominal_synthesis_constraints(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    t_s: f64,
    layout: &DecisionLayout,
) -> Result<Vec<AffineLmi>, LmiError> {
    check_system(a, b, layout)?;
    check_positive("sampling interval", t_s)?;
    let n = layout.n;
    let mut neg = BlockBuilder::new(*layout, &[n, n, n]);
    add_w_block(&mut neg, a, b, t_s);
    let mut pos = BlockBuilder::new(*layout, &[n, n, n]);
    add_relaxed_psd_block(&mut pos, b);
    Ok(vec![
        neg.finish("nominal stability (negative definite)", Sense::StrictNegative),
        pos.finish("nominal stability (positive semidefinite)", Sense::PositiveSemidefinite),
    ])
}

/// Numeric `W_{A,B}` at a full assignment.
pub fn w_matrix(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    t_s: f64,
    values: &[f64],
    layout: &DecisionLayout,
) -> DMatrix<f64> {
    let n = layout.n;
    let q1 = layout.extract(values, Slot::Q1);
    let q2 = layout.extract(values, Slot::Q2);
    let q3 = layout.extract(values, Slot::Q3);
    let z1 = layout.extract(values, Slot::Z1);
    let z2 = layout.extract(values, Slot::Z2);
    let z3 = layout.extract(values, Slot::Z3);
    let r = layout.extract(values, Slot::R);
    let y = layout.extract(values, Slot::Y);
    let xi = &q2 + q2.transpose() + &z1 * t_s;
    let xi_ab = &q3 - q2.transpose() + &q1 * a.transpose() + &z2 * t_s + y.transpose() * b.transpose();
    let mut w = DMatrix::zeros(3 * n, 3 * n);
    w.view_mut((0, 0), (n, n)).copy_from(&xi);
    w.view_mut((0, n), (n, n)).copy_from(&xi_ab);
    w.view_mut((0, 2 * n), (n, n)).copy_from(&(q2.transpose() * t_s));
    w.view_mut((n, n), (n, n)).copy_from(&(-&q3 - q3.transpose() + &z3 * t_s));
    w.view_mut((n, 2 * n), (n, n)).copy_from(&(q3.transpose() * t_s));
    w.view_mut((2 * n, 2 * n), (n, n)).copy_from(&(-&r * t_s));
    for i in 0..3 * n {
        for j in 0..i {
            w[(i, j)] = w[(j, i)];
        }
    }
    w
}

/// Verifies a candidate assignment against the exact stability conditions
/// for a fixed system: returns `(λ_max(W_{A,B}), λ_min(M))` where `M` carries
/// the nonlinear block `Q₁R⁻¹Q₁`. Stability needs the first negative and the
/// second nonnegative.
pub fn nominal_stability_check(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    t_s: f64,
    values: &[f64],
    layout: &DecisionLayout,
) -> Result<(f64, f64), LmiError> {
    check_system(a, b, layout)?;
    let n = layout.n;
    let q1 = layout.extract(values, Slot::Q1);
    let r = layout.extract(values, Slot::R);
    CholeskyFactor::factor_with_jitter(&SymMatrix::from_lower(&q1), 0.0)
        .ok_or(LmiError::NotPositiveDefinite("Q1"))?;
    let r_factor = CholeskyFactor::factor_with_jitter(&SymMatrix::from_lower(&r), 0.0)
        .ok_or(LmiError::NotPositiveDefinite("R"))?;
    let w = w_matrix(a, b, t_s, values, layout);
    let margin_neg = max_eigenvalue(&SymMatrix::symmetrize(&w))?;

    let y = layout.extract(values, Slot::Y);
    let z1 = layout.extract(values, Slot::Z1);
    let z2 = layout.extract(values, Slot::Z2);
    let z3 = layout.extract(values, Slot::Z3);
    let q1_rinv_q1 = &q1 * r_factor.solve(&q1);
    let mut mm = DMatrix::zeros(3 * n, 3 * n);
    mm.view_mut((0, 0), (n, n)).copy_from(&q1_rinv_q1);
    mm.view_mut((0, 2 * n), (n, n)).copy_from(&(y.transpose() * b.transpose()));
    mm.view_mut((n, n), (n, n)).copy_from(&z1);
    mm.view_mut((n, 2 * n), (n, n)).copy_from(&z2);
    mm.view_mut((2 * n, 2 * n), (n, n)).copy_from(&z3);
    for i in 0..3 * n {
        for j in 0..i {
            mm[(i, j)] = mm[(j, i)];
        }
    }
    let margin_psd = min_eigenvalue(&SymMatrix::symmetrize(&mm))?;
    Ok((margin_neg, margin_psd))
}

/// Cost inequality `[[−ηI, Q₁, Yᵀ], [*, −Q_J⁻¹, 0], [*, *, −R_J⁻¹]] ⪯ 0`,
/// equivalent to `ηI ⪰ Q₁Q_JQ₁ + YᵀR_JY`.
pub fn cost_constraint(
    q_cost: &SymMatrix,
    r_cost: &SymMatrix,
    layout: &DecisionLayout,
) -> Result<AffineLmi, LmiError> {
    let (n, m) = (layout.n, layout.m);
    if !layout.with_eta {
        return Err(LmiError::InvalidParameter("cost constraint needs a layout with η".into()));
    }
    if q_cost.dim() != n || r_cost.dim() != m {
        return Err(LmiError::DimensionMismatch(format!(
            "weights of size {} and {} for n={n}, m={m}",
            q_cost.dim(),
            r_cost.dim()
        )));
    }
    let q_inv = CholeskyFactor::factor_with_jitter(q_cost, 0.0)
        .ok_or(LmiError::NotPositiveDefinite("state weight"))?
        .inverse()
        .to_dense();
    let r_inv = CholeskyFactor::factor_with_jitter(r_cost, 0.0)
        .ok_or(LmiError::NotPositiveDefinite("input weight"))?
        .inverse()
        .to_dense();
    let mut bb = BlockBuilder::new(*layout, &[n, n, m]);
    let i_n = eye(n);
    let eta = layout.eta_index().expect("layout has η");
    for i in 0..n {
        bb.push(eta, 0, 0, i, i, -1.0);
    }
    bb.term(1, 0, &i_n, Slot::Q1, false, &i_n, 1.0);
    bb.term(2, 0, &eye(m), Slot::Y, false, &i_n, 1.0);
    bb.constant(1, 1, &(-q_inv));
    bb.constant(2, 2, &(-r_inv));
    Ok(bb.finish("cost bound", Sense::NegativeSemidefinite))
}
