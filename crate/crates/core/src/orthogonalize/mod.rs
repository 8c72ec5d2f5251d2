//! Transformations of the upstream Jacobian `W̃ = W_{i+1} M_i`.
//!
//! * [`orthogonalize_topk`]: exact `U_k V_kᵀ` from the reduced SVD.
//! * [`newton_schulz_orthogonalize`]: the same target reached by iterating a
//!   fitted odd matrix polynomial (no SVD).
//! * [`precondition`]: `(W̃_σᵀ W̃_σ)^{-1/2} W̃_σᵀ`, whose covariance is exactly
//!   the identity.
//!
//! All functions return the *projection* `W̃'` (guess directions are
//! `y = W̃'ᵀ ε`), so the guess covariance is `W̃'ᵀ W̃'`.

mod newton_schulz;
mod polynomial;

pub use newton_schulz::{newton_schulz_orthogonalize, newton_schulz_with_norm};
pub(crate) use newton_schulz::{NORM_ITERS, NORM_SEED};
pub use polynomial::{
    fit_step_polynomial, fit_unit_polynomial, BankEntry, FitOptions, OddPolynomial,
    StepPolynomialBank, BANK_GRID,
};

use crate::error::Result;
use crate::linalg::{
    complete_orthonormal, matmul_nt, reduced_svd, symmetric_eigen_top, Matrix, SvdResult,
};

/// Default regulariser for [`precondition`].
pub const DEFAULT_PRECONDITION_SIGMA: f64 = 1e-5;

/// `U_k V_kᵀ` built from the `min(k, rank)` leading singular triples of `w`.
/// A zero matrix maps to a zero matrix of the same shape.
pub fn orthogonalize_topk(w_tilde: &Matrix, k: usize) -> Result<Matrix> {
    let svd = reduced_svd(w_tilde)?;
    Ok(product_of_columns(&svd.u, &svd.v, 0..k.min(svd.rank), w_tilde.shape()))
}

/// The bottom-`k` counterpart of [`orthogonalize_topk`]: `U_k V_kᵀ` for the
/// `k` *smallest* singular values among the `min(m, n)` singular triples of
/// the thin SVD, zeros included. Singular vectors for zero singular values are
/// completed orthonormally.
pub fn orthogonalize_bottomk(w_tilde: &Matrix, k: usize) -> Result<Matrix> {
    let (m, n) = w_tilde.shape();
    let p = m.min(n);
    let svd = reduced_svd(w_tilde)?;
    let u = complete_orthonormal(&svd.u, p);
    let v = complete_orthonormal(&svd.v, p);
    let k = k.min(p);
    Ok(product_of_columns(&u, &v, (p - k)..p, (m, n)))
}

fn product_of_columns(
    u: &Matrix,
    v: &Matrix,
    cols: std::ops::Range<usize>,
    shape: (usize, usize),
) -> Matrix {
    if cols.is_empty() {
        return Matrix::zeros(shape.0, shape.1);
    }
    let idx: Vec<usize> = cols.collect();
    matmul_nt(&u.select_columns(&idx), &v.select_columns(&idx))
}

/// Preconditioned projection with identity covariance.
///
/// With `W̃ = U S Vᵀ` (full `n x n` right basis, zero singular values
/// included), `W̃_σ = U (S² + σI)^{1/2} Vᵀ` and the returned matrix is
/// `W̃'_σ = W̃_σ (W̃_σᵀ W̃_σ)^{-1/2}`. The output has `max(m, n)` rows so the
/// left factor can carry a full orthonormal frame even when `W̃` is wide; for
/// `m < n` the first `m` rows span the original output space and the guess
/// noise must be drawn with `max(m, n)` components.
pub fn precondition(w_tilde: &Matrix, sigma: f64) -> Result<Matrix> {
    let svd = reduced_svd(w_tilde)?;
    Ok(precondition_from_factors(
        &svd.u,
        &svd.singular_values,
        &svd.v,
        w_tilde.shape(),
        sigma,
    ))
}

/// [`precondition`] given the nonzero singular triples (`u`: `m x r`,
/// `v`: `n x r`) of an `m x n` matrix.
pub fn precondition_from_factors(
    u: &Matrix,
    singular_values: &[f64],
    v: &Matrix,
    shape: (usize, usize),
    sigma: f64,
) -> Matrix {
    assert!(sigma > 0.0, "precondition needs sigma > 0");
    let (m, n) = shape;
    let p = m.max(n);
    let rank = singular_values.len();
    let v = complete_orthonormal(v, n);
    // left singular vectors embedded in R^p, then completed
    let u_embedded = Matrix::from_fn(p, rank, |i, j| if i < m { u[(i, j)] } else { 0.0 });
    let u = complete_orthonormal(&u_embedded, n);

    // (S² + σ)^{1/2} from W̃_σ times the matching (S² + σ)^{-1/2} from the
    // inverse square root of W̃_σᵀ W̃_σ = V (S² + σ) Vᵀ
    let mut scaled_u = u;
    for j in 0..n {
        let s = singular_values.get(j).copied().unwrap_or(0.0);
        let lam = s * s + sigma;
        let factor = lam.sqrt() * lam.sqrt().recip();
        for i in 0..p {
            scaled_u[(i, j)] *= factor;
        }
    }
    matmul_nt(&scaled_u, &v)
}

/// Leading singular triples obtained from the eigen-decomposition of the
/// smaller Gram matrix (`wᵀw` or `w wᵀ`).
///
/// Much cheaper than [`reduced_svd`] for the per-sample matrices met in
/// training; the price is that singular values below `√(max(m,n)·ε)·σ₁` are
/// not resolved and count as zero.
#[derive(Debug, Clone)]
pub struct TopFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl TopFactors {
    pub fn compute(w: &Matrix, k: usize) -> TopFactors {
        let g = if w.rows() >= w.cols() { w.gram() } else { w.outer_gram() };
        Self::with_gram(w, &g, k)
    }

    /// [`TopFactors::compute`] with the Gram matrix supplied: `wᵀw` when
    /// `w` has at least as many rows as columns, `w wᵀ` otherwise.
    pub fn with_gram(w: &Matrix, g: &Matrix, k: usize) -> TopFactors {
        let (m, n) = w.shape();
        let tall = m >= n;
        debug_assert_eq!(g.rows(), m.min(n));
        let eig = symmetric_eigen_top(g, k);
        let top = eig.values.first().copied().unwrap_or(0.0).max(0.0).sqrt();
        let tol = (m.max(n) as f64 * f64::EPSILON).sqrt() * top;
        let keep: Vec<usize> = eig
            .values
            .iter()
            .enumerate()
            .take_while(|(_, &l)| top > 0.0 && l.max(0.0).sqrt() > tol)
            .map(|(j, _)| j)
            .take(k)
            .collect();
        let sigma: Vec<f64> = keep.iter().map(|&j| eig.values[j].sqrt()).collect();
        let basis = eig.vectors.select_columns(&keep);
        // the other side: w·v/σ or wᵀ·u/σ
        let mut other = if tall {
            crate::linalg::matmul(w, &basis).expect("shapes agree")
        } else {
            crate::linalg::matmul_tn(w, &basis)
        };
        for r in 0..other.rows() {
            for (x, s) in other.row_mut(r).iter_mut().zip(&sigma) {
                *x /= s;
            }
        }
        let (u, v) = if tall { (other, basis) } else { (basis, other) };
        TopFactors { u, sigma, v }
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U_k V_kᵀ`
    pub fn orthogonal(&self) -> Matrix {
        if self.sigma.is_empty() {
            return Matrix::zeros(self.u.rows(), self.v.rows());
        }
        matmul_nt(&self.u, &self.v)
    }
}

impl From<SvdResult> for TopFactors {
    fn from(svd: SvdResult) -> Self {
        TopFactors {
            u: svd.u,
            sigma: svd.singular_values.into_vec(),
            v: svd.v,
        }
    }
}

/// Index into [`BANK_GRID`] for a normalised `σ_k/σ₁`: nearest grid value,
/// ties rounding up, clamped to the grid ends.
pub fn bank_index(ratio: f64) -> usize {
    let scaled = (ratio * 10.0 + 0.5 + 1e-9).floor();
    (scaled.clamp(1.0, 9.0) as usize) - 1
}
