use super::OddPolynomial;
use crate::error::{Error, Result};
use crate::linalg::{matmul, spectral_norm, Matrix};

/// Power-iteration settings used for the spectral normalisation.
pub(crate) const NORM_ITERS: usize = 100;
pub(crate) const NORM_SEED: u64 = 0x5eed;

/// Approximate `U_k V_kᵀ` by spectrally normalising `w_tilde` and applying
/// `poly` to it `poly.num_iterations()` times as a matrix polynomial,
/// `A ← Σ a_k A (AᵀA)^k`. A zero matrix is returned unchanged.
pub fn newton_schulz_orthogonalize(w_tilde: &Matrix, poly: &OddPolynomial) -> Result<Matrix> {
    let norm = spectral_norm(w_tilde, NORM_ITERS, NORM_SEED);
    newton_schulz_with_norm(w_tilde, poly, norm)
}

/// [`newton_schulz_orthogonalize`] with a precomputed spectral norm.
pub fn newton_schulz_with_norm(
    w_tilde: &Matrix,
    poly: &OddPolynomial,
    spectral_norm: f64,
) -> Result<Matrix> {
    if spectral_norm == 0.0 {
        return Ok(w_tilde.clone());
    }
    // odd polynomials commute with transposition; iterate on the tall side so
    // the Gram matrix is the smaller one
    let wide = w_tilde.rows() < w_tilde.cols();
    let mut a = if wide {
        w_tilde.transpose().scaled(1.0 / spectral_norm)
    } else {
        w_tilde.scaled(1.0 / spectral_norm)
    };
    let n = a.cols();
    let coeffs = poly.coefficients();
    let last = coeffs.len() - 1;
    for iteration in 0..poly.num_iterations() {
        let g = a.gram();
        let mut q = Matrix::identity(n).scaled(coeffs[last]);
        for &c in coeffs[..last].iter().rev() {
            q = matmul(&q, &g)?;
            for i in 0..n {
                q[(i, i)] += c;
            }
        }
        a = matmul(&a, &q)?;
        if !a.is_finite() {
            return Err(Error::NewtonSchulzBlowup { iteration });
        }
    }
    Ok(if wide { a.transpose() } else { a })
}
