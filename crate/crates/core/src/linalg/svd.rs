use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{axpy, dot, norm, Matrix, Vector};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Reduced singular value decomposition `a = u · diag(singular_values) · vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `m x r`, orthonormal columns.
    pub u: Matrix,
    /// Length `r`, nonincreasing, all above the rank tolerance.
    pub singular_values: Vector,
    /// `n x r`, orthonormal columns.
    pub v: Matrix,
    pub rank: usize,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (x, s) in us.row_mut(r).iter_mut().zip(self.singular_values.iter()) {
                *x *= s;
            }
        }
        super::matmul_nt(&us, &self.v)
    }
}

/// Singular values at or below this are treated as zero.
pub fn rank_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * f64::EPSILON * sigma_max
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Columns of a working copy are rotated pairwise until mutually orthogonal;
/// the column norms are then the singular values and the accumulated rotations
/// form `v`. Wide inputs are handled through the transpose.
pub fn reduced_svd(a: &Matrix) -> Result<SvdResult> {
    if a.rows() < a.cols() {
        let t = reduced_svd(&a.transpose())?;
        let mut out = SvdResult {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
            rank: t.rank,
        };
        fix_signs(&mut out);
        return Ok(out);
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("reduced_svd input".into()));
    }
    let (m, n) = a.shape();

    // column-major working storage: cols[j] is column j of a (and later of a·v)
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let mut sq: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();

    let tol = f64::EPSILON * (m as f64).sqrt();
    // columns this small are numerically zero; rotating them against others
    // only stirs rounding noise (rank-deficient inputs would never converge)
    let negligible = {
        let fro2: f64 = sq.iter().sum();
        let t = m.max(n) as f64 * f64::EPSILON;
        t * t * fro2
    };
    let mut converged = false;
    let mut residual = 0.0;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        residual = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = sq[p];
                let beta = sq[q];
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= tol {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = vcols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                sq[p] = dot(&cols[p], &cols[p]);
                sq[q] = dot(&cols[q], &cols[q]);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let sigma: Vec<f64> = sq.iter().map(|s| s.sqrt()).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let smax = sigma[order[0]];
    let tol_rank = rank_tolerance(m, n, smax);
    let kept: Vec<usize> = order.into_iter().filter(|&j| sigma[j] > tol_rank && smax > 0.0).collect();
    let r = kept.len();

    let mut u = Matrix::zeros(m, r);
    let mut v = Matrix::zeros(n, r);
    let mut sv = Vec::with_capacity(r);
    for (k, &j) in kept.iter().enumerate() {
        let s = sigma[j];
        sv.push(s);
        for i in 0..m {
            u[(i, k)] = cols[j][i] / s;
        }
        for i in 0..n {
            v[(i, k)] = vcols[j][i];
        }
    }
    let mut out = SvdResult {
        u,
        singular_values: Vector::from_raw(sv),
        v,
        rank: r,
    };
    fix_signs(&mut out);
    Ok(out)
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let xa = *a;
        let yb = *b;
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// First non-negligible component of each left singular vector is made
/// nonnegative; the paired right vector flips with it.
fn fix_signs(svd: &mut SvdResult) {
    let (m, r) = svd.u.shape();
    for k in 0..r {
        let lead = (0..m).map(|i| svd.u[(i, k)]).find(|x| x.abs() > 1e-12);
        if matches!(lead, Some(x) if x < 0.0) {
            for i in 0..m {
                svd.u[(i, k)] = -svd.u[(i, k)];
            }
            for i in 0..svd.v.rows() {
                svd.v[(i, k)] = -svd.v[(i, k)];
            }
        }
    }
}

/// Largest singular value by power iteration on `aᵀa` from a seeded Gaussian
/// start. Returns 0 for the zero matrix.
pub fn spectral_norm(a: &Matrix, iters: usize, seed: u64) -> f64 {
    assert!(iters >= 1, "spectral_norm needs at least one iteration");
    let n = a.cols();
    if n == 0 || a.rows() == 0 {
        return 0.0;
    }
    let mut v = seeded_unit(n, seed);
    let mut est = 0.0;
    for _ in 0..iters {
        let av = a.matvec(&v);
        let w = a.tr_matvec(&av);
        let wn = norm(&w);
        if wn == 0.0 {
            return 0.0;
        }
        v = w.into_iter().map(|x| x / wn).collect();
        est = wn.sqrt();
    }
    // final Rayleigh estimate ‖a v‖ with ‖v‖ = 1 never exceeds σ₁
    let av = norm(&a.matvec(&v));
    if av > 0.0 { av } else { est }
}

/// [`spectral_norm`] of a matrix whose Gram matrix `g = aᵀa` is already
/// available: power iteration on `g` directly.
pub fn spectral_norm_gram(g: &Matrix, iters: usize, seed: u64) -> f64 {
    let n = g.cols();
    if n == 0 {
        return 0.0;
    }
    let mut v = seeded_unit(n, seed);
    for _ in 0..iters {
        let w = g.matvec(&v);
        let wn = norm(&w);
        if wn == 0.0 {
            return 0.0;
        }
        v = w.into_iter().map(|x| x / wn).collect();
    }
    dot(&v, &g.matvec(&v)).max(0.0).sqrt()
}

fn seeded_unit(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let vn = norm(&v);
    for x in &mut v {
        *x /= vn;
    }
    v
}

/// The `k`-th largest singular value (1-based), zero beyond the numerical
/// rank. Computed from the full reduced SVD.
pub fn kth_singular_value(a: &Matrix, k: usize) -> Result<f64> {
    let max = a.rows().min(a.cols());
    if k == 0 || k > max {
        return Err(Error::OutOfRange {
            what: "k",
            value: k,
            min: 1,
            max,
        });
    }
    let svd = reduced_svd(a)?;
    Ok(svd.singular_values.get(k - 1).copied().unwrap_or(0.0))
}

/// Extend the orthonormal columns of `basis` (`d x r`) to `total` orthonormal
/// columns by Gram-Schmidt against the standard basis, taking at each step the
/// candidate with the largest residual.
pub fn complete_orthonormal(basis: &Matrix, total: usize) -> Matrix {
    let d = basis.rows();
    let r = basis.cols();
    assert!(total <= d, "cannot place {total} orthonormal columns in R^{d}");
    if total <= r {
        return basis.select_columns(&(0..total).collect::<Vec<_>>());
    }
    // Householder QR of the basis: the trailing columns of Q span its
    // orthogonal complement
    let mut work: Vec<Vec<f64>> = (0..r).map(|j| basis.column(j)).collect();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(r);
    for j in 0..r {
        let mut v = work[j].clone();
        for x in v.iter_mut().take(j) {
            *x = 0.0;
        }
        let alpha = norm(&v[j..]);
        let alpha = if v[j] > 0.0 { -alpha } else { alpha };
        v[j] -= alpha;
        let vn = norm(&v);
        if vn > 0.0 {
            for x in &mut v {
                *x /= vn;
            }
        }
        for col in work.iter_mut().skip(j) {
            let p = 2.0 * dot(&v, col);
            axpy(-p, &v, col);
        }
        reflectors.push(v);
    }
    let mut cols: Vec<Vec<f64>> = (0..r).map(|j| basis.column(j)).collect();
    for e in r..total {
        // Q e_e = H_0 H_1 ... H_{r-1} e_e
        let mut q = vec![0.0; d];
        q[e] = 1.0;
        for v in reflectors.iter().rev() {
            let p = 2.0 * dot(v, &q);
            axpy(-p, v, &mut q);
        }
        cols.push(q);
    }
    Matrix::from_fn(d, total, |i, j| cols[j][i])
}
