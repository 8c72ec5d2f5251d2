use crate::linalg::{dot, matmul_tn, Matrix};

/// The matrix `W̃'` that maps noise `ε` to a guess direction `y = W̃'ᵀ ε`.
///
/// Columns of `W̃ = W_{i+1} M_i` belonging to inactive units are zero, so
/// the non-identity variants only keep the block of `active` columns; the
/// remaining columns of `W̃'` are implicitly zero.
#[derive(Debug, Clone)]
pub enum Projection {
    /// `W̃' = I_n`.
    Identity(usize),
    /// `W̃'[:, active] = block`.
    Dense {
        cols: usize,
        active: Vec<usize>,
        block: Matrix,
    },
    /// `W̃'[:, active] = u vᵀ` with `u: rows × k`, `v: |active| × k`.
    Factored {
        cols: usize,
        active: Vec<usize>,
        u: Matrix,
        v: Matrix,
    },
}

impl Projection {
    /// Length of `y`.
    pub fn cols(&self) -> usize {
        match self {
            Projection::Identity(n) => *n,
            Projection::Dense { cols, .. } | Projection::Factored { cols, .. } => *cols,
        }
    }

    /// Length of `ε`.
    pub fn noise_dim(&self) -> usize {
        match self {
            Projection::Identity(n) => *n,
            Projection::Dense { block, .. } => block.rows(),
            Projection::Factored { u, .. } => u.rows(),
        }
    }

    /// `W̃'ᵀ ε`
    pub fn guess(&self, eps: &[f64]) -> Vec<f64> {
        debug_assert_eq!(eps.len(), self.noise_dim());
        match self {
            Projection::Identity(_) => eps.to_vec(),
            Projection::Dense { cols, active, block } => {
                scatter(*cols, active, &block.tr_matvec(eps))
            }
            Projection::Factored { cols, active, u, v } => {
                let c = u.tr_matvec(eps);
                scatter(*cols, active, &v.matvec(&c))
            }
        }
    }

    /// `Cov(y) g = W̃'ᵀ W̃' g`
    pub fn covariance_times(&self, g: &[f64]) -> Vec<f64> {
        match self {
            Projection::Identity(_) => g.to_vec(),
            Projection::Dense { cols, active, block } => {
                let ga = gather(active, g);
                scatter(*cols, active, &block.tr_matvec(&block.matvec(&ga)))
            }
            Projection::Factored { cols, active, u, v } => {
                let ga = gather(active, g);
                let c = u.matvec(&v.tr_matvec(&ga));
                scatter(*cols, active, &v.matvec(&u.tr_matvec(&c)))
            }
        }
    }

    /// `(Cov(y) − I) g`
    pub fn covariance_residual(&self, g: &[f64]) -> Vec<f64> {
        let mut r = self.covariance_times(g);
        for (ri, gi) in r.iter_mut().zip(g) {
            *ri -= gi;
        }
        r
    }

    /// `‖W̃'ᵀ W̃' − I‖_F`; every inactive column contributes a unit diagonal
    /// deficit.
    pub fn cov_frobenius(&self) -> f64 {
        match self {
            Projection::Identity(_) => 0.0,
            Projection::Dense { cols, active, block } => {
                let g = block.gram();
                let a = active.len();
                let mut acc = (cols - a) as f64;
                for i in 0..a {
                    for j in 0..a {
                        let d = g[(i, j)] - if i == j { 1.0 } else { 0.0 };
                        acc += d * d;
                    }
                }
                acc.sqrt()
            }
            Projection::Factored { cols, active, u, v } => {
                // with C = uᵀu, D = vᵀv and B = v C vᵀ:
                // ‖B − I_a‖² = tr(CDCD) − 2 tr(CD) + a
                let c = u.gram();
                let d = v.gram();
                let cd = crate::linalg::matmul(&c, &d).expect("k x k");
                let tr_cd: f64 = (0..cd.rows()).map(|i| cd[(i, i)]).sum();
                let tr_cdcd = dot(cd.as_slice(), cd.transpose().as_slice());
                let a = active.len() as f64;
                let acc = (tr_cdcd - 2.0 * tr_cd + a).max(0.0) + (cols - active.len()) as f64;
                acc.sqrt()
            }
        }
    }

    /// Dense `W̃'`.
    pub fn to_matrix(&self) -> Matrix {
        match self {
            Projection::Identity(n) => Matrix::identity(*n),
            Projection::Dense { cols, active, block } => block.scatter_columns(active, *cols),
            Projection::Factored { cols, active, u, v } => {
                crate::linalg::matmul_nt(u, v).scatter_columns(active, *cols)
            }
        }
    }

    /// Dense `W̃'ᵀ W̃'`.
    pub fn covariance(&self) -> Matrix {
        let m = self.to_matrix();
        matmul_tn(&m, &m)
    }
}

fn gather(active: &[usize], g: &[f64]) -> Vec<f64> {
    active.iter().map(|&j| g[j]).collect()
}

fn scatter(cols: usize, active: &[usize], values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (&j, &v) in active.iter().zip(values) {
        out[j] = v;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::frobenius_norm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn compact_forms_agree_with_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let active = vec![0, 2, 3, 6];
        let u = random(5, 2, &mut rng);
        let v = random(4, 2, &mut rng);
        let block = crate::linalg::matmul_nt(&u, &v);
        let dense = Projection::Dense { cols: 8, active: active.clone(), block };
        let factored = Projection::Factored { cols: 8, active, u, v };
        let eps: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for p in [&dense, &factored] {
            let m = p.to_matrix();
            let want_y = m.tr_matvec(&eps);
            let want_cg = p.covariance().matvec(&g);
            let cov_i = p.covariance().sub(&Matrix::identity(8)).unwrap();
            for (a, b) in p.guess(&eps).iter().zip(&want_y) {
                assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in p.covariance_times(&g).iter().zip(&want_cg) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((p.cov_frobenius() - frobenius_norm(&cov_i)).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_has_zero_covariance_error() {
        let p = Projection::Identity(4);
        assert_eq!(p.cov_frobenius(), 0.0);
        assert_eq!(p.covariance_residual(&[1.0, 2.0, 3.0, 4.0]), vec![0.0; 4]);
    }
}
