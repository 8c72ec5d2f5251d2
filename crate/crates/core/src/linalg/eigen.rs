use super::Matrix;

/// Eigen-decomposition of a real symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Eigenvalues, nonincreasing.
    pub values: Vec<f64>,
    /// Column `j` is the unit eigenvector of `values[j]`.
    pub vectors: Matrix,
}

/// Householder tridiagonalisation followed by implicit QL with Wilkinson
/// shifts (the EISPACK `tred2`/`tql2` pair). Only the lower triangle of `a`
/// is read.
pub fn symmetric_eigen(a: &Matrix) -> SymmetricEigen {
    let n = a.rows();
    assert_eq!(n, a.cols(), "symmetric_eigen needs a square matrix");
    if n == 0 {
        return SymmetricEigen {
            values: Vec::new(),
            vectors: Matrix::zeros(0, 0),
        };
    }
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if j <= i { a[(i, j)] } else { a[(j, i)] }).collect())
        .collect();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut v, &mut d, &mut e);

    // z rows are the eigenvector columns of v, so QL rotations touch
    // contiguous memory
    let mut z: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|k| v[k][j]).collect()).collect();
    tql2(&mut z, &mut d, &mut e);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| d[i]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| z[order[c]][r]);
    SymmetricEigen { values, vectors }
}

fn tred2(v: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    d.copy_from_slice(&v[n - 1]);

    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
                v[j][i] = 0.0;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                let f = d[j];
                v[j][i] = f;
                let mut g = e[j] + v[j][j] * f;
                for k in (j + 1)..i {
                    g += v[k][j] * d[k];
                    e[k] += v[k][j] * f;
                }
                e[j] = g;
            }
            let mut f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                let f = d[j];
                let g = e[j];
                for k in j..i {
                    v[k][j] -= f * e[k] + g * d[k];
                }
                d[j] = v[i - 1][j];
                v[i][j] = 0.0;
            }
        }
        d[i] = h;
    }

    for i in 0..n - 1 {
        v[n - 1][i] = v[i][i];
        v[i][i] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[k][i + 1] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[k][i + 1] * v[k][j];
                }
                for k in 0..=i {
                    v[k][j] -= g * d[k];
                }
            }
        }
        for row in v.iter_mut().take(i + 1) {
            row[i + 1] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[n - 1][j];
        v[n - 1][j] = 0.0;
    }
    v[n - 1][n - 1] = 1.0;
    e[0] = 0.0;
}

/// Four-accumulator dot product (vectorises, unlike a plain fold).
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// `√(a² + b²)`, falling back to libm's careful version only when squaring
/// could over- or underflow.
fn hypot(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m > 1e-150 && m < 1e150 {
        (a * a + b * b).sqrt()
    } else {
        a.hypot(b)
    }
}

/// `z` holds eigenvectors as rows.
fn tql2(z: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            loop {
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = hypot(p, 1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    let h = c * p;
                    r = hypot(p, e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let (lo, hi) = z.split_at_mut(i + 1);
                    for (zi, zi1) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
                        let h = *zi1;
                        *zi1 = s * *zi + c * h;
                        *zi = c * *zi - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
}

/// The `k` largest eigenpairs of a real symmetric matrix (all of them when
/// `k >= n`).
///
/// Tridiagonalises with Householder reflections, finds every eigenvalue by
/// implicit QL without vectors, then recovers only the wanted vectors by
/// inverse iteration on the tridiagonal and back-transforms them: roughly
/// `4n³/3` work instead of the `~5n³` of [`symmetric_eigen`]. Falls back to
/// the full solver when more than half the spectrum is requested.
pub fn symmetric_eigen_top(a: &Matrix, k: usize) -> SymmetricEigen {
    let n = a.rows();
    assert_eq!(n, a.cols(), "symmetric_eigen_top needs a square matrix");
    let k = k.min(n);
    if 2 * k > n || n < 4 {
        let full = symmetric_eigen(a);
        let idx: Vec<usize> = (0..k).collect();
        return SymmetricEigen {
            values: full.values[..k].to_vec(),
            vectors: full.vectors.select_columns(&idx),
        };
    }

    let tri = Tridiagonal::reduce(a);
    // eigenvalues only: tql2 with empty vector rows
    let mut d = tri.diag.clone();
    let mut e = vec![0.0; n];
    e[1..].copy_from_slice(&tri.off);
    let mut empty = vec![Vec::new(); n];
    tql2(&mut empty, &mut d, &mut e);
    d.sort_by(|x, y| y.total_cmp(x));
    let values = d[..k].to_vec();

    let norm = tri
        .diag
        .iter()
        .enumerate()
        .map(|(i, x)| x.abs() + tri.off.get(i).map_or(0.0, |o| o.abs()) + if i > 0 { tri.off[i - 1].abs() } else { 0.0 })
        .fold(0.0, f64::max);
    let cluster_gap = 1e-3 * norm;
    let mut found: Vec<Vec<f64>> = Vec::with_capacity(k);
    for (j, &lam) in values.iter().enumerate() {
        // previously found vectors whose eigenvalues sit in the same cluster
        let cluster_start = (0..j).rev().take_while(|&i| values[i] - values[i + 1] <= cluster_gap).last().unwrap_or(j);
        let y = inverse_iteration(&tri, lam, norm, j, &found[cluster_start..j]);
        found.push(y);
    }

    let mut vectors = Matrix::zeros(n, k);
    for (j, mut y) in found.into_iter().enumerate() {
        tri.back_transform(&mut y);
        for (r, x) in y.into_iter().enumerate() {
            vectors[(r, j)] = x;
        }
    }
    SymmetricEigen { values, vectors }
}

/// `A = Q T Qᵀ` with `Q = H_0 H_1 ⋯ H_{n-3}`, `H_j = I − β_j v_j v_jᵀ` acting on
/// indices `j+1..n`.
struct Tridiagonal {
    diag: Vec<f64>,
    off: Vec<f64>,
    reflectors: Vec<(f64, Vec<f64>)>,
}

impl Tridiagonal {
    fn reduce(a: &Matrix) -> Tridiagonal {
        let n = a.rows();
        // lower triangle mirrored, so every row is complete
        let mut m: Vec<f64> = (0..n * n).map(|idx| {
            let (i, j) = (idx / n, idx % n);
            if j <= i { a[(i, j)] } else { a[(j, i)] }
        }).collect();
        let mut diag = vec![0.0; n];
        let mut off = vec![0.0; n - 1];
        let mut reflectors = Vec::with_capacity(n.saturating_sub(2));
        let mut p = vec![0.0; n];
        for j in 0..n.saturating_sub(2) {
            let s = j + 1;
            let len = n - s;
            let mut v: Vec<f64> = (s..n).map(|i| m[i * n + j]).collect();
            let xnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if xnorm == 0.0 {
                reflectors.push((0.0, v));
                diag[j] = m[j * n + j];
                off[j] = 0.0;
                continue;
            }
            let alpha = if v[0] > 0.0 { -xnorm } else { xnorm };
            v[0] -= alpha;
            let vnorm2 = v.iter().map(|x| x * x).sum::<f64>();
            let beta = 2.0 / vnorm2;
            diag[j] = m[j * n + j];
            off[j] = alpha;

            // p = β A22 v,  w = p − (β/2)(pᵀv) v,  A22 −= v wᵀ + w vᵀ
            for (r, pr) in p[..len].iter_mut().enumerate() {
                let row = &m[(s + r) * n + s..(s + r) * n + n];
                *pr = beta * dot(row, &v);
            }
            let ptv: f64 = p[..len].iter().zip(&v).map(|(x, y)| x * y).sum();
            let half = 0.5 * beta * ptv;
            for (pr, vr) in p[..len].iter_mut().zip(&v) {
                *pr -= half * vr;
            }
            for r in 0..len {
                let (vr, wr) = (v[r], p[r]);
                let row = &mut m[(s + r) * n + s..(s + r) * n + n];
                for ((x, vc), wc) in row.iter_mut().zip(&v).zip(&p[..len]) {
                    *x -= vr * wc + wr * vc;
                }
            }
            reflectors.push((beta, v));
        }
        if n >= 2 {
            diag[n - 2] = m[(n - 2) * n + n - 2];
            off[n - 2] = m[(n - 1) * n + n - 2];
        }
        diag[n - 1] = m[n * n - 1];
        Tridiagonal { diag, off, reflectors }
    }

    fn back_transform(&self, y: &mut [f64]) {
        for (j, (beta, v)) in self.reflectors.iter().enumerate().rev() {
            if *beta == 0.0 {
                continue;
            }
            let tail = &mut y[j + 1..];
            let dot: f64 = tail.iter().zip(v).map(|(a, b)| a * b).sum();
            for (t, vi) in tail.iter_mut().zip(v) {
                *t -= beta * dot * vi;
            }
        }
    }
}

/// Unit eigenvector of the tridiagonal for eigenvalue `lam`, kept orthogonal
/// to `cluster` (vectors of nearby eigenvalues).
fn inverse_iteration(tri: &Tridiagonal, lam: f64, norm: f64, index: usize, cluster: &[Vec<f64>]) -> Vec<f64> {
    let n = tri.diag.len();
    let tiny = f64::EPSILON * norm.max(f64::MIN_POSITIVE);
    let lu = TridiagonalLu::factor(&tri.diag, &tri.off, lam, tiny);
    // deterministic, nonuniform start
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let h = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
            (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect();
    for _ in 0..4 {
        orthogonalise(&mut x, cluster);
        normalise(&mut x);
        lu.solve(&mut x);
        orthogonalise(&mut x, cluster);
        normalise(&mut x);
    }
    x
}

fn orthogonalise(x: &mut [f64], against: &[Vec<f64>]) {
    for q in against {
        let dot: f64 = x.iter().zip(q).map(|(a, b)| a * b).sum();
        for (xi, qi) in x.iter_mut().zip(q) {
            *xi -= dot * qi;
        }
    }
}

fn normalise(x: &mut [f64]) {
    let nrm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nrm > 0.0 && nrm.is_finite() {
        x.iter_mut().for_each(|v| *v /= nrm);
    }
}

/// LU with partial pivoting of `T − λI` (LAPACK `dgttrf` layout), with tiny
/// pivots replaced so near-singular systems still solve.
struct TridiagonalLu {
    dl: Vec<f64>,
    d: Vec<f64>,
    du: Vec<f64>,
    du2: Vec<f64>,
    swapped: Vec<bool>,
}

impl TridiagonalLu {
    fn factor(diag: &[f64], off: &[f64], lam: f64, tiny: f64) -> Self {
        let n = diag.len();
        let mut d: Vec<f64> = diag.iter().map(|x| x - lam).collect();
        let mut dl = off.to_vec();
        let mut du = off.to_vec();
        let mut du2 = vec![0.0; n.saturating_sub(2)];
        let mut swapped = vec![false; n.saturating_sub(1)];
        for i in 0..n.saturating_sub(1) {
            if d[i].abs() >= dl[i].abs() {
                if d[i] == 0.0 {
                    d[i] = tiny;
                }
                let fact = dl[i] / d[i];
                dl[i] = fact;
                d[i + 1] -= fact * du[i];
            } else {
                let fact = d[i] / dl[i];
                d[i] = dl[i];
                dl[i] = fact;
                let temp = du[i];
                du[i] = d[i + 1];
                d[i + 1] = temp - fact * d[i + 1];
                if i + 2 < n {
                    du2[i] = du[i + 1];
                    du[i + 1] = -fact * du[i + 1];
                }
                swapped[i] = true;
            }
        }
        for x in d.iter_mut() {
            if x.abs() < tiny {
                *x = if *x < 0.0 { -tiny } else { tiny };
            }
        }
        TridiagonalLu { dl, d, du, du2, swapped }
    }

    fn solve(&self, b: &mut [f64]) {
        let n = self.d.len();
        for i in 0..n.saturating_sub(1) {
            if self.swapped[i] {
                let t = b[i];
                b[i] = b[i + 1];
                b[i + 1] = t - self.dl[i] * b[i];
            } else {
                b[i + 1] -= self.dl[i] * b[i];
            }
        }
        b[n - 1] /= self.d[n - 1];
        if n > 1 {
            b[n - 2] = (b[n - 2] - self.du[n - 2] * b[n - 1]) / self.d[n - 2];
        }
        for i in (0..n.saturating_sub(2)).rev() {
            b[i] = (b[i] - self.du[i] * b[i + 1] - self.du2[i] * b[i + 2]) / self.d[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{frobenius_norm, matmul, matmul_tn};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_input() {
        let eig = symmetric_eigen(&Matrix::diag(&[1.0, 3.0, 2.0]));
        assert_eq!(eig.values, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn random_gram_decomposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 2, 5, 33, 64] {
            let b = Matrix::from_fn(n + 3, n, |_, _| rng.gen_range(-1.0..1.0));
            let g = b.gram();
            let eig = symmetric_eigen(&g);
            let q = &eig.vectors;
            let qtq = matmul_tn(q, q);
            assert!(frobenius_norm(&qtq.sub(&Matrix::identity(n)).unwrap()) < 1e-12);
            let recon = matmul(&matmul(q, &Matrix::diag(&eig.values)).unwrap(), &q.transpose()).unwrap();
            assert!(frobenius_norm(&recon.sub(&g).unwrap()) < 1e-11 * frobenius_norm(&g));
            assert!(eig.values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    fn top_matches_full(g: &Matrix, k: usize) {
        let full = symmetric_eigen(g);
        let top = symmetric_eigen_top(g, k);
        let n = g.rows();
        let scale = full.values[0].abs().max(1.0);
        for j in 0..k.min(n) {
            assert!((full.values[j] - top.values[j]).abs() < 1e-10 * scale, "value {j}");
        }
        let q = &top.vectors;
        let qtq = matmul_tn(q, q);
        assert!(frobenius_norm(&qtq.sub(&Matrix::identity(q.cols())).unwrap()) < 1e-9);
        // residual ‖G q − λ q‖
        let gq = matmul(g, q).unwrap();
        for j in 0..q.cols() {
            let r: f64 = (0..n).map(|i| (gq[(i, j)] - top.values[j] * q[(i, j)]).powi(2)).sum::<f64>().sqrt();
            assert!(r < 1e-9 * scale, "residual {r} for pair {j}");
        }
    }

    #[test]
    fn top_eigenpairs_match_full_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (n, k) in [(8, 1), (20, 3), (64, 10), (100, 10), (129, 40)] {
            let b = Matrix::from_fn(n + 7, n, |_, _| rng.gen_range(-1.0..1.0));
            top_matches_full(&b.gram(), k);
        }
    }

    #[test]
    fn top_eigenpairs_with_repeated_and_zero_eigenvalues() {
        // rank-deficient Gram (5 x 30) and an exactly repeated top eigenvalue
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b = Matrix::from_fn(5, 30, |_, _| rng.gen_range(-1.0..1.0));
        top_matches_full(&b.gram(), 8);
        let mut vals = vec![4.0, 4.0, 4.0, 2.0];
        vals.extend((0..20).map(|i| i as f64 * 0.01));
        let d = Matrix::diag(&vals);
        let q = Matrix::from_fn(24, 24, |_, _| rng.gen_range(-1.0..1.0));
        let q = symmetric_eigen(&q.gram()).vectors;
        let g = matmul(&matmul(&q, &d).unwrap(), &q.transpose()).unwrap();
        top_matches_full(&g, 4);
    }
}
