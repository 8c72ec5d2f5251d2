use fwdguess::estimators::{build_projection, Method};
use fwdguess::harness::{AdamW, AdamWConfig};
use fwdguess::linalg::{frobenius_norm, matmul, matmul_tn, reduced_svd, symmetric_eigen, symmetric_eigen_top, Matrix};
use fwdguess::metrics::mse_decomposition;
use fwdguess::model::{forward, MlpModel};
use proptest::prelude::*;

fn matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = Matrix> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-2.0f64..2.0, r * c).prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn top_eigenpairs_agree_with_full_solver(b in matrix(1..30, 4..40), k in 1usize..40) {
        let g = b.gram();
        let n = g.rows();
        let k = k.min(n);
        let full = symmetric_eigen(&g);
        let top = symmetric_eigen_top(&g, k);
        let scale = full.values[0].max(1.0);
        for j in 0..k {
            prop_assert!((full.values[j] - top.values[j]).abs() <= 1e-10 * scale);
        }
        let q = &top.vectors;
        let resid = matmul(&g, q).unwrap().sub(&Matrix::from_fn(n, k, |r, c| q[(r, c)] * top.values[c])).unwrap();
        prop_assert!(frobenius_norm(&resid) <= 1e-9 * scale);
        prop_assert!(frobenius_norm(&matmul_tn(q, q).sub(&Matrix::identity(k)).unwrap()) <= 1e-9);
    }

    #[test]
    fn svd_of_low_rank_products((a, b) in (1usize..6).prop_flat_map(|r| (matrix(2..20, r..r + 1), matrix(r..r + 1, 2..20)))) {
        let p = matmul(&a, &b).unwrap();
        let svd = reduced_svd(&p).unwrap();
        // rounding in the product leaves tiny trailing singular values
        let sv: &[f64] = &svd.singular_values;
        prop_assert!(sv.iter().skip(a.cols()).all(|&x| x <= 1e-12 * sv[0]));
        let err = frobenius_norm(&svd.reconstruct().sub(&p).unwrap());
        prop_assert!(err <= 1e-10 * frobenius_norm(&p).max(1.0));
    }

    #[test]
    fn w_perp_covariance_is_an_orthogonal_projector(seed in 0u64..1000, k in 1usize..8, sample in 0usize..4) {
        let model = MlpModel::new(&[6, 8, 7, 3], seed).unwrap();
        let x = Matrix::from_fn(4, 6, |r, c| ((seed as f64 + 1.0) * (r * 6 + c) as f64).sin());
        let trace = forward(&model, &x, &[0, 1, 2, 0]).unwrap();
        for layer in 0..2 {
            let p = build_projection(Method::WPerp { k }, &model, &trace, layer, sample, None).unwrap();
            let cov = p.covariance();
            let sq = matmul(&cov, &cov).unwrap();
            prop_assert!(frobenius_norm(&sq.sub(&cov).unwrap()) <= 1e-9);
            prop_assert!(frobenius_norm(&cov.sub(&cov.transpose()).unwrap()) <= 1e-12);
            let w = &model.weights()[layer + 1];
            let active = (0..w.cols()).filter(|&j| trace.mask(layer)[(sample, j)] > 0.0).count();
            let rank = active.min(w.rows()).min(k) as f64;
            let trace_cov: f64 = (0..cov.rows()).map(|i| cov[(i, i)]).sum();
            // the active block of a random matrix has full rank
            prop_assert!((trace_cov - rank).abs() <= 1e-9, "trace {} rank {}", trace_cov, rank);
        }
    }

    #[test]
    fn mse_splits_into_variance_and_bias(g in matrix(1..20, 1..10), seed in 0u64..1000) {
        let h = Matrix::from_fn(g.rows(), g.cols(), |r, c| g[(r, c)] + ((r * 31 + c) as f64 + seed as f64).cos());
        let res = Matrix::from_fn(g.rows(), g.cols(), |r, c| ((r + 2 * c) as f64 * 0.7 + seed as f64).sin());
        let d = mse_decomposition(&h, &g, &res);
        for j in 0..g.cols() {
            prop_assert!((d.variance[j] + d.bias_squared[j] - d.mse[j]).abs() <= 1e-12 * d.mse[j].max(1.0));
        }
    }

    #[test]
    fn adamw_second_moments_stay_nonnegative(grads in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 5), 1..20)) {
        let mut opt = AdamW::new(&[5], AdamWConfig::default());
        let mut p = vec![0.5; 5];
        for (t, g) in grads.iter().enumerate() {
            opt.step_tensors(&mut [&mut p[..]], &[&g[..]], &[0]).unwrap();
            prop_assert_eq!(opt.steps(), t as u64 + 1);
            prop_assert!(opt.second_moments()[0].iter().all(|&v| v >= 0.0));
            prop_assert!(p.iter().all(|v| v.is_finite()));
        }
    }
}
