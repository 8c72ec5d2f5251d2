//! Bias, variance, covariance and subspace diagnostics of the estimators,
//! plus accuracy and the CSV logs.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{GuessBatch, Projection};
use crate::linalg::{complete_orthonormal, dot, frobenius_norm, matmul_tn, norm, reduced_svd, Matrix};
use crate::model::{ForwardTrace, MlpModel, TrueGradients};

fn column_means(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    let n = m.rows() as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// `‖(1/B) Σ_b (Cov(y_iᵇ) − I) ∂L_b/∂s_i‖` from per-sample projections.
pub fn bias_magnitude(projections: &[Projection], true_grad: &Matrix) -> f64 {
    let residuals = Matrix::from_rows(
        &projections
            .iter()
            .enumerate()
            .map(|(b, p)| p.covariance_residual(true_grad.row(b)))
            .collect::<Vec<_>>(),
    )
    .expect("finite residuals");
    bias_from_residuals(&residuals)
}

/// Bias from precomputed rows `(Cov(y_iᵇ) − I) ∂L_b/∂s_i`.
pub fn bias_from_residuals(residuals: &Matrix) -> f64 {
    norm(&column_means(residuals))
}

/// The two summands of the elementwise MSE decomposition:
/// `mse = variance + bias²` with `mse_j = (1/B) Σ_b (g − ĝ)_j²` and
/// `bias_j = ((1/B) Σ_b (Cov − I) g)_j`.
#[derive(Debug, Clone)]
pub struct MseDecomposition {
    pub mse: Vec<f64>,
    pub variance: Vec<f64>,
    pub bias_squared: Vec<f64>,
}

pub fn mse_decomposition(guesses: &Matrix, true_grad: &Matrix, residuals: &Matrix) -> MseDecomposition {
    let bsz = guesses.rows() as f64;
    let mut mse = vec![0.0; guesses.cols()];
    for b in 0..guesses.rows() {
        for ((m, g), h) in mse.iter_mut().zip(true_grad.row(b)).zip(guesses.row(b)) {
            *m += (g - h) * (g - h);
        }
    }
    mse.iter_mut().for_each(|v| *v /= bsz);
    let bias_squared: Vec<f64> = column_means(residuals).iter().map(|v| v * v).collect();
    let variance = mse.iter().zip(&bias_squared).map(|(m, b)| m - b).collect();
    MseDecomposition {
        mse,
        variance,
        bias_squared,
    }
}

/// `‖(1/B) Σ_b (∂L_b/∂s_i − ĝ_iᵇ)^∘2 − ((1/B) Σ_b (Cov − I) ∂L_b/∂s_i)^∘2‖`
pub fn variance_magnitude(guesses: &Matrix, true_grad: &Matrix, residuals: &Matrix) -> f64 {
    norm(&mse_decomposition(guesses, true_grad, residuals).variance)
}

/// `‖W̃'ᵀ W̃' − I‖_F`
pub fn cov_frobenius(projection: &Matrix) -> f64 {
    let mut c = matmul_tn(projection, projection);
    for i in 0..c.rows() {
        c[(i, i)] -= 1.0;
    }
    frobenius_norm(&c)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

/// Which singular basis of `W̃` the overlap projects onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapBasis {
    /// Left singular vectors (needs `len(g) = rows(W̃)`).
    U,
    /// Right singular vectors, spanning `Im(W̃ᵀ)` (needs `len(g) = cols(W̃)`).
    #[default]
    V,
}

/// `o_top(k) = ‖B_k B_kᵀ g‖ / ‖g‖` for `k = 1..=min(m, n)`, where `B_k` holds
/// the `k` leading singular vectors of the chosen side. Vectors beyond the
/// rank are completed orthonormally.
pub fn overlap_curve(w_tilde: &Matrix, true_grad: &[f64], basis: OverlapBasis) -> Result<Vec<f64>> {
    let (m, n) = w_tilde.shape();
    let want = match basis {
        OverlapBasis::U => m,
        OverlapBasis::V => n,
    };
    if true_grad.len() != want {
        return Err(Error::Shape {
            op: "overlap",
            left: w_tilde.shape(),
            right: (true_grad.len(), 1),
        });
    }
    let gn = norm(true_grad);
    if gn == 0.0 {
        return Err(Error::ZeroGradient);
    }
    let svd = reduced_svd(w_tilde)?;
    let side = match basis {
        OverlapBasis::U => svd.u,
        OverlapBasis::V => svd.v,
    };
    let full = complete_orthonormal(&side, m.min(n));
    let coeffs = full.tr_matvec(true_grad);
    let mut acc = 0.0;
    Ok(coeffs
        .iter()
        .map(|c| {
            acc += c * c;
            (acc.sqrt() / gn).min(1.0 + 1e-9)
        })
        .collect())
}

pub fn overlap_topk(w_tilde: &Matrix, true_grad: &[f64], k: usize, basis: OverlapBasis) -> Result<f64> {
    let kmax = w_tilde.rows().min(w_tilde.cols());
    if k == 0 || k > kmax {
        return Err(Error::OutOfRange {
            what: "k",
            value: k,
            min: 1,
            max: kmax,
        });
    }
    Ok(overlap_curve(w_tilde, true_grad, basis)?[k - 1])
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn accuracy_from_logits(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|(b, &y)| argmax(logits.row(*b)) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn accuracy(model: &MlpModel, inputs: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    accuracy_from_logits(&model.logits(inputs)?, labels)
}

/// Accuracy and mean loss from a forward trace.
pub fn evaluate_trace(trace: &ForwardTrace) -> Result<(f64, f64)> {
    Ok((accuracy_from_logits(trace.logits(), trace.labels())?, trace.mean_loss()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub bias: f64,
    pub variance: f64,
    pub cov_fro: f64,
}

impl LayerMetrics {
    pub const UNDEFINED: LayerMetrics = LayerMetrics {
        bias: f64::NAN,
        variance: f64::NAN,
        cov_fro: f64::NAN,
    };
}

/// Per-layer bias, variance and covariance error of one guess batch.
/// Weight-space guesses have no activation-space covariance and report NaN.
pub fn layer_metrics(guesses: &GuessBatch, truth: &TrueGradients) -> Vec<LayerMetrics> {
    match &guesses.covariance {
        None => vec![LayerMetrics::UNDEFINED; truth.pre_activation.len()],
        Some(stats) => stats
            .iter()
            .enumerate()
            .map(|(i, s)| LayerMetrics {
                bias: bias_from_residuals(&s.residuals),
                variance: variance_magnitude(&guesses.guesses[i], &truth.pre_activation[i], &s.residuals),
                cov_fro: s.cov_frobenius,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    /// Index `i` describes the pre-activation of weight layer `i`; logs
    /// number layers from 1.
    pub layers: Vec<LayerMetrics>,
    /// `(k, o_top)` pairs per layer, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overlap: Option<Vec<Vec<(usize, f64)>>>,
    pub train_acc: f64,
    pub test_acc: f64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub wall_time_s: f64,
}

pub const METRICS_HEADER: &str = "step,layer,bias,variance,cov_fro,train_acc,test_acc,train_loss,test_loss,wall_time_s";
pub const OVERLAP_HEADER: &str = "layer,k,overlap";

impl MetricsRecord {
    /// CSV rows, one per layer, without trailing newline on the last.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (i, l) in self.layers.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                self.step,
                i + 1,
                l.bias,
                l.variance,
                l.cov_fro,
                self.train_acc,
                self.test_acc,
                self.train_loss,
                self.test_loss,
                self.wall_time_s
            )
            .unwrap();
        }
        out
    }
}

/// Appends [`MetricsRecord`]s to a CSV file.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        w.write_raw(&format!("{METRICS_HEADER}\n"))?;
        Ok(w)
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        self.write_raw(&record.csv_rows())?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }

    fn write_raw(&mut self, s: &str) -> Result<()> {
        self.out.write_all(s.as_bytes()).map_err(|e| Error::io(&self.path, e))
    }
}

/// Writes `layer,k,overlap` rows (layers numbered from 1).
pub fn write_overlap_csv(path: &Path, curves: &[(usize, Vec<f64>)]) -> Result<()> {
    let mut s = format!("{OVERLAP_HEADER}\n");
    for (layer, curve) in curves {
        for (k, o) in curve.iter().enumerate() {
            writeln!(s, "{},{},{}", layer, k + 1, o).unwrap();
        }
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{build_projection, Estimator, GuessOptions, Method};
    use crate::model::{backward, forward};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn identity_covariance_has_no_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random(5, 4, &mut rng);
        let projections = vec![Projection::Identity(4); 5];
        assert_eq!(bias_magnitude(&projections, &g), 0.0);
        let dense = vec![
            Projection::Dense {
                cols: 4,
                active: vec![0, 1, 2, 3],
                block: random(3, 4, &mut rng)
            };
            5
        ];
        assert_eq!(bias_magnitude(&dense, &Matrix::zeros(5, 4)), 0.0);
        assert!(bias_magnitude(&dense, &g) > 0.0);
    }

    #[test]
    fn exact_guesses_have_no_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random(6, 3, &mut rng);
        assert_eq!(variance_magnitude(&g, &g, &Matrix::zeros(6, 3)), 0.0);
    }

    #[test]
    fn decomposition_reassembles_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let (b, d) = (rng.gen_range(1..20), rng.gen_range(1..10));
            let g = random(b, d, &mut rng);
            let h = random(b, d, &mut rng);
            let r = random(b, d, &mut rng);
            let dec = mse_decomposition(&h, &g, &r);
            for j in 0..d {
                assert!((dec.variance[j] + dec.bias_squared[j] - dec.mse[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn scalar_variance_matches_closed_form() {
        // ĝ = (y c) y with y ~ N(0,1): E[ĝ] = c, Var = c² (E[y⁴] − 1) = 2c²
        let c = 0.7;
        let n = 400_000;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = Matrix::from_fn(n, 1, |_, _| {
            let y: f64 = rng.sample(StandardNormal);
            c * y * y
        });
        let g = Matrix::from_fn(n, 1, |_, _| c);
        let v = variance_magnitude(&h, &g, &Matrix::zeros(n, 1));
        assert!((v - 2.0 * c * c).abs() < 0.02 * 2.0 * c * c, "{v}");
    }

    #[test]
    fn cov_frobenius_examples() {
        let q = reduced_svd(&Matrix::from_fn(4, 4, |i, j| ((i * 3 + j * 7) % 5) as f64 + (i == j) as u8 as f64))
            .unwrap()
            .u;
        assert!(cov_frobenius(&q) < 1e-12);
        let mut p = Matrix::zeros(6, 6);
        for i in 0..2 {
            p[(i, i)] = 1.0;
        }
        assert!((cov_frobenius(&p) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn overlap_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(6, 2, &mut rng);
        let b = random(2, 6, &mut rng);
        let w = crate::linalg::matmul(&a, &b).unwrap(); // rank 2
        let svd = reduced_svd(&w).unwrap();
        let in_span = svd.v.matvec(&[0.3, -1.2]);
        assert!((overlap_topk(&w, &in_span, 2, OverlapBasis::V).unwrap() - 1.0).abs() < 1e-10);
        let in_u = svd.u.matvec(&[1.0, 0.0]);
        assert!((overlap_topk(&w, &in_u, 1, OverlapBasis::U).unwrap() - 1.0).abs() < 1e-10);

        let full = complete_orthonormal(&svd.v, 6);
        let orth = full.column(4);
        assert!(overlap_topk(&w, &orth, 2, OverlapBasis::V).unwrap() < 1e-10);

        let curve = overlap_curve(&w, &random(1, 6, &mut rng).into_vec(), OverlapBasis::V).unwrap();
        assert!(curve.windows(2).all(|p| p[0] <= p[1]));
        assert!((curve[5] - 1.0).abs() < 1e-10);

        assert!(matches!(overlap_topk(&w, &[0.0; 6], 1, OverlapBasis::V), Err(Error::ZeroGradient)));
        assert!(overlap_topk(&w, &[1.0; 5], 1, OverlapBasis::V).is_err());
        assert!(overlap_topk(&w, &[1.0; 6], 7, OverlapBasis::V).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let model = MlpModel::zeros(&[3, 10]).unwrap();
        let x = Matrix::zeros(20, 3);
        let labels: Vec<usize> = (0..20).map(|i| i % 10).collect();
        // uniform logits: ties resolve to class 0
        assert!((accuracy(&model, &x, &labels).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(accuracy(&model, &Matrix::zeros(1, 3), &[0]).unwrap(), 1.0);
        assert!(matches!(accuracy(&model, &Matrix::zeros(0, 3), &[]), Err(Error::EmptyDataset)));
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }

    #[test]
    fn preconditioned_bias_vanishes() {
        let model = MlpModel::new(&[5, 16, 16, 3], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(8, 5, &mut rng);
        let y: Vec<usize> = (0..8).map(|i| i % 3).collect();
        let trace = forward(&model, &x, &y).unwrap();
        let truth = backward(&model, &trace);
        let method = Method::WPrecond { sigma: 1e-5 };
        for layer in 0..2 {
            let projections: Vec<Projection> = (0..8)
                .map(|b| build_projection(method, &model, &trace, layer, b, None).unwrap())
                .collect();
            let g = &truth.pre_activation[layer];
            let bias = bias_magnitude(&projections, g);
            assert!(bias <= 1e-6 * frobenius_norm(g), "{bias}");
        }
        let est = Estimator::new(method, GuessOptions::default(), 0, None).unwrap();
        let batch = est.sample_guesses(&model, &trace, 0, Some(&truth)).unwrap();
        for m in layer_metrics(&batch, &truth) {
            assert!(m.bias <= 1e-6 && m.cov_fro < 1e-8, "{m:?}");
            assert!(m.variance >= -1e-9);
        }
    }

    #[test]
    fn metrics_are_invariant_under_sample_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random(8, 3, &mut rng);
        let h = random(8, 3, &mut rng);
        let r = random(8, 3, &mut rng);
        let rev = |m: &Matrix| Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(m.rows() - 1 - i, j)]);
        let a = variance_magnitude(&h, &g, &r);
        let b = variance_magnitude(&rev(&h), &rev(&g), &rev(&r));
        assert!((a - b).abs() <= 1e-15 * a.max(1.0));
        assert!((bias_from_residuals(&r) - bias_from_residuals(&rev(&r))).abs() <= 1e-15);
    }

    #[test]
    fn csv_rows_are_per_layer() {
        let rec = MetricsRecord {
            step: 50,
            layers: vec![
                LayerMetrics {
                    bias: 0.5,
                    variance: 0.25,
                    cov_fro: 1.0,
                },
                LayerMetrics::UNDEFINED,
            ],
            overlap: None,
            train_acc: 0.75,
            test_acc: 0.5,
            train_loss: 1.5,
            test_loss: 2.0,
            wall_time_s: 0.0,
        };
        assert_eq!(
            rec.csv_rows(),
            "50,1,0.5,0.25,1,0.75,0.5,1.5,2,0\n50,2,NaN,NaN,NaN,0.75,0.5,1.5,2,0\n"
        );
    }
}
