use super::*;
use crate::linalg::frobenius_norm;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_model(widths: &[usize], seed: u64) -> MlpModel {
    let mut m = MlpModel::new(widths, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for b in m.params_mut().1 {
        for v in b.iter_mut() {
            *v = rng.gen_range(-0.3..0.3);
        }
    }
    m
}

fn random_batch(b: usize, d: usize, classes: usize, seed: u64) -> (Matrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(b, d, |_, _| rng.sample(StandardNormal));
    let y = (0..b).map(|_| rng.gen_range(0..classes)).collect();
    (x, y)
}

fn normal_like(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(shape.0, shape.1, |_, _| rng.sample(StandardNormal))
}

/// Straight-line per-sample loss, written independently of `forward`.
fn naive_loss(model: &MlpModel, x: &[f64], label: usize) -> f64 {
    let mut a = x.to_vec();
    let l = model.num_layers();
    for i in 0..l {
        let w = &model.weights()[i];
        let b = &model.biases()[i];
        let mut s = vec![0.0; w.rows()];
        for r in 0..w.rows() {
            let mut acc = b[r];
            for c in 0..w.cols() {
                acc += w[(r, c)] * a[c];
            }
            s[r] = if i + 1 < l && acc <= 0.0 { 0.0 } else { acc };
        }
        a = s;
    }
    let denom: f64 = a.iter().map(|v| v.exp()).sum();
    -(a[label].exp() / denom).ln()
}

#[test]
fn zero_model_gives_uniform_softmax() {
    let m = MlpModel::zeros(&[40, 16, 10]).unwrap();
    let (x, y) = random_batch(5, 40, 10, 1);
    let t = forward(&m, &x, &y).unwrap();
    for &loss in t.losses() {
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }
    let g = backward(&m, &t);
    let last = g.pre_activation.last().unwrap();
    for (b, &label) in y.iter().enumerate() {
        for c in 0..10 {
            let want = 0.1 - if c == label { 1.0 } else { 0.0 };
            assert!((last[(b, c)] - want).abs() < 1e-15);
        }
    }
}

#[test]
fn correct_label_has_lower_loss() {
    let m = MlpModel::from_parts(vec![Matrix::identity(10)], vec![Vector::zeros(10)]).unwrap();
    let mut x = Matrix::zeros(2, 10);
    x[(0, 3)] = 1.0;
    x[(1, 3)] = 1.0;
    let t = forward(&m, &x, &[3, 0]).unwrap();
    assert!(t.losses()[0] < t.losses()[1]);
}

#[test]
fn matches_naive_implementation() {
    let m = random_model(&[40, 32, 24, 10], 3);
    let (x, y) = random_batch(17, 40, 10, 4);
    let t = forward(&m, &x, &y).unwrap();
    for b in 0..17 {
        let want = naive_loss(&m, x.row(b), y[b]);
        assert!((t.losses()[b] - want).abs() <= 1e-12 * want.max(1.0), "{b}");
    }
}

#[test]
fn rejects_bad_shapes_and_labels() {
    let m = MlpModel::zeros(&[4, 3, 2]).unwrap();
    assert!(matches!(
        forward(&m, &Matrix::zeros(2, 5), &[0, 1]),
        Err(Error::Shape { .. })
    ));
    assert!(matches!(
        forward(&m, &Matrix::zeros(2, 4), &[0, 2]),
        Err(Error::OutOfRange { value: 2, .. })
    ));
    assert!(MlpModel::new(&[4], 0).is_err());
    assert!(MlpModel::new(&[4, 0, 2], 0).is_err());
}

#[test]
fn mask_follows_strict_positivity() {
    let m = random_model(&[6, 8, 8, 3], 9);
    let (x, y) = random_batch(10, 6, 3, 2);
    let t = forward(&m, &x, &y).unwrap();
    for i in 0..2 {
        let s = t.pre_activation(i);
        for b in 0..10 {
            for j in 0..8 {
                let bit = t.mask(i)[(b, j)];
                assert_eq!(bit == 1.0, s[(b, j)] > 0.0);
                assert_eq!(t.layer_input(i + 1)[(b, j)], s[(b, j)].max(0.0));
            }
        }
    }
}

#[test]
fn weight_gradient_is_mean_outer_product() {
    let m = random_model(&[6, 8, 8, 3], 5);
    let (x, y) = random_batch(7, 6, 3, 6);
    let t = forward(&m, &x, &y).unwrap();
    let g = backward(&m, &t);
    for i in 0..3 {
        let (rows, cols) = g.weights[i].shape();
        let xi = t.layer_input(i);
        let di = &g.pre_activation[i];
        let want = Matrix::from_fn(rows, cols, |r, c| {
            (0..7).map(|b| di[(b, r)] * xi[(b, c)]).sum::<f64>() / 7.0
        });
        assert!(frobenius_norm(&g.weights[i].sub(&want).unwrap()) <= 1e-12);
    }
}

fn mean_loss(m: &MlpModel, x: &Matrix, y: &[usize]) -> f64 {
    forward(m, x, y).unwrap().mean_loss()
}

#[test]
fn backward_matches_finite_differences() {
    let widths = [6, 8, 8, 8, 4];
    let m = random_model(&widths, 11);
    let (x, y) = random_batch(5, 6, 4, 12);
    let g = backward(&m, &forward(&m, &x, &y).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let layer = rng.gen_range(0..m.num_layers());
        let is_bias = rng.gen_bool(0.2);
        let (rows, cols) = m.weights()[layer].shape();
        let (r, c) = (rng.gen_range(0..rows), rng.gen_range(0..cols));
        let perturbed = |delta: f64| {
            let mut p = m.clone();
            let (w, b) = p.params_mut();
            if is_bias {
                b[layer][r] += delta;
            } else {
                w[layer][(r, c)] += delta;
            }
            mean_loss(&p, &x, &y)
        };
        let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
        let exact = if is_bias {
            g.biases[layer][r]
        } else {
            g.weights[layer][(r, c)]
        };
        let rel = (fd - exact).abs() / fd.abs().max(exact.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst <= 1e-5, "worst relative error {worst}");
}

#[test]
fn dead_units_get_zero_weight_rows() {
    let mut m = random_model(&[5, 8, 3], 21);
    m.params_mut().1[0][2] = -100.0;
    let (x, y) = random_batch(6, 5, 3, 22);
    let g = backward(&m, &forward(&m, &x, &y).unwrap());
    assert!(g.weights[0].row(2).iter().all(|&v| v == 0.0));
    assert!(g.weights[1].column(2).iter().all(|&v| v == 0.0));
}

#[test]
fn jvp_of_zero_tangent_is_zero() {
    let m = random_model(&[6, 8, 8, 3], 1);
    let (x, y) = random_batch(4, 6, 3, 1);
    let t = forward(&m, &x, &y).unwrap();
    let zeros: Vec<Matrix> = [8, 8, 3].iter().map(|&d| Matrix::zeros(4, d)).collect();
    assert!(jvp_activations(&m, &t, &zeros).unwrap().iter().all(|&d| d == 0.0));
    let wz: Vec<Matrix> = m.weights().iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
    assert!(jvp_weights(&m, &t, &wz, None).unwrap().iter().all(|&d| d == 0.0));
}

#[test]
fn jvp_along_true_gradient_is_squared_norm() {
    let m = random_model(&[6, 8, 8, 3], 2);
    let (x, y) = random_batch(9, 6, 3, 3);
    let t = forward(&m, &x, &y).unwrap();
    let g = backward(&m, &t);
    let d = jvp_activations(&m, &t, &g.pre_activation).unwrap();
    for b in 0..9 {
        let want: f64 = g.pre_activation.iter().map(|p| dot(p.row(b), p.row(b))).sum();
        assert!((d[b] - want).abs() <= 1e-10 * want.max(1.0));
    }
}

#[test]
fn jvp_vjp_duality() {
    let m = random_model(&[6, 8, 8, 8, 3], 4);
    let (x, y) = random_batch(12, 6, 3, 5);
    let t = forward(&m, &x, &y).unwrap();
    let g = backward(&m, &t);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let tangent: Vec<Matrix> = g
            .pre_activation
            .iter()
            .map(|p| normal_like(p.shape(), &mut rng))
            .collect();
        let d: f64 = jvp_activations(&m, &t, &tangent).unwrap().iter().sum();
        let inner: f64 = tangent
            .iter()
            .zip(&g.pre_activation)
            .map(|(a, b)| dot(a.as_slice(), b.as_slice()))
            .sum();
        assert!((d - inner).abs() <= 1e-10 * inner.abs().max(1.0));

        let vw: Vec<Matrix> = m.weights().iter().map(|w| normal_like(w.shape(), &mut rng)).collect();
        let vb: Vec<Vector> = m
            .biases()
            .iter()
            .map(|b| Vector::from_vec((0..b.len()).map(|_| rng.sample(StandardNormal)).collect()).unwrap())
            .collect();
        let mean_d = jvp_weights(&m, &t, &vw, Some(&vb)).unwrap().iter().sum::<f64>() / 12.0;
        let inner: f64 = vw
            .iter()
            .zip(&g.weights)
            .map(|(a, b)| dot(a.as_slice(), b.as_slice()))
            .chain(vb.iter().zip(&g.biases).map(|(a, b)| dot(a, b)))
            .sum();
        assert!((mean_d - inner).abs() <= 1e-10 * inner.abs().max(1.0));
    }
}

#[test]
fn per_sample_weight_jvp_along_own_gradient() {
    let m = random_model(&[6, 8, 8, 3], 7);
    let (x, y) = random_batch(5, 6, 3, 8);
    let t = forward(&m, &x, &y).unwrap();
    let g = backward(&m, &t);
    for b in 0..5 {
        let per_sample: Vec<Matrix> = (0..3)
            .map(|i| {
                let d = g.pre_activation[i].row(b);
                let xi = t.layer_input(i).row(b);
                Matrix::from_fn(d.len(), xi.len(), |r, c| d[r] * xi[c])
            })
            .collect();
        let want: f64 = per_sample.iter().map(|p| dot(p.as_slice(), p.as_slice())).sum();
        let got = jvp_weights_sample(&m, &t, b, &per_sample, None).unwrap();
        assert!((got - want).abs() <= 1e-10 * want.max(1.0));
    }
}

#[test]
fn single_layer_weight_jvp_is_linear() {
    let m = random_model(&[4, 3], 1);
    let (x, y) = random_batch(3, 4, 3, 2);
    let t = forward(&m, &x, &y).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = normal_like((3, 4), &mut rng);
    let d = jvp_weights(&m, &t, std::slice::from_ref(&v), None).unwrap();
    for b in 0..3 {
        let vx = v.matvec(x.row(b));
        let mut p = t.probabilities().row(b).to_vec();
        p[y[b]] -= 1.0;
        assert!((d[b] - dot(&p, &vx)).abs() < 1e-14);
        let single = jvp_weights_sample(&m, &t, b, std::slice::from_ref(&v), None).unwrap();
        assert!((single - d[b]).abs() < 1e-14);
    }
}

#[test]
fn jvp_rejects_wrong_shapes() {
    let m = random_model(&[4, 5, 3], 1);
    let (x, y) = random_batch(2, 4, 3, 2);
    let t = forward(&m, &x, &y).unwrap();
    let bad = vec![Matrix::zeros(2, 5), Matrix::zeros(2, 4)];
    assert!(jvp_activations(&m, &t, &bad).is_err());
    assert!(jvp_weights(&m, &t, &[Matrix::zeros(5, 4)], None).is_err());
}

#[test]
fn relabelling_permutes_losses_consistently() {
    let m = random_model(&[6, 8, 4], 30);
    let (x, y) = random_batch(8, 6, 4, 31);
    let perm = [2usize, 0, 3, 1];
    let (w, b) = (m.weights(), m.biases());
    let mut w_last = w[1].clone();
    let mut b_last = b[1].clone();
    for (new, &old) in perm.iter().enumerate() {
        w_last.row_mut(new).copy_from_slice(w[1].row(old));
        b_last[new] = b[1][old];
    }
    let pm = MlpModel::from_parts(vec![w[0].clone(), w_last], vec![b[0].clone(), b_last]).unwrap();
    let inv: Vec<usize> = y.iter().map(|&c| perm.iter().position(|&p| p == c).unwrap()).collect();
    let a = forward(&m, &x, &y).unwrap();
    let bt = forward(&pm, &x, &inv).unwrap();
    for (l1, l2) in a.losses().iter().zip(bt.losses()) {
        assert!((l1 - l2).abs() < 1e-14);
        assert!(*l1 >= 0.0);
    }
}

#[test]
fn checkpoint_round_trip_and_length_check() {
    let m = random_model(&[5, 7, 3], 40);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save_checkpoint(&path, 40, 123).unwrap();
    let (back, header) = MlpModel::load_checkpoint(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(header.step, 123);
    assert_eq!(header.layer_widths, vec![5, 7, 3]);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.pop();
    let err = MlpModel::from_checkpoint_bytes(&bytes, &path).unwrap_err();
    assert!(err.to_string().contains("expected"), "{err}");
}

#[test]
fn init_is_seeded_and_bounded() {
    let a = MlpModel::new(&[40, 128, 10], 1).unwrap();
    let b = MlpModel::new(&[40, 128, 10], 1).unwrap();
    let c = MlpModel::new(&[40, 128, 10], 2).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let bound = (6.0f64 / 40.0).sqrt();
    assert!(a.weights()[0].as_slice().iter().all(|v| v.abs() <= bound));
    assert!(a.biases().iter().all(|b| b.iter().all(|&v| v == 0.0)));
    assert_eq!(a.num_params(), 40 * 128 + 128 + 128 * 10 + 10);
}
