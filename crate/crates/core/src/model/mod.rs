//! Fully connected ReLU network with a softmax cross-entropy head.
//!
//! Layer `i` maps `x_i ∈ R^{d_i}` to `s_i = W_i x_i + b_i`; hidden layers
//! apply `x_{i+1} = relu(s_i)` and the last pre-activation is the logit vector.
//! All batched quantities are stored as `B × d` matrices, one row per sample.

mod checkpoint;

pub use checkpoint::CheckpointHeader;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::linalg::{dot, matmul, matmul_nt, matmul_tn, Matrix, Vector};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    widths: Vec<usize>,
    weights: Vec<Matrix>,
    biases: Vec<Vector>,
}

impl MlpModel {
    /// Weights uniform in `±sqrt(6 / d_in)`, biases zero.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        check_widths(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = widths
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                Matrix::from_fn(w[1], w[0], |_, _| dist.sample(&mut rng))
            })
            .collect();
        let biases = widths[1..].iter().map(|&d| Vector::zeros(d)).collect();
        Ok(MlpModel {
            widths: widths.to_vec(),
            weights,
            biases,
        })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        check_widths(widths)?;
        Ok(MlpModel {
            widths: widths.to_vec(),
            weights: widths.windows(2).map(|w| Matrix::zeros(w[1], w[0])).collect(),
            biases: widths[1..].iter().map(|&d| Vector::zeros(d)).collect(),
        })
    }

    pub fn from_parts(weights: Vec<Matrix>, biases: Vec<Vector>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::Config(format!(
                "{} weight matrices but {} bias vectors",
                weights.len(),
                biases.len()
            )));
        }
        let mut widths = vec![weights[0].cols()];
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.cols() != widths[i] || b.len() != w.rows() {
                return Err(Error::Shape {
                    op: "MlpModel::from_parts",
                    left: w.shape(),
                    right: (b.len(), widths[i]),
                });
            }
            if !w.is_finite() || b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
            widths.push(w.rows());
        }
        check_widths(&widths)?;
        Ok(MlpModel {
            widths,
            weights,
            biases,
        })
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.widths
    }

    /// Number of weight matrices `l`.
    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vector] {
        &self.biases
    }

    /// Mutable parameter access for optimisers. Callers must keep shapes.
    pub fn params_mut(&mut self) -> (&mut [Matrix], &mut [Vector]) {
        (&mut self.weights, &mut self.biases)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Logits for a `B × d_0` batch.
    pub fn logits(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_inputs(inputs)?;
        let mut x = inputs.clone();
        for i in 0..self.num_layers() {
            let mut s = self.affine(i, &x);
            if i + 1 < self.num_layers() {
                for v in s.as_mut_slice() {
                    *v = v.max(0.0);
                }
            }
            x = s;
        }
        Ok(x)
    }

    fn affine(&self, i: usize, x: &Matrix) -> Matrix {
        let mut s = matmul_nt(x, &self.weights[i]);
        add_row(&mut s, &self.biases[i]);
        s
    }

    fn check_inputs(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "forward",
                left: inputs.shape(),
                right: self.weights[0].shape(),
            });
        }
        Ok(())
    }
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(Error::Config(format!(
            "layer widths must list at least two positive sizes, got {widths:?}"
        )));
    }
    Ok(())
}

fn add_row(m: &mut Matrix, b: &[f64]) {
    for r in 0..m.rows() {
        for (v, bi) in m.row_mut(r).iter_mut().zip(b) {
            *v += bi;
        }
    }
}

fn hadamard_in_place(a: &mut Matrix, mask: &Matrix) {
    for (v, m) in a.as_mut_slice().iter_mut().zip(mask.as_slice()) {
        *v *= m;
    }
}

/// Everything one forward pass produces.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    inputs: Matrix,
    /// `s_i` for every layer; the last one holds the logits.
    pre: Vec<Matrix>,
    /// `x_{i+1}` for hidden layers.
    post: Vec<Matrix>,
    /// 0/1 ReLU derivative of each hidden pre-activation.
    masks: Vec<Matrix>,
    probs: Matrix,
    labels: Vec<usize>,
    losses: Vec<f64>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.inputs.rows()
    }

    pub fn num_layers(&self) -> usize {
        self.pre.len()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    /// `x_i`, the input of layer `i` (`x_0` is the batch itself).
    pub fn layer_input(&self, i: usize) -> &Matrix {
        if i == 0 {
            &self.inputs
        } else {
            &self.post[i - 1]
        }
    }

    pub fn pre_activation(&self, i: usize) -> &Matrix {
        &self.pre[i]
    }

    /// Mask of hidden layer `i < l - 1`, as a `B × d_{i+1}` 0/1 matrix.
    pub fn mask(&self, i: usize) -> &Matrix {
        &self.masks[i]
    }

    pub fn logits(&self) -> &Matrix {
        self.pre.last().unwrap()
    }

    pub fn probabilities(&self) -> &Matrix {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }

    /// Per-sample CE gradient at the logits, `softmax − onehot`.
    fn logit_gradient(&self) -> Matrix {
        let mut g = self.probs.clone();
        for (b, &y) in self.labels.iter().enumerate() {
            g[(b, y)] -= 1.0;
        }
        g
    }
}

pub fn forward(model: &MlpModel, inputs: &Matrix, labels: &[usize]) -> Result<ForwardTrace> {
    model.check_inputs(inputs)?;
    if labels.len() != inputs.rows() {
        return Err(Error::Shape {
            op: "forward labels",
            left: inputs.shape(),
            right: (labels.len(), 1),
        });
    }
    let classes = model.num_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::OutOfRange {
            what: "label",
            value: bad,
            min: 0,
            max: classes - 1,
        });
    }

    let l = model.num_layers();
    let mut pre = Vec::with_capacity(l);
    let mut post = Vec::with_capacity(l - 1);
    let mut masks = Vec::with_capacity(l - 1);
    for i in 0..l {
        let x = if i == 0 { inputs } else { &post[i - 1] };
        let s = model.affine(i, x);
        if i + 1 < l {
            let mask = Matrix::from_fn(s.rows(), s.cols(), |r, c| {
                if s[(r, c)] > 0.0 {
                    1.0
                } else {
                    0.0
                }
            });
            let mut x_next = s.clone();
            hadamard_in_place(&mut x_next, &mask);
            masks.push(mask);
            post.push(x_next);
        }
        pre.push(s);
    }

    let logits = pre.last().unwrap();
    let mut probs = Matrix::zeros(logits.rows(), classes);
    let mut losses = Vec::with_capacity(labels.len());
    for (b, &y) in labels.iter().enumerate() {
        let z = logits.row(b);
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
        let lse = zmax + sum.ln();
        for (p, v) in probs.row_mut(b).iter_mut().zip(z) {
            *p = (v - lse).exp();
        }
        losses.push(lse - z[y]);
    }
    if let Some(b) = losses.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss of sample {b}")));
    }

    Ok(ForwardTrace {
        inputs: inputs.clone(),
        pre,
        post,
        masks,
        probs,
        labels: labels.to_vec(),
        losses,
    })
}

/// Exact reverse-mode gradients.
#[derive(Debug, Clone)]
pub struct TrueGradients {
    /// `∂L_b/∂s_i` for each layer, `B × d_{i+1}` (per-sample, unscaled by `1/B`).
    pub pre_activation: Vec<Matrix>,
    /// Gradient of the batch-mean loss w.r.t. `W_i`.
    pub weights: Vec<Matrix>,
    /// Gradient of the batch-mean loss w.r.t. `b_i`.
    pub biases: Vec<Vector>,
}

pub fn backward(model: &MlpModel, trace: &ForwardTrace) -> TrueGradients {
    let l = model.num_layers();
    let mut deltas = vec![Matrix::zeros(0, 0); l];
    let mut delta = trace.logit_gradient();
    for i in (0..l).rev() {
        if i + 1 < l {
            delta = matmul(&delta, &model.weights[i + 1]).expect("shapes fixed by model");
            hadamard_in_place(&mut delta, &trace.masks[i]);
        }
        deltas[i] = delta.clone();
    }
    let weights = (0..l)
        .map(|i| outer_mean(&deltas[i], trace.layer_input(i)))
        .collect();
    let biases = deltas.iter().map(|d| column_mean(d)).collect();
    TrueGradients {
        pre_activation: deltas,
        weights,
        biases,
    }
}

/// `(1/B) Σ_b g_b x_bᵀ` for row-stacked `g` and `x`.
pub(crate) fn outer_mean(g: &Matrix, x: &Matrix) -> Matrix {
    matmul_tn(g, x).scaled(1.0 / g.rows() as f64)
}

pub(crate) fn column_mean(m: &Matrix) -> Vector {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    let inv = 1.0 / m.rows() as f64;
    Vector::from_raw(out.into_iter().map(|v| v * inv).collect())
}

/// Per-sample directional derivative `Σ_i y_i · ∂L_b/∂s_i` by forward tangent
/// propagation. `y[i]` is `B × d_{i+1}`.
pub fn jvp_activations(model: &MlpModel, trace: &ForwardTrace, y: &[Matrix]) -> Result<Vec<f64>> {
    let l = model.num_layers();
    let bsz = trace.batch_size();
    if y.len() != l {
        return Err(Error::Shape {
            op: "jvp_activations layers",
            left: (y.len(), 0),
            right: (l, 0),
        });
    }
    for (i, yi) in y.iter().enumerate() {
        if yi.shape() != (bsz, model.widths[i + 1]) {
            return Err(Error::Shape {
                op: "jvp_activations",
                left: yi.shape(),
                right: (bsz, model.widths[i + 1]),
            });
        }
    }
    let mut t_s = y[0].clone();
    for i in 1..l {
        hadamard_in_place(&mut t_s, &trace.masks[i - 1]);
        let mut next = matmul_nt(&t_s, &model.weights[i]);
        for (v, yi) in next.as_mut_slice().iter_mut().zip(y[i].as_slice()) {
            *v += yi;
        }
        t_s = next;
    }
    Ok(ce_tangent(trace, &t_s))
}

/// Per-sample directional derivative along weight tangents `V_i` (and
/// optional bias tangents), shared by every sample in the batch.
pub fn jvp_weights(
    model: &MlpModel,
    trace: &ForwardTrace,
    tangent_weights: &[Matrix],
    tangent_biases: Option<&[Vector]>,
) -> Result<Vec<f64>> {
    check_weight_tangents(model, tangent_weights, tangent_biases)?;
    let l = model.num_layers();
    let mut t_s: Option<Matrix> = None;
    for i in 0..l {
        let mut next = matmul_nt(trace.layer_input(i), &tangent_weights[i]);
        if let Some(prev) = &t_s {
            let mut t_x = prev.clone();
            hadamard_in_place(&mut t_x, &trace.masks[i - 1]);
            let carried = matmul_nt(&t_x, &model.weights[i]);
            for (v, c) in next.as_mut_slice().iter_mut().zip(carried.as_slice()) {
                *v += c;
            }
        }
        if let Some(tb) = tangent_biases {
            add_row(&mut next, &tb[i]);
        }
        t_s = Some(next);
    }
    Ok(ce_tangent(trace, &t_s.unwrap()))
}

/// [`jvp_weights`] for a single sample `b` with its own tangents.
pub fn jvp_weights_sample(
    model: &MlpModel,
    trace: &ForwardTrace,
    b: usize,
    tangent_weights: &[Matrix],
    tangent_biases: Option<&[Vector]>,
) -> Result<f64> {
    check_weight_tangents(model, tangent_weights, tangent_biases)?;
    let l = model.num_layers();
    let mut t_x = vec![0.0; model.input_dim()];
    let mut t_s = Vec::new();
    for i in 0..l {
        let x = trace.layer_input(i).row(b);
        let w = &model.weights[i];
        let v = &tangent_weights[i];
        t_s = (0..w.rows())
            .map(|r| dot(v.row(r), x) + dot(w.row(r), &t_x))
            .collect();
        if let Some(tb) = tangent_biases {
            for (t, bv) in t_s.iter_mut().zip(tb[i].iter()) {
                *t += bv;
            }
        }
        if i + 1 < l {
            t_x = t_s
                .iter()
                .zip(trace.masks[i].row(b))
                .map(|(t, m)| t * m)
                .collect();
        }
    }
    let mut g = trace.probs.row(b).to_vec();
    g[trace.labels[b]] -= 1.0;
    Ok(dot(&g, &t_s))
}

fn check_weight_tangents(
    model: &MlpModel,
    tangent_weights: &[Matrix],
    tangent_biases: Option<&[Vector]>,
) -> Result<()> {
    if tangent_weights.len() != model.num_layers() {
        return Err(Error::Shape {
            op: "jvp_weights layers",
            left: (tangent_weights.len(), 0),
            right: (model.num_layers(), 0),
        });
    }
    for (v, w) in tangent_weights.iter().zip(&model.weights) {
        if v.shape() != w.shape() {
            return Err(Error::Shape {
                op: "jvp_weights",
                left: v.shape(),
                right: w.shape(),
            });
        }
    }
    if let Some(tb) = tangent_biases {
        if tb.len() != model.num_layers() {
            return Err(Error::Shape {
                op: "jvp_weights bias layers",
                left: (tb.len(), 0),
                right: (model.num_layers(), 0),
            });
        }
        for (v, b) in tb.iter().zip(&model.biases) {
            if v.len() != b.len() {
                return Err(Error::Shape {
                    op: "jvp_weights bias",
                    left: (v.len(), 1),
                    right: (b.len(), 1),
                });
            }
        }
    }
    Ok(())
}

/// Tangent of each sample's CE loss given the logit tangents.
fn ce_tangent(trace: &ForwardTrace, t_logits: &Matrix) -> Vec<f64> {
    (0..trace.batch_size())
        .map(|b| {
            let p = trace.probs.row(b);
            dot(p, t_logits.row(b)) - t_logits[(b, trace.labels[b])]
        })
        .collect()
}

#[cfg(test)]
mod tests;
