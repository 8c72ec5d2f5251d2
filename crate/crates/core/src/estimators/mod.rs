//! Gradient estimators: each turns one forward pass plus one tangent pass
//! into per-layer guesses of `∂L_b/∂s_i` and batch-mean weight gradients.

mod noise;
mod ns;
mod projection;

pub use noise::NoiseStream;
pub use ns::NsState;
pub use projection::Projection;

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{complete_orthonormal, spectral_norm, Matrix, Vector};
use crate::model::{
    backward, column_mean, jvp_activations, jvp_weights_sample, outer_mean, ForwardTrace,
    MlpModel, TrueGradients,
};
use crate::orthogonalize::{
    newton_schulz_with_norm, orthogonalize_bottomk, precondition_from_factors, OddPolynomial,
    StepPolynomialBank, TopFactors, DEFAULT_PRECONDITION_SIGMA,
};
use noise::WEIGHT_SPACE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Backprop,
    WeightPerturbation,
    ActivationPerturbation,
    WTranspose,
    WPerp { k: usize },
    WPerpNs { k: usize },
    WPrecond { sigma: f64 },
    /// `U_k V_kᵀ` over the `k` smallest singular values (a diagnostic
    /// contrast to `WPerp`).
    WPerpBottom { k: usize },
}

pub const METHOD_TAGS: [&str; 8] = [
    "backprop",
    "weight_perturbation",
    "activation_perturbation",
    "w_transpose",
    "w_perp",
    "w_perp_ns",
    "w_precond",
    "w_perp_bottom",
];

impl Method {
    pub fn from_tag(tag: &str, k: Option<usize>, sigma: Option<f64>) -> Result<Method> {
        let need_k = || match k {
            Some(k) if k >= 1 => Ok(k),
            Some(_) => Err(Error::Config("k must be at least 1".into())),
            None => Err(Error::Config(format!("method {tag} needs --k"))),
        };
        Ok(match tag {
            "backprop" => Method::Backprop,
            "weight_perturbation" => Method::WeightPerturbation,
            "activation_perturbation" => Method::ActivationPerturbation,
            "w_transpose" => Method::WTranspose,
            "w_perp" => Method::WPerp { k: need_k()? },
            "w_perp_ns" => Method::WPerpNs { k: need_k()? },
            "w_perp_bottom" => Method::WPerpBottom { k: need_k()? },
            "w_precond" => {
                let sigma = sigma.unwrap_or(DEFAULT_PRECONDITION_SIGMA);
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
                }
                Method::WPrecond { sigma }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown method {other:?}; expected one of {}",
                    METHOD_TAGS.join(", ")
                )))
            }
        })
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Method::Backprop => "backprop",
            Method::WeightPerturbation => "weight_perturbation",
            Method::ActivationPerturbation => "activation_perturbation",
            Method::WTranspose => "w_transpose",
            Method::WPerp { .. } => "w_perp",
            Method::WPerpNs { .. } => "w_perp_ns",
            Method::WPrecond { .. } => "w_precond",
            Method::WPerpBottom { .. } => "w_perp_bottom",
        }
    }

    /// Methods whose guesses go through the upstream Jacobian `W̃`.
    pub fn is_chained(&self) -> bool {
        matches!(
            self,
            Method::WTranspose
                | Method::WPerp { .. }
                | Method::WPerpNs { .. }
                | Method::WPrecond { .. }
                | Method::WPerpBottom { .. }
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::WPerp { k } | Method::WPerpNs { k } | Method::WPerpBottom { k } => {
                write!(f, "{}(k={k})", self.tag())
            }
            Method::WPrecond { sigma } => write!(f, "{}(sigma={sigma:e})", self.tag()),
            _ => f.write_str(self.tag()),
        }
    }
}

/// Which ReLU mask enters `W̃ = W_{i+1} M_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMask {
    /// Each sample's own mask (exact).
    #[default]
    PerSample,
    /// One matrix per layer from the union of the batch's active units
    /// (cheap approximation).
    Any,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GuessOptions {
    /// One `ε` per layer shared by all samples of a step.
    pub shared_epsilon: bool,
    pub batch_mask: BatchMask,
    /// Do not estimate (or perturb) bias gradients.
    pub freeze_biases: bool,
}

/// Covariance diagnostics of one layer, gathered alongside the guesses.
#[derive(Debug, Clone)]
pub struct CovarianceStats {
    /// Row `b` is `(Cov(y_iᵇ) − I) ∂L_b/∂s_i`.
    pub residuals: Matrix,
    /// Batch mean of `‖Cov(y_iᵇ) − I‖_F`.
    pub cov_frobenius: f64,
}

#[derive(Debug, Clone)]
pub struct GuessBatch {
    pub method: Method,
    /// `y_iᵇ` per layer (`B × d_{i+1}`); empty for weight-space methods.
    pub directions: Vec<Matrix>,
    /// `d_b`; empty for backprop.
    pub directional: Vec<f64>,
    /// `ĝ_iᵇ = d_b y_iᵇ` per layer (the exact gradient for backprop).
    pub guesses: Vec<Matrix>,
    /// Already-averaged weight and bias guesses for weight perturbation.
    pub weight_space: Option<(Vec<Matrix>, Vec<Vector>)>,
    /// Present when the truth was supplied to the sampler.
    pub covariance: Option<Vec<CovarianceStats>>,
}

#[derive(Debug, Clone)]
pub struct EstimatedGradients {
    pub method: Method,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vector>,
}

pub(crate) fn active_columns(trace: &ForwardTrace, layer: usize, sample: usize) -> Vec<usize> {
    trace
        .mask(layer)
        .row(sample)
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(j, _)| j)
        .collect()
}

pub(crate) fn union_active_columns(trace: &ForwardTrace, layer: usize) -> Vec<usize> {
    let mask = trace.mask(layer);
    (0..mask.cols())
        .filter(|&j| (0..mask.rows()).any(|b| mask[(b, j)] > 0.0))
        .collect()
}

/// `W̃ = W_{i+1} M_iᵇ` for chained layer `i` and sample `b`.
pub fn upstream_jacobian(model: &MlpModel, trace: &ForwardTrace, layer: usize, sample: usize) -> Matrix {
    let w = &model.weights()[layer + 1];
    let active = active_columns(trace, layer, sample);
    w.select_columns(&active).scatter_columns(&active, w.cols())
}

/// Projection `W̃'` of `method` for layer `i`, sample `b`. The last layer
/// (no downstream weight) always uses the identity. `poly` is required for
/// `WPerpNs`.
pub fn build_projection(
    method: Method,
    model: &MlpModel,
    trace: &ForwardTrace,
    layer: usize,
    sample: usize,
    poly: Option<&OddPolynomial>,
) -> Result<Projection> {
    if layer + 1 >= model.num_layers() || !method.is_chained() {
        return match method {
            Method::Backprop | Method::WeightPerturbation => Err(Error::Config(format!(
                "{method} has no activation-space projection"
            ))),
            _ => Ok(Projection::Identity(model.layer_widths()[layer + 1])),
        };
    }
    projection_from_columns(method, &model.weights()[layer + 1], active_columns(trace, layer, sample), poly, None)
}

/// `W_{i+1}ᵀ W_{i+1}` for the layers whose per-sample factorisations can
/// reuse it (the active-column Gram is a submatrix).
fn shared_grams(method: Method, model: &MlpModel) -> Vec<Option<Matrix>> {
    let l = model.num_layers();
    (0..l)
        .map(|i| match method {
            Method::WPerp { .. } | Method::WPrecond { .. } if i + 1 < l => Some(model.weights()[i + 1].gram()),
            _ => None,
        })
        .collect()
}

/// Factors of `block = w_next[:, active]`, taking the Gram from `gram`
/// (the full `w_nextᵀ w_next`) when the block is tall.
fn factors(block: &Matrix, active: &[usize], gram: Option<&Matrix>, k: usize) -> TopFactors {
    match gram {
        Some(g) if block.rows() >= block.cols() => {
            let sub = Matrix::from_fn(active.len(), active.len(), |r, c| g[(active[r], active[c])]);
            TopFactors::with_gram(block, &sub, k)
        }
        _ => TopFactors::compute(block, k),
    }
}

fn projection_from_columns(
    method: Method,
    w_next: &Matrix,
    active: Vec<usize>,
    poly: Option<&OddPolynomial>,
    gram: Option<&Matrix>,
) -> Result<Projection> {
    let cols = w_next.cols();
    let block = w_next.select_columns(&active);
    Ok(match method {
        Method::WTranspose => Projection::Dense { cols, active, block },
        Method::WPerp { k } => {
            let f = factors(&block, &active, gram, k);
            Projection::Factored {
                cols,
                active,
                u: f.u,
                v: f.v,
            }
        }
        Method::WPerpNs { .. } => {
            let poly = poly.ok_or_else(|| Error::Config("w_perp_ns needs a polynomial bank".into()))?;
            let norm = spectral_norm(
                &block,
                crate::orthogonalize::NORM_ITERS,
                crate::orthogonalize::NORM_SEED,
            );
            let block = newton_schulz_with_norm(&block, poly, norm)?;
            Projection::Dense { cols, active, block }
        }
        Method::WPrecond { sigma } => {
            let f = factors(&block, &active, gram, usize::MAX);
            let v_full = f.v.transpose().scatter_columns(&active, cols).transpose();
            let full = precondition_from_factors(&f.u, &f.sigma, &v_full, w_next.shape(), sigma);
            Projection::Dense {
                cols,
                active: (0..cols).collect(),
                block: full,
            }
        }
        Method::WPerpBottom { k } => {
            let (m, r) = block.shape();
            if m >= r + k && cols >= r + k {
                // the k smallest singular values are all zero, and any orthonormal
                // pair from the two null spaces is a valid choice of singular
                // vectors: inactive unit vectors on the right, the complement of
                // range(block) on the left
                let u = complete_orthonormal(&block, r + k).select_columns(&(r..r + k).collect::<Vec<_>>());
                let inactive: Vec<usize> = (0..cols).filter(|j| !active.contains(j)).take(k).collect();
                return Ok(Projection::Factored {
                    cols,
                    active: inactive,
                    u,
                    v: Matrix::identity(k),
                });
            }
            let full = block.scatter_columns(&active, cols);
            Projection::Dense {
                cols,
                active: (0..cols).collect(),
                block: orthogonalize_bottomk(&full, k)?,
            }
        }
        Method::ActivationPerturbation => Projection::Identity(cols),
        Method::Backprop | Method::WeightPerturbation => unreachable!("not chained"),
    })
}

/// A configured estimator with its noise stream and Newton–Schulz state.
#[derive(Debug, Clone)]
pub struct Estimator {
    method: Method,
    options: GuessOptions,
    noise: NoiseStream,
    ns: Option<NsState>,
}

/// Optimiser steps between `σ_k/σ₁` refreshes.
pub const NS_REFRESH_EVERY: u64 = 50;

impl Estimator {
    pub fn new(
        method: Method,
        options: GuessOptions,
        noise_seed: u64,
        bank: Option<StepPolynomialBank>,
    ) -> Result<Self> {
        let ns = match method {
            Method::WPerpNs { k } => {
                let bank = bank.ok_or_else(|| Error::Config("w_perp_ns needs a polynomial bank".into()))?;
                Some(NsState::new(bank, k, NS_REFRESH_EVERY))
            }
            _ => None,
        };
        Ok(Estimator {
            method,
            options,
            noise: NoiseStream::new(noise_seed),
            ns,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn options(&self) -> GuessOptions {
        self.options
    }

    pub fn ns_state(&self) -> Option<&NsState> {
        self.ns.as_ref()
    }

    /// Per-step bookkeeping before sampling (the Newton–Schulz refresh).
    pub fn prepare(&mut self, model: &MlpModel, trace: &ForwardTrace, step: u64) {
        let mask = self.options.batch_mask;
        if let Some(ns) = &mut self.ns {
            if ns.needs_refresh(step) {
                ns.refresh(model, trace, step, mask);
            }
        }
    }

    /// Draw one guess per sample. When `truth` is given, covariance
    /// diagnostics for the metrics are collected too.
    pub fn sample_guesses(
        &self,
        model: &MlpModel,
        trace: &ForwardTrace,
        step: u64,
        truth: Option<&TrueGradients>,
    ) -> Result<GuessBatch> {
        match self.method {
            Method::Backprop => Ok(self.backprop_guesses(model, trace, truth)),
            Method::WeightPerturbation => self.weight_space_guesses(model, trace, step),
            _ => self.activation_guesses(model, trace, step, truth),
        }
    }

    /// `prepare` + `sample_guesses` + `assemble_weight_gradients`.
    pub fn estimate(&mut self, model: &MlpModel, trace: &ForwardTrace, step: u64) -> Result<EstimatedGradients> {
        self.prepare(model, trace, step);
        let guesses = self.sample_guesses(model, trace, step, None)?;
        Ok(assemble_weight_gradients(&guesses, trace, self.options.freeze_biases))
    }

    fn backprop_guesses(&self, model: &MlpModel, trace: &ForwardTrace, truth: Option<&TrueGradients>) -> GuessBatch {
        let owned;
        let truth = match truth {
            Some(t) => t,
            None => {
                owned = backward(model, trace);
                &owned
            }
        };
        let covariance = Some(
            truth
                .pre_activation
                .iter()
                .map(|g| CovarianceStats {
                    residuals: Matrix::zeros(g.rows(), g.cols()),
                    cov_frobenius: 0.0,
                })
                .collect(),
        );
        GuessBatch {
            method: self.method,
            directions: Vec::new(),
            directional: Vec::new(),
            guesses: truth.pre_activation.clone(),
            weight_space: None,
            covariance,
        }
    }

    fn polynomial(&self, layer: usize) -> Option<&OddPolynomial> {
        self.ns.as_ref().and_then(|ns| ns.polynomial(layer))
    }

    fn activation_guesses(
        &self,
        model: &MlpModel,
        trace: &ForwardTrace,
        step: u64,
        truth: Option<&TrueGradients>,
    ) -> Result<GuessBatch> {
        if let Some(ns) = &self.ns {
            if ns.ratios().is_empty() && model.num_layers() > 1 {
                return Err(Error::Config("Estimator::prepare must run before sampling".into()));
            }
        }
        let l = model.num_layers();
        let bsz = trace.batch_size();

        // union-mask projections are shared by every sample
        let shared: Vec<Option<Projection>> = (0..l)
            .map(|i| {
                if self.options.batch_mask == BatchMask::Any && i + 1 < l && self.method.is_chained() {
                    projection_from_columns(
                        self.method,
                        &model.weights()[i + 1],
                        union_active_columns(trace, i),
                        self.polynomial(i),
                        None,
                    )
                    .map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;

        let grams = shared_grams(self.method, model);

        type SampleOut = (Vec<Vec<f64>>, Vec<(Vec<f64>, f64)>);
        let per_sample: Vec<SampleOut> = (0..bsz)
            .into_par_iter()
            .map(|b| {
                let mut ys = Vec::with_capacity(l);
                let mut stats = Vec::new();
                for i in 0..l {
                    let own;
                    let proj = match &shared[i] {
                        Some(p) => p,
                        None => {
                            own = if i + 1 < l && self.method.is_chained() {
                                projection_from_columns(
                                    self.method,
                                    &model.weights()[i + 1],
                                    active_columns(trace, i, b),
                                    self.polynomial(i),
                                    grams[i].as_ref(),
                                )?
                            } else {
                                build_projection(self.method, model, trace, i, b, self.polynomial(i))?
                            };
                            &own
                        }
                    };
                    let key = if self.options.shared_epsilon { 0 } else { b as u64 };
                    let eps = self.noise.normal(step, i as u64, key, proj.noise_dim());
                    ys.push(proj.guess(&eps));
                    if let Some(t) = truth {
                        let g = t.pre_activation[i].row(b);
                        stats.push((proj.covariance_residual(g), proj.cov_frobenius()));
                    }
                }
                Ok((ys, stats))
            })
            .collect::<Result<_>>()?;

        let widths = model.layer_widths();
        let directions: Vec<Matrix> = (0..l)
            .map(|i| Matrix::from_fn(bsz, widths[i + 1], |b, j| per_sample[b].0[i][j]))
            .collect();
        let directional = jvp_activations(model, trace, &directions)?;
        let guesses = directions
            .iter()
            .map(|y| Matrix::from_fn(y.rows(), y.cols(), |b, j| directional[b] * y[(b, j)]))
            .collect();
        let covariance = truth.map(|_| {
            (0..l)
                .map(|i| CovarianceStats {
                    residuals: Matrix::from_fn(bsz, widths[i + 1], |b, j| per_sample[b].1[i].0[j]),
                    cov_frobenius: per_sample.iter().map(|s| s.1[i].1).sum::<f64>() / bsz as f64,
                })
                .collect()
        });
        Ok(GuessBatch {
            method: self.method,
            directions,
            directional,
            guesses,
            weight_space: None,
            covariance,
        })
    }

    /// Tangents for every weight (and bias, unless frozen) of one sample.
    fn weight_tangent(&self, model: &MlpModel, step: u64, key: u64) -> (Vec<Matrix>, Option<Vec<Vector>>) {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = self.noise.rng(step, WEIGHT_SPACE, key);
        let mut ws = Vec::with_capacity(model.num_layers());
        let mut bs = Vec::with_capacity(model.num_layers());
        for (w, b) in model.weights().iter().zip(model.biases()) {
            ws.push(Matrix::from_fn(w.rows(), w.cols(), |_, _| StandardNormal.sample(&mut rng)));
            if !self.options.freeze_biases {
                let v: Vec<f64> = (0..b.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
                bs.push(Vector::from_vec(v).expect("finite normals"));
            }
        }
        (ws, (!self.options.freeze_biases).then_some(bs))
    }

    fn weight_space_guesses(&self, model: &MlpModel, trace: &ForwardTrace, step: u64) -> Result<GuessBatch> {
        let bsz = trace.batch_size();
        let key = |b: usize| if self.options.shared_epsilon { 0 } else { b as u64 };
        let directional: Vec<f64> = (0..bsz)
            .into_par_iter()
            .map(|b| {
                let (ws, bs) = self.weight_tangent(model, step, key(b));
                jvp_weights_sample(model, trace, b, &ws, bs.as_deref())
            })
            .collect::<Result<_>>()?;

        // regenerate the tangents instead of keeping B copies of the model
        let mut gw: Vec<Matrix> = model.weights().iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        let mut gb: Vec<Vector> = model.biases().iter().map(|b| Vector::zeros(b.len())).collect();
        let inv_b = 1.0 / bsz as f64;
        for (b, &d) in directional.iter().enumerate() {
            let (ws, bs) = self.weight_tangent(model, step, key(b));
            for (acc, v) in gw.iter_mut().zip(&ws) {
                crate::linalg::axpy(d * inv_b, v.as_slice(), acc.as_mut_slice());
            }
            if let Some(bs) = bs {
                for (acc, v) in gb.iter_mut().zip(&bs) {
                    crate::linalg::axpy(d * inv_b, v, acc);
                }
            }
        }
        Ok(GuessBatch {
            method: self.method,
            directions: Vec::new(),
            directional,
            guesses: Vec::new(),
            weight_space: Some((gw, gb)),
            covariance: None,
        })
    }
}

/// Batch-mean outer products `(1/B) Σ_b ĝ_iᵇ x_iᵇᵀ`; bias gradients are the
/// batch-mean guesses (zero when `freeze_biases`).
pub fn assemble_weight_gradients(guesses: &GuessBatch, trace: &ForwardTrace, freeze_biases: bool) -> EstimatedGradients {
    let (weights, mut biases) = match &guesses.weight_space {
        Some((w, b)) => (w.clone(), b.clone()),
        None => {
            let weights = guesses
                .guesses
                .iter()
                .enumerate()
                .map(|(i, g)| outer_mean(g, trace.layer_input(i)))
                .collect();
            let biases = guesses.guesses.iter().map(column_mean).collect();
            (weights, biases)
        }
    };
    if freeze_biases {
        for b in &mut biases {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    EstimatedGradients {
        method: guesses.method,
        weights,
        biases,
    }
}
