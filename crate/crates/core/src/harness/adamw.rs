use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::MlpModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay over a list of flat tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(sizes: &[usize], config: AdamWConfig) -> Self {
        AdamW {
            config,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// State for `model`'s tensors in the order `W_0, b_0, W_1, b_1, ...`.
    pub fn for_model(model: &MlpModel, config: AdamWConfig) -> Self {
        let sizes: Vec<usize> = model
            .weights()
            .iter()
            .zip(model.biases())
            .flat_map(|(w, b)| [w.rows() * w.cols(), b.len()])
            .collect();
        Self::new(&sizes, config)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update. `params[j]`/`grads[j]` pair with state tensor `which[j]`;
    /// tensors not listed are left alone. Fails before touching anything if a
    /// gradient is non-finite, reporting the tensor index.
    pub fn step_tensors(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], which: &[usize]) -> std::result::Result<(), usize> {
        if let Some(j) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(which[j]);
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for ((p, g), &slot) in params.iter_mut().zip(grads).zip(which) {
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..p.len() {
                p[i] *= 1.0 - c.lr * c.weight_decay;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }

    /// Update every weight and, unless `freeze_biases`, every bias.
    pub fn step_model(
        &mut self,
        model: &mut MlpModel,
        weight_grads: &[Matrix],
        bias_grads: &[Vector],
        freeze_biases: bool,
    ) -> Result<()> {
        let (ws, bs) = model.params_mut();
        let mut params: Vec<&mut [f64]> = Vec::new();
        let mut grads: Vec<&[f64]> = Vec::new();
        let mut which = Vec::new();
        for (i, (w, b)) in ws.iter_mut().zip(bs.iter_mut()).enumerate() {
            params.push(w.as_mut_slice());
            grads.push(weight_grads[i].as_slice());
            which.push(2 * i);
            if !freeze_biases {
                params.push(&mut b[..]);
                grads.push(&bias_grads[i][..]);
                which.push(2 * i + 1);
            }
        }
        self.step_tensors(&mut params, &grads, &which)
            .map_err(|slot| Error::NonFiniteGradient { layer: slot / 2 + 1 })
    }
}
