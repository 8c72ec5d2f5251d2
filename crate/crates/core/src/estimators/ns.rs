use super::{active_columns, union_active_columns, BatchMask};
use crate::model::{ForwardTrace, MlpModel};
use crate::orthogonalize::{bank_index, OddPolynomial, StepPolynomialBank, TopFactors};

/// Per-layer polynomial selection for the Newton–Schulz estimator.
///
/// Every `refresh_every` steps the ratio `σ_k/σ₁` of one representative
/// `W̃` per layer (the first sample's, or the union-mask matrix) picks the
/// nearest bank entry; in between the cached choice is reused.
#[derive(Debug, Clone)]
pub struct NsState {
    bank: StepPolynomialBank,
    k: usize,
    refresh_every: u64,
    ratios: Vec<f64>,
    selected: Vec<usize>,
    refreshed_at: Option<u64>,
}

impl NsState {
    pub fn new(bank: StepPolynomialBank, k: usize, refresh_every: u64) -> Self {
        NsState {
            bank,
            k,
            refresh_every: refresh_every.max(1),
            ratios: Vec::new(),
            selected: Vec::new(),
            refreshed_at: None,
        }
    }

    pub fn needs_refresh(&self, step: u64) -> bool {
        match self.refreshed_at {
            None => true,
            Some(last) => step >= last + self.refresh_every,
        }
    }

    pub fn refresh(&mut self, model: &MlpModel, trace: &ForwardTrace, step: u64, mask: BatchMask) {
        let chained = model.num_layers() - 1;
        self.ratios.clear();
        self.selected.clear();
        for i in 0..chained {
            let active = match mask {
                BatchMask::PerSample => active_columns(trace, i, 0),
                BatchMask::Any => union_active_columns(trace, i),
            };
            let block = model.weights()[i + 1].select_columns(&active);
            let f = TopFactors::compute(&block, self.k);
            let ratio = if f.rank() >= self.k && self.k > 0 {
                f.sigma[self.k - 1] / f.sigma[0]
            } else {
                0.0
            };
            self.ratios.push(ratio);
            self.selected.push(bank_index(ratio));
        }
        self.refreshed_at = Some(step);
    }

    /// Polynomial for chained layer `i`; `None` before the first refresh
    /// and for the last layer.
    pub fn polynomial(&self, layer: usize) -> Option<&OddPolynomial> {
        self.selected.get(layer).map(|&j| self.bank.polynomial(j))
    }

    /// The most recent `σ_k/σ₁` per chained layer.
    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn bank(&self) -> &StepPolynomialBank {
        &self.bank
    }
}
