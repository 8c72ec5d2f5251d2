//! Checkpoint file: one line of JSON header, then every parameter as a
//! little-endian f64 — per layer, weights row-major followed by biases.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MlpModel;
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub layer_widths: Vec<usize>,
    pub seed: u64,
    pub step: u64,
}

impl MlpModel {
    pub fn to_checkpoint_bytes(&self, seed: u64, step: u64) -> Vec<u8> {
        let header = CheckpointHeader {
            layer_widths: self.widths.clone(),
            seed,
            step,
        };
        let mut out = serde_json::to_vec(&header).expect("header serialises");
        out.push(b'\n');
        out.reserve(self.num_params() * 8);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for v in w.as_slice().iter().chain(b.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], path: &Path) -> Result<(MlpModel, CheckpointHeader)> {
        let nl = bytes
            .iter()
            .position(|&c| c == b'\n')
            .ok_or_else(|| Error::parse(path, "missing checkpoint header line"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::parse(path, format!("bad checkpoint header: {e}")))?;
        let template = MlpModel::zeros(&header.layer_widths)?;
        let payload = &bytes[nl + 1..];
        let expected = template.num_params() * 8;
        if payload.len() != expected {
            return Err(Error::parse(
                path,
                format!(
                    "parameter block is {} bytes, expected {expected} for widths {:?}",
                    payload.len(),
                    header.layer_widths
                ),
            ));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in header.layer_widths.windows(2) {
            let wd: Vec<f64> = values.by_ref().take(w[0] * w[1]).collect();
            let bd: Vec<f64> = values.by_ref().take(w[1]).collect();
            weights.push(Matrix::from_vec(w[1], w[0], wd).map_err(|e| Error::parse(path, e.to_string()))?);
            biases.push(Vector::from_vec(bd).map_err(|e| Error::parse(path, e.to_string()))?);
        }
        Ok((MlpModel::from_parts(weights, biases)?, header))
    }

    pub fn save_checkpoint(&self, path: &Path, seed: u64, step: u64) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes(seed, step)).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<(MlpModel, CheckpointHeader)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, path)
    }
}
