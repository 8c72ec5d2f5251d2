//! Datasets: MNIST-1D style files (CSV or BIN), a synthetic fallback, and
//! seeded per-epoch batching.
//!
//! CSV: one sample per line, `label,f0,...,f{d-1}` (an optional header line
//! starting with `label` is skipped).
//! BIN: magic `MNIST1D\0`, u32 count, u32 dim (little-endian), then per
//! sample a u8 label and `dim` little-endian f32 features.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const NUM_CLASSES: usize = 10;
pub const FEATURE_DIM: usize = 40;
pub const BIN_MAGIC: &[u8; 8] = b"MNIST1D\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
    split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Bin,
}

impl Format {
    pub fn from_path(path: &Path) -> Result<Format> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("csv") => Ok(Format::Csv),
            Some("bin") => Ok(Format::Bin),
            _ => Err(Error::Config(format!(
                "cannot infer dataset format of {} (expected .csv or .bin)",
                path.display()
            ))),
        }
    }
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, split: Split) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape {
                op: "Dataset::new",
                left: inputs.shape(),
                right: (labels.len(), 1),
            });
        }
        if let Some((row, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= NUM_CLASSES) {
            return Err(Error::Config(format!("label {y} out of range [0, {NUM_CLASSES}) in row {row}")));
        }
        Ok(Dataset { inputs, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Rows `idx` as a batch.
    pub fn gather(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
        }
        let x = Matrix::from_vec(idx.len(), d, data).expect("rows of a valid matrix");
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (b, &y) in self.labels.iter().enumerate() {
            write!(s, "{y}").unwrap();
            for v in self.inputs.row(b) {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Features are stored as f32; values not representable in f32 are rounded.
    pub fn to_bin(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * (1 + 4 * self.dim()));
        out.extend_from_slice(BIN_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        for (b, &y) in self.labels.iter().enumerate() {
            out.push(y as u8);
            for &v in self.inputs.row(b) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path, format: Format) -> Result<()> {
        let bytes = match format {
            Format::Csv => self.to_csv().into_bytes(),
            Format::Bin => self.to_bin(),
        };
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Load a dataset, inferring the format from the extension when `format` is
/// `None`.
pub fn load_dataset(path: &Path, format: Option<Format>, split: Split) -> Result<Dataset> {
    let format = match format {
        Some(f) => f,
        None => Format::from_path(path)?,
    };
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::Csv => {
            let text = std::str::from_utf8(&bytes).map_err(|e| Error::parse(path, format!("not UTF-8: {e}")))?;
            parse_csv(text, path, split)
        }
        Format::Bin => parse_bin(&bytes, path, split),
    }
}

pub fn parse_csv(text: &str, path: &Path, split: Split) -> Result<Dataset> {
    let mut labels = Vec::new();
    let mut data = Vec::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        let n = lineno + 1;
        if line.is_empty() || (lineno == 0 && line.starts_with("label")) {
            continue;
        }
        let mut fields = line.split(',');
        let label_field = fields.next().unwrap_or("").trim();
        let label: usize = label_field
            .parse()
            .map_err(|_| Error::parse(path, format!("line {n}: bad label {label_field:?}")))?;
        if label >= NUM_CLASSES {
            return Err(Error::parse(
                path,
                format!("line {n}: label {label} out of range [0, {NUM_CLASSES})"),
            ));
        }
        let start = data.len();
        for (j, f) in fields.enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, format!("line {n}: bad feature f{j} {f:?}")))?;
            if !v.is_finite() {
                return Err(Error::parse(path, format!("line {n}: non-finite feature f{j}")));
            }
            data.push(v);
        }
        let got = data.len() - start;
        match dim {
            None if got == 0 => return Err(Error::parse(path, format!("line {n}: no features"))),
            None => dim = Some(got),
            Some(d) if d != got => {
                return Err(Error::parse(path, format!("line {n}: {got} features, expected {d}")))
            }
            _ => {}
        }
        labels.push(label);
    }
    let dim = dim.ok_or_else(|| Error::parse(path, "no samples"))?;
    let inputs = Matrix::from_vec(labels.len(), dim, data).map_err(|e| Error::parse(path, e.to_string()))?;
    Dataset::new(inputs, labels, split)
}

pub fn parse_bin(bytes: &[u8], path: &Path, split: Split) -> Result<Dataset> {
    if bytes.len() < 16 || &bytes[..8] != BIN_MAGIC {
        return Err(Error::parse(path, "offset 0: missing MNIST1D magic"));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::parse(path, "offset 12: feature dimension is 0"));
    }
    let record = 1 + 4 * dim;
    let expected = 16 + count * record;
    if bytes.len() != expected {
        return Err(Error::parse(
            path,
            format!("file is {} bytes, header promises {expected} ({count} x {dim})", bytes.len()),
        ));
    }
    let mut labels = Vec::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    for i in 0..count {
        let off = 16 + i * record;
        let label = bytes[off] as usize;
        if label >= NUM_CLASSES {
            return Err(Error::parse(
                path,
                format!("offset {off}: sample {i} has label {label} out of range [0, {NUM_CLASSES})"),
            ));
        }
        labels.push(label);
        for j in 0..dim {
            let p = off + 1 + 4 * j;
            let v = f32::from_le_bytes(bytes[p..p + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::parse(path, format!("offset {p}: non-finite feature")));
            }
            data.push(v as f64);
        }
    }
    let inputs = Matrix::from_vec(count, dim, data).map_err(|e| Error::parse(path, e.to_string()))?;
    Dataset::new(inputs, labels, split)
}

/// Ten Gaussian clusters in `R^40` with seeded means (spread 3) and unit
/// within-class noise; labels are balanced. Values are rounded to f32 so the
/// BIN format stores them exactly.
pub fn generate_synthetic(num_train: usize, num_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if num_train < NUM_CLASSES || num_test < NUM_CLASSES {
        return Err(Error::Config(format!(
            "synthetic data needs at least {NUM_CLASSES} samples per split"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..NUM_CLASSES)
        .map(|_| (0..FEATURE_DIM).map(|_| 3.0 * sample_normal(&mut rng)).collect())
        .collect();
    let mut make = |n: usize, split: Split| {
        let mut labels: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
        labels.shuffle(&mut rng);
        let mut inputs = Matrix::zeros(n, FEATURE_DIM);
        for (b, &y) in labels.iter().enumerate() {
            for (j, v) in inputs.row_mut(b).iter_mut().enumerate() {
                *v = (means[y][j] + sample_normal(&mut rng)) as f32 as f64;
            }
        }
        Dataset::new(inputs, labels, split)
    };
    let train = make(num_train, Split::Train)?;
    let test = make(num_test, Split::Test)?;
    Ok((train, test))
}

fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Sample order for one epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub epoch: u64,
    pub permutation: Vec<usize>,
    pub batch_size: usize,
}

impl BatchPlan {
    /// Permutation of `0..n` keyed by `(seed, epoch)`.
    pub fn new(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        key[8..16].copy_from_slice(&epoch.to_le_bytes());
        key[16..24].copy_from_slice(b"batches\0");
        let mut rng = ChaCha8Rng::from_seed(key);
        let mut permutation: Vec<usize> = (0..n).collect();
        permutation.shuffle(&mut rng);
        Ok(BatchPlan {
            epoch,
            permutation,
            batch_size,
        })
    }

    pub fn num_batches(&self) -> usize {
        self.permutation.len().div_ceil(self.batch_size)
    }

    /// Index chunks in order; the last may be short.
    pub fn index_batches(&self) -> impl Iterator<Item = &[usize]> {
        self.permutation.chunks(self.batch_size)
    }
}

/// The batches of one epoch, in plan order.
pub fn batches<'a>(dataset: &'a Dataset, plan: &'a BatchPlan) -> impl Iterator<Item = (Matrix, Vec<usize>)> + 'a {
    plan.index_batches().map(move |idx| dataset.gather(idx))
}
