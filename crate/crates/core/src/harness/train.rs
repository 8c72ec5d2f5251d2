use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{batches, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::estimators::{assemble_weight_gradients, upstream_jacobian, Estimator, Method};
use crate::metrics::{
    evaluate_trace, layer_metrics, overlap_curve, write_overlap_csv, MetricsRecord, MetricsWriter,
    OverlapBasis,
};
use crate::model::{backward, forward, MlpModel};
use crate::orthogonalize::{FitOptions, StepPolynomialBank};

use super::{AdamW, RunConfig};

pub const METRICS_FILE: &str = "metrics.csv";
pub const OVERLAP_FILE: &str = "overlap.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub records: Vec<MetricsRecord>,
    pub final_record: MetricsRecord,
    pub out_dir: PathBuf,
}

pub fn checkpoint_path(out_dir: &Path, epoch: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
}

/// Run a full training job; see [`RunConfig`]. Writes the metrics CSV, the
/// resolved config and checkpoints under `config.out_dir`.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = config.threads {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?
    };
    pool.install(|| train_in_pool(config))
}

fn load_bank(config: &RunConfig) -> Result<Option<StepPolynomialBank>> {
    if !matches!(config.method, Method::WPerpNs { .. }) {
        return Ok(None);
    }
    Ok(Some(match &config.bank {
        Some(path) => StepPolynomialBank::load(path)?,
        None => StepPolynomialBank::fit(&FitOptions::default())?,
    }))
}

fn evaluate(model: &MlpModel, data: &Dataset) -> Result<(f64, f64)> {
    evaluate_trace(&forward(model, data.inputs(), data.labels())?)
}

fn train_in_pool(config: &RunConfig) -> Result<TrainOutcome> {
    let start = Instant::now();
    let (train_set, test_set) = config.data.load()?;
    if train_set.dim() != config.layer_widths[0] || test_set.dim() != config.layer_widths[0] {
        return Err(Error::Config(format!(
            "data has {} features but the first layer width is {}",
            train_set.dim(),
            config.layer_widths[0]
        )));
    }
    let out = &config.out_dir;
    fs::create_dir_all(out.join("checkpoints")).map_err(|e| Error::io(out, e))?;
    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, serde_json::to_string_pretty(config)?).map_err(|e| Error::io(&config_path, e))?;

    let mut model = MlpModel::new(&config.layer_widths, config.seed)?;
    let mut estimator = Estimator::new(config.method, config.guess_options(), config.seed, load_bank(config)?)?;
    let mut optimizer = AdamW::for_model(&model, config.optimizer);
    let mut writer = MetricsWriter::create(&out.join(METRICS_FILE))?;
    let mut records = Vec::new();
    let wall = |start: &Instant| if config.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 };

    let mut step: u64 = 0;
    for epoch in 0..config.epochs {
        let plan = BatchPlan::new(train_set.len(), config.batch_size, config.seed, epoch)?;
        for (x, y) in batches(&train_set, &plan) {
            let trace = forward(&model, &x, &y).map_err(|e| match e {
                Error::NonFinite(_) => Error::NanLoss { step: step as usize },
                other => other,
            })?;
            estimator.prepare(&model, &trace, step);
            let log_now = step % config.metrics_every == 0;
            let truth = log_now.then(|| backward(&model, &trace));
            let guesses = estimator.sample_guesses(&model, &trace, step, truth.as_ref())?;
            if let Some(truth) = &truth {
                let (train_acc, train_loss) = evaluate(&model, &train_set)?;
                let (test_acc, test_loss) = evaluate(&model, &test_set)?;
                let record = MetricsRecord {
                    step,
                    layers: layer_metrics(&guesses, truth),
                    overlap: None,
                    train_acc,
                    test_acc,
                    train_loss,
                    test_loss,
                    wall_time_s: wall(&start),
                };
                writer.append(&record)?;
                records.push(record);
            }
            let grads = assemble_weight_gradients(&guesses, &trace, config.freeze_biases);
            optimizer.step_model(&mut model, &grads.weights, &grads.biases, config.freeze_biases)?;
            step += 1;
        }
        if (epoch + 1) % config.checkpoint_every_epochs == 0 {
            model.save_checkpoint(&checkpoint_path(out, epoch + 1), config.seed, step)?;
        }
    }

    // closing record: metrics on a fixed probe batch (the first samples in
    // file order) at the final parameters
    let probe: Vec<usize> = (0..config.batch_size.min(train_set.len())).collect();
    let (px, py) = train_set.gather(&probe);
    let trace = forward(&model, &px, &py)?;
    let truth = backward(&model, &trace);
    estimator.prepare(&model, &trace, step);
    let guesses = estimator.sample_guesses(&model, &trace, step, Some(&truth))?;
    let (train_acc, train_loss) = evaluate(&model, &train_set)?;
    let (test_acc, test_loss) = evaluate(&model, &test_set)?;
    let mut final_record = MetricsRecord {
        step,
        layers: layer_metrics(&guesses, &truth),
        overlap: None,
        train_acc,
        test_acc,
        train_loss,
        test_loss,
        wall_time_s: wall(&start),
    };
    writer.append(&final_record)?;
    model.save_checkpoint(&out.join(FINAL_CHECKPOINT), config.seed, step)?;

    if config.overlap_samples > 0 {
        let idx: Vec<usize> = (0..config.overlap_samples.min(train_set.len())).collect();
        let (ox, oy) = train_set.gather(&idx);
        let curves = overlap_curves(&model, &ox, &oy, None, config.overlap_basis)?;
        write_overlap_csv(&out.join(OVERLAP_FILE), &curves)?;
        final_record.overlap = Some(
            curves
                .iter()
                .map(|(_, c)| c.iter().enumerate().map(|(k, &o)| (k + 1, o)).collect())
                .collect(),
        );
    }
    records.push(final_record.clone());

    Ok(TrainOutcome {
        model,
        records,
        final_record,
        out_dir: out.clone(),
    })
}

/// Mean overlap curve per chained layer (numbered from 1) over the samples
/// of a batch; samples whose true gradient vanishes are skipped. `layers`
/// selects a subset (1-based).
pub fn overlap_curves(
    model: &MlpModel,
    inputs: &crate::linalg::Matrix,
    labels: &[usize],
    layers: Option<&[usize]>,
    basis: OverlapBasis,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let trace = forward(model, inputs, labels)?;
    let truth = backward(model, &trace);
    let chained = model.num_layers() - 1;
    let selected: Vec<usize> = match layers {
        Some(ls) => {
            for &l in ls {
                if l == 0 || l > chained {
                    return Err(Error::OutOfRange {
                        what: "layer",
                        value: l,
                        min: 1,
                        max: chained,
                    });
                }
            }
            ls.to_vec()
        }
        None => (1..=chained).collect(),
    };
    selected
        .into_iter()
        .map(|layer| {
            let i = layer - 1;
            let per_sample: Vec<Option<Vec<f64>>> = (0..trace.batch_size())
                .into_par_iter()
                .map(|b| {
                    let w = upstream_jacobian(model, &trace, i, b);
                    let g = truth.pre_activation[i].row(b);
                    match overlap_curve(&w, g, basis) {
                        Ok(c) => Ok(Some(c)),
                        Err(Error::ZeroGradient) => Ok(None),
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<_>>()?;
            let kept: Vec<&Vec<f64>> = per_sample.iter().flatten().collect();
            if kept.is_empty() {
                return Err(Error::ZeroGradient);
            }
            let len = kept[0].len();
            let mean = (0..len)
                .map(|k| kept.iter().map(|c| c[k]).sum::<f64>() / kept.len() as f64)
                .collect();
            Ok((layer, mean))
        })
        .collect()
}
