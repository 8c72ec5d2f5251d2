//! Command-line front end. [`run`] maps argv to an exit code: 0 on success,
//! 1 for usage errors (including invalid settings), 2 when the command itself fails.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{generate_synthetic, Format};
use crate::error::{Error, Result};
use crate::estimators::{BatchMask, Method};
use crate::harness::{default_widths, overlap_curves, train, AdamWConfig, DataSource, RunConfig, CONFIG_FILE};
use crate::metrics::{write_overlap_csv, OverlapBasis};
use crate::model::MlpModel;
use crate::orthogonalize::{FitOptions, StepPolynomialBank};

#[derive(Debug, Parser)]
#[command(name = "fwdguess", version, about = "Forward-mode gradient guessing for ReLU MLPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model and log metrics.
    Train(TrainArgs),
    /// Overlap curves of a checkpoint's true gradients with the top singular
    /// subspaces of its upstream Jacobians.
    Overlap(OverlapArgs),
    /// Fit the step-polynomial bank used by w_perp_ns.
    FitNs(FitNsArgs),
    /// Write a synthetic 40-feature, 10-class dataset.
    GenData(GenDataArgs),
    /// Train every method x width x seed combination.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BasisArg {
    U,
    V,
}

impl From<BasisArg> for OverlapBasis {
    fn from(b: BasisArg) -> Self {
        match b {
            BasisArg::U => OverlapBasis::U,
            BasisArg::V => OverlapBasis::V,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MaskArg {
    PerSample,
    Any,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Bin,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Training set (.csv or .bin).
    #[arg(long, conflicts_with = "synthetic", requires = "test_data")]
    data: Option<PathBuf>,
    /// Test set (.csv or .bin).
    #[arg(long, requires = "data")]
    test_data: Option<PathBuf>,
    /// Use generated synthetic data instead of files.
    #[arg(long)]
    synthetic: bool,
}

impl DataArgs {
    /// Files if given, else synthetic if asked, else MNIST-1D under `data/`.
    fn source(&self, seed: u64) -> DataSource {
        match (&self.data, &self.test_data) {
            (Some(train), Some(test)) => DataSource::Files {
                train: train.clone(),
                test: test.clone(),
            },
            _ if self.synthetic => DataSource::synthetic_default(seed),
            _ => DataSource::mnist1d(Path::new("data")),
        }
    }
}

#[derive(Debug, Args)]
struct TrainOpts {
    /// Hidden width; the network is 40-w-w-w-10.
    #[arg(long, default_value_t = 128, conflicts_with = "widths")]
    width: usize,
    /// Full comma-separated layer widths, e.g. 40,64,10.
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long, default_value_t = 300)]
    epochs: u64,
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, default_value_t = 50)]
    metrics_every: u64,
    #[arg(long, default_value_t = 50)]
    checkpoint_every: u64,
    #[command(flatten)]
    data: DataArgs,
    /// Train weights only.
    #[arg(long)]
    freeze_biases: bool,
    /// One noise draw per layer shared by the whole batch.
    #[arg(long)]
    shared_epsilon: bool,
    #[arg(long, value_enum, default_value = "per-sample")]
    batch_mask: MaskArg,
    #[arg(long, value_enum, default_value = "v")]
    overlap_basis: BasisArg,
    /// Samples for the end-of-run overlap CSV (0 disables it).
    #[arg(long, default_value_t = 0)]
    overlap_samples: usize,
    /// Pre-fitted polynomial bank for w_perp_ns.
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Log 0 instead of elapsed time, so reruns give identical files.
    #[arg(long)]
    no_wall_time: bool,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    method: String,
    /// Subspace size for the w_perp family.
    #[arg(long)]
    k: Option<usize>,
    /// Regulariser for w_precond.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Debug, Args)]
struct OverlapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Layer to report (1-based, repeatable); all chained layers by default.
    #[arg(long)]
    layer: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Samples averaged over (taken in file order).
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[arg(long, value_enum, default_value = "v")]
    basis: BasisArg,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Debug, Args)]
struct FitNsArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Directory receiving train.<ext> and test.<ext>.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 4000)]
    num_train: usize,
    #[arg(long, default_value_t = 1000)]
    num_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Methods as tag[:param], param being k or sigma, e.g. w_perp:10.
    #[arg(long, value_delimiter = ',', default_value = "backprop,w_transpose,w_perp:10")]
    methods: Vec<String>,
    /// Hidden widths.
    #[arg(long = "hidden", value_delimiter = ',', default_value = "64,128,256")]
    hidden: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "runs/sweep")]
    out: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
}

/// Parse `tag` or `tag:param` (k for the w_perp family, sigma for w_precond).
pub fn parse_method_spec(spec: &str) -> Result<Method> {
    let (tag, param) = match spec.split_once(':') {
        Some((t, p)) => (t, Some(p)),
        None => (spec, None),
    };
    let bad = || Error::Config(format!("bad parameter in method spec {spec:?}"));
    match (tag, param) {
        ("w_precond", Some(p)) => Method::from_tag(tag, None, Some(p.parse().map_err(|_| bad())?)),
        (_, Some(p)) => Method::from_tag(tag, Some(p.parse().map_err(|_| bad())?), None),
        (_, None) => Method::from_tag(tag, None, None),
    }
}

fn build_config(method: Method, seed: u64, out: PathBuf, o: &TrainOpts) -> Result<RunConfig> {
    let mut c = RunConfig::new(method, o.data.source(seed), out);
    c.layer_widths = o.widths.clone().unwrap_or_else(|| default_widths(o.width));
    c.epochs = o.epochs;
    c.batch_size = o.batch_size;
    c.optimizer = AdamWConfig {
        lr: o.lr,
        weight_decay: o.weight_decay,
        ..AdamWConfig::default()
    };
    c.seed = seed;
    c.metrics_every = o.metrics_every;
    c.checkpoint_every_epochs = o.checkpoint_every;
    c.freeze_biases = o.freeze_biases;
    c.shared_epsilon = o.shared_epsilon;
    c.batch_mask = match o.batch_mask {
        MaskArg::PerSample => BatchMask::PerSample,
        MaskArg::Any => BatchMask::Any,
    };
    c.overlap_basis = o.overlap_basis.into();
    c.overlap_samples = o.overlap_samples;
    c.bank = o.bank.clone();
    c.record_wall_time = !o.no_wall_time;
    c.threads = o.threads;
    c.validate()?;
    Ok(c)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let method = Method::from_tag(&a.method, a.k, a.sigma)?;
    let config = build_config(method, a.seed, a.out, &a.opts)?;
    let outcome = train(&config)?;
    let r = &outcome.final_record;
    println!(
        "{method}: step {} train_acc {:.4} test_acc {:.4} train_loss {:.4} -> {}",
        r.step,
        r.train_acc,
        r.test_acc,
        r.train_loss,
        outcome.out_dir.display()
    );
    Ok(())
}

/// Data for `overlap`: explicit flags win, then the `config.json` of the run
/// that wrote the checkpoint, then synthetic data.
fn overlap_source(a: &OverlapArgs, seed: u64) -> Result<DataSource> {
    if a.data.data.is_some() || a.data.synthetic {
        return Ok(a.data.source(seed));
    }
    for dir in a.checkpoint.ancestors().skip(1).take(2) {
        let path = dir.join(CONFIG_FILE);
        if path.is_file() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let config: RunConfig = serde_json::from_str(&text)?;
            return Ok(config.data);
        }
    }
    Ok(DataSource::synthetic_default(seed))
}

fn cmd_overlap(a: OverlapArgs) -> Result<()> {
    let (model, header) = MlpModel::load_checkpoint(&a.checkpoint)?;
    let (train_set, _) = overlap_source(&a, header.seed)?.load()?;
    let idx: Vec<usize> = (0..a.samples.min(train_set.len())).collect();
    let (x, y) = train_set.gather(&idx);
    let layers = (!a.layer.is_empty()).then_some(&a.layer[..]);
    let curves = overlap_curves(&model, &x, &y, layers, a.basis.into())?;
    write_overlap_csv(&a.out, &curves)?;
    for (layer, c) in &curves {
        let at10 = c.get(9).or(c.last()).copied().unwrap_or(f64::NAN);
        println!("layer {layer}: rank {} overlap@10 {at10:.4} overlap@rank {:.4}", c.len(), c.last().unwrap_or(&f64::NAN));
    }
    Ok(())
}

fn cmd_fit_ns(a: FitNsArgs) -> Result<()> {
    let bank = StepPolynomialBank::fit(&FitOptions {
        seed: a.seed,
        ..FitOptions::default()
    })?;
    bank.save(&a.out)?;
    for e in bank.entries() {
        println!(
            "sigma_k {:.1}: N={} max_dev high {:.4} low {:.4}",
            e.sigma_k, e.num_iterations, e.max_dev_high, e.max_dev_low
        );
    }
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let (train_set, test_set) = generate_synthetic(a.num_train, a.num_test, a.seed)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let (fmt, ext) = match a.format {
        FormatArg::Csv => (Format::Csv, "csv"),
        FormatArg::Bin => (Format::Bin, "bin"),
    };
    train_set.save(&a.out_dir.join(format!("train.{ext}")), fmt)?;
    test_set.save(&a.out_dir.join(format!("test.{ext}")), fmt)?;
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let methods = a.methods.iter().map(|s| parse_method_spec(s)).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut rows = String::from("method,width,seed,train_acc,test_acc,train_loss,test_loss\n");
    let mut summary = String::from("method,width,runs,train_acc_mean,train_acc_min,train_acc_max,test_acc_mean\n");
    for &width in &a.hidden {
        for method in &methods {
            let name = method.to_string().replace(['(', ')', '='], "_");
            let mut accs = Vec::new();
            for &seed in &a.seeds {
                let dir = a.out.join(format!("{name}w{width}_s{seed}"));
                let mut config = build_config(*method, seed, dir, &a.opts)?;
                config.layer_widths = default_widths(width);
                let r = train(&config)?.final_record;
                writeln!(rows, "{},{width},{seed},{},{},{},{}", method, r.train_acc, r.test_acc, r.train_loss, r.test_loss).unwrap();
                println!("{method} width {width} seed {seed}: train_acc {:.4}", r.train_acc);
                accs.push((r.train_acc, r.test_acc));
            }
            let n = accs.len() as f64;
            let mean = accs.iter().map(|a| a.0).sum::<f64>() / n;
            let lo = accs.iter().map(|a| a.0).fold(f64::INFINITY, f64::min);
            let hi = accs.iter().map(|a| a.0).fold(f64::NEG_INFINITY, f64::max);
            let test_mean = accs.iter().map(|a| a.1).sum::<f64>() / n;
            writeln!(summary, "{},{width},{},{mean},{lo},{hi},{test_mean}", method, accs.len()).unwrap();
        }
    }
    for (name, text) in [("runs.csv", rows), ("summary.csv", summary)] {
        let path = a.out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Run the CLI on `argv` (including the program name) and return the exit
/// code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Overlap(a) => cmd_overlap(a),
        Command::FitNs(a) => cmd_fit_ns(a),
        Command::GenData(a) => cmd_gen_data(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => 0,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
