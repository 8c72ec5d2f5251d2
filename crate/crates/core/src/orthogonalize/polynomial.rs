//! Odd polynomials `p(x) = Σ a_k x^{2k+1}` and their fitted step-function
//! bank.
//!
//! Composing `p` with itself `N` times and applying it to a matrix acts on the
//! singular values only, so a polynomial whose `N`-fold composition sends
//! `[0, σ_k)` to 0 and `(σ_k, 1]` to 1 turns a spectrally normalised `W̃` into
//! an approximation of `U_k V_kᵀ`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Thresholds covered by the bank.
pub const BANK_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Coefficients of the classic quintic Newton–Schulz map, padded with a zero
/// septic term.
const NEWTON_SCHULZ_INIT: [f64; 4] = [1.875, -1.25, 0.375, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OddPolynomial {
    coefficients: Vec<f64>,
    num_iterations: usize,
}

impl OddPolynomial {
    pub fn new(coefficients: Vec<f64>, num_iterations: usize) -> Result<Self> {
        if coefficients.is_empty() || num_iterations == 0 {
            return Err(Error::Config(
                "odd polynomial needs at least one coefficient and one iteration".into(),
            ));
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite("polynomial coefficient".into()));
        }
        Ok(Self {
            coefficients,
            num_iterations,
        })
    }

    /// `a_0 … a_K`; `a_k` multiplies `A (AᵀA)^k`.
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn num_iterations(&self) -> usize {
        self.num_iterations
    }

    pub fn degree(&self) -> usize {
        2 * self.coefficients.len() - 1
    }

    /// Single application `p(x)`.
    pub fn eval(&self, x: f64) -> f64 {
        x * horner(&self.coefficients, x * x)
    }

    /// `p^N(x)`
    pub fn eval_composed(&self, x: f64) -> f64 {
        (0..self.num_iterations).fold(x, |z, _| self.eval(z))
    }
}

#[inline]
fn horner(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c)
}

/// Knobs of the coefficient fit.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub degree: usize,
    /// Composition counts tried in order until the tolerance is met.
    pub iteration_schedule: Vec<usize>,
    /// Gradient steps per start.
    pub fit_budget: usize,
    pub learning_rate: f64,
    pub grid_points: usize,
    /// Half-width of the excluded band around the threshold.
    pub margin: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            degree: 7,
            iteration_schedule: vec![5, 6, 8, 10, 12, 15, 20],
            fit_budget: 3000,
            learning_rate: 1e-3,
            grid_points: 512,
            margin: 0.05,
            tolerance: 0.1,
            seed: 0,
        }
    }
}

/// What the composed polynomial should approximate on `[0, 1]`.
#[derive(Debug, Clone, Copy)]
enum Target {
    /// 0 below the threshold, 1 above.
    Step(f64),
    /// 1 everywhere on `(0, 1]`.
    Unit,
}

impl Target {
    fn value(self, x: f64) -> f64 {
        match self {
            Target::Step(t) => {
                if x > t {
                    1.0
                } else {
                    0.0
                }
            }
            Target::Unit => 1.0,
        }
    }

    fn threshold(self) -> f64 {
        match self {
            Target::Step(t) => t,
            Target::Unit => 0.0,
        }
    }
}

/// Evaluation of a candidate against the declared acceptance regions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Deviation {
    pub high: f64,
    pub low: f64,
}

impl Deviation {
    fn worst(self) -> f64 {
        let w = self.high.max(self.low);
        if w.is_nan() {
            f64::INFINITY
        } else {
            w
        }
    }
}

/// Max deviation of `p^N` from 1 on `[t + δ, 1]` and from 0 on `[0, t − δ]`,
/// measured on an evaluation grid of `points` evenly spaced nodes.
fn deviation(coeffs: &[f64], n: usize, target: Target, margin: f64, points: usize) -> Deviation {
    let t = target.threshold();
    let mut high = 0.0f64;
    let mut low = 0.0f64;
    for i in 0..points {
        let x = i as f64 / (points - 1) as f64;
        let hi_region = x >= t + margin - 1e-12;
        let lo_region = matches!(target, Target::Step(_)) && x <= t - margin + 1e-12;
        if !hi_region && !lo_region {
            continue;
        }
        let mut z = x;
        for _ in 0..n {
            z *= horner(coeffs, z * z);
            if !z.is_finite() {
                return Deviation {
                    high: f64::INFINITY,
                    low: f64::INFINITY,
                };
            }
        }
        if hi_region {
            high = high.max((z - 1.0).abs());
        } else {
            low = low.max(z.abs());
        }
    }
    Deviation { high, low }
}

/// Fit grid: `points` evenly spaced nodes on `[0, 1]`, minus the open band of
/// half-width `margin` around the threshold.
fn fit_grid(target: Target, margin: f64, points: usize) -> (Vec<f64>, Vec<f64>) {
    let t = target.threshold();
    (0..points)
        .map(|i| i as f64 / (points - 1) as f64)
        .filter(|&x| match target {
            Target::Step(_) => (x - t).abs() >= margin,
            Target::Unit => x >= margin,
        })
        .map(|x| (x, target.value(x)))
        .unzip()
}

/// Mean squared error of `p^N` on the grid and its gradient with respect to
/// the coefficients, propagated forward through the composition.
fn loss_and_grad(coeffs: &[f64], n: usize, xs: &[f64], ys: &[f64]) -> (f64, Vec<f64>) {
    let kk = coeffs.len();
    let mut grad = vec![0.0; kk];
    let mut loss = 0.0;
    let mut dz = vec![0.0; kk];
    let mut powers = vec![0.0; kk];
    for (&x, &y) in xs.iter().zip(ys) {
        let mut z = x;
        dz.iter_mut().for_each(|d| *d = 0.0);
        for _ in 0..n {
            let z2 = z * z;
            // ∂p/∂a_k = z^{2k+1}; p'(z) = Σ (2k+1) a_k z^{2k}
            let mut pw = z;
            let mut deriv = 0.0;
            let mut even = 1.0;
            let mut value = 0.0;
            for k in 0..kk {
                powers[k] = pw;
                value += coeffs[k] * pw;
                deriv += (2 * k + 1) as f64 * coeffs[k] * even;
                pw *= z2;
                even *= z2;
            }
            for k in 0..kk {
                dz[k] = powers[k] + deriv * dz[k];
            }
            z = value;
        }
        let r = z - y;
        loss += r * r;
        for k in 0..kk {
            grad[k] += 2.0 * r * dz[k];
        }
    }
    let m = xs.len() as f64;
    grad.iter_mut().for_each(|g| *g /= m);
    (loss / m, grad)
}

/// Adam-scaled gradient descent on the grid MSE. Steps that produce a
/// non-finite loss are undone and the step size halved. Returns the visited
/// coefficients with the smallest worst-case deviation.
fn descend(
    start: &[f64],
    n: usize,
    xs: &[f64],
    ys: &[f64],
    opts: &FitOptions,
    target: Target,
) -> (Vec<f64>, Deviation) {
    const CHECK_EVERY: usize = 100;
    let eval_points = 2001;
    let kk = start.len();
    let mut a = start.to_vec();
    let mut m = vec![0.0; kk];
    let mut v = vec![0.0; kk];
    let mut lr = opts.learning_rate;
    let (b1, b2, eps) = (0.9, 0.999, 1e-12);

    let mut best_dev = deviation(&a, n, target, opts.margin, eval_points);
    let mut best = a.clone();
    let mut t = 0;
    for step in 0..opts.fit_budget {
        let (loss, g) = loss_and_grad(&a, n, xs, ys);
        if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
            a.clone_from(&best);
            m.iter_mut().for_each(|x| *x = 0.0);
            v.iter_mut().for_each(|x| *x = 0.0);
            t = 0;
            lr *= 0.5;
            continue;
        }
        t += 1;
        let bc1 = 1.0 - f64::powi(b1, t);
        let bc2 = 1.0 - f64::powi(b2, t);
        for k in 0..kk {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            a[k] -= lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
        }
        if (step + 1) % CHECK_EVERY == 0 || step + 1 == opts.fit_budget {
            let dev = deviation(&a, n, target, opts.margin, eval_points);
            if dev.worst() < best_dev.worst() {
                best_dev = dev;
                best.clone_from(&a);
            }
        }
    }
    (best, best_dev)
}

/// Three-fixed-point family for the degree-7 step fit:
/// `p(x) = x − x(x² − t²)(x² − 1)(α + βx²)`, so 0, `t` and 1 are fixed points
/// with `p'(0) = 1 − αt²`.
fn fixed_point_family(t: f64, alpha: f64, beta: f64) -> [f64; 4] {
    let t2 = t * t;
    [
        1.0 - alpha * t2,
        alpha * (1.0 + t2) - beta * t2,
        beta * (1.0 + t2) - alpha,
        -beta,
    ]
}

fn starting_points(target: Target, degree: usize, seed: u64) -> Vec<Vec<f64>> {
    let kk = (degree + 1) / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1e-2).expect("valid normal");
    let mut starts = Vec::new();
    let base: Vec<f64> = (0..kk)
        .map(|k| NEWTON_SCHULZ_INIT.get(k).copied().unwrap_or(0.0) + noise.sample(&mut rng))
        .collect();
    starts.push(base);
    if let (Target::Step(t), 4) = (target, kk) {
        for i in 0..=40 {
            let slope0 = i as f64 / 40.0;
            let alpha = (1.0 - slope0) / (t * t);
            for j in 0..=120 {
                let beta = -3.0 * alpha - 5.0 + (6.0 * alpha + 10.0) * j as f64 / 120.0;
                starts.push(fixed_point_family(t, alpha, beta).to_vec());
            }
        }
    } else if let (Target::Step(t), 3) = (target, kk) {
        // degree 5: p(x) = x − αx(x² − t²)(x² − 1)
        for i in 0..=40 {
            let slope0 = i as f64 / 40.0;
            let alpha = (1.0 - slope0) / (t * t);
            starts.push(vec![1.0 - alpha * t * t, alpha * (1.0 + t * t), -alpha]);
        }
    }
    starts
}

fn fit(target: Target, num_iterations: usize, opts: &FitOptions) -> (OddPolynomial, Deviation) {
    const REFINED: usize = 3;
    let (xs, ys) = fit_grid(target, opts.margin, opts.grid_points);
    let mut scored: Vec<(f64, Vec<f64>)> = starting_points(target, opts.degree, opts.seed)
        .into_iter()
        .map(|s| (deviation(&s, num_iterations, target, opts.margin, 257).worst(), s))
        .collect();
    // the seeded default start always gets refined alongside the best
    // screened candidates
    let default_start = scored[0].1.clone();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut chosen: Vec<Vec<f64>> = scored.into_iter().take(REFINED).map(|(_, s)| s).collect();
    if !chosen.contains(&default_start) {
        chosen.push(default_start);
    }

    let mut best: Option<(Vec<f64>, Deviation)> = None;
    for start in chosen {
        let (coeffs, dev) = descend(&start, num_iterations, &xs, &ys, opts, target);
        if best.as_ref().map_or(true, |(_, d)| dev.worst() < d.worst()) {
            best = Some((coeffs, dev));
        }
    }
    let (coeffs, dev) = best.expect("at least one start");
    (
        OddPolynomial {
            coefficients: coeffs,
            num_iterations,
        },
        dev,
    )
}

/// Fit an odd polynomial of `degree` whose `num_iterations`-fold composition
/// approximates the step at `sigma_k` on `[0, 1]`.
///
/// Coefficients minimise the squared error against the step on a grid that
/// skips a band of half-width `margin` around the threshold. Fails if either
/// side misses the tolerance.
pub fn fit_step_polynomial(
    sigma_k: f64,
    degree: usize,
    num_iterations: usize,
    fit_budget: usize,
    seed: u64,
) -> Result<OddPolynomial> {
    let opts = FitOptions {
        degree,
        fit_budget,
        seed,
        ..FitOptions::default()
    };
    fit_step_with(sigma_k, num_iterations, &opts).map(|(p, _)| p)
}

pub(crate) fn fit_step_with(
    sigma_k: f64,
    num_iterations: usize,
    opts: &FitOptions,
) -> Result<(OddPolynomial, Deviation)> {
    if !(sigma_k > 0.0 && sigma_k < 1.0) {
        return Err(Error::Config(format!("sigma_k must lie in (0, 1), got {sigma_k}")));
    }
    check_degree(opts.degree)?;
    let (poly, dev) = fit(Target::Step(sigma_k), num_iterations, opts);
    if dev.worst() > opts.tolerance {
        return Err(Error::FitFailed {
            sigma_k,
            max_dev_high: dev.high,
            max_dev_low: dev.low,
        });
    }
    Ok((poly, dev))
}

/// Fit for the degenerate target `f(x) = 1` on `(0, 1]` (plain
/// orthogonalisation).
pub fn fit_unit_polynomial(
    degree: usize,
    num_iterations: usize,
    fit_budget: usize,
    seed: u64,
) -> Result<OddPolynomial> {
    check_degree(degree)?;
    let opts = FitOptions {
        degree,
        fit_budget,
        seed,
        ..FitOptions::default()
    };
    Ok(fit(Target::Unit, num_iterations, &opts).0)
}

fn check_degree(degree: usize) -> Result<()> {
    if degree == 5 || degree == 7 {
        Ok(())
    } else {
        Err(Error::Config(format!("polynomial degree must be 5 or 7, got {degree}")))
    }
}

/// One serialised bank entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub sigma_k: f64,
    pub coefficients: Vec<f64>,
    pub num_iterations: usize,
    pub max_dev_high: f64,
    pub max_dev_low: f64,
}

impl BankEntry {
    pub fn polynomial(&self) -> Result<OddPolynomial> {
        OddPolynomial::new(self.coefficients.clone(), self.num_iterations)
    }
}

/// Step polynomials for every threshold in [`BANK_GRID`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepPolynomialBank {
    entries: Vec<BankEntry>,
    polys: Vec<OddPolynomial>,
}

impl StepPolynomialBank {
    /// Fit all nine entries. For each threshold the composition counts in
    /// `opts.iteration_schedule` are tried in order and the first that meets
    /// the tolerance is kept.
    pub fn fit(opts: &FitOptions) -> Result<Self> {
        let mut entries = Vec::with_capacity(BANK_GRID.len());
        for (i, &sk) in BANK_GRID.iter().enumerate() {
            let mut last_err = None;
            let mut found = None;
            for &n in &opts.iteration_schedule {
                let entry_opts = FitOptions {
                    seed: opts.seed.wrapping_add(i as u64),
                    ..opts.clone()
                };
                match fit_step_with(sk, n, &entry_opts) {
                    Ok(ok) => {
                        found = Some(ok);
                        break;
                    }
                    Err(e) => last_err = Some(e),
                }
            }
            let (poly, dev) = match found {
                Some(f) => f,
                None => return Err(last_err.expect("non-empty schedule")),
            };
            entries.push(BankEntry {
                sigma_k: sk,
                coefficients: poly.coefficients.clone(),
                num_iterations: poly.num_iterations,
                max_dev_high: dev.high,
                max_dev_low: dev.low,
            });
        }
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: Vec<BankEntry>) -> Result<Self> {
        if entries.len() != BANK_GRID.len()
            || entries.iter().zip(BANK_GRID).any(|(e, g)| (e.sigma_k - g).abs() > 1e-12)
        {
            return Err(Error::Config(
                "bank must hold exactly the nine thresholds 0.1..0.9 in order".into(),
            ));
        }
        let polys = entries.iter().map(BankEntry::polynomial).collect::<Result<_>>()?;
        Ok(Self { entries, polys })
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn polynomial(&self, index: usize) -> &OddPolynomial {
        &self.polys[index]
    }

    /// Polynomial for the grid value closest to `ratio = σ_k/σ₁`.
    pub fn lookup(&self, ratio: f64) -> &OddPolynomial {
        &self.polys[super::bank_index(ratio)]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_entries(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s).map_err(|e| Error::parse(path, e.to_string()))
    }
}
