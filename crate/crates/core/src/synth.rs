//! Synthetic data: GP prior worlds, multi-fidelity benchmark functions and
//! the small named scenarios.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FedGpError, Result};
use crate::gp::{self, Dataset};
use crate::kernels::{GPParams, KernelSpec};

/// Sampling ranges for a random GP world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldRanges {
    pub theta1: (f64, f64),
    pub theta2: (f64, f64),
    pub lengthscale: (f64, f64),
    pub min_dim: usize,
    pub max_dim: usize,
}

impl Default for WorldRanges {
    fn default() -> Self {
        Self {
            theta1: (0.1, 10.0),
            theta2: (0.01, 1.0),
            lengthscale: (0.01, 1.0),
            min_dim: 1,
            max_dim: 10,
        }
    }
}

impl WorldRanges {
    pub fn with_dim(mut self, dim: usize) -> Self {
        self.min_dim = dim;
        self.max_dim = dim;
        self
    }

    fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("theta1", self.theta1),
            ("theta2", self.theta2),
            ("lengthscale", self.lengthscale),
        ] {
            if !(lo > 0.0 && lo < hi && hi.is_finite()) {
                return Err(FedGpError::config(format!("{name} range [{lo}, {hi}] is invalid")));
            }
        }
        if self.min_dim == 0 || self.min_dim > self.max_dim {
            return Err(FedGpError::config(format!(
                "dimension range [{}, {}] is invalid",
                self.min_dim, self.max_dim
            )));
        }
        Ok(())
    }
}

/// A GP prior with known true parameters over the unit cube `[0, 1]^dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct GPWorld {
    pub spec: KernelSpec,
    pub true_params: GPParams,
    pub dim: usize,
    pub input_box: Vec<(f64, f64)>,
}

/// Draws `theta1`, `theta2`, `l` and `d` uniformly from the default ranges
/// (`[0.1, 10]`, `[0.01, 1]`, `[0.01, 1]^d`, `{1..10}`).
pub fn draw_world<R: Rng + ?Sized>(spec: KernelSpec, rng: &mut R) -> GPWorld {
    draw_world_in(spec, &WorldRanges::default(), rng).expect("default ranges are valid")
}

pub fn draw_world_in<R: Rng + ?Sized>(spec: KernelSpec, ranges: &WorldRanges, rng: &mut R) -> Result<GPWorld> {
    ranges.validate()?;
    let theta1 = rng.random_range(ranges.theta1.0..ranges.theta1.1);
    let theta2 = rng.random_range(ranges.theta2.0..ranges.theta2.1);
    let dim = rng.random_range(ranges.min_dim..=ranges.max_dim);
    let lengthscales = (0..spec.n_lengthscales(dim))
        .map(|_| rng.random_range(ranges.lengthscale.0..ranges.lengthscale.1))
        .collect();
    Ok(GPWorld {
        spec,
        true_params: GPParams::new(theta1, theta2, lengthscales),
        dim,
        input_box: vec![(0.0, 1.0); dim],
    })
}

fn uniform_inputs<R: Rng + ?Sized>(n: usize, bounds: &[(f64, f64)], rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((n, bounds.len()), |(_, j)| {
        let (lo, hi) = bounds[j];
        lo + (hi - lo) * rng.random::<f64>()
    })
}

/// One dataset per entry of `sizes`: inputs uniform on the unit cube and
/// outputs from an independent prior draw with the world's true parameters.
pub fn make_clients<R: Rng + ?Sized>(world: &GPWorld, sizes: &[usize], rng: &mut R) -> Result<Vec<Dataset>> {
    check_sizes(sizes)?;
    sizes
        .iter()
        .map(|&n| {
            let x = uniform_inputs(n, &world.input_box, rng);
            let y = gp::sample_prior(&world.spec, &world.true_params, x.view(), rng)?;
            Dataset::new(x, y)
        })
        .collect()
}

/// Like [`make_clients`] but every client observes slices of one joint
/// prior draw over the union of all inputs.
pub fn make_clients_shared<R: Rng + ?Sized>(world: &GPWorld, sizes: &[usize], rng: &mut R) -> Result<Vec<Dataset>> {
    check_sizes(sizes)?;
    let total: usize = sizes.iter().sum();
    let x = uniform_inputs(total, &world.input_box, rng);
    let y = gp::sample_prior(&world.spec, &world.true_params, x.view(), rng)?;
    let all = Dataset::new(x, y)?;
    let mut start = 0;
    sizes
        .iter()
        .map(|&n| {
            let idx: Vec<usize> = (start..start + n).collect();
            start += n;
            all.subset(&idx)
        })
        .collect()
}

/// Heterogeneous federation: client `k` gets its own world (shared `dim`)
/// and one dataset drawn from it.
pub fn make_heterogeneous_clients<R: Rng + ?Sized>(
    spec: KernelSpec,
    ranges: &WorldRanges,
    sizes: &[usize],
    rng: &mut R,
) -> Result<(Vec<GPWorld>, Vec<Dataset>)> {
    check_sizes(sizes)?;
    ranges.validate()?;
    let dim = rng.random_range(ranges.min_dim..=ranges.max_dim);
    let fixed = ranges.clone().with_dim(dim);
    let mut worlds = Vec::with_capacity(sizes.len());
    let mut data = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let world = draw_world_in(spec, &fixed, rng)?;
        data.extend(make_clients(&world, &[n], rng)?);
        worlds.push(world);
    }
    Ok((worlds, data))
}

/// `k` client sizes drawn log-uniformly from `[lo, hi]`.
pub fn imbalanced_sizes<R: Rng + ?Sized>(k: usize, lo: usize, hi: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || lo == 0 || lo > hi {
        return Err(FedGpError::config(format!(
            "imbalanced sizes need k >= 1 and 1 <= lo <= hi, got k={k}, [{lo}, {hi}]"
        )));
    }
    let (a, b) = ((lo as f64).ln(), (hi as f64).ln());
    Ok((0..k)
        .map(|_| {
            let v = (a + (b - a) * rng.random::<f64>()).exp().round() as usize;
            v.clamp(lo, hi)
        })
        .collect())
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() {
        return Err(FedGpError::input("no client sizes given"));
    }
    if let Some(k) = sizes.iter().position(|&n| n == 0) {
        return Err(FedGpError::input(format!("client {k} would have no data")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Linear,
    Nonlinear,
    Currin,
    Park,
    Branin,
    Hartmann3,
    Borehole,
}

impl Benchmark {
    pub const ALL: [Benchmark; 7] = [
        Benchmark::Linear,
        Benchmark::Nonlinear,
        Benchmark::Currin,
        Benchmark::Park,
        Benchmark::Branin,
        Benchmark::Hartmann3,
        Benchmark::Borehole,
    ];

    pub fn key(&self) -> &'static str {
        match self {
            Benchmark::Linear => "linear",
            Benchmark::Nonlinear => "nonlinear",
            Benchmark::Currin => "currin",
            Benchmark::Park => "park",
            Benchmark::Branin => "branin",
            Benchmark::Hartmann3 => "hartmann3",
            Benchmark::Borehole => "borehole",
        }
    }

    pub fn has_mid_level(&self) -> bool {
        matches!(self, Benchmark::Branin | Benchmark::Hartmann3)
    }

    pub fn input_box(&self) -> Vec<(f64, f64)> {
        match self {
            Benchmark::Linear => vec![(0.0, 1.0)],
            Benchmark::Nonlinear => vec![(0.0, 2.0)],
            Benchmark::Currin => vec![(0.0, 1.0); 2],
            Benchmark::Park => vec![(0.0, 1.0); 4],
            Benchmark::Branin => vec![(-5.0, 10.0), (0.0, 15.0)],
            Benchmark::Hartmann3 => vec![(0.0, 1.0); 3],
            Benchmark::Borehole => vec![
                (0.05, 0.15),
                (100.0, 50000.0),
                (63070.0, 115600.0),
                (990.0, 1110.0),
                (63.1, 115.0),
                (700.0, 820.0),
                (1120.0, 1680.0),
                (9855.0, 12045.0),
            ],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_box().len()
    }

    /// Reference sample sizes (HF / MF / LF).
    pub fn reference_sizes(&self) -> FidelitySizes {
        let (high, mid, low) = match self {
            Benchmark::Linear | Benchmark::Nonlinear => (20, 0, 100),
            Benchmark::Currin => (40, 0, 200),
            Benchmark::Park => (50, 0, 300),
            Benchmark::Branin => (20, 40, 200),
            Benchmark::Hartmann3 => (50, 100, 200),
            Benchmark::Borehole => (50, 0, 200),
        };
        FidelitySizes { high, mid, low }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Benchmark {
    type Err = FedGpError;

    fn from_str(s: &str) -> Result<Self> {
        Benchmark::ALL
            .into_iter()
            .find(|b| b.key() == s)
            .ok_or_else(|| FedGpError::input(format!("unknown benchmark `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FidelityLevel {
    Low,
    Mid,
    High,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FidelityFunction {
    pub name: Benchmark,
    pub level: FidelityLevel,
}

impl FidelityFunction {
    pub fn new(name: Benchmark, level: FidelityLevel) -> Result<Self> {
        if level == FidelityLevel::Mid && !name.has_mid_level() {
            return Err(FedGpError::config(format!("{name} has no mid-fidelity level")));
        }
        Ok(Self { name, level })
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        fidelity_eval(self, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FidelitySizes {
    pub high: usize,
    pub mid: usize,
    pub low: usize,
}

fn currin_high(x1: f64, x2: f64) -> f64 {
    let num = 2300.0 * x1.powi(3) + 1900.0 * x1 * x1 + 2092.0 * x1 + 60.0;
    let den = 100.0 * x1.powi(3) + 500.0 * x1 * x1 + 4.0 * x1 + 20.0;
    // x2 = 0 gives exp(-inf) = 0
    (1.0 - (-1.0 / (2.0 * x2)).exp()) * num / den
}

fn park_high(x: &[f64]) -> f64 {
    let (x1, x2, x3, x4) = (x[0], x[1], x[2], x[3]);
    0.5 * x1 * ((1.0 + (x2 + x3 * x3) * x4 / (x1 * x1)).sqrt() - 1.0) + (x1 + 3.0 * x4) * (1.0 + x3.sin()).exp()
}

fn branin_high(x1: f64, x2: f64) -> f64 {
    let a = -1.275 * x1 * x1 / (PI * PI) + 5.0 * x1 / PI + x2 - 6.0;
    a * a + (10.0 - 5.0 / (4.0 * PI)) * x1.cos() + 10.0
}

fn branin_mid(x1: f64, x2: f64) -> Result<f64> {
    let inner = branin_high(x1 - 2.0, x2 - 2.0);
    if inner < 0.0 {
        return Err(FedGpError::domain(format!(
            "branin mid fidelity needs y_h(x - 2) >= 0, got {inner} at ({x1}, {x2})"
        )));
    }
    Ok(10.0 * inner.sqrt() + 2.0 * (x1 - 0.5) - 3.0 * (3.0 * x2 - 1.0) - 1.0)
}

const HARTMANN_A: [[f64; 3]; 4] = [[3.0, 10.0, 30.0], [0.1, 10.0, 35.0], [3.0, 10.0, 30.0], [0.1, 10.0, 35.0]];
const HARTMANN_P: [[f64; 3]; 4] = [
    [0.3689, 0.1170, 0.2673],
    [0.4699, 0.4387, 0.7470],
    [0.1091, 0.8732, 0.5547],
    [0.0381, 0.5743, 0.8828],
];
const HARTMANN_ALPHA: [f64; 4] = [1.0, 1.2, 3.0, 3.2];
const HARTMANN_DELTA: [f64; 4] = [0.01, -0.01, -0.1, 0.1];

fn hartmann3(x: &[f64], level: FidelityLevel) -> f64 {
    let t = match level {
        FidelityLevel::Low => 1.0,
        FidelityLevel::Mid => 2.0,
        FidelityLevel::High => 3.0,
    };
    (0..4)
        .map(|i| {
            let alpha = HARTMANN_ALPHA[i] + (3.0 - t) * HARTMANN_DELTA[i];
            let e: f64 = (0..3)
                .map(|j| HARTMANN_A[i][j] * (x[j] - HARTMANN_P[i][j]).powi(2))
                .sum();
            alpha * (-e).exp()
        })
        .sum()
}

fn borehole(x: &[f64], numerator: f64, offset: f64) -> f64 {
    let log_ratio = (x[1] / x[0]).ln();
    numerator * PI * x[2] * (x[3] - x[5])
        / (log_ratio * (offset + 2.0 * x[6] * x[2] / (log_ratio * x[0] * x[0] * x[7]) + x[2] / x[4]))
}

/// Evaluates a benchmark at one fidelity level.
pub fn fidelity_eval(f: &FidelityFunction, x: &[f64]) -> Result<f64> {
    let bounds = f.name.input_box();
    if x.len() != bounds.len() {
        return Err(FedGpError::shape(format!(
            "{} takes {} inputs, got {}",
            f.name,
            bounds.len(),
            x.len()
        )));
    }
    for (j, (v, (lo, hi))) in x.iter().zip(&bounds).enumerate() {
        let below = if f.name == Benchmark::Park { *v <= *lo } else { *v < *lo };
        if below || *v > *hi || !v.is_finite() {
            return Err(FedGpError::input(format!(
                "{} input {j} = {v} outside [{lo}, {hi}]",
                f.name
            )));
        }
    }
    if f.level == FidelityLevel::Mid && !f.name.has_mid_level() {
        return Err(FedGpError::config(format!("{} has no mid-fidelity level", f.name)));
    }
    use FidelityLevel::*;
    let y = match (f.name, f.level) {
        (Benchmark::Linear, High) => (6.0 * x[0] - 2.0).powi(2) * (12.0 * x[0] - 4.0).sin(),
        (Benchmark::Linear, _) => {
            let yh = (6.0 * x[0] - 2.0).powi(2) * (12.0 * x[0] - 4.0).sin();
            0.5 * yh + 10.0 * (x[0] - 0.5) + 5.0
        }
        (Benchmark::Nonlinear, High) => x[0] * (15.0 * (2.0 * x[0] - 0.2)).cos().exp() - 1.0,
        (Benchmark::Nonlinear, _) => (15.0 * x[0]).cos(),
        (Benchmark::Currin, High) => currin_high(x[0], x[1]),
        (Benchmark::Currin, _) => {
            let (a, b) = (x[0], x[1]);
            let down = (b - 0.05).max(0.0);
            0.25 * (currin_high(a + 0.05, b + 0.05) + currin_high(a + 0.05, down))
                + 0.25 * (currin_high(a - 0.05, b + 0.05) + currin_high(a - 0.05, down))
        }
        (Benchmark::Park, High) => park_high(x),
        (Benchmark::Park, _) => {
            (1.0 + x[0].sin() / 10.0) * park_high(x) - 2.0 * x[0] + x[1] * x[1] + x[2] * x[2] + 0.5
        }
        (Benchmark::Branin, High) => branin_high(x[0], x[1]),
        (Benchmark::Branin, Mid) => branin_mid(x[0], x[1])?,
        (Benchmark::Branin, Low) => branin_mid(1.2 * (x[0] + 2.0), 1.2 * (x[1] + 2.0))? - 3.0 * x[1] + 1.0,
        (Benchmark::Hartmann3, level) => hartmann3(x, level),
        (Benchmark::Borehole, High) => borehole(x, 2.0, 1.0),
        (Benchmark::Borehole, _) => borehole(x, 5.0, 1.5),
    };
    Ok(y)
}

/// Uniform draws from a benchmark's input box (for PARK the half-open
/// `(0, 1]` box, so `x1 > 0`).
pub fn benchmark_inputs<R: Rng + ?Sized>(name: Benchmark, n: usize, rng: &mut R) -> Array2<f64> {
    let bounds = name.input_box();
    if name == Benchmark::Park {
        Array2::from_shape_fn((n, bounds.len()), |_| 1.0 - rng.random::<f64>())
    } else {
        uniform_inputs(n, &bounds, rng)
    }
}

fn eval_rows(f: &FidelityFunction, x: &Array2<f64>) -> Result<Array1<f64>> {
    x.rows()
        .into_iter()
        .map(|r| fidelity_eval(f, r.as_slice().expect("row-major input")))
        .collect()
}

/// One client per fidelity level, ordered Low, (Mid), High, so the HF client
/// is always last. `noise_std` adds i.i.d. Gaussian noise to the outputs.
pub fn make_fidelity_clients<R: Rng + ?Sized>(
    name: Benchmark,
    sizes: FidelitySizes,
    noise_std: Option<f64>,
    rng: &mut R,
) -> Result<Vec<Dataset>> {
    if sizes.mid > 0 && !name.has_mid_level() {
        return Err(FedGpError::config(format!(
            "{name} is a two-level problem; mid-fidelity size must be 0"
        )));
    }
    if sizes.high == 0 || sizes.low == 0 {
        return Err(FedGpError::config("high- and low-fidelity sizes must be positive"));
    }
    let noise = match noise_std {
        Some(s) if s > 0.0 => Some(Normal::new(0.0, s).map_err(|e| FedGpError::config(e.to_string()))?),
        Some(s) if s < 0.0 => return Err(FedGpError::config(format!("noise std must be >= 0, got {s}"))),
        _ => None,
    };
    let mut levels = vec![(FidelityLevel::Low, sizes.low)];
    if sizes.mid > 0 {
        levels.push((FidelityLevel::Mid, sizes.mid));
    }
    levels.push((FidelityLevel::High, sizes.high));

    levels
        .into_iter()
        .map(|(level, n)| {
            let f = FidelityFunction::new(name, level)?;
            let x = benchmark_inputs(name, n, rng);
            let mut y = eval_rows(&f, &x)?;
            if let Some(dist) = &noise {
                y.iter_mut().for_each(|v| *v += dist.sample(rng));
            }
            Dataset::new(x, y)
        })
        .collect()
}

/// Noise-free high-fidelity test set of `n` uniform points.
pub fn fidelity_test_set<R: Rng + ?Sized>(name: Benchmark, n: usize, rng: &mut R) -> Result<Dataset> {
    let f = FidelityFunction::new(name, FidelityLevel::High)?;
    let x = benchmark_inputs(name, n, rng);
    let y = eval_rows(&f, &x)?;
    Dataset::new(x, y)
}

/// Per-client affine output transform `y' = (y - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    /// Fits mean and `1/(N-1)` standard deviation.
    pub fn fit(y: &Array1<f64>) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(FedGpError::config(format!("standardization needs >= 2 outputs, got {n}")));
        }
        let mean = y.sum() / n as f64;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        if !(var > 0.0) {
            return Err(FedGpError::config("cannot standardize outputs with zero variance"));
        }
        Ok(Self { mean, std: var.sqrt() })
    }

    pub fn apply(&self, y: &Array1<f64>) -> Array1<f64> {
        y.mapv(|v| (v - self.mean) / self.std)
    }

    pub fn invert(&self, y: &Array1<f64>) -> Array1<f64> {
        y.mapv(|v| v * self.std + self.mean)
    }
}

/// Standardizes every client's outputs with its own mean and deviation.
pub fn standardize(datasets: &[Dataset]) -> Result<(Vec<Dataset>, Vec<Standardizer>)> {
    let mut out = Vec::with_capacity(datasets.len());
    let mut transforms = Vec::with_capacity(datasets.len());
    for (k, d) in datasets.iter().enumerate() {
        let t = Standardizer::fit(d.outputs()).map_err(|e| e.in_client(k))?;
        out.push(d.with_outputs(t.apply(d.outputs()))?);
        transforms.push(t);
    }
    Ok((out, transforms))
}

/// How the bad-initialization noise level `0.2` is read.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseReading {
    #[default]
    Variance,
    StdDev,
}

/// Small hand-built scenarios with known latent functions.
#[derive(Clone, Debug)]
pub struct SpecialCase {
    pub datasets: Vec<Dataset>,
    /// Sign applied to `sin(x)` for each client's latent curve.
    pub latent_sign: Vec<f64>,
    pub input_range: (f64, f64),
    pub noise_std: f64,
    pub init: Option<GPParams>,
}

impl SpecialCase {
    pub fn latent(&self, client: usize, x: f64) -> f64 {
        self.latent_sign[client] * x.sin()
    }
}

/// Two clients of 100 evenly spaced points on `[0, 10]`, observing `sin x`
/// and `-sin x` without noise.
pub fn sin_mirror() -> Result<SpecialCase> {
    let n = 100;
    let x = Array1::linspace(0.0, 10.0, n);
    let inputs = x.clone().into_shape_with_order((n, 1)).expect("column");
    let datasets = vec![
        Dataset::new(inputs.clone(), x.mapv(f64::sin))?,
        Dataset::new(inputs, x.mapv(|v| -v.sin()))?,
    ];
    Ok(SpecialCase {
        datasets,
        latent_sign: vec![1.0, -1.0],
        input_range: (0.0, 10.0),
        noise_std: 0.0,
        init: None,
    })
}

/// Two clients of 100 uniform points on `[0, 1]` observing
/// `sin x + N(0, 0.2)`, started from `theta = (1, 10, 1)`.
pub fn bad_init<R: Rng + ?Sized>(reading: NoiseReading, rng: &mut R) -> Result<SpecialCase> {
    bad_init_sized(100, reading, rng)
}

pub fn bad_init_sized<R: Rng + ?Sized>(n: usize, reading: NoiseReading, rng: &mut R) -> Result<SpecialCase> {
    let noise_std = match reading {
        NoiseReading::Variance => 0.2f64.sqrt(),
        NoiseReading::StdDev => 0.2,
    };
    let dist = Normal::new(0.0, noise_std).map_err(|e| FedGpError::config(e.to_string()))?;
    let datasets = (0..2)
        .map(|_| {
            let x = uniform_inputs(n, &[(0.0, 1.0)], rng);
            let y: Array1<f64> = x.column(0).mapv(|v| v.sin() + dist.sample(rng));
            Dataset::new(x, y)
        })
        .collect::<Result<_>>()?;
    Ok(SpecialCase {
        datasets,
        latent_sign: vec![1.0, 1.0],
        input_range: (0.0, 1.0),
        noise_std,
        init: Some(GPParams::new(1.0, 10.0, vec![1.0])),
    })
}
