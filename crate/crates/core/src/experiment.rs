//! Experiment driver: builds scenarios, runs repeats and writes CSV output.
//!
//! Output directory layout:
//!
//! * `trace.csv`: one row per (baseline, repeat, round), round 0 being the
//!   initial parameters. Metric cells are empty on rounds skipped by the
//!   metric cadence.
//! * `summary.csv`: final-round values per (baseline, repeat), followed by
//!   `mean` and `std` rows per baseline.
//! * `config.echo`: the fully resolved config.
//! * `.failed`: present only when the run stopped on an error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ExperimentConfig, InitLengthscales, RmseTarget, ScenarioKind};
use crate::error::{FedGpError, Result};
use crate::federation::{self, ClientState, FederationConfig, Participation};
use crate::gp::{self, Dataset};
use crate::kernels::{GPParams, KernelSpec};
use crate::metrics::{self, ErrorComponents, MetricReport};
use crate::synth::{self, Benchmark, FidelitySizes, NoiseReading};

const DATA_STREAM: u64 = u64::MAX - 2;
const TEST_STREAM: u64 = u64::MAX - 3;

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const ECHO_FILE: &str = "config.echo";
pub const FAILED_MARKER: &str = ".failed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Baseline {
    Fgpr,
    /// A single GP on the high-fidelity client, trained without communication.
    Separate,
}

impl Baseline {
    pub fn label(&self) -> &'static str {
        match self {
            Baseline::Fgpr => "FGPR",
            Baseline::Separate => "Separate",
        }
    }
}

/// Evaluation targets for one client.
#[derive(Clone, Debug)]
pub struct TestSet {
    pub client: usize,
    pub inputs: Array2<f64>,
    pub targets: Array1<f64>,
}

/// Everything one repeat trains and evaluates on.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub datasets: Vec<Dataset>,
    pub tests: Vec<TestSet>,
    /// Generating parameters, when all clients share one world.
    pub truth: Option<GPParams>,
    /// Scenario-prescribed starting point.
    pub init: Option<GPParams>,
    /// Index of the high-fidelity client in multi-fidelity scenarios.
    pub hf_client: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub baseline: Baseline,
    pub repeat: usize,
    pub round: usize,
    pub params: GPParams,
    pub metrics: Option<MetricReport>,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOutput {
    pub rows: Vec<TraceRow>,
}

impl ExperimentOutput {
    /// Trace rows of one (baseline, repeat) run, in round order.
    pub fn run(&self, baseline: Baseline, repeat: usize) -> Vec<&TraceRow> {
        self.rows
            .iter()
            .filter(|r| r.baseline == baseline && r.repeat == repeat)
            .collect()
    }

    /// Last row of every (baseline, repeat) run.
    pub fn finals(&self) -> Vec<&TraceRow> {
        let mut out: Vec<&TraceRow> = Vec::new();
        for row in &self.rows {
            match out.last_mut() {
                Some(last) if last.baseline == row.baseline && last.repeat == row.repeat => *last = row,
                _ => out.push(row),
            }
        }
        out
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of repeat `r`.
pub fn repeat_seed(master: u64, repeat: usize) -> u64 {
    master.wrapping_add(repeat as u64)
}

/// Caps the global worker pool at `FEDGP_THREADS` when that is set.
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("FEDGP_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| FedGpError::config(format!("FEDGP_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| FedGpError::config(format!("cannot size the thread pool: {e}")))
}

/// Reads a CSV file with header `x1,...,xd,y`.
pub fn load_csv_dataset(path: &Path) -> Result<Dataset> {
    let csv_err = |line: u64, column: usize, message: String| FedGpError::Csv {
        path: path.to_path_buf(),
        line,
        column,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(0, 0, e.to_string()))?;
    let header = reader.headers().map_err(|e| csv_err(1, 0, e.to_string()))?.clone();
    let cols = header.len();
    if cols < 2 {
        return Err(csv_err(1, 0, format!("header needs x1..xd and y, found {cols} column(s)")));
    }
    for (j, name) in header.iter().enumerate() {
        let expected = if j + 1 == cols { "y".to_string() } else { format!("x{}", j + 1) };
        if name != expected {
            return Err(csv_err(1, j + 1, format!("expected header `{expected}`, found `{name}`")));
        }
    }
    let dim = cols - 1;
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(e.position().map_or(0, |p| p.line()), 0, e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != cols {
            return Err(csv_err(line, 0, format!("expected {cols} fields, found {}", record.len())));
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| csv_err(line, j + 1, format!("`{cell}` is not a number")))?;
            if !v.is_finite() {
                return Err(csv_err(line, j + 1, format!("`{cell}` is not finite")));
            }
            values.push(v);
        }
    }
    let n = values.len() / cols;
    if n == 0 {
        return Err(csv_err(1, 0, "no data rows".to_string()));
    }
    let table = Array2::from_shape_vec((n, cols), values).expect("rows have equal length");
    let x = table.slice(ndarray::s![.., ..dim]).to_owned();
    let y = table.column(dim).to_owned();
    Dataset::new(x, y)
}

fn uniform_points<R: Rng + ?Sized>(n: usize, range: (f64, f64), rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((n, 1), |_| range.0 + (range.1 - range.0) * rng.random::<f64>())
}

/// Builds the training clients and evaluation targets of one repeat.
pub fn build_scenario(config: &ExperimentConfig, seed: u64) -> Result<Scenario> {
    let kind = config.scenario_kind()?;
    let spec = config.kernel.ok_or_else(|| FedGpError::config("config is not resolved"))?;
    let opts = &config.options;
    let mut rng = stream_rng(seed, DATA_STREAM);
    let mut test_rng = stream_rng(seed, TEST_STREAM);
    let ranges = opts.world.clone().unwrap_or_default();

    let mut scenario = match kind {
        ScenarioKind::GpHomogeneous | ScenarioKind::GpImbalanced => {
            let k = opts.clients.unwrap_or(20);
            let sizes = if kind == ScenarioKind::GpHomogeneous {
                let total = opts.total_points.unwrap_or(5000);
                let per = opts.points_per_client.unwrap_or(total / k.max(1));
                vec![per; k]
            } else {
                synth::imbalanced_sizes(k, opts.min_points.unwrap_or(10), opts.max_points.unwrap_or(10_000), &mut rng)?
            };
            let world = synth::draw_world_in(spec, &ranges, &mut rng)?;
            let datasets = if opts.shared_draw.unwrap_or(false) {
                synth::make_clients_shared(&world, &sizes, &mut rng)?
            } else {
                synth::make_clients(&world, &sizes, &mut rng)?
            };
            Scenario {
                datasets,
                tests: Vec::new(),
                truth: Some(world.true_params),
                init: None,
                hf_client: None,
            }
        }
        ScenarioKind::GpHeterogeneous => {
            let k = opts.clients.unwrap_or(10);
            let sizes = vec![opts.points_per_client.unwrap_or(64); k];
            let (_, datasets) = synth::make_heterogeneous_clients(spec, &ranges, &sizes, &mut rng)?;
            Scenario {
                datasets,
                tests: Vec::new(),
                truth: None,
                init: None,
                hf_client: None,
            }
        }
        ScenarioKind::BadInit | ScenarioKind::SinMirror => {
            let case = if kind == ScenarioKind::BadInit {
                let reading = opts.noise_reading.unwrap_or(NoiseReading::Variance);
                synth::bad_init_sized(opts.points_per_client.unwrap_or(100), reading, &mut rng)?
            } else {
                synth::sin_mirror()?
            };
            let x = uniform_points(config.metrics.test_points, case.input_range, &mut test_rng);
            let noise = Normal::new(0.0, case.noise_std).map_err(|e| FedGpError::config(e.to_string()))?;
            let tests = (0..case.datasets.len())
                .map(|k| {
                    let targets = x.column(0).mapv(|v| {
                        let f = case.latent(k, v);
                        match config.metrics.rmse_target {
                            RmseTarget::Latent => f,
                            RmseTarget::Observed => f + noise.sample(&mut test_rng),
                        }
                    });
                    TestSet {
                        client: k,
                        inputs: x.clone(),
                        targets,
                    }
                })
                .collect();
            Scenario {
                datasets: case.datasets,
                tests,
                truth: None,
                init: case.init,
                hf_client: None,
            }
        }
        ScenarioKind::Fidelity(bench) => fidelity_scenario(config, bench, &mut rng, &mut test_rng)?,
        ScenarioKind::Csv => csv_scenario(config, &mut rng)?,
    };

    if config.standardize.unwrap_or(false) && !matches!(kind, ScenarioKind::Fidelity(_)) {
        let (datasets, scalers) = synth::standardize(&scenario.datasets)?;
        for t in &mut scenario.tests {
            t.targets = scalers[t.client].apply(&t.targets);
        }
        scenario.datasets = datasets;
    }
    Ok(scenario)
}

fn fidelity_scenario(
    config: &ExperimentConfig,
    bench: Benchmark,
    rng: &mut ChaCha8Rng,
    test_rng: &mut ChaCha8Rng,
) -> Result<Scenario> {
    let opts = &config.options;
    let reference = bench.reference_sizes();
    let sizes = FidelitySizes {
        high: opts.high.unwrap_or(reference.high),
        mid: opts.mid.unwrap_or(reference.mid),
        low: opts.low.unwrap_or(reference.low),
    };
    let raw = synth::make_fidelity_clients(bench, sizes, opts.noise_std, rng)?;
    let hf = raw.len() - 1;
    let test = synth::fidelity_test_set(bench, opts.test_points.unwrap_or(1000), test_rng)?;
    let (datasets, targets) = if config.standardize.unwrap_or(true) {
        let (datasets, scalers) = synth::standardize(&raw)?;
        let targets = scalers[hf].apply(test.outputs());
        (datasets, targets)
    } else {
        (raw, test.outputs().clone())
    };
    Ok(Scenario {
        datasets,
        tests: vec![TestSet {
            client: hf,
            inputs: test.inputs().to_owned(),
            targets,
        }],
        truth: None,
        init: None,
        hf_client: Some(hf),
    })
}

fn csv_scenario(config: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<Scenario> {
    let paths = config.datasets.as_deref().unwrap_or_default();
    let mut datasets = Vec::with_capacity(paths.len());
    let mut tests = Vec::new();
    for (k, path) in paths.iter().enumerate() {
        let data = load_csv_dataset(path)?;
        let n_test = (config.test_fraction * data.len() as f64).floor() as usize;
        if n_test == 0 {
            datasets.push(data);
            continue;
        }
        if n_test >= data.len() {
            return Err(FedGpError::config(format!(
                "test_fraction leaves no training rows in {}",
                path.display()
            )));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        let (test_idx, train_idx) = order.split_at(n_test);
        let mut train_idx = train_idx.to_vec();
        let mut test_idx = test_idx.to_vec();
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        let test = data.subset(&test_idx)?;
        tests.push(TestSet {
            client: k,
            inputs: test.inputs().to_owned(),
            targets: test.outputs().clone(),
        });
        datasets.push(data.subset(&train_idx)?);
    }
    Ok(Scenario {
        datasets,
        tests,
        truth: None,
        init: None,
        hf_client: None,
    })
}

/// Federation settings of one repeat.
pub fn federation_config(config: &ExperimentConfig, n_lengthscales: usize, seed: u64) -> Result<FederationConfig> {
    let fed = &config.federation;
    let param_box = fed
        .param_box
        .ok_or_else(|| FedGpError::config("config is not resolved"))?
        .to_param_box(n_lengthscales)?;
    let mut out = FederationConfig::new(param_box, seed);
    out.rounds = fed.rounds;
    out.local_steps = fed.local_steps;
    out.participation = fed.participation;
    out.lr_schedule = fed.lr_schedule;
    out.scaling = fed.scaling;
    out.clip_norm = fed.clip_norm;
    out.freeze_lengthscales = fed.freeze_lengthscales;
    Ok(out)
}

fn initial_params(
    config: &ExperimentConfig,
    fed: &FederationConfig,
    scenario: &Scenario,
    n_lengthscales: usize,
) -> Result<GPParams> {
    let mut init = scenario.init.clone().unwrap_or_else(|| fed.sample_initial());
    if let Some(spec) = &config.init {
        if let Some(v) = spec.theta1 {
            init.theta1 = v;
        }
        if let Some(v) = spec.theta2 {
            init.theta2 = v;
        }
        match &spec.lengthscales {
            Some(InitLengthscales::Values(v)) if v.len() == 1 => init.lengthscales = vec![v[0]; n_lengthscales],
            Some(InitLengthscales::Values(v)) => init.lengthscales = v.clone(),
            Some(InitLengthscales::Keyword(_)) => {
                let truth = scenario
                    .truth
                    .as_ref()
                    .ok_or_else(|| FedGpError::config("init.lengthscales = \"truth\" needs a known world"))?;
                init.lengthscales = truth.lengthscales.clone();
            }
            None => {}
        }
    }
    if init.lengthscales.len() != n_lengthscales {
        return Err(FedGpError::config(format!(
            "init.lengthscales: kernel needs {n_lengthscales} values, got {}",
            init.lengthscales.len()
        )));
    }
    if !fed.param_box.contains(&init) {
        return Err(FedGpError::config(format!(
            "initial parameters {:?} lie outside federation.box",
            init.to_vec()
        )));
    }
    Ok(init)
}

struct Evaluator<'a> {
    spec: KernelSpec,
    config: &'a ExperimentConfig,
    truth: Option<&'a GPParams>,
    tests: &'a [TestSet],
    /// Maps a test set's client id to an index into the trained clients.
    client_map: &'a dyn Fn(usize) -> Option<usize>,
    datasets: Vec<&'a Dataset>,
    weights: Vec<f64>,
}

impl Evaluator<'_> {
    fn due(&self, round: usize) -> bool {
        let every = self.config.metrics.every;
        round == 0 || round == self.config.federation.rounds || (every > 0 && round % every == 0)
    }

    fn report(&self, theta: &GPParams) -> Result<MetricReport> {
        let mut report = MetricReport::default();
        if let Some(truth) = self.truth {
            report.param_sq_error =
                Some(metrics::param_sq_error(theta, truth, self.config.metrics.error_components)?);
            report.theta2_sq_error = Some(metrics::param_sq_error(theta, truth, ErrorComponents::Theta2Only)?);
        }
        if self.config.metrics.global_nll {
            report.global_nll = Some(metrics::global_nll(&self.spec, theta, &self.datasets, &self.weights)?);
        }
        if self.config.metrics.grad_norm.unwrap_or(false) {
            let g = metrics::global_grad(&self.spec, theta, &self.datasets, &self.weights)?;
            let free = if self.config.federation.freeze_lengthscales { 2 } else { g.len() };
            report.global_grad_sq_norm = Some(g[..free].iter().map(|v| v * v).sum());
        }
        let mut per_client = Vec::new();
        for t in self.tests {
            let Some(k) = (self.client_map)(t.client) else {
                continue;
            };
            let pred = gp::predict(&self.spec, theta, self.datasets[k], t.inputs.view()).map_err(|e| e.in_client(t.client))?;
            report.warnings += pred.clamp_warnings;
            per_client.push(metrics::rmse(
                pred.mean.as_slice().expect("contiguous"),
                t.targets.as_slice().expect("contiguous"),
            )?);
        }
        if !per_client.is_empty() {
            report.set_rmse(per_client);
        }
        Ok(report)
    }
}

/// Trains one baseline on one repeat's scenario and returns its trace rows.
pub fn run_baseline(
    config: &ExperimentConfig,
    scenario: &Scenario,
    baseline: Baseline,
    repeat: usize,
) -> Result<Vec<TraceRow>> {
    let spec = config.kernel.ok_or_else(|| FedGpError::config("config is not resolved"))?;
    let seed = repeat_seed(config.seed, repeat);
    let dim = scenario.datasets[0].dim();
    let n_ell = spec.n_lengthscales(dim);
    let mut fed = federation_config(config, n_ell, seed)?;
    let init = initial_params(config, &fed, scenario, n_ell)?;

    let (datasets, client_map): (Vec<Dataset>, Box<dyn Fn(usize) -> Option<usize>>) = match baseline {
        Baseline::Fgpr => (scenario.datasets.clone(), Box::new(Some)),
        Baseline::Separate => {
            let hf = scenario
                .hf_client
                .ok_or_else(|| FedGpError::config("the Separate baseline needs a multi-fidelity scenario"))?;
            fed.participation = Participation::Synchronous;
            (
                vec![scenario.datasets[hf].clone()],
                Box::new(move |k| (k == hf).then_some(0)),
            )
        }
    };
    let mut clients = ClientState::from_datasets(datasets, config.federation.batch_size, &init)?;
    let frozen: Vec<Dataset> = clients.iter().map(|c| c.data.clone()).collect();
    let evaluator = Evaluator {
        spec,
        config,
        truth: scenario.truth.as_ref(),
        tests: &scenario.tests,
        client_map: &*client_map,
        datasets: frozen.iter().collect(),
        weights: clients.iter().map(|c| c.weight).collect(),
    };

    let mut rows = vec![TraceRow {
        baseline,
        repeat,
        round: 0,
        params: init.clone(),
        metrics: Some(evaluator.report(&init)?),
    }];
    let traces = federation::run_federation_with(&spec, &mut clients, &fed, |round, theta, _| {
        if evaluator.due(round) {
            evaluator.report(theta).map(Some)
        } else {
            Ok(None)
        }
    })?;
    rows.extend(traces.into_iter().map(|t| TraceRow {
        baseline,
        repeat,
        round: t.round,
        params: t.aggregated,
        metrics: t.metrics,
    }));
    Ok(rows)
}

fn baselines_for(config: &ExperimentConfig, only: Option<Baseline>) -> Vec<Baseline> {
    match only {
        Some(b) => vec![b],
        None if config.separate_baseline.unwrap_or(false) => vec![Baseline::Fgpr, Baseline::Separate],
        None => vec![Baseline::Fgpr],
    }
}

/// Runs every repeat in memory. `only` restricts the run to one baseline.
/// Rows gathered before an error are kept in `partial`.
pub fn execute_into(config: &ExperimentConfig, only: Option<Baseline>, partial: &mut ExperimentOutput) -> Result<()> {
    let config = config.resolve()?;
    let baselines = baselines_for(&config, only);
    if baselines.contains(&Baseline::Separate) && !config.scenario_kind()?.is_fidelity() {
        return Err(FedGpError::config("the Separate baseline needs a multi-fidelity scenario"));
    }
    for repeat in 0..config.repeats {
        let seed = repeat_seed(config.seed, repeat);
        let scenario = build_scenario(&config, seed).map_err(|e| e.in_repeat(repeat))?;
        for &b in &baselines {
            let rows = run_baseline(&config, &scenario, b, repeat).map_err(|e| e.in_repeat(repeat))?;
            partial.rows.extend(rows);
        }
    }
    partial.rows.sort_by_key(|r| (r.baseline, r.repeat, r.round));
    Ok(())
}


pub fn execute(config: &ExperimentConfig, only: Option<Baseline>) -> Result<ExperimentOutput> {
    let mut out = ExperimentOutput::default();
    execute_into(config, only, &mut out)?;
    Ok(out)
}

/// Runs the experiment and writes `trace.csv`, `summary.csv` and
/// `config.echo` to `out_dir`. On failure, whatever was traced is written
/// together with a `.failed` marker holding the error.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    run_and_write(config, None, out_dir)
}

/// Like [`run_experiment`] but trains only the HF-only `Separate` baseline.
pub fn run_separate_baseline(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutput> {
    run_and_write(config, Some(Baseline::Separate), out_dir)
}

fn run_and_write(config: &ExperimentConfig, only: Option<Baseline>, out_dir: &Path) -> Result<ExperimentOutput> {
    fs::create_dir_all(out_dir).map_err(|e| FedGpError::io(out_dir, e))?;
    let marker = out_dir.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| FedGpError::io(&marker, e))?;
    }
    let mut out = ExperimentOutput::default();
    let result = config.resolve().and_then(|resolved| {
        resolved.write(&out_dir.join(ECHO_FILE))?;
        execute_into(&resolved, only, &mut out)
    });
    let written = write_outputs(&out, out_dir);
    match result.and(written) {
        Ok(()) => Ok(out),
        Err(e) => {
            fs::write(&marker, format!("{e}\n")).map_err(|io| FedGpError::io(&marker, io))?;
            Err(e)
        }
    }
}

/// Writes `trace.csv` and `summary.csv` for `out`.
pub fn write_outputs(out: &ExperimentOutput, out_dir: &Path) -> Result<()> {
    let n_ell = out.rows.iter().map(|r| r.params.lengthscales.len()).max().unwrap_or(0);
    let n_rmse = out
        .rows
        .iter()
        .filter_map(|r| r.metrics.as_ref().map(|m| m.per_client_rmse.len()))
        .max()
        .unwrap_or(0);
    let columns = Columns { n_ell, n_rmse };

    let trace_path = out_dir.join(TRACE_FILE);
    let mut w = csv_writer(&trace_path)?;
    let mut header = vec!["baseline".to_string(), "repeat".to_string(), "round".to_string()];
    header.extend(columns.names());
    write_record(&mut w, &trace_path, &header)?;
    for row in &out.rows {
        let mut rec = vec![row.baseline.label().to_string(), row.repeat.to_string(), row.round.to_string()];
        rec.extend(columns.cells(&row.params, row.metrics.as_ref()));
        write_record(&mut w, &trace_path, &rec)?;
    }
    w.flush().map_err(|e| FedGpError::io(&trace_path, e))?;

    let summary_path = out_dir.join(SUMMARY_FILE);
    let mut w = csv_writer(&summary_path)?;
    let mut header = vec!["baseline".to_string(), "repeat".to_string(), "round".to_string()];
    header.extend(columns.names());
    write_record(&mut w, &summary_path, &header)?;
    let finals = out.finals();
    let mut baselines: Vec<Baseline> = finals.iter().map(|r| r.baseline).collect();
    baselines.dedup();
    for b in baselines {
        let runs: Vec<&&TraceRow> = finals.iter().filter(|r| r.baseline == b).collect();
        let table: Vec<Vec<Option<f64>>> = runs
            .iter()
            .map(|r| columns.values(&r.params, r.metrics.as_ref()))
            .collect();
        for r in &runs {
            let mut rec = vec![b.label().to_string(), r.repeat.to_string(), r.round.to_string()];
            rec.extend(columns.cells(&r.params, r.metrics.as_ref()));
            write_record(&mut w, &summary_path, &rec)?;
        }
        let width = table.first().map_or(0, Vec::len);
        let column = |j: usize| -> Vec<f64> { table.iter().filter_map(|v| v[j]).collect() };
        for (label, pick) in [("mean", 0usize), ("std", 1)] {
            let mut rec = vec![b.label().to_string(), label.to_string(), String::new()];
            for j in 0..width {
                let col = column(j);
                rec.push(if col.is_empty() {
                    String::new()
                } else {
                    let (m, s) = metrics::mean_std(&col);
                    fmt_f64(if pick == 0 { m } else { s })
                });
            }
            write_record(&mut w, &summary_path, &rec)?;
        }
    }
    w.flush().map_err(|e| FedGpError::io(&summary_path, e))?;
    Ok(())
}

struct Columns {
    n_ell: usize,
    n_rmse: usize,
}

impl Columns {
    fn names(&self) -> Vec<String> {
        let mut names = vec!["theta1".to_string(), "theta2".to_string()];
        names.extend((1..=self.n_ell).map(|j| format!("l{j}")));
        for n in [
            "global_nll",
            "param_sq_error",
            "theta2_sq_error",
            "global_grad_sq_norm",
            "avg_rmse",
            "std_rmse",
        ] {
            names.push(n.to_string());
        }
        names.extend((0..self.n_rmse).map(|k| format!("rmse_{k}")));
        names.push("warnings".to_string());
        names
    }

    fn values(&self, params: &GPParams, m: Option<&MetricReport>) -> Vec<Option<f64>> {
        let mut v = vec![Some(params.theta1), Some(params.theta2)];
        v.extend((0..self.n_ell).map(|j| params.lengthscales.get(j).copied()));
        v.push(m.and_then(|m| m.global_nll));
        v.push(m.and_then(|m| m.param_sq_error));
        v.push(m.and_then(|m| m.theta2_sq_error));
        v.push(m.and_then(|m| m.global_grad_sq_norm));
        v.push(m.and_then(|m| m.avg_rmse));
        v.push(m.and_then(|m| m.std_rmse));
        v.extend((0..self.n_rmse).map(|k| m.and_then(|m| m.per_client_rmse.get(k).copied())));
        v.push(m.map(|m| m.warnings as f64));
        v
    }

    fn cells(&self, params: &GPParams, m: Option<&MetricReport>) -> Vec<String> {
        let mut cells: Vec<String> = self.values(params, m).iter().map(fmt_cell).collect();
        if let (Some(last), Some(m)) = (cells.last_mut(), m) {
            *last = m.warnings.to_string();
        }
        cells
    }
}

/// Full double precision, `.` as decimal separator.
pub fn fmt_f64(v: f64) -> String {
    let mut s = String::new();
    write!(s, "{v:.16e}").expect("writing to a String");
    s
}

fn fmt_cell(v: &Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn csv_writer(path: &PathBuf) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| FedGpError::io(path, std::io::Error::other(e)))
}

fn write_record(w: &mut csv::Writer<fs::File>, path: &Path, rec: &[String]) -> Result<()> {
    w.write_record(rec)
        .map_err(|e| FedGpError::io(path, std::io::Error::other(e)))
}
