//! FedAvg-style federation of GP hyperparameter training.
//!
//! A server broadcasts the current parameters, each participating client
//! runs `E` projected SGD steps on mini-batches of its own data, and the
//! server averages the results. Synchronous rounds use every client and
//! `p_k`-weighted averaging; asynchronous rounds draw `K_sample` slots with
//! replacement from `p_k` and take the unweighted mean over slots.
//!
//! Randomness is split into independent ChaCha streams keyed by
//! `(seed, client, round)`, so a run is reproducible and does not depend on
//! how client updates are scheduled across threads.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FedGpError, Result};
use crate::gp::{self, Dataset, GradScaling};
use crate::kernels::{GPParams, KernelSpec, ParamBox};
use crate::metrics::MetricReport;

/// Tolerance on `sum(p_k) == 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

const SERVER_STREAM: u64 = u64::MAX;
const INIT_STREAM: u64 = u64::MAX - 1;

/// Random stream owned by `client` during `round`.
pub fn client_stream(seed: u64, client: usize, round: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((client as u64) << 32) | (round as u64 & 0xffff_ffff));
    rng
}

/// Stream used by the server for client selection.
pub fn server_stream(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SERVER_STREAM);
    rng
}

/// Stream used to draw the shared initial parameters.
pub fn init_stream(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Constant { eta: f64 },
    /// `eta(t) = beta1 / (1 + t)` with `t` the global local-step counter.
    InverseTime { beta1: f64 },
}

impl ScheduleSpec {
    pub fn rate(&self, step: u64) -> f64 {
        match *self {
            ScheduleSpec::Constant { eta } => eta,
            ScheduleSpec::InverseTime { beta1 } => beta1 / (1.0 + step as f64),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (name, v) = match *self {
            ScheduleSpec::Constant { eta } => ("eta", eta),
            ScheduleSpec::InverseTime { beta1 } => ("beta1", beta1),
        };
        // a zero constant rate is allowed; it freezes training
        let ok = match self {
            ScheduleSpec::Constant { .. } => v >= 0.0 && v.is_finite(),
            ScheduleSpec::InverseTime { .. } => v > 0.0 && v.is_finite(),
        };
        if !ok {
            return Err(FedGpError::config(format!("learning-rate {name} out of range: {v}")));
        }
        Ok(())
    }
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::InverseTime { beta1: 0.05 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Participation {
    #[default]
    Synchronous,
    Asynchronous { sample_clients: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_steps: usize,
    pub participation: Participation,
    pub lr_schedule: ScheduleSpec,
    pub scaling: GradScaling,
    pub param_box: ParamBox,
    pub clip_norm: Option<f64>,
    pub freeze_lengthscales: bool,
    pub seed: u64,
}

impl FederationConfig {
    /// Defaults: 200 rounds of 5 local steps, synchronous, `beta1 = 0.05`,
    /// no scaling, no clipping.
    pub fn new(param_box: ParamBox, seed: u64) -> Self {
        Self {
            rounds: 200,
            local_steps: 5,
            participation: Participation::Synchronous,
            lr_schedule: ScheduleSpec::default(),
            scaling: GradScaling::disabled(),
            param_box,
            clip_norm: None,
            freeze_lengthscales: false,
            seed,
        }
    }

    pub fn validate(&self, n_clients: usize) -> Result<()> {
        if self.rounds == 0 {
            return Err(FedGpError::config("rounds must be at least 1"));
        }
        if self.local_steps == 0 {
            return Err(FedGpError::config("local_steps must be at least 1"));
        }
        if let Participation::Asynchronous { sample_clients } = self.participation {
            if sample_clients == 0 || sample_clients >= n_clients {
                return Err(FedGpError::config(format!(
                    "asynchronous participation needs 1 <= sample_clients < K = {n_clients}, got {sample_clients}"
                )));
            }
        }
        if let Some(g) = self.clip_norm {
            if !(g > 0.0) || !g.is_finite() {
                return Err(FedGpError::config(format!("clip_norm must be positive, got {g}")));
            }
        }
        self.lr_schedule.validate()?;
        self.scaling.validate()
    }

    /// Shared initial parameters drawn uniformly from the box.
    pub fn sample_initial(&self) -> GPParams {
        self.param_box.sample_uniform(&mut init_stream(self.seed))
    }

    pub fn local_sgd(&self) -> LocalSgd<'_> {
        LocalSgd {
            schedule: self.lr_schedule,
            scaling: self.scaling,
            param_box: &self.param_box,
            clip_norm: self.clip_norm,
            freeze_lengthscales: self.freeze_lengthscales,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub data: Dataset,
    pub params: GPParams,
    pub weight: f64,
    pub batch_size: usize,
}

impl ClientState {
    /// Builds the federation from datasets: weights `N_k / sum N_j`,
    /// mini-batch size `min(batch_cap, N_k)`, everyone starting at `init`.
    pub fn from_datasets(datasets: Vec<Dataset>, batch_cap: usize, init: &GPParams) -> Result<Vec<ClientState>> {
        if batch_cap == 0 {
            return Err(FedGpError::config("batch size must be at least 1"));
        }
        let sizes: Vec<usize> = datasets.iter().map(Dataset::len).collect();
        let weights = client_weights(&sizes)?;
        Ok(datasets
            .into_iter()
            .zip(weights)
            .enumerate()
            .map(|(id, (data, weight))| ClientState {
                id,
                batch_size: batch_cap.min(data.len()),
                data,
                params: init.clone(),
                weight,
            })
            .collect())
    }
}

/// `p_k = N_k / sum_j N_j`.
pub fn client_weights(sizes: &[usize]) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(FedGpError::input("no client sizes given"));
    }
    if let Some(k) = sizes.iter().position(|&n| n == 0) {
        return Err(FedGpError::input(format!("client {k} has no data")));
    }
    let total: usize = sizes.iter().sum();
    Ok(sizes.iter().map(|&n| n as f64 / total as f64).collect())
}

/// Everything a client needs to run its local SGD steps.
#[derive(Clone, Copy, Debug)]
pub struct LocalSgd<'a> {
    pub schedule: ScheduleSpec,
    pub scaling: GradScaling,
    pub param_box: &'a ParamBox,
    pub clip_norm: Option<f64>,
    pub freeze_lengthscales: bool,
}

/// Runs `steps` projected SGD steps from `client.params`. The learning rate
/// of step `s` is `schedule.rate(first_step + s)`.
pub fn local_update<R: Rng + ?Sized>(
    spec: &KernelSpec,
    client: &ClientState,
    steps: usize,
    first_step: u64,
    sgd: &LocalSgd<'_>,
    rng: &mut R,
) -> Result<GPParams> {
    local_update_inner(spec, client, steps, first_step, sgd, rng, &mut |_| {})
}

/// [`local_update`] that also returns every gradient actually applied
/// (after clipping and masking).
pub fn local_update_traced<R: Rng + ?Sized>(
    spec: &KernelSpec,
    client: &ClientState,
    steps: usize,
    first_step: u64,
    sgd: &LocalSgd<'_>,
    rng: &mut R,
) -> Result<(GPParams, Vec<Vec<f64>>)> {
    let mut applied = Vec::with_capacity(steps);
    let params = local_update_inner(spec, client, steps, first_step, sgd, rng, &mut |g| applied.push(g.to_vec()))?;
    Ok((params, applied))
}

fn local_update_inner<R: Rng + ?Sized>(
    spec: &KernelSpec,
    client: &ClientState,
    steps: usize,
    first_step: u64,
    sgd: &LocalSgd<'_>,
    rng: &mut R,
    on_step: &mut dyn FnMut(&[f64]),
) -> Result<GPParams> {
    let mut run = || -> Result<GPParams> {
        let n = client.data.len();
        let mut theta = client.params.clone();
        for s in 0..steps {
            let batch = gp::sample_batch(n, client.batch_size, rng)?;
            let mut g = gp::stochastic_grad(spec, &theta, &client.data, &batch, &sgd.scaling)?;
            if let Some(limit) = sgd.clip_norm {
                let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > limit {
                    let shrink = limit / norm;
                    g.iter_mut().for_each(|v| *v *= shrink);
                }
            }
            if sgd.freeze_lengthscales {
                g[2..].iter_mut().for_each(|v| *v = 0.0);
            }
            on_step(&g);
            let eta = sgd.schedule.rate(first_step + s as u64);
            let mut next = theta.to_vec();
            next.iter_mut().zip(&g).for_each(|(p, gi)| *p -= eta * gi);
            theta = sgd.param_box.project(&GPParams::from_slice(&next)?)?;
            debug_assert!(sgd.param_box.contains(&theta));
        }
        Ok(theta)
    };
    run().map_err(|e| e.in_client(client.id))
}

/// Draws `k_sample` client ids with replacement from the categorical
/// distribution given by `weights`.
pub fn select_clients<R: Rng + ?Sized>(weights: &[f64], k_sample: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k_sample == 0 {
        return Err(FedGpError::input("must select at least one client"));
    }
    if weights.is_empty() {
        return Err(FedGpError::input("no client weights given"));
    }
    let dist = WeightedIndex::new(weights).map_err(|e| FedGpError::input(format!("invalid client weights: {e}")))?;
    Ok((0..k_sample).map(|_| dist.sample(rng)).collect())
}

fn check_layouts(params_list: &[GPParams]) -> Result<usize> {
    let first = params_list
        .first()
        .ok_or_else(|| FedGpError::input("nothing to aggregate"))?;
    let len = first.len();
    if let Some(p) = params_list.iter().find(|p| p.len() != len) {
        return Err(FedGpError::input(format!(
            "mismatched parameter layouts: {} vs {}",
            len,
            p.len()
        )));
    }
    Ok(len)
}

/// Components on which every client agrees (frozen length-scales, say) are
/// copied rather than averaged, so rounding cannot move them.
fn keep_shared_components(params_list: &[GPParams], acc: &mut [f64]) {
    let first = params_list[0].to_vec();
    for (i, a) in acc.iter_mut().enumerate() {
        if params_list.iter().all(|p| p.get(i) == first[i]) {
            *a = first[i];
        }
    }
}

/// `sum_k p_k theta_k`, projected onto `param_box`.
pub fn aggregate_full(params_list: &[GPParams], weights: &[f64], param_box: &ParamBox) -> Result<GPParams> {
    let len = check_layouts(params_list)?;
    if weights.len() != params_list.len() {
        return Err(FedGpError::input(format!(
            "{} parameter sets but {} weights",
            params_list.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(FedGpError::input(format!("weights sum to {total}, not 1")));
    }
    let mut acc = vec![0.0; len];
    for (p, w) in params_list.iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(p.to_vec()) {
            *a += w * v;
        }
    }
    keep_shared_components(params_list, &mut acc);
    let avg = GPParams::from_slice(&acc)?;
    let projected = param_box.project(&avg)?;
    debug_assert!(
        acc.iter()
            .zip(projected.to_vec())
            .all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0)),
        "weighted average left the box"
    );
    Ok(projected)
}

/// Unweighted mean over selection slots; a client drawn twice counts twice.
pub fn aggregate_sampled(params_list: &[GPParams]) -> Result<GPParams> {
    let len = check_layouts(params_list)?;
    let mut acc = vec![0.0; len];
    for p in params_list {
        for (a, v) in acc.iter_mut().zip(p.to_vec()) {
            *a += v;
        }
    }
    let n = params_list.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    keep_shared_components(params_list, &mut acc);
    GPParams::from_slice(&acc)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundTrace {
    /// Number of completed communication rounds (1-based).
    pub round: usize,
    pub aggregated: GPParams,
    /// Final local parameters of every client that trained this round.
    pub local_params: Vec<(usize, GPParams)>,
    /// Selection slots, duplicates retained (all ids in order when synchronous).
    pub selected: Vec<usize>,
    pub metrics: Option<MetricReport>,
}

/// Runs the federation without per-round metrics.
pub fn run_federation(spec: &KernelSpec, clients: &mut [ClientState], config: &FederationConfig) -> Result<Vec<RoundTrace>> {
    run_federation_with(spec, clients, config, |_, _, _| Ok(None))
}

/// Runs `config.rounds` communication rounds. After each round every client
/// holds the aggregate, and `observe(round, aggregate, clients)` may attach
/// metrics to the round's trace.
pub fn run_federation_with<F>(
    spec: &KernelSpec,
    clients: &mut [ClientState],
    config: &FederationConfig,
    mut observe: F,
) -> Result<Vec<RoundTrace>>
where
    F: FnMut(usize, &GPParams, &[ClientState]) -> Result<Option<MetricReport>>,
{
    let k = clients.len();
    if k == 0 {
        return Err(FedGpError::input("federation has no clients"));
    }
    config.validate(k)?;
    let dim = clients[0].data.dim();
    if let Some(c) = clients.iter().find(|c| c.data.dim() != dim) {
        return Err(FedGpError::shape(format!(
            "client {} has input dimension {} but client 0 has {dim}",
            c.id,
            c.data.dim()
        )));
    }
    let weights: Vec<f64> = clients.iter().map(|c| c.weight).collect();
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(FedGpError::input(format!("client weights sum to {total}, not 1")));
    }
    let mut theta = clients[0].params.clone();
    if clients.iter().any(|c| c.params != theta) {
        return Err(FedGpError::input("clients must start from one shared parameter vector"));
    }
    if !config.param_box.contains(&theta) {
        return Err(FedGpError::domain("initial parameters lie outside the box"));
    }

    let sgd = config.local_sgd();
    let mut server_rng = server_stream(config.seed);
    let mut traces = Vec::with_capacity(config.rounds);

    for c in 0..config.rounds {
        let round_result = (|| -> Result<RoundTrace> {
            let selected: Vec<usize> = match config.participation {
                Participation::Synchronous => (0..k).collect(),
                Participation::Asynchronous { sample_clients } => {
                    select_clients(&weights, sample_clients, &mut server_rng)?
                }
            };
            let mut unique = selected.clone();
            unique.sort_unstable();
            unique.dedup();

            debug_assert!(clients.iter().all(|cl| cl.params == theta));
            let first_step = (c * config.local_steps) as u64;
            let locals: Vec<(usize, GPParams)> = unique
                .par_iter()
                .map(|&id| {
                    let mut rng = client_stream(config.seed, id, c);
                    local_update(spec, &clients[id], config.local_steps, first_step, &sgd, &mut rng)
                        .map(|p| (id, p))
                })
                .collect::<Result<_>>()?;

            let aggregated = match config.participation {
                Participation::Synchronous => {
                    let params: Vec<GPParams> = locals.iter().map(|(_, p)| p.clone()).collect();
                    aggregate_full(&params, &weights, &config.param_box)?
                }
                Participation::Asynchronous { .. } => {
                    let slots: Vec<GPParams> = selected
                        .iter()
                        .map(|id| {
                            let pos = unique.binary_search(id).expect("selected id was trained");
                            locals[pos].1.clone()
                        })
                        .collect();
                    config.param_box.project(&aggregate_sampled(&slots)?)?
                }
            };
            for client in clients.iter_mut() {
                client.params = aggregated.clone();
            }
            let metrics = observe(c + 1, &aggregated, clients)?;
            Ok(RoundTrace {
                round: c + 1,
                aggregated,
                local_params: locals,
                selected,
                metrics,
            })
        })();
        let trace = round_result.map_err(|e| e.in_round(c))?;
        theta = trace.aggregated.clone();
        traces.push(trace);
    }
    Ok(traces)
}
