//! Exact GP computations on a single dataset.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FedGpError, Result};
use crate::kernels::{self, GPParams, KernelSpec};
use crate::linalg::CholeskyFactor;

/// Clamped negative variances larger than this fraction of `theta1^2` are
/// reported as numerical warnings.
pub const VARIANCE_CLAMP_WARN: f64 = 1e-6;

/// One client's observations: `inputs` is `N x d`, `outputs` has length `N`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Array2<f64>,
    outputs: Array1<f64>,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, outputs: Array1<f64>) -> Result<Self> {
        if inputs.nrows() != outputs.len() {
            return Err(FedGpError::shape(format!(
                "{} input rows but {} outputs",
                inputs.nrows(),
                outputs.len()
            )));
        }
        if inputs.nrows() == 0 {
            return Err(FedGpError::input("dataset must contain at least one observation"));
        }
        if inputs.ncols() == 0 {
            return Err(FedGpError::input("dataset inputs must have at least one column"));
        }
        if !inputs.iter().chain(outputs.iter()).all(|v| v.is_finite()) {
            return Err(FedGpError::input("dataset contains non-finite values"));
        }
        Ok(Self { inputs, outputs })
    }

    pub fn inputs(&self) -> ArrayView2<'_, f64> {
        self.inputs.view()
    }

    pub fn outputs(&self) -> &Array1<f64> {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Rows selected by `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(FedGpError::input(format!(
                "index {bad} out of range for dataset of size {}",
                self.len()
            )));
        }
        Self::new(
            self.inputs.select(Axis(0), indices),
            self.outputs.select(Axis(0), indices),
        )
    }

    pub fn with_outputs(&self, outputs: Array1<f64>) -> Result<Self> {
        Self::new(self.inputs.clone(), outputs)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub mean: Array1<f64>,
    /// Posterior variance of the latent function, clamped at zero.
    pub latent_variance: Array1<f64>,
    /// `latent_variance + theta2^2`.
    pub observation_variance: Array1<f64>,
    /// Test points whose raw variance fell below `-1e-6 * theta1^2`.
    pub clamp_warnings: usize,
}

/// Constant rescaling of the first two gradient components: the
/// `theta1` entry is divided by `tau * ln M`, the `theta2` entry by `M`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradScaling {
    pub tau: f64,
    pub enabled: bool,
}

impl GradScaling {
    pub fn disabled() -> Self {
        Self {
            tau: 1.0,
            enabled: false,
        }
    }

    pub fn with_tau(tau: f64) -> Self {
        Self { tau, enabled: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(FedGpError::config(format!("scaling tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

impl Default for GradScaling {
    fn default() -> Self {
        Self::disabled()
    }
}

fn check_dataset(spec: &KernelSpec, params: &GPParams, data: &Dataset) -> Result<()> {
    kernels::check_params(spec, params, data.dim())
}

fn factor_train(spec: &KernelSpec, params: &GPParams, data: &Dataset) -> Result<CholeskyFactor> {
    CholeskyFactor::new(kernels::train_cov_unchecked(spec, params, data.inputs(), true))
}

/// Negative log marginal likelihood
/// `0.5 * (y^T K^{-1} y + log|K| + N log 2 pi)` with `K = theta1^2 K_f + theta2^2 I`.
pub fn nll(spec: &KernelSpec, params: &GPParams, data: &Dataset) -> Result<f64> {
    check_dataset(spec, params, data)?;
    let factor = factor_train(spec, params, data)?;
    let z = factor.solve_lower(data.outputs())?;
    let n = data.len() as f64;
    Ok(0.5 * (z.dot(&z) + factor.log_det() + n * (2.0 * PI).ln()))
}

/// Gradient of [`nll`] in `GPParams` layout:
/// `g_i = 0.5 * Tr[(K^{-1} - a a^T) dK/dp_i]` with `a = K^{-1} y`.
pub fn full_grad(spec: &KernelSpec, params: &GPParams, data: &Dataset) -> Result<Vec<f64>> {
    check_dataset(spec, params, data)?;
    let factor = factor_train(spec, params, data)?;
    let alpha = factor.solve(data.outputs())?;
    let kinv = factor.inverse()?;

    let n = data.len();
    let m = params.lengthscales.len();
    let x = data.inputs();
    let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    let w = |i: usize, j: usize| kinv[(i, j)] - alpha[i] * alpha[j];

    // sum_ij W_ij K_f,ij and, per length-scale, sum_{i<j} W_ij dK_f,ij/dl
    let mut wk = 0.0;
    let mut trace_w = 0.0;
    let mut wdl = vec![0.0; m];
    let mut dl = vec![0.0; m];
    for i in 0..n {
        let wii = w(i, i);
        trace_w += wii;
        wk += wii;
        for j in 0..i {
            let wij = w(i, j);
            let k = kernels::corr_and_lengthscale_grad(spec, &params.lengthscales, &rows[i], &rows[j], &mut dl);
            wk += 2.0 * wij * k;
            for (acc, g) in wdl.iter_mut().zip(&dl) {
                *acc += wij * g;
            }
        }
    }

    let amp = params.theta1 * params.theta1;
    let mut grad = Vec::with_capacity(2 + m);
    grad.push(params.theta1 * wk);
    grad.push(params.theta2 * trace_w);
    grad.extend(wdl.iter().map(|s| amp * s));
    Ok(grad)
}

fn check_batch(batch: &[usize], n: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(FedGpError::input("mini-batch is empty"));
    }
    let mut seen = vec![false; n];
    for &i in batch {
        if i >= n {
            return Err(FedGpError::input(format!("batch index {i} out of range [0, {n})")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(FedGpError::input(format!("duplicate batch index {i}")));
        }
    }
    Ok(())
}

/// Mini-batch gradient: [`full_grad`] on the rows in `batch`, optionally
/// rescaled. Length-scale components are never rescaled.
pub fn stochastic_grad(
    spec: &KernelSpec,
    params: &GPParams,
    data: &Dataset,
    batch: &[usize],
    scaling: &GradScaling,
) -> Result<Vec<f64>> {
    check_batch(batch, data.len())?;
    let m = batch.len();
    if scaling.enabled {
        scaling.validate()?;
        if m < 2 {
            return Err(FedGpError::config(format!(
                "gradient scaling needs a batch of at least 2, got {m}"
            )));
        }
    }
    let sub = data.subset(batch)?;
    let mut g = full_grad(spec, params, &sub)?;
    if scaling.enabled {
        g[0] /= scaling.tau * (m as f64).ln();
        g[1] /= m as f64;
    }
    Ok(g)
}

/// Uniform subset of `batch_size` indices from `0..n_total`, without replacement.
pub fn sample_batch<R: Rng + ?Sized>(n_total: usize, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
    if batch_size == 0 || batch_size > n_total {
        return Err(FedGpError::input(format!(
            "batch size {batch_size} must lie in [1, {n_total}]"
        )));
    }
    Ok(rand::seq::index::sample(rng, n_total, batch_size).into_vec())
}

/// Posterior predictive mean and variance of the latent function at `x_star`.
pub fn predict(spec: &KernelSpec, params: &GPParams, train: &Dataset, x_star: ArrayView2<f64>) -> Result<Prediction> {
    check_dataset(spec, params, train)?;
    if x_star.ncols() != train.dim() {
        return Err(FedGpError::shape(format!(
            "test inputs have {} columns but training inputs have {}",
            x_star.ncols(),
            train.dim()
        )));
    }
    let factor = factor_train(spec, params, train)?;
    let alpha = factor.solve(train.outputs())?;
    // K(X, X*) is N x N*
    let k_cross = kernels::cross_cov_unchecked(spec, params, train.inputs(), x_star);
    let mean = k_cross.t().dot(&alpha);
    let v = factor.solve_lower_mat(&k_cross)?;

    let prior = params.theta1 * params.theta1;
    let noise = params.theta2 * params.theta2;
    let mut clamp_warnings = 0;
    let latent_variance: Array1<f64> = v
        .axis_iter(Axis(1))
        .map(|col| {
            let raw = prior - col.dot(&col);
            if raw < -VARIANCE_CLAMP_WARN * prior {
                clamp_warnings += 1;
            }
            raw.max(0.0)
        })
        .collect();
    let observation_variance = latent_variance.mapv(|v| v + noise);
    Ok(Prediction {
        mean,
        latent_variance,
        observation_variance,
        clamp_warnings,
    })
}

/// One draw `y = L z + theta2 * w` from the GP prior at `x`, where
/// `L L^T = theta1^2 K_f + jitter`.
pub fn sample_prior<R: Rng + ?Sized>(
    spec: &KernelSpec,
    params: &GPParams,
    x: ArrayView2<f64>,
    rng: &mut R,
) -> Result<Array1<f64>> {
    kernels::check_params(spec, params, x.ncols())?;
    let n = x.nrows();
    let cov = kernels::train_cov_unchecked(spec, params, x, false);
    let factor = CholeskyFactor::with_jitter(cov)?;
    let z: Array1<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let w: Array1<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut y = factor.lower().dot(&z);
    y.scaled_add(params.theta2, &w);
    Ok(y)
}
