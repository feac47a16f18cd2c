//! Quantities reported per round and per run.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FedGpError, Result};
use crate::gp::{self, Dataset};
use crate::kernels::{GPParams, KernelSpec};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub global_nll: Option<f64>,
    pub param_sq_error: Option<f64>,
    pub theta2_sq_error: Option<f64>,
    pub global_grad_sq_norm: Option<f64>,
    pub per_client_rmse: Vec<f64>,
    pub avg_rmse: Option<f64>,
    pub std_rmse: Option<f64>,
    /// Numerical warnings raised while computing the report (variance clamps).
    pub warnings: usize,
}

impl MetricReport {
    /// Fills `per_client_rmse` and the derived mean / standard deviation.
    pub fn set_rmse(&mut self, per_client: Vec<f64>) {
        let (mean, std) = mean_std(&per_client);
        self.avg_rmse = Some(mean);
        self.std_rmse = Some(std);
        self.per_client_rmse = per_client;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorComponents {
    #[default]
    Theta1Theta2,
    Theta2Only,
    All,
}

/// Sum of squared differences over the selected components.
pub fn param_sq_error(theta_bar: &GPParams, theta_star: &GPParams, components: ErrorComponents) -> Result<f64> {
    if theta_bar.len() != theta_star.len() {
        return Err(FedGpError::input(format!(
            "parameter layouts differ: {} vs {}",
            theta_bar.len(),
            theta_star.len()
        )));
    }
    let sq = |a: f64, b: f64| (a - b) * (a - b);
    let t2 = sq(theta_bar.theta2, theta_star.theta2);
    Ok(match components {
        ErrorComponents::Theta2Only => t2,
        ErrorComponents::Theta1Theta2 => sq(theta_bar.theta1, theta_star.theta1) + t2,
        ErrorComponents::All => theta_bar
            .to_vec()
            .iter()
            .zip(theta_star.to_vec())
            .map(|(a, b)| sq(*a, b))
            .sum(),
    })
}

pub fn rmse(pred_mean: &[f64], truth: &[f64]) -> Result<f64> {
    if pred_mean.len() != truth.len() {
        return Err(FedGpError::input(format!(
            "{} predictions but {} targets",
            pred_mean.len(),
            truth.len()
        )));
    }
    if pred_mean.is_empty() {
        return Err(FedGpError::input("rmse of zero points"));
    }
    let mse = pred_mean
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred_mean.len() as f64;
    Ok(mse.sqrt())
}

/// Mean and sample standard deviation (`1/(n-1)`; zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn check_weighted(datasets: &[&Dataset], weights: &[f64]) -> Result<()> {
    if datasets.is_empty() || datasets.len() != weights.len() {
        return Err(FedGpError::input(format!(
            "{} datasets but {} weights",
            datasets.len(),
            weights.len()
        )));
    }
    Ok(())
}

/// `sum_k p_k * full_grad(theta; D_k)` on full client data.
pub fn global_grad(spec: &KernelSpec, theta: &GPParams, datasets: &[&Dataset], weights: &[f64]) -> Result<Vec<f64>> {
    check_weighted(datasets, weights)?;
    let per_client: Vec<Vec<f64>> = datasets
        .par_iter()
        .enumerate()
        .map(|(k, d)| gp::full_grad(spec, theta, d).map_err(|e| e.in_client(k)))
        .collect::<Result<_>>()?;
    let mut acc = vec![0.0; theta.len()];
    for (g, w) in per_client.iter().zip(weights) {
        for (a, v) in acc.iter_mut().zip(g) {
            *a += w * v;
        }
    }
    Ok(acc)
}

pub fn global_grad_sq_norm(spec: &KernelSpec, theta: &GPParams, datasets: &[&Dataset], weights: &[f64]) -> Result<f64> {
    Ok(global_grad(spec, theta, datasets, weights)?.iter().map(|v| v * v).sum())
}

/// `sum_k p_k * nll(theta; D_k)`.
pub fn global_nll(spec: &KernelSpec, theta: &GPParams, datasets: &[&Dataset], weights: &[f64]) -> Result<f64> {
    check_weighted(datasets, weights)?;
    let per_client: Vec<f64> = datasets
        .par_iter()
        .enumerate()
        .map(|(k, d)| gp::nll(spec, theta, d).map_err(|e| e.in_client(k)))
        .collect::<Result<_>>()?;
    Ok(per_client.iter().zip(weights).map(|(v, w)| v * w).sum())
}
