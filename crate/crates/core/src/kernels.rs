//! Stationary kernels and covariance assembly.
//!
//! Every covariance here has the form `K = theta1^2 * K_f + theta2^2 * I`, where
//! `K_f` is a unit-amplitude correlation built from a scaled distance
//! `r = sqrt(sum_j (x1_j - x2_j)^2 / l_j^2)`. Parameters are laid out as
//! `[theta1, theta2, l_1, ..., l_m]` everywhere in the crate (gradients,
//! boxes, flattened traces), with `m = 1` for isotropic kernels and `m = d`
//! under ARD.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FedGpError, Result};

const SQRT3: f64 = 1.732_050_807_568_877_2;
const SQRT5: f64 = 2.236_067_977_499_79;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Rbf,
    Matern12,
    Matern32,
    Matern52,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthscaleMode {
    #[default]
    Isotropic,
    Ard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    #[serde(default)]
    pub lengthscale_mode: LengthscaleMode,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, lengthscale_mode: LengthscaleMode) -> Self {
        Self {
            family,
            lengthscale_mode,
        }
    }

    pub fn isotropic(family: KernelFamily) -> Self {
        Self::new(family, LengthscaleMode::Isotropic)
    }

    pub fn ard(family: KernelFamily) -> Self {
        Self::new(family, LengthscaleMode::Ard)
    }

    /// Number of length-scales this spec expects for inputs of dimension `dim`.
    pub fn n_lengthscales(&self, dim: usize) -> usize {
        match self.lengthscale_mode {
            LengthscaleMode::Isotropic => 1,
            LengthscaleMode::Ard => dim,
        }
    }

    fn check_lengthscales(&self, lengthscales: &[f64], dim: usize) -> Result<()> {
        let expected = self.n_lengthscales(dim);
        if lengthscales.len() != expected {
            return Err(FedGpError::shape(format!(
                "{:?} kernel on {dim}-dimensional inputs needs {expected} length-scales, got {}",
                self.lengthscale_mode,
                lengthscales.len()
            )));
        }
        if let Some(l) = lengthscales.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
            return Err(FedGpError::domain(format!("length-scale must be positive, got {l}")));
        }
        Ok(())
    }
}

/// GP hyperparameters `(theta1, theta2, l)`: signal amplitude, noise standard
/// deviation and length-scales.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GPParams {
    pub theta1: f64,
    pub theta2: f64,
    pub lengthscales: Vec<f64>,
}

impl GPParams {
    pub fn new(theta1: f64, theta2: f64, lengthscales: Vec<f64>) -> Self {
        Self {
            theta1,
            theta2,
            lengthscales,
        }
    }

    /// Total number of scalar parameters (`2 + lengthscales.len()`).
    pub fn len(&self) -> usize {
        2 + self.lengthscales.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.push(self.theta1);
        v.push(self.theta2);
        v.extend_from_slice(&self.lengthscales);
        v
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        if values.len() < 3 {
            return Err(FedGpError::shape(format!(
                "parameter vector needs at least 3 entries, got {}",
                values.len()
            )));
        }
        Ok(Self::new(values[0], values[1], values[2..].to_vec()))
    }

    pub fn get(&self, i: usize) -> f64 {
        match i {
            0 => self.theta1,
            1 => self.theta2,
            _ => self.lengthscales[i - 2],
        }
    }

    pub fn set(&mut self, i: usize, value: f64) {
        match i {
            0 => self.theta1 = value,
            1 => self.theta2 = value,
            _ => self.lengthscales[i - 2] = value,
        }
    }

    /// Checks positivity and finiteness of every component.
    pub fn validate(&self) -> Result<()> {
        for (i, v) in self.to_vec().into_iter().enumerate() {
            if !(v > 0.0) || !v.is_finite() {
                return Err(FedGpError::domain(format!(
                    "parameter component {i} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Componentwise box `[lower, upper]` in `GPParams` layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ParamBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.len() < 3 {
            return Err(FedGpError::shape(format!(
                "box bounds must share a layout of length >= 3, got {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(*lo > 0.0) || !(lo < hi) || !hi.is_finite() {
                return Err(FedGpError::config(format!(
                    "box component {i} needs 0 < lower < upper < inf, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// Builds a box from one range per parameter kind, repeating the
    /// length-scale range `n_lengthscales` times.
    pub fn from_ranges(
        theta1: (f64, f64),
        theta2: (f64, f64),
        lengthscale: (f64, f64),
        n_lengthscales: usize,
    ) -> Result<Self> {
        let mut lower = vec![theta1.0, theta2.0];
        let mut upper = vec![theta1.1, theta2.1];
        lower.extend(std::iter::repeat_n(lengthscale.0, n_lengthscales));
        upper.extend(std::iter::repeat_n(lengthscale.1, n_lengthscales));
        Self::new(lower, upper)
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    fn check_layout(&self, params: &GPParams) -> Result<()> {
        if params.len() != self.len() {
            return Err(FedGpError::shape(format!(
                "parameter layout has {} entries but the box has {}",
                params.len(),
                self.len()
            )));
        }
        Ok(())
    }

    pub fn contains(&self, params: &GPParams) -> bool {
        params.len() == self.len()
            && params
                .to_vec()
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| lo <= v && v <= hi)
    }

    /// Euclidean projection onto the box (componentwise clamp).
    pub fn project(&self, params: &GPParams) -> Result<GPParams> {
        self.check_layout(params)?;
        let mut out = params.clone();
        for i in 0..self.len() {
            out.set(i, params.get(i).clamp(self.lower[i], self.upper[i]));
        }
        Ok(out)
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> GPParams {
        let values: Vec<f64> = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| rng.random_range(*lo..*hi))
            .collect();
        GPParams::new(values[0], values[1], values[2..].to_vec())
    }
}

#[inline]
fn scaled_sq_dist(mode: LengthscaleMode, lengthscales: &[f64], x1: &[f64], x2: &[f64]) -> f64 {
    match mode {
        LengthscaleMode::Isotropic => {
            let l = lengthscales[0];
            x1.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (l * l)
        }
        LengthscaleMode::Ard => x1
            .iter()
            .zip(x2)
            .zip(lengthscales)
            .map(|((a, b), l)| {
                let z = (a - b) / l;
                z * z
            })
            .sum(),
    }
}

/// Unit correlation as a function of the squared scaled distance.
#[inline]
fn correlation(family: KernelFamily, r2: f64) -> f64 {
    match family {
        KernelFamily::Rbf => (-0.5 * r2).exp(),
        KernelFamily::Matern12 => (-r2.sqrt()).exp(),
        KernelFamily::Matern32 => {
            let s = SQRT3 * r2.sqrt();
            (1.0 + s) * (-s).exp()
        }
        KernelFamily::Matern52 => {
            let r = r2.sqrt();
            let s = SQRT5 * r;
            (1.0 + s + 5.0 * r2 / 3.0) * (-s).exp()
        }
    }
}

/// `h(r) = -k'(r) / r`, so that `dk/dl_j = h(r) * (x1_j - x2_j)^2 / l_j^3`.
#[inline]
fn lengthscale_factor(family: KernelFamily, r2: f64) -> f64 {
    match family {
        KernelFamily::Rbf => (-0.5 * r2).exp(),
        KernelFamily::Matern12 => {
            if r2 > 0.0 {
                let r = r2.sqrt();
                (-r).exp() / r
            } else {
                // every coordinate difference is zero, so the product vanishes
                0.0
            }
        }
        KernelFamily::Matern32 => 3.0 * (-SQRT3 * r2.sqrt()).exp(),
        KernelFamily::Matern52 => {
            let s = SQRT5 * r2.sqrt();
            (5.0 / 3.0) * (1.0 + s) * (-s).exp()
        }
    }
}

#[inline]
pub(crate) fn corr_unchecked(spec: &KernelSpec, lengthscales: &[f64], x1: &[f64], x2: &[f64]) -> f64 {
    correlation(
        spec.family,
        scaled_sq_dist(spec.lengthscale_mode, lengthscales, x1, x2),
    )
}

/// Correlation plus its derivative with respect to every length-scale,
/// written into `dl` (length `lengthscales.len()`).
#[inline]
pub(crate) fn corr_and_lengthscale_grad(
    spec: &KernelSpec,
    lengthscales: &[f64],
    x1: &[f64],
    x2: &[f64],
    dl: &mut [f64],
) -> f64 {
    let r2 = scaled_sq_dist(spec.lengthscale_mode, lengthscales, x1, x2);
    let h = lengthscale_factor(spec.family, r2);
    match spec.lengthscale_mode {
        LengthscaleMode::Isotropic => {
            let l = lengthscales[0];
            // sum_j d_j^2 / l^3 = r2 / l
            dl[0] = h * r2 / l;
        }
        LengthscaleMode::Ard => {
            for (j, slot) in dl.iter_mut().enumerate() {
                let l = lengthscales[j];
                let d = x1[j] - x2[j];
                *slot = h * d * d / (l * l * l);
            }
        }
    }
    correlation(spec.family, r2)
}

/// Unit-amplitude, noise-free correlation `k_f(x1, x2)`.
pub fn base_kernel(spec: &KernelSpec, lengthscales: &[f64], x1: &[f64], x2: &[f64]) -> Result<f64> {
    if x1.len() != x2.len() {
        return Err(FedGpError::shape(format!(
            "kernel inputs have dimensions {} and {}",
            x1.len(),
            x2.len()
        )));
    }
    spec.check_lengthscales(lengthscales, x1.len())?;
    Ok(corr_unchecked(spec, lengthscales, x1, x2))
}

pub(crate) fn check_params(spec: &KernelSpec, params: &GPParams, dim: usize) -> Result<()> {
    spec.check_lengthscales(&params.lengthscales, dim)?;
    params.validate()
}

fn same_matrix(x1: &ArrayView2<f64>, x2: &ArrayView2<f64>) -> bool {
    x1.shape() == x2.shape() && (x1.as_ptr() == x2.as_ptr() || x1 == x2)
}

/// Covariance `theta1^2 * K_f(X1, X2)`, plus `theta2^2` on the diagonal when
/// `add_noise` is set and `X1` and `X2` are the same matrix.
pub fn cov_matrix(
    spec: &KernelSpec,
    params: &GPParams,
    x1: ArrayView2<f64>,
    x2: ArrayView2<f64>,
    add_noise: bool,
) -> Result<Array2<f64>> {
    if x1.ncols() != x2.ncols() {
        return Err(FedGpError::shape(format!(
            "covariance inputs have {} and {} columns",
            x1.ncols(),
            x2.ncols()
        )));
    }
    check_params(spec, params, x1.ncols())?;
    if same_matrix(&x1, &x2) {
        Ok(train_cov_unchecked(spec, params, x1, add_noise))
    } else {
        Ok(cross_cov_unchecked(spec, params, x1, x2))
    }
}

pub(crate) fn cross_cov_unchecked(
    spec: &KernelSpec,
    params: &GPParams,
    x1: ArrayView2<f64>,
    x2: ArrayView2<f64>,
) -> Array2<f64> {
    let amp = params.theta1 * params.theta1;
    let ls = &params.lengthscales;
    let rows2: Vec<_> = x2.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut out = Array2::zeros((x1.nrows(), x2.nrows()));
    for (i, a) in x1.rows().into_iter().enumerate() {
        let a = a.to_vec();
        for (j, b) in rows2.iter().enumerate() {
            out[(i, j)] = amp * corr_unchecked(spec, ls, &a, b);
        }
    }
    out
}

/// Symmetric training covariance; fills one triangle and mirrors it.
pub(crate) fn train_cov_unchecked(
    spec: &KernelSpec,
    params: &GPParams,
    x: ArrayView2<f64>,
    add_noise: bool,
) -> Array2<f64> {
    let n = x.nrows();
    let amp = params.theta1 * params.theta1;
    let ls = &params.lengthscales;
    let rows: Vec<_> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        out[(i, i)] = amp;
        for j in 0..i {
            let v = amp * corr_unchecked(spec, ls, &rows[i], &rows[j]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    if add_noise {
        let noise = params.theta2 * params.theta2;
        out.diag_mut().mapv_inplace(|v| v + noise);
    }
    out
}

/// Derivatives of the noise-augmented training covariance with respect to
/// every parameter, in `GPParams` layout order: `dK/dtheta1 = 2 theta1 K_f`,
/// `dK/dtheta2 = 2 theta2 I`, then `dK/dl_j` for each length-scale.
pub fn cov_grads(spec: &KernelSpec, params: &GPParams, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
    check_params(spec, params, x.ncols())?;
    let n = x.nrows();
    let m = params.lengthscales.len();
    let amp = params.theta1 * params.theta1;
    let rows: Vec<_> = x.rows().into_iter().map(|r| r.to_vec()).collect();

    let mut d_theta1 = Array2::zeros((n, n));
    let d_theta2 = Array2::from_diag_elem(n, 2.0 * params.theta2);
    let mut d_ls = vec![Array2::zeros((n, n)); m];
    let mut dl = vec![0.0; m];
    for i in 0..n {
        d_theta1[(i, i)] = 2.0 * params.theta1;
        for j in 0..i {
            let k = corr_and_lengthscale_grad(spec, &params.lengthscales, &rows[i], &rows[j], &mut dl);
            let v = 2.0 * params.theta1 * k;
            d_theta1[(i, j)] = v;
            d_theta1[(j, i)] = v;
            for (mat, g) in d_ls.iter_mut().zip(&dl) {
                mat[(i, j)] = amp * g;
                mat[(j, i)] = amp * g;
            }
        }
    }
    let mut out = Vec::with_capacity(2 + m);
    out.push(d_theta1);
    out.push(d_theta2);
    out.extend(d_ls);
    Ok(out)
}
