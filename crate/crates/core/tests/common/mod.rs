#![allow(dead_code)]

use fedgp::{Dataset, GPParams, KernelFamily, KernelSpec, LengthscaleMode};
use ndarray::{Array1, Array2};
use rand::Rng;

pub const FAMILIES: [KernelFamily; 4] = [
    KernelFamily::Rbf,
    KernelFamily::Matern12,
    KernelFamily::Matern32,
    KernelFamily::Matern52,
];

pub fn random_inputs<R: Rng>(n: usize, d: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random::<f64>())
}

pub fn random_params<R: Rng>(spec: &KernelSpec, d: usize, rng: &mut R) -> GPParams {
    let m = spec.n_lengthscales(d);
    GPParams::new(
        rng.random_range(0.5..2.0),
        rng.random_range(0.2..1.0),
        (0..m).map(|_| rng.random_range(0.3..1.5)).collect(),
    )
}

pub fn random_dataset<R: Rng>(n: usize, d: usize, rng: &mut R) -> Dataset {
    let x = random_inputs(n, d, rng);
    let y = Array1::from_shape_fn(n, |_| rng.random_range(-2.0..2.0));
    Dataset::new(x, y).unwrap()
}

pub fn random_spec<R: Rng>(rng: &mut R) -> KernelSpec {
    let family = FAMILIES[rng.random_range(0..4)];
    let mode = if rng.random::<bool>() {
        LengthscaleMode::Ard
    } else {
        LengthscaleMode::Isotropic
    };
    KernelSpec::new(family, mode)
}

/// Gaussian elimination with partial pivoting: returns (A^{-1} b, log|det A|).
pub fn gauss_solve_logdet(a: &Array2<f64>, b: &Array1<f64>) -> (Array1<f64>, f64) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = b.clone();
    let mut logdet = 0.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[[i, col]].abs().total_cmp(&m[[j, col]].abs()))
            .unwrap();
        if piv != col {
            for k in 0..n {
                m.swap([col, k], [piv, k]);
            }
            v.swap(col, piv);
        }
        let p = m[[col, col]];
        logdet += p.abs().ln();
        for row in col + 1..n {
            let f = m[[row, col]] / p;
            for k in col..n {
                m[[row, k]] -= f * m[[col, k]];
            }
            v[row] -= f * v[col];
        }
    }
    let mut x = Array1::zeros(n);
    for row in (0..n).rev() {
        let mut s = v[row];
        for k in row + 1..n {
            s -= m[[row, k]] * x[k];
        }
        x[row] = s / m[[row, row]];
    }
    (x, logdet)
}

/// Central difference of `f` along component `i` of `params`.
pub fn central_diff<F: Fn(&GPParams) -> f64>(f: F, params: &GPParams, i: usize) -> f64 {
    let h = 1e-5 * params.get(i).abs().max(1.0);
    let mut hi = params.clone();
    let mut lo = params.clone();
    hi.set(i, params.get(i) + h);
    lo.set(i, params.get(i) - h);
    (f(&hi) - f(&lo)) / (2.0 * h)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
