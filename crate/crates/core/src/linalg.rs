//! Cholesky factorization with a jitter ladder, and the solves built on it.

use ndarray::{Array1, Array2};
use ndarray_linalg::{CholeskyInto, Diag, SolveTriangular, UPLO};

use crate::error::{FedGpError, Result};

/// Relative size of the first jitter, as a fraction of the mean diagonal.
pub const JITTER_BASE: f64 = 1e-8;
/// Number of doublings after the first jittered attempt.
pub const JITTER_DOUBLINGS: u32 = 6;

/// Lower Cholesky factor `L` with `L L^T = A + jitter * I`.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    lower: Array2<f64>,
    jitter: f64,
}

impl CholeskyFactor {
    /// Factorizes `matrix`; on failure adds `1e-8 * mean(diag)` to the
    /// diagonal and retries, doubling the jitter up to six times.
    pub fn new(matrix: Array2<f64>) -> Result<Self> {
        Self::factorize(matrix, false)
    }

    /// Like [`CholeskyFactor::new`] but starts at the first jitter level.
    pub fn with_jitter(matrix: Array2<f64>) -> Result<Self> {
        Self::factorize(matrix, true)
    }

    fn factorize(matrix: Array2<f64>, jitter_first: bool) -> Result<Self> {
        let n = matrix.nrows();
        if n != matrix.ncols() {
            return Err(FedGpError::shape(format!(
                "cholesky needs a square matrix, got {}x{}",
                n,
                matrix.ncols()
            )));
        }
        if n == 0 {
            return Err(FedGpError::input("cholesky of an empty matrix"));
        }
        let mean_diag = matrix.diag().sum() / n as f64;
        let base = JITTER_BASE * mean_diag.abs().max(f64::MIN_POSITIVE);
        let mut attempted = Vec::new();

        if !jitter_first {
            if let Ok(lower) = matrix.clone().cholesky_into(UPLO::Lower) {
                return Ok(Self { lower, jitter: 0.0 });
            }
            attempted.push(0.0);
        }
        let mut jitter = base;
        for _ in 0..=JITTER_DOUBLINGS {
            let mut m = matrix.clone();
            m.diag_mut().mapv_inplace(|v| v + jitter);
            if let Ok(lower) = m.cholesky_into(UPLO::Lower) {
                return Ok(Self { lower, jitter });
            }
            attempted.push(jitter);
            jitter *= 2.0;
        }
        Err(FedGpError::NotPositiveDefinite { jitters: attempted })
    }

    pub fn lower(&self) -> &Array2<f64> {
        &self.lower
    }

    pub fn into_lower(self) -> Array2<f64> {
        self.lower
    }

    /// Jitter that was added to the diagonal (0 when none was needed).
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// `log |A|` of the (jittered) factorized matrix.
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diag().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Solves `L x = b`.
    pub fn solve_lower(&self, b: &Array1<f64>) -> Result<Array1<f64>> {
        self.lower
            .solve_triangular(UPLO::Lower, Diag::NonUnit, b)
            .map_err(lapack_err)
    }

    /// Solves `L X = B` for a matrix right-hand side.
    pub fn solve_lower_mat(&self, b: &Array2<f64>) -> Result<Array2<f64>> {
        self.lower
            .solve_triangular(UPLO::Lower, Diag::NonUnit, b)
            .map_err(lapack_err)
    }

    /// Solves `A x = b` with two triangular solves.
    pub fn solve(&self, b: &Array1<f64>) -> Result<Array1<f64>> {
        let z = self.solve_lower(b)?;
        self.lower
            .t()
            .to_owned()
            .solve_triangular(UPLO::Upper, Diag::NonUnit, &z)
            .map_err(lapack_err)
    }

    /// Explicit inverse `A^{-1} = L^{-T} L^{-1}`.
    pub fn inverse(&self) -> Result<Array2<f64>> {
        let linv = self.solve_lower_mat(&Array2::eye(self.dim()))?;
        Ok(linv.t().dot(&linv))
    }
}

fn lapack_err(e: ndarray_linalg::error::LinalgError) -> FedGpError {
    FedGpError::input(format!("triangular solve failed: {e}"))
}
