use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::cholesky;
use crate::rng;
use crate::Result;

/// Spread of one key cluster.
#[derive(Debug, Clone, Copy)]
pub enum ClusterCov<'a> {
    /// Per-dimension variances.
    Diagonal(ArrayView1<'a, f64>),
    Full(ArrayView2<'a, f64>),
}

/// Ridge added to a full covariance before factorization:
/// `1e-6 · trace / d`, or `1e-12` for a zero-trace matrix.
pub fn ridge(cov: ArrayView2<'_, f64>) -> f64 {
    let d = cov.nrows().max(1) as f64;
    let trace: f64 = cov.diag().sum();
    if trace > 0.0 {
        1e-6 * trace / d
    } else {
        1e-12
    }
}

/// Draws zero-mean Gaussian vectors with a fixed covariance.
#[derive(Debug, Clone)]
pub enum GaussianSampler {
    /// Standard deviations.
    Diagonal(Array1<f64>),
    /// Lower Cholesky factor of `Σ + εI`.
    Full(Array2<f64>),
}

impl GaussianSampler {
    pub fn new(cov: ClusterCov<'_>) -> Result<Self> {
        Ok(match cov {
            ClusterCov::Diagonal(var) => GaussianSampler::Diagonal(var.mapv(|v| v.max(0.0).sqrt())),
            ClusterCov::Full(sigma) => {
                let mut a = sigma.to_owned();
                let eps = ridge(sigma);
                a.diag_mut().mapv_inplace(|v| v + eps);
                GaussianSampler::Full(cholesky(a.view())?)
            }
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            GaussianSampler::Diagonal(s) => s.len(),
            GaussianSampler::Full(l) => l.nrows(),
        }
    }

    pub fn sample(&self, rng: &mut rng::Rng) -> Array1<f64> {
        let u: Array1<f64> = Array1::from_shape_fn(self.dim(), |_| rng.sample(StandardNormal));
        match self {
            GaussianSampler::Diagonal(s) => s * &u,
            GaussianSampler::Full(l) => {
                // L is lower triangular.
                Array1::from_shape_fn(l.nrows(), |i| (0..=i).map(|j| l[[i, j]] * u[j]).sum())
            }
        }
    }
}

/// One draw `δ ~ N(0, Σ)`.
pub fn sample_gaussian_from_cov(cov: ClusterCov<'_>, rng: &mut rng::Rng) -> Result<Array1<f64>> {
    Ok(GaussianSampler::new(cov)?.sample(rng))
}
