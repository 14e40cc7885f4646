use ndarray::{Array2, Array3, ArrayView2};

use super::CovarianceMode;
use crate::{Error, Result};

/// Per-cluster spread summaries, one entry per centroid.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariances<T> {
    None,
    /// `K × d` variances.
    Diagonal(Array2<T>),
    /// `K × d × d` symmetric matrices.
    Full(Array3<T>),
}

impl<T> Covariances<T> {
    pub fn mode(&self) -> CovarianceMode {
        match self {
            Covariances::None => CovarianceMode::None,
            Covariances::Diagonal(_) => CovarianceMode::Diagonal,
            Covariances::Full(_) => CovarianceMode::Full,
        }
    }
}

impl Covariances<f64> {
    pub fn to_f32(&self) -> Covariances<f32> {
        match self {
            Covariances::None => Covariances::None,
            Covariances::Diagonal(v) => Covariances::Diagonal(v.mapv(|x| x as f32)),
            Covariances::Full(m) => Covariances::Full(m.mapv(|x| x as f32)),
        }
    }
}

impl Covariances<f32> {
    pub fn to_f64(&self) -> Covariances<f64> {
        match self {
            Covariances::None => Covariances::None,
            Covariances::Diagonal(v) => Covariances::Diagonal(v.mapv(f64::from)),
            Covariances::Full(m) => Covariances::Full(m.mapv(f64::from)),
        }
    }
}

/// Population (1/m) covariance of each cluster about its centroid.
/// Singleton clusters get zero covariance.
pub fn compute_cluster_covariance(
    features: ArrayView2<'_, f64>,
    assignments: &[usize],
    centroids: ArrayView2<'_, f64>,
    mode: CovarianceMode,
) -> Result<Covariances<f64>> {
    let (k, d) = centroids.dim();
    if features.ncols() != d {
        return Err(Error::DimMismatch {
            expected: d,
            actual: features.ncols(),
        });
    }
    if assignments.len() != features.nrows() {
        return Err(Error::config(format!(
            "{} assignments for {} rows",
            assignments.len(),
            features.nrows()
        )));
    }
    let mut counts = vec![0usize; k];
    for &a in assignments {
        *counts.get_mut(a).ok_or(Error::EmptyCluster(a))? += 1;
    }
    if let Some(empty) = counts.iter().position(|&m| m == 0) {
        return Err(Error::EmptyCluster(empty));
    }

    let mut diff = vec![0.0; d];
    match mode {
        CovarianceMode::None => Ok(Covariances::None),
        CovarianceMode::Diagonal => {
            let mut var = Array2::<f64>::zeros((k, d));
            for (row, &a) in features.outer_iter().zip(assignments) {
                for j in 0..d {
                    let t = row[j] - centroids[[a, j]];
                    var[[a, j]] += t * t;
                }
            }
            for (a, &m) in counts.iter().enumerate() {
                var.row_mut(a).mapv_inplace(|v| v / m as f64);
            }
            Ok(Covariances::Diagonal(var))
        }
        CovarianceMode::Full => {
            let mut cov = Array3::<f64>::zeros((k, d, d));
            for (row, &a) in features.outer_iter().zip(assignments) {
                for j in 0..d {
                    diff[j] = row[j] - centroids[[a, j]];
                }
                let mut m = cov.index_axis_mut(ndarray::Axis(0), a);
                for i in 0..d {
                    let di = diff[i];
                    for j in i..d {
                        m[[i, j]] += di * diff[j];
                    }
                }
            }
            for (a, &m) in counts.iter().enumerate() {
                let mut c = cov.index_axis_mut(ndarray::Axis(0), a);
                for i in 0..d {
                    for j in i..d {
                        let v = c[[i, j]] / m as f64;
                        c[[i, j]] = v;
                        c[[j, i]] = v;
                    }
                }
            }
            Ok(Covariances::Full(cov))
        }
    }
}
