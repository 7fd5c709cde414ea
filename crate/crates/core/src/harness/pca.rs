//! Principal components by power iteration with deflation.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

pub const PCA_TOL: f64 = 1e-9;
const MAX_POWER_ITERS: usize = 100_000;
/// Eigenvalues below this fraction of the total variance count as zero.
const RANK_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct PcaProjection {
    /// `n × dims` scores of the centered features.
    pub projected: DenseTensor,
    /// Unit principal directions; zero vectors where the rank ran out.
    pub components: Vec<Array1<f64>>,
    pub variances: Vec<f64>,
    pub diagnostics: Vec<String>,
}

/// Projects the rows of an `n × d` matrix onto its top `dims` principal
/// directions. Each direction's largest-magnitude entry is made positive.
pub fn pca_project(features: &DenseTensor, dims: usize) -> Result<PcaProjection> {
    let x = features.as_matrix()?;
    let (n, d) = x.dim();
    if n < 2 {
        return Err(Error::InvalidValue(format!("pca needs at least 2 rows, got {n}")));
    }
    if dims == 0 {
        return Err(Error::InvalidValue("pca dims must be at least 1".into()));
    }
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &x - &mean;
    let mut cov = centered.t().dot(&centered) / n as f64;
    let total: f64 = cov.diag().sum();

    let mut components: Vec<Array1<f64>> = Vec::with_capacity(dims);
    let mut variances = Vec::with_capacity(dims);
    let mut diagnostics = Vec::new();
    for k in 0..dims {
        let found = if k < d {
            leading_eigenpair(&cov, &components)
        } else {
            None
        };
        match found {
            Some((lambda, v, converged)) if lambda > RANK_EPS * total.max(f64::MIN_POSITIVE) => {
                if !converged {
                    diagnostics.push(format!(
                        "component {k}: power iteration hit {MAX_POWER_ITERS} iterations"
                    ));
                }
                deflate(&mut cov, lambda, &v);
                components.push(v);
                variances.push(lambda);
            }
            _ => {
                diagnostics.push(format!("component {k}: rank exhausted, zero-filled"));
                components.push(Array1::zeros(d));
                variances.push(0.0);
            }
        }
    }

    let mut projected = Array2::zeros((n, dims));
    for (k, v) in components.iter().enumerate() {
        projected.column_mut(k).assign(&centered.dot(v));
    }
    Ok(PcaProjection {
        projected: DenseTensor::from_array2(projected)?,
        components,
        variances,
        diagnostics,
    })
}

fn leading_eigenpair(cov: &Array2<f64>, previous: &[Array1<f64>]) -> Option<(f64, Array1<f64>, bool)> {
    // Start from the heaviest row: it has a nonzero projection on the top
    // eigenvector whenever the matrix is nonzero.
    let start = cov
        .rows()
        .into_iter()
        .max_by(|a, b| a.dot(a).total_cmp(&b.dot(b)))?
        .to_owned();
    let mut v = orthonormalize(start, previous)?;
    let mut converged = false;
    for _ in 0..MAX_POWER_ITERS {
        let mut next = orthonormalize(cov.dot(&v), previous)?;
        if next.dot(&v) < 0.0 {
            next.mapv_inplace(|x| -x);
        }
        let delta = (&next - &v).mapv(|x| x * x).sum().sqrt();
        v = next;
        if delta < PCA_TOL {
            converged = true;
            break;
        }
    }
    let lambda = v.dot(&cov.dot(&v));
    let pivot = v
        .iter()
        .copied()
        .fold(0.0, |m: f64, x| if x.abs() > m.abs() { x } else { m });
    if pivot < 0.0 {
        v.mapv_inplace(|x| -x);
    }
    Some((lambda, v, converged))
}

fn orthonormalize(mut v: Array1<f64>, previous: &[Array1<f64>]) -> Option<Array1<f64>> {
    for p in previous {
        let proj = v.dot(p);
        v.scaled_add(-proj, p);
    }
    let norm = v.dot(&v).sqrt();
    (norm > f64::MIN_POSITIVE.sqrt()).then(|| v / norm)
}

fn deflate(cov: &mut Array2<f64>, lambda: f64, v: &Array1<f64>) {
    let outer = v.view().insert_axis(Axis(1)).dot(&v.view().insert_axis(Axis(0)));
    cov.scaled_add(-lambda, &outer);
}
