use super::MetricError;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Eigenvalues above `-NEG_CLAMP` but below zero are treated as zero.
pub const NEG_CLAMP: f64 = 1e-10;
pub const REGULARIZATION: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidValue {
    pub value: f64,
    /// Set when either set had fewer than `dim + 1` samples and its
    /// covariance was regularized.
    pub regularized: bool,
}

/// Mean and unbiased covariance. Sets with fewer than `dim + 1` samples get
/// `REGULARIZATION · I` added to the covariance.
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<(Gaussian, bool), MetricError> {
    let n = features.len();
    let Some(first) = features.first() else {
        return Err(MetricError::EmptyFeatures);
    };
    let dim = first.len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(MetricError::FeatureDim);
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite("features".into()));
    }
    let mut mean = DVector::zeros(dim);
    for f in features {
        mean += DVector::from_column_slice(f);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    if n > 1 {
        for f in features {
            let d = DVector::from_column_slice(f) - &mean;
            cov.syger(1.0, &d, &d, 1.0);
        }
        cov /= (n - 1) as f64;
        cov.fill_upper_triangle_with_lower_triangle();
    }
    let regularized = n < dim + 1;
    if regularized {
        for i in 0..dim {
            cov[(i, i)] += REGULARIZATION;
        }
    }
    Ok((Gaussian { mean, cov }, regularized))
}

fn clamped_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, MetricError> {
    let sym = (m + m.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    for l in e.eigenvalues.iter_mut() {
        if *l < 0.0 {
            if *l < -NEG_CLAMP {
                return Err(MetricError::NonPsd(*l));
            }
            *l = 0.0;
        }
    }
    Ok(e)
}

fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricError> {
    let e = clamped_eigen(m)?;
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians. `Tr((Σ₁Σ₂)^{1/2})` is taken from
/// the eigenvalues of the symmetric `Σ₁^{1/2} Σ₂ Σ₁^{1/2}`.
pub fn frechet_distance(a: &Gaussian, b: &Gaussian) -> Result<f64, MetricError> {
    if a.mean.len() != b.mean.len() || a.cov.nrows() != a.mean.len() || b.cov.nrows() != b.mean.len() {
        return Err(MetricError::FeatureDim);
    }
    let s1 = sqrt_psd(&a.cov)?;
    let inner = &s1 * &b.cov * &s1;
    let tr_sqrt: f64 = clamped_eigen(&inner)?.eigenvalues.iter().map(|l| l.sqrt()).sum();
    let diff = (&a.mean - &b.mean).norm_squared();
    let v = diff + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    if !v.is_finite() {
        return Err(MetricError::NonFinite("frechet distance".into()));
    }
    Ok(v.max(0.0))
}

pub fn fid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<FidValue, MetricError> {
    let (ga, ra) = fit_gaussian(features_a)?;
    let (gb, rb) = fit_gaussian(features_b)?;
    Ok(FidValue {
        value: frechet_distance(&ga, &gb)?,
        regularized: ra || rb,
    })
}
