//! Squared-exponential kernel and the zero-mean Gaussian log prior.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, jittered_cholesky, squared_distance};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub signal_variance: f64,
    pub lengthscale: f64,
}

impl KernelParams {
    pub fn new(signal_variance: f64, lengthscale: f64) -> Result<Self> {
        if !(signal_variance > 0.0 && lengthscale > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "kernel needs positive variance and lengthscale, got {signal_variance}, {lengthscale}"
            )));
        }
        Ok(Self { signal_variance, lengthscale })
    }

    pub fn from_logs(log_variance: f64, log_lengthscale: f64) -> Self {
        Self { signal_variance: log_variance.exp(), lengthscale: log_lengthscale.exp() }
    }

    pub fn log_variance(&self) -> f64 {
        self.signal_variance.ln()
    }

    pub fn log_lengthscale(&self) -> f64 {
        self.lengthscale.ln()
    }
}

pub fn se_kernel(a: &[f64], b: &[f64], params: &KernelParams) -> f64 {
    let r2 = squared_distance(a, b);
    params.signal_variance * (-0.5 * r2 / (params.lengthscale * params.lengthscale)).exp()
}

/// Gram matrix of the rows of `x` together with the matrix of squared
/// distances scaled by `1/l²` (the derivative of `K` with respect to
/// `log l` is `K ∘ that`).
pub fn gram(x: &DMatrix<f64>, params: &KernelParams) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let l2 = params.lengthscale * params.lengthscale;
    let mut k = DMatrix::zeros(n, n);
    let mut s = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.signal_variance;
        for j in (i + 1)..n {
            let r2 = (x.row(i) - x.row(j)).norm_squared() / l2;
            let v = params.signal_variance * (-0.5 * r2).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
            s[(i, j)] = r2;
            s[(j, i)] = r2;
        }
    }
    (k, s)
}

/// Cross-covariance vector between `x` and every row of `train`.
pub fn cross(train: &DMatrix<f64>, x: &[f64], params: &KernelParams) -> DVector<f64> {
    let l2 = params.lengthscale * params.lengthscale;
    DVector::from_fn(train.nrows(), |i, _| {
        let r2: f64 = train.row(i).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        params.signal_variance * (-0.5 * r2 / l2).exp()
    })
}

/// `log N(u; 0, gram)` and its gradient `-gram⁻¹ u`.
pub fn gp_log_prior(u: &DVector<f64>, gram: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    if u.len() != gram.nrows() {
        return Err(Error::InvalidParameter(format!(
            "utility length {} does not match gram size {}",
            u.len(),
            gram.nrows()
        )));
    }
    let (ch, _) = jittered_cholesky(gram)?;
    let alpha = ch.solve(u);
    let value = -0.5 * u.dot(&alpha) - 0.5 * chol_logdet(&ch) - 0.5 * u.len() as f64 * LN_2PI;
    Ok((value, -alpha))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        let p = KernelParams::new(2.5, 0.7).unwrap();
        assert_eq!(se_kernel(&[0.3, 0.1], &[0.3, 0.1], &p), 2.5);
        let q = KernelParams::new(1.0, 1.5).unwrap();
        let d = 1.5 * 2f64.sqrt();
        assert!((se_kernel(&[0.0], &[d], &q) - (-1f64).exp()).abs() < 1e-15);
        let far = KernelParams::new(1.3, 1e12).unwrap();
        assert!((se_kernel(&[0.0, 4.0], &[9.0, -2.0], &far) - 1.3).abs() < 1e-12);
    }

    #[test]
    fn log_prior_at_zero_and_unit() {
        let k = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let (v, g) = gp_log_prior(&DVector::zeros(2), &k).unwrap();
        let det: f64 = 2.0 - 0.25;
        // jitter 1e-6 perturbs the determinant in the 6th digit
        assert!((v - (-LN_2PI - 0.5 * det.ln())).abs() < 1e-6);
        assert_eq!(g.norm(), 0.0);
        let (v1, _) = gp_log_prior(&DVector::from_element(1, 1.0), &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!((v1 - (-0.5 * LN_2PI - 0.5)).abs() < 1e-6);
    }

    // Dense reference: explicit inverse and determinant of gram + 1e-6 I.
    #[test]
    fn log_prior_matches_dense_reference() {
        let x = DMatrix::from_row_slice(5, 2, &[0.1, 0.2, 0.9, 0.4, 0.5, 0.5, 0.3, 0.8, 0.7, 0.1]);
        let (k, _) = gram(&x, &KernelParams::new(1.7, 0.4).unwrap());
        let u = DVector::from_vec(vec![0.3, -1.2, 0.8, 0.05, -0.4]);
        let kj = &k + DMatrix::identity(5, 5) * 1e-6;
        let inv = kj.clone().try_inverse().unwrap();
        let reference = -0.5 * (u.transpose() * &inv * &u)[(0, 0)] - 0.5 * kj.determinant().ln() - 2.5 * LN_2PI;
        let (v, g) = gp_log_prior(&u, &k).unwrap();
        assert!((v - reference).abs() < 1e-10);
        assert!((g + inv * &u).norm() < 1e-8);
    }

    #[test]
    fn distance_matrix_is_scaled() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 2.0]);
        let (k, s) = gram(&x, &KernelParams::new(1.0, 2.0).unwrap());
        assert_eq!(s[(0, 1)], 1.0);
        assert!((k[(0, 1)] - (-0.5f64).exp()).abs() < 1e-15);
    }
}
