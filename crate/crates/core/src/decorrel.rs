//! Token-level covariance of combination embeddings and the
//! decorrelation penalty built on it.
//!
//! Covariance is taken between token rows across the feature columns:
//! `Cov(Z) = 1/(d-1) * sum_j (z_:,j - zbar)(z_:,j - zbar)^T`, so a matrix
//! with `n` tokens yields an `n x n` covariance.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Scalar;

/// How the per-token centre `zbar` is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    /// `zbar = (1/d) sum_j z_:,j`
    #[default]
    Mean,
    /// `zbar = sum_j z_:,j` with no `1/d` factor, kept for comparison runs.
    LiteralSum,
}

impl Centering {
    fn factor<T: Scalar>(self, d: usize) -> T {
        match self {
            Centering::Mean => T::one() / T::lit(d as f64),
            Centering::LiteralSum => T::one(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix<T>(pub Array2<T>);

impl<T: Scalar> CovMatrix<T> {
    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.0[[i, j]]
    }
}

fn centered<T: Scalar>(z: ArrayView2<T>, centering: Centering) -> Result<Array2<T>> {
    let (n, d) = z.dim();
    if n == 0 {
        return Err(Error::Empty("token matrix"));
    }
    if d < 2 {
        return Err(Error::OutOfRange(format!("covariance needs at least 2 feature columns, got {d}")));
    }
    let f: T = centering.factor(d);
    let centre = z.sum_axis(Axis(1)).mapv(|s| s * f).insert_axis(Axis(1));
    Ok(&z - &centre)
}

pub fn token_covariance<T: Scalar>(z: ArrayView2<T>) -> Result<CovMatrix<T>> {
    token_covariance_with(z, Centering::Mean)
}

pub fn token_covariance_with<T: Scalar>(z: ArrayView2<T>, centering: Centering) -> Result<CovMatrix<T>> {
    let zc = centered(z, centering)?;
    let d = T::lit((z.ncols() - 1) as f64);
    Ok(CovMatrix(zc.dot(&zc.t()).mapv(|v| v / d)))
}

/// `C = 1/(n-1)^2 * sum_{i != j} Cov_ij^2`; zero when fewer than two tokens.
pub fn comb_regularizer<T: Scalar>(cov: &CovMatrix<T>, n_comb: usize) -> T {
    if n_comb < 2 {
        return T::zero();
    }
    let n = cov.n();
    let mut total = T::zero();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total = total + cov.0[[i, j]] * cov.0[[i, j]];
            }
        }
    }
    let s = T::lit((n_comb - 1) as f64);
    total / (s * s)
}

/// Mean of the per-sample penalties over a mini-batch.
pub fn cov_loss<T: Scalar>(values: &[T]) -> Result<T> {
    if values.is_empty() {
        return Err(Error::Empty("covariance loss batch"));
    }
    let sum = values.iter().fold(T::zero(), |a, &v| a + v);
    Ok(sum / T::lit(values.len() as f64))
}

/// Penalty of the rows of `z` together with its gradient with respect to `z`.
pub fn regularizer_with_grad<T: Scalar>(z: ArrayView2<T>, centering: Centering) -> Result<(T, Array2<T>)> {
    let (n, d) = z.dim();
    if n < 2 {
        // still validate shape for the single-token case
        centered(z, centering)?;
        return Ok((T::zero(), Array2::zeros((n, d))));
    }
    let zc = centered(z, centering)?;
    let dm1 = T::lit((d - 1) as f64);
    let cov = zc.dot(&zc.t()).mapv(|v| v / dm1);
    let cm = CovMatrix(cov);
    let value = comb_regularizer(&cm, n);
    let s = T::lit((n - 1) as f64);
    let scale = T::lit(2.0) / (s * s);
    // dC/dCov is symmetric with a zero diagonal
    let mut g_cov = cm.0.mapv(|v| v * scale);
    for i in 0..n {
        g_cov[[i, i]] = T::zero();
    }
    // Cov = Zc Zc^T / (d-1)  =>  dZc = (G + G^T) Zc / (d-1) = 2 G Zc / (d-1)
    let g_zc = g_cov.dot(&zc).mapv(|v| v * T::lit(2.0) / dm1);
    // Zc = Z - f * rowsum(Z) 1^T  =>  dZ = dZc - f * rowsum(dZc) 1^T
    let f: T = centering.factor(d);
    let row_sums = g_zc.sum_axis(Axis(1)).mapv(|v| v * f).insert_axis(Axis(1));
    Ok((value, &g_zc - &row_sums))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn constant_rows_have_zero_covariance() {
        let z: Array2<f64> = array![[2.0, 2.0, 2.0], [-1.0, -1.0, -1.0], [0.5, 0.5, 0.5]];
        let cov = token_covariance(z.view()).unwrap();
        assert!(cov.0.iter().all(|v| v.abs() < 1e-15));
        assert_eq!(comb_regularizer(&cov, 3), 0.0);
    }

    #[test]
    fn hand_case() {
        let z = array![[1.0, 2.0], [3.0, 4.0]];
        let cov = token_covariance(z.view()).unwrap();
        assert_eq!(cov.0, array![[0.5, 0.5], [0.5, 0.5]]);
        assert_eq!(comb_regularizer(&cov, 2), 0.5);
    }

    #[test]
    fn regulariser_edge_cases() {
        let zero = CovMatrix(Array2::<f64>::zeros((3, 3)));
        assert_eq!(comb_regularizer(&zero, 3), 0.0);
        let diag = CovMatrix(array![[1.0, 0.0], [0.0, 4.0]]);
        assert_eq!(comb_regularizer(&diag, 2), 0.0);
        let single = CovMatrix(array![[3.0]]);
        assert_eq!(comb_regularizer(&single, 1), 0.0);
    }

    #[test]
    fn narrow_input_is_rejected() {
        let z = array![[1.0], [2.0]];
        assert!(token_covariance(z.view()).is_err());
        assert!(regularizer_with_grad(z.view(), Centering::Mean).is_err());
    }

    #[test]
    fn loss_is_batch_mean() {
        assert_eq!(cov_loss(&[0.5, 0.5]).unwrap(), 0.5);
        assert_eq!(cov_loss(&[0.0]).unwrap(), 0.0);
        assert!(cov_loss::<f64>(&[]).is_err());
    }

    #[test]
    fn literal_centering_does_not_vanish_on_constant_rows() {
        let z: Array2<f64> = array![[1.0, 1.0, 1.0], [2.0, 2.0, 2.0]];
        let cov = token_covariance_with(z.view(), Centering::LiteralSum).unwrap();
        assert!(cov.0[[0, 1]].abs() > 1.0);
    }
}
