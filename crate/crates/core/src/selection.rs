//! Kernel scoring: Gaussian CRPS, leave-one-out predictives from a single
//! factorization, and the metrics used to pick the kernel for each round.

use std::cmp::Ordering;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use libm::erfc;
use thiserror::Error;

use crate::gp::{cholesky_with_jitter, spd_inverse, FittedGP, GpError, JITTER_LADDER};

/// Lower clamp on leave-one-out variances.
pub const LOO_VAR_FLOOR: f64 = 1e-12;
/// Above this input dimensionality the penalized metric is used by default.
pub const DEFAULT_DIM_THRESHOLD: usize = 1000;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SelectionError {
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("cannot select from an empty population")]
    EmptyPopulation,
    #[error("need at least {0} observations")]
    TooFewPoints(usize),
    #[error(transparent)]
    Gp(#[from] GpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    LooCrps,
    LooCrpsBic,
    /// Negative log marginal likelihood.
    Mll,
    Bic,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::LooCrps => "loo_crps",
            Metric::LooCrpsBic => "loo_crps_bic",
            Metric::Mll => "mll",
            Metric::Bic => "bic",
        }
    }

    /// The penalized CRPS variant replaces plain LOO-CRPS in very high
    /// dimension; other metrics are left alone.
    pub fn effective(self, dim: usize, dim_threshold: usize) -> Metric {
        if self == Metric::LooCrps && dim > dim_threshold {
            Metric::LooCrpsBic
        } else {
            self
        }
    }
}

/// Lower is better for every metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub metric: Metric,
    pub value: f64,
    pub digest: String,
    pub n: usize,
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

pub(crate) fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// CRPS of `N(mu, sigma^2)` against observation `y`.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> Result<f64, SelectionError> {
    if !(sigma > 0.0) {
        return Err(SelectionError::NonPositiveSigma(sigma));
    }
    let z = (y - mu) / sigma;
    let v = sigma * (z * (2.0 * std_normal_cdf(z) - 1.0) + 2.0 * std_normal_pdf(z) - 1.0 / PI.sqrt());
    Ok(v.max(0.0))
}

/// Leave-one-out means and variances via `mu_i = y_i - [K^-1 y]_i / [K^-1]_ii`
/// and `var_i = 1 / [K^-1]_ii`.
pub fn loo_predictives(k: &DMatrix<f64>, y: &DVector<f64>) -> Result<(Vec<f64>, Vec<f64>), SelectionError> {
    let (chol, _) = cholesky_with_jitter(k, JITTER_LADDER.len())?;
    let kinv = spd_inverse(&chol);
    let a = chol.solve(y);
    let mut mu = Vec::with_capacity(y.len());
    let mut var = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let d = kinv[(i, i)];
        mu.push(y[i] - a[i] / d);
        var.push((1.0 / d).max(LOO_VAR_FLOOR));
    }
    Ok((mu, var))
}

pub fn loo_crps(k: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64, SelectionError> {
    let (mu, var) = loo_predictives(k, y)?;
    let mut total = 0.0;
    for i in 0..y.len() {
        total += crps_gaussian(mu[i], var[i].sqrt(), y[i])?;
    }
    Ok(total / y.len() as f64)
}

/// `|theta| log(n) / n`.
pub fn bic_penalty(n_params: usize, n: usize) -> f64 {
    n_params as f64 * (n as f64).ln() / n as f64
}

pub fn loo_crps_bic(k: &DMatrix<f64>, y: &DVector<f64>, n_params: usize) -> Result<f64, SelectionError> {
    if y.len() < 2 {
        return Err(SelectionError::TooFewPoints(2));
    }
    Ok(loo_crps(k, y)? + bic_penalty(n_params, y.len()))
}

/// Scores a fitted GP on its own training data (standardized targets,
/// covariance including fitted noise). `|theta|` counts kernel
/// hyperparameters only.
pub fn score_fitted(gp: &FittedGP, metric: Metric) -> Result<Score, SelectionError> {
    let n = gp.train_y().len();
    let value = match metric {
        Metric::LooCrps => loo_crps(&gp.train_cov()?, gp.train_y())?,
        Metric::LooCrpsBic => loo_crps_bic(&gp.train_cov()?, gp.train_y(), gp.n_params())?,
        Metric::Mll => -gp.mll,
        Metric::Bic => -2.0 * gp.mll + gp.n_params() as f64 * (n as f64).ln(),
    };
    Ok(Score {
        metric,
        value,
        digest: gp.expr().digest(),
        n,
    })
}

/// One entry considered by [`select_best`].
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate<'a> {
    pub digest: &'a str,
    /// Smaller means inserted earlier.
    pub insertion: u64,
    pub score: Option<f64>,
}

/// Index of the lowest score; ties go to the earlier insertion, then to
/// the lexicographically smaller digest. Unscored entries never win while
/// a scored one exists.
pub fn select_best(candidates: &[Candidate]) -> Result<usize, SelectionError> {
    if candidates.is_empty() {
        return Err(SelectionError::EmptyPopulation);
    }
    let mut best = 0;
    for i in 1..candidates.len() {
        if rank(&candidates[i], &candidates[best]) == Ordering::Less {
            best = i;
        }
    }
    Ok(best)
}

/// Total order used by selection and truncation.
pub fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    let key = |c: &Candidate| c.score.filter(|v| v.is_finite());
    match (key(a), key(b)) {
        (Some(x), Some(y)) => x.partial_cmp(&y).unwrap_or(Ordering::Equal),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
    .then(a.insertion.cmp(&b.insertion))
    .then(a.digest.cmp(b.digest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crps_reference_values() {
        // 2 phi(0) - 1/sqrt(pi), checked against quadrature in the
        // integration tests.
        let v = crps_gaussian(0.0, 1.0, 0.0).unwrap();
        assert!((v - 0.233_694_977_255_109_07).abs() < 1e-12);
        let a = 3.0;
        let base = crps_gaussian(0.4, 0.7, -0.2).unwrap();
        assert!((crps_gaussian(a * 0.4, a * 0.7, -a * 0.2).unwrap() - a * base).abs() < 1e-12);
        assert!((crps_gaussian(0.0, 1e-9, 1.0).unwrap() - 1.0).abs() < 1e-6);
        assert!(crps_gaussian(0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn pure_noise_loo() {
        let c = 2.5;
        let k = DMatrix::identity(4, 4) * c;
        let y = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.1]);
        let (mu, var) = loo_predictives(&k, &y).unwrap();
        for i in 0..4 {
            assert!(mu[i].abs() < 1e-15);
            assert!((var[i] - c).abs() < 1e-12);
        }
    }

    #[test]
    fn two_by_two_loo() {
        // Conditional of y1 on y2 under [[1, .5], [.5, 1]]: mean .5 y2,
        // variance 1 - .25.
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let (mu, var) = loo_predictives(&k, &y).unwrap();
        assert!(mu[0].abs() < 1e-15);
        assert!((mu[1] - 0.5).abs() < 1e-15);
        assert!((var[0] - 0.75).abs() < 1e-15 && (var[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn identity_loo_crps() {
        let v = loo_crps(&DMatrix::identity(5, 5), &DVector::zeros(5)).unwrap();
        assert!((v - crps_gaussian(0.0, 1.0, 0.0).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn bic_penalty_values() {
        assert!((bic_penalty(3, 100) - 0.138_155_105_579_642_74).abs() < 1e-12);
        let k = DMatrix::identity(5, 5);
        let y = DVector::from_vec(vec![0.1, 0.2, -0.3, 0.0, 1.0]);
        assert_eq!(loo_crps_bic(&k, &y, 0).unwrap(), loo_crps(&k, &y).unwrap());
        let mut prev = f64::NEG_INFINITY;
        for p in 0..10 {
            let v = loo_crps_bic(&k, &y, p).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn tie_breaking() {
        let c = [
            Candidate { digest: "b", insertion: 0, score: Some(1.0) },
            Candidate { digest: "a", insertion: 1, score: Some(1.0) },
            Candidate { digest: "c", insertion: 2, score: None },
        ];
        assert_eq!(select_best(&c).unwrap(), 0);
        let d = [
            Candidate { digest: "b", insertion: 3, score: Some(1.0) },
            Candidate { digest: "a", insertion: 3, score: Some(1.0) },
        ];
        assert_eq!(select_best(&d).unwrap(), 1);
        assert!(select_best(&[]).is_err());
    }

    #[test]
    fn threshold_switch() {
        assert_eq!(Metric::LooCrps.effective(50, 1000), Metric::LooCrps);
        assert_eq!(Metric::LooCrps.effective(6392, 1000), Metric::LooCrpsBic);
        assert_eq!(Metric::Mll.effective(6392, 1000), Metric::Mll);
    }
}
