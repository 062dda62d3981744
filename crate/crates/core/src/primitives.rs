//! Closed-form base kernels, input warps and the dimension-scaled
//! lengthscale prior.
//!
//! Everything here is a pure scalar function. The expression language in
//! [`crate::dsl`] composes these pieces into full covariance functions.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower clamp applied to distances and radii before `sqrt`/`log`.
pub const DIST_FLOOR: f64 = 1e-15;
/// Radial clamp floor used by the cylindrical kernel.
pub const RADIAL_EPS: f64 = 1e-12;

const SQRT_3: f64 = 1.732_050_807_568_877_2;
const SQRT_5: f64 = 2.236_067_977_499_79;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrimitiveError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("{name} must be nonnegative, got {value}")]
    Negative { name: &'static str, value: f64 },
    #[error("non-finite input")]
    NonFinite,
    #[error("dimensionality must be at least 1")]
    ZeroDimension,
}

/// Per-dimension ARD lengthscales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthscaleVector(Vec<f64>);

impl LengthscaleVector {
    pub fn new(values: Vec<f64>) -> Result<Self, PrimitiveError> {
        if values.is_empty() {
            return Err(PrimitiveError::ZeroDimension);
        }
        if let Some(&v) = values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(PrimitiveError::NonPositive {
                name: "lengthscale",
                value: v,
            });
        }
        Ok(Self(values))
    }

    pub fn uniform(dim: usize, value: f64) -> Result<Self, PrimitiveError> {
        Self::new(vec![value; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Log-normal prior, parameterised in log space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LognormalPrior {
    pub mu: f64,
    pub sigma: f64,
}

impl LognormalPrior {
    pub fn new(mu: f64, sigma: f64) -> Result<Self, PrimitiveError> {
        if !(sigma > 0.0) {
            return Err(PrimitiveError::NonPositive {
                name: "sigma",
                value: sigma,
            });
        }
        Ok(Self { mu, sigma })
    }

    /// Mode of the distribution in the natural (positive) space.
    pub fn mode(&self) -> f64 {
        (self.mu - self.sigma * self.sigma).exp()
    }

    /// Log density of the positive value `exp(log_value)`, including the
    /// `-log(value)` Jacobian of the log-normal.
    pub fn log_density_at_log(&self, log_value: f64) -> f64 {
        let z = (log_value - self.mu) / self.sigma;
        -0.5 * z * z - self.sigma.ln() - 0.5 * (2.0 * PI).ln() - log_value
    }

    /// Derivative of [`Self::log_density_at_log`] with respect to `log_value`.
    pub fn d_log_density_at_log(&self, log_value: f64) -> f64 {
        -(log_value - self.mu) / (self.sigma * self.sigma) - 1.0
    }
}

/// Parameters of the cylindrical (radial x angular) kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BockParams {
    pub alpha: f64,
    pub beta: f64,
    pub angular_weights: Vec<f64>,
    pub center: Vec<f64>,
    pub radius: f64,
    /// Lengthscale of the radial Matérn-5/2 component.
    pub radial_lengthscale: f64,
}

impl BockParams {
    pub fn check(&self) -> Result<(), PrimitiveError> {
        positive("alpha", self.alpha)?;
        positive("beta", self.beta)?;
        positive("radius", self.radius)?;
        positive("radial_lengthscale", self.radial_lengthscale)?;
        for &w in &self.angular_weights {
            if !(w >= 0.0) {
                return Err(PrimitiveError::Negative {
                    name: "angular weight",
                    value: w,
                });
            }
        }
        Ok(())
    }
}

/// Parameters of the spherical-linear kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlParams {
    pub lengthscales: LengthscaleVector,
    pub global_scale: f64,
    pub center: Vec<f64>,
    /// `(lambda_0, lambda_1)`: bias weight and sphere-linear weight.
    pub mixture: (f64, f64),
}

impl SlParams {
    /// Builds the mixture from two unconstrained logits via softmax.
    pub fn mixture_from_logits(l0: f64, l1: f64) -> (f64, f64) {
        let m = l0.max(l1);
        let (a, b) = ((l0 - m).exp(), (l1 - m).exp());
        (a / (a + b), b / (a + b))
    }
}

fn positive(name: &'static str, value: f64) -> Result<(), PrimitiveError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(PrimitiveError::NonPositive { name, value })
    }
}

fn same_len(a: usize, b: usize) -> Result<(), PrimitiveError> {
    if a == b {
        Ok(())
    } else {
        Err(PrimitiveError::DimensionMismatch { left: a, right: b })
    }
}

/// `sqrt(sum_i (x1_i - x2_i)^2 / l_i^2)`.
pub fn scaled_distance(
    x1: &[f64],
    x2: &[f64],
    ls: &LengthscaleVector,
) -> Result<f64, PrimitiveError> {
    same_len(x1.len(), x2.len())?;
    same_len(x1.len(), ls.len())?;
    let s: f64 = x1
        .iter()
        .zip(x2)
        .zip(ls.as_slice())
        .map(|((a, b), l)| {
            let d = (a - b) / l;
            d * d
        })
        .sum();
    Ok(s.sqrt())
}

/// Squared-exponential profile in the squared distance.
pub fn rbf_profile(r2: f64) -> f64 {
    (-0.5 * r2).exp()
}

/// Matérn-5/2 profile in the distance.
pub fn matern52_profile(r: f64) -> f64 {
    let sr = SQRT_5 * r;
    (1.0 + sr + 5.0 / 3.0 * r * r) * (-sr).exp()
}

/// Matérn-3/2 profile in the distance.
pub fn matern32_profile(r: f64) -> f64 {
    let sr = SQRT_3 * r;
    (1.0 + sr) * (-sr).exp()
}

/// Rational-quadratic profile in the squared distance.
pub fn rq_profile(r2: f64, alpha: f64) -> f64 {
    (-alpha * (r2 / (2.0 * alpha)).ln_1p()).exp()
}

/// Inverse multiquadric `(1 + r^2)^-1`.
pub fn imq_profile(r2: f64) -> f64 {
    1.0 / (1.0 + r2)
}

pub fn eval_matern52(r: f64) -> Result<f64, PrimitiveError> {
    if !(r >= 0.0) {
        return Err(PrimitiveError::Negative { name: "r", value: r });
    }
    Ok(matern52_profile(r))
}

pub fn eval_rq(r2: f64, alpha: f64) -> Result<f64, PrimitiveError> {
    if !(r2 >= 0.0) {
        return Err(PrimitiveError::Negative {
            name: "r2",
            value: r2,
        });
    }
    positive("alpha", alpha)?;
    Ok(rq_profile(r2, alpha))
}

/// ARD periodic kernel.
pub fn eval_periodic(
    x1: &[f64],
    x2: &[f64],
    ls: &LengthscaleVector,
    periods: &[f64],
) -> Result<f64, PrimitiveError> {
    same_len(x1.len(), x2.len())?;
    same_len(x1.len(), ls.len())?;
    same_len(x1.len(), periods.len())?;
    for &p in periods {
        positive("period", p)?;
    }
    let mut acc = 0.0;
    for i in 0..x1.len() {
        let s = (PI * (x1[i] - x2[i]) / periods[i]).sin();
        let l = ls.as_slice()[i];
        acc += s * s / (l * l);
    }
    Ok((-2.0 * acc).exp())
}

/// Kumaraswamy CDF `1 - (1 - r^alpha)^beta`. Inputs slightly outside `[0, 1]`
/// are clamped; anything further out is rejected.
pub fn kumaraswamy_cdf(r: f64, alpha: f64, beta: f64) -> Result<f64, PrimitiveError> {
    positive("alpha", alpha)?;
    positive("beta", beta)?;
    if !r.is_finite() || !(-1e-9..=1.0 + 1e-9).contains(&r) {
        return Err(PrimitiveError::NonFinite);
    }
    Ok(kumaraswamy(r.clamp(0.0, 1.0), alpha, beta))
}

pub(crate) fn kumaraswamy(r: f64, alpha: f64, beta: f64) -> f64 {
    1.0 - (1.0 - r.powf(alpha)).powf(beta)
}

/// Inverse stereographic lift `R^D -> S^D`.
pub fn stereographic_project(z: &[f64]) -> Result<Vec<f64>, PrimitiveError> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(PrimitiveError::NonFinite);
    }
    let n2: f64 = z.iter().map(|v| v * v).sum();
    let denom = 1.0 + n2;
    let mut out: Vec<f64> = z.iter().map(|v| 2.0 * v / denom).collect();
    out.push((n2 - 1.0) / denom);
    Ok(out)
}

/// Cylindrical kernel: Matérn-5/2 over Kumaraswamy-warped radii times a
/// polynomial in the cosine of the angle between directions.
pub fn eval_bock(x1: &[f64], x2: &[f64], p: &BockParams) -> Result<f64, PrimitiveError> {
    same_len(x1.len(), x2.len())?;
    same_len(x1.len(), p.center.len())?;
    p.check()?;
    let (r1, u1) = radial_split(x1, &p.center, p.radius);
    let (r2, u2) = radial_split(x2, &p.center, p.radius);
    let k1 = kumaraswamy(r1, p.alpha, p.beta);
    let k2 = kumaraswamy(r2, p.alpha, p.beta);
    let radial = matern52_profile((k1 - k2).abs() / p.radial_lengthscale);
    let cos: f64 = u1.iter().zip(&u2).map(|(a, b)| a * b).sum();
    let angular: f64 = p
        .angular_weights
        .iter()
        .enumerate()
        .map(|(k, w)| w * cos.powi(k as i32))
        .sum();
    Ok(radial * angular)
}

/// Returns the clamped normalised radius and unit direction of `(x - c) / R`.
fn radial_split(x: &[f64], center: &[f64], radius: f64) -> (f64, Vec<f64>) {
    let xb: Vec<f64> = x.iter().zip(center).map(|(a, c)| (a - c) / radius).collect();
    let norm = xb.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dir = if norm < RADIAL_EPS {
        let mut e = vec![0.0; xb.len()];
        e[0] = 1.0;
        e
    } else {
        xb.iter().map(|v| v / norm).collect()
    };
    (norm.clamp(RADIAL_EPS, 1.0), dir)
}

/// Spherical-linear kernel.
pub fn eval_sl(x1: &[f64], x2: &[f64], p: &SlParams) -> Result<f64, PrimitiveError> {
    same_len(x1.len(), x2.len())?;
    same_len(x1.len(), p.lengthscales.len())?;
    same_len(x1.len(), p.center.len())?;
    positive("global_scale", p.global_scale)?;
    let (l0, l1) = p.mixture;
    if !(l0 >= 0.0 && l1 >= 0.0) {
        return Err(PrimitiveError::Negative {
            name: "mixture weight",
            value: l0.min(l1),
        });
    }
    let warp = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(&p.center)
            .zip(p.lengthscales.as_slice())
            .map(|((v, c), l)| (v - c) / (l * p.global_scale))
            .collect()
    };
    let a = stereographic_project(&warp(x1))?;
    let b = stereographic_project(&warp(x2))?;
    let dot: f64 = a.iter().zip(&b).map(|(u, v)| u * v).sum();
    Ok(l1 * dot + l0)
}

/// Dimension-scaled log-normal lengthscale prior: `mu = sqrt(2) + log(sqrt(D))`,
/// `sigma = sqrt(3)`.
pub fn lengthscale_prior(dim: usize) -> Result<LognormalPrior, PrimitiveError> {
    if dim < 1 {
        return Err(PrimitiveError::ZeroDimension);
    }
    Ok(LognormalPrior {
        mu: SQRT_2 + 0.5 * (dim as f64).ln(),
        sigma: SQRT_3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ls(v: &[f64]) -> LengthscaleVector {
        LengthscaleVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn scaled_distance_examples() {
        assert_eq!(scaled_distance(&[0.3, 0.7], &[0.3, 0.7], &ls(&[0.2, 5.0])).unwrap(), 0.0);
        assert_eq!(scaled_distance(&[1.0, 0.0], &[0.0, 0.0], &ls(&[1.0, 1.0])).unwrap(), 1.0);
        let d = scaled_distance(&[2.0, 2.0], &[0.0, 0.0], &ls(&[2.0, 1.0])).unwrap();
        assert!((d - 5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(
            scaled_distance(&[1.0], &[0.0, 0.0], &ls(&[1.0])),
            Err(PrimitiveError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn matern52_examples() {
        assert_eq!(eval_matern52(0.0).unwrap(), 1.0);
        // (1 + sqrt5 + 5/3) exp(-sqrt5), evaluated with mpmath at 30 digits.
        assert!((eval_matern52(1.0).unwrap() - 0.523_994_108_831_820_3).abs() < 1e-15);
        assert!(eval_matern52(50.0).unwrap() < 1e-12);
        assert!(eval_matern52(-0.1).is_err());
        let mut prev = 1.0;
        for i in 1..200 {
            let v = eval_matern52(i as f64 * 0.05).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn rq_examples() {
        assert_eq!(eval_rq(0.0, 3.0).unwrap(), 1.0);
        assert!((eval_rq(2.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((eval_rq(1.0, 1e6).unwrap() - (-0.5f64).exp()).abs() < 1e-5);
        assert!(eval_rq(1.0, 0.0).is_err());
        for i in 0..=100 {
            let r = 5.0 * i as f64 / 100.0;
            assert!((eval_rq(r * r, 1e6).unwrap() - (-r * r / 2.0).exp()).abs() < 1e-5);
        }
    }

    #[test]
    fn periodic_examples() {
        let one = ls(&[1.0]);
        assert_eq!(eval_periodic(&[0.4], &[0.4], &one, &[0.7]).unwrap(), 1.0);
        assert!((eval_periodic(&[1.1], &[0.4], &one, &[0.7]).unwrap() - 1.0).abs() < 1e-12);
        let half = eval_periodic(&[0.35], &[0.0], &one, &[0.7]).unwrap();
        assert!((half - (-2.0f64).exp()).abs() < 1e-12);
        assert!(eval_periodic(&[0.1], &[0.0], &one, &[0.0]).is_err());
    }

    #[test]
    fn kumaraswamy_examples() {
        assert_eq!(kumaraswamy_cdf(0.0, 2.0, 3.0).unwrap(), 0.0);
        assert_eq!(kumaraswamy_cdf(1.0, 2.0, 3.0).unwrap(), 1.0);
        assert!((kumaraswamy_cdf(0.5, 1.0, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert!((kumaraswamy_cdf(0.5, 2.0, 3.0).unwrap() - 0.578125).abs() < 1e-15);
        assert!(kumaraswamy_cdf(1.5, 2.0, 3.0).is_err());
    }

    #[test]
    fn stereographic_examples() {
        assert_eq!(stereographic_project(&[0.0, 0.0, 0.0]).unwrap(), vec![0.0, 0.0, 0.0, -1.0]);
        assert_eq!(stereographic_project(&[1.0]).unwrap(), vec![1.0, 0.0]);
        assert!(stereographic_project(&[f64::NAN]).is_err());
    }

    #[test]
    fn bock_examples() {
        let p = BockParams {
            alpha: 1.3,
            beta: 0.7,
            angular_weights: vec![1.0, 1.0],
            center: vec![0.5, 0.5],
            radius: 1.0,
            radial_lengthscale: 1.0,
        };
        let x = [0.2, 0.9];
        assert!((eval_bock(&x, &x, &p).unwrap() - 2.0).abs() < 1e-12);
        // Antipodal directions at equal radius: angular factor 1 + (-1) = 0.
        let a = [0.7, 0.5];
        let b = [0.3, 0.5];
        assert!(eval_bock(&a, &b, &p).unwrap().abs() < 1e-12);
        let bad = BockParams { radius: 0.0, ..p };
        assert!(eval_bock(&a, &b, &bad).is_err());
    }

    #[test]
    fn sl_examples() {
        let p = SlParams {
            lengthscales: ls(&[0.5, 2.0]),
            global_scale: 1.5,
            center: vec![0.5, 0.5],
            mixture: (0.3, 0.7),
        };
        let x = [0.1, 0.8];
        assert!((eval_sl(&x, &x, &p).unwrap() - 1.0).abs() < 1e-12);
        let bias = SlParams {
            mixture: (1.0, 0.0),
            ..p.clone()
        };
        assert_eq!(eval_sl(&[0.0, 0.0], &[1.0, 1.0], &bias).unwrap(), 1.0);
        // x~ = 0 against x~' = (1, 0): psi = (0,0,-1) and (1,0,0), product 0.
        let unit = SlParams {
            lengthscales: ls(&[1.0, 1.0]),
            global_scale: 1.0,
            center: vec![0.0, 0.0],
            mixture: (0.25, 0.75),
        };
        assert!((eval_sl(&[0.0, 0.0], &[1.0, 0.0], &unit).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn prior_examples() {
        let p1 = lengthscale_prior(1).unwrap();
        assert!((p1.mu - SQRT_2).abs() < 1e-15);
        assert!((p1.sigma - 3f64.sqrt()).abs() < 1e-15);
        assert!((lengthscale_prior(100).unwrap().mu - 3.716_798_655_367_140_7).abs() < 1e-14);
        assert!((lengthscale_prior(388).unwrap().mu - 4.394_716_232_184_731_8).abs() < 1e-14);
        assert!(lengthscale_prior(0).is_err());
    }
}
