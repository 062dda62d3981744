//! Log expected improvement evaluated without underflow.

use std::f64::consts::{PI, SQRT_2};

use libm::erfc;

use super::AcqError;
use crate::selection::std_normal_cdf;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// `exp(x^2) erfc(x)`.
pub fn erfcx(x: f64) -> f64 {
    if x < 25.0 {
        // x^2 split into p + e so exp(x^2) keeps full precision
        let p = x * x;
        let e = x.mul_add(x, -p);
        p.exp() * (1.0 + e) * erfc(x)
    } else {
        // Asymptotic series, accurate to double precision for x >= 25.
        let t = 1.0 / (2.0 * x * x);
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..8 {
            term *= -((2 * k - 1) as f64) * t;
            sum += term;
        }
        sum / (x * PI.sqrt())
    }
}

/// `log(1 - exp(x))` for `x < 0`.
fn log1mexp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// `log(phi(z) + z Phi(z))` and its derivative `Phi(z) / h(z)`.
pub fn log_h(z: f64) -> (f64, f64) {
    if z > -1.0 {
        let phi = (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
        let cdf = std_normal_cdf(z);
        let h = phi + z * cdf;
        (h.ln(), cdf / h)
    } else {
        let ex = erfcx(-z / SQRT_2);
        let inner = (ex * -z).ln() + 0.5 * (PI / 2.0).ln();
        let l1 = log1mexp(inner);
        let val = -0.5 * z * z - LN_SQRT_2PI + l1;
        let ratio = (PI / 2.0).sqrt() * ex / l1.exp();
        (val, ratio)
    }
}

fn signed_z(mu: f64, sigma: f64, best: f64, maximize: bool) -> f64 {
    if maximize {
        (mu - best) / sigma
    } else {
        (best - mu) / sigma
    }
}

/// `log E[max(improvement, 0)]` under `N(mu, sigma^2)`.
pub fn log_ei(mu: f64, sigma: f64, best: f64, maximize: bool) -> Result<f64, AcqError> {
    if !(sigma > 0.0) {
        return Err(AcqError::NonPositiveSigma(sigma));
    }
    Ok(sigma.ln() + log_h(signed_z(mu, sigma, best, maximize)).0)
}

/// Value and partial derivatives with respect to `mu` and `sigma`
/// (maximization).
pub(crate) fn log_ei_grad(mu: f64, sigma: f64, best: f64) -> (f64, f64, f64) {
    let z = (mu - best) / sigma;
    let (lh, r) = log_h(z);
    (sigma.ln() + lh, r / sigma, 1.0 / sigma - r * z / sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_points() {
        let v = log_ei(0.0, 1.0, 0.0, true).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-14);
        assert!(log_ei(1.0, 1e-12, 0.0, true).unwrap().abs() < 1e-9);
        assert!(log_ei(0.0, 1e-12, 1.0, false).unwrap().abs() < 1e-9);
        assert!(log_ei(0.0, 0.0, 0.0, true).is_err());
    }

    #[test]
    fn branches_agree_at_switch() {
        let a = log_h(-1.0 - 1e-12);
        let b = log_h(-1.0 + 1e-12);
        assert!((a.0 - b.0).abs() < 1e-10);
        assert!((a.1 - b.1).abs() < 1e-9);
    }

    #[test]
    fn deep_tail_finite_and_monotone() {
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=4000 {
            let z = -40.0 + i as f64 * 0.01;
            let (v, d) = log_h(z);
            assert!(v.is_finite() && d.is_finite() && d > 0.0, "z={z}");
            assert!(v > prev, "z={z}");
            prev = v;
        }
        assert!(log_h(-1e4).0.is_finite());
    }

    #[test]
    fn derivative_matches_difference() {
        for z in [-35.0, -12.0, -3.0, -1.0, -0.2, 0.0, 1.5, 6.0] {
            let h = 1e-6;
            let fd = (log_h(z + h).0 - log_h(z - h).0) / (2.0 * h);
            let an = log_h(z).1;
            assert!((fd - an).abs() < 1e-6 * an.abs().max(1.0), "z={z}: {fd} vs {an}");
        }
    }
}
