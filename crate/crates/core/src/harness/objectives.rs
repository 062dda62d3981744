//! Built-in test functions on the unit cube.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::plugin::PluginError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Minimize,
    Maximize,
}

impl Direction {
    /// Maps a raw value to the maximization convention used internally.
    pub fn to_internal(self, v: f64) -> f64 {
        match self {
            Direction::Minimize => -v,
            Direction::Maximize => v,
        }
    }

    pub fn to_raw(self, v: f64) -> f64 {
        self.to_internal(v)
    }
}

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("unknown objective {0:?}")]
    Unknown(String),
    #[error("bad objective arguments: {0}")]
    Arguments(String),
    #[error("point has {got} coordinates, objective expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("objective returned a non-finite value at batch row {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Plugin(#[from] PluginError),
}

/// A black-box function of points in `[0, 1]^D`.
pub trait Objective: Send {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn direction(&self) -> Direction;
    /// One value per row of `points`.
    fn evaluate(&mut self, points: &DMatrix<f64>) -> Result<Vec<f64>, ObjectiveError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKernel {
    Rbf,
    Matern52,
}

#[derive(Debug, Clone)]
enum Kind {
    Ackley,
    Levy,
    Rosenbrock,
    StyblinskiTang,
    GpSample(RandomFeatures),
}

/// Fixed draw from a stationary GP prior via random Fourier features.
#[derive(Debug, Clone)]
struct RandomFeatures {
    omega: DMatrix<f64>,
    phase: Vec<f64>,
    weight: Vec<f64>,
}

const N_FEATURES: usize = 1024;

impl RandomFeatures {
    fn new(kernel: SampleKernel, lengthscale: f64, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chi = ChiSquared::new(5.0).expect("valid dof");
        let mut omega = DMatrix::zeros(N_FEATURES, dim);
        for i in 0..N_FEATURES {
            let scale = match kernel {
                SampleKernel::Rbf => 1.0,
                // Matern 5/2 spectral density: multivariate t with 5 dof.
                SampleKernel::Matern52 => (5.0f64 / chi.sample(&mut rng)).sqrt(),
            };
            for j in 0..dim {
                let z: f64 = rng.sample(StandardNormal);
                omega[(i, j)] = z * scale / lengthscale;
            }
        }
        let phase = (0..N_FEATURES).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
        let weight = (0..N_FEATURES).map(|_| rng.sample(StandardNormal)).collect();
        Self { omega, phase, weight }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        let norm = (2.0 / N_FEATURES as f64).sqrt();
        let mut s = 0.0;
        for i in 0..N_FEATURES {
            let mut a = self.phase[i];
            for (j, v) in x.iter().enumerate() {
                a += self.omega[(i, j)] * v;
            }
            s += self.weight[i] * a.cos();
        }
        norm * s
    }
}

fn scale(u: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    u.iter().map(|v| lo + (hi - lo) * v).collect()
}

pub fn ackley(x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let s1 = x.iter().map(|v| v * v).sum::<f64>() / d;
    let s2 = x.iter().map(|v| (2.0 * PI * v).cos()).sum::<f64>() / d;
    -20.0 * (-0.2 * s1.sqrt()).exp() - s2.exp() + 20.0 + std::f64::consts::E
}

pub fn levy(x: &[f64]) -> f64 {
    let w: Vec<f64> = x.iter().map(|v| 1.0 + (v - 1.0) / 4.0).collect();
    let n = w.len();
    let mut s = (PI * w[0]).sin().powi(2);
    for wi in &w[..n - 1] {
        s += (wi - 1.0).powi(2) * (1.0 + 10.0 * (PI * wi + 1.0).sin().powi(2));
    }
    s + (w[n - 1] - 1.0).powi(2) * (1.0 + (2.0 * PI * w[n - 1]).sin().powi(2))
}

pub fn rosenbrock(x: &[f64]) -> f64 {
    x.windows(2)
        .map(|p| 100.0 * (p[1] - p[0] * p[0]).powi(2) + (1.0 - p[0]).powi(2))
        .sum()
}

pub fn styblinski_tang(x: &[f64]) -> f64 {
    0.5 * x.iter().map(|v| v.powi(4) - 16.0 * v * v + 5.0 * v).sum::<f64>()
}

/// A closed-form test function, minimized, with inputs scaled from the unit
/// cube to its usual domain.
#[derive(Debug, Clone)]
pub struct Builtin {
    name: String,
    dim: usize,
    kind: Kind,
}

impl Builtin {
    /// Value at a unit-cube point.
    pub fn value(&self, u: &[f64]) -> f64 {
        match &self.kind {
            Kind::Ackley => ackley(&scale(u, -32.768, 32.768)),
            Kind::Levy => levy(&scale(u, -10.0, 10.0)),
            Kind::Rosenbrock => rosenbrock(&scale(u, -5.0, 10.0)),
            Kind::StyblinskiTang => styblinski_tang(&scale(u, -5.0, 5.0)),
            Kind::GpSample(rf) => rf.eval(u),
        }
    }
}

impl Objective for Builtin {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn direction(&self) -> Direction {
        Direction::Minimize
    }

    fn evaluate(&mut self, points: &DMatrix<f64>) -> Result<Vec<f64>, ObjectiveError> {
        if points.ncols() != self.dim {
            return Err(ObjectiveError::Dimension {
                expected: self.dim,
                got: points.ncols(),
            });
        }
        (0..points.nrows())
            .map(|i| {
                let row: Vec<f64> = points.row(i).iter().copied().collect();
                let v = self.value(&row);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(ObjectiveError::NonFinite(i))
                }
            })
            .collect()
    }
}

fn parse_gp_sample(args: &str) -> Result<(SampleKernel, f64), ObjectiveError> {
    let parts: Vec<&str> = args.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let kernel = match parts.first().copied().unwrap_or("rbf") {
        "rbf" => SampleKernel::Rbf,
        "matern52" => SampleKernel::Matern52,
        other => return Err(ObjectiveError::Arguments(format!("gp-sample kernel {other:?}"))),
    };
    let ls = match parts.get(1) {
        Some(t) => t
            .trim_start_matches("lengthscale=")
            .parse::<f64>()
            .map_err(|e| ObjectiveError::Arguments(format!("gp-sample lengthscale: {e}")))?,
        None => 0.2,
    };
    if !(ls > 0.0) {
        return Err(ObjectiveError::Arguments("gp-sample lengthscale must be positive".into()));
    }
    Ok((kernel, ls))
}

/// Names: `ackley`, `levy`, `rosenbrock`, `styblinski-tang`, and
/// `gp-sample(kernel, lengthscale)` with kernel `rbf` or `matern52`
/// (defaults `rbf`, `0.2`).
pub fn builtin_objective(name: &str, dim: usize, seed: u64) -> Result<Builtin, ObjectiveError> {
    if dim == 0 {
        return Err(ObjectiveError::Arguments("dimension must be at least 1".into()));
    }
    let name = name.trim();
    let kind = match name {
        "ackley" => Kind::Ackley,
        "levy" => Kind::Levy,
        "rosenbrock" => Kind::Rosenbrock,
        "styblinski-tang" | "styblinski_tang" => Kind::StyblinskiTang,
        _ if name == "gp-sample" || name.starts_with("gp-sample(") => {
            let args = name
                .strip_prefix("gp-sample")
                .unwrap_or("")
                .trim_start_matches('(')
                .trim_end_matches(')');
            let (k, ls) = parse_gp_sample(args)?;
            Kind::GpSample(RandomFeatures::new(k, ls, dim, seed))
        }
        _ => return Err(ObjectiveError::Unknown(name.to_string())),
    };
    Ok(Builtin {
        name: name.to_string(),
        dim,
        kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_optima() {
        let a = builtin_objective("ackley", 7, 0).unwrap();
        assert!(a.value(&[0.5; 7]).abs() < 1e-12);
        assert!(rosenbrock(&[1.0; 6]).abs() < 1e-15);
        let r = builtin_objective("rosenbrock", 6, 0).unwrap();
        assert!(r.value(&[0.4; 6]).abs() < 1e-12);
        assert!(levy(&[1.0; 4]).abs() < 1e-15);
        let st = styblinski_tang(&[-2.903_534; 3]) / 3.0;
        assert!((st + 39.166_165).abs() < 1e-5);
    }

    #[test]
    fn gp_sample_is_deterministic() {
        let mut a = builtin_objective("gp-sample(rbf, 0.2)", 3, 4).unwrap();
        let mut b = builtin_objective("gp-sample(rbf,0.2)", 3, 4).unwrap();
        let x = DMatrix::from_row_slice(2, 3, &[0.1, 0.2, 0.3, 0.9, 0.5, 0.4]);
        assert_eq!(a.evaluate(&x).unwrap(), b.evaluate(&x).unwrap());
        let mut c = builtin_objective("gp-sample(matern52, 0.5)", 3, 4).unwrap();
        assert!(c.evaluate(&x).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gp_sample_has_unit_scale() {
        let f = builtin_objective("gp-sample", 2, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vals: Vec<f64> = (0..400).map(|_| f.value(&[rng.gen(), rng.gen()])).collect();
        let var = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
        assert!(var > 0.2 && var < 3.0, "{var}");
    }

    #[test]
    fn errors() {
        assert!(matches!(builtin_objective("nope", 2, 0), Err(ObjectiveError::Unknown(_))));
        assert!(builtin_objective("gp-sample(foo, 1)", 2, 0).is_err());
        let mut a = builtin_objective("ackley", 3, 0).unwrap();
        assert!(a.evaluate(&DMatrix::zeros(1, 2)).is_err());
    }
}
