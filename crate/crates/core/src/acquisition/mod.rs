//! Candidate generation and LogEI maximization over the unit box.

mod logei;
mod sobol;

pub use logei::{erfcx, log_ei, log_h};
pub use sobol::{sobol_points, SobolStream, MAX_DIM};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gp::{Dataset, FittedGP, GpError};
use crate::optim::{minimize_box, LbfgsConfig};

/// Latent variances below this are treated as zero when scoring.
const VAR_FLOOR: f64 = 1e-18;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AcqError {
    #[error("dimension {0} outside the supported Sobol range 1..={max}", max = MAX_DIM)]
    SobolDimension(usize),
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("invalid acquisition config: {0}")]
    Config(String),
    #[error(transparent)]
    Gp(#[from] GpError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcqConfig {
    pub raw_candidates: usize,
    pub restarts: usize,
    pub q: usize,
    pub raasp: bool,
    /// Share of raw candidates drawn around the incumbent.
    pub raasp_fraction: f64,
    /// Expected number of perturbed coordinates per RAASP candidate.
    pub raasp_coords: f64,
    /// Standard deviation of RAASP perturbations, as a fraction of the box.
    pub raasp_sigma: f64,
    pub max_iters: usize,
}

impl Default for AcqConfig {
    fn default() -> Self {
        Self {
            raw_candidates: 512,
            restarts: 4,
            q: 20,
            raasp: true,
            raasp_fraction: 0.5,
            raasp_coords: 20.0,
            raasp_sigma: 0.2,
            max_iters: 100,
        }
    }
}

impl AcqConfig {
    pub fn check(&self) -> Result<(), AcqError> {
        if self.q == 0 {
            return Err(AcqError::Config("q must be at least 1".into()));
        }
        if self.raw_candidates == 0 || self.restarts > self.raw_candidates {
            return Err(AcqError::Config("need 1 <= restarts <= raw_candidates".into()));
        }
        if !(0.0..=1.0).contains(&self.raasp_fraction) {
            return Err(AcqError::Config("raasp_fraction must lie in [0, 1]".into()));
        }
        if !(self.raasp_sigma > 0.0) || !(self.raasp_coords > 0.0) {
            return Err(AcqError::Config("raasp_sigma and raasp_coords must be positive".into()));
        }
        Ok(())
    }
}

fn perturb_prob(coords: f64, dim: usize) -> f64 {
    (coords / dim as f64).min(1.0)
}

fn truncated_step(rng: &mut ChaCha8Rng, normal: &Normal<f64>, center: f64) -> f64 {
    for _ in 0..8 {
        let v = center + normal.sample(rng);
        if (0.0..=1.0).contains(&v) {
            return v;
        }
    }
    (center + normal.sample(rng)).clamp(0.0, 1.0)
}

fn raasp_with(incumbent: &[f64], n: usize, coords: f64, sigma: f64, seed: u64) -> DMatrix<f64> {
    let dim = incumbent.len();
    let p = perturb_prob(coords, dim);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(n, dim);
    for i in 0..n {
        let mut mask: Vec<bool> = (0..dim).map(|_| rng.gen::<f64>() < p).collect();
        if !mask.iter().any(|m| *m) {
            mask[rng.gen_range(0..dim)] = true;
        }
        for j in 0..dim {
            let c = incumbent[j].clamp(0.0, 1.0);
            out[(i, j)] = if mask[j] { truncated_step(&mut rng, &normal, c) } else { c };
        }
    }
    out
}

/// Copies of `incumbent` with a random coordinate subset perturbed by
/// truncated Gaussian noise (sigma 0.2), clipped to the unit box. Each
/// coordinate is picked with probability `min(20 / D, 1)`; at least one is
/// always picked.
pub fn raasp_candidates(incumbent: &[f64], n: usize, dim: usize, seed: u64) -> DMatrix<f64> {
    assert_eq!(incumbent.len(), dim, "incumbent dimension");
    let d = AcqConfig::default();
    raasp_with(incumbent, n, d.raasp_coords, d.raasp_sigma, seed)
}

/// LogEI (maximization) of standardized predictions; `-inf` where the
/// latent variance vanishes.
fn score_rows(gp: &FittedGP, x: &DMatrix<f64>, best: f64) -> Result<Vec<f64>, AcqError> {
    let p = gp.posterior_standardized(x)?;
    Ok(p.mean
        .iter()
        .zip(&p.var)
        .map(|(m, v)| {
            if *v > VAR_FLOOR {
                log_ei(*m, v.sqrt(), best, true).unwrap_or(f64::NEG_INFINITY)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect())
}

fn neg_log_ei(gp: &FittedGP, x: &[f64], best: f64) -> Option<(f64, Vec<f64>)> {
    let p = gp.predict_point(x).ok()?;
    if !(p.var > VAR_FLOOR) {
        return None;
    }
    let sigma = p.var.sqrt();
    let (v, d_mu, d_sigma) = logei::log_ei_grad(p.mean, sigma, best);
    let d_var = d_sigma / (2.0 * sigma);
    let g = p.d_mean.iter().zip(&p.d_var).map(|(a, b)| -(d_mu * a + d_var * b)).collect();
    Some((-v, g))
}

fn row(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

fn distinct(p: &[f64], chosen: &[Vec<f64>]) -> bool {
    chosen
        .iter()
        .all(|c| c.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() > 1e-9)
}

/// One maximizer of LogEI: top raw candidates seed L-BFGS restarts and the
/// best of restarts and raw candidates is returned.
fn maximize_one(
    gp: &FittedGP,
    raw: &DMatrix<f64>,
    best: f64,
    cfg: &AcqConfig,
    chosen: &[Vec<f64>],
) -> Result<Vec<f64>, AcqError> {
    let dim = raw.ncols();
    let scores = score_rows(gp, raw, best)?;
    let mut order: Vec<usize> = (0..raw.nrows()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let lo = vec![0.0; dim];
    let hi = vec![1.0; dim];
    let lb = LbfgsConfig {
        max_iters: cfg.max_iters,
        ..Default::default()
    };
    let starts: Vec<usize> = order.iter().copied().take(cfg.restarts.max(1)).collect();
    let optimized: Vec<Option<Vec<f64>>> = starts
        .par_iter()
        .map(|&i| minimize_box(|x| neg_log_ei(gp, x, best), &row(raw, i), &lo, &hi, &lb, || false).map(|r| r.x))
        .collect();

    let mut pool: Vec<Vec<f64>> = optimized.into_iter().flatten().collect();
    let n_opt = pool.len();
    pool.extend(order.iter().map(|&i| row(raw, i)));
    let pool_m = DMatrix::from_fn(pool.len(), dim, |i, j| pool[i][j].clamp(0.0, 1.0));
    let pool_scores = score_rows(gp, &pool_m.rows(0, n_opt.min(pool.len())).into_owned(), best)?;
    let mut ranked: Vec<(f64, usize)> = pool_scores.iter().copied().zip(0..).collect();
    ranked.extend(order.iter().enumerate().map(|(k, &i)| (scores[i], n_opt + k)));
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, idx) in &ranked {
        let p = row(&pool_m, *idx);
        if distinct(&p, chosen) {
            return Ok(p);
        }
    }
    Err(AcqError::Config("no distinct candidate available".into()))
}

/// Builds a batch of `cfg.q` points in `[0, 1]^D` by sequential greedy LogEI
/// maximization, conditioning on each pending point at its posterior mean.
pub fn optimize_acqf(gp: &FittedGP, cfg: &AcqConfig, data: &Dataset, seed: u64) -> Result<DMatrix<f64>, AcqError> {
    cfg.check()?;
    let dim = data.dim();
    if dim == 0 || dim > MAX_DIM {
        return Err(AcqError::SobolDimension(dim));
    }
    let best = data.y.max();
    let inc = data.y.imax();
    let incumbent = row(&data.x, inc);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut current = gp.clone();
    let mut chosen: Vec<Vec<f64>> = Vec::with_capacity(cfg.q);
    for _ in 0..cfg.q {
        let n_raasp = if cfg.raasp {
            ((cfg.raw_candidates as f64 * cfg.raasp_fraction).round() as usize).min(cfg.raw_candidates)
        } else {
            0
        };
        let n_sobol = cfg.raw_candidates - n_raasp;
        let mut raw = DMatrix::zeros(cfg.raw_candidates, dim);
        if n_sobol > 0 {
            raw.rows_mut(0, n_sobol).copy_from(&sobol_points(n_sobol, dim, Some(rng.gen()))?);
        }
        if n_raasp > 0 {
            let r = raasp_with(&incumbent, n_raasp, cfg.raasp_coords, cfg.raasp_sigma, rng.gen());
            raw.rows_mut(n_sobol, n_raasp).copy_from(&r);
        }
        let p = maximize_one(&current, &raw, best, cfg, &chosen)?;
        let pm = DMatrix::from_row_slice(1, dim, &p);
        if chosen.len() + 1 < cfg.q {
            let fantasy = current.posterior_standardized(&pm)?.mean[0];
            current = current.condition_on(&pm, &[fantasy])?;
        }
        chosen.push(p);
    }
    Ok(DMatrix::from_fn(chosen.len(), dim, |i, j| chosen[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::KernelExpr;

    fn toy_gp() -> (FittedGP, Dataset) {
        let xs = [0.1, 0.3, 0.45, 0.55, 0.7, 0.9];
        let x = DMatrix::from_column_slice(6, 1, &xs);
        let y: Vec<f64> = xs.iter().map(|v| -(v - 0.5) * (v - 0.5)).collect();
        let data = Dataset::new(x, y).unwrap();
        let expr: KernelExpr = "scale(rbf(ard))".parse().unwrap();
        let gp = FittedGP::at_params(&expr, vec![1.0, 0.2], 1e-6, &data).unwrap();
        (gp, data)
    }

    #[test]
    fn raasp_one_dimension_always_moves() {
        let c = raasp_candidates(&[0.5], 200, 1, 3);
        assert!(c.iter().all(|v| *v != 0.5 && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn raasp_mean_perturbed_count() {
        let dim = 1000;
        let inc = vec![0.5; dim];
        let c = raasp_candidates(&inc, 10_000, dim, 11);
        let changed = c.iter().filter(|v| **v != 0.5).count() as f64 / 10_000.0;
        assert!((changed - 20.0).abs() < 5.0, "{changed}");
    }

    #[test]
    fn quadratic_peak() {
        let (gp, data) = toy_gp();
        let cfg = AcqConfig { q: 1, ..Default::default() };
        let b = optimize_acqf(&gp, &cfg, &data, 0).unwrap();
        // Grid argmax of the posterior mean for this toy is 0.5.
        assert!((b[(0, 0)] - 0.5).abs() < 0.05, "{}", b[(0, 0)]);
    }

    #[test]
    fn batch_distinct_in_box_deterministic() {
        let (gp, data) = toy_gp();
        let cfg = AcqConfig { q: 3, raw_candidates: 64, ..Default::default() };
        let b = optimize_acqf(&gp, &cfg, &data, 5).unwrap();
        assert_eq!(b.nrows(), 3);
        assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
        for i in 0..3 {
            for j in 0..i {
                assert!((b.row(i) - b.row(j)).norm() > 1e-9);
            }
        }
        assert_eq!(b, optimize_acqf(&gp, &cfg, &data, 5).unwrap());
    }

    #[test]
    fn restarts_dominate_raw() {
        let (gp, data) = toy_gp();
        let cfg = AcqConfig { q: 1, ..Default::default() };
        let best = data.y.max();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let raw_s = sobol_points(256, 1, Some(rng.gen())).unwrap();
        let raw_r = raasp_with(&row(&data.x, data.y.imax()), 256, 20.0, 0.2, rng.gen());
        let b = optimize_acqf(&gp, &cfg, &data, 0).unwrap();
        let got = score_rows(&gp, &b, best).unwrap()[0];
        let raw_best = score_rows(&gp, &raw_s, best)
            .unwrap()
            .into_iter()
            .chain(score_rows(&gp, &raw_r, best).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(got >= raw_best);
    }

    #[test]
    fn config_checks() {
        assert!(AcqConfig { q: 0, ..Default::default() }.check().is_err());
        assert!(AcqConfig { restarts: 600, ..Default::default() }.check().is_err());
        assert!(AcqConfig::default().check().is_ok());
    }
}
