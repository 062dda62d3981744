//! Exact GP regression: standardization, jittered Cholesky, MAP fitting of
//! kernel hyperparameters and noise, and posterior prediction.

use std::time::{Duration, Instant};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::dsl::{EvalError, Kernel, KernelExpr};
use crate::optim::{minimize_box, LbfgsConfig, Termination};

/// Relative jitter ladder, scaled by the mean of the diagonal.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-8, 1e-6, 1e-4];
/// Lower bound on the noise variance in standardized units.
pub const NOISE_FLOOR: f64 = 1e-6;
pub const NOISE_CEIL: f64 = 10.0;
pub const NOISE_INIT: f64 = 1e-2;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GpError {
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive definite even with jitter {max_jitter:e}")]
    NotPsd { max_jitter: f64 },
    #[error("fit exceeded its {budget:?} budget after {elapsed:?}")]
    FitTimeout { elapsed: Duration, budget: Duration },
    #[error("dataset must contain at least {0} points")]
    TooFewPoints(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Training data with standardized targets. Inputs live in `[0, 1]^D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y_raw: Vec<f64>,
    pub y: DVector<f64>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y_raw: Vec<f64>) -> Result<Self, GpError> {
        if y_raw.is_empty() {
            return Err(GpError::TooFewPoints(1));
        }
        if x.nrows() != y_raw.len() {
            return Err(GpError::Shape(format!("{} points but {} targets", x.nrows(), y_raw.len())));
        }
        let n = y_raw.len() as f64;
        let y_mean = y_raw.iter().sum::<f64>() / n;
        let var = if y_raw.len() > 1 {
            y_raw.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let y_std = if var > 0.0 && var.sqrt() > 1e-12 * y_mean.abs().max(1e-300) {
            var.sqrt()
        } else {
            1.0
        };
        let y = DVector::from_iterator(y_raw.len(), y_raw.iter().map(|v| (v - y_mean) / y_std));
        Ok(Self {
            x,
            y_raw,
            y,
            y_mean,
            y_std,
        })
    }

    pub fn n(&self) -> usize {
        self.y_raw.len()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.y_mean) / self.y_std
    }

    pub fn destandardize(&self, v: f64) -> f64 {
        v * self.y_std + self.y_mean
    }

    /// A new dataset with extra rows; standardization is recomputed.
    pub fn extended(&self, points: &DMatrix<f64>, values: &[f64]) -> Result<Self, GpError> {
        if points.ncols() != self.dim() || points.nrows() != values.len() {
            return Err(GpError::Shape("appended block does not match the dataset".into()));
        }
        let n = self.n();
        let mut x = self.x.clone().resize_vertically(n + points.nrows(), 0.0);
        x.rows_mut(n, points.nrows()).copy_from(points);
        let mut y = self.y_raw.clone();
        y.extend_from_slice(values);
        Dataset::new(x, y)
    }

    pub fn best_raw(&self) -> f64 {
        self.y_raw.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Cholesky factorization with an escalating diagonal jitter.
///
/// Tries at most `max_tries` rungs of [`JITTER_LADDER`]. Returns the factor
/// and the absolute jitter that was added.
pub fn cholesky_with_jitter(k: &DMatrix<f64>, max_tries: usize) -> Result<(Cholesky<f64, Dyn>, f64), GpError> {
    if !k.is_square() {
        return Err(GpError::Shape(format!("{}x{} is not square", k.nrows(), k.ncols())));
    }
    let asym = (k - k.transpose()).amax();
    let scale = k.amax().max(1.0);
    if !(asym <= 1e-8 * scale) {
        return Err(GpError::NotSymmetric(asym));
    }
    let n = k.nrows();
    let mean_diag = if n == 0 { 1.0 } else { k.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64 };
    let mean_diag = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let tries = max_tries.clamp(1, JITTER_LADDER.len());
    let mut last = 0.0;
    for rel in &JITTER_LADDER[..tries] {
        let jitter = rel * mean_diag;
        last = jitter;
        let mut m = k.clone();
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            if c.l_dirty().diagonal().iter().all(|v| v.is_finite() && *v > 0.0) {
                return Ok((c, jitter));
            }
        }
    }
    Err(GpError::NotPsd { max_jitter: last })
}

/// Inverse of the factored matrix as `L^-T L^-1`, using the triangular
/// structure of `L^-1`.
pub(crate) fn spd_inverse(chol: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
    let l = chol.l_dirty();
    let n = l.nrows();
    let mut linv = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut x = linv.column_mut(j);
        x[j] = 1.0;
        for k in j..n {
            let xk = x[k] / l[(k, k)];
            x[k] = xk;
            if xk != 0.0 && k + 1 < n {
                x.rows_mut(k + 1, n - k - 1).axpy(-xk, &l.column(k).rows(k + 1, n - k - 1), 1.0);
            }
        }
    }
    linv.tr_mul(&linv)
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub restarts: usize,
    pub max_iters: usize,
    pub budget: Duration,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 3,
            max_iters: 60,
            budget: Duration::from_secs(60),
        }
    }
}

/// A kernel with fitted hyperparameters, factorized against its data.
#[derive(Debug, Clone)]
pub struct FittedGP {
    kernel: Kernel,
    pub params: Vec<f64>,
    pub noise: f64,
    chol: Cholesky<f64, Dyn>,
    pub alpha: DVector<f64>,
    /// Log marginal likelihood at the fitted point (no prior terms).
    pub mll: f64,
    /// Sum of hyperprior log densities at the fitted point.
    pub log_prior: f64,
    pub jitter_used: f64,
    x: DMatrix<f64>,
    y: DVector<f64>,
    y_mean: f64,
    y_std: f64,
}

/// Posterior in raw-output units.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Standardized-space prediction at one point with input gradients.
#[derive(Debug, Clone)]
pub struct PointPrediction {
    pub mean: f64,
    pub var: f64,
    pub d_mean: Vec<f64>,
    pub d_var: Vec<f64>,
}

struct Objective<'a> {
    kernel: &'a Kernel,
    data: &'a Dataset,
}

struct Evaluated {
    neg: f64,
    grad: Vec<f64>,
    mll: f64,
    log_prior: f64,
}

impl<'a> Objective<'a> {
    fn n_vars(&self) -> usize {
        self.kernel.n_params() + 1
    }

    fn natural(&self, u: &[f64]) -> (Vec<f64>, f64) {
        let specs = self.kernel.specs();
        let theta = specs.iter().zip(u).map(|(s, v)| s.to_natural(*v)).collect();
        (theta, u[specs.len()].exp())
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lo = Vec::with_capacity(self.n_vars());
        let mut hi = Vec::with_capacity(self.n_vars());
        for s in self.kernel.specs() {
            let (a, b) = s.unconstrained_bounds();
            lo.push(a);
            hi.push(b);
        }
        lo.push(NOISE_FLOOR.ln());
        hi.push(NOISE_CEIL.ln());
        (lo, hi)
    }

    fn init(&self) -> Vec<f64> {
        let mut u: Vec<f64> = self.kernel.specs().iter().map(|s| s.to_unconstrained(s.init)).collect();
        u.push(NOISE_INIT.ln());
        u
    }

    /// Negative log posterior and its gradient in unconstrained space.
    fn eval(&self, u: &[f64]) -> Option<Evaluated> {
        let (theta, noise) = self.natural(u);
        let x = &self.data.x;
        let tape = self.kernel.forward(&theta, x, x).ok()?;
        let mut k = tape.gram().clone();
        let n = k.nrows();
        for i in 0..n {
            k[(i, i)] += noise;
        }
        let (chol, _) = cholesky_with_jitter(&k, JITTER_LADDER.len()).ok()?;
        let alpha = chol.solve(&self.data.y);
        let logdet: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        let mll = -0.5 * self.data.y.dot(&alpha) - logdet - 0.5 * n as f64 * LN_2PI;
        let kinv = spd_inverse(&chol);
        let w = (&alpha * alpha.transpose() - kinv) * 0.5;
        let bw = self.kernel.backward(&tape, &theta, &w);
        let specs = self.kernel.specs();
        let mut grad = Vec::with_capacity(self.n_vars());
        let mut log_prior = 0.0;
        for (i, s) in specs.iter().enumerate() {
            let (lp, dlp) = s.log_prior(u[i]);
            log_prior += lp;
            grad.push(-(bw.grad[i] * s.jacobian(u[i]) + dlp));
        }
        grad.push(-w.trace() * noise);
        let neg = -(mll + log_prior);
        if !neg.is_finite() {
            return None;
        }
        Some(Evaluated {
            neg,
            grad,
            mll,
            log_prior,
        })
    }
}

fn restart_point(obj: &Objective, lo: &[f64], hi: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let specs = obj.kernel.specs();
    let mut u: Vec<f64> = specs
        .iter()
        .map(|s| {
            let z: f64 = rng.sample(StandardNormal);
            match (&s.prior, s.transform) {
                (Some(p), crate::dsl::Transform::Log) => p.mu + p.sigma * z,
                _ => s.to_unconstrained(s.init) + z,
            }
        })
        .collect();
    let z: f64 = rng.sample(StandardNormal);
    u.push(NOISE_INIT.ln() + z);
    for i in 0..u.len() {
        u[i] = u[i].clamp(lo[i], hi[i]);
    }
    u
}

/// MAP fit of kernel hyperparameters and noise with random restarts.
///
/// The first restart starts from the declared initial values, the rest from
/// prior draws (or a unit Gaussian perturbation in unconstrained space for
/// parameters without a prior). Deterministic given `seed`.
pub fn fit_gp(data: &Dataset, expr: &KernelExpr, opts: &FitOptions, seed: u64) -> Result<FittedGP, GpError> {
    if data.n() < 2 {
        return Err(GpError::TooFewPoints(2));
    }
    let start = Instant::now();
    let kernel = Kernel::new(expr.clone(), data.dim());
    let obj = Objective { kernel: &kernel, data };
    let (lo, hi) = obj.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LbfgsConfig {
        max_iters: opts.max_iters,
        ..Default::default()
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut timed_out = false;
    for r in 0..opts.restarts.max(1) {
        let u0 = if r == 0 { obj.init() } else { restart_point(&obj, &lo, &hi, &mut rng) };
        if start.elapsed() > opts.budget {
            timed_out = true;
            break;
        }
        let res = minimize_box(
            |u| obj.eval(u).map(|e| (e.neg, e.grad)),
            &u0,
            &lo,
            &hi,
            &cfg,
            || start.elapsed() > opts.budget,
        );
        let Some(res) = res else { continue };
        if res.termination == Termination::Stopped {
            timed_out = true;
            break;
        }
        if best.as_ref().map_or(true, |(f, _)| res.f < *f) {
            best = Some((res.f, res.x));
        }
    }
    if timed_out {
        return Err(GpError::FitTimeout {
            elapsed: start.elapsed(),
            budget: opts.budget,
        });
    }
    let (_, u) = best.ok_or(GpError::NotPsd {
        max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
    })?;
    let ev = obj.eval(&u).expect("optimizer returned a feasible point");
    let (theta, noise) = obj.natural(&u);
    FittedGP::build(kernel, theta, noise, data, ev.mll, ev.log_prior)
}

impl FittedGP {
    fn build(kernel: Kernel, params: Vec<f64>, noise: f64, data: &Dataset, mll: f64, log_prior: f64) -> Result<Self, GpError> {
        let (chol, jitter, alpha) = factor(&kernel, &params, noise, &data.x, &data.y)?;
        Ok(Self {
            kernel,
            params,
            noise,
            chol,
            alpha,
            mll,
            log_prior,
            jitter_used: jitter,
            x: data.x.clone(),
            y: data.y.clone(),
            y_mean: data.y_mean,
            y_std: data.y_std,
        })
    }

    /// Builds a GP at fixed hyperparameters (no optimization).
    pub fn at_params(expr: &KernelExpr, params: Vec<f64>, noise: f64, data: &Dataset) -> Result<Self, GpError> {
        let kernel = Kernel::new(expr.clone(), data.dim());
        let (chol, jitter, alpha) = factor(&kernel, &params, noise, &data.x, &data.y)?;
        let n = data.n();
        let logdet: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        let mll = -0.5 * data.y.dot(&alpha) - logdet - 0.5 * n as f64 * LN_2PI;
        Ok(Self {
            kernel,
            params,
            noise,
            chol,
            alpha,
            mll,
            log_prior: 0.0,
            jitter_used: jitter,
            x: data.x.clone(),
            y: data.y.clone(),
            y_mean: data.y_mean,
            y_std: data.y_std,
        })
    }

    pub fn expr(&self) -> &KernelExpr {
        self.kernel.expr()
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn n_params(&self) -> usize {
        self.kernel.n_params()
    }

    pub fn chol(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    pub fn train_x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn train_y(&self) -> &DVector<f64> {
        &self.y
    }

    /// Training covariance including noise and jitter.
    pub fn train_cov(&self) -> Result<DMatrix<f64>, GpError> {
        let mut k = self.kernel.gram(&self.params, &self.x, &self.x)?;
        for i in 0..k.nrows() {
            k[(i, i)] += self.noise + self.jitter_used;
        }
        Ok(k)
    }

    /// Latent posterior at query rows, in raw-output units.
    pub fn posterior(&self, xq: &DMatrix<f64>) -> Result<Posterior, GpError> {
        let p = self.posterior_standardized(xq)?;
        Ok(Posterior {
            mean: p.mean.iter().map(|m| self.y_mean + self.y_std * m).collect(),
            var: p.var.iter().map(|v| self.y_std * self.y_std * v).collect(),
        })
    }

    /// Latent posterior at query rows, in standardized units.
    pub fn posterior_standardized(&self, xq: &DMatrix<f64>) -> Result<Posterior, GpError> {
        let ks = self.kernel.gram(&self.params, xq, &self.x)?;
        let mean_s = &ks * &self.alpha;
        let v = self
            .chol
            .l_dirty()
            .lower_triangle()
            .solve_lower_triangular(&ks.transpose())
            .ok_or_else(|| GpError::Shape("triangular solve failed".into()))?;
        let mut mean = Vec::with_capacity(xq.nrows());
        let mut var = Vec::with_capacity(xq.nrows());
        for i in 0..xq.nrows() {
            let row = xq.rows(i, 1).into_owned();
            let kxx = self.kernel.gram(&self.params, &row, &row)?[(0, 0)];
            let explained: f64 = v.column(i).norm_squared();
            mean.push(mean_s[i]);
            var.push((kxx - explained).max(0.0));
        }
        Ok(Posterior { mean, var })
    }

    /// Standardized mean/variance at `x` with gradients with respect to `x`.
    pub fn predict_point(&self, x: &[f64]) -> Result<PointPrediction, GpError> {
        let d = x.len();
        let xq = DMatrix::from_row_slice(1, d, x);
        let tape = self.kernel.forward(&self.params, &xq, &self.x)?;
        let ks = tape.gram();
        let mean = (ks * &self.alpha)[0];
        let kt = ks.transpose();
        let w = self.chol.solve(&kt);
        let explained = kt.dot(&w);
        let self_tape = self.kernel.forward(&self.params, &xq, &xq)?;
        let kxx = self_tape.gram()[(0, 0)];
        let var = kxx - explained;

        let g_mean = DMatrix::from_row_slice(1, self.x.nrows(), self.alpha.as_slice());
        let d_mean = self.kernel.backward(&tape, &self.params, &g_mean).x1;
        let g_var = DMatrix::from_row_slice(1, self.x.nrows(), (&w * -2.0).as_slice());
        let bv = self.kernel.backward(&tape, &self.params, &g_var).x1;
        let one = DMatrix::from_element(1, 1, 1.0);
        let bs = self.kernel.backward(&self_tape, &self.params, &one);
        let d_var: Vec<f64> = (0..d).map(|j| bv[(0, j)] + bs.x1[(0, j)] + bs.x2[(0, j)]).collect();
        Ok(PointPrediction {
            mean,
            var,
            d_mean: d_mean.row(0).iter().copied().collect(),
            d_var,
        })
    }

    /// Same hyperparameters, training set extended by `(x, y_std)` pairs
    /// given in standardized units.
    pub fn condition_on(&self, x: &DMatrix<f64>, y_std_units: &[f64]) -> Result<FittedGP, GpError> {
        let n = self.x.nrows();
        let mut xs = self.x.clone().resize_vertically(n + x.nrows(), 0.0);
        xs.rows_mut(n, x.nrows()).copy_from(x);
        let mut ys = self.y.clone().resize_vertically(n + x.nrows(), 0.0);
        for (i, v) in y_std_units.iter().enumerate() {
            ys[n + i] = *v;
        }
        let (chol, jitter, alpha) = factor(&self.kernel, &self.params, self.noise, &xs, &ys)?;
        Ok(FittedGP {
            kernel: self.kernel.clone(),
            params: self.params.clone(),
            noise: self.noise,
            chol,
            alpha,
            mll: self.mll,
            log_prior: self.log_prior,
            jitter_used: jitter,
            x: xs,
            y: ys,
            y_mean: self.y_mean,
            y_std: self.y_std,
        })
    }
}

fn factor(
    kernel: &Kernel,
    params: &[f64],
    noise: f64,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(Cholesky<f64, Dyn>, f64, DVector<f64>), GpError> {
    let mut k = kernel.gram(params, x, x)?;
    for i in 0..k.nrows() {
        k[(i, i)] += noise;
    }
    let (chol, jitter) = cholesky_with_jitter(&k, JITTER_LADDER.len())?;
    let alpha = chol.solve(y);
    Ok((chol, jitter, alpha))
}

/// Analytic versus central-difference gradient of the negative log posterior.
#[derive(Debug, Clone)]
pub struct GradientCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `max_i |a_i - n_i| / max(|a|_inf, |n|_inf)`.
    pub max_rel_deviation: f64,
}

/// Compares the implemented gradient with central differences (step `h`
/// in unconstrained space). `u` defaults to the initial point; the last
/// coordinate is the log noise variance.
pub fn mll_gradient_check(expr: &KernelExpr, data: &Dataset, u: Option<&[f64]>, h: f64) -> Option<GradientCheck> {
    let kernel = Kernel::new(expr.clone(), data.dim());
    let obj = Objective { kernel: &kernel, data };
    let u = u.map(<[f64]>::to_vec).unwrap_or_else(|| obj.init());
    let analytic = obj.eval(&u)?.grad;
    let mut numeric = Vec::with_capacity(u.len());
    for i in 0..u.len() {
        let mut up = u.clone();
        let mut um = u.clone();
        up[i] += h;
        um[i] -= h;
        numeric.push((obj.eval(&up)?.neg - obj.eval(&um)?.neg) / (2.0 * h));
    }
    let scale = analytic.iter().chain(&numeric).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let dev = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    Some(GradientCheck {
        analytic,
        numeric,
        max_rel_deviation: dev / scale,
    })
}

/// Number of unconstrained variables for `expr` at dimension `dim`
/// (kernel hyperparameters plus the noise variance).
pub fn n_fit_vars(expr: &KernelExpr, dim: usize) -> usize {
    Kernel::new(expr.clone(), dim).n_params() + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{parse, BaseKernel};

    fn rand_points(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.gen::<f64>())
    }

    #[test]
    fn jitter_ladder_cases() {
        let (c, j) = cholesky_with_jitter(&DMatrix::identity(3, 3), 4).unwrap();
        assert_eq!(j, 0.0);
        assert_eq!(c.l(), DMatrix::identity(3, 3));
        let ones = DMatrix::from_element(2, 2, 1.0);
        let (_, j) = cholesky_with_jitter(&ones, 4).unwrap();
        assert!(j > 0.0);
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky_with_jitter(&indef, 4), Err(GpError::NotPsd { .. })));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(cholesky_with_jitter(&asym, 4), Err(GpError::NotSymmetric(_))));
    }

    #[test]
    fn standardization_round_trip() {
        let d = Dataset::new(rand_points(5, 2, 0), vec![3.0, -1.0, 2.5, 7.0, 0.1]).unwrap();
        for v in &d.y_raw {
            assert!((d.destandardize(d.standardize(*v)) - v).abs() < 1e-12);
        }
        let flat = Dataset::new(rand_points(3, 2, 0), vec![4.0; 3]).unwrap();
        assert_eq!(flat.y_std, 1.0);
    }

    #[test]
    fn identical_targets_fit() {
        let d = Dataset::new(rand_points(2, 2, 1), vec![1.5, 1.5]).unwrap();
        let gp = fit_gp(&d, &BaseKernel::Rbf.expr(), &FitOptions::default(), 0).unwrap();
        assert!(gp.noise >= NOISE_FLOOR);
    }

    #[test]
    fn one_point_posterior_matches_hand_formula() {
        let x = DMatrix::from_row_slice(1, 1, &[0.3]);
        // With one point y is standardized to 0 and y_std = 1.
        let d = Dataset::new(x, vec![2.0]).unwrap();
        let e = parse("scale(rbf(ard))").unwrap();
        let (s2, l, noise) = (1.7, 0.4, 0.01);
        let gp = FittedGP::at_params(&e, vec![s2, l], noise, &d).unwrap();
        let q = 0.9;
        let k = s2 * (-0.5 * ((q - 0.3) / l).powi(2)).exp();
        let post = gp.posterior(&DMatrix::from_row_slice(1, 1, &[q])).unwrap();
        assert!((post.mean[0] - 2.0).abs() < 1e-12);
        assert!((post.var[0] - (s2 - k * k / (s2 + noise))).abs() < 1e-12);
    }

    #[test]
    fn interpolates_and_reverts() {
        let x = rand_points(8, 2, 2);
        let y: Vec<f64> = (0..8).map(|i| (3.0 * x[(i, 0)]).sin() + x[(i, 1)]).collect();
        let d = Dataset::new(x.clone(), y.clone()).unwrap();
        let e = BaseKernel::Rbf.expr();
        let gp = FittedGP::at_params(&e, vec![1.0, 0.3, 0.3], 1e-9, &d).unwrap();
        let post = gp.posterior(&x).unwrap();
        for i in 0..8 {
            assert!((post.mean[i] - y[i]).abs() < 1e-6);
        }
        let far = DMatrix::from_row_slice(1, 2, &[40.0, -40.0]);
        let p = gp.posterior(&far).unwrap();
        assert!((p.var[0] - d.y_std * d.y_std).abs() < 1e-9);
    }

    #[test]
    fn fit_is_monotone_and_deterministic() {
        let x = rand_points(15, 2, 3);
        let y: Vec<f64> = (0..15).map(|i| (5.0 * x[(i, 0)]).cos() * x[(i, 1)]).collect();
        let d = Dataset::new(x, y).unwrap();
        let e = BaseKernel::Matern52.expr();
        let opts = FitOptions::default();
        let a = fit_gp(&d, &e, &opts, 7).unwrap();
        let b = fit_gp(&d, &e, &opts, 7).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.noise, b.noise);
        let k = Kernel::new(e.clone(), 2);
        let init = FittedGP::at_params(&e, k.default_params(), NOISE_INIT, &d).unwrap();
        let init_prior: f64 = k.specs().iter().map(|s| s.log_prior(s.to_unconstrained(s.init)).0).sum();
        assert!(a.mll + a.log_prior >= init.mll + init_prior);
    }

    #[test]
    fn zero_budget_times_out() {
        let d = Dataset::new(rand_points(6, 2, 4), vec![0.0, 1.0, 2.0, 0.5, 0.3, 0.9]).unwrap();
        let opts = FitOptions {
            budget: Duration::ZERO,
            ..Default::default()
        };
        assert!(matches!(fit_gp(&d, &BaseKernel::Rq.expr(), &opts, 0), Err(GpError::FitTimeout { .. })));
    }

    #[test]
    fn reconstruction() {
        let x = rand_points(20, 3, 5);
        let y: Vec<f64> = (0..20).map(|i| x[(i, 0)] - x[(i, 2)]).collect();
        let d = Dataset::new(x, y).unwrap();
        let gp = fit_gp(&d, &BaseKernel::Rq.expr(), &FitOptions::default(), 1).unwrap();
        let k = gp.train_cov().unwrap();
        let l = gp.chol().l();
        let err = (&l * l.transpose() - &k).amax() / k.amax();
        assert!(err < 1e-8);
    }

    #[test]
    fn point_gradients_match_finite_differences() {
        let x = rand_points(10, 3, 6);
        let y: Vec<f64> = (0..10).map(|i| x[(i, 0)] * x[(i, 1)]).collect();
        let d = Dataset::new(x, y).unwrap();
        for b in [BaseKernel::Rbf, BaseKernel::Linear, BaseKernel::Bock] {
            let e = b.expr();
            let k = Kernel::new(e.clone(), 3);
            let gp = FittedGP::at_params(&e, k.default_params(), 1e-3, &d).unwrap();
            let p = [0.21, 0.64, 0.37];
            let pred = gp.predict_point(&p).unwrap();
            for j in 0..3 {
                let mut a = p;
                let mut c = p;
                a[j] += 1e-6;
                c[j] -= 1e-6;
                let (pa, pc) = (gp.predict_point(&a).unwrap(), gp.predict_point(&c).unwrap());
                let fm = (pa.mean - pc.mean) / 2e-6;
                let fv = (pa.var - pc.var) / 2e-6;
                assert!((fm - pred.d_mean[j]).abs() < 1e-5 * fm.abs().max(1.0), "{} mean {j}", b.name());
                assert!((fv - pred.d_var[j]).abs() < 1e-5 * fv.abs().max(1.0), "{} var {j}", b.name());
            }
        }
    }
}
