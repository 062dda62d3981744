//! Projected limited-memory BFGS for box-constrained minimization.
//!
//! Active bounds are detected from the sign of the gradient, the two-loop
//! recursion runs on the free coordinates only, and an Armijo backtracking
//! search walks along the projected path. Every accepted step strictly
//! decreases the objective.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy)]
pub struct LbfgsConfig {
    pub max_iters: usize,
    pub memory: usize,
    /// Stop when the projected-gradient infinity norm falls below this.
    pub pgtol: f64,
    /// Stop when the relative decrease of one step falls below this.
    pub ftol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            memory: 10,
            pgtol: 1e-5,
            ftol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIters,
    LineSearchFailed,
    Stopped,
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iters: usize,
    pub termination: Termination,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` over the box `[lo, hi]` starting at `x0`.
///
/// `f` returns `None` where the objective is undefined; such points are
/// treated as infinitely bad during the line search. Returns `None` when the
/// starting point itself is undefined. `stop` is polled once per iteration.
pub fn minimize_box<F, S>(
    mut f: F,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    cfg: &LbfgsConfig,
    mut stop: S,
) -> Option<OptimResult>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
    S: FnMut() -> bool,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let (mut fx, mut g) = f(&x).filter(|(v, g)| v.is_finite() && g.iter().all(|c| c.is_finite()))?;
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut iters = 0;
    let finish = |x, f, grad, iters, termination| OptimResult {
        x,
        f,
        grad,
        iters,
        termination,
    };
    loop {
        if stop() {
            return Some(finish(x, fx, g, iters, Termination::Stopped));
        }
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0)))
            .collect();
        let pg = (0..n)
            .map(|i| ((x[i] - g[i]).clamp(lo[i], hi[i]) - x[i]).abs())
            .fold(0.0, f64::max);
        if pg < cfg.pgtol {
            return Some(finish(x, fx, g, iters, Termination::Converged));
        }
        if iters >= cfg.max_iters {
            return Some(finish(x, fx, g, iters, Termination::MaxIters));
        }
        iters += 1;

        let mask = |v: &mut Vec<f64>| {
            for i in 0..n {
                if !free[i] {
                    v[i] = 0.0;
                }
            }
        };
        let mut q = g.clone();
        mask(&mut q);
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            for i in 0..n {
                q[i] -= a * y[i];
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = hist.back() {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for i in 0..n {
                q[i] += s[i] * (a - b);
            }
        }
        let mut d: Vec<f64> = q.iter().map(|v| -v).collect();
        mask(&mut d);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            hist.clear();
            d = g.iter().map(|v| -v).collect();
            mask(&mut d);
            slope = dot(&g, &d);
            if !(slope < 0.0) {
                return Some(finish(x, fx, g, iters, Termination::Converged));
            }
        }

        let mut t = if hist.is_empty() {
            let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            (1.0 / dmax).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn: Vec<f64> = (0..n).map(|i| x[i] + t * d[i]).collect();
            project(&mut xn, lo, hi);
            let step: Vec<f64> = (0..n).map(|i| xn[i] - x[i]).collect();
            let decrease = dot(&g, &step);
            if step.iter().all(|v| *v == 0.0) {
                break;
            }
            if let Some((fnew, gnew)) = f(&xn) {
                if fnew.is_finite() && gnew.iter().all(|c| c.is_finite()) && fnew <= fx + 1e-4 * decrease && fnew < fx {
                    accepted = Some((xn, fnew, gnew, step));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gnew, s)) = accepted else {
            if hist.is_empty() {
                return Some(finish(x, fx, g, iters, Termination::LineSearchFailed));
            }
            // Retry from steepest descent before giving up.
            hist.clear();
            continue;
        };
        let y: Vec<f64> = (0..n).map(|i| gnew[i] - g[i]).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).max(1e-300) {
            if hist.len() == cfg.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, 1.0 / sy));
        }
        let rel = (fx - fnew) / fx.abs().max(fnew.abs()).max(1.0);
        x = xn;
        fx = fnew;
        g = gnew;
        if rel < cfg.ftol {
            return Some(finish(x, fx, g, iters, Termination::Converged));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosen(x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Some((f, g))
    }

    #[test]
    fn unconstrained_rosenbrock() {
        let cfg = LbfgsConfig {
            max_iters: 500,
            ..Default::default()
        };
        let r = minimize_box(rosen, &[-1.2, 1.0], &[-5.0, -5.0], &[5.0, 5.0], &cfg, || false).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r);
    }

    #[test]
    fn active_bound() {
        // Minimum of (x - 3)^2 + (y + 1)^2 on [0, 2] x [0, 2] is (2, 0).
        let f = |x: &[f64]| Some(((x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(2), vec![2.0 * (x[0] - 3.0), 2.0 * (x[1] + 1.0)]));
        let r = minimize_box(f, &[0.5, 1.5], &[0.0, 0.0], &[2.0, 2.0], &LbfgsConfig::default(), || false).unwrap();
        assert_eq!(r.x, vec![2.0, 0.0]);
        assert_eq!(r.termination, Termination::Converged);
    }

    #[test]
    fn monotone_and_stoppable() {
        let mut calls = 0;
        let r = minimize_box(rosen, &[-1.2, 1.0], &[-5.0; 2], &[5.0; 2], &LbfgsConfig::default(), || {
            calls += 1;
            calls > 3
        })
        .unwrap();
        assert_eq!(r.termination, Termination::Stopped);
        assert!(r.f <= rosen(&[-1.2, 1.0]).unwrap().0);
    }

    #[test]
    fn undefined_start() {
        assert!(minimize_box(|_| None, &[0.0], &[-1.0], &[1.0], &LbfgsConfig::default(), || false).is_none());
    }
}
