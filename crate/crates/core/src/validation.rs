//! Admission checks for candidate kernels: shape-agnostic evaluation,
//! empirical positive semi-definiteness, and a timed trial fit.

use std::fmt;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsl::{eval_gram_batched, Kernel, KernelExpr};
use crate::gp::{cholesky_with_jitter, fit_gp, Dataset, FitOptions, FittedGP, GpError};

/// Dimensions used by the shape check.
pub const AGN_DIMS: [usize; 3] = [2, 7, 50];
/// Dimensions used by the PSD check.
pub const PSD_DIMS: [usize; 3] = [2, 10, 100];
pub const PSD_POINTS: usize = 64;
/// Jitter ladder rungs allowed in the PSD check (up to `1e-6 * mean diag`).
pub const PSD_MAX_TRIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Agn,
    Psd,
    FitTime,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Agn => "agn",
            Stage::Psd => "psd",
            Stage::FitTime => "fit_time",
        })
    }
}

/// Outcome of a check. `stage` is the last stage run, on pass or fail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub passed: bool,
    pub stage: Stage,
    pub detail: String,
    pub trials_run: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_seconds: Option<f64>,
}

impl Verdict {
    fn pass(stage: Stage, trials_run: usize) -> Self {
        Self {
            passed: true,
            stage,
            detail: String::new(),
            trials_run,
            fit_seconds: None,
        }
    }

    fn fail(stage: Stage, trials_run: usize, detail: impl Into<String>) -> Self {
        Self {
            passed: false,
            stage,
            detail: detail.into(),
            trials_run,
            fit_seconds: None,
        }
    }
}

/// Anything that yields Gram blocks for inputs of any dimension.
pub trait GramSource: Sync {
    fn label(&self) -> String;
    /// Random admissible parameters for inputs of dimension `dim`.
    fn sample_params(&self, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64>;
    fn gram(&self, params: &[f64], x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>, String>;

    /// Blocks over a leading batch axis; a batch of one broadcasts.
    fn gram_batched(&self, params: &[f64], x1: &[DMatrix<f64>], x2: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>, String> {
        let b = match (x1.len(), x2.len()) {
            (l, r) if l == r => l,
            (1, r) => r,
            (l, 1) => l,
            (l, r) => return Err(format!("batch sizes differ: {l} vs {r}")),
        };
        (0..b)
            .map(|i| self.gram(params, &x1[if x1.len() == 1 { 0 } else { i }], &x2[if x2.len() == 1 { 0 } else { i }]))
            .collect()
    }
}

impl GramSource for KernelExpr {
    fn label(&self) -> String {
        self.render()
    }

    /// Unconstrained initial values perturbed by `U(-1, 1)`, clamped to the
    /// declared bounds.
    fn sample_params(&self, dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        Kernel::new(self.clone(), dim)
            .specs()
            .iter()
            .map(|s| {
                let (lo, hi) = s.unconstrained_bounds();
                let u = (s.to_unconstrained(s.init) + rng.gen_range(-1.0..1.0)).clamp(lo, hi);
                s.to_natural(u)
            })
            .collect()
    }

    fn gram(&self, params: &[f64], x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>, String> {
        Kernel::new(self.clone(), x1.ncols()).gram(params, x1, x2).map_err(|e| e.to_string())
    }

    fn gram_batched(&self, params: &[f64], x1: &[DMatrix<f64>], x2: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>, String> {
        eval_gram_batched(self, params, x1, x2)
            .map(|v| v.into_iter().map(|g| g.entries).collect())
            .map_err(|e| e.to_string())
    }
}

/// Deliberately broken kernels that the DSL cannot express, used to
/// exercise the validator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestKernel {
    /// RBF plus an `n1 x n1` identity block.
    IdentityAdd,
    /// RBF evaluated only on the leading `min(n1, n2)` square block.
    DiagExtract,
    /// `a exp(-d^2) + b d + c`.
    DistanceTerm,
    /// `a exp(-d^2 / 2) + (1 - a) cos(pi d^2)`.
    CosDistSq,
}

impl TestKernel {
    pub const ALL: [TestKernel; 4] = [
        TestKernel::IdentityAdd,
        TestKernel::DiagExtract,
        TestKernel::DistanceTerm,
        TestKernel::CosDistSq,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TestKernel::IdentityAdd => "identity-add",
            TestKernel::DiagExtract => "diag-extract",
            TestKernel::DistanceTerm => "distance-term",
            TestKernel::CosDistSq => "cos-dist-sq",
        }
    }

    pub fn from_name(name: &str) -> Option<TestKernel> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

fn sq_dist(x1: &DMatrix<f64>, i: usize, x2: &DMatrix<f64>, j: usize) -> f64 {
    (0..x1.ncols()).map(|c| (x1[(i, c)] - x2[(j, c)]).powi(2)).sum()
}

impl GramSource for TestKernel {
    fn label(&self) -> String {
        format!("test:{}", self.name())
    }

    fn sample_params(&self, _dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            TestKernel::IdentityAdd | TestKernel::DiagExtract => vec![rng.gen_range(0.2..2.0)],
            TestKernel::DistanceTerm => vec![rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0), rng.gen_range(0.01..1.0)],
            TestKernel::CosDistSq => vec![rng.gen_range(0.1..0.6)],
        }
    }

    fn gram(&self, p: &[f64], x1: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>, String> {
        if x1.ncols() != x2.ncols() {
            return Err(format!("column mismatch {} vs {}", x1.ncols(), x2.ncols()));
        }
        let (n1, n2) = (x1.nrows(), x2.nrows());
        Ok(match self {
            TestKernel::IdentityAdd => {
                let m = n1.min(n2);
                let mut k = DMatrix::from_fn(n1, n1, |i, j| {
                    if j < n2 {
                        (-sq_dist(x1, i, x2, j) / (2.0 * p[0] * p[0])).exp()
                    } else {
                        0.0
                    }
                });
                for i in 0..n1 {
                    k[(i, i)] += if i < m { 1.0 } else { 0.0 };
                }
                k
            }
            TestKernel::DiagExtract => {
                let m = n1.min(n2);
                DMatrix::from_fn(m, m, |i, j| (-sq_dist(x1, i, x2, j) / (2.0 * p[0] * p[0])).exp())
            }
            TestKernel::DistanceTerm => DMatrix::from_fn(n1, n2, |i, j| {
                let d2 = sq_dist(x1, i, x2, j);
                p[0] * (-d2).exp() + p[1] * d2.sqrt() + p[2]
            }),
            TestKernel::CosDistSq => DMatrix::from_fn(n1, n2, |i, j| {
                let d2 = sq_dist(x1, i, x2, j);
                p[0] * (-d2 / 2.0).exp() + (1.0 - p[0]) * (std::f64::consts::PI * d2).cos()
            }),
        })
    }
}

fn uniform(n: usize, d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| rng.gen::<f64>())
}

fn check_block(k: &DMatrix<f64>, rows: usize, cols: usize) -> Result<(), String> {
    if k.nrows() != rows || k.ncols() != cols {
        return Err(format!("expected {rows}x{cols}, got {}x{}", k.nrows(), k.ncols()));
    }
    if let Some(v) = k.iter().find(|v| !v.is_finite()) {
        return Err(format!("non-finite entry {v}"));
    }
    Ok(())
}

/// Evaluates the source on self, cross (5x1 and 3x7 row counts) and
/// batched (`(1,4,D) x (1,3,D)`) inputs for each dimension in
/// [`AGN_DIMS`].
pub fn check_shape_agnostic<S: GramSource + ?Sized>(source: &S) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ba9e);
    let mut trials = 0;
    for &d in &AGN_DIMS {
        let params = source.sample_params(d, &mut rng);
        let cases: [(&str, usize, usize); 4] = [("self", 6, 6), ("cross 5x1", 5, 1), ("cross 3x7", 3, 7), ("batched 4x3", 4, 3)];
        for (name, n1, n2) in cases {
            trials += 1;
            let a = uniform(n1, d, &mut rng);
            let b = if name == "self" { a.clone() } else { uniform(n2, d, &mut rng) };
            let res = if name.starts_with("batched") {
                source.gram_batched(&params, &[a], &[b]).and_then(|ks| match ks.as_slice() {
                    [k] => check_block(k, n1, n2),
                    _ => Err(format!("expected one batch entry, got {}", ks.len())),
                })
            } else {
                source.gram(&params, &a, &b).and_then(|k| check_block(&k, n1, n2))
            };
            if let Err(e) = res {
                return Verdict::fail(Stage::Agn, trials, format!("D={d} {name}: {e}"));
            }
        }
    }
    Verdict::pass(Stage::Agn, trials)
}

/// Cholesky (with the capped jitter ladder) of `params_samples x
/// point_samples` random Gram matrices of [`PSD_POINTS`] points for each
/// dimension in [`PSD_DIMS`].
pub fn check_psd<S: GramSource + ?Sized>(source: &S, params_samples: usize, point_samples: usize, seed: u64) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trials = 0;
    for &d in &PSD_DIMS {
        for _ in 0..params_samples {
            let params = source.sample_params(d, &mut rng);
            for _ in 0..point_samples {
                trials += 1;
                let x = uniform(PSD_POINTS, d, &mut rng);
                let k = match source.gram(&params, &x, &x).and_then(|k| check_block(&k, PSD_POINTS, PSD_POINTS).map(|_| k)) {
                    Ok(k) => k,
                    Err(e) => return Verdict::fail(Stage::Psd, trials, format!("D={d}: {e}")),
                };
                let asym = (&k - k.transpose()).amax();
                if asym > 1e-10 * k.amax().max(1e-300) {
                    return Verdict::fail(Stage::Psd, trials, format!("D={d}: asymmetric by {asym:e}"));
                }
                if let Err(e) = cholesky_with_jitter(&k, PSD_MAX_TRIES) {
                    return Verdict::fail(Stage::Psd, trials, format!("D={d}: {e}"));
                }
            }
        }
    }
    Verdict::pass(Stage::Psd, trials)
}

/// Shape check, PSD check, then a timed fit on `data`. Returns the trial fit
/// when every stage passes.
pub fn validate_and_fit(
    expr: &KernelExpr,
    data: &Dataset,
    fit: &FitOptions,
    seed: u64,
) -> (Verdict, Option<FittedGP>) {
    validate_and_fit_with(expr, data, fit, (5, 5), seed)
}

/// As [`validate_and_fit`] with `(parameter draws, point draws)` for the
/// PSD stage.
pub fn validate_and_fit_with(
    expr: &KernelExpr,
    data: &Dataset,
    fit: &FitOptions,
    psd_samples: (usize, usize),
    seed: u64,
) -> (Verdict, Option<FittedGP>) {
    let agn = check_shape_agnostic(expr);
    if !agn.passed {
        return (agn, None);
    }
    let psd = check_psd(expr, psd_samples.0, psd_samples.1, seed);
    let trials = agn.trials_run + psd.trials_run;
    if !psd.passed {
        return (Verdict { trials_run: trials, ..psd }, None);
    }
    let start = Instant::now();
    let res = fit_gp(data, expr, fit, seed);
    let secs = start.elapsed().as_secs_f64();
    let mut v = match &res {
        Ok(_) => Verdict::pass(Stage::FitTime, trials + 1),
        Err(GpError::FitTimeout { elapsed, budget }) => Verdict::fail(
            Stage::FitTime,
            trials + 1,
            format!("fit took {:.3}s, budget {:.3}s", elapsed.as_secs_f64(), budget.as_secs_f64()),
        ),
        Err(e) => Verdict::fail(Stage::FitTime, trials + 1, format!("fit failed: {e}")),
    };
    v.fit_seconds = Some(secs);
    (v, res.ok())
}

pub fn validate(expr: &KernelExpr, data: &Dataset, fit_budget: Duration) -> Verdict {
    let opts = FitOptions {
        budget: fit_budget,
        ..Default::default()
    };
    validate_and_fit(expr, data, &opts, 0).0
}

/// Running tally of verdicts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationStats {
    pub attempted: usize,
    pub passed: usize,
    pub failed_agn: usize,
    pub failed_psd: usize,
    pub failed_fit: usize,
    /// Proposals that never reached validation (parse or conversion errors).
    #[serde(default)]
    pub failed_conversion: usize,
}

impl ValidationStats {
    pub fn record(&mut self, v: &Verdict) {
        self.attempted += 1;
        if v.passed {
            self.passed += 1;
        } else {
            match v.stage {
                Stage::Agn => self.failed_agn += 1,
                Stage::Psd => self.failed_psd += 1,
                Stage::FitTime => self.failed_fit += 1,
            }
        }
    }

    pub fn record_conversion_failure(&mut self) {
        self.attempted += 1;
        self.failed_conversion += 1;
    }

    /// Share of attempted proposals that were rejected.
    pub fn failure_rate(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            (self.attempted - self.passed) as f64 / self.attempted as f64
        }
    }

    pub fn merge(&mut self, other: &ValidationStats) {
        self.attempted += other.attempted;
        self.passed += other.passed;
        self.failed_agn += other.failed_agn;
        self.failed_psd += other.failed_psd;
        self.failed_fit += other.failed_fit;
        self.failed_conversion += other.failed_conversion;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::BaseKernel;

    #[test]
    fn doubles_fail_at_expected_stage() {
        for (t, stage) in [
            (TestKernel::IdentityAdd, Stage::Agn),
            (TestKernel::DiagExtract, Stage::Agn),
        ] {
            let v = check_shape_agnostic(&t);
            assert!(!v.passed && v.stage == stage, "{t:?}: {v:?}");
            assert!(v.detail.contains("cross 5x1"), "{}", v.detail);
        }
        for t in [TestKernel::DistanceTerm, TestKernel::CosDistSq] {
            assert!(check_shape_agnostic(&t).passed);
            let v = check_psd(&t, 5, 5, 1);
            assert!(!v.passed && v.stage == Stage::Psd, "{t:?}: {v:?}");
        }
    }

    #[test]
    fn base_kernels_pass() {
        for b in BaseKernel::ALL {
            let e = b.expr();
            let a = check_shape_agnostic(&e);
            assert!(a.passed, "{}: {a:?}", b.name());
            let p = check_psd(&e, 2, 2, 3);
            assert!(p.passed && p.detail.is_empty(), "{}: {p:?}", b.name());
        }
    }

    #[test]
    fn zero_budget_fails_fit_stage() {
        let x = DMatrix::from_fn(12, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0);
        let y = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let data = Dataset::new(x, y).unwrap();
        let e: KernelExpr = "scale(rq(ard))".parse().unwrap();
        let v = validate(&e, &data, Duration::ZERO);
        assert!(!v.passed && v.stage == Stage::FitTime, "{v:?}");
        let ok = validate(&e, &data, Duration::from_secs(60));
        assert!(ok.passed && ok.fit_seconds.is_some(), "{ok:?}");
    }

    #[test]
    fn deterministic_and_stats() {
        let e = BaseKernel::Bock.expr();
        assert_eq!(check_psd(&e, 2, 2, 9), check_psd(&e, 2, 2, 9));
        let mut s = ValidationStats::default();
        s.record(&check_shape_agnostic(&TestKernel::IdentityAdd));
        s.record(&check_shape_agnostic(&e));
        s.record_conversion_failure();
        assert_eq!((s.attempted, s.passed, s.failed_agn, s.failed_conversion), (3, 1, 1, 1));
        assert!((s.failure_rate() - 2.0 / 3.0).abs() < 1e-15);
    }
}
