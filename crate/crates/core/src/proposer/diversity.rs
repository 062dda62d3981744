//! Pool diversity as one minus the mean pairwise cosine similarity of
//! flattened Gram matrices on a fixed reference batch.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dsl::{EvalError, Kernel, KernelExpr};

pub const REFERENCE_POINTS: usize = 80;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DiversityError {
    #[error("need at least two kernels with nonzero Gram matrices, have {0}")]
    TooFew(usize),
    #[error("got {params} parameter vectors for {exprs} expressions")]
    ParamCount { exprs: usize, params: usize },
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Value in `[0, 2]`; 0 for a pool of identical kernels. Kernels with an
/// all-zero Gram vector are skipped with a warning. `params` defaults to
/// each kernel's initial values.
pub fn gram_cosine_distance(
    exprs: &[KernelExpr],
    params: Option<&[Vec<f64>]>,
    dim: usize,
    seed: u64,
) -> Result<f64, DiversityError> {
    if let Some(p) = params {
        if p.len() != exprs.len() {
            return Err(DiversityError::ParamCount {
                exprs: exprs.len(),
                params: p.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(REFERENCE_POINTS, dim, |_, _| rng.gen::<f64>());
    let mut vecs: Vec<(Vec<f64>, f64)> = Vec::with_capacity(exprs.len());
    for (i, e) in exprs.iter().enumerate() {
        let k = Kernel::new(e.clone(), dim);
        let theta = params.map_or_else(|| k.default_params(), |p| p[i].clone());
        let g = k.gram(&theta, &x, &x)?;
        let v: Vec<f64> = g.as_slice().to_vec();
        let n2: f64 = v.iter().map(|a| a * a).sum();
        if n2 == 0.0 {
            log::warn!("skipping {} in diversity: zero Gram matrix", e.render());
            continue;
        }
        vecs.push((v, n2));
    }
    if vecs.len() < 2 {
        return Err(DiversityError::TooFew(vecs.len()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..vecs.len() {
        for j in i + 1..vecs.len() {
            let dot: f64 = vecs[i].0.iter().zip(&vecs[j].0).map(|(a, b)| a * b).sum();
            total += (dot / (vecs[i].1 * vecs[j].1).sqrt()).clamp(-1.0, 1.0);
            pairs += 1;
        }
    }
    Ok(1.0 - total / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{parse, BaseKernel};

    #[test]
    fn identical_pool_is_zero() {
        for b in BaseKernel::ALL {
            let e = b.expr();
            let d = gram_cosine_distance(&[e.clone(), e.clone(), e], None, 6, 3).unwrap();
            assert_eq!(d, 0.0, "{}", b.name());
        }
    }

    #[test]
    fn range_and_errors() {
        let pool: Vec<KernelExpr> = BaseKernel::INITIAL.iter().map(|b| b.expr()).collect();
        let d = gram_cosine_distance(&pool, None, 5, 0).unwrap();
        assert!((0.0..=2.0).contains(&d) && d > 0.0);
        assert!(matches!(gram_cosine_distance(&pool[..1], None, 5, 0), Err(DiversityError::TooFew(1))));
        assert!(gram_cosine_distance(&pool, Some(&[]), 5, 0).is_err());
    }

    #[test]
    fn duplicate_never_increases() {
        let pool = vec![
            parse("scale(rbf(ard))").unwrap(),
            parse("scale(linear(center_scale))").unwrap(),
            parse("scale(periodic(x))").unwrap(),
        ];
        let base = gram_cosine_distance(&pool, None, 4, 7).unwrap();
        for e in &pool {
            let mut more = pool.clone();
            more.push(e.clone());
            assert!(gram_cosine_distance(&more, None, 4, 7).unwrap() <= base + 1e-12);
        }
    }
}
