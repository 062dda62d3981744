//! Uniform random search, the reference every optimizer should beat.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::objectives::{Objective, ObjectiveError};

/// Evaluates `n` uniform points in batches of `batch`; returns the best raw
/// value seen after each batch.
pub fn random_search(objective: &mut dyn Objective, n: usize, batch: usize, seed: u64) -> Result<Vec<f64>, ObjectiveError> {
    let dim = objective.dim();
    let dir = objective.direction();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::NEG_INFINITY;
    let mut trace = Vec::new();
    let mut done = 0;
    while done < n {
        let k = batch.max(1).min(n - done);
        let x = DMatrix::from_fn(k, dim, |_, _| rng.gen::<f64>());
        for v in objective.evaluate(&x)? {
            best = best.max(dir.to_internal(v));
        }
        trace.push(dir.to_raw(best));
        done += k;
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::builtin_objective;

    #[test]
    fn trace_is_monotone() {
        let mut f = builtin_objective("ackley", 4, 0).unwrap();
        let t = random_search(&mut f, 50, 20, 1).unwrap();
        assert_eq!(t.len(), 3);
        assert!(t.windows(2).all(|w| w[1] <= w[0]));
    }
}
