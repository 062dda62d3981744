//! Sobol low-discrepancy points in Gray-code order, using the Joe–Kuo
//! `new-joe-kuo-6.21201` direction numbers, with optional random digital
//! shift.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::AcqError;

const BITS: usize = 32;
const TABLE: &str = include_str!("../../data/new-joe-kuo-6.21201.txt");

/// Largest supported dimension.
pub const MAX_DIM: usize = 21201;

struct Entry {
    s: u32,
    a: u32,
    m: Vec<u32>,
}

fn table() -> &'static Vec<Entry> {
    static T: OnceLock<Vec<Entry>> = OnceLock::new();
    T.get_or_init(|| {
        TABLE
            .lines()
            .skip(1)
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<u32> = l.split_whitespace().map(|t| t.parse().expect("numeric table")).collect();
                Entry {
                    s: f[1],
                    a: f[2],
                    m: f[3..].to_vec(),
                }
            })
            .collect()
    })
}

fn directions(dim: usize) -> Vec<[u32; BITS]> {
    let mut out = Vec::with_capacity(dim);
    let mut first = [0u32; BITS];
    for (k, v) in first.iter_mut().enumerate() {
        *v = 1 << (BITS - 1 - k);
    }
    out.push(first);
    for e in table().iter().take(dim.saturating_sub(1)) {
        let s = e.s as usize;
        let mut v = [0u32; BITS];
        for k in 0..BITS {
            if k < s {
                v[k] = e.m[k] << (BITS - 1 - k);
            } else {
                let mut x = v[k - s] ^ (v[k - s] >> s);
                for l in 1..s {
                    if (e.a >> (s - 1 - l)) & 1 == 1 {
                        x ^= v[k - l];
                    }
                }
                v[k] = x;
            }
        }
        out.push(v);
    }
    out
}

/// Incremental generator; `next_point` yields points in Gray-code order.
#[derive(Debug, Clone)]
pub struct SobolStream {
    dim: usize,
    index: u64,
    dirs: Vec<[u32; BITS]>,
    state: Vec<u32>,
    shift: Vec<u32>,
}

impl SobolStream {
    pub fn new(dim: usize, scramble_seed: Option<u64>) -> Result<Self, AcqError> {
        if dim == 0 || dim > MAX_DIM {
            return Err(AcqError::SobolDimension(dim));
        }
        let shift = match scramble_seed {
            Some(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..dim).map(|_| rng.gen::<u32>()).collect()
            }
            None => vec![0; dim],
        };
        Ok(Self {
            dim,
            index: 0,
            dirs: directions(dim),
            state: vec![0; dim],
            shift,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn next_point(&mut self) -> Vec<f64> {
        if self.index > 0 {
            let c = self.index.trailing_zeros() as usize;
            for (s, d) in self.state.iter_mut().zip(&self.dirs) {
                *s ^= d[c.min(BITS - 1)];
            }
        }
        self.index += 1;
        self.state
            .iter()
            .zip(&self.shift)
            .map(|(s, h)| (s ^ h) as f64 / 4_294_967_296.0)
            .collect()
    }
}

/// First `n` points of the (optionally scrambled) sequence as rows.
pub fn sobol_points(n: usize, dim: usize, scramble_seed: Option<u64>) -> Result<DMatrix<f64>, AcqError> {
    let mut s = SobolStream::new(dim, scramble_seed)?;
    let mut out = DMatrix::zeros(n, dim);
    for i in 0..n {
        let p = s.next_point();
        for (j, v) in p.into_iter().enumerate() {
            out[(i, j)] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_prefix() {
        let p = sobol_points(8, 1, None).unwrap();
        let got: Vec<f64> = p.iter().copied().collect();
        assert_eq!(got, vec![0.0, 0.5, 0.75, 0.25, 0.375, 0.875, 0.625, 0.125]);
    }

    #[test]
    fn three_dimensional_prefix() {
        // Reference rows from an independent Sobol implementation (scipy,
        // scramble=False).
        let expected = [
            [0.0, 0.0, 0.0],
            [0.5, 0.5, 0.5],
            [0.75, 0.25, 0.25],
            [0.25, 0.75, 0.75],
            [0.375, 0.375, 0.625],
            [0.875, 0.875, 0.125],
            [0.625, 0.125, 0.875],
            [0.125, 0.625, 0.375],
        ];
        let p = sobol_points(8, 3, None).unwrap();
        for (i, row) in expected.iter().enumerate() {
            for j in 0..3 {
                assert_eq!(p[(i, j)], row[j], "row {i} col {j}");
            }
        }
    }

    #[test]
    fn scrambled_in_unit_cube_and_deterministic() {
        let a = sobol_points(64, 40, Some(9)).unwrap();
        assert!(a.iter().all(|v| (0.0..1.0).contains(v)));
        assert_eq!(a, sobol_points(64, 40, Some(9)).unwrap());
        assert_ne!(a, sobol_points(64, 40, Some(10)).unwrap());
    }

    #[test]
    fn dimension_limits() {
        assert!(SobolStream::new(0, None).is_err());
        assert!(SobolStream::new(MAX_DIM + 1, None).is_err());
        assert!(sobol_points(2, 8192, None).is_ok());
    }
}
