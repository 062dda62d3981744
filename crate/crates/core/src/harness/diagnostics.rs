//! Summary statistics of a query history.

/// Default distance to a face of the unit cube that counts as a hit.
pub const DEFAULT_BOUNDARY_TOL: f64 = 1e-6;

/// Fraction of points with at least one coordinate within `tol` of 0 or 1.
pub fn boundary_hit_ratio(points: &[Vec<f64>], tol: f64) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let hits = points
        .iter()
        .filter(|p| p.iter().any(|v| *v <= tol || *v >= 1.0 - tol))
        .count();
    hits as f64 / points.len() as f64
}

/// Total Euclidean length of the path visiting points in query order.
pub fn otsd(points: &[Vec<f64>]) -> f64 {
    points
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn boundary_examples() {
        assert_eq!(boundary_hit_ratio(&[vec![0.3, 0.5], vec![0.5, 0.9]], 1e-6), 0.0);
        assert_eq!(boundary_hit_ratio(&[vec![0.0, 0.5], vec![0.5, 0.5]], 1e-6), 0.5);
        assert_eq!(boundary_hit_ratio(&[vec![1.0]], 0.0), 1.0);
    }

    #[test]
    fn path_examples() {
        assert_eq!(otsd(&[vec![0.2, 0.2]]), 0.0);
        assert!((otsd(&[vec![0.0, 0.0], vec![0.3, 0.4]]) - 0.5).abs() < 1e-15);
        let line: Vec<Vec<f64>> = (0..5).map(|i| vec![0.1 * i as f64, 0.0]).collect();
        assert!((otsd(&line) - 0.4).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn ratio_monotone_in_tol(
            pts in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 3), 1..20),
            t1 in 0.0f64..0.5, t2 in 0.0f64..0.5,
        ) {
            let (a, b) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let ra = boundary_hit_ratio(&pts, a);
            let rb = boundary_hit_ratio(&pts, b);
            prop_assert!(ra <= rb);
            prop_assert!((0.0..=1.0).contains(&rb));
        }
    }
}
