use std::collections::BTreeMap;

use super::{cosine_matrix, MetricsError, TreatmentPoint};
use crate::scalar::Scalar;

/// Per-point Silhouette values over MOA clusters, cosine distance.
/// Points alone in their cluster score 0.
pub fn silhouette_scores<T: Scalar>(points: &[TreatmentPoint<T>]) -> Result<Vec<f64>, MetricsError> {
    let mut clusters: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        clusters.entry(&p.moa).or_default().push(i);
    }
    if clusters.len() < 2 {
        return Err(MetricsError::TooFewClusters(clusters.len()));
    }
    let dist = cosine_matrix(points)?;
    Ok((0..points.len())
        .map(|i| {
            let own = &clusters[points[i].moa.as_str()];
            if own.len() == 1 {
                return 0.0;
            }
            let a = own.iter().filter(|&&j| j != i).map(|&j| dist[i][j]).sum::<f64>() / (own.len() - 1) as f64;
            let b = clusters
                .iter()
                .filter(|(m, _)| **m != points[i].moa)
                .map(|(_, members)| members.iter().map(|&j| dist[i][j]).sum::<f64>() / members.len() as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect())
}

/// Mean Silhouette score in `[−1, 1]`.
pub fn silhouette_moa<T: Scalar>(points: &[TreatmentPoint<T>]) -> Result<f64, MetricsError> {
    let s = silhouette_scores(points)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::super::cosine_distance;
    use super::super::testutil::{point, random_points};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation of s(i) = (b − a)/max(a, b) with nothing shared.
    fn direct(points: &[TreatmentPoint<f64>]) -> f64 {
        let n = points.len();
        let mut moas: Vec<&str> = points.iter().map(|p| p.moa.as_str()).collect();
        moas.sort();
        moas.dedup();
        let mut total = 0.0;
        for i in 0..n {
            let d = |j: usize| cosine_distance(&points[i].mean_vector, &points[j].mean_vector).unwrap();
            let same: Vec<usize> = (0..n).filter(|&j| j != i && points[j].moa == points[i].moa).collect();
            if same.is_empty() {
                continue;
            }
            let a = same.iter().map(|&j| d(j)).sum::<f64>() / same.len() as f64;
            let mut b = f64::MAX;
            for m in &moas {
                if *m == points[i].moa {
                    continue;
                }
                let other: Vec<usize> = (0..n).filter(|&j| points[j].moa == *m).collect();
                b = b.min(other.iter().map(|&j| d(j)).sum::<f64>() / other.len() as f64);
            }
            total += if a.max(b) > 0.0 { (b - a) / a.max(b) } else { 0.0 };
        }
        total / n as f64
    }

    #[test]
    fn tight_separated_clusters() {
        let pts = vec![
            point("a", "a", "d", "x", vec![1.0, 0.001]),
            point("b", "b", "d", "x", vec![1.0, -0.001]),
            point("c", "c", "d", "y", vec![0.001, 1.0]),
            point("e", "e", "d", "y", vec![-0.001, 1.0]),
        ];
        assert!(silhouette_moa(&pts).unwrap() > 0.9);
    }

    #[test]
    fn coincident_points_score_zero() {
        let pts: Vec<_> = (0..6).map(|i| point(&format!("t{i}"), "c", "d", if i % 2 == 0 { "x" } else { "y" }, vec![1.0, 2.0])).collect();
        assert!(silhouette_moa(&pts).unwrap().abs() < 1e-12);
    }

    #[test]
    fn six_point_hand_instance() {
        // Angles 0°, 10°, 20° (MOA x) and 90°, 100°, 135° (MOA y).
        let at = |deg: f64| vec![deg.to_radians().cos(), deg.to_radians().sin()];
        let pts = vec![
            point("a", "a", "d", "x", at(0.0)),
            point("b", "b", "d", "x", at(10.0)),
            point("c", "c", "d", "x", at(20.0)),
            point("e", "e", "d", "y", at(90.0)),
            point("f", "f", "d", "y", at(100.0)),
            point("g", "g", "d", "y", at(135.0)),
        ];
        // Point 0 by hand: a = mean(1−cos10°, 1−cos20°), b = mean(1−cos90°, 1−cos100°, 1−cos135°).
        let c = |deg: f64| 1.0 - deg.to_radians().cos();
        let a0 = (c(10.0) + c(20.0)) / 2.0;
        let b0 = (c(90.0) + c(100.0) + c(135.0)) / 3.0;
        let s = silhouette_scores(&pts).unwrap();
        assert!((s[0] - (b0 - a0) / b0).abs() < 1e-12);
        assert!((silhouette_moa(&pts).unwrap() - direct(&pts)).abs() < 1e-12);
    }

    #[test]
    fn matches_direct_formula_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let n = rng.random_range(4..40);
            let pts = random_points(n, 3, &mut rng);
            match silhouette_moa(&pts) {
                Ok(v) => {
                    assert!((v - direct(&pts)).abs() < 1e-10);
                    assert!((-1.0..=1.0).contains(&v));
                }
                Err(MetricsError::TooFewClusters(_)) => {}
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn singleton_cluster_and_errors() {
        let pts = vec![
            point("a", "a", "d", "x", vec![1.0, 0.0]),
            point("b", "b", "d", "x", vec![1.0, 0.1]),
            point("c", "c", "d", "y", vec![0.0, 1.0]),
        ];
        assert_eq!(silhouette_scores(&pts).unwrap()[2], 0.0);
        assert!(matches!(silhouette_moa(&pts[..2]), Err(MetricsError::TooFewClusters(1))));
    }
}
