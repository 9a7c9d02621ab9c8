mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wdn::coral::{coral_apply, coral_fit};
use wdn::data::EmbeddingTable;
use wdn::linalg::{covariance, Matrix};
use wdn::preprocess::{percentile_scale, reduce_dim, tvn_apply, tvn_fit};

fn control_cov(t: &EmbeddingTable<f64>, domain: Option<&str>) -> Matrix<f64> {
    let rows: Vec<&[f64]> = t
        .records()
        .iter()
        .filter(|r| t.is_control(r) && domain.is_none_or(|d| r.domain == d))
        .map(|r| r.vector.as_slice())
        .collect();
    covariance(&rows).unwrap().1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn second_tvn_pass_keeps_controls_white(seed in any::<u64>(), dim in 1usize..6) {
        let table = common::random_table(seed, dim, 3, 2, 30);
        let once = tvn_apply(&tvn_fit(&table).unwrap(), &table).unwrap();
        let twice = tvn_apply(&tvn_fit(&once).unwrap(), &once).unwrap();
        prop_assert!(control_cov(&twice, None).sub(&Matrix::identity(dim)).max_abs() < 1e-6);
    }

    #[test]
    fn percentile_scaling_ignores_per_plate_shifts(seed in any::<u64>(), dim in 1usize..5) {
        let table = common::random_table(seed, dim, 2, 2, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let shifts: Vec<Vec<f64>> = (0..2).map(|_| (0..dim).map(|_| rng.random_range(-50.0..50.0)).collect()).collect();
        let shifted = table
            .map_vectors(dim, |r| {
                let s = &shifts[(r.plate == "plate1") as usize];
                r.vector.iter().zip(s).map(|(x, d)| x + d).collect()
            })
            .unwrap();
        let a = percentile_scale(&table).unwrap();
        let b = percentile_scale(&shifted).unwrap();
        for (ra, rb) in a.records().iter().zip(b.records()) {
            for (x, y) in ra.vector.iter().zip(&rb.vector) {
                prop_assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn reduced_coordinates_are_uncorrelated(seed in any::<u64>(), dim in 3usize..8, k in 1usize..3) {
        let table = common::random_table(seed, dim, 2, 3, 15);
        let out = reduce_dim(&table, k).unwrap();
        prop_assert_eq!(out.dim(), k);
        let rows: Vec<&[f64]> = out.vectors().collect();
        let cov = covariance(&rows).unwrap().1;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    prop_assert!(cov[(i, j)].abs() < 1e-8 * cov.trace());
                }
            }
        }
    }

    #[test]
    fn unregularized_coral_whitens_each_domain(seed in any::<u64>(), dim in 1usize..5) {
        let table = common::random_table(seed, dim, 3, 2, 40);
        let fit = coral_fit(&table, 0.0).unwrap();
        let out = coral_apply(&fit, &table).unwrap();
        for d in table.domains() {
            prop_assert!(control_cov(&out, Some(&d)).sub(&Matrix::identity(dim)).max_abs() < 1e-6);
        }
    }

    #[test]
    fn coral_commutes_with_row_permutation(seed in any::<u64>()) {
        let table = common::random_table(seed, 3, 2, 3, 10);
        let fit = coral_fit(&table, 1.0).unwrap();
        let mut order: Vec<usize> = (0..table.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let a = coral_apply(&fit, &table.select(&order)).unwrap();
        let b = coral_apply(&fit, &table).unwrap().select(&order);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn coral_only_reads_controls(seed in any::<u64>()) {
        let table = common::random_table(seed, 3, 2, 3, 10);
        let perturbed = table.map_vectors(3, |r| {
            if r.compound == "DMSO" { r.vector.clone() } else { r.vector.iter().map(|x| x * 3.0 + 1.0).collect() }
        }).unwrap();
        prop_assert_eq!(coral_fit(&table, 1.0).unwrap(), coral_fit(&perturbed, 1.0).unwrap());
    }
}
