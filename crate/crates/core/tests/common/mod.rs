#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use wdn::data::{treatment_label, EmbeddingRecord, EmbeddingTable};

/// Random table with `domains` domains, a DMSO control in every domain and
/// `compounds` treated compounds spread over the domains.
pub fn random_table(seed: u64, dim: usize, domains: usize, compounds: usize, rows_per_group: usize) -> EmbeddingTable<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for d in 0..domains {
        let shift: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scale: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..2.0)).collect();
        for c in 0..=compounds {
            let (compound, dose, moa) = if c == 0 {
                ("DMSO".to_string(), "0".to_string(), None)
            } else {
                (format!("cmp{c}"), "1".to_string(), Some(format!("moa{}", c % 3)))
            };
            if c > 0 && (c + d) % 2 == 1 && domains > 1 {
                continue;
            }
            let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            for i in 0..rows_per_group {
                let v = (0..dim)
                    .map(|j| shift[j] + scale[j] * (center[j] * (c > 0) as u8 as f64 + rng.sample::<f64, _>(StandardNormal)))
                    .collect();
                records.push(EmbeddingRecord {
                    row_id: format!("d{d}c{c}i{i}"),
                    domain: format!("dom{d}"),
                    plate: format!("plate{d}"),
                    well: format!("w{c}_{}", i % 3),
                    compound: compound.clone(),
                    dose: dose.clone(),
                    treatment: treatment_label(&compound, &dose),
                    moa: moa.clone(),
                    vector: v,
                });
            }
        }
    }
    EmbeddingTable::from_records(dim, records, "DMSO").unwrap()
}

/// Haar-ish random orthogonal matrix from Gram-Schmidt on Gaussian columns.
pub fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for u in &q {
            let p: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(x, a)| *x -= p * a);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    q
}
