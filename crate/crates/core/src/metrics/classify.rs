//! Domain classifiers used to measure how much batch information remains.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{count_by, MetricsError};
use crate::data::EmbeddingTable;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogRegConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        Self { epochs: 500, lr: 0.1, l2: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub trees: usize,
    /// Features tried per split; `None` means `⌈√dim⌉`.
    pub max_features: Option<usize>,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { trees: 100, max_features: None, max_depth: None, min_leaf: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Classifier {
    LogReg(LogRegConfig),
    RandomForest(ForestConfig),
}

impl Classifier {
    pub fn logreg() -> Self {
        Classifier::LogReg(LogRegConfig::default())
    }

    pub fn random_forest() -> Self {
        Classifier::RandomForest(ForestConfig::default())
    }

    fn fit_predict(&self, x: &[Vec<f64>], y: &[usize], n_classes: usize, test: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<usize> {
        match self {
            Classifier::LogReg(cfg) => {
                let m = LogisticRegression::fit(x, y, n_classes, cfg);
                test.iter().map(|t| m.predict(t)).collect()
            }
            Classifier::RandomForest(cfg) => {
                let m = RandomForest::fit(x, y, n_classes, cfg, rng);
                test.iter().map(|t| m.predict(t)).collect()
            }
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Multinomial logistic regression fit by full-batch gradient descent on
/// standardized features.
#[derive(Debug, Clone)]
pub struct LogisticRegression {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl LogisticRegression {
    pub fn fit(x: &[Vec<f64>], y: &[usize], n_classes: usize, cfg: &LogRegConfig) -> Self {
        let n = x.len();
        let d = x.first().map_or(0, Vec::len);
        let nf = n as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / nf;
            }
        }
        let mut scale = vec![0.0; d];
        for row in x {
            for ((s, v), m) in scale.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / nf;
            }
        }
        for s in &mut scale {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        let z: Vec<Vec<f64>> =
            x.iter().map(|row| row.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect()).collect();

        let mut weights = vec![vec![0.0; d]; n_classes];
        let mut bias = vec![0.0; n_classes];
        let mut gw = vec![vec![0.0; d]; n_classes];
        let mut gb = vec![0.0; n_classes];
        let mut p = vec![0.0; n_classes];
        for _ in 0..cfg.epochs {
            gw.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v = 0.0));
            gb.iter_mut().for_each(|v| *v = 0.0);
            for (row, &label) in z.iter().zip(y) {
                for c in 0..n_classes {
                    p[c] = bias[c] + crate::scalar::dot(&weights[c], row);
                }
                let mx = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in p.iter_mut() {
                    *v = (*v - mx).exp();
                    sum += *v;
                }
                for c in 0..n_classes {
                    let r = p[c] / sum - if c == label { 1.0 } else { 0.0 };
                    gb[c] += r;
                    for (g, v) in gw[c].iter_mut().zip(row) {
                        *g += r * v;
                    }
                }
            }
            for c in 0..n_classes {
                for (w, g) in weights[c].iter_mut().zip(&gw[c]) {
                    *w -= cfg.lr * (g / nf + cfg.l2 * *w);
                }
                bias[c] -= cfg.lr * gb[c] / nf;
            }
        }
        Self { mean, scale, weights, bias }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let z: Vec<f64> = x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect();
        let scores: Vec<f64> = self.weights.iter().zip(&self.bias).map(|(w, b)| b + crate::scalar::dot(w, &z)).collect();
        argmax(&scores)
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf(usize),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

struct Split {
    feature: usize,
    threshold: f64,
    score: f64,
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

impl Tree {
    fn fit(x: &[Vec<f64>], y: &[usize], n_classes: usize, sample: Vec<usize>, cfg: &ForestConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = x[0].len();
        let mtry = cfg.max_features.unwrap_or_else(|| (d as f64).sqrt().ceil() as usize).clamp(1, d);
        let mut nodes = vec![Node::Leaf(0)];
        let mut stack = vec![(0usize, sample, 0usize)];
        let mut features: Vec<usize> = (0..d).collect();
        while let Some((id, idx, depth)) = stack.pop() {
            let mut counts = vec![0usize; n_classes];
            for &i in &idx {
                counts[y[i]] += 1;
            }
            let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
            let depth_done = cfg.max_depth.is_some_and(|m| depth >= m);
            if pure || depth_done || idx.len() < 2 * cfg.min_leaf.max(1) {
                nodes[id] = Node::Leaf(majority(&counts));
                continue;
            }
            features.shuffle(rng);
            // Keep searching past `mtry` only if no valid split was found.
            let mut best: Option<Split> = None;
            for (tried, &f) in features.iter().enumerate() {
                if tried >= mtry && best.is_some() {
                    break;
                }
                if let Some(s) = best_split(x, y, n_classes, &idx, f, cfg.min_leaf.max(1)) {
                    if best.as_ref().is_none_or(|b| s.score > b.score) {
                        best = Some(s);
                    }
                }
            }
            let Some(split) = best else {
                nodes[id] = Node::Leaf(majority(&counts));
                continue;
            };
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| x[i][split.feature] <= split.threshold);
            let left = nodes.len();
            nodes.push(Node::Leaf(0));
            let right = nodes.len();
            nodes.push(Node::Leaf(0));
            nodes[id] = Node::Split { feature: split.feature, threshold: split.threshold, left, right };
            stack.push((right, r, depth + 1));
            stack.push((left, l, depth + 1));
        }
        Self { nodes }
    }

    fn predict(&self, x: &[f64]) -> usize {
        let mut id = 0;
        loop {
            match self.nodes[id] {
                Node::Leaf(c) => return c,
                Node::Split { feature, threshold, left, right } => {
                    id = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }
}

/// Best Gini split on one feature, scored by `Σ c_l²/n_l + Σ c_r²/n_r`
/// (larger is purer).
fn best_split(x: &[Vec<f64>], y: &[usize], n_classes: usize, idx: &[usize], f: usize, min_leaf: usize) -> Option<Split> {
    let mut order: Vec<usize> = idx.to_vec();
    order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
    let n = order.len();
    let mut right = vec![0usize; n_classes];
    for &i in &order {
        right[y[i]] += 1;
    }
    let mut left = vec![0usize; n_classes];
    let mut sq_l = 0.0f64;
    let mut sq_r: f64 = right.iter().map(|&c| (c * c) as f64).sum();
    let mut best: Option<Split> = None;
    for pos in 0..n - 1 {
        let c = y[order[pos]];
        sq_l += (2 * left[c] + 1) as f64;
        left[c] += 1;
        sq_r -= (2 * right[c] - 1) as f64;
        right[c] -= 1;
        let (a, b) = (x[order[pos]][f], x[order[pos + 1]][f]);
        let nl = pos + 1;
        if a == b || nl < min_leaf || n - nl < min_leaf {
            continue;
        }
        let score = sq_l / nl as f64 + sq_r / (n - nl) as f64;
        if best.as_ref().is_none_or(|s| score > s.score) {
            let mid = a + (b - a) / 2.0;
            let threshold = if mid < b { mid } else { a };
            best = Some(Split { feature: f, threshold, score });
        }
    }
    best
}

/// Bagged Gini trees with per-split feature subsampling.
#[derive(Debug, Clone)]
pub struct RandomForest {
    trees: Vec<Tree>,
    n_classes: usize,
}

impl RandomForest {
    pub fn fit(x: &[Vec<f64>], y: &[usize], n_classes: usize, cfg: &ForestConfig, rng: &mut ChaCha8Rng) -> Self {
        let seeds: Vec<u64> = (0..cfg.trees).map(|_| rng.random()).collect();
        let n = x.len();
        let trees = seeds
            .into_par_iter()
            .map(|s| {
                let mut r = ChaCha8Rng::seed_from_u64(s);
                let sample: Vec<usize> = (0..n).map(|_| r.random_range(0..n)).collect();
                Tree::fit(x, y, n_classes, sample, cfg, &mut r)
            })
            .collect();
        Self { trees, n_classes }
    }

    /// Majority vote; ties go to the smaller class index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut votes = vec![0usize; self.n_classes];
        for t in &self.trees {
            votes[t.predict(x)] += 1;
        }
        majority(&votes)
    }
}

/// Fold index per row: each class is shuffled and dealt round-robin, with
/// the dealing position carried across classes so fold sizes stay even.
pub fn stratified_folds<R: Rng + ?Sized>(labels: &[usize], folds: usize, rng: &mut R) -> Vec<usize> {
    let n_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut out = vec![0; labels.len()];
    let mut next = 0;
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(rng);
        for i in members {
            out[i] = next % folds;
            next += 1;
        }
    }
    out
}

fn labelled<T: Scalar>(table: &EmbeddingTable<T>, folds: usize) -> Result<(Vec<Vec<f64>>, Vec<usize>, usize), MetricsError> {
    if folds < 2 {
        return Err(MetricsError::InvalidFolds);
    }
    let domains = table.domains();
    if domains.len() < 2 {
        return Err(MetricsError::SingleDomain(domains.len()));
    }
    for (d, rows) in count_by(table.records().iter().map(|r| r.domain.as_str())) {
        if rows < folds {
            return Err(MetricsError::TooFewRows { domain: d.to_string(), rows, folds });
        }
    }
    let x = table.vectors().map(|v| v.iter().map(|a| a.to_f64_lossy()).collect()).collect();
    let y = table.records().iter().map(|r| domains.binary_search(&r.domain).expect("known domain")).collect();
    Ok((x, y, domains.len()))
}

fn cross_validate(
    x: &[Vec<f64>],
    y: &[usize],
    n_classes: usize,
    classifier: &Classifier,
    folds: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fold_of = stratified_folds(y, folds, &mut rng);
    let accs: Vec<f64> = (0..folds)
        .into_par_iter()
        .map(|f| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(f as u64 + 1);
            let (mut tx, mut ty, mut vx, mut vy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for i in 0..x.len() {
                if fold_of[i] == f {
                    vx.push(x[i].clone());
                    vy.push(y[i]);
                } else {
                    tx.push(x[i].clone());
                    ty.push(y[i]);
                }
            }
            let pred = classifier.fit_predict(&tx, &ty, n_classes, &vx, &mut r);
            pred.iter().zip(&vy).filter(|(a, b)| a == b).count() as f64 / vy.len() as f64
        })
        .collect();
    100.0 * accs.iter().sum::<f64>() / folds as f64
}

/// Stratified k-fold accuracy (percent) of predicting each row's domain.
pub fn domain_classification_accuracy<T: Scalar>(
    table: &EmbeddingTable<T>,
    classifier: &Classifier,
    folds: usize,
    seed: u64,
) -> Result<f64, MetricsError> {
    let (x, y, c) = labelled(table, folds)?;
    Ok(cross_validate(&x, &y, c, classifier, folds, seed))
}

/// Same as [`domain_classification_accuracy`] after replacing every
/// coordinate with an independent standard normal draw.
pub fn chance_baseline<T: Scalar>(
    table: &EmbeddingTable<T>,
    classifier: &Classifier,
    folds: usize,
    seed: u64,
) -> Result<f64, MetricsError> {
    let (x, y, c) = labelled(table, folds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let noise: Vec<Vec<f64>> = x.iter().map(|row| row.iter().map(|_| rng.sample(StandardNormal)).collect()).collect();
    Ok(cross_validate(&noise, &y, c, classifier, folds, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EmbeddingRecord;

    fn table_from(domains: usize, per: usize, dim: usize, seed: u64, gen: impl Fn(usize, &mut ChaCha8Rng) -> Vec<f64>) -> EmbeddingTable<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut records = Vec::new();
        for d in 0..domains {
            for i in 0..per {
                records.push(EmbeddingRecord {
                    row_id: format!("{d}-{i}"),
                    domain: format!("d{d:02}"),
                    plate: "p".into(),
                    well: "w".into(),
                    compound: "DMSO".into(),
                    dose: "0".into(),
                    treatment: "DMSO".into(),
                    moa: None,
                    vector: gen(d, &mut rng),
                });
            }
        }
        EmbeddingTable::from_records(dim, records, "DMSO").unwrap()
    }

    fn noise(dim: usize) -> impl Fn(usize, &mut ChaCha8Rng) -> Vec<f64> {
        move |_, r| (0..dim).map(|_| r.sample(StandardNormal)).collect()
    }

    #[test]
    fn separable_domains_are_found() {
        let t = table_from(2, 30, 1, 1, |d, r| vec![if d == 0 { -r.random_range(0.1..2.0) } else { r.random_range(0.1..2.0) }]);
        for c in [Classifier::logreg(), Classifier::random_forest()] {
            let acc = domain_classification_accuracy(&t, &c, 3, 0).unwrap();
            assert!(acc > 99.0, "{acc}");
        }
    }

    #[test]
    fn identical_distributions_score_chance() {
        let t = table_from(2, 400, 3, 2, noise(3));
        for c in [Classifier::logreg(), Classifier::random_forest()] {
            let acc = domain_classification_accuracy(&t, &c, 3, 0).unwrap();
            assert!((acc - 50.0).abs() < 5.0, "{acc}");
        }
    }

    #[test]
    fn ten_domain_chance_is_ten_percent() {
        let t = table_from(10, 150, 4, 3, noise(4));
        for c in [Classifier::logreg(), Classifier::random_forest()] {
            let acc = domain_classification_accuracy(&t, &c, 3, 1).unwrap();
            assert!((acc - 10.0).abs() < 3.0, "{acc}");
            let base = chance_baseline(&t, &c, 3, 1).unwrap();
            assert!((base - 10.0).abs() < 3.0, "{base}");
        }
    }

    #[test]
    fn chance_baseline_ignores_vectors() {
        let a = table_from(2, 200, 3, 4, noise(3));
        let b = table_from(2, 200, 3, 5, |d, _| vec![d as f64 * 100.0, 1.0, 2.0]);
        let c = Classifier::logreg();
        let x = chance_baseline(&a, &c, 3, 9).unwrap();
        let y = chance_baseline(&b, &c, 3, 9).unwrap();
        assert!((x - y).abs() < 1.0);
        assert!((x - 50.0).abs() < 5.0);
    }

    #[test]
    fn deterministic_given_seed() {
        let t = table_from(3, 40, 3, 6, noise(3));
        let c = Classifier::random_forest();
        assert_eq!(domain_classification_accuracy(&t, &c, 3, 4).unwrap(), domain_classification_accuracy(&t, &c, 3, 4).unwrap());
    }

    #[test]
    fn stratification_balances_classes() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = stratified_folds(&labels, 3, &mut rng);
        for fold in 0..3 {
            assert_eq!(f.iter().filter(|&&x| x == fold).count(), 10);
            for class in 0..3 {
                let n = (0..30).filter(|&i| f[i] == fold && labels[i] == class).count();
                assert!(n == 3 || n == 4);
            }
        }
    }

    #[test]
    fn errors() {
        let one = table_from(1, 10, 2, 7, noise(2));
        assert!(matches!(domain_classification_accuracy(&one, &Classifier::logreg(), 3, 0), Err(MetricsError::SingleDomain(1))));
        let tiny = table_from(2, 2, 2, 8, noise(2));
        assert!(matches!(domain_classification_accuracy(&tiny, &Classifier::logreg(), 3, 0), Err(MetricsError::TooFewRows { .. })));
        assert!(matches!(domain_classification_accuracy(&tiny, &Classifier::logreg(), 1, 0), Err(MetricsError::InvalidFolds)));
    }
}
