//! Exhaustive CART reference: every node scores every (feature, midpoint)
//! pair by explicit partitioning and keeps the largest Gini decrease.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct TinyDataset {
    pub rows: Vec<Vec<u8>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub depth: usize,
}

impl TinyDataset {
    pub fn refs(&self) -> Vec<&[u8]> {
        self.rows.iter().map(Vec::as_slice).collect()
    }
}

/// Up to 50 samples, up to 6 features, depth 1 or 2, at least two classes.
pub fn random_tiny(seed: u64) -> TinyDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let n = rng.random_range(2..=50);
        let d = rng.random_range(1..=6);
        let n_classes = rng.random_range(2..=4);
        let depth = rng.random_range(1..=2);
        // Narrow value ranges force many tied candidate splits.
        let span: u16 = if rng.random_bool(0.5) { 4 } else { 256 };
        let rows: Vec<Vec<u8>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(0..span) as u8).collect())
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_classes)).collect();
        let distinct = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
        if distinct >= 2 {
            return TinyDataset {
                rows,
                labels,
                n_classes,
                depth,
            };
        }
    }
}

fn counts(labels: &[usize], idx: &[usize], c: usize) -> Vec<usize> {
    let mut out = vec![0; c];
    for &i in idx {
        out[labels[i]] += 1;
    }
    out
}

fn gini(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    1.0 - counts.iter().map(|&k| (k as f64 / n as f64).powi(2)).sum::<f64>()
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (k, &v) in counts.iter().enumerate() {
        if v > counts[best] {
            best = k;
        }
    }
    best
}

pub enum OracleNode {
    Leaf(usize),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<OracleNode>,
        right: Box<OracleNode>,
    },
}

impl OracleNode {
    pub fn predict(&self, x: &[u8]) -> usize {
        match self {
            OracleNode::Leaf(c) => *c,
            OracleNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if f64::from(x[*feature]) <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }
}

pub fn fit(ds: &TinyDataset) -> OracleNode {
    let idx: Vec<usize> = (0..ds.rows.len()).collect();
    grow(ds, &idx, 0)
}

fn grow(ds: &TinyDataset, idx: &[usize], depth: usize) -> OracleNode {
    let c = counts(&ds.labels, idx, ds.n_classes);
    let parent = gini(&c);
    if depth >= ds.depth || parent == 0.0 || idx.len() < 2 {
        return OracleNode::Leaf(majority(&c));
    }
    let n = idx.len() as f64;
    let mut best: Option<(f64, usize, f64)> = None;
    for f in 0..ds.rows[0].len() {
        let mut values: Vec<u8> = idx.iter().map(|&i| ds.rows[i][f]).collect();
        values.sort_unstable();
        values.dedup();
        for w in values.windows(2) {
            let thr = (f64::from(w[0]) + f64::from(w[1])) / 2.0;
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| f64::from(ds.rows[i][f]) <= thr);
            let child = l.len() as f64 / n * gini(&counts(&ds.labels, &l, ds.n_classes))
                + r.len() as f64 / n * gini(&counts(&ds.labels, &r, ds.n_classes));
            let gain = parent - child;
            if gain > 1e-12 && best.is_none_or(|(g, _, _)| gain > g + 1e-12) {
                best = Some((gain, f, thr));
            }
        }
    }
    match best {
        None => OracleNode::Leaf(majority(&c)),
        Some((_, feature, threshold)) => {
            let (l, r): (Vec<usize>, Vec<usize>) =
                idx.iter().partition(|&&i| f64::from(ds.rows[i][feature]) <= threshold);
            OracleNode::Split {
                feature,
                threshold,
                left: Box::new(grow(ds, &l, depth + 1)),
                right: Box::new(grow(ds, &r, depth + 1)),
            }
        }
    }
}

pub fn training_accuracy(ds: &TinyDataset, predict: impl Fn(&[u8]) -> usize) -> f64 {
    let correct = ds.rows.iter().zip(&ds.labels).filter(|(r, &l)| predict(r) == l).count();
    correct as f64 / ds.rows.len() as f64
}
