//! Greedy binary CART over byte features.
//!
//! Each node takes the `(feature, threshold)` with the largest impurity
//! decrease; the test is `x[feature] <= threshold`, thresholds sit at the
//! midpoint of consecutive distinct values, and ties go to the lowest feature
//! and then the lowest threshold. Under Gini the comparison is exact: child
//! impurity is minimized by maximizing `sum(l_k^2)/n_l + sum(r_k^2)/n_r`,
//! which is a ratio of integers compared by cross-multiplication.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fraction_correct, Hyperparams, ModelError, ParamValue};
use crate::features::ViewDataset;

/// Depths searched when tuning the tree.
pub const DEFAULT_DEPTH_GRID: &[usize] = &[4, 6, 8, 10, 12, 16, 20];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    #[default]
    Gini,
    Entropy,
}

impl Criterion {
    pub fn impurity(self, counts: &[u32]) -> f64 {
        let n: u32 = counts.iter().sum();
        if n == 0 {
            return 0.0;
        }
        let n = f64::from(n);
        match self {
            Criterion::Gini => 1.0 - counts.iter().map(|&c| (f64::from(c) / n).powi(2)).sum::<f64>(),
            Criterion::Entropy => -counts
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = f64::from(c) / n;
                    p * p.log2()
                })
                .sum::<f64>(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub criterion: Criterion,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: 10,
            min_samples_split: 2,
            criterion: Criterion::Gini,
        }
    }
}

impl TreeParams {
    pub fn with_depth(self, max_depth: usize) -> Self {
        TreeParams { max_depth, ..self }
    }

    pub fn to_hyperparams(self) -> Hyperparams {
        let mut h = Hyperparams::new();
        h.insert("max_depth".into(), ParamValue::Int(self.max_depth as i64));
        h.insert(
            "min_samples_split".into(),
            ParamValue::Int(self.min_samples_split as i64),
        );
        let crit = match self.criterion {
            Criterion::Gini => "gini",
            Criterion::Entropy => "entropy",
        };
        h.insert("criterion".into(), ParamValue::Text(crit.into()));
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
}

/// Every node keeps its training class counts; leaves have no split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub class_counts: Vec<u32>,
    pub split: Option<Split>,
}

impl TreeNode {
    fn majority(&self) -> usize {
        // First maximum: ties go to the lowest class index.
        let mut best = 0;
        for (k, &c) in self.class_counts.iter().enumerate() {
            if c > self.class_counts[best] {
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub n_features: usize,
    pub n_classes: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub criterion: Criterion,
    /// Node 0 is the root.
    pub nodes: Vec<TreeNode>,
}

struct Builder<'a> {
    rows: &'a [&'a [u8]],
    labels: &'a [usize],
    n_classes: usize,
    params: TreeParams,
    nodes: Vec<TreeNode>,
    hist: Vec<u32>,
    totals: [u32; 256],
    touched: Vec<u8>,
}

#[derive(Clone, Copy)]
struct Candidate {
    feature: usize,
    threshold: f64,
    /// Gini: numerator and denominator of the child score. Entropy: gain in `num_f`.
    num: u128,
    den: u128,
    gain: f64,
}

impl Builder<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<u32> {
        let mut c = vec![0u32; self.n_classes];
        for &i in idx {
            c[self.labels[i]] += 1;
        }
        c
    }

    fn build(&mut self, idx: Vec<usize>, depth: usize) -> usize {
        let counts = self.counts(&idx);
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            class_counts: counts.clone(),
            split: None,
        });

        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.params.max_depth || idx.len() < self.params.min_samples_split.max(2) {
            return id;
        }
        let Some(best) = self.best_split(&idx, &counts) else {
            return id;
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| f64::from(self.rows[i][best.feature]) <= best.threshold);
        let left = self.build(left_idx, depth + 1);
        let right = self.build(right_idx, depth + 1);
        self.nodes[id].split = Some(Split {
            feature: best.feature,
            threshold: best.threshold,
            left,
            right,
        });
        id
    }

    fn best_split(&mut self, idx: &[usize], parent: &[u32]) -> Option<Candidate> {
        let c = self.n_classes;
        let n = idx.len() as u64;
        let parent_sq: u64 = parent.iter().map(|&x| u64::from(x) * u64::from(x)).sum();
        let parent_impurity = self.params.criterion.impurity(parent);
        let mut best: Option<Candidate> = None;
        let mut left = vec![0u32; c];
        let mut right = vec![0u32; c];

        for f in 0..self.rows[0].len() {
            for &i in idx {
                let v = self.rows[i][f];
                if self.totals[v as usize] == 0 {
                    self.touched.push(v);
                }
                self.totals[v as usize] += 1;
                self.hist[v as usize * c + self.labels[i]] += 1;
            }
            if self.touched.len() >= 2 {
                self.touched.sort_unstable();
                left.iter_mut().for_each(|x| *x = 0);
                right.copy_from_slice(parent);
                let mut left_sq = 0u64;
                let mut right_sq = parent_sq;
                let mut n_left = 0u64;
                for w in 0..self.touched.len() - 1 {
                    let v = self.touched[w] as usize;
                    for k in 0..c {
                        let m = u64::from(self.hist[v * c + k]);
                        if m > 0 {
                            let (l, r) = (u64::from(left[k]), u64::from(right[k]));
                            left_sq += (2 * l + m) * m;
                            right_sq -= (2 * r - m) * m;
                            left[k] += m as u32;
                            right[k] -= m as u32;
                        }
                    }
                    n_left += u64::from(self.totals[v]);
                    let n_right = n - n_left;
                    let threshold = (f64::from(self.touched[w]) + f64::from(self.touched[w + 1])) / 2.0;
                    let cand = match self.params.criterion {
                        Criterion::Gini => Candidate {
                            feature: f,
                            threshold,
                            num: u128::from(left_sq) * u128::from(n_right) + u128::from(right_sq) * u128::from(n_left),
                            den: u128::from(n_left) * u128::from(n_right),
                            gain: 0.0,
                        },
                        Criterion::Entropy => {
                            let crit = self.params.criterion;
                            let weighted = (n_left as f64 / n as f64) * crit.impurity(&left)
                                + (n_right as f64 / n as f64) * crit.impurity(&right);
                            Candidate {
                                feature: f,
                                threshold,
                                num: 0,
                                den: 1,
                                gain: parent_impurity - weighted,
                            }
                        }
                    };
                    if self.improves(&cand, best.as_ref(), parent_sq, n) {
                        best = Some(cand);
                    }
                }
            }
            for &v in &self.touched {
                self.totals[v as usize] = 0;
                self.hist[v as usize * c..(v as usize + 1) * c].fill(0);
            }
            self.touched.clear();
        }
        best
    }

    /// Strict improvement over the incumbent (or over the unsplit parent).
    fn improves(&self, cand: &Candidate, best: Option<&Candidate>, parent_sq: u64, n: u64) -> bool {
        match self.params.criterion {
            Criterion::Gini => {
                let (num, den) = match best {
                    Some(b) => (b.num, b.den),
                    None => (u128::from(parent_sq), u128::from(n)),
                };
                cand.num * den > num * cand.den
            }
            Criterion::Entropy => {
                let floor = best.map_or(1e-12, |b| b.gain);
                cand.gain > floor
            }
        }
    }
}

impl DecisionTree {
    /// Fits a tree to raw byte rows. `labels[i]` must be below `n_classes`.
    pub fn fit(rows: &[&[u8]], labels: &[usize], n_classes: usize, params: TreeParams) -> Result<Self, ModelError> {
        if rows.is_empty() {
            return Err(ModelError::EmptyData);
        }
        let d = rows[0].len();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(ModelError::DimensionMismatch {
                expected: d,
                actual: bad.len(),
            });
        }
        let mut present = vec![false; n_classes];
        for &l in labels {
            present[l] = true;
        }
        if present.iter().filter(|&&p| p).count() < 2 {
            return Err(ModelError::DegenerateData);
        }
        let mut b = Builder {
            rows,
            labels,
            n_classes,
            params,
            nodes: Vec::new(),
            hist: vec![0; 256 * n_classes],
            totals: [0; 256],
            touched: Vec::with_capacity(256),
        };
        b.build((0..rows.len()).collect(), 0);
        Ok(DecisionTree {
            n_features: d,
            n_classes,
            max_depth: params.max_depth,
            min_samples_split: params.min_samples_split,
            criterion: params.criterion,
            nodes: b.nodes,
        })
    }

    fn check_dim(&self, sample: &[u8]) -> Result<(), ModelError> {
        if sample.len() != self.n_features {
            return Err(ModelError::DimensionMismatch {
                expected: self.n_features,
                actual: sample.len(),
            });
        }
        Ok(())
    }

    pub fn predict(&self, sample: &[u8]) -> Result<usize, ModelError> {
        self.predict_at_depth(sample, usize::MAX)
    }

    /// Prediction of the same tree cut off at `depth`. A greedy tree grown to
    /// depth `d` is exactly this truncation, so one deep fit serves a depth grid.
    pub fn predict_at_depth(&self, sample: &[u8], depth: usize) -> Result<usize, ModelError> {
        self.check_dim(sample)?;
        let mut node = &self.nodes[0];
        let mut level = 0;
        while let Some(split) = &node.split {
            if level >= depth {
                break;
            }
            node = if f64::from(sample[split.feature]) <= split.threshold {
                &self.nodes[split.left]
            } else {
                &self.nodes[split.right]
            };
            level += 1;
        }
        Ok(node.majority())
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &DecisionTree, id: usize) -> usize {
            match &t.nodes[id].split {
                None => 0,
                Some(s) => 1 + walk(t, s.left).max(walk(t, s.right)),
            }
        }
        walk(self, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.split.is_none()).count()
    }

    pub fn training_samples(&self) -> usize {
        self.nodes[0].class_counts.iter().map(|&c| c as usize).sum()
    }
}

pub fn train_tree(train: &ViewDataset, params: TreeParams) -> Result<DecisionTree, ModelError> {
    DecisionTree::fit(&train.rows(), &train.labels(), train.n_classes(), params)
}

pub fn predict_tree(t: &DecisionTree, sample: &[u8]) -> Result<usize, ModelError> {
    t.predict(sample)
}

pub fn accuracy(t: &DecisionTree, view: &ViewDataset) -> Result<f64, ModelError> {
    let preds = view
        .samples
        .iter()
        .map(|s| t.predict(&s.features))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(fraction_correct(preds.into_iter(), &view.labels()))
}

/// Impurity-decrease importance per feature, normalized to sum 1.
///
/// Each internal node adds
/// `(n_node / total) * (I(node) - n_l/n_node * I(left) - n_r/n_node * I(right))`
/// to its split feature. A single-leaf tree yields all zeros.
pub fn tree_importance(t: &DecisionTree, total_train_samples: usize) -> Vec<f64> {
    let mut imp = vec![0.0; t.n_features];
    let total = total_train_samples.max(1) as f64;
    let size = |n: &TreeNode| n.class_counts.iter().map(|&c| f64::from(c)).sum::<f64>();
    for node in &t.nodes {
        let Some(split) = &node.split else { continue };
        let (l, r) = (&t.nodes[split.left], &t.nodes[split.right]);
        let n = size(node);
        let decrease = t.criterion.impurity(&node.class_counts)
            - size(l) / n * t.criterion.impurity(&l.class_counts)
            - size(r) / n * t.criterion.impurity(&r.class_counts);
        imp[split.feature] += n / total * decrease;
    }
    let sum: f64 = imp.iter().sum();
    if sum > 0.0 {
        imp.iter_mut().for_each(|v| *v /= sum);
    }
    imp
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSearch {
    pub depth: usize,
    /// `(depth, validation accuracy)` for every grid point.
    pub scores: Vec<(usize, f64)>,
}

/// Brute-force depth selection on a held-out slice of `train`.
///
/// Among depths whose validation accuracy is within one standard error of the
/// best, the deepest wins: equally accurate trees differ mainly in how many
/// bytes their impact vector can credit, and a truncated tree credits only
/// the handful it had room to split on.
pub fn tune_tree_depth(
    train: &ViewDataset,
    depths: &[usize],
    params: TreeParams,
    validation_fraction: f64,
    seed: u64,
) -> Result<DepthSearch, ModelError> {
    if depths.is_empty() {
        return Err(ModelError::InvalidHyperparams("empty depth grid".into()));
    }
    let (fit, val) = train.split(validation_fraction, seed);
    if val.is_empty() || fit.classes_present() < 2 {
        let depth = *depths.iter().max().expect("non-empty");
        return Ok(DepthSearch {
            depth,
            scores: Vec::new(),
        });
    }
    let deepest = *depths.iter().max().expect("non-empty");
    let tree = train_tree(&fit, params.with_depth(deepest))?;
    let labels = val.labels();
    let scores: Vec<(usize, f64)> = depths
        .par_iter()
        .map(|&d| {
            let preds = val
                .samples
                .iter()
                .map(|s| tree.predict_at_depth(&s.features, d).expect("dims checked"));
            (d, fraction_correct(preds, &labels))
        })
        .collect();
    let best = scores.iter().map(|&(_, a)| a).fold(f64::NEG_INFINITY, f64::max);
    let se = (best * (1.0 - best) / val.len() as f64).sqrt();
    let depth = scores
        .iter()
        .filter(|&&(_, a)| a >= best - se)
        .map(|&(d, _)| d)
        .max()
        .expect("best is in the list");
    Ok(DepthSearch { depth, scores })
}
