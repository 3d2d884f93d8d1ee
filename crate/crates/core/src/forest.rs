//! Random forests, budgeted training and grove splitting.

use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::costmodel::{self, CostParams, OpTrace};
use crate::dataset::Dataset;
use crate::simarch::gamma;
use crate::tree::{self, CartParams, DecisionTree, TreeError};

pub const FIELD_RECORD_VERSION: u32 = 1;
const FIELD_MAGIC: &str = "fog-field";

#[derive(Debug, Error)]
pub enum ForestError {
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("invalid budget: {0}")]
    Budget(String),
    #[error("budget {limit:e} is below the cost of a single tree ({cost:e})")]
    BudgetTooSmall { cost: f64, limit: f64 },
    #[error("estimators disagree: {0}")]
    Mismatch(String),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("unsupported field record version {found} (expected {FIELD_RECORD_VERSION})")]
    Version { found: String },
}

/// Per-tree training knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeParams {
    pub cart: CartParams,
    /// Features drawn for each tree; `None` means ceil(sqrt(n_features)).
    pub features_per_tree: Option<usize>,
    /// Train each tree on a bootstrap resample of the training set.
    pub bootstrap: bool,
}

/// Leaf size for forest members. Single-sample leaves give 0/1 class
/// estimates, so two agreeing trees already report full confidence and the
/// hop threshold loses its resolution.
pub const MEMBER_MIN_LEAF: usize = 3;

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            cart: CartParams {
                min_leaf: MEMBER_MIN_LEAF,
                ..CartParams::default()
            },
            features_per_tree: None,
            bootstrap: true,
        }
    }
}

impl TreeParams {
    pub fn subset_size(&self, n_features: usize) -> usize {
        self.features_per_tree
            .unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize)
            .clamp(1, n_features)
    }
}

/// Trains tree `tree_index` of a forest. The tree's randomness comes only
/// from `seed + tree_index`, so trees can be built in any order.
pub fn train_member(
    train: &Dataset,
    params: &TreeParams,
    seed: u64,
    tree_index: usize,
) -> Result<DecisionTree, TreeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(tree_index as u64));
    let nf = train.n_features();
    let mut subset = index::sample(&mut rng, nf, params.subset_size(nf)).into_vec();
    subset.sort_unstable();
    let n = train.n_samples();
    let samples: Vec<usize> = if params.bootstrap {
        (0..n).map(|_| rng.gen_range(0..n)).collect()
    } else {
        (0..n).collect()
    };
    tree::train_cart_on_samples(train, &samples, &params.cart, &subset)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    estimators: Vec<DecisionTree>,
    n_labels: usize,
}

impl RandomForest {
    pub fn from_trees(estimators: Vec<DecisionTree>) -> Result<Self, ForestError> {
        let first = estimators
            .first()
            .ok_or_else(|| ForestError::Mismatch("forest has no trees".into()))?;
        let (nl, nf) = (first.n_labels(), first.n_features());
        if estimators
            .iter()
            .any(|t| t.n_labels() != nl || t.n_features() != nf)
        {
            return Err(ForestError::Mismatch(
                "trees differ in n_labels or n_features".into(),
            ));
        }
        Ok(Self {
            estimators,
            n_labels: nl,
        })
    }

    /// Trains `n_trees` trees in parallel; output is independent of the
    /// thread count.
    pub fn train(
        train: &Dataset,
        n_trees: usize,
        params: &TreeParams,
        seed: u64,
    ) -> Result<Self, ForestError> {
        if n_trees == 0 {
            return Err(ForestError::Topology("need at least one tree".into()));
        }
        let trees = (0..n_trees)
            .into_par_iter()
            .map(|i| train_member(train, params, seed, i))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_trees(trees)
    }

    pub fn estimators(&self) -> &[DecisionTree] {
        &self.estimators
    }

    pub fn n_trees(&self) -> usize {
        self.estimators.len()
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn n_features(&self) -> usize {
        self.estimators[0].n_features()
    }

    /// Majority vote over per-tree argmax labels, lowest label on ties.
    pub fn predict_majority(&self, x: &[f64]) -> usize {
        let mut votes = vec![0usize; self.n_labels];
        for t in &self.estimators {
            votes[t.predict(x)] += 1;
        }
        let mut best = 0;
        for (l, &v) in votes.iter().enumerate() {
            if v > votes[best] {
                best = l;
            }
        }
        best
    }

    /// Unweighted mean of the tree distributions.
    pub fn predict_soft(&self, x: &[f64]) -> Vec<f64> {
        let mut acc = vec![0.0; self.n_labels];
        for t in &self.estimators {
            for (a, p) in acc.iter_mut().zip(t.predict_prob(x).0) {
                *a += p;
            }
        }
        let n = self.estimators.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    pub fn predict_soft_label(&self, x: &[f64]) -> usize {
        crate::argmax(&self.predict_soft(x))
    }
}

/// Output of one grove: mean distribution plus per-tree walk lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct GrovePrediction {
    pub prob: Vec<f64>,
    pub tree_comparisons: Vec<usize>,
}

impl GrovePrediction {
    pub fn comparisons(&self) -> usize {
        self.tree_comparisons.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grove {
    pub index: usize,
    estimators: Vec<DecisionTree>,
}

impl Grove {
    pub fn estimators(&self) -> &[DecisionTree] {
        &self.estimators
    }

    pub fn len(&self) -> usize {
        self.estimators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.estimators.is_empty()
    }

    pub fn predict_prob(&self, x: &[f64]) -> GrovePrediction {
        let n_labels = self.estimators[0].n_labels();
        let mut prob = vec![0.0; n_labels];
        let mut tree_comparisons = Vec::with_capacity(self.estimators.len());
        for t in &self.estimators {
            let (dist, cmp) = t.predict_prob(x);
            for (a, p) in prob.iter_mut().zip(dist) {
                *a += p;
            }
            tree_comparisons.push(cmp);
        }
        let k = self.estimators.len() as f64;
        prob.iter_mut().for_each(|a| *a /= k);
        GrovePrediction {
            prob,
            tree_comparisons,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldOfGroves {
    groves: Vec<Grove>,
    k: usize,
}

impl FieldOfGroves {
    pub fn groves(&self) -> &[Grove] {
        &self.groves
    }

    pub fn n_groves(&self) -> usize {
        self.groves.len()
    }

    /// Nominal trees per grove; the last grove may hold fewer.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_trees(&self) -> usize {
        self.groves.iter().map(Grove::len).sum()
    }

    pub fn n_labels(&self) -> usize {
        self.groves[0].estimators[0].n_labels()
    }

    pub fn n_features(&self) -> usize {
        self.groves[0].estimators[0].n_features()
    }

    pub fn is_balanced(&self) -> bool {
        self.groves.iter().all(|g| g.len() == self.k)
    }

    /// The source forest, trees in grove order.
    pub fn to_forest(&self) -> RandomForest {
        RandomForest::from_trees(
            self.groves
                .iter()
                .flat_map(|g| g.estimators.iter().cloned())
                .collect(),
        )
        .expect("groves hold consistent trees")
    }
}

/// Cuts the estimator list into consecutive chunks of `k`; the final chunk
/// is shorter when `k` does not divide the tree count.
pub fn split(rf: &RandomForest, k: usize) -> Result<FieldOfGroves, ForestError> {
    if k == 0 {
        return Err(ForestError::Topology("grove size k must be at least 1".into()));
    }
    let groves: Vec<Grove> = rf
        .estimators
        .chunks(k)
        .enumerate()
        .map(|(index, chunk)| Grove {
            index,
            estimators: chunk.to_vec(),
        })
        .collect();
    if rf.n_trees() % k != 0 {
        log::warn!(
            "{} trees do not divide into groves of {k}; last grove has {} trees and \
             will be weighted like the others",
            rf.n_trees(),
            rf.n_trees() % k
        );
    }
    Ok(FieldOfGroves { groves, k })
}

/// Trains an `n`-tree forest and splits it into groves of `k`.
pub fn gc_train(
    n: usize,
    k: usize,
    train: &Dataset,
    params: &TreeParams,
    seed: u64,
) -> Result<FieldOfGroves, ForestError> {
    if n == 0 || k == 0 || k > n {
        return Err(ForestError::Topology(format!(
            "need n >= 1 and 1 <= k <= n, got n={n}, k={k}"
        )));
    }
    let rf = RandomForest::train(train, n, params, seed)?;
    split(&rf, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetMetric {
    Energy,
    Delay,
    Edp,
    Accuracy,
}

impl std::str::FromStr for BudgetMetric {
    type Err = ForestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "energy" => Ok(Self::Energy),
            "delay" => Ok(Self::Delay),
            "edp" => Ok(Self::Edp),
            "accuracy" => Ok(Self::Accuracy),
            _ => Err(ForestError::Budget(format!("unknown metric `{s}`"))),
        }
    }
}

/// `limit` is in J, s, J·s, or a fraction, depending on `metric`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub metric: BudgetMetric,
    pub limit: f64,
}

/// Average per-classification validation cost of a forest prefix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetPoint {
    pub n_trees: usize,
    pub accuracy: f64,
    pub energy_j: f64,
    pub delay_s: f64,
    pub edp: f64,
    pub accepted: bool,
}

impl BudgetPoint {
    pub fn cost(&self, metric: BudgetMetric) -> f64 {
        match metric {
            BudgetMetric::Energy => self.energy_j,
            BudgetMetric::Delay => self.delay_s,
            BudgetMetric::Edp => self.edp,
            BudgetMetric::Accuracy => self.accuracy,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BudgetedForest {
    pub forest: RandomForest,
    /// One point per forest size evaluated, in order.
    pub trajectory: Vec<BudgetPoint>,
}

/// Knobs for [`budget_rf_train`] beyond the budget itself.
#[derive(Debug, Clone, Copy)]
pub struct BudgetRun {
    pub n_max: usize,
    /// Trees evaluated concurrently by the processing element.
    pub parallelism: usize,
    pub seed: u64,
}

/// Adds trees one at a time while the forest's average validation cost
/// stays within budget, up to `run.n_max` trees.
///
/// The forest is costed as a single processing element holding every tree:
/// one processor enqueue plus one PE visit per validation input. For an
/// accuracy budget, trees are added until validation accuracy reaches the
/// limit.
pub fn budget_rf_train(
    train: &Dataset,
    validation: &Dataset,
    budget: &Budget,
    cost: &CostParams,
    params: &TreeParams,
    run: &BudgetRun,
) -> Result<BudgetedForest, ForestError> {
    if !(budget.limit > 0.0) || budget.limit.is_nan() {
        return Err(ForestError::Budget(format!(
            "limit must be > 0, got {}",
            budget.limit
        )));
    }
    if budget.metric == BudgetMetric::Accuracy && budget.limit > 1.0 {
        return Err(ForestError::Budget("accuracy limit must be <= 1".into()));
    }
    if run.n_max == 0 {
        return Err(ForestError::Budget("n_max must be at least 1".into()));
    }
    let mut trees: Vec<DecisionTree> = Vec::new();
    let mut trajectory = Vec::new();
    for i in 0..run.n_max {
        let tree = train_member(train, params, run.seed, i)?;
        trees.push(tree);
        let mut point = validation_cost(&trees, validation, cost, run.parallelism);
        let value = point.cost(budget.metric);
        if budget.metric == BudgetMetric::Accuracy {
            point.accepted = true;
            trajectory.push(point);
            if value >= budget.limit {
                break;
            }
            continue;
        }
        if value > budget.limit {
            trajectory.push(point);
            trees.pop();
            if trees.is_empty() {
                return Err(ForestError::BudgetTooSmall {
                    cost: value,
                    limit: budget.limit,
                });
            }
            break;
        }
        point.accepted = true;
        trajectory.push(point);
    }
    Ok(BudgetedForest {
        forest: RandomForest::from_trees(trees)?,
        trajectory,
    })
}

/// Mean per-input validation cost of a forest run as one PE.
pub fn validation_cost(
    trees: &[DecisionTree],
    validation: &Dataset,
    cost: &CostParams,
    parallelism: usize,
) -> BudgetPoint {
    let n_labels = validation.n_labels();
    let g = gamma(validation.n_features(), n_labels);
    let mut total = OpTrace::default();
    let mut correct = 0usize;
    let mut comparisons = Vec::with_capacity(trees.len());
    let mut acc = vec![0.0; n_labels];
    for (x, &y) in validation.rows().zip(validation.labels()) {
        comparisons.clear();
        acc.iter_mut().for_each(|a| *a = 0.0);
        for t in trees {
            let (dist, c) = t.predict_prob(x);
            comparisons.push(c);
            for (a, p) in acc.iter_mut().zip(dist) {
                *a += p;
            }
        }
        if crate::argmax(&acc) == y {
            correct += 1;
        }
        total += costmodel::enqueue_trace(g, cost);
        total += costmodel::pe_visit_trace(&comparisons, parallelism, n_labels, g, cost);
    }
    let n = validation.n_samples() as f64;
    let energy_j = costmodel::energy_of(&total, cost) / n;
    let mean_cycles = total.cycles as f64 / n;
    BudgetPoint {
        n_trees: trees.len(),
        accuracy: correct as f64 / n,
        energy_j,
        delay_s: mean_cycles / cost.clock_hz,
        edp: costmodel::edp(energy_j, mean_cycles, cost),
        accepted: false,
    }
}

/// Shape of a randomly generated field, for exercising the evaluator and
/// simulator without training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticShape {
    pub n_groves: usize,
    pub k: usize,
    pub n_features: usize,
    pub n_labels: usize,
    /// Every root-to-leaf path has exactly this many splits.
    pub depth: usize,
}

/// Random complete trees over features in [0, 1] with leaf distributions
/// drawn from a flat Dirichlet, so no grove output is one-hot.
pub fn synthetic_field(shape: &SyntheticShape, seed: u64) -> Result<FieldOfGroves, ForestError> {
    let SyntheticShape {
        n_groves,
        k,
        n_features,
        n_labels,
        depth,
    } = *shape;
    if n_groves == 0 || k == 0 || n_features == 0 || n_labels == 0 || depth == 0 {
        return Err(ForestError::Topology(format!("degenerate shape {shape:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..n_features).collect();
    let mut trees = Vec::with_capacity(n_groves * k);
    for _ in 0..n_groves * k {
        let mut nodes = Vec::new();
        grow_random(&mut nodes, &mut rng, depth, n_features, n_labels);
        trees.push(DecisionTree::from_nodes(
            nodes,
            depth,
            all.clone(),
            n_features,
            n_labels,
        )?);
    }
    split(&RandomForest::from_trees(trees)?, k)
}

fn grow_random(
    nodes: &mut Vec<tree::Node>,
    rng: &mut ChaCha8Rng,
    depth: usize,
    n_features: usize,
    n_labels: usize,
) -> usize {
    let id = nodes.len();
    if depth == 0 {
        let raw: Vec<f64> = (0..n_labels)
            .map(|_| -(1.0 - rng.gen::<f64>()).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let mut distribution: Vec<f64> = raw.iter().map(|r| r / total).collect();
        // keep the sum within tolerance after division
        let drift = 1.0 - distribution.iter().sum::<f64>();
        distribution[0] += drift;
        nodes.push(tree::Node::Leaf { distribution });
        return id;
    }
    nodes.push(tree::Node::Leaf {
        distribution: Vec::new(),
    });
    let feature = rng.gen_range(0..n_features);
    let threshold = rng.gen_range(0.1..0.9);
    let left = grow_random(nodes, rng, depth - 1, n_features, n_labels);
    let right = grow_random(nodes, rng, depth - 1, n_features, n_labels);
    nodes[id] = tree::Node::Split {
        feature,
        threshold,
        left,
        right,
    };
    id
}

/// Field model file: a short header followed by every tree record in
/// grove order.
pub fn serialize_field(fog: &FieldOfGroves) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{FIELD_MAGIC} {FIELD_RECORD_VERSION}");
    let _ = writeln!(s, "n_groves {}", fog.n_groves());
    let _ = writeln!(s, "k {}", fog.k);
    let _ = writeln!(s, "n_trees {}", fog.n_trees());
    let _ = writeln!(s, "n_features {}", fog.n_features());
    let _ = writeln!(s, "n_labels {}", fog.n_labels());
    for g in &fog.groves {
        for t in &g.estimators {
            s.push_str(&tree::serialize_tree(t));
        }
    }
    s
}

pub fn deserialize_field(text: &str) -> Result<FieldOfGroves, ForestError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let malformed = |line: usize, message: &str| ForestError::Malformed {
        line,
        message: message.to_string(),
    };
    let (line, head) = lines.next().ok_or_else(|| malformed(0, "empty field record"))?;
    let mut it = head.split_whitespace();
    if it.next() != Some(FIELD_MAGIC) {
        return Err(malformed(line, "missing `fog-field` header"));
    }
    let version = it.next().unwrap_or("");
    if version != FIELD_RECORD_VERSION.to_string() {
        return Err(ForestError::Version {
            found: version.to_string(),
        });
    }
    let mut header = |key: &str| -> Result<usize, ForestError> {
        let (line, text) = lines
            .next()
            .ok_or_else(|| malformed(0, &format!("missing `{key}`")))?;
        match text.split_once(' ') {
            Some((k, v)) if k == key => v
                .trim()
                .parse()
                .map_err(|_| malformed(line, "expected an integer")),
            _ => Err(malformed(line, &format!("expected `{key}`"))),
        }
    };
    let n_groves = header("n_groves")?;
    let k = header("k")?;
    let n_trees = header("n_trees")?;
    let n_features = header("n_features")?;
    let n_labels = header("n_labels")?;
    let mut trees = Vec::with_capacity(n_trees);
    for _ in 0..n_trees {
        let t = tree::parse_tree_lines(&mut lines)?;
        if t.n_features() != n_features || t.n_labels() != n_labels {
            return Err(ForestError::Mismatch(
                "tree header disagrees with field header".into(),
            ));
        }
        trees.push(t);
    }
    if let Some((line, _)) = lines.next() {
        return Err(malformed(line, "trailing content after last tree"));
    }
    let fog = split(&RandomForest::from_trees(trees)?, k)?;
    if fog.n_groves() != n_groves {
        return Err(ForestError::Mismatch(format!(
            "header says {n_groves} groves, trees split into {}",
            fog.n_groves()
        )));
    }
    Ok(fog)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::Node;

    fn leaf_tree(dist: Vec<f64>) -> DecisionTree {
        let nl = dist.len();
        DecisionTree::from_nodes(vec![Node::Leaf { distribution: dist }], 1, vec![0], 1, nl)
            .unwrap()
    }

    /// Tree `i` predicts one-hot class `i % n_labels`.
    fn tagged_forest(n: usize, n_labels: usize) -> RandomForest {
        RandomForest::from_trees(
            (0..n)
                .map(|i| {
                    let mut d = vec![0.0; n_labels];
                    d[i % n_labels] = 1.0;
                    leaf_tree(d)
                })
                .collect(),
        )
        .unwrap()
    }

    fn blobs(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 3;
            rows.push(
                (0..4)
                    .map(|j| c as f64 * (j as f64 + 1.0) + rng.gen_range(-1.5..1.5))
                    .collect(),
            );
            labels.push(c);
        }
        Dataset::from_rows("blobs", &rows, labels, 3).unwrap()
    }

    #[test]
    fn split_shapes() {
        let rf = tagged_forest(16, 16);
        assert_eq!(split(&rf, 16).unwrap().n_groves(), 1);
        assert_eq!(split(&rf, 1).unwrap().n_groves(), 16);
        let f = split(&rf, 2).unwrap();
        assert_eq!(f.n_groves(), 8);
        for (j, g) in f.groves().iter().enumerate() {
            assert_eq!(g.index, j);
            assert_eq!(g.estimators()[0], rf.estimators()[2 * j]);
            assert_eq!(g.estimators()[1], rf.estimators()[2 * j + 1]);
        }
        assert_eq!(f.to_forest(), rf);
        assert!(split(&rf, 0).is_err());
    }

    #[test]
    fn gc_train_topologies() {
        let ds = blobs(60, 3);
        let p = TreeParams::default();
        let f = gc_train(16, 2, &ds, &p, 1).unwrap();
        assert_eq!((f.n_groves(), f.k()), (8, 2));
        assert!(f.groves().iter().all(|g| g.len() == 2));
        let f = gc_train(16, 4, &ds, &p, 1).unwrap();
        assert_eq!(f.n_groves(), 4);
        assert!(f.groves().iter().all(|g| g.len() == 4));
        // i = 0, 2, 4 -> chunks of 2, 2, 1
        let f = gc_train(5, 2, &ds, &p, 1).unwrap();
        let sizes: Vec<usize> = f.groves().iter().map(Grove::len).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        assert!(!f.is_balanced());
        assert!(gc_train(0, 1, &ds, &p, 1).is_err());
        assert!(gc_train(4, 0, &ds, &p, 1).is_err());
        assert!(gc_train(4, 5, &ds, &p, 1).is_err());
    }

    #[test]
    fn grove_means() {
        let rf = RandomForest::from_trees(vec![leaf_tree(vec![1.0, 0.0]), leaf_tree(vec![0.0, 1.0])])
            .unwrap();
        let f = split(&rf, 2).unwrap();
        assert_eq!(f.groves()[0].predict_prob(&[0.0]).prob, vec![0.5, 0.5]);
        let single = split(&rf, 1).unwrap();
        assert_eq!(single.groves()[1].predict_prob(&[0.0]).prob, vec![0.0, 1.0]);
    }

    #[test]
    fn voting_rules() {
        let rf = RandomForest::from_trees(vec![
            leaf_tree(vec![1.0, 0.0]),
            leaf_tree(vec![0.6, 0.4]),
            leaf_tree(vec![0.0, 1.0]),
        ])
        .unwrap();
        assert_eq!(rf.predict_majority(&[0.0]), 0);
        let tie = RandomForest::from_trees(vec![leaf_tree(vec![1.0, 0.0]), leaf_tree(vec![0.0, 1.0])])
            .unwrap();
        assert_eq!(tie.predict_soft(&[0.0]), vec![0.5, 0.5]);
        assert_eq!(tie.predict_soft_label(&[0.0]), 0);
        assert_eq!(tie.predict_majority(&[0.0]), 0);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let ds = blobs(90, 5);
        let p = TreeParams::default();
        let a = RandomForest::train(&ds, 6, &p, 11).unwrap();
        let b = RandomForest::train(&ds, 6, &p, 11).unwrap();
        assert_eq!(a, b);
        // member i only depends on seed + i
        assert_eq!(a.estimators()[3], train_member(&ds, &p, 11, 3).unwrap());
        let c = RandomForest::train(&ds, 6, &p, 12).unwrap();
        assert_ne!(a, c);
        for t in a.estimators() {
            assert_eq!(t.feature_subset().len(), 2);
        }
    }

    #[test]
    fn field_record_round_trip() {
        let ds = blobs(60, 8);
        let f = gc_train(6, 4, &ds, &TreeParams::default(), 2).unwrap();
        let text = serialize_field(&f);
        assert!(text.starts_with("fog-field 1\nn_groves 2\nk 4\nn_trees 6\n"));
        assert_eq!(deserialize_field(&text).unwrap(), f);
        let bad = text.replacen("n_groves 2", "n_groves 3", 1);
        assert!(deserialize_field(&bad).is_err());
        let bad = text.replacen("fog-field 1", "fog-field 9", 1);
        assert!(matches!(deserialize_field(&bad), Err(ForestError::Version { .. })));
    }

    #[test]
    fn budget_infinite_gives_n_max() {
        let ds = blobs(90, 1);
        let budget = Budget {
            metric: BudgetMetric::Edp,
            limit: f64::INFINITY,
        };
        let run = BudgetRun {
            n_max: 16,
            parallelism: 1,
            seed: 4,
        };
        let out = budget_rf_train(&ds, &ds, &budget, &CostParams::default(), &TreeParams::default(), &run)
            .unwrap();
        assert_eq!(out.forest.n_trees(), 16);
        assert_eq!(out.trajectory.len(), 16);
    }

    #[test]
    fn budget_too_small() {
        let ds = blobs(90, 1);
        let budget = Budget {
            metric: BudgetMetric::Energy,
            limit: 1e-30,
        };
        let run = BudgetRun {
            n_max: 4,
            parallelism: 1,
            seed: 4,
        };
        let r = budget_rf_train(&ds, &ds, &budget, &CostParams::default(), &TreeParams::default(), &run);
        assert!(matches!(r, Err(ForestError::BudgetTooSmall { .. })));
        let bad = Budget {
            metric: BudgetMetric::Energy,
            limit: 0.0,
        };
        let r = budget_rf_train(&ds, &ds, &bad, &CostParams::default(), &TreeParams::default(), &run);
        assert!(matches!(r, Err(ForestError::Budget(_))));
    }

    #[test]
    fn budget_accuracy_stops_when_reached() {
        let ds = blobs(120, 2);
        let run = BudgetRun {
            n_max: 16,
            parallelism: 1,
            seed: 4,
        };
        let budget = Budget {
            metric: BudgetMetric::Accuracy,
            limit: 0.5,
        };
        let out = budget_rf_train(&ds, &ds, &budget, &CostParams::default(), &TreeParams::default(), &run)
            .unwrap();
        let last = out.trajectory.last().unwrap();
        assert!(last.accuracy >= 0.5);
        assert!(out.forest.n_trees() < 16);
        assert!(out.trajectory[..out.trajectory.len() - 1]
            .iter()
            .all(|p| p.accuracy < 0.5));
    }
}
