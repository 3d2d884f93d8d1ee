//! CART decision trees stored as a flat, reprogrammable node array.
//!
//! Every internal node holds a feature offset into the input payload and a
//! threshold weight; evaluation goes right when `x[offset] > threshold`.
//! Leaves hold a class distribution.

use std::fmt::Write as _;

use thiserror::Error;

use crate::dataset::Dataset;
use crate::PROB_TOLERANCE;

pub const TREE_RECORD_VERSION: u32 = 1;
const TREE_MAGIC: &str = "fog-tree";

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("feature subset is empty")]
    EmptyFeatureSubset,
    #[error("max_depth must be at least 1")]
    ZeroDepth,
    #[error("min_leaf must be at least 1")]
    ZeroMinLeaf,
    #[error("feature {feature} out of range for {n_features} features")]
    FeatureOutOfRange { feature: usize, n_features: usize },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("unsupported tree record version {found} (expected {TREE_RECORD_VERSION})")]
    Version { found: String },
    #[error("invalid tree: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        distribution: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CartParams {
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for CartParams {
    fn default() -> Self {
        Self {
            max_depth: 12,
            min_leaf: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
    max_depth: usize,
    feature_subset: Vec<usize>,
    n_features: usize,
    n_labels: usize,
}

impl DecisionTree {
    /// Assembles a tree from raw nodes, rejecting anything that is not a
    /// well-formed tree rooted at node 0.
    pub fn from_nodes(
        nodes: Vec<Node>,
        max_depth: usize,
        feature_subset: Vec<usize>,
        n_features: usize,
        n_labels: usize,
    ) -> Result<Self, TreeError> {
        let tree = Self {
            nodes,
            max_depth,
            feature_subset,
            n_features,
            n_labels,
        };
        tree.validate()?;
        Ok(tree)
    }

    fn validate(&self) -> Result<(), TreeError> {
        let invalid = |m: String| Err(TreeError::Invalid(m));
        if self.nodes.is_empty() {
            return invalid("no nodes".into());
        }
        if self.n_labels == 0 {
            return invalid("n_labels must be at least 1".into());
        }
        if let Some(&f) = self.feature_subset.iter().find(|&&f| f >= self.n_features) {
            return Err(TreeError::FeatureOutOfRange {
                feature: f,
                n_features: self.n_features,
            });
        }
        let n = self.nodes.len();
        let mut parents = vec![0usize; n];
        for (id, node) in self.nodes.iter().enumerate() {
            match node {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if *feature >= self.n_features {
                        return Err(TreeError::FeatureOutOfRange {
                            feature: *feature,
                            n_features: self.n_features,
                        });
                    }
                    if !self.feature_subset.contains(feature) {
                        return invalid(format!(
                            "node {id} uses feature {feature} outside the tree's subset"
                        ));
                    }
                    if threshold.is_nan() {
                        return invalid(format!("node {id} has NaN threshold"));
                    }
                    for &child in [left, right] {
                        if child >= n {
                            return invalid(format!("node {id} points at missing node {child}"));
                        }
                        parents[child] += 1;
                    }
                }
                Node::Leaf { distribution } => {
                    if distribution.len() != self.n_labels {
                        return invalid(format!(
                            "leaf {id} has {} probabilities, expected {}",
                            distribution.len(),
                            self.n_labels
                        ));
                    }
                    if distribution.iter().any(|p| !(*p >= 0.0)) {
                        return invalid(format!("leaf {id} has a negative probability"));
                    }
                    let sum: f64 = distribution.iter().sum();
                    if (sum - 1.0).abs() > PROB_TOLERANCE {
                        return invalid(format!("leaf {id} sums to {sum}"));
                    }
                }
            }
        }
        if parents[0] != 0 {
            return invalid("root has a parent (cycle)".into());
        }
        if let Some(id) = (1..n).find(|&i| parents[i] != 1) {
            return invalid(format!(
                "node {id} has {} parents; structure is not a tree",
                parents[id]
            ));
        }
        // single-parent + parentless root: a walk from the root either
        // reaches every node or some nodes sit on a detached cycle
        let mut seen = vec![false; n];
        let mut stack = vec![(0usize, 0usize)];
        let mut reached = 0;
        while let Some((id, depth)) = stack.pop() {
            if seen[id] {
                return invalid(format!("node {id} reached twice (cycle)"));
            }
            seen[id] = true;
            reached += 1;
            if let Node::Split { left, right, .. } = &self.nodes[id] {
                if depth + 1 > self.max_depth {
                    return invalid(format!(
                        "path through node {id} exceeds max_depth {}",
                        self.max_depth
                    ));
                }
                stack.push((*right, depth + 1));
                stack.push((*left, depth + 1));
            }
        }
        if reached != n {
            return invalid("nodes unreachable from the root (cycle)".into());
        }
        Ok(())
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn feature_subset(&self) -> &[usize] {
        &self.feature_subset
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    /// Longest root-to-leaf path, in comparisons.
    pub fn depth(&self) -> usize {
        let mut best = 0;
        let mut stack = vec![(0usize, 0usize)];
        while let Some((id, d)) = stack.pop() {
            match &self.nodes[id] {
                Node::Split { left, right, .. } => {
                    stack.push((*left, d + 1));
                    stack.push((*right, d + 1));
                }
                Node::Leaf { .. } => best = best.max(d),
            }
        }
        best
    }

    /// Walks root to leaf. Returns the leaf distribution and the number
    /// of comparisons performed.
    pub fn predict_prob(&self, x: &[f64]) -> (&[f64], usize) {
        let mut id = 0;
        let mut comparisons = 0;
        loop {
            match &self.nodes[id] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    comparisons += 1;
                    id = if x[*feature] > *threshold { *right } else { *left };
                }
                Node::Leaf { distribution } => return (distribution, comparisons),
            }
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        crate::argmax(self.predict_prob(x).0)
    }
}

/// Trains on every row of `train`.
pub fn train_cart(
    train: &Dataset,
    params: &CartParams,
    feature_subset: &[usize],
) -> Result<DecisionTree, TreeError> {
    let samples: Vec<usize> = (0..train.n_samples()).collect();
    train_cart_on_samples(train, &samples, params, feature_subset)
}

/// Trains on the rows named by `samples`; repeated indices count once per
/// occurrence, which is how bootstrap samples are fed in.
///
/// Splits minimise weighted Gini impurity over midpoints between
/// consecutive distinct values. Ties go to the lowest feature index, then
/// the lowest threshold. Zero-gain splits are taken (XOR-style data needs
/// them); growth stops at `max_depth`, at pure nodes, or when no split
/// leaves `min_leaf` samples on both sides.
pub fn train_cart_on_samples(
    train: &Dataset,
    samples: &[usize],
    params: &CartParams,
    feature_subset: &[usize],
) -> Result<DecisionTree, TreeError> {
    if samples.is_empty() || train.n_samples() == 0 {
        return Err(TreeError::EmptyTrainingSet);
    }
    if feature_subset.is_empty() {
        return Err(TreeError::EmptyFeatureSubset);
    }
    if params.max_depth == 0 {
        return Err(TreeError::ZeroDepth);
    }
    if params.min_leaf == 0 {
        return Err(TreeError::ZeroMinLeaf);
    }
    let mut subset = feature_subset.to_vec();
    subset.sort_unstable();
    subset.dedup();
    if let Some(&f) = subset.iter().find(|&&f| f >= train.n_features()) {
        return Err(TreeError::FeatureOutOfRange {
            feature: f,
            n_features: train.n_features(),
        });
    }

    let mut builder = Builder {
        data: train,
        params,
        subset: &subset,
        nodes: Vec::new(),
        scratch: Vec::with_capacity(samples.len()),
    };
    let mut work = samples.to_vec();
    builder.grow(&mut work, 0);
    let nodes = builder.nodes;
    DecisionTree::from_nodes(
        nodes,
        params.max_depth,
        subset,
        train.n_features(),
        train.n_labels(),
    )
}

struct Builder<'a> {
    data: &'a Dataset,
    params: &'a CartParams,
    subset: &'a [usize],
    nodes: Vec<Node>,
    scratch: Vec<(f64, usize)>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl Builder<'_> {
    fn grow(&mut self, samples: &mut [usize], depth: usize) -> usize {
        let id = self.nodes.len();
        let counts = self.class_counts(samples);
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let splittable = depth < self.params.max_depth
            && !pure
            && samples.len() >= 2 * self.params.min_leaf;
        let best = if splittable {
            self.best_split(samples, &counts)
        } else {
            None
        };
        let Some(best) = best else {
            let n = samples.len() as f64;
            self.nodes.push(Node::Leaf {
                distribution: counts.iter().map(|&c| c as f64 / n).collect(),
            });
            return id;
        };

        self.nodes.push(Node::Leaf {
            distribution: Vec::new(),
        });
        let data = self.data;
        let (feature, threshold) = (best.feature, best.threshold);
        let mut mid = 0;
        for i in 0..samples.len() {
            if data.row(samples[i])[feature] <= threshold {
                samples.swap(i, mid);
                mid += 1;
            }
        }
        let (lo, hi) = samples.split_at_mut(mid);
        let left = self.grow(lo, depth + 1);
        let right = self.grow(hi, depth + 1);
        self.nodes[id] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }

    fn class_counts(&self, samples: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.data.n_labels()];
        for &s in samples {
            counts[self.data.label(s)] += 1;
        }
        counts
    }

    /// Lowest weighted impurity, scored as n_L·gini_L + n_R·gini_R.
    fn best_split(&mut self, samples: &[usize], counts: &[usize]) -> Option<BestSplit> {
        let n = samples.len();
        let min_leaf = self.params.min_leaf;
        let total_sq: f64 = counts.iter().map(|&c| (c * c) as f64).sum();
        let mut best: Option<BestSplit> = None;
        let mut left = vec![0usize; counts.len()];

        for &feature in self.subset {
            self.scratch.clear();
            self.scratch.extend(
                samples
                    .iter()
                    .map(|&s| (self.data.row(s)[feature], self.data.label(s))),
            );
            self.scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
            left.iter_mut().for_each(|c| *c = 0);
            let mut left_sq = 0.0;
            let mut right_sq = total_sq;

            for i in 0..n - 1 {
                let (v, label) = self.scratch[i];
                let right_c = counts[label] - left[label];
                left_sq += (2 * left[label] + 1) as f64;
                right_sq -= (2 * right_c - 1) as f64;
                left[label] += 1;

                let next = self.scratch[i + 1].0;
                let n_left = i + 1;
                let n_right = n - n_left;
                if v == next || n_left < min_leaf || n_right < min_leaf {
                    continue;
                }
                let score = (n_left as f64 - left_sq / n_left as f64)
                    + (n_right as f64 - right_sq / n_right as f64);
                if best.as_ref().map_or(true, |b| score < b.score - 1e-9) {
                    let mut threshold = v + (next - v) / 2.0;
                    if !(threshold < next) {
                        threshold = v;
                    }
                    best = Some(BestSplit {
                        feature,
                        threshold,
                        score,
                    });
                }
            }
        }
        best
    }
}

/// Text record: header lines, one line per node, then `end`.
///
/// ```text
/// fog-tree 1
/// n_features 2
/// n_labels 2
/// max_depth 2
/// feature_subset 0,1
/// node 0 feat 0 thr 0.5 L 1 R 4
/// leaf 1 dist 1,0
/// end
/// ```
pub fn serialize_tree(tree: &DecisionTree) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{TREE_MAGIC} {TREE_RECORD_VERSION}");
    let _ = writeln!(s, "n_features {}", tree.n_features);
    let _ = writeln!(s, "n_labels {}", tree.n_labels);
    let _ = writeln!(s, "max_depth {}", tree.max_depth);
    let _ = writeln!(s, "feature_subset {}", join(&tree.feature_subset));
    for (id, node) in tree.nodes.iter().enumerate() {
        match node {
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                let _ = writeln!(
                    s,
                    "node {id} feat {feature} thr {threshold:?} L {left} R {right}"
                );
            }
            Node::Leaf { distribution } => {
                let dist: Vec<String> = distribution.iter().map(|p| format!("{p:?}")).collect();
                let _ = writeln!(s, "leaf {id} dist {}", dist.join(","));
            }
        }
    }
    s.push_str("end\n");
    s
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn deserialize_tree(record: &str) -> Result<DecisionTree, TreeError> {
    let mut lines = record
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    parse_tree_lines(&mut lines)
}

/// Parses one tree record from a line stream, consuming through `end`.
pub(crate) fn parse_tree_lines<'a, I>(lines: &mut I) -> Result<DecisionTree, TreeError>
where
    I: Iterator<Item = (usize, &'a str)>,
{
    let malformed = |line: usize, message: &str| TreeError::Malformed {
        line,
        message: message.to_string(),
    };
    let (line, head) = lines.next().ok_or_else(|| malformed(0, "empty record"))?;
    let mut it = head.split_whitespace();
    if it.next() != Some(TREE_MAGIC) {
        return Err(malformed(line, "missing `fog-tree` header"));
    }
    let version = it.next().unwrap_or("");
    if version != TREE_RECORD_VERSION.to_string() {
        return Err(TreeError::Version {
            found: version.to_string(),
        });
    }

    let mut header = |key: &str| -> Result<(usize, String), TreeError> {
        let (line, text) = lines
            .next()
            .ok_or_else(|| malformed(0, &format!("missing `{key}`")))?;
        match text.split_once(' ') {
            Some((k, v)) if k == key => Ok((line, v.trim().to_string())),
            _ if text == key => Ok((line, String::new())),
            _ => Err(malformed(line, &format!("expected `{key}`"))),
        }
    };
    let parse_usize = |(line, v): (usize, String)| -> Result<usize, TreeError> {
        v.parse().map_err(|_| malformed(line, "expected an integer"))
    };
    let n_features = parse_usize(header("n_features")?)?;
    let n_labels = parse_usize(header("n_labels")?)?;
    let max_depth = parse_usize(header("max_depth")?)?;
    let (subset_line, subset_text) = header("feature_subset")?;
    let feature_subset = if subset_text.is_empty() {
        Vec::new()
    } else {
        subset_text
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| malformed(subset_line, "bad feature_subset"))?
    };

    let mut slots: Vec<Option<Node>> = Vec::new();
    let mut terminated = false;
    for (line, text) in lines.by_ref() {
        if text == "end" {
            terminated = true;
            break;
        }
        let tok: Vec<&str> = text.split_whitespace().collect();
        let (id, node) = match tok.as_slice() {
            ["node", id, "feat", f, "thr", t, "L", l, "R", r] => {
                let p = |s: &str| s.parse::<usize>().map_err(|_| malformed(line, "bad integer"));
                let threshold: f64 = t.parse().map_err(|_| malformed(line, "bad threshold"))?;
                (
                    p(id)?,
                    Node::Split {
                        feature: p(f)?,
                        threshold,
                        left: p(l)?,
                        right: p(r)?,
                    },
                )
            }
            ["leaf", id, "dist", d] => {
                let id = id.parse::<usize>().map_err(|_| malformed(line, "bad integer"))?;
                let distribution = d
                    .split(',')
                    .map(str::parse::<f64>)
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| malformed(line, "bad distribution"))?;
                (id, Node::Leaf { distribution })
            }
            _ => return Err(malformed(line, "expected `node ...` or `leaf ...`")),
        };
        if id >= slots.len() {
            slots.resize(id + 1, None);
        }
        if slots[id].is_some() {
            return Err(malformed(line, &format!("duplicate node id {id}")));
        }
        slots[id] = Some(node);
    }
    if !terminated {
        return Err(malformed(0, "record not terminated by `end`"));
    }
    let nodes = slots
        .into_iter()
        .enumerate()
        .map(|(i, n)| n.ok_or_else(|| TreeError::Invalid(format!("node id {i} missing"))))
        .collect::<Result<Vec<_>, _>>()?;
    DecisionTree::from_nodes(nodes, max_depth, feature_subset, n_features, n_labels)
}
