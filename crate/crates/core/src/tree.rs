//! Classification trees whose leaves hold class-probability vectors.
//!
//! Two kinds share one growth procedure and differ only in how a node's
//! split is chosen:
//!
//! * [`TreeKind::Standard`]: the best midpoint split over a fresh random
//!   subset of `mtry` features, grown on a bootstrap sample by default.
//! * [`TreeKind::ExtraRandom`]: one uniform random threshold per subset
//!   feature, keeping the best of those candidates; no bootstrap by default.
//!
//! Samples route left iff `x[feature] <= threshold`.

use rand::seq::index;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::Rng;

/// Smallest impurity decrease a standard split must reach to count as an improvement.
pub const MIN_IMPURITY_DECREASE: f64 = 1e-12;

/// Tolerance on the sum of every leaf probability vector.
pub const LEAF_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TreeKind {
    Standard,
    ExtraRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Criterion {
    #[default]
    Entropy,
    Gini,
}

/// Impurity of a node with the given per-class counts: entropy in bits
/// (`-sum p log2 p`) or gini (`1 - sum p^2`).
pub fn impurity(class_counts: &[usize], criterion: Criterion) -> Result<f64> {
    let total: usize = class_counts.iter().sum();
    if total == 0 {
        return Err(Error::validation("impurity of an empty node is undefined"));
    }
    Ok(impurity_unchecked(class_counts, total, criterion))
}

#[inline]
fn impurity_unchecked(counts: &[usize], total: usize, criterion: Criterion) -> f64 {
    let n = total as f64;
    match criterion {
        Criterion::Entropy => {
            let mut h = 0.0;
            for &c in counts {
                if c > 0 {
                    let p = c as f64 / n;
                    h -= p * p.log2();
                }
            }
            h
        }
        Criterion::Gini => {
            let mut s = 0.0;
            for &c in counts {
                let p = c as f64 / n;
                s += p * p;
            }
            1.0 - s
        }
    }
}

/// Weighted impurity decrease of splitting a node into `left` and `right`.
#[inline]
fn impurity_decrease(
    parent: f64,
    left: &[usize],
    n_left: usize,
    right: &[usize],
    n_right: usize,
    criterion: Criterion,
) -> f64 {
    let n = (n_left + n_right) as f64;
    parent
        - (n_left as f64 / n) * impurity_unchecked(left, n_left, criterion)
        - (n_right as f64 / n) * impurity_unchecked(right, n_right, criterion)
}

/// Midpoint threshold between two consecutive distinct sorted values.
#[inline]
pub fn midpoint(lo: f64, hi: f64) -> f64 {
    let t = (lo + hi) / 2.0;
    // Adjacent floats can round up to `hi`, which would empty the right side.
    if t < hi {
        t
    } else {
        lo
    }
}

/// Column access to a training matrix.
///
/// Split search reads one feature across many rows, so implementations
/// should make that access pattern cheap.
pub trait FeatureSource: Sync {
    fn n_rows(&self) -> usize;
    fn n_features(&self) -> usize;
    fn value(&self, row: usize, feature: usize) -> f64;
}

impl FeatureSource for Matrix {
    fn n_rows(&self) -> usize {
        self.rows()
    }

    fn n_features(&self) -> usize {
        self.cols()
    }

    #[inline]
    fn value(&self, row: usize, feature: usize) -> f64 {
        self.get(row, feature)
    }
}

/// Feature-major copy of a matrix.
#[derive(Debug, Clone)]
pub struct ColumnMajor {
    n_rows: usize,
    n_features: usize,
    data: Vec<f64>,
}

impl ColumnMajor {
    pub fn from_matrix(m: &Matrix) -> Self {
        let (n_rows, n_features) = (m.rows(), m.cols());
        let mut data = vec![0.0; n_rows * n_features];
        for (r, row) in m.iter_rows().enumerate() {
            for (f, &v) in row.iter().enumerate() {
                data[f * n_rows + r] = v;
            }
        }
        ColumnMajor {
            n_rows,
            n_features,
            data,
        }
    }

    pub fn column(&self, feature: usize) -> &[f64] {
        &self.data[feature * self.n_rows..(feature + 1) * self.n_rows]
    }
}

impl FeatureSource for ColumnMajor {
    fn n_rows(&self) -> usize {
        self.n_rows
    }

    fn n_features(&self) -> usize {
        self.n_features
    }

    #[inline]
    fn value(&self, row: usize, feature: usize) -> f64 {
        self.data[feature * self.n_rows + row]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub impurity_decrease: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeParams {
    pub kind: TreeKind,
    pub criterion: Criterion,
    /// `None` grows until leaves are pure or unsplittable.
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    /// Features examined per node; `None` means `round(sqrt(d))`.
    pub mtry: Option<usize>,
    pub bootstrap: bool,
}

impl TreeParams {
    pub fn standard() -> Self {
        TreeParams {
            kind: TreeKind::Standard,
            criterion: Criterion::Entropy,
            max_depth: None,
            min_samples_split: 2,
            min_samples_leaf: 1,
            mtry: None,
            bootstrap: true,
        }
    }

    pub fn extra_random() -> Self {
        TreeParams {
            kind: TreeKind::ExtraRandom,
            bootstrap: false,
            ..TreeParams::standard()
        }
    }

    pub fn with_criterion(mut self, criterion: Criterion) -> Self {
        self.criterion = criterion;
        self
    }

    pub fn with_max_depth(mut self, max_depth: Option<usize>) -> Self {
        self.max_depth = max_depth;
        self
    }

    pub fn with_mtry(mut self, mtry: Option<usize>) -> Self {
        self.mtry = mtry;
        self
    }

    pub fn with_bootstrap(mut self, bootstrap: bool) -> Self {
        self.bootstrap = bootstrap;
        self
    }

    /// Subset size actually used for `d` input features.
    pub fn resolved_mtry(&self, d: usize) -> usize {
        self.mtry
            .unwrap_or_else(|| ((d as f64).sqrt().round() as usize).max(1))
            .min(d.max(1))
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.min_samples_split < 2 {
            return Err(Error::validation("min_samples_split must be at least 2"));
        }
        if self.min_samples_leaf < 1 {
            return Err(Error::validation("min_samples_leaf must be at least 1"));
        }
        if let Some(m) = self.mtry {
            if m == 0 || m > d {
                return Err(Error::validation(format!(
                    "mtry must be in [1, {d}], got {m}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Index into the tree's leaf table.
    Leaf { leaf: usize },
}

/// A fitted tree. Nodes are stored in preorder with the root at index 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeModel {
    kind: TreeKind,
    n_classes: usize,
    n_features: usize,
    nodes: Vec<Node>,
    leaf_values: Vec<f64>,
}

impl TreeModel {
    /// Rebuilds a tree from its parts, checking every structural invariant:
    /// preorder layout, single parent per node, in-range features and
    /// normalized leaf vectors.
    pub fn from_parts(
        kind: TreeKind,
        n_classes: usize,
        n_features: usize,
        nodes: Vec<Node>,
        leaf_values: Vec<f64>,
    ) -> Result<Self> {
        let tree = TreeModel {
            kind,
            n_classes,
            n_features,
            nodes,
            leaf_values,
        };
        tree.check()?;
        Ok(tree)
    }

    fn check(&self) -> Result<()> {
        let k = self.n_classes;
        if k < 2 {
            return Err(Error::Integrity(format!("tree has {k} classes")));
        }
        if self.nodes.is_empty() {
            return Err(Error::Integrity("tree has no nodes".into()));
        }
        let n_leaves = self.leaf_values.len() / k;
        if !self.leaf_values.len().is_multiple_of(k) {
            return Err(Error::Integrity(
                "leaf table length is not a multiple of K".into(),
            ));
        }
        let mut parents = vec![0u32; self.nodes.len()];
        let mut leaf_seen = vec![false; n_leaves];
        for (i, node) in self.nodes.iter().enumerate() {
            match *node {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    if feature >= self.n_features {
                        return Err(Error::Integrity(format!(
                            "node {i} splits on feature {feature} of {}",
                            self.n_features
                        )));
                    }
                    if !threshold.is_finite() {
                        return Err(Error::Integrity(format!(
                            "node {i} has a non-finite threshold"
                        )));
                    }
                    for child in [left, right] {
                        if child <= i || child >= self.nodes.len() {
                            return Err(Error::Integrity(format!(
                                "node {i} has out-of-order child {child}"
                            )));
                        }
                        parents[child] += 1;
                    }
                    if left != i + 1 {
                        return Err(Error::Integrity(format!(
                            "node {i}: left child {left} breaks preorder"
                        )));
                    }
                }
                Node::Leaf { leaf } => {
                    if leaf >= n_leaves || leaf_seen[leaf] {
                        return Err(Error::Integrity(format!(
                            "node {i} has invalid leaf slot {leaf}"
                        )));
                    }
                    leaf_seen[leaf] = true;
                    let p = &self.leaf_values[leaf * k..(leaf + 1) * k];
                    let sum: f64 = p.iter().sum();
                    if p.iter().any(|&v| !(0.0..=1.0).contains(&v))
                        || (sum - 1.0).abs() > LEAF_SUM_TOLERANCE
                    {
                        return Err(Error::Integrity(format!(
                            "leaf at node {i} is not a probability vector (sum {sum})"
                        )));
                    }
                }
            }
        }
        if parents[0] != 0 || parents[1..].iter().any(|&p| p != 1) {
            return Err(Error::Integrity(
                "nodes do not form a single-rooted tree".into(),
            ));
        }
        if leaf_seen.iter().any(|s| !s) {
            return Err(Error::Integrity(
                "leaf table has unreferenced entries".into(),
            ));
        }
        Ok(())
    }

    pub fn kind(&self) -> TreeKind {
        self.kind
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn n_leaves(&self) -> usize {
        self.leaf_values.len() / self.n_classes
    }

    pub fn leaf_values(&self, leaf: usize) -> &[f64] {
        &self.leaf_values[leaf * self.n_classes..(leaf + 1) * self.n_classes]
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }

    /// Leaf slot reached by the sample whose features are given by `value`.
    #[inline]
    pub fn leaf_index_with(&self, value: impl Fn(usize) -> f64) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if value(feature) <= threshold {
                        left
                    } else {
                        right
                    }
                }
                Node::Leaf { leaf } => return leaf,
            }
        }
    }

    /// Probability vector for `x` without a length check.
    #[inline]
    pub(crate) fn predict_unchecked(&self, x: &[f64]) -> &[f64] {
        self.leaf_values(self.leaf_index_with(|f| x[f]))
    }

    /// The stored class-probability vector of the leaf `x` reaches.
    pub fn predict_proba(&self, x: &[f64]) -> Result<&[f64]> {
        if x.len() != self.n_features {
            return Err(Error::validation(format!(
                "expected {} features, got {}",
                self.n_features,
                x.len()
            )));
        }
        Ok(self.predict_unchecked(x))
    }
}

fn check_subset(feature_subset: &[usize], d: usize) -> Result<Vec<usize>> {
    if feature_subset.is_empty() {
        return Err(Error::validation("feature subset is empty"));
    }
    if let Some(&f) = feature_subset.iter().find(|&&f| f >= d) {
        return Err(Error::validation(format!(
            "feature {f} out of range for {d} features"
        )));
    }
    let mut sorted = feature_subset.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    Ok(sorted)
}

fn count_classes(rows: &[usize], labels: &[usize], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    for &r in rows {
        counts[labels[r]] += 1;
    }
    counts
}

/// Best midpoint split of the node `rows` over `feature_subset`.
///
/// Every midpoint between consecutive distinct values of every subset feature
/// is scored; the largest impurity decrease wins, ties going to the lowest
/// feature index and then the lowest threshold. Returns `None` when the node
/// is pure, every subset feature is constant, or no split decreases impurity
/// by more than [`MIN_IMPURITY_DECREASE`].
pub fn best_split_standard<F: FeatureSource + ?Sized>(
    rows: &[usize],
    features: &F,
    labels: &[usize],
    n_classes: usize,
    feature_subset: &[usize],
    criterion: Criterion,
) -> Result<Option<SplitCandidate>> {
    let subset = check_subset(feature_subset, features.n_features())?;
    let mut scratch = Scratch::new(n_classes);
    Ok(search_standard(
        rows,
        features,
        labels,
        &subset,
        criterion,
        1,
        &mut scratch,
    ))
}

/// Extremely randomized split of the node `rows` over `feature_subset`.
///
/// Each non-constant subset feature (in ascending index order) gets one
/// threshold drawn uniformly inside `(min, max)` of its values on the node;
/// the candidate with the largest impurity decrease is returned (lowest
/// feature index on ties). Returns `None` only when every subset feature is
/// constant on the node.
pub fn best_split_extra<F: FeatureSource + ?Sized>(
    rows: &[usize],
    features: &F,
    labels: &[usize],
    n_classes: usize,
    feature_subset: &[usize],
    criterion: Criterion,
    rng: &mut Rng,
) -> Result<Option<SplitCandidate>> {
    let subset = check_subset(feature_subset, features.n_features())?;
    let mut scratch = Scratch::new(n_classes);
    Ok(search_extra(
        rows,
        features,
        labels,
        &subset,
        criterion,
        1,
        rng,
        &mut scratch,
    ))
}

struct Scratch {
    pairs: Vec<(f64, usize)>,
    parent: Vec<usize>,
    left: Vec<usize>,
    right: Vec<usize>,
}

impl Scratch {
    fn new(k: usize) -> Self {
        Scratch {
            pairs: Vec::new(),
            parent: vec![0; k],
            left: vec![0; k],
            right: vec![0; k],
        }
    }

    fn load_parent(&mut self, rows: &[usize], labels: &[usize]) {
        self.parent.iter_mut().for_each(|c| *c = 0);
        for &r in rows {
            self.parent[labels[r]] += 1;
        }
    }
}

/// `subset` must be sorted ascending.
fn search_standard<F: FeatureSource + ?Sized>(
    rows: &[usize],
    features: &F,
    labels: &[usize],
    subset: &[usize],
    criterion: Criterion,
    min_leaf: usize,
    s: &mut Scratch,
) -> Option<SplitCandidate> {
    let n = rows.len();
    if n < 2 {
        return None;
    }
    s.load_parent(rows, labels);
    let parent_impurity = impurity_unchecked(&s.parent, n, criterion);
    if parent_impurity <= 0.0 {
        return None;
    }

    let mut best: Option<SplitCandidate> = None;
    for &f in subset {
        s.pairs.clear();
        s.pairs
            .extend(rows.iter().map(|&r| (features.value(r, f), labels[r])));
        s.pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        if s.pairs[0].0 == s.pairs[n - 1].0 {
            continue;
        }
        s.left.iter_mut().for_each(|c| *c = 0);
        s.right.copy_from_slice(&s.parent);
        for i in 0..n - 1 {
            let (v, y) = s.pairs[i];
            s.left[y] += 1;
            s.right[y] -= 1;
            let next = s.pairs[i + 1].0;
            if v == next {
                continue;
            }
            let n_left = i + 1;
            let n_right = n - n_left;
            if n_left < min_leaf || n_right < min_leaf {
                continue;
            }
            let decrease = impurity_decrease(
                parent_impurity,
                &s.left,
                n_left,
                &s.right,
                n_right,
                criterion,
            );
            if decrease > MIN_IMPURITY_DECREASE
                && best.is_none_or(|b| decrease > b.impurity_decrease)
            {
                best = Some(SplitCandidate {
                    feature: f,
                    threshold: midpoint(v, next),
                    impurity_decrease: decrease,
                });
            }
        }
    }
    best
}

/// `subset` must be sorted ascending.
#[allow(clippy::too_many_arguments)]
fn search_extra<F: FeatureSource + ?Sized>(
    rows: &[usize],
    features: &F,
    labels: &[usize],
    subset: &[usize],
    criterion: Criterion,
    min_leaf: usize,
    rng: &mut Rng,
    s: &mut Scratch,
) -> Option<SplitCandidate> {
    let n = rows.len();
    if n < 2 {
        return None;
    }
    s.load_parent(rows, labels);
    let parent_impurity = impurity_unchecked(&s.parent, n, criterion);

    let mut best: Option<SplitCandidate> = None;
    for &f in subset {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &r in rows {
            let v = features.value(r, f);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if lo == hi {
            continue;
        }
        let mut threshold = rng.gen_range(lo..hi);
        // gen_range is half-open; redraw the (measure-zero) lower endpoint.
        let mut tries = 0;
        while threshold <= lo && tries < 16 {
            threshold = rng.gen_range(lo..hi);
            tries += 1;
        }

        s.left.iter_mut().for_each(|c| *c = 0);
        let mut n_left = 0;
        for &r in rows {
            if features.value(r, f) <= threshold {
                s.left[labels[r]] += 1;
                n_left += 1;
            }
        }
        let n_right = n - n_left;
        if n_left < min_leaf || n_right < min_leaf {
            continue;
        }
        for k in 0..s.parent.len() {
            s.right[k] = s.parent[k] - s.left[k];
        }
        let decrease = impurity_decrease(
            parent_impurity,
            &s.left,
            n_left,
            &s.right,
            n_right,
            criterion,
        )
        .max(0.0);
        if best.is_none_or(|b| decrease > b.impurity_decrease) {
            best = Some(SplitCandidate {
                feature: f,
                threshold,
                impurity_decrease: decrease,
            });
        }
    }
    best
}

/// Fits one tree on `data`.
pub fn fit_tree(data: &crate::Dataset, params: &TreeParams, rng: &mut Rng) -> Result<TreeModel> {
    if data.n_samples() == 0 {
        return Err(Error::validation("cannot fit a tree on an empty dataset"));
    }
    fit_tree_on(
        data.features(),
        data.labels(),
        data.n_classes(),
        params,
        rng,
    )
}

/// Fits one tree on any feature source. `labels` must have one entry per row.
pub fn fit_tree_on<F: FeatureSource + ?Sized>(
    features: &F,
    labels: &[usize],
    n_classes: usize,
    params: &TreeParams,
    rng: &mut Rng,
) -> Result<TreeModel> {
    let n = features.n_rows();
    let d = features.n_features();
    if n == 0 {
        return Err(Error::validation("cannot fit a tree on an empty dataset"));
    }
    if labels.len() != n {
        return Err(Error::validation(format!(
            "{n} rows but {} labels",
            labels.len()
        )));
    }
    if d == 0 {
        return Err(Error::validation("cannot fit a tree on zero features"));
    }
    params.validate(d)?;
    let mtry = params.resolved_mtry(d);

    let mut rows: Vec<usize> = if params.bootstrap {
        (0..n).map(|_| rng.gen_range(0..n)).collect()
    } else {
        (0..n).collect()
    };

    let mut nodes: Vec<Node> = Vec::new();
    let mut leaf_values: Vec<f64> = Vec::new();
    let mut scratch = Scratch::new(n_classes);

    struct Task {
        start: usize,
        end: usize,
        depth: usize,
        parent: Option<usize>,
    }
    // Right children are pushed first so nodes are numbered in preorder.
    let mut stack = vec![Task {
        start: 0,
        end: rows.len(),
        depth: 0,
        parent: None,
    }];

    while let Some(task) = stack.pop() {
        let id = nodes.len();
        if let Some(p) = task.parent {
            if let Node::Split { right, .. } = &mut nodes[p] {
                // left children are always id == p + 1
                if id != p + 1 {
                    *right = id;
                }
            }
        }

        let node_rows = &rows[task.start..task.end];
        let size = node_rows.len();
        let counts = count_classes(node_rows, labels, n_classes);
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_capped = params.max_depth.is_some_and(|m| task.depth >= m);

        let split = if pure || depth_capped || size < params.min_samples_split {
            None
        } else {
            let mut subset = index::sample(rng, d, mtry).into_vec();
            subset.sort_unstable();
            match params.kind {
                TreeKind::Standard => search_standard(
                    node_rows,
                    features,
                    labels,
                    &subset,
                    params.criterion,
                    params.min_samples_leaf,
                    &mut scratch,
                ),
                TreeKind::ExtraRandom => search_extra(
                    node_rows,
                    features,
                    labels,
                    &subset,
                    params.criterion,
                    params.min_samples_leaf,
                    rng,
                    &mut scratch,
                ),
            }
        };

        match split {
            None => {
                let leaf = leaf_values.len() / n_classes;
                let total = size as f64;
                leaf_values.extend(counts.iter().map(|&c| c as f64 / total));
                nodes.push(Node::Leaf { leaf });
            }
            Some(c) => {
                let node_rows = &mut rows[task.start..task.end];
                let mut n_left = 0;
                for i in 0..node_rows.len() {
                    if features.value(node_rows[i], c.feature) <= c.threshold {
                        node_rows.swap(i, n_left);
                        n_left += 1;
                    }
                }
                debug_assert!(n_left > 0 && n_left < size);
                nodes.push(Node::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    left: id + 1,
                    right: usize::MAX,
                });
                let mid = task.start + n_left;
                stack.push(Task {
                    start: mid,
                    end: task.end,
                    depth: task.depth + 1,
                    parent: Some(id),
                });
                stack.push(Task {
                    start: task.start,
                    end: mid,
                    depth: task.depth + 1,
                    parent: Some(id),
                });
            }
        }
    }

    Ok(TreeModel {
        kind: params.kind,
        n_classes,
        n_features: d,
        nodes,
        leaf_values,
    })
}
