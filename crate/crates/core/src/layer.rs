//! One forest layer: a mix of standard and extra-random trees whose
//! per-tree probability vectors, concatenated in tree order, become the
//! next layer's features.

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::{derive_seed, rng_from_seed};
use crate::tree::{fit_tree_on, ColumnMajor, FeatureSource, TreeKind, TreeModel, TreeParams};
use crate::Dataset;

/// Stream index reserved for the tree-kind draws of a layer.
const KIND_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub n_trees: usize,
    /// Probability that a tree is extra-random.
    pub type_mix_p: f64,
    pub standard: TreeParams,
    pub extra: TreeParams,
    pub seed: u64,
}

impl Default for LayerParams {
    fn default() -> Self {
        LayerParams {
            n_trees: 2000,
            type_mix_p: 0.5,
            standard: TreeParams::standard(),
            extra: TreeParams::extra_random(),
            seed: 0,
        }
    }
}

impl LayerParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::validation("a layer needs at least one tree"));
        }
        if !(0.0..=1.0).contains(&self.type_mix_p) {
            return Err(Error::validation(format!(
                "tree type mix must be in [0, 1], got {}",
                self.type_mix_p
            )));
        }
        if self.standard.kind != TreeKind::Standard || self.extra.kind != TreeKind::ExtraRandom {
            return Err(Error::validation(
                "layer tree parameters have mismatched kinds",
            ));
        }
        Ok(())
    }

    /// Kind of every tree, from independent Bernoulli draws (success = extra-random).
    pub fn tree_kinds(&self) -> Vec<TreeKind> {
        let mut rng = rng_from_seed(derive_seed(self.seed, KIND_STREAM));
        (0..self.n_trees)
            .map(|_| {
                if rng.gen_bool(self.type_mix_p) {
                    TreeKind::ExtraRandom
                } else {
                    TreeKind::Standard
                }
            })
            .collect()
    }

    /// Seed of tree `index`; independent of every other tree's seed.
    pub fn tree_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, index as u64)
    }

    pub fn params_for(&self, kind: TreeKind) -> &TreeParams {
        match kind {
            TreeKind::Standard => &self.standard,
            TreeKind::ExtraRandom => &self.extra,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerModel {
    trees: Vec<TreeModel>,
    n_classes: usize,
    input_dim: usize,
}

impl LayerModel {
    pub fn from_trees(trees: Vec<TreeModel>, n_classes: usize, input_dim: usize) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::Integrity("layer has no trees".into()));
        }
        for (j, t) in trees.iter().enumerate() {
            if t.n_classes() != n_classes || t.n_features() != input_dim {
                return Err(Error::Integrity(format!(
                    "tree {j} expects {} features and {} classes, layer has {input_dim} and {n_classes}",
                    t.n_features(),
                    t.n_classes()
                )));
            }
        }
        Ok(LayerModel {
            trees,
            n_classes,
            input_dim,
        })
    }

    pub fn trees(&self) -> &[TreeModel] {
        &self.trees
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.n_classes * self.trees.len()
    }

    /// (standard, extra-random) tree counts.
    pub fn kind_counts(&self) -> (usize, usize) {
        let extra = self
            .trees
            .iter()
            .filter(|t| t.kind() == TreeKind::ExtraRandom)
            .count();
        (self.trees.len() - extra, extra)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::validation(format!(
                "layer expects {} input features, got {}",
                self.input_dim,
                x.cols()
            )));
        }
        Ok(())
    }
}

/// Fits a layer on `data`, training trees in parallel on the current rayon pool.
pub fn fit_layer(data: &Dataset, params: &LayerParams) -> Result<LayerModel> {
    let columns = ColumnMajor::from_matrix(data.features());
    fit_layer_on(&columns, data.labels(), data.n_classes(), params)
}

/// Fits a layer on any feature source. Tree `j` uses kind `tree_kinds()[j]`
/// and seed `tree_seed(j)`, so the result does not depend on thread count.
pub fn fit_layer_on<F: FeatureSource + ?Sized>(
    features: &F,
    labels: &[usize],
    n_classes: usize,
    params: &LayerParams,
) -> Result<LayerModel> {
    params.validate()?;
    let kinds = params.tree_kinds();
    let fitted: Vec<Result<TreeModel>> = kinds
        .par_iter()
        .enumerate()
        .map(|(j, &kind)| {
            let mut rng = rng_from_seed(params.tree_seed(j));
            fit_tree_on(
                features,
                labels,
                n_classes,
                params.params_for(kind),
                &mut rng,
            )
        })
        .collect();
    // Report the lowest failing index regardless of scheduling.
    let trees = fitted
        .into_iter()
        .enumerate()
        .map(|(j, r)| {
            r.map_err(|e| Error::Tree {
                index: j,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LayerModel::from_trees(trees, n_classes, features.n_features())
}

/// Maps every row to the concatenation of its per-tree probability vectors
/// (tree-major: tree 0's K values, then tree 1's, ...).
pub fn transform_layer(layer: &LayerModel, x: &Matrix) -> Result<Matrix> {
    layer.check_input(x)?;
    let k = layer.n_classes;
    let width = layer.output_dim();
    let mut out = Matrix::zeros(x.rows(), width);
    if width > 0 {
        out.as_mut_slice()
            .par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, dst)| {
                let row = x.row(i);
                for (t, block) in layer.trees.iter().zip(dst.chunks_exact_mut(k)) {
                    block.copy_from_slice(t.predict_unchecked(row));
                }
            });
    }
    Ok(out)
}

/// Averaged class probabilities and argmax labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Matrix,
    pub labels: Vec<usize>,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean of the trees' probability vectors (summed in tree order, divided once)
/// and its argmax.
pub fn predict_layer(layer: &LayerModel, x: &Matrix) -> Result<Prediction> {
    layer.check_input(x)?;
    let k = layer.n_classes;
    let m = layer.trees.len() as f64;
    let mut probabilities = Matrix::zeros(x.rows(), k);
    probabilities
        .as_mut_slice()
        .par_chunks_mut(k)
        .enumerate()
        .for_each(|(i, acc)| {
            let row = x.row(i);
            for t in &layer.trees {
                for (a, p) in acc.iter_mut().zip(t.predict_unchecked(row)) {
                    *a += p;
                }
            }
            acc.iter_mut().for_each(|a| *a /= m);
        });
    let labels = probabilities.iter_rows().map(argmax).collect();
    Ok(Prediction {
        probabilities,
        labels,
    })
}
