//! Forward-thinking deep random forests: cascaded layers of standard and
//! extra-random trees where each layer feeds only on the class-probability
//! vectors of the layer before it.

pub mod cascade;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod layer;
pub mod matrix;
pub mod mgs;
pub mod persist;
pub mod seed;
pub mod tree;

pub use cascade::{
    fit_cascade, fit_cascade_on_split, predict_cascade, CascadeConfig, CascadeModel, GainMode,
    LayerRecord,
};
pub use dataset::{load_csv, load_idx, stratified_split, wiggle_augment, Dataset, SplitPair};
pub use error::{Error, Result};
pub use eval::AccuracyReport;
pub use layer::{fit_layer, predict_layer, transform_layer, LayerModel, LayerParams, Prediction};
pub use matrix::Matrix;
pub use mgs::{fit_mgs, transform_mgs, MgsConfig, MgsModel};
pub use persist::{load_model, save_model, Fingerprint, ModelFile};
pub use tree::{fit_tree, Criterion, TreeKind, TreeModel, TreeParams};
