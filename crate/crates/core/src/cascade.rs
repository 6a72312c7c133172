//! Greedy layer-wise growth of the forest cascade.
//!
//! Each new layer is trained on the previous layer's output for the training
//! rows and scored on the holdout rows pushed through the same layers. A layer
//! is kept while its holdout accuracy improves on the previous layer's by at
//! least the gain threshold; the first layer that falls short is discarded.

use crate::dataset::{stratified_split, SplitPair};
use crate::error::{Error, Result};
use crate::eval::{accuracy, AccuracyReport};
use crate::layer::{
    fit_layer_on, predict_layer, transform_layer, LayerModel, LayerParams, Prediction,
};
use crate::matrix::Matrix;
use crate::seed::derive_seed;
use crate::tree::ColumnMajor;
use crate::Dataset;

/// Base of the relative gain between consecutive holdout accuracies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GainMode {
    /// `(curr - prev) / prev`
    #[default]
    RelativeAccuracy,
    /// `(curr - prev) / (1 - prev)`: the share of the remaining error removed.
    RemainingError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    /// Template for every layer; layer `l` uses seed `derive_seed(layer.seed, l)`.
    pub layer: LayerParams,
    pub holdout_fraction: f64,
    pub gain_threshold: f64,
    pub gain_mode: GainMode,
    pub max_layers: usize,
    pub min_layers: usize,
    /// Seed of the holdout split.
    pub seed: u64,
    /// Retrain the accepted layers on train + holdout once the depth is fixed.
    pub refit_full: bool,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            layer: LayerParams::default(),
            holdout_fraction: 0.2,
            gain_threshold: 0.01,
            gain_mode: GainMode::RelativeAccuracy,
            max_layers: 10,
            min_layers: 1,
            seed: 0,
            refit_full: false,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        self.layer.validate()?;
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::validation(format!(
                "holdout fraction must be in (0, 1), got {}",
                self.holdout_fraction
            )));
        }
        if self.gain_threshold.is_nan() || self.gain_threshold < 0.0 {
            return Err(Error::validation("gain threshold must be non-negative"));
        }
        if self.min_layers == 0 || self.min_layers > self.max_layers {
            return Err(Error::validation(format!(
                "need 1 <= min_layers <= max_layers, got {} and {}",
                self.min_layers, self.max_layers
            )));
        }
        Ok(())
    }

    /// Parameters of layer `layer` (1-based).
    pub fn layer_params(&self, layer: usize) -> LayerParams {
        LayerParams {
            seed: derive_seed(self.layer.seed, layer as u64),
            ..self.layer.clone()
        }
    }
}

/// Holdout outcome of one trained layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    /// 1-based layer number.
    pub layer: usize,
    pub holdout_accuracy: f64,
    /// Gain over the previous layer; `None` for the first layer.
    pub relative_gain: Option<f64>,
    pub n_standard: usize,
    pub n_extra: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    layers: Vec<LayerModel>,
    n_classes: usize,
    input_dim: usize,
    history: Vec<LayerRecord>,
    rejected: Option<LayerRecord>,
    config: CascadeConfig,
}

impl CascadeModel {
    /// Assembles a model, checking layer chaining and history bookkeeping.
    pub fn from_parts(
        layers: Vec<LayerModel>,
        n_classes: usize,
        input_dim: usize,
        history: Vec<LayerRecord>,
        rejected: Option<LayerRecord>,
        config: CascadeConfig,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Integrity("cascade has no layers".into()));
        }
        if layers.len() < config.min_layers {
            return Err(Error::Integrity(format!(
                "cascade has {} layers, fewer than min_layers {}",
                layers.len(),
                config.min_layers
            )));
        }
        if history.len() != layers.len() {
            return Err(Error::Integrity(format!(
                "history has {} entries for {} layers",
                history.len(),
                layers.len()
            )));
        }
        let mut expected_input = input_dim;
        for (l, layer) in layers.iter().enumerate() {
            if layer.n_classes() != n_classes {
                return Err(Error::Integrity(format!(
                    "layer {} has {} classes, cascade has {n_classes}",
                    l + 1,
                    layer.n_classes()
                )));
            }
            if layer.input_dim() != expected_input {
                return Err(Error::Integrity(format!(
                    "layer {} expects {} inputs but receives {expected_input}",
                    l + 1,
                    layer.input_dim()
                )));
            }
            expected_input = layer.output_dim();
        }
        Ok(CascadeModel {
            layers,
            n_classes,
            input_dim,
            history,
            rejected,
            config,
        })
    }

    pub fn layers(&self) -> &[LayerModel] {
        &self.layers
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn history(&self) -> &[LayerRecord] {
        &self.history
    }

    /// The layer that failed the gain test and was discarded, if growth stopped that way.
    pub fn rejected(&self) -> Option<&LayerRecord> {
        self.rejected.as_ref()
    }

    pub fn config(&self) -> &CascadeConfig {
        &self.config
    }
}

/// `(curr - prev) / prev`.
pub fn relative_gain(prev_accuracy: f64, curr_accuracy: f64) -> Result<f64> {
    gain(GainMode::RelativeAccuracy, prev_accuracy, curr_accuracy)
}

/// Gain of `curr` over `prev` under `mode`.
pub fn gain(mode: GainMode, prev_accuracy: f64, curr_accuracy: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&prev_accuracy) || !(0.0..=1.0).contains(&curr_accuracy) {
        return Err(Error::validation(format!(
            "accuracies must lie in [0, 1], got {prev_accuracy} and {curr_accuracy}"
        )));
    }
    let base = match mode {
        GainMode::RelativeAccuracy => prev_accuracy,
        GainMode::RemainingError => 1.0 - prev_accuracy,
    };
    if base <= 0.0 {
        return Err(Error::validation(format!(
            "relative gain undefined: base is zero (previous accuracy {prev_accuracy})"
        )));
    }
    Ok((curr_accuracy - prev_accuracy) / base)
}

/// Gain used by the stopping rule. A zero base (accuracy 0 for the relative
/// mode, accuracy 1 for the remaining-error mode) maps to an infinite gain of
/// the sign of the change, or 0 when nothing changed.
fn stopping_gain(mode: GainMode, prev: f64, curr: f64) -> f64 {
    match gain(mode, prev, curr) {
        Ok(g) => g,
        Err(_) if curr > prev => f64::INFINITY,
        Err(_) if curr < prev => f64::NEG_INFINITY,
        Err(_) => 0.0,
    }
}

/// Splits `data` with `config.seed` and grows a cascade on the split.
pub fn fit_cascade(data: &Dataset, config: &CascadeConfig) -> Result<CascadeModel> {
    config.validate()?;
    let split = stratified_split(data, config.holdout_fraction, config.seed)?;
    fit_cascade_on_split(&split, config)
}

/// Grows a cascade on an existing train/holdout partition (for example one
/// whose training part has been augmented).
pub fn fit_cascade_on_split(split: &SplitPair, config: &CascadeConfig) -> Result<CascadeModel> {
    config.validate()?;
    let (train, holdout) = (&split.train, &split.holdout);
    if train.n_samples() == 0 {
        return Err(Error::validation("training part of the split is empty"));
    }
    if holdout.n_samples() == 0 {
        return Err(Error::validation("holdout part of the split is empty"));
    }
    if train.n_features() != holdout.n_features() || train.n_classes() != holdout.n_classes() {
        return Err(Error::validation("train and holdout shapes differ"));
    }
    let k = train.n_classes();

    let mut layers: Vec<LayerModel> = Vec::new();
    let mut history: Vec<LayerRecord> = Vec::new();
    let mut rejected = None;
    let mut cur_train = train.features().clone();
    let mut cur_holdout = holdout.features().clone();

    for l in 1..=config.max_layers {
        let params = config.layer_params(l);
        let layer = fit_layer_on(
            &ColumnMajor::from_matrix(&cur_train),
            train.labels(),
            k,
            &params,
        )?;
        let predicted = predict_layer(&layer, &cur_holdout)?.labels;
        let acc = accuracy(holdout.labels(), &predicted);
        let (n_standard, n_extra) = layer.kind_counts();
        let relative_gain = history
            .last()
            .map(|prev| stopping_gain(config.gain_mode, prev.holdout_accuracy, acc));
        let record = LayerRecord {
            layer: l,
            holdout_accuracy: acc,
            relative_gain,
            n_standard,
            n_extra,
        };
        if let Some(g) = relative_gain {
            if g < config.gain_threshold && l > config.min_layers {
                rejected = Some(record);
                break;
            }
        }
        if l < config.max_layers {
            cur_train = transform_layer(&layer, &cur_train)?;
            cur_holdout = transform_layer(&layer, &cur_holdout)?;
        }
        layers.push(layer);
        history.push(record);
    }

    if config.refit_full {
        layers = refit_layers(&train.concat(holdout)?, config, layers.len())?;
    }

    CascadeModel::from_parts(
        layers,
        k,
        train.n_features(),
        history,
        rejected,
        config.clone(),
    )
}

fn refit_layers(
    data: &Dataset,
    config: &CascadeConfig,
    n_layers: usize,
) -> Result<Vec<LayerModel>> {
    let mut layers = Vec::with_capacity(n_layers);
    let mut current = data.features().clone();
    for l in 1..=n_layers {
        let layer = fit_layer_on(
            &ColumnMajor::from_matrix(&current),
            data.labels(),
            data.n_classes(),
            &config.layer_params(l),
        )?;
        if l < n_layers {
            current = transform_layer(&layer, &current)?;
        }
        layers.push(layer);
    }
    Ok(layers)
}

/// Maps `x` through the first `n_layers` layers (default: all but the last).
pub fn transform_through(
    model: &CascadeModel,
    x: &Matrix,
    n_layers: Option<usize>,
) -> Result<Matrix> {
    let n = n_layers.unwrap_or(model.layers.len() - 1);
    if n > model.layers.len() {
        return Err(Error::validation(format!(
            "cannot transform through {n} of {} layers",
            model.layers.len()
        )));
    }
    if x.cols() != model.input_dim {
        return Err(Error::validation(format!(
            "model expects {} input features, got {}",
            model.input_dim,
            x.cols()
        )));
    }
    let mut current = x.clone();
    for layer in &model.layers[..n] {
        current = transform_layer(layer, &current)?;
    }
    Ok(current)
}

/// Pushes `x` through all hidden layers and averages the last layer's trees.
pub fn predict_cascade(model: &CascadeModel, x: &Matrix) -> Result<Prediction> {
    let hidden = transform_through(model, x, None)?;
    predict_layer(model.layers.last().expect("cascade has layers"), &hidden)
}

pub fn evaluate(model: &CascadeModel, data: &Dataset) -> Result<AccuracyReport> {
    if data.n_classes() != model.n_classes {
        return Err(Error::validation(format!(
            "model has {} classes, data has {}",
            model.n_classes,
            data.n_classes()
        )));
    }
    let prediction = predict_cascade(model, data.features())?;
    AccuracyReport::from_labels(data.labels(), &prediction.labels, model.n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn relative_gain_arithmetic() {
        assert!(close(relative_gain(0.95, 0.965).unwrap(), 0.015 / 0.95));
        assert!(close(
            relative_gain(0.95, 0.965).unwrap(),
            0.015789473684210527
        ));
        assert_eq!(relative_gain(0.7, 0.7).unwrap(), 0.0);
        assert!(close(relative_gain(0.90, 0.89).unwrap(), -0.01 / 0.9));
        assert!(relative_gain(0.0, 0.5).is_err());
        assert!(close(
            gain(GainMode::RemainingError, 0.9, 0.95).unwrap(),
            0.5
        ));
        assert!(gain(GainMode::RemainingError, 1.0, 1.0).is_err());
    }

    #[test]
    fn zero_base_gains_take_the_sign_of_the_change() {
        assert_eq!(
            stopping_gain(GainMode::RelativeAccuracy, 0.0, 0.2),
            f64::INFINITY
        );
        assert_eq!(stopping_gain(GainMode::RelativeAccuracy, 0.0, 0.0), 0.0);
        assert_eq!(
            stopping_gain(GainMode::RemainingError, 1.0, 0.9),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn config_validation() {
        let ok = CascadeConfig::default();
        assert!(ok.validate().is_ok());
        assert!(CascadeConfig {
            holdout_fraction: 1.0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(CascadeConfig {
            gain_threshold: -0.1,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(CascadeConfig {
            min_layers: 3,
            max_layers: 2,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert_ne!(ok.layer_params(1).seed, ok.layer_params(2).seed);
    }

    fn separable(n: usize) -> Dataset {
        // two classes with a wide gap on both features
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let base = if i >= n / 2 { 100.0 } else { 0.0 };
                vec![base + i as f64, base + ((i * 7) % 11) as f64]
            })
            .collect();
        let labels = (0..n).map(|i| usize::from(i >= n / 2)).collect();
        Dataset::new(Matrix::from_rows(&rows).unwrap(), labels, 2).unwrap()
    }

    fn small_config(trees: usize) -> CascadeConfig {
        CascadeConfig {
            layer: LayerParams {
                n_trees: trees,
                ..LayerParams::default()
            },
            ..CascadeConfig::default()
        }
    }

    #[test]
    fn saturated_first_layer_stops_growth() {
        let data = separable(60);
        let model = fit_cascade(&data, &small_config(10)).unwrap();
        assert_eq!(model.n_layers(), 1);
        assert_eq!(model.history()[0].holdout_accuracy, 1.0);
        let rejected = model.rejected().expect("second layer was tried");
        assert!(rejected.relative_gain.unwrap() <= 0.0);
    }

    #[test]
    fn min_layers_forces_depth() {
        let data = separable(40);
        let config = CascadeConfig {
            min_layers: 3,
            max_layers: 3,
            ..small_config(4)
        };
        let model = fit_cascade(&data, &config).unwrap();
        assert_eq!(model.n_layers(), 3);
        assert_eq!(model.layers()[1].input_dim(), 8);
        assert_eq!(model.layers()[2].input_dim(), 8);
        assert!(model.rejected().is_none());

        let x = data.features();
        assert_eq!(transform_through(&model, x, Some(0)).unwrap(), *x);
        assert_eq!(transform_through(&model, x, None).unwrap().cols(), 8);
        assert!(transform_through(&model, x, Some(4)).is_err());
        assert!(predict_cascade(&model, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn one_layer_model_predicts_like_its_layer() {
        let data = separable(30);
        let config = CascadeConfig {
            max_layers: 1,
            ..small_config(5)
        };
        let model = fit_cascade(&data, &config).unwrap();
        let a = predict_cascade(&model, data.features()).unwrap();
        let b = predict_layer(&model.layers()[0], data.features()).unwrap();
        assert_eq!(a, b);
        for row in a.probabilities.iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        let report = evaluate(&model, &data).unwrap();
        assert_eq!(report.n_samples, 30);
    }

    #[test]
    fn refit_full_keeps_depth_and_history() {
        let data = separable(40);
        let config = CascadeConfig {
            refit_full: true,
            min_layers: 2,
            max_layers: 2,
            ..small_config(3)
        };
        let refit = fit_cascade(&data, &config).unwrap();
        let plain = fit_cascade(
            &data,
            &CascadeConfig {
                refit_full: false,
                ..config
            },
        )
        .unwrap();
        assert_eq!(refit.n_layers(), 2);
        assert_eq!(refit.history(), plain.history());
    }

    #[test]
    fn from_parts_checks_chaining() {
        let data = separable(20);
        let model = fit_cascade(&data, &small_config(2)).unwrap();
        let layer = model.layers()[0].clone();
        let err = CascadeModel::from_parts(
            vec![layer.clone(), layer],
            2,
            2,
            model.history().iter().cloned().cycle().take(2).collect(),
            None,
            CascadeConfig::default(),
        );
        assert!(matches!(err, Err(Error::Integrity(_))));
    }
}
