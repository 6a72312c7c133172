//! Multi-grained scanning.
//!
//! For every window size, all sliding windows of all training images form a
//! window-level dataset labelled with the source image's class. A standard
//! forest and an extra-random forest are trained on it; an image is then
//! represented by the forest-averaged class probabilities of each of its
//! windows, concatenated in window-size order, then scan order, then
//! standard-before-extra forest order.
//!
//! Window datasets are never materialized: [`WindowSource`] reads window
//! pixels straight out of the image matrix.

use rand::seq::index;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::{derive_seed, rng_from_seed};
use crate::tree::{fit_tree_on, FeatureSource, TreeModel, TreeParams};
use crate::Dataset;

#[derive(Debug, Clone, PartialEq)]
pub struct MgsConfig {
    pub window_sizes: Vec<usize>,
    pub stride: usize,
    pub trees_per_forest: usize,
    /// `mtry` of `None` resolves to the window side `w` (`round(sqrt(w*w))`).
    pub standard: TreeParams,
    pub extra: TreeParams,
    /// Fraction of training images used to build window datasets.
    pub sample_fraction: f64,
    pub seed: u64,
}

impl Default for MgsConfig {
    fn default() -> Self {
        MgsConfig {
            window_sizes: vec![7, 9, 14],
            stride: 1,
            trees_per_forest: 30,
            standard: TreeParams::standard(),
            extra: TreeParams::extra_random(),
            sample_fraction: 1.0,
            seed: 0,
        }
    }
}

impl MgsConfig {
    pub fn validate(&self, image_shape: (usize, usize)) -> Result<()> {
        let (rows, cols) = image_shape;
        if self.window_sizes.is_empty() {
            return Err(Error::validation("no scanning window sizes given"));
        }
        if self.stride == 0 {
            return Err(Error::validation("stride must be at least 1"));
        }
        if self.trees_per_forest == 0 {
            return Err(Error::validation("trees_per_forest must be at least 1"));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::validation(format!(
                "sample fraction must be in (0, 1], got {}",
                self.sample_fraction
            )));
        }
        for &w in &self.window_sizes {
            if w == 0 || w > rows.min(cols) {
                return Err(Error::validation(format!(
                    "window size {w} does not fit {rows}x{cols} images"
                )));
            }
        }
        Ok(())
    }
}

/// Window positions along one axis of length `len`.
fn positions(len: usize, w: usize, stride: usize) -> usize {
    (len - w) / stride + 1
}

/// Number of `w x w` windows in a `rows x cols` image.
pub fn n_windows(image_shape: (usize, usize), w: usize, stride: usize) -> usize {
    positions(image_shape.0, w, stride) * positions(image_shape.1, w, stride)
}

/// Width of the scanned representation: `sum_w 2 * K * n_windows(w)`.
pub fn mgs_output_dim(
    image_shape: (usize, usize),
    window_sizes: &[usize],
    stride: usize,
    n_classes: usize,
) -> usize {
    window_sizes
        .iter()
        .map(|&w| 2 * n_classes * n_windows(image_shape, w, stride))
        .sum()
}

/// All `w x w` windows of a row-major `rows x cols` image, each flattened
/// row-major. Windows are listed left to right, then top to bottom.
pub fn extract_windows(
    image: &[f64],
    image_shape: (usize, usize),
    w: usize,
    stride: usize,
) -> Result<Vec<Vec<f64>>> {
    let (rows, cols) = image_shape;
    if image.len() != rows * cols {
        return Err(Error::validation(format!(
            "image has {} pixels, expected {rows}x{cols}",
            image.len()
        )));
    }
    if w == 0 || w > rows.min(cols) || stride == 0 {
        return Err(Error::validation(format!(
            "window {w} with stride {stride} does not fit {rows}x{cols} images"
        )));
    }
    let per_row = positions(cols, w, stride);
    let n = n_windows(image_shape, w, stride);
    Ok((0..n)
        .map(|p| {
            let mut out = vec![0.0; w * w];
            copy_window(
                image,
                cols,
                w,
                (p / per_row) * stride,
                (p % per_row) * stride,
                &mut out,
            );
            out
        })
        .collect())
}

#[inline]
fn copy_window(image: &[f64], cols: usize, w: usize, top: usize, left: usize, out: &mut [f64]) {
    for dr in 0..w {
        let src = (top + dr) * cols + left;
        out[dr * w..(dr + 1) * w].copy_from_slice(&image[src..src + w]);
    }
}

/// Virtual window-level dataset: row `i * n_windows + p` is window `p` of
/// image `images[i]`.
pub struct WindowSource<'a> {
    pixels: &'a Matrix,
    images: &'a [usize],
    cols: usize,
    w: usize,
    stride: usize,
    per_row: usize,
    per_image: usize,
}

impl<'a> WindowSource<'a> {
    pub fn new(
        pixels: &'a Matrix,
        images: &'a [usize],
        image_shape: (usize, usize),
        w: usize,
        stride: usize,
    ) -> Self {
        WindowSource {
            pixels,
            images,
            cols: image_shape.1,
            w,
            stride,
            per_row: positions(image_shape.1, w, stride),
            per_image: n_windows(image_shape, w, stride),
        }
    }
}

impl FeatureSource for WindowSource<'_> {
    fn n_rows(&self) -> usize {
        self.images.len() * self.per_image
    }

    fn n_features(&self) -> usize {
        self.w * self.w
    }

    #[inline]
    fn value(&self, row: usize, feature: usize) -> f64 {
        let image = self.images[row / self.per_image];
        let p = row % self.per_image;
        let top = (p / self.per_row) * self.stride + feature / self.w;
        let left = (p % self.per_row) * self.stride + feature % self.w;
        self.pixels.get(image, top * self.cols + left)
    }
}

/// The forest pair trained for one window size.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowForests {
    pub window: usize,
    pub standard: Vec<TreeModel>,
    pub extra: Vec<TreeModel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MgsModel {
    forests: Vec<WindowForests>,
    n_classes: usize,
    image_shape: (usize, usize),
    config: MgsConfig,
}

impl MgsModel {
    pub fn from_parts(
        forests: Vec<WindowForests>,
        n_classes: usize,
        image_shape: (usize, usize),
        config: MgsConfig,
    ) -> Result<Self> {
        config.validate(image_shape)?;
        if forests.len() != config.window_sizes.len() {
            return Err(Error::Integrity(format!(
                "{} forest pairs for {} window sizes",
                forests.len(),
                config.window_sizes.len()
            )));
        }
        for (pair, &w) in forests.iter().zip(&config.window_sizes) {
            if pair.window != w {
                return Err(Error::Integrity(format!(
                    "forest pair for window {} listed where window {w} is configured",
                    pair.window
                )));
            }
            for (name, forest) in [("standard", &pair.standard), ("extra-random", &pair.extra)] {
                if forest.is_empty() {
                    return Err(Error::Integrity(format!(
                        "empty {name} forest for window {w}"
                    )));
                }
                if let Some((j, _)) = forest
                    .iter()
                    .enumerate()
                    .find(|(_, t)| t.n_features() != w * w || t.n_classes() != n_classes)
                {
                    return Err(Error::Integrity(format!(
                        "{name} tree {j} for window {w} has the wrong input or class count"
                    )));
                }
            }
        }
        Ok(MgsModel {
            forests,
            n_classes,
            image_shape,
            config,
        })
    }

    pub fn forests(&self) -> &[WindowForests] {
        &self.forests
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn image_shape(&self) -> (usize, usize) {
        self.image_shape
    }

    pub fn config(&self) -> &MgsConfig {
        &self.config
    }

    pub fn output_dim(&self) -> usize {
        mgs_output_dim(
            self.image_shape,
            &self.config.window_sizes,
            self.config.stride,
            self.n_classes,
        )
    }
}

fn fit_forest(
    source: &WindowSource<'_>,
    labels: &[usize],
    n_classes: usize,
    params: &TreeParams,
    n_trees: usize,
    seed: u64,
) -> Result<Vec<TreeModel>> {
    let fitted: Vec<Result<TreeModel>> = (0..n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_from_seed(derive_seed(seed, t as u64));
            fit_tree_on(source, labels, n_classes, params, &mut rng)
        })
        .collect();
    fitted
        .into_iter()
        .enumerate()
        .map(|(j, r)| {
            r.map_err(|e| Error::Tree {
                index: j,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Trains the forest pairs on the windows of `data`'s images.
pub fn fit_mgs(data: &Dataset, config: &MgsConfig) -> Result<MgsModel> {
    let shape = data
        .image_shape()
        .ok_or_else(|| Error::validation("multi-grained scanning needs an image shape"))?;
    config.validate(shape)?;
    let n = data.n_samples();
    if n == 0 {
        return Err(Error::validation("cannot scan an empty dataset"));
    }

    let images: Vec<usize> = if config.sample_fraction < 1.0 {
        let keep = ((n as f64 * config.sample_fraction).round() as usize).clamp(1, n);
        let mut rng = rng_from_seed(derive_seed(config.seed, u64::MAX));
        let mut picked = index::sample(&mut rng, n, keep).into_vec();
        picked.sort_unstable();
        picked
    } else {
        (0..n).collect()
    };

    let mut forests = Vec::with_capacity(config.window_sizes.len());
    for (wi, &w) in config.window_sizes.iter().enumerate() {
        let source = WindowSource::new(data.features(), &images, shape, w, config.stride);
        let per_image = n_windows(shape, w, config.stride);
        let labels: Vec<usize> = images
            .iter()
            .flat_map(|&i| std::iter::repeat_n(data.labels()[i], per_image))
            .collect();
        let standard = fit_forest(
            &source,
            &labels,
            data.n_classes(),
            &config.standard,
            config.trees_per_forest,
            derive_seed(config.seed, 2 * wi as u64),
        )?;
        let extra = fit_forest(
            &source,
            &labels,
            data.n_classes(),
            &config.extra,
            config.trees_per_forest,
            derive_seed(config.seed, 2 * wi as u64 + 1),
        )?;
        forests.push(WindowForests {
            window: w,
            standard,
            extra,
        });
    }
    MgsModel::from_parts(forests, data.n_classes(), shape, config.clone())
}

fn forest_mean(forest: &[TreeModel], x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for t in forest {
        for (o, p) in out.iter_mut().zip(t.predict_unchecked(x)) {
            *o += p;
        }
    }
    let m = forest.len() as f64;
    out.iter_mut().for_each(|v| *v /= m);
}

/// Replaces every image by its scanned representation; labels are kept.
pub fn transform_mgs(model: &MgsModel, images: &Dataset) -> Result<Dataset> {
    let shape = model.image_shape;
    if images.image_shape() != Some(shape) {
        return Err(Error::validation(format!(
            "model scans {}x{} images, data has shape {:?}",
            shape.0,
            shape.1,
            images.image_shape()
        )));
    }
    let k = model.n_classes;
    let width = model.output_dim();
    let stride = model.config.stride;
    let mut out = Matrix::zeros(images.n_samples(), width);
    out.as_mut_slice()
        .par_chunks_mut(width)
        .enumerate()
        .for_each(|(i, dst)| {
            let image = images.features().row(i);
            let mut offset = 0;
            for pair in &model.forests {
                let w = pair.window;
                let per_row = positions(shape.1, w, stride);
                let mut window = vec![0.0; w * w];
                for p in 0..n_windows(shape, w, stride) {
                    copy_window(
                        image,
                        shape.1,
                        w,
                        (p / per_row) * stride,
                        (p % per_row) * stride,
                        &mut window,
                    );
                    forest_mean(&pair.standard, &window, &mut dst[offset..offset + k]);
                    forest_mean(&pair.extra, &window, &mut dst[offset + k..offset + 2 * k]);
                    offset += 2 * k;
                }
            }
        });
    images.with_features(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mnist_window_counts() {
        let img = vec![0.0; 784];
        assert_eq!(extract_windows(&img, (28, 28), 14, 1).unwrap().len(), 225);
        assert_eq!(extract_windows(&img, (28, 28), 7, 1).unwrap().len(), 484);
        assert_eq!(extract_windows(&img, (28, 28), 9, 1).unwrap().len(), 400);
        assert!(extract_windows(&img, (28, 28), 29, 1).is_err());
        assert_eq!(mgs_output_dim((28, 28), &[7, 9, 14], 1, 10), 22180);
    }

    #[test]
    fn full_window_is_the_image() {
        let img: Vec<f64> = (0..784).map(|v| v as f64).collect();
        let w = extract_windows(&img, (28, 28), 28, 1).unwrap();
        assert_eq!(w, vec![img]);
    }

    #[test]
    fn scan_order_is_row_major() {
        // 3x4 image holding its own pixel indices
        let img: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let w = extract_windows(&img, (3, 4), 2, 1).unwrap();
        assert_eq!(w.len(), 6);
        assert_eq!(w[0], vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(w[1], vec![1.0, 2.0, 5.0, 6.0]);
        assert_eq!(w[3], vec![4.0, 5.0, 8.0, 9.0]);
        let strided = extract_windows(&img, (3, 4), 2, 2).unwrap();
        assert_eq!(
            strided,
            vec![vec![0.0, 1.0, 4.0, 5.0], vec![2.0, 3.0, 6.0, 7.0]]
        );
    }

    #[test]
    fn window_source_matches_extraction() {
        let pixels = Matrix::from_rows(&[
            (0..20).map(|v| v as f64).collect::<Vec<_>>(),
            (0..20).map(|v| 100.0 + v as f64).collect::<Vec<_>>(),
        ])
        .unwrap();
        let images = [1, 0];
        let src = WindowSource::new(&pixels, &images, (4, 5), 3, 1);
        assert_eq!(src.n_rows(), 2 * 6);
        for (slot, &img) in images.iter().enumerate() {
            let windows = extract_windows(pixels.row(img), (4, 5), 3, 1).unwrap();
            for (p, win) in windows.iter().enumerate() {
                for (f, &v) in win.iter().enumerate() {
                    assert_eq!(src.value(slot * 6 + p, f), v);
                }
            }
        }
    }

    #[test]
    fn coverage_counts_on_a_toy_image() {
        // count, by brute force, how many 3-windows cover each pixel of a 6x6 image
        let (rows, cols, w) = (6, 6, 3);
        let ids: Vec<f64> = (0..rows * cols).map(|v| v as f64).collect();
        let mut covered = vec![0usize; rows * cols];
        for win in extract_windows(&ids, (rows, cols), w, 1).unwrap() {
            for v in win {
                covered[v as usize] += 1;
            }
        }
        let axis = |i: usize| (i + 1).min(w).min(rows - i).min(rows - w + 1);
        for r in 0..rows {
            for c in 0..cols {
                assert_eq!(covered[r * cols + c], axis(r) * axis(c), "pixel ({r},{c})");
            }
        }
    }

    fn toy_images(n: usize) -> Dataset {
        let (rows, cols) = (6, 5);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = i % 2;
            for r in 0..rows {
                for c in 0..cols {
                    let lit = if y == 0 { c < 2 } else { r < 2 };
                    feats.push(if lit {
                        0.8 + 0.01 * (i % 5) as f64
                    } else {
                        0.05 * ((r + c + i) % 3) as f64
                    });
                }
            }
            labels.push(y);
        }
        Dataset::new(Matrix::new(n, rows * cols, feats).unwrap(), labels, 2)
            .unwrap()
            .with_image_shape(rows, cols)
            .unwrap()
    }

    fn toy_config() -> MgsConfig {
        MgsConfig {
            window_sizes: vec![3, 5],
            trees_per_forest: 3,
            seed: 4,
            ..MgsConfig::default()
        }
    }

    #[test]
    fn fit_and_transform_shapes() {
        let data = toy_images(12);
        let model = fit_mgs(&data, &toy_config()).unwrap();
        assert_eq!(model.forests().len(), 2);
        assert_eq!(model.forests()[0].standard[0].n_features(), 9);
        // windows: 4*3 = 12 for w=3, 2*1 = 2 for w=5
        assert_eq!(model.output_dim(), 2 * 2 * (12 + 2));
        let again = fit_mgs(&data, &toy_config()).unwrap();
        assert_eq!(model, again);

        let out = transform_mgs(&model, &data).unwrap();
        assert_eq!(out.n_features(), model.output_dim());
        assert_eq!(out.labels(), data.labels());
        assert_eq!(out.image_shape(), None);
        for row in out.features().iter_rows() {
            for block in row.chunks(2) {
                assert!((block.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
        assert_eq!(transform_mgs(&model, &data).unwrap(), out);
    }

    #[test]
    fn constant_image_gives_identical_window_blocks() {
        let data = toy_images(10);
        let model = fit_mgs(&data, &toy_config()).unwrap();
        let blank = Dataset::new(Matrix::zeros(1, 30), vec![0], 2)
            .unwrap()
            .with_image_shape(6, 5)
            .unwrap();
        let out = transform_mgs(&model, &blank).unwrap();
        let row = out.features().row(0);
        // first window size: 12 windows x (standard, extra) x 2 classes
        let first = &row[..4];
        for p in 0..12 {
            assert_eq!(&row[p * 4..p * 4 + 4], first);
        }
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let data = toy_images(6);
        let model = fit_mgs(&data, &toy_config()).unwrap();
        let other = Dataset::new(Matrix::zeros(1, 30), vec![0], 2)
            .unwrap()
            .with_image_shape(5, 6)
            .unwrap();
        assert!(transform_mgs(&model, &other).is_err());
        let flat = Dataset::new(Matrix::zeros(2, 30), vec![0, 1], 2).unwrap();
        assert!(fit_mgs(&flat, &toy_config()).is_err());
        let too_big = MgsConfig {
            window_sizes: vec![6],
            ..toy_config()
        };
        assert!(fit_mgs(&data, &too_big).is_err());
    }

    #[test]
    fn subsampling_images_still_fits() {
        let data = toy_images(20);
        let config = MgsConfig {
            sample_fraction: 0.5,
            ..toy_config()
        };
        let model = fit_mgs(&data, &config).unwrap();
        assert_eq!(model.output_dim(), 56);
    }

    proptest! {
        #[test]
        fn output_dim_matches_extraction(rows in 1usize..20, cols in 1usize..20, stride in 1usize..4, k in 2usize..5, ws in prop::collection::vec(1usize..20, 1..4)) {
            let ws: Vec<usize> = ws.into_iter().filter(|&w| w <= rows.min(cols)).collect();
            prop_assume!(!ws.is_empty());
            let img = vec![0.0; rows * cols];
            let by_extraction: usize = ws
                .iter()
                .map(|&w| 2 * k * extract_windows(&img, (rows, cols), w, stride).unwrap().len())
                .sum();
            let ceil = |len: usize, w: usize| (len - w + 1).div_ceil(stride);
            let by_formula: usize = ws.iter().map(|&w| 2 * k * ceil(rows, w) * ceil(cols, w)).sum();
            prop_assert_eq!(mgs_output_dim((rows, cols), &ws, stride, k), by_extraction);
            prop_assert_eq!(by_extraction, by_formula);
        }
    }
}
