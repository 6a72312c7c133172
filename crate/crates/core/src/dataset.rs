//! Labelled datasets: loading (IDX, CSV), holdout splitting and the
//! single-pixel diagonal "wiggle" augmentation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::rng_from_seed;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// `N x d` finite features with dense class labels in `0..n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    n_classes: usize,
    image_shape: Option<(usize, usize)>,
    class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::validation(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if n_classes < 2 {
            return Err(Error::validation(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= n_classes) {
            return Err(Error::validation(format!(
                "label {y} at row {i} is out of range for {n_classes} classes"
            )));
        }
        if let Some(pos) = features.as_slice().iter().position(|v| !v.is_finite()) {
            let cols = features.cols().max(1);
            return Err(Error::validation(format!(
                "non-finite feature value at row {}, column {}",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Dataset {
            features,
            labels,
            n_classes,
            image_shape: None,
            class_names: None,
        })
    }

    /// Marks the features as flattened `rows x cols` monochrome images.
    pub fn with_image_shape(mut self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.n_features() {
            return Err(Error::validation(format!(
                "image shape {rows}x{cols} does not match {} features",
                self.n_features()
            )));
        }
        self.image_shape = Some((rows, cols));
        Ok(self)
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_classes {
            return Err(Error::validation(format!(
                "{} class names for {} classes",
                names.len(),
                self.n_classes
            )));
        }
        self.class_names = Some(names);
        Ok(self)
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    /// Raw label for each dense class id, when the labels were re-encoded on load.
    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows `indices` in the given order; metadata is preserved.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            image_shape: self.image_shape,
            class_names: self.class_names.clone(),
        }
    }

    /// The first `n` rows (or all of them when `n >= N`).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.n_samples())).collect();
        self.subset(&idx)
    }

    /// Appends the rows of `other` after the rows of `self`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.n_classes != other.n_classes {
            return Err(Error::validation(format!(
                "cannot concatenate datasets with {} and {} classes",
                self.n_classes, other.n_classes
            )));
        }
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Dataset {
            features: self.features.vstack(&other.features)?,
            labels,
            n_classes: self.n_classes,
            image_shape: if self.image_shape == other.image_shape {
                self.image_shape
            } else {
                None
            },
            class_names: self.class_names.clone(),
        })
    }

    /// Same labels and metadata with a replacement feature matrix.
    pub fn with_features(&self, features: Matrix) -> Result<Dataset> {
        let mut out = Dataset::new(features, self.labels.clone(), self.n_classes)?;
        out.class_names = self.class_names.clone();
        Ok(out)
    }
}

struct ByteReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn u32_be(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                offset: self.bytes.len() as u64,
                what,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

fn expect_magic(path: &Path, found: u32, expected: u32) -> Result<()> {
    if found != expected {
        return Err(Error::Format(format!(
            "{}: expected IDX magic 0x{expected:08X}, found 0x{found:08X}",
            path.display()
        )));
    }
    Ok(())
}

/// Loads an IDX image file and its IDX label file.
///
/// Pixels are scaled to `[0, 1]` by dividing by 255 and the dataset carries
/// the image shape. The class count is `max(label) + 1` (at least 2).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let image_bytes = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let label_bytes = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;

    let mut img = ByteReader {
        path: images_path,
        bytes: &image_bytes,
        pos: 0,
    };
    expect_magic(images_path, img.u32_be("image magic")?, IDX_IMAGES_MAGIC)?;
    let n_images = img.u32_be("image count")? as usize;
    let rows = img.u32_be("row count")? as usize;
    let cols = img.u32_be("column count")? as usize;

    let mut lab = ByteReader {
        path: labels_path,
        bytes: &label_bytes,
        pos: 0,
    };
    expect_magic(labels_path, lab.u32_be("label magic")?, IDX_LABELS_MAGIC)?;
    let n_labels = lab.u32_be("label count")? as usize;

    if n_images != n_labels {
        return Err(Error::Consistency(format!(
            "{} declares {n_images} images but {} declares {n_labels} labels",
            images_path.display(),
            labels_path.display()
        )));
    }

    let pixels = img.take(n_images * rows * cols, "pixel data")?;
    let features: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = lab
        .take(n_labels, "label data")?
        .iter()
        .map(|&y| usize::from(y))
        .collect();
    let n_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));

    Dataset::new(
        Matrix::new(n_images, rows * cols, features)?,
        labels,
        n_classes,
    )?
    .with_image_shape(rows, cols)
}

/// Loads a headered CSV file whose `label_column` holds the class and whose
/// other columns are all numeric.
///
/// Raw labels are re-encoded to `0..K` in sorted order (numeric order when
/// every label parses as a number, lexicographic otherwise); the raw values
/// are kept as the dataset's class names.
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            Error::validation(format!(
                "{}: label column `{label_column}` not found in header",
                path.display()
            ))
        })?;
    let feature_names: Vec<&str> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h)
        .collect();

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        // Data rows are numbered from 1, the header being row 0.
        let row = row + 1;
        let mut col = 0;
        for (i, cell) in record.iter().enumerate() {
            if i == label_idx {
                raw_labels.push(cell.trim().to_string());
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column: feature_names[col].to_string(),
                message: format!("`{cell}` is not a number"),
            })?;
            features.push(v);
            col += 1;
        }
    }

    let (labels, names) = encode_labels(&raw_labels);
    if names.len() < 2 {
        return Err(Error::validation(format!(
            "{}: need at least 2 distinct labels, found {}",
            path.display(),
            names.len()
        )));
    }
    let n = labels.len();
    let matrix = Matrix::new(n, feature_names.len(), features)?;
    Dataset::new(matrix, labels, names.len())?.with_class_names(names)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        if let csv::ErrorKind::Io(io) = e.into_kind() {
            return Error::io(path, io);
        }
        unreachable!("is_io_error implies an Io kind");
    }
    Error::Format(format!("{}: {e}", path.display()))
}

fn encode_labels(raw: &[String]) -> (Vec<usize>, Vec<String>) {
    let all_numeric = raw.iter().all(|s| s.parse::<f64>().is_ok());
    let mut distinct: Vec<&String> = raw.iter().collect();
    if all_numeric {
        distinct.sort_by(|a, b| {
            let (a, b) = (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap());
            a.total_cmp(&b)
        });
        distinct.dedup_by(|a, b| a.parse::<f64>().unwrap() == b.parse::<f64>().unwrap());
    } else {
        distinct.sort();
        distinct.dedup();
    }
    let names: Vec<String> = distinct.into_iter().cloned().collect();
    let lookup: BTreeMap<&str, usize> = names
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let labels = raw
        .iter()
        .map(|s| match lookup.get(s.as_str()) {
            Some(&i) => i,
            // numerically equal spellings such as "3" and "3.0"
            None => {
                let v: f64 = s.parse().unwrap();
                names
                    .iter()
                    .position(|n| n.parse::<f64>().unwrap() == v)
                    .unwrap()
            }
        })
        .collect();
    (labels, names)
}

/// Writes the dataset as CSV: one column per feature (`f0`, `f1`, ...) then a
/// `label` column holding the class name (or dense id).
///
/// Reals are written in shortest round-trip form, so reading the file back
/// reproduces every feature bit for bit.
pub fn save_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<String> = (0..data.n_features()).map(|j| format!("f{j}")).collect();
    header.push("label".to_string());
    writer
        .write_record(&header)
        .map_err(|e| csv_error(path, e))?;
    for (row, &y) in data.features().iter_rows().zip(data.labels()) {
        let mut record: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        record.push(match data.class_names() {
            Some(names) => names[y].clone(),
            None => y.to_string(),
        });
        writer
            .write_record(&record)
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// A disjoint train/holdout partition of a dataset.
#[derive(Debug, Clone)]
pub struct SplitPair {
    pub train: Dataset,
    pub holdout: Dataset,
    pub seed: u64,
    /// Source row indices of `train`, ascending.
    pub train_rows: Vec<usize>,
    /// Source row indices of `holdout`, ascending.
    pub holdout_rows: Vec<usize>,
}

/// Per-class holdout sizes: `floor(fraction * count)` for every class, then
/// the `round(fraction * N) - sum(floors)` leftover samples go to the classes
/// with the largest fractional parts (lowest class id first on ties).
pub fn holdout_counts(class_counts: &[usize], fraction: f64) -> Vec<usize> {
    let total: usize = class_counts.iter().sum();
    let ideal: Vec<f64> = class_counts.iter().map(|&c| fraction * c as f64).collect();
    let mut counts: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let target = (fraction * total as f64).round() as usize;
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..class_counts.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = ideal[a] - ideal[a].floor();
        let fb = ideal[b] - ideal[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(target.saturating_sub(assigned)) {
        if counts[k] < class_counts[k] {
            counts[k] += 1;
        }
    }
    counts
}

/// Stratified holdout split. Each class's rows are shuffled with a generator
/// seeded from `seed` and the first `holdout_counts(..)[k]` go to the holdout.
/// Both parts keep the source row order.
pub fn stratified_split(data: &Dataset, holdout_fraction: f64, seed: u64) -> Result<SplitPair> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::validation(format!(
            "holdout fraction must be in (0, 1), got {holdout_fraction}"
        )));
    }
    let class_counts = data.class_counts();
    if let Some((k, &c)) = class_counts.iter().enumerate().find(|(_, &c)| c == 1) {
        return Err(Error::validation(format!(
            "class {k} has {c} sample; stratified splitting needs at least 2 per class"
        )));
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.n_classes()];
    for (i, &y) in data.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let sizes = holdout_counts(&class_counts, holdout_fraction);
    let mut rng = rng_from_seed(seed);
    let mut holdout_rows = Vec::new();
    let mut train_rows = Vec::new();
    for (rows, &h) in by_class.iter_mut().zip(&sizes) {
        rows.shuffle(&mut rng);
        holdout_rows.extend_from_slice(&rows[..h]);
        train_rows.extend_from_slice(&rows[h..]);
    }
    holdout_rows.sort_unstable();
    train_rows.sort_unstable();

    Ok(SplitPair {
        train: data.subset(&train_rows),
        holdout: data.subset(&holdout_rows),
        seed,
        train_rows,
        holdout_rows,
    })
}

/// One-pixel diagonal shift directions, in augmentation block order.
pub const WIGGLE_SHIFTS: [(isize, isize); 4] = [(-1, -1), (-1, 1), (1, -1), (1, 1)];

/// Moves every pixel by `(dr, dc)`; pixels shifted in from outside are 0.
pub fn shift_image(image: &[f64], rows: usize, cols: usize, dr: isize, dc: isize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let src_r = r as isize - dr;
        if src_r < 0 || src_r >= rows as isize {
            continue;
        }
        for c in 0..cols {
            let src_c = c as isize - dc;
            if src_c < 0 || src_c >= cols as isize {
                continue;
            }
            out[r * cols + c] = image[src_r as usize * cols + src_c as usize];
        }
    }
    out
}

/// Appends four one-pixel diagonal shifts of every image: the output holds
/// all originals, then the up-left, up-right, down-left and down-right
/// blocks, each in source order (`5N` rows).
pub fn wiggle_augment(data: &Dataset) -> Result<Dataset> {
    let (rows, cols) = data
        .image_shape()
        .ok_or_else(|| Error::validation("wiggle augmentation needs an image shape"))?;
    let n = data.n_samples();
    let d = data.n_features();
    let mut features = Vec::with_capacity(5 * n * d);
    features.extend_from_slice(data.features().as_slice());
    for &(dr, dc) in &WIGGLE_SHIFTS {
        for img in data.features().iter_rows() {
            features.extend(shift_image(img, rows, cols, dr, dc));
        }
    }
    let labels: Vec<usize> = data.labels().iter().copied().cycle().take(5 * n).collect();
    let mut out = Dataset::new(Matrix::new(5 * n, d, features)?, labels, data.n_classes())?
        .with_image_shape(rows, cols)?;
    out.class_names = data.class_names.clone();
    Ok(out)
}
