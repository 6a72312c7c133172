#![allow(dead_code)]

use std::env;
use std::path::PathBuf;

use ftdrf::cascade::{relative_gain, transform_through};
use ftdrf::{
    load_idx, predict_layer, stratified_split, CascadeConfig, CascadeModel, Dataset, Matrix,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// `FTDRF_MNIST_DIR`, or `<workspace>/data/mnist`.
pub fn mnist_dir() -> PathBuf {
    match env::var_os("FTDRF_MNIST_DIR") {
        Some(dir) => PathBuf::from(dir),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"),
    }
}

/// Whether the MNIST files are present. When they are missing this panics
/// with setup instructions, unless `FTDRF_ALLOW_MISSING_MNIST=1`, in which
/// case it returns false so callers can skip.
pub fn mnist_available() -> bool {
    let dir = mnist_dir();
    let missing: Vec<&str> = MNIST_FILES
        .iter()
        .copied()
        .filter(|f| !dir.join(f).is_file())
        .collect();
    if missing.is_empty() {
        return true;
    }
    if env::var("FTDRF_ALLOW_MISSING_MNIST").as_deref() == Ok("1") {
        return false;
    }
    panic!(
        "MNIST files {missing:?} not found in {}.\n\
         Put the four uncompressed IDX files there (see README), point \
         FTDRF_MNIST_DIR at them, or set FTDRF_ALLOW_MISSING_MNIST=1 to skip \
         the MNIST tiers.",
        dir.display()
    );
}

pub fn mnist_train() -> Dataset {
    let dir = mnist_dir();
    load_idx(dir.join(MNIST_FILES[0]), dir.join(MNIST_FILES[1])).expect("MNIST training set")
}

pub fn mnist_test() -> Dataset {
    let dir = mnist_dir();
    load_idx(dir.join(MNIST_FILES[2]), dir.join(MNIST_FILES[3])).expect("MNIST test set")
}

/// Random classification data with `n` rows, `d` features and `k` classes.
/// Features come from a coarse grid half of the time so that ties and
/// repeated values are common.
pub fn random_dataset(seed: u64, n: usize, d: usize, k: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = rng.gen_bool(0.5);
    let values: Vec<f64> = (0..n * d)
        .map(|_| {
            if grid {
                rng.gen_range(0..6) as f64
            } else {
                rng.gen_range(-10.0..10.0)
            }
        })
        .collect();
    // every class present at least once
    let mut labels: Vec<usize> = (0..n)
        .map(|i| if i < k { i } else { rng.gen_range(0..k) })
        .collect();
    labels.rotate_left(rng.gen_range(0..n));
    Dataset::new(Matrix::new(n, d, values).unwrap(), labels, k).unwrap()
}

pub fn oracle_entropy(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / n as f64;
            h -= p * p.log2();
        }
    }
    h
}

pub fn oracle_gini(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let mut s = 0.0;
    for &c in counts {
        let p = c as f64 / n as f64;
        s += p * p;
    }
    1.0 - s
}

/// Exhaustive split search: every feature, every midpoint of consecutive
/// distinct values, counts recomputed from scratch for each candidate.
/// Returns `(feature, threshold, decrease)` of the first strictly best
/// candidate in (feature, threshold) order, or `None` when nothing beats
/// `1e-12`.
pub fn brute_force_split(data: &Dataset, gini: bool) -> Option<(usize, f64, f64)> {
    let x = data.features();
    let y = data.labels();
    let k = data.n_classes();
    let n = x.rows();
    let score = |c: &[usize]| {
        if gini {
            oracle_gini(c)
        } else {
            oracle_entropy(c)
        }
    };
    let mut parent = vec![0; k];
    for &label in y {
        parent[label] += 1;
    }
    let h_parent = score(&parent);

    let mut best: Option<(usize, f64, f64)> = None;
    for f in 0..x.cols() {
        let mut vals: Vec<f64> = (0..n).map(|i| x.get(i, f)).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for pair in vals.windows(2) {
            let t = (pair[0] + pair[1]) / 2.0;
            let mut left = vec![0; k];
            let mut right = vec![0; k];
            for i in 0..n {
                if x.get(i, f) <= t {
                    left[y[i]] += 1;
                } else {
                    right[y[i]] += 1;
                }
            }
            let nl: usize = left.iter().sum();
            let nr: usize = right.iter().sum();
            let dec = h_parent
                - (nl as f64 / n as f64) * score(&left)
                - (nr as f64 / n as f64) * score(&right);
            let better = match best {
                None => dec > 1e-12,
                Some((_, _, b)) => dec > b,
            };
            if better {
                best = Some((f, t, dec));
            }
        }
    }
    best
}

/// Reference one-pixel shift: `out[r][c] = img[r - dr][c - dc]`, zero outside.
pub fn oracle_shift(img: &[f64], rows: usize, cols: usize, dr: i64, dc: i64) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows as i64 {
        for c in 0..cols as i64 {
            let (sr, sc) = (r - dr, c - dc);
            let inside = (0..rows as i64).contains(&sr) && (0..cols as i64).contains(&sc);
            out.push(if inside {
                img[(sr * cols as i64 + sc) as usize]
            } else {
                0.0
            });
        }
    }
    out
}

/// Scanning output width counted window by window.
pub fn oracle_mgs_width(side: usize, windows: &[usize], k: usize) -> usize {
    let mut width = 0;
    for &w in windows {
        for _r in 0..=(side - w) {
            for _c in 0..=(side - w) {
                width += 2 * k;
            }
        }
    }
    width
}

/// Checks a fitted cascade's history against the stopping rule and
/// recomputes every kept layer's holdout accuracy from the model itself.
pub fn check_history(
    data: &Dataset,
    model: &CascadeModel,
    cfg: &CascadeConfig,
) -> Result<(), String> {
    let split =
        stratified_split(data, cfg.holdout_fraction, cfg.seed).map_err(|e| e.to_string())?;
    let history = model.history();
    if history.len() != model.n_layers() {
        return Err(format!(
            "{} history rows for {} layers",
            history.len(),
            model.n_layers()
        ));
    }
    for (l, rec) in history.iter().enumerate() {
        if rec.layer != l + 1 {
            return Err(format!("history row {l} is numbered {}", rec.layer));
        }
        let x = transform_through(model, split.holdout.features(), Some(l))
            .map_err(|e| e.to_string())?;
        let p = predict_layer(&model.layers()[l], &x).map_err(|e| e.to_string())?;
        let correct = p
            .labels
            .iter()
            .zip(split.holdout.labels())
            .filter(|(a, b)| a == b)
            .count();
        let acc = correct as f64 / split.holdout.n_samples() as f64;
        if rec.holdout_accuracy != acc {
            return Err(format!(
                "layer {} recorded {} but scores {acc}",
                l + 1,
                rec.holdout_accuracy
            ));
        }
        let expected = match l {
            0 => None,
            _ => Some(
                relative_gain(history[l - 1].holdout_accuracy, acc).map_err(|e| e.to_string())?,
            ),
        };
        if rec.relative_gain != expected {
            return Err(format!(
                "layer {} gain {:?}, expected {expected:?}",
                l + 1,
                rec.relative_gain
            ));
        }
        if let Some(g) = expected {
            if l + 1 > cfg.min_layers && g < cfg.gain_threshold {
                return Err(format!(
                    "kept layer {} has gain {g} below {}",
                    l + 1,
                    cfg.gain_threshold
                ));
            }
        }
    }
    match model.rejected() {
        Some(rej) => {
            let last = history.last().unwrap().holdout_accuracy;
            let g = relative_gain(last, rej.holdout_accuracy).map_err(|e| e.to_string())?;
            if rej.layer != model.n_layers() + 1
                || rej.relative_gain != Some(g)
                || g >= cfg.gain_threshold
            {
                return Err(format!(
                    "rejected layer {rej:?} is inconsistent with the rule"
                ));
            }
        }
        None if model.n_layers() != cfg.max_layers => {
            return Err(format!(
                "stopped at {} layers without a rejected layer",
                model.n_layers()
            ));
        }
        None => {}
    }
    Ok(())
}

pub fn assert_history_follows_rule(data: &Dataset, model: &CascadeModel, cfg: &CascadeConfig) {
    if let Err(msg) = check_history(data, model, cfg) {
        panic!("{msg}");
    }
}
