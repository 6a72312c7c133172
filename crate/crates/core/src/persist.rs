//! Versioned binary model files.
//!
//! Layout (all integers and reals little-endian, reals IEEE-754 binary64):
//!
//! ```text
//! "FTDRF"  u32 format_version
//! section*  = [u8; 4] tag, u64 payload_len, payload
//! ```
//!
//! Sections appear in a fixed order: `CONF`, `FING`, `HIST`, optional `CLAS`,
//! optional `MGS `, `CASC`, `END `. Trees are flat preorder node arrays with explicit child
//! indices. `docs/model-format.md` spells out every field.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::cascade::{predict_cascade, CascadeConfig, CascadeModel, GainMode, LayerRecord};
use crate::error::{Error, Result};
use crate::eval::AccuracyReport;
use crate::layer::{LayerModel, LayerParams, Prediction};
use crate::mgs::{transform_mgs, MgsConfig, MgsModel, WindowForests};
use crate::tree::{Criterion, Node, TreeKind, TreeModel, TreeParams};
use crate::Dataset;

pub const MAGIC: &[u8; 5] = b"FTDRF";
pub const FORMAT_VERSION: u32 = 1;

const TAG_CONFIG: [u8; 4] = *b"CONF";
const TAG_FINGERPRINT: [u8; 4] = *b"FING";
const TAG_HISTORY: [u8; 4] = *b"HIST";
const TAG_CLASSES: [u8; 4] = *b"CLAS";
const TAG_MGS: [u8; 4] = *b"MGS ";
const TAG_CASCADE: [u8; 4] = *b"CASC";
const TAG_END: [u8; 4] = *b"END ";

/// Identity of the training data a model was fitted on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fingerprint {
    pub n_samples: u64,
    pub n_features: u64,
    pub n_classes: u64,
    /// SHA-256 over the shape, the feature bits and the labels.
    pub content_hash: [u8; 32],
}

impl Fingerprint {
    pub fn of(data: &Dataset) -> Self {
        let mut h = Sha256::new();
        h.update((data.n_samples() as u64).to_le_bytes());
        h.update((data.n_features() as u64).to_le_bytes());
        h.update((data.n_classes() as u64).to_le_bytes());
        for v in data.features().as_slice() {
            h.update(v.to_le_bytes());
        }
        for &y in data.labels() {
            h.update((y as u64).to_le_bytes());
        }
        Fingerprint {
            n_samples: data.n_samples() as u64,
            n_features: data.n_features() as u64,
            n_classes: data.n_classes() as u64,
            content_hash: h.finalize().into(),
        }
    }

    pub fn hash_hex(&self) -> String {
        self.content_hash
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Everything needed to replay predictions: optional scanning stage, the
/// cascade (with its config and history), the training-data fingerprint and
/// the raw class names when the training data had them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub mgs: Option<MgsModel>,
    pub cascade: CascadeModel,
    pub fingerprint: Fingerprint,
    pub class_names: Option<Vec<String>>,
}

impl ModelFile {
    pub fn new(
        mgs: Option<MgsModel>,
        cascade: CascadeModel,
        fingerprint: Fingerprint,
    ) -> Result<Self> {
        let file = ModelFile {
            mgs,
            cascade,
            fingerprint,
            class_names: None,
        };
        file.check()?;
        Ok(file)
    }

    pub fn with_class_names(mut self, names: Option<Vec<String>>) -> Result<Self> {
        self.class_names = names;
        self.check()?;
        Ok(self)
    }

    fn check(&self) -> Result<()> {
        if let Some(names) = &self.class_names {
            if names.len() != self.cascade.n_classes() {
                return Err(Error::Integrity(format!(
                    "{} class names for {} classes",
                    names.len(),
                    self.cascade.n_classes()
                )));
            }
        }
        if let Some(mgs) = &self.mgs {
            if mgs.output_dim() != self.cascade.input_dim() {
                return Err(Error::Integrity(format!(
                    "scanning stage emits {} features but the cascade expects {}",
                    mgs.output_dim(),
                    self.cascade.input_dim()
                )));
            }
            if mgs.n_classes() != self.cascade.n_classes() {
                return Err(Error::Integrity(
                    "scanning stage and cascade disagree on K".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.cascade.n_classes()
    }

    /// Features the file expects from raw input rows.
    pub fn raw_input_dim(&self) -> usize {
        match &self.mgs {
            Some(m) => m.image_shape().0 * m.image_shape().1,
            None => self.cascade.input_dim(),
        }
    }

    /// Applies the scanning stage (if any) and then the cascade.
    pub fn predict(&self, data: &Dataset) -> Result<Prediction> {
        match &self.mgs {
            Some(m) => predict_cascade(&self.cascade, transform_mgs(m, data)?.features()),
            None => predict_cascade(&self.cascade, data.features()),
        }
    }

    /// Re-expresses `data`'s labels in the model's class ids.
    ///
    /// Named classes are matched by name (numerically when both names are
    /// numbers); against a model without names, integer class names are taken
    /// as ids. Unnamed labels are used as ids directly. The result always has
    /// the model's class count, so a test set missing some classes still lines
    /// up with the training classes.
    pub fn align_dataset(&self, data: &Dataset) -> Result<Dataset> {
        let k = self.n_classes();
        let same_name = |a: &str, b: &str| {
            a == b || matches!((a.parse::<f64>(), b.parse::<f64>()), (Ok(x), Ok(y)) if x == y)
        };
        let mapping: Vec<usize> = match (data.class_names(), &self.class_names) {
            (Some(names), Some(model_names)) => names
                .iter()
                .map(|n| {
                    model_names
                        .iter()
                        .position(|m| same_name(n, m))
                        .ok_or_else(|| {
                            Error::validation(format!("class `{n}` was not seen in training"))
                        })
                })
                .collect::<Result<_>>()?,
            (Some(names), None) => names
                .iter()
                .map(|n| match n.parse::<usize>() {
                    Ok(id) if id < k => Ok(id),
                    _ => Err(Error::validation(format!(
                        "class `{n}` is not an id below the model's {k} classes"
                    ))),
                })
                .collect::<Result<_>>()?,
            (None, _) => (0..data.n_classes()).collect(),
        };
        if let Some(&bad) = mapping.iter().find(|&&c| c >= k) {
            return Err(Error::validation(format!(
                "label {bad} is outside the model's {k} classes"
            )));
        }
        let labels = data.labels().iter().map(|&y| mapping[y]).collect();
        let mut out = Dataset::new(data.features().clone(), labels, k)?;
        if let Some((r, c)) = data.image_shape() {
            out = out.with_image_shape(r, c)?;
        }
        if let Some(names) = &self.class_names {
            out = out.with_class_names(names.clone())?;
        }
        Ok(out)
    }

    /// Accuracy on `data`, whose labels must already be model class ids
    /// (see [`ModelFile::align_dataset`]).
    pub fn evaluate(&self, data: &Dataset) -> Result<AccuracyReport> {
        if data.n_classes() != self.n_classes() {
            return Err(Error::validation(format!(
                "model has {} classes, data has {}",
                self.n_classes(),
                data.n_classes()
            )));
        }
        let p = self.predict(data)?;
        AccuracyReport::from_labels(data.labels(), &p.labels, self.n_classes())
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bool(&mut self, v: bool) {
        self.u8(u8::from(v));
    }
    fn opt_usize(&mut self, v: Option<usize>) {
        self.bool(v.is_some());
        self.usize(v.unwrap_or(0));
    }
    fn opt_f64(&mut self, v: Option<f64>) {
        self.bool(v.is_some());
        self.f64(v.unwrap_or(0.0));
    }
    fn section(&mut self, tag: [u8; 4], body: impl FnOnce(&mut Writer)) {
        let mut inner = Writer::default();
        body(&mut inner);
        self.buf.extend_from_slice(&tag);
        self.u64(inner.buf.len() as u64);
        self.buf.extend_from_slice(&inner.buf);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Integrity(format!(
                "file truncated at byte offset {} while reading {what}",
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn usize(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v)
            .map_err(|_| Error::Integrity(format!("{what} {v} does not fit in memory")))
    }
    /// A count of items each at least `min_item_bytes` long; rejects counts the
    /// remaining bytes cannot hold before anything is allocated.
    fn count(&mut self, min_item_bytes: usize, what: &str) -> Result<usize> {
        let n = self.usize(what)?;
        let remaining = self.bytes.len() - self.pos;
        if n.saturating_mul(min_item_bytes.max(1)) > remaining {
            return Err(Error::Integrity(format!(
                "{what} {n} exceeds the {remaining} bytes left at offset {}",
                self.pos
            )));
        }
        Ok(n)
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn bool(&mut self, what: &str) -> Result<bool> {
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Integrity(format!("invalid boolean {v} for {what}"))),
        }
    }
    fn opt_usize(&mut self, what: &str) -> Result<Option<usize>> {
        let present = self.bool(what)?;
        let v = self.usize(what)?;
        Ok(present.then_some(v))
    }
    fn opt_f64(&mut self, what: &str) -> Result<Option<f64>> {
        let present = self.bool(what)?;
        let v = self.f64(what)?;
        Ok(present.then_some(v))
    }
    fn section(&mut self, tag: [u8; 4]) -> Result<Reader<'a>> {
        let found = self.take(4, "section tag")?;
        if found != tag {
            return Err(Error::Integrity(format!(
                "expected section {:?} at offset {}, found {:?}",
                String::from_utf8_lossy(&tag),
                self.pos - 4,
                String::from_utf8_lossy(found)
            )));
        }
        let len = self.usize("section length")?;
        let start = self.pos;
        let body = self.take(len, "section body")?;
        Ok(Reader {
            bytes: &self.bytes[..start + body.len()],
            pos: start,
        })
    }
    fn peek_tag(&self) -> Option<&[u8]> {
        self.bytes.get(self.pos..self.pos + 4)
    }
    fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Integrity(format!(
                "{} unread bytes at the end of {what}",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn kind_code(kind: TreeKind) -> u8 {
    match kind {
        TreeKind::Standard => 0,
        TreeKind::ExtraRandom => 1,
    }
}

fn kind_from(code: u8) -> Result<TreeKind> {
    match code {
        0 => Ok(TreeKind::Standard),
        1 => Ok(TreeKind::ExtraRandom),
        v => Err(Error::Integrity(format!("unknown tree kind {v}"))),
    }
}

fn write_tree_params(w: &mut Writer, p: &TreeParams) {
    w.u8(kind_code(p.kind));
    w.u8(match p.criterion {
        Criterion::Entropy => 0,
        Criterion::Gini => 1,
    });
    w.opt_usize(p.max_depth);
    w.usize(p.min_samples_split);
    w.usize(p.min_samples_leaf);
    w.opt_usize(p.mtry);
    w.bool(p.bootstrap);
}

fn read_tree_params(r: &mut Reader<'_>) -> Result<TreeParams> {
    let kind = kind_from(r.u8("tree kind")?)?;
    let criterion = match r.u8("criterion")? {
        0 => Criterion::Entropy,
        1 => Criterion::Gini,
        v => return Err(Error::Integrity(format!("unknown criterion {v}"))),
    };
    Ok(TreeParams {
        kind,
        criterion,
        max_depth: r.opt_usize("max depth")?,
        min_samples_split: r.usize("min samples split")?,
        min_samples_leaf: r.usize("min samples leaf")?,
        mtry: r.opt_usize("mtry")?,
        bootstrap: r.bool("bootstrap")?,
    })
}

fn write_layer_params(w: &mut Writer, p: &LayerParams) {
    w.usize(p.n_trees);
    w.f64(p.type_mix_p);
    write_tree_params(w, &p.standard);
    write_tree_params(w, &p.extra);
    w.u64(p.seed);
}

fn read_layer_params(r: &mut Reader<'_>) -> Result<LayerParams> {
    Ok(LayerParams {
        n_trees: r.usize("trees per layer")?,
        type_mix_p: r.f64("type mix")?,
        standard: read_tree_params(r)?,
        extra: read_tree_params(r)?,
        seed: r.u64("layer seed")?,
    })
}

fn write_config(w: &mut Writer, c: &CascadeConfig) {
    write_layer_params(w, &c.layer);
    w.f64(c.holdout_fraction);
    w.f64(c.gain_threshold);
    w.u8(match c.gain_mode {
        GainMode::RelativeAccuracy => 0,
        GainMode::RemainingError => 1,
    });
    w.usize(c.max_layers);
    w.usize(c.min_layers);
    w.u64(c.seed);
    w.bool(c.refit_full);
}

fn read_config(r: &mut Reader<'_>) -> Result<CascadeConfig> {
    let layer = read_layer_params(r)?;
    let holdout_fraction = r.f64("holdout fraction")?;
    let gain_threshold = r.f64("gain threshold")?;
    let gain_mode = match r.u8("gain mode")? {
        0 => GainMode::RelativeAccuracy,
        1 => GainMode::RemainingError,
        v => return Err(Error::Integrity(format!("unknown gain mode {v}"))),
    };
    let config = CascadeConfig {
        layer,
        holdout_fraction,
        gain_threshold,
        gain_mode,
        max_layers: r.usize("max layers")?,
        min_layers: r.usize("min layers")?,
        seed: r.u64("split seed")?,
        refit_full: r.bool("refit flag")?,
    };
    config
        .validate()
        .map_err(|e| Error::Integrity(format!("stored configuration is invalid: {e}")))?;
    Ok(config)
}

fn write_record(w: &mut Writer, rec: &LayerRecord) {
    w.usize(rec.layer);
    w.f64(rec.holdout_accuracy);
    w.opt_f64(rec.relative_gain);
    w.usize(rec.n_standard);
    w.usize(rec.n_extra);
}

fn read_record(r: &mut Reader<'_>) -> Result<LayerRecord> {
    Ok(LayerRecord {
        layer: r.usize("history layer")?,
        holdout_accuracy: r.f64("holdout accuracy")?,
        relative_gain: r.opt_f64("relative gain")?,
        n_standard: r.usize("standard tree count")?,
        n_extra: r.usize("extra tree count")?,
    })
}

fn write_tree(w: &mut Writer, t: &TreeModel) {
    w.u8(kind_code(t.kind()));
    w.usize(t.n_classes());
    w.usize(t.n_features());
    w.usize(t.nodes().len());
    for node in t.nodes() {
        match *node {
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                w.u8(0);
                w.usize(feature);
                w.f64(threshold);
                w.usize(left);
                w.usize(right);
            }
            Node::Leaf { leaf } => {
                w.u8(1);
                for &p in t.leaf_values(leaf) {
                    w.f64(p);
                }
            }
        }
    }
}

fn read_tree(r: &mut Reader<'_>, context: &str) -> Result<TreeModel> {
    let kind = kind_from(r.u8("tree kind")?)?;
    let k = r.usize("tree class count")?;
    let d = r.usize("tree feature count")?;
    if k < 2 {
        return Err(Error::Integrity(format!("{context}: {k} classes")));
    }
    let n_nodes = r.count(9, "node count")?;
    let mut nodes = Vec::with_capacity(n_nodes);
    let mut leaf_values = Vec::new();
    for i in 0..n_nodes {
        match r.u8("node tag")? {
            0 => nodes.push(Node::Split {
                feature: r.usize("split feature")?,
                threshold: r.f64("split threshold")?,
                left: r.usize("left child")?,
                right: r.usize("right child")?,
            }),
            1 => {
                let leaf = leaf_values.len() / k;
                let start = leaf_values.len();
                for _ in 0..k {
                    leaf_values.push(r.f64("leaf probability")?);
                }
                let sum: f64 = leaf_values[start..].iter().sum();
                if (sum - 1.0).abs() > crate::tree::LEAF_SUM_TOLERANCE
                    || leaf_values[start..]
                        .iter()
                        .any(|&p| !(0.0..=1.0).contains(&p))
                {
                    return Err(Error::Integrity(format!(
                        "{context}, node {i} (leaf {leaf}): probabilities sum to {sum}"
                    )));
                }
                nodes.push(Node::Leaf { leaf });
            }
            v => {
                return Err(Error::Integrity(format!(
                    "{context}, node {i}: unknown node tag {v}"
                )))
            }
        }
    }
    TreeModel::from_parts(kind, k, d, nodes, leaf_values)
        .map_err(|e| Error::Integrity(format!("{context}: {e}")))
}

fn write_forest(w: &mut Writer, trees: &[TreeModel]) {
    w.usize(trees.len());
    for t in trees {
        write_tree(w, t);
    }
}

fn read_forest(r: &mut Reader<'_>, context: &str) -> Result<Vec<TreeModel>> {
    let n = r.count(1, "forest size")?;
    (0..n)
        .map(|j| read_tree(r, &format!("{context}, tree {j}")))
        .collect()
}

fn write_mgs(w: &mut Writer, m: &MgsModel) {
    let c = m.config();
    w.usize(m.n_classes());
    w.usize(m.image_shape().0);
    w.usize(m.image_shape().1);
    w.usize(c.window_sizes.len());
    for &s in &c.window_sizes {
        w.usize(s);
    }
    w.usize(c.stride);
    w.usize(c.trees_per_forest);
    write_tree_params(w, &c.standard);
    write_tree_params(w, &c.extra);
    w.f64(c.sample_fraction);
    w.u64(c.seed);
    for pair in m.forests() {
        w.usize(pair.window);
        write_forest(w, &pair.standard);
        write_forest(w, &pair.extra);
    }
}

fn read_mgs(r: &mut Reader<'_>) -> Result<MgsModel> {
    let k = r.usize("scan class count")?;
    let shape = (r.usize("image rows")?, r.usize("image cols")?);
    let n_sizes = r.count(8, "window size count")?;
    let window_sizes = (0..n_sizes)
        .map(|_| r.usize("window size"))
        .collect::<Result<Vec<_>>>()?;
    let config = MgsConfig {
        window_sizes,
        stride: r.usize("stride")?,
        trees_per_forest: r.usize("trees per forest")?,
        standard: read_tree_params(r)?,
        extra: read_tree_params(r)?,
        sample_fraction: r.f64("sample fraction")?,
        seed: r.u64("scan seed")?,
    };
    let mut forests = Vec::with_capacity(n_sizes);
    for wi in 0..n_sizes {
        let window = r.usize("window")?;
        let standard = read_forest(r, &format!("scan window {wi}, standard forest"))?;
        let extra = read_forest(r, &format!("scan window {wi}, extra forest"))?;
        forests.push(WindowForests {
            window,
            standard,
            extra,
        });
    }
    MgsModel::from_parts(forests, k, shape, config).map_err(|e| match e {
        Error::Integrity(_) => e,
        other => Error::Integrity(format!("scanning stage: {other}")),
    })
}

/// Serializes a model file; identical models give identical bytes.
pub fn to_bytes(model: &ModelFile) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    let cascade = &model.cascade;
    w.section(TAG_CONFIG, |w| write_config(w, cascade.config()));
    w.section(TAG_FINGERPRINT, |w| {
        let f = &model.fingerprint;
        w.u64(f.n_samples);
        w.u64(f.n_features);
        w.u64(f.n_classes);
        w.buf.extend_from_slice(&f.content_hash);
    });
    w.section(TAG_HISTORY, |w| {
        w.usize(cascade.history().len());
        for rec in cascade.history() {
            write_record(w, rec);
        }
        w.bool(cascade.rejected().is_some());
        if let Some(rec) = cascade.rejected() {
            write_record(w, rec);
        }
    });
    if let Some(names) = &model.class_names {
        w.section(TAG_CLASSES, |w| {
            w.usize(names.len());
            for n in names {
                w.usize(n.len());
                w.buf.extend_from_slice(n.as_bytes());
            }
        });
    }
    if let Some(mgs) = &model.mgs {
        w.section(TAG_MGS, |w| write_mgs(w, mgs));
    }
    w.section(TAG_CASCADE, |w| {
        w.usize(cascade.n_classes());
        w.usize(cascade.input_dim());
        w.usize(cascade.n_layers());
        for layer in cascade.layers() {
            w.usize(layer.input_dim());
            write_forest(w, layer.trees());
        }
    });
    w.section(TAG_END, |_| {});
    w.buf
}

/// Parses and fully validates a model file.
pub fn from_bytes(bytes: &[u8]) -> Result<ModelFile> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "not a model file: expected magic {:?}",
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let version = r.u32("format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }

    let mut s = r.section(TAG_CONFIG)?;
    let config = read_config(&mut s)?;
    s.finish("config section")?;

    let mut s = r.section(TAG_FINGERPRINT)?;
    let fingerprint = Fingerprint {
        n_samples: s.u64("fingerprint N")?,
        n_features: s.u64("fingerprint d")?,
        n_classes: s.u64("fingerprint K")?,
        content_hash: s.take(32, "content hash")?.try_into().unwrap(),
    };
    s.finish("fingerprint section")?;

    let mut s = r.section(TAG_HISTORY)?;
    let n_records = s.count(41, "history length")?;
    let history = (0..n_records)
        .map(|_| read_record(&mut s))
        .collect::<Result<Vec<_>>>()?;
    let rejected = if s.bool("rejected flag")? {
        Some(read_record(&mut s)?)
    } else {
        None
    };
    s.finish("history section")?;

    let class_names = if r.peek_tag() == Some(&TAG_CLASSES[..]) {
        let mut s = r.section(TAG_CLASSES)?;
        let n = s.count(8, "class name count")?;
        let mut names = Vec::with_capacity(n);
        for _ in 0..n {
            let len = s.count(1, "class name length")?;
            let raw = s.take(len, "class name")?;
            names.push(
                String::from_utf8(raw.to_vec())
                    .map_err(|_| Error::Integrity("class name is not UTF-8".into()))?,
            );
        }
        s.finish("class name section")?;
        Some(names)
    } else {
        None
    };

    let mgs = if r.peek_tag() == Some(&TAG_MGS[..]) {
        let mut s = r.section(TAG_MGS)?;
        let m = read_mgs(&mut s)?;
        s.finish("scanning section")?;
        Some(m)
    } else {
        None
    };

    let mut s = r.section(TAG_CASCADE)?;
    let k = s.usize("cascade class count")?;
    let input_dim = s.usize("cascade input dim")?;
    let n_layers = s.count(16, "layer count")?;
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let layer_input = s.usize("layer input dim")?;
        let trees = read_forest(&mut s, &format!("layer {}", l + 1))?;
        layers.push(
            LayerModel::from_trees(trees, k, layer_input)
                .map_err(|e| Error::Integrity(format!("layer {}: {e}", l + 1)))?,
        );
    }
    s.finish("cascade section")?;

    let end = r.section(TAG_END)?;
    end.finish("end marker")?;
    r.finish("model file")?;

    let cascade = CascadeModel::from_parts(layers, k, input_dim, history, rejected, config)?;
    ModelFile::new(mgs, cascade, fingerprint)?.with_class_names(class_names)
}

/// Writes the model atomically: a temporary file in the target directory is
/// renamed over `path` only after all bytes are written.
pub fn save_model(model: &ModelFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model);
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
