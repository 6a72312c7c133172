use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ftdrf::cascade::fit_cascade_on_split;
use ftdrf::dataset::{load_csv, load_idx, stratified_split, wiggle_augment};
use ftdrf::mgs::{fit_mgs, transform_mgs};
use ftdrf::persist::{load_model, save_model, Fingerprint, ModelFile, FORMAT_VERSION};
use ftdrf::{
    AccuracyReport, CascadeConfig, Criterion, Dataset, GainMode, LayerParams, MgsConfig, SplitPair,
    TreeParams,
};

/// Train, evaluate and inspect forward-thinking deep random forests.
#[derive(Parser, Debug)]
#[command(name = "ftdrf", version)]
struct Cli {
    /// Worker threads for tree fitting (default: all cores). Results do not
    /// depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a cascade (optionally with augmentation or scanning) and save it.
    Train(TrainArgs),
    /// Report accuracy and the confusion matrix of a saved model.
    Eval(EvalArgs),
    /// Write per-sample labels and class probabilities as CSV.
    Predict(PredictArgs),
    /// Print model metadata.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// IDX image file (MNIST layout).
    #[arg(long, requires = "labels", conflicts_with = "csv")]
    images: Option<PathBuf>,
    /// IDX label file matching --images.
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
    /// Headered CSV file; all columns except --label-column are features.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, default_value = "label")]
    label_column: String,
    /// Image shape ROWSxCOLS for CSV data (needed for --wiggle and --mgs).
    #[arg(long, value_parser = parse_shape)]
    image_shape: Option<(usize, usize)>,
    /// Use only the first N samples.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum CriterionArg {
    Entropy,
    Gini,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum GainModeArg {
    Relative,
    RemainingError,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Text,
    Rows,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output model file.
    #[arg(long, short)]
    out: PathBuf,

    #[arg(long, default_value_t = 2000)]
    trees_per_layer: usize,
    /// Probability that a tree is extra-random.
    #[arg(long, default_value_t = 0.5)]
    type_mix: f64,
    #[arg(long, value_enum, default_value_t = CriterionArg::Entropy)]
    criterion: CriterionArg,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long, default_value_t = 2)]
    min_samples_split: usize,
    #[arg(long, default_value_t = 1)]
    min_samples_leaf: usize,
    /// Features tried per node (default: round(sqrt(d))).
    #[arg(long)]
    mtry: Option<usize>,

    #[arg(long, default_value_t = 0.2)]
    holdout: f64,
    #[arg(long, default_value_t = 0.01)]
    gain_threshold: f64,
    #[arg(long, value_enum, default_value_t = GainModeArg::Relative)]
    gain_mode: GainModeArg,
    #[arg(long, default_value_t = 10)]
    max_layers: usize,
    #[arg(long, default_value_t = 1)]
    min_layers: usize,
    /// Retrain the accepted layers on train + holdout once depth is fixed.
    #[arg(long)]
    refit_full: bool,

    /// Add four one-pixel diagonal shifts of every training image.
    #[arg(long)]
    wiggle: bool,
    /// Wiggle before the holdout split (shifted copies of holdout images then
    /// reach training).
    #[arg(long, requires = "wiggle")]
    augment_before_split: bool,
    /// Multi-grained scanning in front of the cascade.
    #[arg(long)]
    mgs: bool,
    /// Permit --wiggle together with --mgs.
    #[arg(long)]
    allow_both: bool,
    #[arg(long, value_delimiter = ',', default_value = "7,9,14")]
    mgs_windows: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    mgs_stride: usize,
    #[arg(long, default_value_t = 30)]
    mgs_trees: usize,
    /// Fraction of training images used to build the window datasets.
    #[arg(long, default_value_t = 1.0)]
    mgs_sample_fraction: f64,

    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    report: ReportFormat,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, short)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    report: ReportFormat,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long, short)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Output CSV (default: standard output).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    report: ReportFormat,
}

fn parse_shape(s: &str) -> Result<(usize, usize), String> {
    let (r, c) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected ROWSxCOLS, got `{s}`"))?;
    let r = r
        .trim()
        .parse()
        .map_err(|_| format!("bad row count `{r}`"))?;
    let c = c
        .trim()
        .parse()
        .map_err(|_| format!("bad column count `{c}`"))?;
    Ok((r, c))
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Model(#[from] ftdrf::Error),
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {path}: {source}")]
    Output { path: PathBuf, source: io::Error },
}

type CliResult<T> = Result<T, CliError>;

fn load_data(args: &DataArgs) -> CliResult<Dataset> {
    let mut data = match (&args.images, &args.labels, &args.csv) {
        (Some(images), Some(labels), None) => load_idx(images, labels)?,
        (None, None, Some(csv)) => load_csv(csv, &args.label_column)?,
        _ => {
            return Err(CliError::Usage(
                "give either --images and --labels, or --csv".into(),
            ))
        }
    };
    if let Some((r, c)) = args.image_shape {
        data = data.with_image_shape(r, c)?;
    }
    if let Some(n) = args.limit {
        data = data.head(n.min(data.n_samples()));
    }
    Ok(data)
}

fn tree_params(base: TreeParams, a: &TrainArgs) -> TreeParams {
    TreeParams {
        criterion: match a.criterion {
            CriterionArg::Entropy => Criterion::Entropy,
            CriterionArg::Gini => Criterion::Gini,
        },
        max_depth: a.max_depth,
        min_samples_split: a.min_samples_split,
        min_samples_leaf: a.min_samples_leaf,
        mtry: a.mtry,
        ..base
    }
}

fn cascade_config(a: &TrainArgs) -> CascadeConfig {
    CascadeConfig {
        layer: LayerParams {
            n_trees: a.trees_per_layer,
            type_mix_p: a.type_mix,
            standard: tree_params(TreeParams::standard(), a),
            extra: tree_params(TreeParams::extra_random(), a),
            seed: a.seed,
        },
        holdout_fraction: a.holdout,
        gain_threshold: a.gain_threshold,
        gain_mode: match a.gain_mode {
            GainModeArg::Relative => GainMode::RelativeAccuracy,
            GainModeArg::RemainingError => GainMode::RemainingError,
        },
        max_layers: a.max_layers,
        min_layers: a.min_layers,
        seed: a.seed,
        refit_full: a.refit_full,
    }
}

fn mgs_config(a: &TrainArgs) -> MgsConfig {
    let criterion_only = |base: TreeParams| TreeParams {
        criterion: match a.criterion {
            CriterionArg::Entropy => Criterion::Entropy,
            CriterionArg::Gini => Criterion::Gini,
        },
        ..base
    };
    MgsConfig {
        window_sizes: a.mgs_windows.clone(),
        stride: a.mgs_stride,
        trees_per_forest: a.mgs_trees,
        standard: criterion_only(TreeParams::standard()),
        extra: criterion_only(TreeParams::extra_random()),
        sample_fraction: a.mgs_sample_fraction,
        seed: a.seed,
    }
}

fn fmt_gain(g: Option<f64>) -> String {
    match g {
        Some(g) => format!("{g:.6}"),
        None => "-".into(),
    }
}

fn train(a: &TrainArgs, out: &mut impl Write) -> CliResult<()> {
    if a.wiggle && a.mgs && !a.allow_both {
        return Err(CliError::Usage(
            "--wiggle and --mgs together need --allow-both".into(),
        ));
    }
    let config = cascade_config(a);
    config.validate()?;
    let data = load_data(&a.data)?;
    let fingerprint = Fingerprint::of(&data);
    let class_names = data.class_names().map(<[String]>::to_vec);

    let split = if a.wiggle && a.augment_before_split {
        stratified_split(&wiggle_augment(&data)?, a.holdout, a.seed)?
    } else {
        let mut split = stratified_split(&data, a.holdout, a.seed)?;
        if a.wiggle {
            split.train = wiggle_augment(&split.train)?;
        }
        split
    };

    let (mgs, split) = if a.mgs {
        let model = fit_mgs(&split.train, &mgs_config(a))?;
        let scanned = SplitPair {
            train: transform_mgs(&model, &split.train)?,
            holdout: transform_mgs(&model, &split.holdout)?,
            ..split
        };
        (Some(model), scanned)
    } else {
        (None, split)
    };

    let cascade = fit_cascade_on_split(&split, &config)?;
    let model = ModelFile::new(mgs, cascade, fingerprint)?.with_class_names(class_names)?;
    save_model(&model, &a.out)?;

    let c = &model.cascade;
    let mut s = String::new();
    match a.report {
        ReportFormat::Text => {
            writeln!(
                s,
                "train_samples {}  holdout_samples {}",
                split.train.n_samples(),
                split.holdout.n_samples()
            )
            .unwrap();
            writeln!(
                s,
                "{:>5}  {:>16}  {:>13}  {:>8}  {:>5}",
                "layer", "holdout_accuracy", "relative_gain", "standard", "extra"
            )
            .unwrap();
            for r in c.history() {
                writeln!(
                    s,
                    "{:>5}  {:>16.6}  {:>13}  {:>8}  {:>5}",
                    r.layer,
                    r.holdout_accuracy,
                    fmt_gain(r.relative_gain),
                    r.n_standard,
                    r.n_extra
                )
                .unwrap();
            }
            if let Some(r) = c.rejected() {
                writeln!(
                    s,
                    "layer {} discarded: holdout accuracy {:.6}, relative gain {}",
                    r.layer,
                    r.holdout_accuracy,
                    fmt_gain(r.relative_gain)
                )
                .unwrap();
            }
            writeln!(s, "saved {} layer(s) to {}", c.n_layers(), a.out.display()).unwrap();
        }
        ReportFormat::Rows => {
            writeln!(s, "train_samples={}", split.train.n_samples()).unwrap();
            writeln!(s, "holdout_samples={}", split.holdout.n_samples()).unwrap();
            for r in c.history() {
                writeln!(
                    s,
                    "layer.{}.holdout_accuracy={}",
                    r.layer, r.holdout_accuracy
                )
                .unwrap();
                writeln!(
                    s,
                    "layer.{}.relative_gain={}",
                    r.layer,
                    fmt_gain(r.relative_gain)
                )
                .unwrap();
            }
            if let Some(r) = c.rejected() {
                writeln!(s, "rejected.layer={}", r.layer).unwrap();
                writeln!(s, "rejected.holdout_accuracy={}", r.holdout_accuracy).unwrap();
                writeln!(s, "rejected.relative_gain={}", fmt_gain(r.relative_gain)).unwrap();
            }
            writeln!(s, "layers={}", c.n_layers()).unwrap();
        }
    }
    write_stdout(out, &s)
}

fn write_stdout(out: &mut impl Write, s: &str) -> CliResult<()> {
    out.write_all(s.as_bytes()).map_err(|e| CliError::Output {
        path: PathBuf::from("<stdout>"),
        source: e,
    })
}

fn load_aligned(model_path: &Path, data: &DataArgs) -> CliResult<(ModelFile, Dataset)> {
    let model = load_model(model_path)?;
    let raw = load_data(data)?;
    let aligned = model.align_dataset(&raw)?;
    Ok((model, aligned))
}

fn format_report(report: &AccuracyReport, format: ReportFormat) -> String {
    let mut s = String::new();
    match format {
        ReportFormat::Text => {
            writeln!(
                s,
                "accuracy {:.6} ({}/{})",
                report.accuracy,
                report.n_correct(),
                report.n_samples
            )
            .unwrap();
            writeln!(s, "confusion matrix (rows: true class, columns: predicted)").unwrap();
            let width = report.n_samples.to_string().len().max(3);
            write!(s, "{:>5}", "").unwrap();
            for j in 0..report.confusion.len() {
                write!(s, " {j:>width$}").unwrap();
            }
            writeln!(s).unwrap();
            for (i, row) in report.confusion.iter().enumerate() {
                write!(s, "{i:>5}").unwrap();
                for v in row {
                    write!(s, " {v:>width$}").unwrap();
                }
                writeln!(s).unwrap();
            }
        }
        ReportFormat::Rows => {
            writeln!(s, "n_samples={}", report.n_samples).unwrap();
            writeln!(s, "n_correct={}", report.n_correct()).unwrap();
            writeln!(s, "accuracy={}", report.accuracy).unwrap();
            for (i, acc) in report.per_class_accuracy.iter().enumerate() {
                if let Some(acc) = acc {
                    writeln!(s, "class.{i}.accuracy={acc}").unwrap();
                }
            }
            for (i, row) in report.confusion.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(usize::to_string).collect();
                writeln!(s, "confusion.{i}={}", cells.join(",")).unwrap();
            }
        }
    }
    s
}

fn eval(a: &EvalArgs, out: &mut impl Write) -> CliResult<()> {
    let (model, data) = load_aligned(&a.model, &a.data)?;
    let report = model.evaluate(&data)?;
    write_stdout(out, &format_report(&report, a.report))
}

fn predict(a: &PredictArgs, out: &mut impl Write) -> CliResult<()> {
    let (model, data) = load_aligned(&a.model, &a.data)?;
    let p = model.predict(&data)?;
    let k = model.n_classes();
    let mut s = String::from("id,label");
    for c in 0..k {
        write!(s, ",p{c}").unwrap();
    }
    s.push('\n');
    for (i, (row, &label)) in p.probabilities.iter_rows().zip(&p.labels).enumerate() {
        let name = match &model.class_names {
            Some(names) => names[label].clone(),
            None => label.to_string(),
        };
        write!(s, "{i},{name}").unwrap();
        for v in row {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    match &a.out {
        Some(path) => fs::write(path, s).map_err(|e| CliError::Output {
            path: path.clone(),
            source: e,
        }),
        None => write_stdout(out, &s),
    }
}

fn inspect(a: &InspectArgs, out: &mut impl Write) -> CliResult<()> {
    let m = load_model(&a.model)?;
    let c = &m.cascade;
    let cfg = c.config();
    let mut rows: Vec<(String, String)> = vec![
        ("format_version".into(), FORMAT_VERSION.to_string()),
        ("classes".into(), c.n_classes().to_string()),
        ("input_dim".into(), m.raw_input_dim().to_string()),
        ("cascade_input_dim".into(), c.input_dim().to_string()),
        ("layers".into(), c.n_layers().to_string()),
        ("trees_per_layer".into(), cfg.layer.n_trees.to_string()),
        ("type_mix".into(), cfg.layer.type_mix_p.to_string()),
        ("holdout_fraction".into(), cfg.holdout_fraction.to_string()),
        ("gain_threshold".into(), cfg.gain_threshold.to_string()),
        ("gain_mode".into(), format!("{:?}", cfg.gain_mode)),
        ("seed".into(), cfg.seed.to_string()),
        ("train_samples".into(), m.fingerprint.n_samples.to_string()),
        ("train_sha256".into(), m.fingerprint.hash_hex()),
    ];
    if let Some(names) = &m.class_names {
        rows.push(("class_names".into(), names.join(",")));
    }
    if let Some(mgs) = &m.mgs {
        let sizes: Vec<String> = mgs
            .config()
            .window_sizes
            .iter()
            .map(usize::to_string)
            .collect();
        rows.push(("mgs.windows".into(), sizes.join(",")));
        rows.push(("mgs.stride".into(), mgs.config().stride.to_string()));
        rows.push((
            "mgs.trees_per_forest".into(),
            mgs.config().trees_per_forest.to_string(),
        ));
        rows.push(("mgs.output_dim".into(), mgs.output_dim().to_string()));
    }
    for (i, layer) in c.layers().iter().enumerate() {
        let l = i + 1;
        let (std, extra) = layer.kind_counts();
        let nodes: usize = layer.trees().iter().map(|t| t.nodes().len()).sum();
        rows.push((format!("layer.{l}.trees"), layer.n_trees().to_string()));
        rows.push((format!("layer.{l}.standard"), std.to_string()));
        rows.push((format!("layer.{l}.extra"), extra.to_string()));
        rows.push((
            format!("layer.{l}.input_dim"),
            layer.input_dim().to_string(),
        ));
        rows.push((
            format!("layer.{l}.output_dim"),
            layer.output_dim().to_string(),
        ));
        rows.push((format!("layer.{l}.nodes"), nodes.to_string()));
    }
    for r in c.history() {
        rows.push((
            format!("history.{}.holdout_accuracy", r.layer),
            r.holdout_accuracy.to_string(),
        ));
        rows.push((
            format!("history.{}.relative_gain", r.layer),
            fmt_gain(r.relative_gain),
        ));
    }
    if let Some(r) = c.rejected() {
        rows.push(("rejected.layer".into(), r.layer.to_string()));
        rows.push((
            "rejected.holdout_accuracy".into(),
            r.holdout_accuracy.to_string(),
        ));
    }

    let mut s = String::new();
    match a.report {
        ReportFormat::Text => {
            let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
            for (k, v) in rows {
                writeln!(s, "{k:<width$}  {v}").unwrap();
            }
        }
        ReportFormat::Rows => {
            for (k, v) in rows {
                writeln!(s, "{k}={v}").unwrap();
            }
        }
    }
    write_stdout(out, &s)
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot set up {t} threads: {e}")))?;
    }
    let stdout = io::stdout();
    let mut out = stdout.lock();
    match &cli.command {
        Command::Train(a) => train(a, &mut out),
        Command::Eval(a) => eval(a, &mut out),
        Command::Predict(a) => predict(a, &mut out),
        Command::Inspect(a) => inspect(a, &mut out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
