//! The `kernsim` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::diagnostics;
use crate::error::{Error, Result};
use crate::io::{self, DiagnosticsReport, Dtype, ReportFormat, ScoreReport, ScoreRow};
use crate::krr::{self, Alpha, KrrModel};
use crate::representation::{FeatureGradientBatch, Variant};
use crate::similarity::{compare_summaries, Index};
use crate::sketch::{
    SketchConfig, SketchMeta, SketchState, SketchSummary, DEFAULT_BUCKETS, MPSI_MAX_ENTRIES,
};
use crate::testbed::{self, MlpNetwork, SyntheticTaskSpec, TrainConfig};
use crate::verify;

/// Environment variable capping the number of comparison threads.
pub const THREADS_ENV: &str = "KERNSIM_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "kernsim",
    version,
    about = "Sketched feature×gradient kernels and CKA/NBS model comparison"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Stream NNSH shards into a KSUM summary.
    Sketch(SketchArgs),
    /// Generate a synthetic task, train an MLP, and write NNSH shards per layer.
    Testbed(TestbedArgs),
    /// Compare two summaries.
    Compare(CompareArgs),
    /// Compare every pair of summaries in a directory.
    Heatmap(HeatmapArgs),
    /// Mean-embedding diagnostics of a summary.
    Kme(KmeArgs),
    /// Kernel ridge regression on a summary; predicts labels for test shards.
    Krr(KrrArgs),
    /// Run a randomized property suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DtypeArg {
    F64,
    F32,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Suite {
    Alt,
    SketchBounds,
    Invariance,
}

#[derive(Debug, Args)]
struct SketchArgs {
    #[arg(long, num_args = 1.., required = true)]
    input: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_BUCKETS)]
    buckets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    blocks: usize,
    /// Keep the exact Σ g fᵀ accumulator needed by `kme`.
    #[arg(long)]
    track_mpsi: bool,
    /// Smoothing exponent recorded in the summary metadata.
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TestbedArgs {
    /// `family[:key=value,...]`, e.g. `blobs-fine:classes=10,samples=2000,seed=1`.
    #[arg(long)]
    task: String,
    /// Seeds network initialization and mini-batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    hidden: Vec<usize>,
    /// Layers to export (1-based); all layers by default.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 256)]
    shard_size: usize,
    /// Extra samples drawn from the same task and exported under `test/`.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
    #[arg(long, value_enum, default_value = "f64")]
    dtype: DtypeArg,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value = "combined")]
    variant: Variant,
    #[arg(long, default_value = "cka")]
    index: Index,
    #[arg(long, value_enum, default_value = "off")]
    centering: OnOff,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct HeatmapArgs {
    /// Directory of `.ksum` files.
    #[arg(long)]
    models: PathBuf,
    #[arg(long, default_value = "combined")]
    variant: Variant,
    #[arg(long, default_value = "cka")]
    index: Index,
    #[arg(long, value_enum, default_value = "off")]
    centering: OnOff,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct KmeArgs {
    #[arg(long)]
    a: PathBuf,
    /// Recorded in the output for downstream depth scaling.
    #[arg(long)]
    num_layers: Option<u32>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct KrrArgs {
    /// Summary of the training samples.
    #[arg(long)]
    train: PathBuf,
    /// Training labels, one per line, in sample-index order.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    test: Vec<PathBuf>,
    /// Test labels; when given, accuracy is reported on stderr.
    #[arg(long)]
    test_labels: Option<PathBuf>,
    /// `auto` or a non-negative number.
    #[arg(long, default_value = "auto")]
    alpha: String,
    #[arg(long, default_value = "feature")]
    variant: Variant,
    /// Number of classes; defaults to the largest training label + 1.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    suite: Suite,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Sketch(a) => sketch(a),
        Command::Testbed(a) => testbed_cmd(a),
        Command::Compare(a) => compare(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Kme(a) => kme(a),
        Command::Krr(a) => krr_cmd(a),
        Command::Verify(a) => verify_cmd(a),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        other => other,
    }
}

fn read_summary(path: &Path) -> Result<SketchSummary> {
    io::read_ksum(path).map_err(|e| with_path(e, path))
}

fn load_shards(paths: &[PathBuf]) -> Result<Vec<FeatureGradientBatch>> {
    let mut shards = Vec::with_capacity(paths.len());
    for p in paths {
        let (batch, _) = io::read_nnsh(p).map_err(|e| with_path(e, p))?;
        shards.push(batch);
    }
    if let Some(first) = shards.first() {
        if let Some(other) = shards.iter().find(|s| s.layer_id() != first.layer_id()) {
            return Err(Error::InvalidInput(format!(
                "shards mix layers {} and {}",
                first.layer_id(),
                other.layer_id()
            )));
        }
    }
    Ok(shards)
}

fn sketch(a: SketchArgs) -> Result<i32> {
    let shards = load_shards(&a.input)?;
    let first = &shards[0];
    let config = SketchConfig::new(a.buckets, a.seed, a.blocks)?;
    let (df, dg) = (first.feature_dim(), first.gradient_dim());
    if a.track_mpsi && df * dg > MPSI_MAX_ENTRIES {
        return Err(Error::Config(format!(
            "mean-embedding accumulator would hold {} entries (limit {MPSI_MAX_ENTRIES})",
            df * dg
        )));
    }
    let meta = SketchMeta {
        layer_id: first.layer_id(),
        beta: a.beta,
    };
    let mut state = SketchState::new(config, df, dg, a.track_mpsi)?.with_meta(meta);
    for s in &shards {
        state.absorb(s)?;
    }
    let summary = state.finalize()?;
    io::write_ksum(&a.out, &summary)?;
    eprintln!(
        "sketched {} samples of layer {} into {} buckets",
        summary.samples(),
        meta.layer_id,
        summary.buckets()
    );
    Ok(0)
}

fn testbed_cmd(a: TestbedArgs) -> Result<i32> {
    let mut spec = SyntheticTaskSpec::parse(&a.task)?;
    let train_n = spec.samples;
    spec.samples += a.holdout;
    let all = testbed::generate_task(&spec)?;
    let train_idx: Vec<usize> = (0..train_n).collect();
    let test_idx: Vec<usize> = (train_n..spec.samples).collect();
    let data = all.select(&train_idx);

    let mut dims = vec![spec.input_dim];
    dims.extend(&a.hidden);
    dims.push(spec.classes);
    let net = MlpNetwork::new(&dims, a.seed)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        decay_interval: (2 * a.epochs / 5).max(1),
        batch_size: a.batch_size,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let report = testbed::train(net, &data, &cfg)?;
    let net = report.network;
    let layers: Vec<usize> = if a.layers.is_empty() {
        (1..=net.num_layers()).collect()
    } else {
        a.layers.clone()
    };
    let dtype = match a.dtype {
        DtypeArg::F64 => Dtype::F64,
        DtypeArg::F32 => Dtype::F32,
    };
    let write_split = |dir: &Path, split: &testbed::Dataset| -> Result<()> {
        fs::create_dir_all(dir)?;
        let shards = testbed::extract_shards(&net, split, &layers, a.beta, a.shard_size)?;
        for (layer, list) in layers.iter().zip(&shards) {
            for (k, batch) in list.iter().enumerate() {
                io::write_nnsh(
                    dir.join(format!("layer{layer}_shard{k:04}.nnsh")),
                    batch,
                    dtype,
                )?;
            }
        }
        io::write_labels(dir.join("labels.txt"), split.labels())
    };
    write_split(&a.out_dir, &data)?;
    if !test_idx.is_empty() {
        write_split(&a.out_dir.join("test"), &all.select(&test_idx))?;
    }
    eprintln!(
        "trained {:?} on {} ({} samples): final loss {:.4}, train accuracy {:.4}",
        net.dims(),
        spec.family,
        train_n,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        testbed::accuracy(&net, &data)?
    );
    Ok(0)
}

fn score_row(
    a: &SketchSummary,
    b: &SketchSummary,
    variant: Variant,
    index: Index,
    centering: bool,
) -> Result<ScoreRow> {
    let s = compare_summaries(a, b, variant, index, centering)?;
    if s.heuristic {
        eprintln!(
            "note: layers {} and {} were sketched with different hash functions or sample counts; the score is heuristic",
            a.meta().layer_id,
            b.meta().layer_id
        );
    }
    Ok(ScoreRow::from_score(
        a.meta().layer_id,
        b.meta().layer_id,
        variant,
        &s,
    ))
}

fn compare(a: CompareArgs) -> Result<i32> {
    let sa = read_summary(&a.a)?;
    let sb = read_summary(&a.b)?;
    let mut report = ScoreReport::new();
    report.push(score_row(
        &sa,
        &sb,
        a.variant,
        a.index,
        matches!(a.centering, OnOff::On),
    )?)?;
    emit(a.out.as_deref(), &report.render(a.format.into())?)?;
    Ok(0)
}

fn thread_limit() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| {
                Error::InvalidInput(format!(
                    "{THREADS_ENV} must be a positive integer, got `{v}`"
                ))
            }),
        Err(_) => Ok(None),
    }
}

fn heatmap(a: HeatmapArgs) -> Result<i32> {
    let mut paths: Vec<PathBuf> = fs::read_dir(&a.models)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ksum"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no .ksum files in {}",
            a.models.display()
        )));
    }
    let summaries = paths
        .iter()
        .map(|p| read_summary(p))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(usize, usize)> = (0..summaries.len())
        .flat_map(|i| (0..summaries.len()).map(move |j| (i, j)))
        .collect();
    let centering = matches!(a.centering, OnOff::On);
    let work = || {
        pairs
            .par_iter()
            .map(|&(i, j)| {
                compare_summaries(&summaries[i], &summaries[j], a.variant, a.index, centering).map(
                    |s| {
                        ScoreRow::from_score(
                            summaries[i].meta().layer_id,
                            summaries[j].meta().layer_id,
                            a.variant,
                            &s,
                        )
                    },
                )
            })
            .collect::<Result<Vec<_>>>()
    };
    let rows = match thread_limit()? {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidInput(e.to_string()))?
            .install(work)?,
        None => work()?,
    };
    let mut report = ScoreReport::new();
    for row in rows {
        report.push(row)?;
    }
    emit(a.out.as_deref(), &report.render(a.format.into())?)?;
    Ok(0)
}

fn kme(a: KmeArgs) -> Result<i32> {
    let s = read_summary(&a.a)?;
    let mut d = diagnostics::diagnostics_for(&s, None)?;
    if let Some(l) = a.num_layers {
        d = d.with_num_layers(l);
    }
    let report = DiagnosticsReport { rows: vec![d] };
    emit(a.out.as_deref(), &report.render(a.format.into())?)?;
    Ok(0)
}

fn krr_cmd(a: KrrArgs) -> Result<i32> {
    let summary = read_summary(&a.train)?;
    let labels = io::read_labels(&a.labels).map_err(|e| with_path(e, &a.labels))?;
    let classes = match a.classes {
        Some(c) => c,
        None => labels.iter().max().map_or(0, |m| m + 1),
    };
    let alpha = match a.alpha.as_str() {
        "auto" => Alpha::default(),
        v => Alpha::Fixed(v.parse().map_err(|_| {
            Error::InvalidInput(format!("--alpha must be `auto` or a number, got `{v}`"))
        })?),
    };
    let targets = krr::sketch_targets(&labels, classes, summary.config())?;
    let model = KrrModel::fit(&summary, &targets, alpha, a.variant)?;
    let mut shards = load_shards(&a.test)?;
    shards.sort_by_key(|s| s.first_index());
    let mut out = String::from("sample,label\n");
    let mut predicted = Vec::new();
    for shard in &shards {
        let k = krr::kernel_vectors(&summary, shard, a.variant)?;
        for (j, p) in model.predict_all(&k)?.into_iter().enumerate() {
            out.push_str(&format!("{},{}\n", shard.first_index() + j as u64, p.label));
            predicted.push(p);
        }
    }
    emit(a.out.as_deref(), &out)?;
    eprintln!("alpha {:e}", model.alpha());
    if let Some(path) = &a.test_labels {
        let truth = io::read_labels(path).map_err(|e| with_path(e, path))?;
        if truth.len() != predicted.len() {
            return Err(Error::dim(format!(
                "{} test labels for {} test samples",
                truth.len(),
                predicted.len()
            )));
        }
        eprintln!(
            "accuracy {:.4} (majority baseline {:.4})",
            krr::accuracy(&predicted, &truth),
            krr::majority_baseline(&truth)
        );
    }
    Ok(0)
}

fn verify_cmd(a: VerifyArgs) -> Result<i32> {
    let report = match a.suite {
        Suite::Alt => verify::alt_suite(a.trials, a.seed)?,
        Suite::SketchBounds => verify::sketch_bound_suite(a.trials, a.seed)?,
        Suite::Invariance => verify::invariance_suite(a.trials, a.seed)?,
    };
    println!("{report}");
    Ok(if report.passed { 0 } else { 4 })
}
