//! Command-line front end.
//!
//! Exit codes: 0 success (and `--help`), 1 usage or configuration error,
//! 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::backbone::{
    cnn_extract, cnn_init, cnn_train, ingest_features, ssf_apply, ssf_train, write_features,
    CnnModel, CnnTrainConfig, SsfAdapter, SsfTrainConfig,
};
use crate::datahub::{
    center_crop, load_dataset, pgm, synth_dataset, Image, LabeledImage, Split, SynthKind,
};
use crate::harness::{read_report, report, run_scenario, HarnessError, MetricsReport, RunConfig};
use crate::rpca::{rpca_train, RpcaModel, RpcaOptimizer, RpcaTrainConfig};

pub const THREADS_ENV: &str = "PROTO_CIL_THREADS";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "proto-cil",
    version,
    about = "Exemplar-free class-incremental learning with random-projection prototypes"
)]
pub struct Cli {
    /// Worker threads for per-sample fan-out (falls back to PROTO_CIL_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset as PGM images plus a manifest.
    Synth(SynthArgs),
    /// Train the low-rank filter on some images and write the sparse parts of others.
    Denoise(DenoiseArgs),
    /// Train the CNN backbone on a manifest, or an SSF adapter on a feature file.
    TrainBackbone(TrainArgs),
    /// Extract CNN features from a manifest, or adapt a feature file with SSF.
    Extract(ExtractArgs),
    /// Run a whole class-incremental scenario from a JSON config.
    Run(RunArgs),
    /// Print the accuracy table of one or more report directories.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    Blobs,
    LowrankSpeckle,
}

impl From<KindArg> for SynthKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Blobs => SynthKind::Blobs,
            KindArg::LowrankSpeckle => SynthKind::LowrankSpeckle,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Number of classes (at least 2).
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    pub classes: u64,
    /// Training images per class.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub train: u64,
    /// Test images per class.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub test: u64,
    /// Image side in pixels.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub size: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    /// Glob of PGM images the filter is trained on.
    #[arg(long)]
    pub train_glob: String,
    /// Glob of PGM images to filter.
    #[arg(long)]
    pub apply_glob: String,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    pub rank: u64,
    /// Side of the centered square window (defaults to the smaller image side).
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.03)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub epsilon: f64,
    /// `sgd` or `adam`.
    #[arg(long, default_value = "sgd")]
    pub optimizer: RpcaOptimizer,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for sparse images, sidecars and the model.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BackboneKind {
    Cnn,
    Ssf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "cnn")]
    pub kind: BackboneKind,
    /// Manifest whose train split the CNN learns (cnn).
    #[arg(long, required_if_eq("kind", "cnn"))]
    pub manifest: Option<PathBuf>,
    /// Only these classes (comma separated); defaults to all.
    #[arg(long, value_delimiter = ',')]
    pub classes: Vec<String>,
    /// Base-task feature CSV (ssf).
    #[arg(long, required_if_eq("kind", "ssf"))]
    pub features: Option<PathBuf>,
    /// Low-rank filter checkpoint stem applied before the CNN (cnn).
    #[arg(long)]
    pub rpca_model: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub d_cnn: usize,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.0005)]
    pub weight_decay: f64,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint stem; `<out>.json` and `<out>.bin` are written.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// CNN checkpoint stem.
    #[arg(long, requires = "manifest", conflicts_with_all = ["ssf", "features"])]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitArg,
    /// Low-rank filter checkpoint stem applied before the CNN.
    #[arg(long, requires = "model")]
    pub rpca_model: Option<PathBuf>,
    /// SSF checkpoint stem.
    #[arg(long, requires = "features")]
    pub ssf: Option<PathBuf>,
    /// Feature CSV to adapt.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Output feature CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run config.
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `late` or `single`.
    #[arg(long)]
    pub fusion: Option<String>,
    /// Random projection dimension.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub portion: Option<f64>,
    #[arg(long)]
    pub freeze_lambda: Option<bool>,
    #[arg(long)]
    pub cnn: Option<bool>,
    #[arg(long)]
    pub ingested: Option<bool>,
    #[arg(long)]
    pub rpca: Option<bool>,
    #[arg(long)]
    pub ssf: Option<bool>,
    /// Any config field as `dotted.key=value` (value parsed as JSON, else as a string).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Report directories containing `metrics.json`.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn configure_threads(flag: Option<usize>) -> CliResult<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse().map_err(|_| {
                CliError::Usage(format!(
                    "{THREADS_ENV} must be a positive integer, got `{v}`"
                ))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Usage("thread count must be at least 1".into()));
        }
        // a pool that already exists (library use) is kept
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

pub fn execute(cli: Cli) -> CliResult<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Denoise(a) => cmd_denoise(&a),
        Command::TrainBackbone(a) => cmd_train(&a),
        Command::Extract(a) => cmd_extract(&a),
        Command::Run(a) => cmd_run(&a),
        Command::Eval(a) => cmd_eval(&a),
    }
}

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let ds = synth_dataset(
        a.kind.into(),
        a.classes as usize,
        a.train as usize,
        a.test as usize,
        a.size as usize,
        a.seed,
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;
    let manifest = crate::datahub::write_dataset(&ds, &a.out).map_err(runtime)?;
    println!(
        "wrote {} images, manifest {}",
        ds.samples.len(),
        manifest.display()
    );
    Ok(())
}

fn glob_paths(pattern: &str) -> CliResult<Vec<PathBuf>> {
    let paths = glob::glob(pattern)
        .map_err(|e| CliError::Usage(format!("bad glob `{pattern}`: {e}")))?
        .collect::<Result<Vec<_>, _>>()
        .map_err(runtime)?;
    if paths.is_empty() {
        return Err(CliError::Runtime(format!("no files match `{pattern}`")));
    }
    Ok(paths)
}

#[derive(Serialize)]
struct SparseSidecar {
    source: PathBuf,
    window: usize,
    /// Exported pixel p maps back to `offset + scale * p`.
    offset: f64,
    scale: f64,
    sparse_l1: f64,
    original_l1: f64,
}

#[derive(Serialize)]
struct DenoiseSummary {
    rank: usize,
    window: usize,
    trained_on: usize,
    applied_to: usize,
    final_loss: f64,
    /// Mean over filtered images of |X'|_1 / |X|_1 (images with |X|_1 = 0 count as 0).
    mean_sparse_ratio: f64,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_denoise(a: &DenoiseArgs) -> CliResult<()> {
    let train_paths = glob_paths(&a.train_glob)?;
    let apply_paths = glob_paths(&a.apply_glob)?;
    let read = |p: &PathBuf| pgm::read(p).map_err(runtime);
    let train: Vec<Image> = train_paths.iter().map(read).collect::<CliResult<_>>()?;
    let window = a.window.unwrap_or_else(|| {
        train
            .iter()
            .map(|i| i.height().min(i.width()))
            .min()
            .unwrap_or(0)
    });
    let crop = |img: &Image| -> CliResult<Vec<f64>> {
        center_crop(img, window)
            .map(Image::into_pixels)
            .map_err(runtime)
    };
    let columns: Vec<Vec<f64>> = train.iter().map(crop).collect::<CliResult<_>>()?;
    let cfg = RpcaTrainConfig {
        rank: a.rank as usize,
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        epsilon: a.epsilon,
        optimizer: a.optimizer,
    };
    let model = rpca_train(&columns, &cfg, a.seed).map_err(|e| match e {
        crate::rpca::RpcaError::InvalidRank { .. } | crate::rpca::RpcaError::InvalidArgument(_) => {
            CliError::Usage(e.to_string())
        }
        other => runtime(other),
    })?;

    fs::create_dir_all(&a.out)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", a.out.display())))?;
    model.save(&a.out.join("rpca")).map_err(runtime)?;
    let mut ratio_sum = 0.0;
    for path in &apply_paths {
        let parts = model.apply(&crop(&read(path)?)?).map_err(runtime)?;
        let (image, scale) = parts.sparse_export(window);
        let stem = path
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        pgm::write(&a.out.join(format!("{stem}_sparse.pgm")), &image, true).map_err(runtime)?;
        let sparse_l1 = parts.sparse.iter().map(|v| v.abs()).sum::<f64>();
        let original_l1 = parts.original.iter().map(|v| v.abs()).sum::<f64>();
        if original_l1 > 0.0 {
            ratio_sum += sparse_l1 / original_l1;
        }
        let sidecar = SparseSidecar {
            source: path.clone(),
            window,
            offset: scale.offset,
            scale: scale.scale,
            sparse_l1,
            original_l1,
        };
        write_json(&a.out.join(format!("{stem}_sparse.json")), &sidecar)?;
    }
    let summary = DenoiseSummary {
        rank: model.rank(),
        window,
        trained_on: train.len(),
        applied_to: apply_paths.len(),
        final_loss: model.loss_history.last().copied().unwrap_or(f64::NAN),
        mean_sparse_ratio: ratio_sum / apply_paths.len() as f64,
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    println!(
        "filtered {} images (window {window}), mean sparse ratio {:.4}",
        apply_paths.len(),
        summary.mean_sparse_ratio
    );
    Ok(())
}

fn filtered(samples: Vec<LabeledImage>, rpca: Option<&RpcaModel>) -> CliResult<Vec<LabeledImage>> {
    let Some(model) = rpca else {
        return Ok(samples);
    };
    let window = model
        .window_side()
        .ok_or_else(|| CliError::Usage("filter checkpoint is not square".into()))?;
    samples
        .into_iter()
        .map(|s| {
            let crop = center_crop(&s.image, window).map_err(runtime)?;
            let parts = model.apply(crop.pixels()).map_err(runtime)?;
            Ok(LabeledImage {
                image: parts.sparse_image(window),
                ..s
            })
        })
        .collect()
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    match a.kind {
        BackboneKind::Cnn => {
            let manifest = a.manifest.as_ref().expect("required by clap");
            let ds = load_dataset(manifest).map_err(runtime)?;
            let samples: Vec<LabeledImage> = ds
                .split(Split::Train)
                .filter(|s| a.classes.is_empty() || a.classes.contains(&s.label))
                .cloned()
                .collect();
            let rpca = a
                .rpca_model
                .as_ref()
                .map(|p| RpcaModel::load(p))
                .transpose()
                .map_err(runtime)?;
            let samples = filtered(samples, rpca.as_ref())?;
            let model =
                cnn_init(a.d_cnn, a.dropout, a.seed).map_err(|e| CliError::Usage(e.to_string()))?;
            let defaults = CnnTrainConfig::default();
            let cfg = CnnTrainConfig {
                epochs: a.epochs.unwrap_or(defaults.epochs),
                lr: a.lr.unwrap_or(defaults.lr),
                momentum: a.momentum,
                weight_decay: a.weight_decay,
                batch_size: a.batch_size.unwrap_or(defaults.batch_size),
                seed: a.seed,
            };
            let (model, history) = cnn_train(&model, &samples, &cfg).map_err(runtime)?;
            model.save(&a.out).map_err(runtime)?;
            write_json(&a.out.with_extension("history.json"), &history)?;
            println!(
                "trained on {} images: loss {:.4} -> {:.4}, train accuracy {:.2}%",
                samples.len(),
                history.initial_loss,
                history.final_loss,
                100.0 * history.final_accuracy
            );
        }
        BackboneKind::Ssf => {
            let features =
                ingest_features(a.features.as_ref().expect("required by clap")).map_err(runtime)?;
            let defaults = SsfTrainConfig::default();
            let cfg = SsfTrainConfig {
                epochs: a.epochs.unwrap_or(defaults.epochs),
                lr: a.lr.unwrap_or(defaults.lr),
                momentum: a.momentum,
                batch_size: a.batch_size.unwrap_or(defaults.batch_size),
                train_adapter: true,
                seed: a.seed,
            };
            let (adapter, _) = ssf_train(&features, &cfg).map_err(runtime)?;
            adapter.save(&a.out).map_err(runtime)?;
            println!(
                "trained a {}-dimensional adapter on {} rows",
                adapter.dim(),
                features.len()
            );
        }
    }
    Ok(())
}

fn cmd_extract(a: &ExtractArgs) -> CliResult<()> {
    let features = match (&a.model, &a.ssf) {
        (Some(model), None) => {
            let model = CnnModel::load(model).map_err(runtime)?;
            let ds =
                load_dataset(a.manifest.as_ref().expect("required by clap")).map_err(runtime)?;
            let samples: Vec<LabeledImage> = ds
                .samples
                .into_iter()
                .filter(|s| match a.split {
                    SplitArg::All => true,
                    SplitArg::Train => s.split == Split::Train,
                    SplitArg::Test => s.split == Split::Test,
                })
                .collect();
            let rpca = a
                .rpca_model
                .as_ref()
                .map(|p| RpcaModel::load(p))
                .transpose()
                .map_err(runtime)?;
            cnn_extract(&model, &filtered(samples, rpca.as_ref())?).map_err(runtime)?
        }
        (None, Some(ssf)) => {
            let adapter = SsfAdapter::load(ssf).map_err(runtime)?;
            let input =
                ingest_features(a.features.as_ref().expect("required by clap")).map_err(runtime)?;
            ssf_apply(&adapter, &input).map_err(runtime)?
        }
        _ => {
            return Err(CliError::Usage(
                "give either --model and --manifest, or --ssf and --features".into(),
            ))
        }
    };
    write_features(&a.out, &features).map_err(runtime)?;
    println!(
        "wrote {} x {} features to {}",
        features.len(),
        features.dim(),
        a.out.display()
    );
    Ok(())
}

fn run_overrides(a: &RunArgs) -> CliResult<Vec<(String, serde_json::Value)>> {
    use serde_json::json;
    let mut o: Vec<(String, serde_json::Value)> = Vec::new();
    for item in &a.set {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{item}`")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| json!(raw));
        o.push((key.to_string(), value));
    }
    let mut put = |k: &str, v: Option<serde_json::Value>| {
        if let Some(v) = v {
            o.push((k.to_string(), v));
        }
    };
    put("seed", a.seed.map(|v| json!(v)));
    put("fusion", a.fusion.as_ref().map(|v| json!(v)));
    put("projector.m", a.m.map(|v| json!(v)));
    put("scenario.portion", a.portion.map(|v| json!(v)));
    put("projector.freeze_lambda", a.freeze_lambda.map(|v| json!(v)));
    put("cnn.enabled", a.cnn.map(|v| json!(v)));
    put("ingested.enabled", a.ingested.map(|v| json!(v)));
    put("rpca.enabled", a.rpca.map(|v| json!(v)));
    put("ingested.ssf.enabled", a.ssf.map(|v| json!(v)));
    Ok(o)
}

fn cmd_run(a: &RunArgs) -> CliResult<()> {
    if let Some(f) = &a.fusion {
        f.parse::<crate::harness::FusionMode>()
            .map_err(CliError::Usage)?;
    }
    let overrides = run_overrides(a)?;
    let mut config =
        RunConfig::load_with_overrides(&a.config, &overrides).map_err(|e| match e {
            HarnessError::Io { path, source } => {
                CliError::Usage(format!("{}: {source}", path.display()))
            }
            other => CliError::Usage(other.to_string()),
        })?;
    if let Some(out) = &a.out {
        config.output_dir = Some(out.clone());
    }
    config
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let dir = config
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs/latest"));
    match run_scenario(&config) {
        Ok(out) => {
            report(&out.report, &config, Some(&out.timings), &dir).map_err(runtime)?;
            print!(
                "{}",
                format_table(&[(dir.display().to_string(), out.report)])
            );
            Ok(())
        }
        Err(failure) => {
            report(&failure.report, &config, Some(&failure.timings), &dir).map_err(runtime)?;
            Err(CliError::Runtime(format!(
                "{} (partial report with {} task(s) in {})",
                failure.error,
                failure.report.tasks.len(),
                dir.display()
            )))
        }
    }
}

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let rows = a
        .reports
        .iter()
        .map(|dir| {
            Ok((
                dir.display().to_string(),
                read_report(dir).map_err(runtime)?,
            ))
        })
        .collect::<CliResult<Vec<_>>>()?;
    print!("{}", format_table(&rows));
    Ok(())
}

/// One row per report: per-task accuracies, then the average and the drop.
pub fn format_table(rows: &[(String, MetricsReport)]) -> String {
    let tasks = rows
        .iter()
        .map(|(_, r)| r.accuracies.len())
        .max()
        .unwrap_or(0);
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<name_w$}", "report");
    for t in 0..tasks {
        out.push_str(&format!(" {:>7}", format!("A{t}")));
    }
    out.push_str(&format!(" {:>7} {:>7}\n", "Avg", "PD"));
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
    for (name, r) in rows {
        out.push_str(&format!("{name:<name_w$}"));
        for t in 0..tasks {
            out.push_str(&format!(" {:>7}", cell(r.accuracies.get(t).copied())));
        }
        out.push_str(&format!(" {:>7} {:>7}", cell(r.avg_acc), cell(r.perf_drop)));
        if !r.completed {
            out.push_str("  (incomplete)");
        }
        out.push('\n');
    }
    out
}
