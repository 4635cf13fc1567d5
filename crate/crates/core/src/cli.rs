//! The `segprune` command line.
//!
//! Every command writes its reports into `--out` along with `options.json`,
//! the fully resolved options; `segprune --replay <options.json>` reruns it.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{bench, BenchReport};
use crate::footprint::{footprint, FootprintReport};
use crate::graph::{GraphDef, ModelGraph, TensorShape};
use crate::init::init_model;
use crate::io;
use crate::lint::{lint_with, LintConfig};
use crate::mask::MaskSet;
use crate::metrics::{evaluate, generate, Dataset, EvalReport, SynthKind, SynthSpec};
use crate::pipeline::{prune, prune_and_finetune, PruneMethod, PruneReport};
use crate::prune::filter::MergeRule;
use crate::prune::weight::{sparsity_diagram, sparsity_sequence, Scope};
use crate::train::loss::LossKind;
use crate::train::schedule::{peak_lr_for_run, LrSchedule};
use crate::train::{steps_per_epoch, TrainConfig, TrainHistory, Trainer};
use crate::zoo;

pub const OPTIONS_SCHEMA: &str = "segprune.options/v1";

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_LINT: i32 = 4;

/// Maps a library error onto the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } => EXIT_DIVERGED,
        Error::InvalidArgument(_)
        | Error::MalformedManifest { .. }
        | Error::InvalidGraph(_)
        | Error::DanglingInput { .. }
        | Error::UnknownKind { .. }
        | Error::Json(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

/// Spatial size written `HxW` (or a single number for a square).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Size {
    pub h: usize,
    pub w: usize,
}

impl FromStr for Size {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("expected HxW, got `{s}`"));
        let mut parts = s.split(['x', 'X']);
        let h: usize = parts.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        let w: usize = match parts.next() {
            Some(p) => p.trim().parse().map_err(|_| bad())?,
            None => h,
        };
        if parts.next().is_some() || h == 0 || w == 0 {
            return Err(bad());
        }
        Ok(Size { h, w })
    }
}

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.h, self.w)
    }
}

#[derive(Parser, Debug)]
#[command(name = "segprune", version, about = "Prune, rewrite, lint, train and benchmark CNN segmentation models")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    /// Rerun the command recorded in an `options.json`.
    #[arg(long, global = true)]
    pub replay: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalOpts {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Run directory (defaults to `runs/<command>`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Accepted for compatibility; execution is single-threaded.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Subcommand, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Instantiate an architecture with seeded weights and report its footprint.
    Build(BuildOpts),
    /// Generate a synthetic segmentation dataset.
    Synth(SynthOpts),
    /// Train a model.
    Train(TrainOpts),
    /// Prune weights (masks) or filters (structural rewrite).
    Prune(PruneOpts),
    /// Train one epoch, prune, and fine-tune the pruned model.
    Finetune(FinetuneOpts),
    /// Score a model on a dataset, optionally under input noise.
    Eval(EvalOpts),
    /// Measure single-image CPU latency.
    Bench(BenchOpts),
    /// Check an architecture for atrous misconfiguration.
    Lint(LintOpts),
    /// Aggregate a directory of runs into tables and rasters.
    Report(ReportOpts),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Build(_) => "build",
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Prune(_) => "prune",
            Command::Finetune(_) => "finetune",
            Command::Eval(_) => "eval",
            Command::Bench(_) => "bench",
            Command::Lint(_) => "lint",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildOpts {
    /// Bundled architecture name or path to an architecture manifest.
    #[arg(long)]
    pub arch: String,
    /// Input size for the MAC count.
    #[arg(long, default_value = "112x112")]
    pub input: Size,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthOpts {
    #[arg(long, default_value = "blob")]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0.25)]
    pub speckle: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    OneCycle,
    Exponential,
    Constant,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimOpts {
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value = "bce-soft-dice")]
    pub loss: LossKind,
    #[arg(long, value_enum, default_value = "one-cycle")]
    pub schedule: ScheduleKind,
    /// Peak LR (one-cycle) or initial LR (exponential, constant).
    #[arg(long)]
    pub peak_lr: Option<f64>,
    #[arg(long, default_value_t = 0.3)]
    pub warmup: f64,
    /// Per-epoch decay of the exponential schedule.
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
}

impl OptimOpts {
    fn config(&self, epochs: u32, seed: u64) -> TrainConfig {
        TrainConfig { epochs, batch_size: self.batch_size, momentum: self.momentum, loss: self.loss, seed }
    }

    fn schedule(&self, lr: f64, total_steps: u64) -> LrSchedule {
        match self.schedule {
            ScheduleKind::OneCycle => LrSchedule::OneCycle { peak_lr: lr, warmup_fraction: self.warmup, total_steps },
            ScheduleKind::Exponential => LrSchedule::Exponential { initial_lr: lr, gamma: self.gamma },
            ScheduleKind::Constant => LrSchedule::Constant { lr },
        }
    }
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOpts {
    /// Model file to start from (its masks, if any, stay enforced).
    #[arg(long, conflicts_with = "arch")]
    pub model: Option<PathBuf>,
    /// Architecture to initialise from the seed instead.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub epochs: u32,
    #[command(flatten)]
    pub optim: OptimOpts,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSelect {
    /// Weight pruning scope.
    #[arg(long, default_value = "global")]
    pub scope: Scope,
    /// Weight sparsity S in [0, 1).
    #[arg(long, conflicts_with_all = ["run_index", "filters"])]
    pub sparsity: Option<f64>,
    /// Weight sparsity 1 - 2^-x for run index x.
    #[arg(long, conflicts_with = "filters")]
    pub run_index: Option<u32>,
    /// Fraction of filters to remove per layer (structural).
    #[arg(long)]
    pub filters: Option<f64>,
    /// Filter saliency norm p.
    #[arg(long, default_value_t = 1.0)]
    pub norm: f64,
    #[arg(long, default_value = "union")]
    pub merge: MergeRule,
}

impl PruneSelect {
    pub fn method(&self) -> Result<PruneMethod> {
        match (self.sparsity, self.run_index, self.filters) {
            (Some(s), None, None) => Ok(PruneMethod::Weights { scope: self.scope, sparsity: s }),
            (None, Some(x), None) => Ok(PruneMethod::Weights { scope: self.scope, sparsity: sparsity_sequence(x)? }),
            (None, None, Some(f)) => Ok(PruneMethod::Filters { fraction: f, norm: self.norm, merge: self.merge }),
            _ => Err(Error::InvalidArgument(
                "give exactly one of --sparsity, --run-index or --filters".into(),
            )),
        }
    }
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneOpts {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub select: PruneSelect,
    /// Width of the sparsity diagram raster.
    #[arg(long, default_value_t = 512)]
    pub diagram_width: usize,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOpts {
    /// Trained dense model.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[command(flatten)]
    pub select: PruneSelect,
    #[arg(long, default_value_t = 5)]
    pub epochs: u32,
    #[command(flatten)]
    pub optim: OptimOpts,
    /// Peak LR drop per run; run `k` uses `peak - (k-1) * decrement`.
    #[arg(long, default_value_t = 0.0)]
    pub lr_decrement: f64,
    /// Run number for the LR decrement (defaults to --run-index, else 1).
    #[arg(long)]
    pub run: Option<u32>,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOpts {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Fraction of input pixels to remove.
    #[arg(long, conflicts_with = "noise_sweep")]
    pub noise: Option<f64>,
    /// Comma-separated noise ratios; writes a sweep report.
    #[arg(long, value_delimiter = ',')]
    pub noise_sweep: Option<Vec<f64>>,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOpts {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "64x64")]
    pub input: Size,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value_t = 50)]
    pub iters: usize,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LintOpts {
    /// Model file to lint.
    #[arg(long, conflicts_with = "arch")]
    pub model: Option<PathBuf>,
    /// Bundled architecture name or architecture manifest.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub input: Size,
    #[arg(long, default_value_t = 0.5)]
    pub context_threshold: f64,
    #[arg(long, default_value_t = 0.25)]
    pub param_share: f64,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportOpts {
    /// Directory holding one run, or one run per subdirectory.
    #[arg(long)]
    pub runs: PathBuf,
}

/// What `options.json` holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub schema: String,
    #[serde(flatten)]
    pub global: GlobalOpts,
    pub options: Command,
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    let (global, command) = match (cli.replay, cli.command) {
        (Some(path), None) => {
            let opts: RunOptions = io::parse_json(&path)?;
            if opts.schema != OPTIONS_SCHEMA {
                return Err(Error::MalformedManifest {
                    location: path.display().to_string(),
                    detail: format!("expected schema {OPTIONS_SCHEMA}, got {}", opts.schema),
                });
            }
            let mut global = opts.global;
            if cli.global.out.is_some() {
                global.out = cli.global.out;
            }
            (global, opts.options)
        }
        (None, Some(c)) => (cli.global, c),
        (Some(_), Some(_)) => return Err(Error::InvalidArgument("--replay takes no subcommand".into())),
        (None, None) => return Err(Error::InvalidArgument("no command given (see --help)".into())),
    };
    execute(&global, &command)
}

/// Runs one resolved command.
pub fn execute(global: &GlobalOpts, command: &Command) -> Result<i32> {
    if global.threads == 0 {
        return Err(Error::InvalidArgument("--threads must be >= 1".into()));
    }
    let out = global.out.clone().unwrap_or_else(|| Path::new("runs").join(command.name()));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let resolved = GlobalOpts { out: Some(out.clone()), ..global.clone() };
    write_json(
        &out.join("options.json"),
        &RunOptions { schema: OPTIONS_SCHEMA.into(), global: resolved, options: command.clone() },
    )?;
    let seed = global.seed;
    match command {
        Command::Build(o) => cmd_build(o, seed, &out),
        Command::Synth(o) => cmd_synth(o, seed, &out),
        Command::Train(o) => cmd_train(o, seed, &out),
        Command::Prune(o) => cmd_prune(o, &out),
        Command::Finetune(o) => cmd_finetune(o, seed, &out),
        Command::Eval(o) => cmd_eval(o, seed, &out),
        Command::Bench(o) => cmd_bench(o, seed, &out),
        Command::Lint(o) => cmd_lint(o, &out),
        Command::Report(o) => cmd_report(o, &out),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A bundled name or an architecture manifest path.
pub fn resolve_arch(spec: &str) -> Result<GraphDef> {
    if let Some(g) = zoo::by_name(spec) {
        return Ok(g);
    }
    let p = Path::new(spec);
    if p.exists() {
        return io::load_arch(p);
    }
    Err(Error::InvalidArgument(format!(
        "`{spec}` is neither a bundled architecture (tiny-segnet, deeplabv3-resnet50-os8) nor a manifest file"
    )))
}

fn shape_for(graph: impl AsRef<GraphDef>, size: Size) -> Result<TensorShape> {
    TensorShape::new(1, graph.as_ref().input_channels(), size.h, size.w)
}

#[derive(Serialize)]
struct BuildReport<'a> {
    schema: &'static str,
    arch: &'a str,
    seed: u64,
    input: Size,
    size_mb: f64,
    #[serde(flatten)]
    footprint: &'a FootprintReport,
}

fn cmd_build(o: &BuildOpts, seed: u64, out: &Path) -> Result<i32> {
    let arch = resolve_arch(&o.arch)?;
    let graph = init_model(arch, seed);
    let fp = footprint(&graph, shape_for(&graph, o.input)?)?;
    io::save(&graph, out.join("model.json"))?;
    write_json(
        &out.join("build.json"),
        &BuildReport { schema: "segprune.build/v1", arch: &o.arch, seed, input: o.input, size_mb: fp.size_mb(), footprint: &fp },
    )?;
    println!("{}: {} params, {} buffers, {:.3} MB", o.arch, fp.total_params, fp.buffer_count, fp.size_mb());
    if let Some(m) = fp.macs {
        println!("MACs at {}: {m}", o.input);
    }
    Ok(EXIT_OK)
}

fn cmd_synth(o: &SynthOpts, seed: u64, out: &Path) -> Result<i32> {
    let spec = SynthSpec { speckle: o.speckle, ..SynthSpec::new(o.kind, o.count, o.size, seed) };
    let data = generate(&spec)?;
    data.save(out, Some(&spec))?;
    println!("{} {:?} samples of {}x{} in {}", data.len(), o.kind, o.size, o.size, out.display());
    Ok(EXIT_OK)
}

fn load_val(path: &Option<PathBuf>) -> Result<Option<Dataset>> {
    path.as_ref().map(Dataset::load).transpose()
}

#[derive(Serialize)]
struct TrainReport<'a> {
    schema: &'static str,
    epochs: u32,
    schedule: &'a LrSchedule,
    final_loss: Option<f64>,
    final_val_dice: Option<f64>,
    diverged: Option<String>,
}

/// Writes history and a summary; on divergence returns exit code 3.
fn finish_training(
    out: &Path,
    history: &TrainHistory,
    epochs: u32,
    schedule: &LrSchedule,
    err: Option<Error>,
) -> Result<i32> {
    history.save(out)?;
    let diverged = match err {
        Some(e @ Error::Divergence { .. }) => Some(e.to_string()),
        Some(e) => return Err(e),
        None => None,
    };
    write_json(
        &out.join("train.json"),
        &TrainReport {
            schema: "segprune.train/v1",
            epochs,
            schedule,
            final_loss: history.epochs.last().map(|e| e.mean_loss),
            final_val_dice: history.last_val_dice(),
            diverged: diverged.clone(),
        },
    )?;
    match diverged {
        Some(msg) => {
            eprintln!("error: {msg} (history saved to {})", out.display());
            Ok(EXIT_DIVERGED)
        }
        None => Ok(EXIT_OK),
    }
}

fn log_epoch(t: &Trainer) {
    if let Some(e) = t.history().epochs.last() {
        match e.val_dice {
            Some(d) => eprintln!("epoch {:>3}  loss {:.4}  val dice {:.4}", e.epoch + 1, e.mean_loss, d),
            None => eprintln!("epoch {:>3}  loss {:.4}", e.epoch + 1, e.mean_loss),
        }
    }
}

fn cmd_train(o: &TrainOpts, seed: u64, out: &Path) -> Result<i32> {
    let (graph, masks) = match (&o.model, &o.arch) {
        (Some(p), None) => io::load_with_masks(p)?,
        (None, Some(a)) => (init_model(resolve_arch(a)?, seed), None),
        _ => return Err(Error::InvalidArgument("give one of --model or --arch".into())),
    };
    let data = Dataset::load(&o.data)?;
    let val = load_val(&o.val)?;
    let cfg = o.optim.config(o.epochs, seed);
    let lr = o.optim.peak_lr.unwrap_or(0.05);
    let schedule = o.optim.schedule(lr, o.epochs as u64 * steps_per_epoch(data.len(), cfg.batch_size));
    let mut trainer = Trainer::new(graph, cfg, schedule, masks)?;
    let mut failure = None;
    for _ in 0..o.epochs {
        if let Err(e) = trainer.run_epoch(&data, val.as_ref()) {
            failure = Some(e);
            break;
        }
        log_epoch(&trainer);
    }
    if failure.is_none() {
        io::save_with_masks(trainer.graph(), trainer.masks(), out.join("model.json"))?;
    }
    finish_training(out, trainer.history(), o.epochs, &schedule, failure)
}

fn describe(report: &PruneReport) -> String {
    match report {
        PruneReport::Weights(r) => format!(
            "sparsity {:.6}: {} of {} prunable weights kept, {} nonzero params",
            r.sparsity, r.prunable_nnz, r.prunable_total, r.total_nnz
        ),
        PruneReport::Filters(r) => format!(
            "filters {:.4}: {} -> {} params ({:.2}x)",
            r.fraction, r.params_before, r.params_after, r.compression_ratio
        ),
    }
}

fn save_pruned(out: &Path, graph: &ModelGraph, masks: Option<&MaskSet>, report: &PruneReport, width: usize) -> Result<()> {
    io::save_with_masks(graph, masks, out.join("model.json"))?;
    write_json(&out.join("prune.json"), report)?;
    if let Some(m) = masks {
        sparsity_diagram(graph, m, out.join("sparsity.pgm"), width)?;
    }
    Ok(())
}

fn cmd_prune(o: &PruneOpts, out: &Path) -> Result<i32> {
    let graph = io::load(&o.model)?;
    let pruned = prune(&graph, o.select.method()?)?;
    save_pruned(out, &pruned.graph, pruned.masks.as_ref(), &pruned.report, o.diagram_width)?;
    println!("{}", describe(&pruned.report));
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct FinetuneReport<'a> {
    schema: &'static str,
    method: PruneMethod,
    run: u32,
    peak_lr: f64,
    epochs: u32,
    params_after: u64,
    final_val_dice: Option<f64>,
    prune: &'a PruneReport,
}

fn cmd_finetune(o: &FinetuneOpts, seed: u64, out: &Path) -> Result<i32> {
    let method = o.select.method()?;
    let (graph, masks) = io::load_with_masks(&o.model)?;
    if masks.is_some() {
        return Err(Error::InvalidArgument("finetune starts from a dense model; this one carries masks".into()));
    }
    let data = Dataset::load(&o.data)?;
    let val = load_val(&o.val)?;
    let run = o.run.or(o.select.run_index).unwrap_or(1);
    let lr = peak_lr_for_run(o.optim.peak_lr.unwrap_or(0.01), o.lr_decrement, run)?;
    let cfg = o.optim.config(o.epochs, seed);
    let schedule = o.optim.schedule(lr, o.epochs as u64 * steps_per_epoch(data.len(), cfg.batch_size));
    let done = match prune_and_finetune(graph, method, &data, val.as_ref(), &cfg, schedule) {
        Ok(d) => d,
        Err((e, Some(history))) => return finish_training(out, &history, o.epochs, &schedule, Some(e)),
        Err((e, None)) => return Err(e),
    };
    for e in &done.history.epochs {
        match e.val_dice {
            Some(d) => eprintln!("epoch {:>3}  loss {:.4}  val dice {:.4}", e.epoch + 1, e.mean_loss, d),
            None => eprintln!("epoch {:>3}  loss {:.4}", e.epoch + 1, e.mean_loss),
        }
    }
    save_pruned(out, &done.graph, done.masks.as_ref(), &done.report, 512)?;
    let code = finish_training(out, &done.history, o.epochs, &schedule, None)?;
    let params_after = match &done.report {
        PruneReport::Weights(r) => r.total_nnz,
        PruneReport::Filters(r) => r.params_after,
    };
    if let Some(v) = &val {
        write_json(&out.join("eval.json"), &evaluate(&done.graph, done.masks.as_ref(), v, None)?)?;
    }
    write_json(
        &out.join("finetune.json"),
        &FinetuneReport {
            schema: "segprune.finetune/v1",
            method,
            run,
            peak_lr: lr,
            epochs: o.epochs,
            params_after,
            final_val_dice: done.history.last_val_dice(),
            prune: &done.report,
        },
    )?;
    println!("{}; val dice {:?}", describe(&done.report), done.history.last_val_dice());
    Ok(code)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub ratio: f64,
    pub dice: f64,
    pub dice_margin95: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepReport {
    pub schema: String,
    pub seed: u64,
    pub samples: usize,
    pub points: Vec<NoisePoint>,
}

impl NoiseSweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("ratio,dice,dice_margin95,iou\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{},{}\n", p.ratio, p.dice, p.dice_margin95, p.iou));
        }
        s
    }
}

/// DICE and IoU at each noise ratio; pixel-removal sets nest across ratios.
pub fn noise_sweep(graph: &ModelGraph, masks: Option<&MaskSet>, data: &Dataset, ratios: &[f64], seed: u64) -> Result<NoiseSweepReport> {
    let points = ratios
        .iter()
        .map(|&r| {
            let e = evaluate(graph, masks, data, Some((r, seed)))?;
            Ok(NoisePoint { ratio: r, dice: e.dice.mean, dice_margin95: e.dice.margin95, iou: e.iou.mean })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NoiseSweepReport { schema: "segprune.noise-sweep/v1".into(), seed, samples: data.len(), points })
}

fn cmd_eval(o: &EvalOpts, seed: u64, out: &Path) -> Result<i32> {
    let (graph, masks) = io::load_with_masks(&o.model)?;
    let data = Dataset::load(&o.data)?;
    if let Some(ratios) = &o.noise_sweep {
        let sweep = noise_sweep(&graph, masks.as_ref(), &data, ratios, seed)?;
        write_json(&out.join("noise_sweep.json"), &sweep)?;
        write_text(&out.join("noise_sweep.csv"), &sweep.to_csv())?;
        print!("{}", sweep.to_csv());
        return Ok(EXIT_OK);
    }
    let report: EvalReport = evaluate(&graph, masks.as_ref(), &data, o.noise.map(|r| (r, seed)))?;
    write_json(&out.join("eval.json"), &report)?;
    println!(
        "dice {:.4} ± {:.4}  iou {:.4}  sens {:.4}  spec {:.4}  (n = {})",
        report.dice.mean, report.dice.margin95, report.iou.mean, report.sensitivity.mean, report.specificity.mean, report.samples
    );
    Ok(EXIT_OK)
}

fn cmd_bench(o: &BenchOpts, seed: u64, out: &Path) -> Result<i32> {
    let (graph, masks) = io::load_with_masks(&o.model)?;
    let graph = match masks {
        Some(m) => m.apply(&graph)?,
        None => graph,
    };
    let input = shape_for(&graph, o.input)?;
    let stats = bench(&graph, input, o.warmup, o.iters, seed)?;
    let report = BenchReport::new(stats, input);
    write_json(&out.join("bench.json"), &report)?;
    println!(
        "{:.3} ms ± {:.3} ({} fps) over {} iterations",
        report.stats.mean_ms, report.stats.ci95_ms, report.stats.throughput_fps, report.stats.measure_iters
    );
    Ok(EXIT_OK)
}

fn cmd_lint(o: &LintOpts, out: &Path) -> Result<i32> {
    let arch = match (&o.model, &o.arch) {
        (Some(p), None) => io::load(p)?.arch().clone(),
        (None, Some(a)) => resolve_arch(a)?,
        _ => return Err(Error::InvalidArgument("give one of --model or --arch".into())),
    };
    let cfg = LintConfig { context_threshold: o.context_threshold, param_share: o.param_share };
    let report = lint_with(&arch, shape_for(&arch, o.input)?, &cfg)?;
    write_json(&out.join("lint.json"), &report)?;
    if o.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_text());
    }
    Ok(if report.has_errors() { EXIT_LINT } else { EXIT_OK })
}

/// One row of the run table.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunRow {
    pub run: String,
    pub method: String,
    pub fraction: Option<f64>,
    pub params: Option<u64>,
    pub compression_ratio: Option<f64>,
    pub dice: Option<f64>,
    pub latency_ms: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub rows: Vec<RunRow>,
    /// `run/artifact` names that a complete run would have.
    pub missing: Vec<String>,
    pub noise: BTreeMap<String, NoiseSweepReport>,
    pub diagrams: Vec<String>,
}

fn read_opt<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if path.exists() {
        io::parse_json(path).map(Some)
    } else {
        Ok(None)
    }
}

fn fmt_opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Scans `dir` (and each subdirectory) for run artifacts.
pub fn summarize_runs(dir: &Path, out: &Path) -> Result<RunSummary> {
    if !dir.is_dir() {
        return Err(Error::MissingArtifact(dir.to_path_buf()));
    }
    let mut dirs = vec![dir.to_path_buf()];
    let mut subs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subs.sort();
    dirs.extend(subs);

    let mut summary = RunSummary::default();
    for d in dirs {
        let name = match d.strip_prefix(dir) {
            Ok(p) if !p.as_os_str().is_empty() => p.display().to_string(),
            _ => ".".to_string(),
        };
        let prune: Option<PruneReport> = read_opt(&d.join("prune.json"))?;
        let eval: Option<EvalReport> = read_opt(&d.join("eval.json"))?;
        let bench: Option<BenchReport> = read_opt(&d.join("bench.json"))?;
        let build: Option<serde_json::Value> = read_opt(&d.join("build.json"))?;
        if let Some(s) = read_opt::<NoiseSweepReport>(&d.join("noise_sweep.json"))? {
            summary.noise.insert(name.clone(), s);
        }
        if prune.is_none() && eval.is_none() && bench.is_none() && build.is_none() {
            continue;
        }
        let mut row = RunRow { run: name.clone(), ..Default::default() };
        match &prune {
            Some(PruneReport::Weights(r)) => {
                row.method = "weights".into();
                row.fraction = r.target.or(Some(r.sparsity));
                row.params = Some(r.total_nnz);
                row.compression_ratio = r.compression_ratio;
                let model = d.join("model.json");
                if model.exists() {
                    let (g, m) = io::load_with_masks(&model)?;
                    if let Some(m) = m {
                        let file = format!("sparsity_{}.pgm", name.replace(['/', '.'], "_"));
                        sparsity_diagram(&g, &m, out.join(&file), 512)?;
                        summary.diagrams.push(file);
                    }
                } else {
                    summary.missing.push(format!("{name}/model.json"));
                }
            }
            Some(PruneReport::Filters(r)) => {
                row.method = "filters".into();
                row.fraction = Some(r.fraction);
                row.params = Some(r.params_after);
                row.compression_ratio = Some(r.compression_ratio);
            }
            None => {
                row.method = "dense".into();
                row.params = build.as_ref().and_then(|b| b["total_params"].as_u64());
            }
        }
        row.dice = eval.as_ref().map(|e| e.dice.mean);
        row.latency_ms = bench.as_ref().map(|b| b.stats.mean_ms);
        for (present, file) in [(eval.is_some(), "eval.json"), (bench.is_some(), "bench.json")] {
            if !present {
                summary.missing.push(format!("{name}/{file}"));
            }
        }
        summary.rows.push(row);
    }
    if summary.rows.is_empty() && summary.noise.is_empty() {
        return Err(Error::MissingArtifact(dir.join("prune.json")));
    }
    Ok(summary)
}

impl RunSummary {
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("run,method,fraction,params,compression_ratio,dice,latency_ms\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.run,
                r.method,
                fmt_opt(r.fraction),
                fmt_opt(r.params),
                fmt_opt(r.compression_ratio),
                fmt_opt(r.dice),
                fmt_opt(r.latency_ms)
            ));
        }
        s
    }

    /// DICE against sparsity for pruned runs, sorted by sparsity.
    pub fn dice_vs_sparsity_csv(&self) -> String {
        let mut rows: Vec<&RunRow> = self.rows.iter().filter(|r| r.fraction.is_some()).collect();
        rows.sort_by(|a, b| a.fraction.partial_cmp(&b.fraction).unwrap().then(a.run.cmp(&b.run)));
        let mut s = String::from("method,fraction,dice\n");
        for r in rows {
            s.push_str(&format!("{},{},{}\n", r.method, fmt_opt(r.fraction), fmt_opt(r.dice)));
        }
        s
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from("# Run report\n\n| run | method | fraction | params | CR | DICE | latency (ms) |\n|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} | {} |\n",
                r.run,
                r.method,
                r.fraction.map(|f| format!("{f:.6}")).unwrap_or_else(|| "-".into()),
                r.params.map(|p| p.to_string()).unwrap_or_else(|| "-".into()),
                r.compression_ratio.map(|c| format!("{c:.2}x")).unwrap_or_else(|| "-".into()),
                r.dice.map(|d| format!("{d:.4}")).unwrap_or_else(|| "-".into()),
                r.latency_ms.map(|l| format!("{l:.3}")).unwrap_or_else(|| "-".into()),
            ));
        }
        for (run, sweep) in &self.noise {
            s.push_str(&format!("\n## Noise sweep: {run}\n\n| removed | DICE | ± |\n|---|---|---|\n"));
            for p in &sweep.points {
                s.push_str(&format!("| {:.2} | {:.4} | {:.4} |\n", p.ratio, p.dice, p.dice_margin95));
            }
        }
        if !self.diagrams.is_empty() {
            s.push_str("\n## Sparsity diagrams\n\n");
            for d in &self.diagrams {
                s.push_str(&format!("- `{d}`\n"));
            }
        }
        if !self.missing.is_empty() {
            s.push_str("\n## Missing artifacts\n\n");
            for m in &self.missing {
                s.push_str(&format!("- `{m}`\n"));
            }
        }
        s
    }
}

fn cmd_report(o: &ReportOpts, out: &Path) -> Result<i32> {
    let summary = summarize_runs(&o.runs, out)?;
    write_text(&out.join("report.md"), &summary.markdown())?;
    write_text(&out.join("runs.csv"), &summary.runs_csv())?;
    write_text(&out.join("dice_vs_sparsity.csv"), &summary.dice_vs_sparsity_csv())?;
    for (run, sweep) in &summary.noise {
        let file = format!("noise_{}.csv", run.replace(['/', '.'], "_"));
        write_text(&out.join(file), &sweep.to_csv())?;
    }
    for m in &summary.missing {
        eprintln!("missing artifact: {m}");
    }
    println!("{} runs, {} noise sweeps -> {}", summary.rows.len(), summary.noise.len(), out.join("report.md").display());
    Ok(EXIT_OK)
}
