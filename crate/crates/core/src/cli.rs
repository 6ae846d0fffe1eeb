//! Command-line interface: `gen`, `train`, `eval`, `analyze` and `add-task`.
//!
//! Every command writes a `run.json` manifest into its output directory with
//! the resolved config, seed, SHA-256 digests of inputs and outputs, and
//! wall-clock start/end times. Data directories produced by `gen` are checked
//! against their own manifest whenever they are read again.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, sha256_hex};
use crate::config::{Ablation, ModelConfig, RunConfig, TrainConfig};
use crate::data::{self, Dataset, InputDims, PatientSample, Split};
use crate::error::{Error, ErrorKind, Result};
use crate::metrics::{self, MetricBundle};
use crate::model::Model;
use crate::tasks::TaskRegistry;
use crate::training::{self, TrainOptions, TrainOutcome};

pub const RUN_MANIFEST_FILE: &str = "run.json";
pub const OUT_ENV: &str = "FLEXCARE_OUT";

#[derive(Debug, Parser)]
#[command(name = "flexcare", version, about = "Multimodal multitask clinical prediction on synthetic EHR-like data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-task dataset.
    Gen(GenArgs),
    /// Train a model (multitask by default).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Export expert usage, patient embeddings or fusion weights.
    Analyze(AnalyzeArgs),
    /// Register a new task on a trained model and fine-tune it.
    AddTask(AddTaskArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: `$FLEXCARE_OUT/<command>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Overrides `gen.n_samples`.
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// Append the held-out extension task to the suite.
    #[arg(long)]
    pub with_extension: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Train one fresh model per named task (comma separated, or `all`).
    #[arg(long, value_delimiter = ',')]
    pub single_task: Option<Vec<String>>,
    /// Module ablation: a-, b-, c- or d-.
    #[arg(long)]
    pub ablate: Option<String>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluate only this task.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Also write `metrics.csv` and a run manifest here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AnalyzeKind {
    Experts,
    Embeddings,
    Alphas,
}

impl AnalyzeKind {
    fn name(self) -> &'static str {
        match self {
            AnalyzeKind::Experts => "experts",
            AnalyzeKind::Embeddings => "embeddings",
            AnalyzeKind::Alphas => "alphas",
        }
    }
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub kind: AnalyzeKind,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Embedding rows exported per task.
    #[arg(long, default_value_t = 200)]
    pub per_task: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AddTaskArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Name of the new task; must exist in the dataset and not in the model.
    #[arg(long)]
    pub task: String,
    /// Share of the new task's training lines to keep.
    #[arg(long, default_value_t = 1.0)]
    pub fraction: f64,
    /// Ignore pretrained weights and train a fresh single-task model.
    #[arg(long)]
    pub from_scratch: bool,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

/// Process exit code for an error class.
pub fn exit_code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Io | ErrorKind::Internal => 1,
        ErrorKind::Config => 3,
        ErrorKind::Data => 4,
        ErrorKind::Numeric => 5,
        ErrorKind::Checkpoint => 6,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub build_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Input files, keyed by path as given on the command line.
    pub inputs: Vec<FileDigest>,
    /// Output files, relative to the run directory.
    pub outputs: Vec<FileDigest>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

fn files_under(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn digest_file(path: &Path, label: String) -> Result<FileDigest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(FileDigest {
        path: label,
        bytes: bytes.len() as u64,
        sha256: sha256_hex(&bytes),
    })
}

/// Digests of every file under `root` except its run manifest.
pub fn digest_tree(root: &Path) -> Result<Vec<FileDigest>> {
    let mut out = Vec::new();
    for p in files_under(root)? {
        let rel = p.strip_prefix(root).unwrap_or(&p);
        if rel == Path::new(RUN_MANIFEST_FILE) {
            continue;
        }
        out.push(digest_file(&p, rel.to_string_lossy().replace('\\', "/"))?);
    }
    Ok(out)
}

fn digest_inputs(root: &Path) -> Result<Vec<FileDigest>> {
    let mut d = digest_tree(root)?;
    for x in &mut d {
        x.path = root.join(&x.path).to_string_lossy().into_owned();
    }
    Ok(d)
}

pub fn read_run_manifest(dir: &Path) -> Result<RunManifest> {
    let path = dir.join(RUN_MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::from(e).at(&path, None))
}

/// Compare the files a run recorded as outputs with what is on disk now.
pub fn verify_run_outputs(dir: &Path) -> Result<()> {
    let manifest = read_run_manifest(dir)?;
    for d in &manifest.outputs {
        let path = dir.join(&d.path);
        let now = digest_file(&path, d.path.clone())?;
        if now.sha256 != d.sha256 {
            return Err(Error::Data {
                path: Some(path),
                line: None,
                reason: "file changed since its run manifest was written".into(),
            });
        }
    }
    Ok(())
}

struct Run {
    command: &'static str,
    seed: u64,
    config: serde_json::Value,
    inputs: Vec<FileDigest>,
    started: u128,
}

impl Run {
    fn start(command: &'static str, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Run {
            command,
            seed,
            config: serde_json::to_value(config)?,
            inputs: Vec::new(),
            started: now_ms(),
        })
    }

    fn input(&mut self, root: &Path) -> Result<()> {
        self.inputs.extend(digest_inputs(root)?);
        Ok(())
    }

    fn finish(self, out: &Path) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            build_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: digest_tree(out)?,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
        };
        let path = out.join(RUN_MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

fn out_dir(out: &Option<PathBuf>, command: &str) -> Result<PathBuf> {
    let dir = match out {
        Some(p) => p.clone(),
        None => match std::env::var_os(OUT_ENV) {
            Some(root) => PathBuf::from(root).join(command),
            None => return Err(Error::config("out", format!("pass --out or set {OUT_ENV}"))),
        },
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// Load a dataset directory, refusing it if a `gen` manifest exists and the
/// files have drifted from it.
pub fn load_data(dir: &Path) -> Result<Dataset> {
    if dir.join(RUN_MANIFEST_FILE).exists() {
        verify_run_outputs(dir)?;
    }
    data::load(dir)
}

fn model_config_for(cfg: &ModelConfig, dims: &InputDims) -> ModelConfig {
    ModelConfig {
        ts_features: dims.ts_features,
        image_size: dims.image_size,
        image_channels: dims.image_channels,
        note_features: dims.note_features,
        ..cfg.clone()
    }
}

fn write_table(w: &mut dyn Write, bundles: &[MetricBundle]) -> Result<()> {
    let io = |e| Error::io("<stdout>", e);
    writeln!(w, "{:<10} {:>6}  {:<14} {:>8}", "task", "n", "metric", "value").map_err(io)?;
    for b in bundles {
        for (k, v) in &b.values {
            writeln!(w, "{:<10} {:>6}  {:<14} {:>8.4}", b.task, b.n, k, v).map_err(io)?;
        }
    }
    Ok(())
}

fn write_metrics_file(path: &Path, split: &str, bundles: &[MetricBundle]) -> Result<()> {
    let rows: Vec<(String, MetricBundle)> = bundles.iter().map(|b| (split.to_string(), b.clone())).collect();
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    metrics::write_metrics_csv(f, &rows)
}

/// Train, then save the final checkpoint, the JSON-lines log, per-task
/// best-validation checkpoints and test metrics under `out`.
fn fit_and_save(
    model: Model<f32>,
    ds: &Dataset,
    cfg: &TrainConfig,
    tasks: Option<Vec<usize>>,
    out: &Path,
) -> Result<(TrainOutcome<f32>, Vec<MetricBundle>)> {
    let log_path = out.join("metrics.jsonl");
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let outcome = training::train(
        model,
        ds,
        cfg,
        TrainOptions {
            tasks,
            log: Some(&mut log),
            keep_best: true,
            skip_validation: false,
        },
    )?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    drop(log);
    checkpoint::save(&outcome.model, &out.join("checkpoint"), Some(cfg))?;
    for (tid, b) in outcome.best.iter().enumerate() {
        if b.is_some() {
            let name = &outcome.model.registry.get(tid)?.name;
            checkpoint::save(&outcome.best_model(tid), &out.join("best").join(name), Some(cfg))?;
        }
    }
    let bundles = training::test_metrics(&outcome, ds)?;
    write_metrics_file(&out.join("test_metrics.csv"), "test", &bundles)?;
    Ok((outcome, bundles))
}

pub fn cmd_gen(args: &GenArgs, w: &mut dyn Write) -> Result<RunManifest> {
    let mut cfg = load_config(&args.common.config)?;
    if let Some(s) = args.common.seed {
        cfg.gen.seed = s;
    }
    if let Some(n) = args.n_samples {
        cfg.gen.n_samples = n;
    }
    if args.with_extension && !cfg.gen.tasks.iter().any(|t| t.name == data::extension_task().name) {
        cfg.gen.tasks.push(data::extension_task());
    }
    cfg.gen.validate()?;
    let out = out_dir(&args.common.out, "gen")?;
    let mut run = Run::start("gen", cfg.gen.seed, &cfg.gen)?;
    if let Some(p) = &args.common.config {
        run.inputs.push(digest_file(p, p.to_string_lossy().into_owned())?);
    }
    let ds = data::generate(&cfg.gen)?;
    data::write_dataset(&out, &ds)?;
    let io = |e| Error::io("<stdout>", e);
    writeln!(w, "{:<10} {:>6} {:>6} {:>6}  {:>6} {:>6} {:>6}", "task", "train", "valid", "test", "miss_t", "miss_i", "miss_n")
        .map_err(io)?;
    for spec in ds.registry.iter() {
        let d = &ds.tasks[spec.task_id];
        let all: Vec<PatientSample> = Split::ALL.iter().flat_map(|&s| d.split(s).iter().cloned()).collect();
        let r = data::missing_rates(&all);
        writeln!(
            w,
            "{:<10} {:>6} {:>6} {:>6}  {:>6.3} {:>6.3} {:>6.3}",
            spec.name,
            d.train.len(),
            d.valid.len(),
            d.test.len(),
            r.t,
            r.i,
            r.n
        )
        .map_err(io)?;
    }
    run.finish(&out)
}

pub fn cmd_train(args: &TrainArgs, w: &mut dyn Write) -> Result<RunManifest> {
    let mut cfg = load_config(&args.common.config)?;
    if let Some(s) = args.common.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    let ablation = args.ablate.as_deref().map(str::parse::<Ablation>).transpose()?;
    cfg.model = cfg.model.with_ablation(ablation);
    cfg.validate()?;
    let ds = load_data(&args.data)?;
    cfg.model = model_config_for(&cfg.model, &ds.dims);
    cfg.model.validate()?;
    let out = out_dir(&args.common.out, "train")?;
    let mut run = Run::start("train", cfg.train.seed, &cfg)?;
    run.input(&args.data)?;
    let seed = cfg.train.seed;
    let mut bundles = Vec::new();
    match &args.single_task {
        None => {
            let model = Model::<f32>::new(cfg.model.clone(), ds.registry.clone(), seed)?;
            bundles = fit_and_save(model, &ds, &cfg.train, None, &out)?.1;
        }
        Some(names) => {
            let names: Vec<String> = if names.iter().any(|n| n == "all") {
                ds.registry.iter().map(|s| s.name.clone()).collect()
            } else {
                names.clone()
            };
            for name in &names {
                let one = ds.only(name)?;
                let model = Model::<f32>::new(cfg.model.clone(), one.registry.clone(), seed)?;
                let dir = out.join(name);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                bundles.extend(fit_and_save(model, &one, &cfg.train, None, &dir)?.1);
            }
            write_metrics_file(&out.join("test_metrics.csv"), "test", &bundles)?;
        }
    }
    write_table(w, &bundles)?;
    run.finish(&out)
}

/// Dataset re-indexed onto the model's task ids, restricted to `task` if set.
fn eval_tasks(model: &Model<f32>, ds: &Dataset, task: &Option<String>) -> Result<(Dataset, Vec<usize>)> {
    let aligned = ds.aligned(&model.registry)?;
    let ids = match task {
        Some(name) => {
            ds.registry.require(name)?;
            vec![model.registry.require(name)?.task_id]
        }
        None => model
            .registry
            .iter()
            .filter(|s| ds.registry.by_name(&s.name).is_some())
            .map(|s| s.task_id)
            .collect(),
    };
    Ok((aligned, ids))
}

pub fn cmd_eval(args: &EvalArgs, w: &mut dyn Write) -> Result<Vec<MetricBundle>> {
    let (model, manifest) = checkpoint::load(&args.checkpoint)?;
    let ds = load_data(&args.data)?;
    model.check_dims(&ds.dims)?;
    let (ds, ids) = eval_tasks(&model, &ds, &args.task)?;
    let split: Split = args.split.into();
    let mut bundles = Vec::new();
    for id in ids {
        bundles.push(training::evaluate(&model, ds.tasks[id].split(split), id)?);
    }
    write_table(w, &bundles)?;
    if args.out.is_some() {
        let out = out_dir(&args.out, "eval")?;
        let mut run = Run::start("eval", manifest.init_seed, &manifest.model)?;
        run.input(&args.checkpoint)?;
        run.input(&args.data)?;
        write_metrics_file(&out.join("metrics.csv"), split.name(), &bundles)?;
        run.finish(&out)?;
    }
    Ok(bundles)
}

pub fn cmd_analyze(args: &AnalyzeArgs, w: &mut dyn Write) -> Result<RunManifest> {
    let (model, manifest) = checkpoint::load(&args.checkpoint)?;
    let ds = load_data(&args.data)?;
    model.check_dims(&ds.dims)?;
    let (ds, ids) = eval_tasks(&model, &ds, &None)?;
    let split: Split = args.split.into();
    let samples: Vec<PatientSample> = ids.iter().flat_map(|&id| ds.tasks[id].split(split).iter().cloned()).collect();
    let out = out_dir(&args.out, "analyze")?;
    let mut run = Run::start("analyze", manifest.init_seed, &manifest.model)?;
    run.input(&args.checkpoint)?;
    run.input(&args.data)?;
    let path = out.join(format!("{}.csv", args.kind.name()));
    let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let rows = match args.kind {
        AnalyzeKind::Experts => {
            let r = metrics::export_expert_stats(&model, &samples)?;
            metrics::write_expert_csv(f, &r)?;
            r.len()
        }
        AnalyzeKind::Embeddings => {
            let r = metrics::export_embeddings(&model, &samples, args.per_task)?;
            metrics::write_embeddings_csv(f, &r, 2 * model.config.d_model)?;
            r.len()
        }
        AnalyzeKind::Alphas => {
            let r = metrics::export_alphas(&model, &samples)?;
            metrics::write_alphas_csv(f, &r)?;
            r.len()
        }
    };
    writeln!(w, "wrote {rows} rows to {}", path.display()).map_err(|e| Error::io("<stdout>", e))?;
    run.finish(&out)
}

pub fn cmd_add_task(args: &AddTaskArgs, w: &mut dyn Write) -> Result<RunManifest> {
    let mut cfg = load_config(&args.common.config)?;
    if let Some(s) = args.common.seed {
        cfg.train.seed = s;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    cfg.train.validate()?;
    if !(args.fraction > 0.0 && args.fraction <= 1.0) {
        return Err(Error::config("fraction", format!("must be in (0, 1], got {}", args.fraction)));
    }
    let (pretrained, _) = checkpoint::load(&args.checkpoint)?;
    if pretrained.registry.by_name(&args.task).is_some() {
        return Err(Error::DuplicateTask(args.task.clone()));
    }
    let ds = load_data(&args.data)?;
    pretrained.check_dims(&ds.dims)?;
    let spec = ds.registry.require(&args.task)?.clone();
    let seed = cfg.train.seed;
    let (model, task_id) = if args.from_scratch {
        let mut reg = TaskRegistry::new();
        let id = reg.register(&spec.name, spec.head_kind, spec.label_dim, spec.loss_weight)?;
        (Model::<f32>::new(pretrained.config.clone(), reg, seed)?, id)
    } else {
        let mut m = pretrained;
        let id = m.add_task(&spec.name, spec.head_kind, spec.label_dim, spec.loss_weight)?;
        (m, id)
    };
    let mut aligned = ds.aligned(&model.registry)?;
    let data = &mut aligned.tasks[task_id];
    data.train = data::subsample(&data.train, args.fraction, seed)?;
    for (k, d) in aligned.tasks.iter_mut().enumerate() {
        if k != task_id {
            *d = Default::default();
        }
    }
    let out = out_dir(&args.common.out, "add-task")?;
    let mut run = Run::start("add-task", seed, &cfg.train)?;
    run.input(&args.checkpoint)?;
    run.input(&args.data)?;
    let n_train = aligned.tasks[task_id].train.len();
    let (outcome, bundles) = fit_and_save(model, &aligned, &cfg.train, Some(vec![task_id]), &out)?;
    let io = |e| Error::io("<stdout>", e);
    writeln!(w, "{} on {n_train} training samples ({})", spec.name, if args.from_scratch { "from scratch" } else { "pretrained" })
        .map_err(io)?;
    for (e, l) in outcome.train_losses(&spec.name).iter().enumerate() {
        writeln!(w, "epoch {:>3} train_loss {l:.6}", e + 1).map_err(io)?;
    }
    write_table(w, &bundles)?;
    run.finish(&out)
}

pub fn run(cli: &Cli, w: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, w).map(drop),
        Command::Train(a) => cmd_train(a, w).map(drop),
        Command::Eval(a) => cmd_eval(a, w).map(drop),
        Command::Analyze(a) => cmd_analyze(a, w).map(drop),
        Command::AddTask(a) => cmd_add_task(a, w).map(drop),
    }
}
