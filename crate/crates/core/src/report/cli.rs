//! The `probekit` command line. Errors print as one line,
//! `error[<kind>]: <path>: <message>`, and exit with 2 (usage), 3 (I/O),
//! 4 (data) or 5 (numeric).

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{build_table, emit_heatmap, emit_perplexity_curves, format_2dp, heatmap_row_csv, layer_task_grid, table_csv, table_json, ReportError};
use crate::bilmprobe::{bilm_probe, BilmError, LmVocab, DEFAULT_VOCAB_SIZE};
use crate::checkpoint::{save_contextualizer, save_probe, CheckpointError};
use crate::ingest::{
    compile_coref_arc_prediction, compile_dep_arc_classification, compile_dep_arc_prediction, compile_sparse_task,
    compile_token_task, compile_token_task_filtered, parse_conll_columns, parse_conllu, parse_jsonl, parse_ptb_trees,
    parse_sdp, read_dataset, split_dataset, write_dataset, ArcSource, ColumnSchema, IngestError, LabelSource,
    SentenceFilter, Separator, Split, SplitPolicy, TargetKind, TaskDataset,
};
use crate::metrics::MetricError;
use crate::minictx::{
    freeze_and_dump, init_contextualizer, pretrain, transfer_matrix, CtxConfig, CtxError, Objective, PretrainSpec,
    TransferMatrix,
};
use crate::probes::{Arch, InputSource};
use crate::reprstore::{ReprStore, StoreError};
use crate::tensorcore::TensorError;
use crate::trainer::{evaluate, run_probe, sweep_layers, RunReport, TrainConfig, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Io,
    Data,
    Numeric,
}

impl ErrorKind {
    pub fn code(self) -> i32 {
        match self {
            ErrorKind::Usage => 2,
            ErrorKind::Io => 3,
            ErrorKind::Data => 4,
            ErrorKind::Numeric => 5,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Io => "io",
            ErrorKind::Data => "data",
            ErrorKind::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub path: Option<PathBuf>,
    pub message: String,
}

impl CliError {
    fn new(kind: ErrorKind, message: impl fmt::Display) -> Self {
        Self { kind, path: None, message: message.to_string() }
    }

    fn usage(message: impl fmt::Display) -> Self {
        Self::new(ErrorKind::Usage, message)
    }

    fn data(message: impl fmt::Display) -> Self {
        Self::new(ErrorKind::Data, message)
    }

    fn io(path: &Path, err: impl fmt::Display) -> Self {
        Self::new(ErrorKind::Io, err).at(path)
    }

    /// Attaches `path` unless a more specific one is already set.
    fn at(mut self, path: &Path) -> Self {
        self.path.get_or_insert_with(|| path.to_path_buf());
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let one_line = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
        write!(f, "error[{}]: ", self.kind.name())?;
        if let Some(p) = &self.path {
            write!(f, "{}: ", p.display())?;
        }
        write!(f, "{}", one_line(&self.message))
    }
}

impl std::error::Error for CliError {}

fn tensor_kind(e: &TensorError) -> ErrorKind {
    match e {
        TensorError::NonFinite { .. } => ErrorKind::Numeric,
        _ => ErrorKind::Data,
    }
}

fn metric_kind(e: &MetricError) -> ErrorKind {
    match e {
        MetricError::NonFinite(_) | MetricError::ZeroVariance(_) => ErrorKind::Numeric,
        _ => ErrorKind::Data,
    }
}

fn store_kind(e: &StoreError) -> ErrorKind {
    match e {
        StoreError::Io { .. } => ErrorKind::Io,
        _ => ErrorKind::Data,
    }
}

fn train_kind(e: &TrainError) -> ErrorKind {
    match e {
        TrainError::NonFiniteLoss { .. } => ErrorKind::Numeric,
        TrainError::Tensor(t) => tensor_kind(t),
        TrainError::Metric(m) => metric_kind(m),
        TrainError::Store(s) => store_kind(s),
        TrainError::Config(_) => ErrorKind::Usage,
        _ => ErrorKind::Data,
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        Self::new(train_kind(&e), e)
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        Self::new(store_kind(&e), e)
    }
}

impl From<BilmError> for CliError {
    fn from(e: BilmError) -> Self {
        let kind = match &e {
            BilmError::Train(t) => train_kind(t),
            BilmError::Store(s) => store_kind(s),
            BilmError::Tensor(t) => tensor_kind(t),
            BilmError::Metric(m) => metric_kind(m),
            _ => ErrorKind::Data,
        };
        Self::new(kind, e)
    }
}

impl From<CtxError> for CliError {
    fn from(e: CtxError) -> Self {
        let kind = match &e {
            CtxError::Train(t) => train_kind(t),
            CtxError::Store(s) => store_kind(s),
            CtxError::Tensor(t) => tensor_kind(t),
            CtxError::Metric(m) => metric_kind(m),
            CtxError::DimMismatch { .. } => ErrorKind::Usage,
            CtxError::Config(_) => ErrorKind::Data,
        };
        Self::new(kind, e)
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        let kind = if matches!(e, IngestError::Io(_)) { ErrorKind::Io } else { ErrorKind::Data };
        Self::new(kind, e)
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let kind = if matches!(e, CheckpointError::Io(_)) { ErrorKind::Io } else { ErrorKind::Data };
        Self::new(kind, e)
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        Self::data(e)
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "probekit", version, about = "Probe frozen contextual word representations")]
struct Cli {
    /// Global seed; falls back to PROBEKIT_SEED, then 0.
    #[arg(long, global = true, env = "PROBEKIT_SEED", default_value_t = 0)]
    seed: u64,
    /// Upper bound on parallel training jobs.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a corpus and compile a probing dataset.
    Compile(CompileArgs),
    /// Train and evaluate one probe on one layer (or the scalar mix).
    Train(TrainArgs),
    /// One probe per layer plus a scalar-mix probe.
    Sweep(SweepArgs),
    /// Retrain language-model softmaxes on each frozen layer.
    BilmProbe(BilmArgs),
    /// Pretrain the small contextualizer and optionally dump a store.
    Pretrain(PretrainArgs),
    /// Pretraining-transfer matrix from a config file.
    Transfer(TransferArgs),
    /// Tables or heatmaps from finished runs.
    Report(ReportArgs),
}

#[derive(Debug, Args, Default, Clone)]
struct TrainFlags {
    /// Config file (TOML or JSON) with a `[train]` section.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSection {
    lr: Option<f64>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    batch_size: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
struct TrainOnlyConfig {
    #[serde(default)]
    train: TrainSection,
}

fn train_config(seed: u64, section: &TrainSection, flags: &TrainFlags) -> CliResult<TrainConfig> {
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        lr: flags.lr.or(section.lr).unwrap_or(d.lr),
        max_epochs: flags.epochs.or(section.max_epochs).unwrap_or(d.max_epochs),
        patience: flags.patience.or(section.patience).unwrap_or(d.patience),
        batch_size: flags.batch_size.or(section.batch_size).unwrap_or(d.batch_size),
        seed: section.seed.unwrap_or(seed),
    };
    cfg.validate().map_err(CliError::usage)?;
    Ok(cfg)
}

fn flags_train_config(seed: u64, flags: &TrainFlags) -> CliResult<TrainConfig> {
    let section = match &flags.config {
        Some(p) => load_config::<TrainOnlyConfig>(p)?.train,
        None => TrainSection::default(),
    };
    train_config(seed, &section, flags)
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InputFormat {
    Conllu,
    Ptb,
    Columns,
    Sdp,
    Jsonl,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CompileTask {
    Upos,
    Xpos,
    Parent,
    Gparent,
    Ggparent,
    Semtag,
    Bio,
    CoordBio,
    SparseClass,
    SparseRegression,
    SynArcClassification,
    SynArcPrediction,
    SemArcClassification,
    SemArcPrediction,
    CorefArcPrediction,
}

#[derive(Debug, Args)]
struct CompileArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    format: InputFormat,
    #[arg(long, value_enum)]
    task: CompileTask,
    #[arg(long)]
    out: PathBuf,
    /// Dataset name (defaults to the compiler's name).
    #[arg(long)]
    name: Option<String>,
    /// Column layout for `--format columns`.
    #[arg(long, default_value_t = 0)]
    token_col: usize,
    #[arg(long)]
    label_col: Option<usize>,
    /// Tab-separated columns instead of whitespace.
    #[arg(long)]
    tab: bool,
    #[arg(long, default_value_t = 10)]
    dev_percent: usize,
    #[arg(long, default_value_t = 10)]
    test_percent: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    task: PathBuf,
    #[arg(long, default_value = "linear")]
    probe: String,
    /// Layer index or `mix`.
    #[arg(long)]
    layer: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long, default_value = "linear")]
    probe: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct BilmArgs {
    #[arg(long)]
    store: PathBuf,
    /// One whitespace-tokenized sentence per line, aligned with the store.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    vocab_size: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ObjectiveKind {
    Bilm,
    Supervised,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[arg(long, value_enum)]
    objective: ObjectiveKind,
    /// Sentence file for the BiLM objective.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Compiled dataset for the supervised objective.
    #[arg(long)]
    task: Option<PathBuf>,
    /// Sentence file to encode into `store.cwrs` after pretraining.
    #[arg(long)]
    dump: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    vocab_size: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Debug, Args)]
struct TransferArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    Svg,
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Run directories (searched recursively for metrics.json) or files.
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: ReportFormat,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::usage(first));
            return ErrorKind::Usage.code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.kind.code()
        }
    }
}

fn execute(cli: &Cli) -> CliResult<()> {
    let jobs = cli.jobs as usize;
    match &cli.command {
        Command::Compile(a) => compile(cli.seed, a),
        Command::Train(a) => train(cli.seed, a),
        Command::Sweep(a) => sweep(cli.seed, jobs, a),
        Command::BilmProbe(a) => bilm(cli.seed, a),
        Command::Pretrain(a) => pretrain_cmd(cli.seed, a),
        Command::Transfer(a) => transfer(cli.seed, jobs, a),
        Command::Report(a) => report(a),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn make_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map(|s| s + "\n").map_err(CliError::data)
}

fn load_config<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = read_text(path)?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(CliError::data)
    } else {
        toml::from_str(&text).map_err(CliError::data)
    };
    parsed.map_err(|e| e.at(path))
}

/// `pos.jsonl` → `pos.vocab.json`
pub fn sidecar_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("vocab.json")
}

pub fn load_task(path: &Path) -> CliResult<TaskDataset> {
    let records = read_text(path)?;
    let side = sidecar_path(path);
    let vocab = read_text(&side)?;
    read_dataset(records.as_bytes(), &vocab).map_err(|e| CliError::from(e).at(path))
}

fn open_store(path: &Path) -> CliResult<ReprStore> {
    ReprStore::open(path).map_err(|e| CliError::from(e).at(path))
}

/// Whitespace-tokenized sentences, one per non-blank line.
pub fn read_sentences(path: &Path) -> CliResult<Vec<Vec<String>>> {
    let sents: Vec<Vec<String>> = read_text(path)?
        .lines()
        .map(|l| l.split_whitespace().map(String::from).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect();
    if sents.is_empty() {
        return Err(CliError::data("no sentences").at(path));
    }
    Ok(sents)
}

fn parse_arch(name: &str) -> CliResult<Arch> {
    Arch::parse(name).ok_or_else(|| {
        CliError::usage(format!("unknown probe {name:?} (linear, mlp1024, lstm200_linear, bilstm512_mlp1024)"))
    })
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' }).collect()
}

fn compile(seed: u64, a: &CompileArgs) -> CliResult<()> {
    let text = read_text(&a.input)?;
    let at = |e: IngestError| CliError::from(e).at(&a.input);
    let corpus = match a.format {
        InputFormat::Conllu => parse_conllu(&text),
        InputFormat::Ptb => parse_ptb_trees(&text),
        InputFormat::Sdp => parse_sdp(&text),
        InputFormat::Jsonl => parse_jsonl(&text).map(|(c, reduced)| {
            if reduced {
                log::warn!("{}: span mentions reduced to their final token", a.input.display());
            }
            c
        }),
        InputFormat::Columns => {
            let label_col = a.label_col.ok_or_else(|| CliError::usage("--format columns needs --label-col"))?;
            let separator = if a.tab { Separator::Tab } else { Separator::Whitespace };
            parse_conll_columns(&text, ColumnSchema { token_col: a.token_col, label_col, separator })
        }
    }
    .map_err(at)?;
    let ds = match a.task {
        CompileTask::Upos => compile_token_task(&corpus, LabelSource::Upos),
        CompileTask::Xpos => compile_token_task(&corpus, LabelSource::Xpos),
        CompileTask::Parent => compile_token_task(&corpus, LabelSource::Ancestor(1)),
        CompileTask::Gparent => compile_token_task(&corpus, LabelSource::Ancestor(2)),
        CompileTask::Ggparent => compile_token_task(&corpus, LabelSource::Ancestor(3)),
        CompileTask::Semtag => compile_token_task(&corpus, LabelSource::Semtag),
        CompileTask::Bio => compile_token_task(&corpus, LabelSource::Bio),
        CompileTask::CoordBio => compile_token_task_filtered(&corpus, LabelSource::Bio, SentenceFilter::CoordinationOnly),
        CompileTask::SparseClass => compile_sparse_task(&corpus, TargetKind::Classification),
        CompileTask::SparseRegression => compile_sparse_task(&corpus, TargetKind::Regression),
        CompileTask::SynArcClassification => compile_dep_arc_classification(&corpus, ArcSource::Syntactic),
        CompileTask::SynArcPrediction => compile_dep_arc_prediction(&corpus, ArcSource::Syntactic, seed),
        CompileTask::SemArcClassification => compile_dep_arc_classification(&corpus, ArcSource::Semantic),
        CompileTask::SemArcPrediction => compile_dep_arc_prediction(&corpus, ArcSource::Semantic, seed),
        CompileTask::CorefArcPrediction => compile_coref_arc_prediction(&corpus, seed),
    }
    .map_err(at)?;
    let mut ds = ds;
    if let Some(name) = &a.name {
        ds.name = name.clone();
    }
    let policy = SplitPolicy::Random { seed, dev_percent: a.dev_percent, test_percent: a.test_percent };
    let ds = split_dataset(ds, &policy).map_err(at)?;
    make_dir(&a.out)?;
    let records_path = a.out.join(format!("{}.jsonl", sanitize(&ds.name)));
    let mut records = Vec::new();
    let mut vocab = Vec::new();
    write_dataset(&ds, &mut records, &mut vocab)?;
    write_file(&records_path, records)?;
    write_file(&sidecar_path(&records_path), vocab)
}

fn train(seed: u64, a: &TrainArgs) -> CliResult<()> {
    let cfg = flags_train_config(seed, &a.train)?;
    let arch = parse_arch(&a.probe)?;
    let store = open_store(&a.store)?;
    let ds = load_task(&a.task)?;
    let input = if a.layer == "mix" {
        InputSource::ScalarMix(store.num_layers())
    } else {
        InputSource::Layer(a.layer.parse().map_err(|_| CliError::usage(format!("--layer {:?} is neither an index nor mix", a.layer)))?)
    };
    let (report, trained) = run_probe(&ds, &store, arch, input, &cfg).map_err(|e| CliError::from(e).at(&a.task))?;
    let split = if ds.splits.test.is_empty() { Split::Dev } else { Split::Test };
    let (_, preds) = evaluate(&trained, &ds, split, &store)?;
    make_dir(&a.out)?;
    write_file(&a.out.join("metrics.json"), to_json(&report)?)?;
    let mut lines = String::new();
    for p in &preds {
        lines.push_str(&serde_json::to_string(p).map_err(CliError::data)?);
        lines.push('\n');
    }
    write_file(&a.out.join("predictions.jsonl"), lines)?;
    let ckpt = a.out.join("probe.ckpt");
    save_probe(&ckpt, &trained.model, cfg.seed).map_err(|e| CliError::from(e).at(&ckpt))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridConfig {
    #[serde(default)]
    train: TrainSection,
    #[serde(rename = "run")]
    runs: Vec<GridRun>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridRun {
    store: PathBuf,
    tasks: Vec<PathBuf>,
    #[serde(default = "default_probes")]
    probes: Vec<String>,
}

fn default_probes() -> Vec<String> {
    vec!["linear".into()]
}

fn sweep_one(store: &ReprStore, task: &Path, arch: Arch, cfg: &TrainConfig, jobs: usize, out: &Path) -> CliResult<()> {
    let ds = load_task(task)?;
    let result = sweep_layers(&ds, store, arch, cfg, jobs).map_err(|e| CliError::from(e).at(task))?;
    let reports: Vec<RunReport> = result.layers.iter().cloned().chain(std::iter::once(result.mix.clone())).collect();
    make_dir(out)?;
    write_file(&out.join("metrics.json"), to_json(&reports)?)?;
    write_file(&out.join("heatmap_row.csv"), heatmap_row_csv(&reports)?)?;
    let labels: Vec<String> = reports.iter().map(|r| r.layer.label()).collect();
    let column: Vec<Vec<f64>> = reports.iter().map(|r| vec![r.value]).collect();
    let title = format!("{} / {}", result.mix.representation, arch.name());
    write_file(&out.join("heatmap.svg"), emit_heatmap(&title, &column, &labels, &[ds.name.clone()])?)
}

fn sweep(seed: u64, jobs: usize, a: &SweepArgs) -> CliResult<()> {
    if let Some(config) = &a.train.config {
        let grid: GridConfig = load_config(config)?;
        if a.store.is_some() || a.task.is_some() {
            return Err(CliError::usage("--store/--task cannot be combined with a grid --config"));
        }
        let cfg = train_config(seed, &grid.train, &a.train)?;
        let base = config.parent().unwrap_or(Path::new("."));
        for run in &grid.runs {
            let store_path = base.join(&run.store);
            let store = open_store(&store_path)?;
            let rep = sanitize(&store.header().model_name);
            for probe in &run.probes {
                let arch = parse_arch(probe)?;
                for task in &run.tasks {
                    let task_path = base.join(task);
                    let stem = task_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    let out = a.out.join(&rep).join(sanitize(&stem)).join(arch.name());
                    sweep_one(&store, &task_path, arch, &cfg, jobs, &out)?;
                }
            }
        }
        return Ok(());
    }
    let (Some(store_path), Some(task)) = (&a.store, &a.task) else {
        return Err(CliError::usage("sweep needs --store and --task, or a grid --config"));
    };
    let cfg = train_config(seed, &TrainSection::default(), &a.train)?;
    let arch = parse_arch(&a.probe)?;
    let store = open_store(store_path)?;
    sweep_one(&store, task, arch, &cfg, jobs, &a.out)
}

fn bilm(seed: u64, a: &BilmArgs) -> CliResult<()> {
    let cfg = flags_train_config(seed, &a.train)?;
    let store = open_store(&a.store)?;
    let corpus = read_sentences(&a.corpus)?;
    let report = bilm_probe(&store, &corpus, a.vocab_size, &cfg).map_err(|e| CliError::from(e).at(&a.corpus))?;
    make_dir(&a.out)?;
    write_file(&a.out.join("bilm.json"), to_json(&report)?)?;
    let series = vec![
        ("forward".to_string(), report.layers.iter().map(|l| l.fwd_ppl).collect()),
        ("backward".to_string(), report.layers.iter().map(|l| l.bwd_ppl).collect()),
        ("average".to_string(), report.layers.iter().map(|l| l.avg_ppl).collect()),
    ];
    let svg = emit_perplexity_curves(&format!("{} perplexity by layer", report.representation), &series)?;
    write_file(&a.out.join("perplexity.svg"), svg)
}

fn vocab_over<'a>(sets: impl Iterator<Item = &'a Vec<Vec<String>>>, size: usize) -> LmVocab {
    let all: Vec<&[String]> = sets.flat_map(|s| s.iter().map(Vec::as_slice)).collect();
    LmVocab::build(all.into_iter(), size)
}

#[derive(Debug, Serialize)]
struct PretrainOutput {
    checksum: u64,
    log: crate::minictx::PretrainLog,
}

fn pretrain_cmd(seed: u64, a: &PretrainArgs) -> CliResult<()> {
    let cfg = flags_train_config(seed, &a.train)?;
    let (objective, source) = match (a.objective, &a.corpus, &a.task) {
        (ObjectiveKind::Bilm, Some(c), None) => (Objective::Bilm { corpus: read_sentences(c)? }, c),
        (ObjectiveKind::Supervised, None, Some(t)) => (Objective::Supervised { dataset: load_task(t)? }, t),
        (ObjectiveKind::Bilm, _, _) => return Err(CliError::usage("--objective bilm takes --corpus only")),
        (ObjectiveKind::Supervised, _, _) => return Err(CliError::usage("--objective supervised takes --task only")),
    };
    let dump = a.dump.as_deref().map(read_sentences).transpose()?;
    let train_sents = match &objective {
        Objective::Bilm { corpus } => corpus,
        Objective::Supervised { dataset } => &dataset.sentences,
    };
    let vocab = vocab_over(std::iter::once(train_sents).chain(dump.as_ref()), a.vocab_size);
    let ctx_cfg = CtxConfig { vocab, embed_dim: a.hidden, hidden: a.hidden, seed };
    let init = init_contextualizer::<f32>(ctx_cfg)?;
    let spec = PretrainSpec { name: format!("{:?}", a.objective).to_lowercase(), objective, train: cfg };
    let (ctx, log) = pretrain(&init, &spec).map_err(|e| CliError::from(e).at(source))?;
    make_dir(&a.out)?;
    let ckpt = a.out.join("ctx.ckpt");
    save_contextualizer(&ckpt, &ctx).map_err(|e| CliError::from(e).at(&ckpt))?;
    write_file(&a.out.join("pretrain.json"), to_json(&PretrainOutput { checksum: ctx.checksum(), log })?)?;
    if let Some(sents) = &dump {
        write_file(&a.out.join("store.cwrs"), freeze_and_dump(&ctx, sents)?)?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransferConfig {
    #[serde(default)]
    train: TrainSection,
    #[serde(default = "default_hidden")]
    hidden: usize,
    #[serde(default = "default_vocab")]
    vocab_size: usize,
    #[serde(default = "default_probe")]
    probe: String,
    targets: Vec<PathBuf>,
    #[serde(default)]
    pretrain: Vec<PretrainEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PretrainEntry {
    name: String,
    objective: ObjectiveKind,
    corpus: Option<PathBuf>,
    task: Option<PathBuf>,
}

fn default_hidden() -> usize {
    128
}

fn default_vocab() -> usize {
    DEFAULT_VOCAB_SIZE
}

fn default_probe() -> String {
    "linear".into()
}

/// Rows = pretraining, columns = layer columns, values = target averages.
pub fn transfer_csv(m: &TransferMatrix) -> CliResult<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["pretraining".to_string()];
    header.extend(m.columns.iter().cloned());
    header.push("layer_average".into());
    w.write_record(&header).map_err(CliError::data)?;
    for r in &m.rows {
        let mut rec = vec![r.pretraining.clone()];
        rec.extend(r.average.iter().map(|&v| format_2dp(v)));
        rec.push(format_2dp(r.layer_average()));
        w.write_record(&rec).map_err(CliError::data)?;
    }
    let bytes = w.into_inner().map_err(CliError::data)?;
    String::from_utf8(bytes).map_err(CliError::data)
}

fn transfer(seed: u64, jobs: usize, a: &TransferArgs) -> CliResult<()> {
    let conf: TransferConfig = load_config(&a.config)?;
    let cfg = train_config(seed, &conf.train, &TrainFlags::default())?;
    let arch = parse_arch(&conf.probe)?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let targets = conf.targets.iter().map(|t| load_task(&base.join(t))).collect::<CliResult<Vec<_>>>()?;
    if targets.is_empty() {
        return Err(CliError::usage("transfer config lists no targets").at(&a.config));
    }
    let mut specs = Vec::new();
    for p in &conf.pretrain {
        let objective = match (p.objective, &p.corpus, &p.task) {
            (ObjectiveKind::Bilm, Some(c), None) => Objective::Bilm { corpus: read_sentences(&base.join(c))? },
            (ObjectiveKind::Supervised, None, Some(t)) => Objective::Supervised { dataset: load_task(&base.join(t))? },
            _ => {
                return Err(CliError::usage(format!("pretrain entry {:?} needs exactly corpus (bilm) or task (supervised)", p.name))
                    .at(&a.config))
            }
        };
        specs.push(PretrainSpec { name: p.name.clone(), objective, train: cfg });
    }
    let vocab = {
        let mut sets: Vec<&Vec<Vec<String>>> = targets.iter().map(|t| &t.sentences).collect();
        for s in &specs {
            sets.push(match &s.objective {
                Objective::Bilm { corpus } => corpus,
                Objective::Supervised { dataset } => &dataset.sentences,
            });
        }
        vocab_over(sets.into_iter(), conf.vocab_size)
    };
    let ctx_cfg = CtxConfig { vocab, embed_dim: conf.hidden, hidden: conf.hidden, seed };
    let m = transfer_matrix(&ctx_cfg, &specs, &targets, arch, &cfg, jobs).map_err(|e| CliError::from(e).at(&a.config))?;
    make_dir(&a.out)?;
    write_file(&a.out.join("transfer.json"), to_json(&m)?)?;
    write_file(&a.out.join("transfer.csv"), transfer_csv(&m)?)?;
    let labels: Vec<String> = m.rows.iter().map(|r| r.pretraining.clone()).collect();
    let values: Vec<Vec<f64>> = m.rows.iter().map(|r| r.average.clone()).collect();
    write_file(&a.out.join("transfer.svg"), emit_heatmap("transfer (mean over targets)", &values, &labels, &m.columns)?)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MetricsFile {
    Many(Vec<RunReport>),
    One(Box<RunReport>),
}

fn collect_metric_files(path: &Path, found: &mut Vec<PathBuf>) -> CliResult<()> {
    if path.is_file() {
        found.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| CliError::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| CliError::io(path, err)))
        .collect::<CliResult<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_metric_files(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "metrics.json") {
            found.push(p);
        }
    }
    Ok(())
}

pub fn load_reports(inputs: &[PathBuf]) -> CliResult<Vec<RunReport>> {
    let mut reports = Vec::new();
    for input in inputs {
        if !input.exists() {
            return Err(CliError::io(input, "no such file or directory"));
        }
        let mut files = Vec::new();
        collect_metric_files(input, &mut files)?;
        if files.is_empty() {
            return Err(CliError::data("no metrics.json found").at(input));
        }
        for f in files {
            let parsed: MetricsFile = serde_json::from_str(&read_text(&f)?).map_err(|e| CliError::data(e).at(&f))?;
            match parsed {
                MetricsFile::Many(v) => reports.extend(v),
                MetricsFile::One(r) => reports.push(*r),
            }
        }
    }
    Ok(reports)
}

fn report(a: &ReportArgs) -> CliResult<()> {
    let reports = load_reports(&a.inputs)?;
    let table = build_table(&reports);
    make_dir(&a.out)?;
    match a.format {
        ReportFormat::Csv => write_file(&a.out.join("tables.csv"), table_csv(&table)?),
        ReportFormat::Json => write_file(&a.out.join("tables.json"), table_json(&table)?),
        ReportFormat::Svg => {
            let mut reps: Vec<&str> = Vec::new();
            for r in &table.rows {
                if !reps.contains(&r.representation.as_str()) {
                    reps.push(&r.representation);
                }
            }
            for rep in reps {
                let (labels, values) = layer_task_grid(&table, rep);
                let svg = emit_heatmap(rep, &values, &labels, &table.tasks)?;
                write_file(&a.out.join(format!("heatmap_{}.svg", sanitize(rep))), svg)?;
            }
            Ok(())
        }
    }
}
