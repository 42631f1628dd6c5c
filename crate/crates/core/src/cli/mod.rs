//! `roi-eval` command-line interface.
//!
//! Exit codes: 0 success, 2 unreadable/unwritable files, 3 extraction or
//! embedding service failures, 4 validation errors (bad arguments, schema
//! violations, malformed annotations).

pub mod pipeline;

use std::ffi::OsString;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::corpus::{self, SplitConfig};
use crate::embedding::{
    EmbedderConfig, EmbedderProvider, LocalHashEmbedder, EMBEDDER_ENDPOINT_ENV,
};
use crate::extraction::{
    ExtractorBackend, ExtractorConfig, DEFAULT_PROMPT, EXTRACTOR_ENDPOINT_ENV,
};
use crate::matching::{self, ThresholdGrid, DEFAULT_TAU};
use crate::roigraph::{self, GraphConfig, GraphError, NodeSpec};
use pipeline::{
    EvaluationReport, PipelineError, PredictionRecord, RunProvenance, SweepReport, ToolkitInfo,
};

#[derive(Debug, Parser)]
#[command(name = "roi-eval", version, about = "RoI-grounded PET/CT report evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score predictions against a ground-truth corpus at one threshold.
    Evaluate(EvaluateArgs),
    /// Score predictions across a grid of thresholds.
    Sweep(SweepArgs),
    /// Run structured extraction over generated reports.
    Extract(ExtractArgs),
    /// Validate an annotation file (JSON corpus or one annotation per line).
    ParseGt(ParseGtArgs),
    /// Print the anatomical slice ranges for a volume.
    Split(SplitArgs),
    /// Build the RoI relational graph from a nodes file.
    Graph(GraphArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbedderChoice {
    Local,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendChoice {
    Llm,
    Rules,
}

#[derive(Debug, Clone, Args)]
pub struct EmbedderArgs {
    /// Field embedder: deterministic local hashing or an HTTP service.
    #[arg(long, value_enum, default_value = "local")]
    pub embedder: EmbedderChoice,
    /// Embedding service URL (remote embedder).
    #[arg(long, env = EMBEDDER_ENDPOINT_ENV)]
    pub embedder_endpoint: Option<String>,
    /// Embedding model name sent to the service.
    #[arg(long)]
    pub embedder_model: Option<String>,
    /// Vector dimension (local default 256; checked against remote output).
    #[arg(long)]
    pub dimension: Option<usize>,
    /// Character n-gram length of the local embedder.
    #[arg(long, default_value_t = LocalHashEmbedder::DEFAULT_NGRAM)]
    pub ngram: usize,
    /// Embedding cache entries.
    #[arg(long, default_value_t = 4096)]
    pub cache_capacity: usize,
    /// Texts per embedding request.
    #[arg(long, default_value_t = 64)]
    pub embed_batch_size: usize,
}

impl EmbedderArgs {
    pub fn config(&self) -> EmbedderConfig {
        let base = EmbedderConfig::default();
        match self.embedder {
            EmbedderChoice::Local => EmbedderConfig {
                provider: EmbedderProvider::LocalHash,
                dimension: Some(self.dimension.unwrap_or(LocalHashEmbedder::DEFAULT_DIMENSION)),
                ngram_size: self.ngram,
                cache_capacity: self.cache_capacity,
                batch_size: self.embed_batch_size,
                ..base
            },
            EmbedderChoice::Remote => EmbedderConfig {
                provider: EmbedderProvider::Remote,
                endpoint: self.embedder_endpoint.clone(),
                model_name: self.embedder_model.clone(),
                dimension: self.dimension,
                ngram_size: self.ngram,
                cache_capacity: self.cache_capacity,
                batch_size: self.embed_batch_size,
                ..base
            },
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ExtractorArgs {
    /// Extraction backend; required only when predictions carry raw text.
    #[arg(long, value_enum)]
    pub backend: Option<BackendChoice>,
    /// Extraction service URL (llm backend).
    #[arg(long, env = EXTRACTOR_ENDPOINT_ENV)]
    pub endpoint: Option<String>,
    /// Extraction model name (llm backend).
    #[arg(long)]
    pub model: Option<String>,
    /// Surface-form to field lexicon, JSON (rules backend).
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// File holding the extraction prompt template.
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    /// Retries after transport errors, 429 and 5xx responses.
    #[arg(long, default_value_t = 2)]
    pub max_retries: u32,
    /// Request timeout in seconds.
    #[arg(long, default_value_t = 60)]
    pub timeout: u64,
}

impl ExtractorArgs {
    fn config(&self) -> Result<Option<ExtractorConfig>, PipelineError> {
        let Some(backend) = self.backend else {
            return Ok(None);
        };
        let prompt_template = match &self.prompt_file {
            Some(path) => pipeline::read_file(path)?,
            None => DEFAULT_PROMPT.to_owned(),
        };
        Ok(Some(ExtractorConfig {
            backend: match backend {
                BackendChoice::Llm => ExtractorBackend::RemoteLlm,
                BackendChoice::Rules => ExtractorBackend::Rules,
            },
            endpoint: self.endpoint.clone(),
            model_name: self.model.clone(),
            prompt_template,
            max_retries: self.max_retries,
            timeout_secs: self.timeout,
            lexicon_path: self.lexicon.clone(),
        }))
    }
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Ground-truth corpus (JSON).
    #[arg(long)]
    pub gt: PathBuf,
    /// Predictions: pre-extracted RoIs and/or raw report text (JSON).
    #[arg(long)]
    pub pred: PathBuf,
    #[command(flatten)]
    pub embedder: EmbedderArgs,
    #[command(flatten)]
    pub extractor: ExtractorArgs,
    /// Worker threads for per-report work.
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    /// Similarity threshold for a matched pair to count.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    /// Evaluation report (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Write the text summary here instead of stdout.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 0.50)]
    pub grid_min: f64,
    #[arg(long, default_value_t = 0.95)]
    pub grid_max: f64,
    #[arg(long, default_value_t = 0.05)]
    pub grid_step: f64,
    /// Sweep table (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub extractor: ExtractorArgs,
    /// JSON array of {report_id, report_text}.
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Prediction records with extracted RoIs (JSON).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ParseGtArgs {
    /// `.json` corpus, or any other file with one annotation per line.
    #[arg(long = "in")]
    pub input: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// Number of axial slices in the volume.
    #[arg(long)]
    pub slices: usize,
    #[arg(long, default_value_t = 15)]
    pub overlap: usize,
    #[arg(long, default_value_t = 0.25)]
    pub head_frac: f64,
    #[arg(long, default_value_t = 0.60)]
    pub chest_end_frac: f64,
}

#[derive(Debug, Clone, Args)]
pub struct GraphArgs {
    /// JSON array of {bbox, feature?, ct?, pet?}.
    #[arg(long)]
    pub nodes: PathBuf,
    /// Binary feature sidecar (u32 count, u32 dim, f32 values; little-endian).
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Centroid distance threshold in voxels.
    #[arg(long)]
    pub tau_d: f64,
    /// Feature cosine threshold.
    #[arg(long)]
    pub tau_s: f64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Error carrying its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError {
            code: e.exit_code(),
            message: e.to_string(),
        }
    }
}

impl From<GraphError> for CliError {
    fn from(e: GraphError) -> Self {
        let code = if matches!(e, GraphError::Io(_)) { 2 } else { 4 };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn validation(message: impl Into<String>) -> CliError {
    CliError {
        code: 4,
        message: message.into(),
    }
}

fn write_output(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError {
        code: 2,
        message: format!("cannot write {}: {e}", path.display()),
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

fn thread_pool(parallelism: usize) -> Result<rayon::ThreadPool, CliError> {
    if parallelism == 0 {
        return Err(validation("--parallelism must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| validation(e.to_string()))
}

struct Prepared {
    gt: Vec<corpus::ReportRecord>,
    preds: Vec<PredictionRecord>,
    embedder: std::sync::Arc<dyn crate::embedding::Embedder>,
    alignments: Vec<matching::ReportAlignment>,
    provenance: RunProvenance,
}

fn prepare(input: &InputArgs, command: &str, pool: &rayon::ThreadPool) -> Result<Prepared, CliError> {
    let gt = corpus::load_corpus(&input.gt).map_err(PipelineError::from)?;
    let raw_preds = pipeline::load_predictions(&input.pred)?;
    let embedder_config = input.embedder.config();
    let embedder = embedder_config.build().map_err(PipelineError::from)?;
    let extractor = match input.extractor.config()? {
        Some(cfg) => Some(cfg.build().map_err(|source| PipelineError::Extraction {
            report_id: String::new(),
            source,
        })?),
        None => None,
    };
    let (preds, source, alignments, missing) = pool.install(|| {
        let (preds, source) = pipeline::resolve_predictions(&raw_preds, extractor.as_deref())?;
        let (alignments, missing) = pipeline::align_corpus(&gt, &preds, embedder.as_ref())?;
        Ok::<_, PipelineError>((preds, source, alignments, missing))
    })?;
    let provenance = RunProvenance {
        command: command.into(),
        gt_path: input.gt.display().to_string(),
        pred_path: input.pred.display().to_string(),
        tau: None,
        grid: None,
        embedder: embedder.descriptor(),
        embedder_config,
        extractor: extractor.as_ref().map(|e| e.descriptor()),
        prediction_source: source,
        missing_predictions: missing,
    };
    Ok(Prepared {
        gt,
        preds,
        embedder,
        alignments,
        provenance,
    })
}

/// Evaluate at a single threshold. Nothing is written unless every stage
/// succeeds.
pub fn run_evaluate(args: &EvaluateArgs) -> Result<EvaluationReport, CliError> {
    let tau = matching::validate_tau(args.tau).map_err(|e| validation(e.to_string()))?;
    let pool = thread_pool(args.input.parallelism)?;
    let mut prepared = prepare(&args.input, "evaluate", &pool)?;
    prepared.provenance.tau = Some(tau);
    let (per_report, corpus) = pipeline::score_corpus(&prepared.alignments, tau)?;
    let nlp = pool.install(|| {
        pipeline::nlp_metrics(&prepared.gt, &prepared.preds, prepared.embedder.as_ref())
    })?;
    let report = EvaluationReport {
        toolkit: ToolkitInfo::current(),
        config: prepared.provenance,
        corpus,
        nlp,
        per_report,
    };
    let summary = pipeline::render_summary(&report);
    write_output(&args.out, &to_json(&report))?;
    match &args.summary {
        Some(path) => write_output(path, &summary)?,
        None => print!("{summary}"),
    }
    Ok(report)
}

/// Threshold sweep: one assignment per report, thresholded per grid value.
pub fn run_sweep(args: &SweepArgs) -> Result<SweepReport, CliError> {
    let grid = ThresholdGrid {
        min: args.grid_min,
        max: args.grid_max,
        step: args.grid_step,
    };
    grid.values().map_err(|e| validation(e.to_string()))?;
    let pool = thread_pool(args.input.parallelism)?;
    let mut prepared = prepare(&args.input, "sweep", &pool)?;
    prepared.provenance.grid = Some(grid);
    let rows = matching::sweep_thresholds(&prepared.alignments, &grid)
        .map_err(PipelineError::from)?;
    let report = SweepReport {
        toolkit: ToolkitInfo::current(),
        config: prepared.provenance,
        rows,
    };
    write_output(&args.out, &to_json(&report))?;
    print!("{}", pipeline::render_sweep(&report));
    Ok(report)
}

pub fn run_extract(args: &ExtractArgs) -> Result<Vec<PredictionRecord>, CliError> {
    let config = args
        .extractor
        .config()?
        .ok_or_else(|| validation("extract requires --backend"))?;
    let extractor = config.build().map_err(|source| PipelineError::Extraction {
        report_id: String::new(),
        source,
    })?;
    let records = pipeline::load_predictions(&args.input)?;
    let stripped: Vec<PredictionRecord> = records
        .into_iter()
        .map(|r| PredictionRecord { rois: None, ..r })
        .collect();
    let pool = thread_pool(args.parallelism)?;
    let (resolved, _) =
        pool.install(|| pipeline::resolve_predictions(&stripped, Some(extractor.as_ref())))?;
    write_output(&args.out, &to_json(&resolved))?;
    Ok(resolved)
}

/// Validate annotations; returns the number of problems found.
pub fn run_parse_gt(args: &ParseGtArgs) -> Result<usize, CliError> {
    let text = pipeline::read_file(&args.input)?;
    let is_json = args
        .input
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        return match corpus::parse_corpus(&text) {
            Ok(records) => {
                let rois: usize = records.iter().map(|r| r.rois.len()).sum();
                println!("ok: {} reports, {} RoIs", records.len(), rois);
                Ok(0)
            }
            Err(e) => {
                println!("error: {e}");
                Ok(1)
            }
        };
    }
    let mut problems = 0;
    let mut valid = 0;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match corpus::parse_annotation(line) {
            Ok(_) => valid += 1,
            Err(e) => {
                problems += 1;
                println!(
                    "line {}: field {}, byte {}: {e}",
                    n + 1,
                    e.field(),
                    e.offset()
                );
            }
        }
    }
    println!("{valid} valid, {problems} invalid");
    Ok(problems)
}

pub fn run_split(args: &SplitArgs) -> Result<corpus::RegionSplit, CliError> {
    let config = SplitConfig {
        overlap_slices: args.overlap,
        head_fraction: args.head_frac,
        chest_end_fraction: args.chest_end_frac,
    };
    let split = corpus::compute_region_ranges(args.slices, &config)
        .map_err(|e| validation(e.to_string()))?;
    print!("{}", to_json(&split));
    Ok(split)
}

pub fn run_graph(args: &GraphArgs) -> Result<roigraph::RoIGraph, CliError> {
    let config = GraphConfig::new(args.tau_d, args.tau_s)?;
    let text = pipeline::read_file(&args.nodes)?;
    let specs: Vec<NodeSpec> =
        serde_json::from_str(&text).map_err(|e| validation(format!("nodes file: {e}")))?;
    let sidecar = args
        .features
        .as_deref()
        .map(roigraph::load_sidecar)
        .transpose()?;
    let nodes = roigraph::nodes_from_specs(&specs, sidecar)?;
    let graph = roigraph::build_graph(nodes, config)?;
    write_output(&args.out, &to_json(&graph))?;
    Ok(graph)
}

pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Evaluate(a) => run_evaluate(a).map(drop),
        Command::Sweep(a) => run_sweep(a).map(drop),
        Command::Extract(a) => run_extract(a).map(drop),
        Command::ParseGt(a) => match run_parse_gt(a)? {
            0 => Ok(()),
            n => Err(validation(format!("{n} invalid annotation(s)"))),
        },
        Command::Split(a) => run_split(a).map(drop),
        Command::Graph(a) => run_graph(a).map(drop),
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 4 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("roi-eval: {}", e.message);
            e.code
        }
    }
}
