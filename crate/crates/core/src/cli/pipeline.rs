//! Corpus-level evaluation: load predictions, extract when needed, align
//! every report, then score at one threshold or across a grid.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, ReportRecord};
use crate::embedding::{Embedder, EmbedderConfig, EmbedderDescriptor, EmbeddingError};
use crate::extraction::{ExtractedRoI, ExtractionError, Extractor, ExtractorDescriptor};
use crate::matching::{self, MatchError, ReportAlignment, SweepRow, ThresholdGrid};
use crate::metrics::text::{self, BleuStats, Prf};
use crate::metrics::{self, CorpusMetrics, MetricsError, ReportScore};

pub const TOOLKIT_NAME: &str = env!("CARGO_PKG_NAME");
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Corpus(CorpusError),
    #[error("predictions file: {0}")]
    Predictions(String),
    #[error("extraction failed for report {report_id:?}: {source}")]
    Extraction {
        report_id: String,
        #[source]
        source: ExtractionError,
    },
    #[error("report {report_id:?}: {source}")]
    Matching {
        report_id: String,
        #[source]
        source: MatchError,
    },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Threshold(#[from] MatchError),
    #[error("{0}")]
    Config(String),
}

impl PipelineError {
    /// 2 for I/O, 3 for external services, 4 for validation.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Io { .. } => 2,
            PipelineError::Corpus(CorpusError::Io { .. }) => 2,
            PipelineError::Extraction { source, .. } if source.is_external() => 3,
            PipelineError::Extraction {
                source: ExtractionError::Io { .. },
                ..
            } => 2,
            PipelineError::Embedding(e) | PipelineError::Metrics(MetricsError::Embedding(e)) => {
                embedding_exit_code(e)
            }
            PipelineError::Matching {
                source: MatchError::Embedding(e),
                ..
            } => embedding_exit_code(e),
            _ => 4,
        }
    }
}

fn embedding_exit_code(e: &EmbeddingError) -> i32 {
    match e {
        EmbeddingError::Transport(_) | EmbeddingError::Protocol(_) => 3,
        _ => 4,
    }
}

impl From<CorpusError> for PipelineError {
    fn from(e: CorpusError) -> Self {
        PipelineError::Corpus(e)
    }
}

/// One generated report: raw text, pre-extracted RoIs, or both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub report_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rois: Option<Vec<ExtractedRoI>>,
}

pub fn parse_predictions(json: &str) -> Result<Vec<PredictionRecord>, PipelineError> {
    let records: Vec<PredictionRecord> =
        serde_json::from_str(json).map_err(|e| PipelineError::Predictions(e.to_string()))?;
    let mut seen = HashSet::new();
    for r in &records {
        if !seen.insert(r.report_id.as_str()) {
            return Err(PipelineError::Predictions(format!(
                "duplicate report_id {:?}",
                r.report_id
            )));
        }
    }
    Ok(records)
}

pub fn read_file(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictionRecord>, PipelineError> {
    parse_predictions(&read_file(path)?)
}

/// How predicted RoIs were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionSource {
    PreExtracted,
    Extracted,
    Mixed,
}

impl PredictionSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PredictionSource::PreExtracted => "pre-extracted",
            PredictionSource::Extracted => "extracted",
            PredictionSource::Mixed => "mixed",
        }
    }
}

/// Run extraction wherever a prediction carries text but no RoIs.
pub fn resolve_predictions(
    preds: &[PredictionRecord],
    extractor: Option<&dyn Extractor>,
) -> Result<(Vec<PredictionRecord>, PredictionSource), PipelineError> {
    let needs: Vec<bool> = preds.iter().map(|p| p.rois.is_none()).collect();
    let extracted_count = needs.iter().filter(|&&n| n).count();
    if extracted_count > 0 && extractor.is_none() {
        return Err(PipelineError::Config(format!(
            "{extracted_count} predictions carry raw text only; configure an extractor (--backend)"
        )));
    }
    let resolved = preds
        .par_iter()
        .map(|p| {
            if p.rois.is_some() {
                return Ok::<_, PipelineError>(p.clone());
            }
            let text = p.report_text.as_deref().ok_or_else(|| {
                PipelineError::Predictions(format!(
                    "report {:?} has neither rois nor report_text",
                    p.report_id
                ))
            })?;
            let rois = extractor
                .expect("checked above")
                .extract(text)
                .map_err(|source| PipelineError::Extraction {
                    report_id: p.report_id.clone(),
                    source,
                })?;
            Ok(PredictionRecord {
                rois: Some(rois),
                ..p.clone()
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let source = match extracted_count {
        0 => PredictionSource::PreExtracted,
        n if n == preds.len() => PredictionSource::Extracted,
        _ => PredictionSource::Mixed,
    };
    Ok((resolved, source))
}

/// Align every ground-truth report against its prediction. Reports without
/// a prediction are aligned against an empty RoI list; predictions for
/// unknown report ids are rejected.
pub fn align_corpus(
    gt: &[ReportRecord],
    preds: &[PredictionRecord],
    embedder: &dyn Embedder,
) -> Result<(Vec<ReportAlignment>, Vec<String>), PipelineError> {
    let known: HashSet<&str> = gt.iter().map(|r| r.report_id.as_str()).collect();
    if let Some(stray) = preds.iter().find(|p| !known.contains(p.report_id.as_str())) {
        return Err(PipelineError::Predictions(format!(
            "prediction for unknown report_id {:?}",
            stray.report_id
        )));
    }
    let by_id: HashMap<&str, &PredictionRecord> =
        preds.iter().map(|p| (p.report_id.as_str(), p)).collect();
    let missing: Vec<String> = gt
        .iter()
        .filter(|r| !by_id.contains_key(r.report_id.as_str()))
        .map(|r| r.report_id.clone())
        .collect();
    let empty = Vec::new();
    let alignments = gt
        .par_iter()
        .map(|report| {
            let pred_rois = by_id
                .get(report.report_id.as_str())
                .and_then(|p| p.rois.as_ref())
                .unwrap_or(&empty);
            matching::align_report(&report.report_id, pred_rois, &report.rois, embedder).map_err(
                |source| PipelineError::Matching {
                    report_id: report.report_id.clone(),
                    source,
                },
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((alignments, missing))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlpMetrics {
    /// Corpus-level BLEU-4 (pooled n-gram statistics).
    pub bleu4: f64,
    /// Mean of per-report BLEU-4.
    pub bleu4_sentence_mean: f64,
    pub rouge1: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub embed_score: Prf,
    pub report_count: usize,
}

/// Text metrics over reports where both sides have non-empty text.
pub fn nlp_metrics(
    gt: &[ReportRecord],
    preds: &[PredictionRecord],
    embedder: &dyn Embedder,
) -> Result<Option<NlpMetrics>, PipelineError> {
    let by_id: HashMap<&str, &PredictionRecord> =
        preds.iter().map(|p| (p.report_id.as_str(), p)).collect();
    let pairs: Vec<(&str, &str)> = gt
        .iter()
        .filter_map(|r| {
            let cand = by_id.get(r.report_id.as_str())?.report_text.as_deref()?;
            let usable = |s: &str| !text::tokenize(s).is_empty();
            (usable(cand) && usable(&r.report_text)).then_some((cand, r.report_text.as_str()))
        })
        .collect();
    if pairs.is_empty() {
        return Ok(None);
    }
    let n = pairs.len() as f64;
    let per_pair = pairs
        .par_iter()
        .map(|&(c, r)| {
            let stats = BleuStats::from_texts(c, r);
            let rouge = text::rouge(c, r);
            let embed = text::embed_score(c, r, embedder)?;
            Ok((stats, rouge, embed))
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    let mut pooled = BleuStats::default();
    let (mut bleu_sum, mut r1, mut rl) = (0.0, 0.0, 0.0);
    let (mut ep, mut er, mut ef) = (0.0, 0.0, 0.0);
    for (stats, rouge, embed) in &per_pair {
        pooled.add(stats);
        bleu_sum += stats.score();
        r1 += rouge.rouge1.f1;
        rl += rouge.rouge_l.f1;
        ep += embed.precision;
        er += embed.recall;
        ef += embed.f1;
    }
    Ok(Some(NlpMetrics {
        bleu4: pooled.score(),
        bleu4_sentence_mean: bleu_sum / n,
        rouge1: r1 / n,
        rouge_l: rl / n,
        embed_score: Prf {
            precision: ep / n,
            recall: er / n,
            f1: ef / n,
        },
        report_count: pairs.len(),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolkitInfo {
    pub name: String,
    pub version: String,
}

impl ToolkitInfo {
    pub fn current() -> Self {
        ToolkitInfo {
            name: TOOLKIT_NAME.into(),
            version: TOOLKIT_VERSION.into(),
        }
    }
}

/// Resolved run configuration echoed into every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunProvenance {
    pub command: String,
    pub gt_path: String,
    pub pred_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<ThresholdGrid>,
    pub embedder: EmbedderDescriptor,
    pub embedder_config: EmbedderConfig,
    pub extractor: Option<ExtractorDescriptor>,
    pub prediction_source: PredictionSource,
    pub missing_predictions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub toolkit: ToolkitInfo,
    pub config: RunProvenance,
    pub corpus: CorpusMetrics,
    pub nlp: Option<NlpMetrics>,
    pub per_report: Vec<ReportScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub toolkit: ToolkitInfo,
    pub config: RunProvenance,
    pub rows: Vec<SweepRow>,
}

/// Score aligned reports at `tau`.
pub fn score_corpus(
    alignments: &[ReportAlignment],
    tau: f64,
) -> Result<(Vec<ReportScore>, CorpusMetrics), PipelineError> {
    let per_report = alignments
        .iter()
        .map(|a| a.score_at(tau))
        .collect::<Result<Vec<_>, _>>()?;
    let corpus = metrics::aggregate_corpus(&per_report)?;
    Ok((per_report, corpus))
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn opt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), pct)
}

/// Aligned plain-text rendering of an evaluation report.
pub fn render_summary(report: &EvaluationReport) -> String {
    let mut out = String::new();
    let c = &report.corpus;
    let _ = writeln!(
        out,
        "{} {}  tau={:.2}  embedder={}/{}  source={}",
        report.toolkit.name,
        report.toolkit.version,
        report.config.tau.unwrap_or(f64::NAN),
        report.config.embedder.provider,
        report.config.embedder.model,
        report.config.prediction_source.as_str(),
    );
    let _ = writeln!(
        out,
        "{:<24} {:>5} {:>5} {:>5} {:>9} {:>9} {:>9} {:>9}",
        "report", "TP", "FP", "FN", "Prec", "Rec", "F1", "RoIQ"
    );
    for r in &report.per_report {
        let cov = &r.coverage;
        let _ = writeln!(
            out,
            "{:<24} {:>5} {:>5} {:>5} {:>9} {:>9} {:>9} {:>9}",
            r.report_id,
            cov.tp,
            cov.fp,
            cov.fn_,
            pct(cov.precision),
            pct(cov.recall),
            pct(cov.f1),
            opt_pct(r.mean_roiq)
        );
    }
    let _ = writeln!(
        out,
        "{:<24} {:>5} {:>5} {:>5} {:>9} {:>9} {:>9} {:>9}",
        "CORPUS",
        c.tp,
        c.fp,
        c.fn_,
        pct(c.precision),
        pct(c.recall),
        pct(c.f1),
        opt_pct(c.mean_roiq)
    );
    if let Some(nlp) = &report.nlp {
        let _ = writeln!(
            out,
            "BLEU-4 {:.2}  (sentence mean {:.2})  ROUGE-1 {:.2}  ROUGE-L {:.2}  embed_score P/R/F1 {:.2}/{:.2}/{:.2}",
            nlp.bleu4,
            nlp.bleu4_sentence_mean,
            nlp.rouge1,
            nlp.rouge_l,
            nlp.embed_score.precision,
            nlp.embed_score.recall,
            nlp.embed_score.f1
        );
    }
    out
}

pub fn render_sweep(report: &SweepReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>6} {:>6} {:>6} {:>6} {:>9} {:>9} {:>9} {:>9}",
        "tau", "TP", "FP", "FN", "Prec", "Rec", "F1", "RoIQ"
    );
    for row in &report.rows {
        let m = &row.metrics;
        let _ = writeln!(
            out,
            "{:>6.2} {:>6} {:>6} {:>6} {:>9} {:>9} {:>9} {:>9}",
            row.tau,
            m.tp,
            m.fp,
            m.fn_,
            pct(m.precision),
            pct(m.recall),
            pct(m.f1),
            opt_pct(m.mean_roiq)
        );
    }
    out
}
