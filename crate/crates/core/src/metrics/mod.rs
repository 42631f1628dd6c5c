//! RoI Coverage, the RoI Quality Index (RoIQ), and corpus aggregation.
//!
//! Coverage treats RoI detection as set retrieval: a thresholded one-to-one
//! match yields TP, and `FP = |P| - TP`, `FN = |G| - TP`. RoIQ scores each
//! matched pair as
//!
//! ```text
//! RoIQ = sqrt(S_region * S_lesion) * mean(S_k for k in valid descriptors)
//! ```
//!
//! where the valid descriptors are the density / morphology / uptake fields
//! that are non-empty in the ground truth. A zero core similarity zeroes the
//! whole score regardless of descriptor quality.

pub mod text;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matching::MatchResult;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl CoverageMetrics {
    /// Precision/recall/F1 from raw counts.
    ///
    /// `tp = fp = fn = 0` (nothing predicted, nothing expected) scores 1.0
    /// everywhere. Any other zero denominator gives 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        if tp + fp + fn_ == 0 {
            return CoverageMetrics {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
                tp,
                fp,
                fn_,
            };
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        CoverageMetrics {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

pub fn coverage(result: &MatchResult) -> CoverageMetrics {
    CoverageMetrics::from_counts(result.tp, result.fp, result.fn_)
}

/// Per-field similarities of one matched pair. Optional descriptors are
/// `None` when the ground truth leaves them empty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeSimilarities {
    pub s_region: f64,
    pub s_lesion: f64,
    pub s_density: Option<f64>,
    pub s_morphology: Option<f64>,
    pub s_uptake: Option<f64>,
}

impl AttributeSimilarities {
    /// Clamp every present value into `[0, 1]`.
    pub fn clamped(self) -> Self {
        let c = |v: f64| v.clamp(0.0, 1.0);
        AttributeSimilarities {
            s_region: c(self.s_region),
            s_lesion: c(self.s_lesion),
            s_density: self.s_density.map(c),
            s_morphology: self.s_morphology.map(c),
            s_uptake: self.s_uptake.map(c),
        }
    }

    /// Present optional descriptors.
    pub fn valid_descriptors(&self) -> Vec<f64> {
        [self.s_density, self.s_morphology, self.s_uptake]
            .into_iter()
            .flatten()
            .collect()
    }
}

/// RoI Quality Index of one matched pair, in `[0, 1]`.
///
/// With no valid descriptor the descriptor factor is 1, leaving the core
/// geometric mean.
pub fn roiq(sims: &AttributeSimilarities) -> f64 {
    let s = sims.clamped();
    let core = (s.s_region * s.s_lesion).sqrt();
    let descriptors = s.valid_descriptors();
    let factor = if descriptors.is_empty() {
        1.0
    } else {
        descriptors.iter().sum::<f64>() / descriptors.len() as f64
    };
    core * factor
}

/// One thresholded pair with its quality score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub pred_index: usize,
    pub gt_index: usize,
    pub score: f64,
    pub roiq: f64,
    pub attributes: AttributeSimilarities,
}

/// Metrics for one report at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportScore {
    pub report_id: String,
    pub coverage: CoverageMetrics,
    pub pairs: Vec<ScoredPair>,
    pub mean_roiq: Option<f64>,
}

impl ReportScore {
    pub fn new(report_id: impl Into<String>, coverage: CoverageMetrics, pairs: Vec<ScoredPair>) -> Self {
        let mean_roiq = mean(pairs.iter().map(|p| p.roiq));
        ReportScore {
            report_id: report_id.into(),
            coverage,
            pairs,
            mean_roiq,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean RoIQ over every matched pair in the corpus.
    pub mean_roiq: Option<f64>,
    /// Mean of per-report RoIQ means, over reports with at least one match.
    pub mean_report_roiq: Option<f64>,
    pub matched_pair_count: usize,
    pub report_count: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("cannot aggregate an empty corpus")]
    EmptyCorpus,
    #[error("empty text")]
    EmptyText,
    #[error(transparent)]
    Embedding(#[from] crate::embedding::EmbeddingError),
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Micro-average coverage and pool RoIQ over matched pairs.
pub fn aggregate_corpus(reports: &[ReportScore]) -> Result<CorpusMetrics, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let (tp, fp, fn_) = reports.iter().fold((0, 0, 0), |(tp, fp, fn_), r| {
        (tp + r.coverage.tp, fp + r.coverage.fp, fn_ + r.coverage.fn_)
    });
    let cov = CoverageMetrics::from_counts(tp, fp, fn_);
    let pairs = reports.iter().flat_map(|r| r.pairs.iter());
    Ok(CorpusMetrics {
        tp,
        fp,
        fn_,
        precision: cov.precision,
        recall: cov.recall,
        f1: cov.f1,
        mean_roiq: mean(pairs.clone().map(|p| p.roiq)),
        mean_report_roiq: mean(reports.iter().filter_map(|r| r.mean_roiq)),
        matched_pair_count: pairs.count(),
        report_count: reports.len(),
    })
}
