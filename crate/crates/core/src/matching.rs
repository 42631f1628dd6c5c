//! Predicted-to-ground-truth RoI alignment.
//!
//! Each (prediction, ground truth) pair is scored by the mean clamped cosine
//! over the five lesion fields both sides fill in. The resulting
//! `|P| x |G|` matrix is solved for the maximum-total one-to-one assignment
//! with the Hungarian algorithm, and pairs scoring at least `tau` count as
//! true positives. Thresholding is applied after solving, so a sweep over
//! `tau` reuses one assignment per report.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::GroundTruthRoI;
use crate::embedding::{cosine, Embedder, EmbeddingError};
use crate::extraction::{ExtractedRoI, Field};
use crate::metrics::{self, AttributeSimilarities, CorpusMetrics, ReportScore, ScoredPair};

/// Operating threshold used when none is given.
pub const DEFAULT_TAU: f64 = 0.70;

/// Score assigned to padding cells when squaring a rectangular matrix.
const SENTINEL: f64 = -1.0;

/// Reduced-cost slack under which an edge counts as tight during
/// tie-breaking.
const TIGHT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatchError {
    #[error("similarity matrix rows have unequal lengths")]
    Ragged,
    #[error("similarity entry ({row}, {col}) = {value} is outside [0, 1]")]
    OutOfRange { row: usize, col: usize, value: f64 },
    #[error("threshold {0} is outside [0, 1]")]
    InvalidTau(f64),
    #[error("threshold grid is empty: min {min} > max {max}")]
    EmptyGrid { min: f64, max: f64 },
    #[error("threshold grid step must be positive, got {0}")]
    InvalidStep(f64),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
}

/// Clamped field cosines of one pair; `None` where either side is empty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FieldSimilarities {
    pub values: [Option<f64>; 5],
    /// Which fields the ground truth fills in.
    pub gt_present: [bool; 5],
}

impl FieldSimilarities {
    pub fn get(&self, field: Field) -> Option<f64> {
        self.values[field.index()]
    }

    /// Arithmetic mean over comparable fields, 0 when none is comparable.
    pub fn aggregate(&self) -> f64 {
        let present: Vec<f64> = self.values.iter().flatten().copied().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    /// RoIQ inputs. Core fields missing on either side score 0; an optional
    /// descriptor is valid when the ground truth fills it in, scoring 0 if
    /// the prediction omits it.
    pub fn attributes(&self) -> AttributeSimilarities {
        let core = |f: Field| self.get(f).unwrap_or(0.0);
        let optional = |f: Field| {
            self.gt_present[f.index()].then(|| self.get(f).unwrap_or(0.0))
        };
        AttributeSimilarities {
            s_region: core(Field::AnatomicRegion),
            s_lesion: core(Field::LesionType),
            s_density: optional(Field::Density),
            s_morphology: optional(Field::Morphology),
            s_uptake: optional(Field::FdgUptake),
        }
    }
}

fn filled(s: &str) -> bool {
    !s.trim().is_empty()
}

/// Field similarities for every (prediction, ground truth) pair, embedding
/// each distinct field text once.
pub fn field_similarities(
    preds: &[ExtractedRoI],
    gts: &[GroundTruthRoI],
    embedder: &dyn Embedder,
) -> Result<Vec<Vec<FieldSimilarities>>, MatchError> {
    let mut texts: Vec<&str> = preds
        .iter()
        .flat_map(|p| p.comparable_fields())
        .chain(gts.iter().flat_map(|g| g.comparable_fields()))
        .filter(|s| filled(s))
        .collect();
    texts.sort_unstable();
    texts.dedup();
    let vectors = if texts.is_empty() {
        Vec::new()
    } else {
        embedder.embed_batch(&texts)?
    };
    let index: HashMap<&str, usize> = texts.iter().enumerate().map(|(i, t)| (*t, i)).collect();

    let mut out = Vec::with_capacity(preds.len());
    for p in preds {
        let pf = p.comparable_fields();
        let mut row = Vec::with_capacity(gts.len());
        for g in gts {
            let gf = g.comparable_fields();
            let mut sims = FieldSimilarities::default();
            for k in 0..5 {
                sims.gt_present[k] = filled(gf[k]);
                if filled(pf[k]) && filled(gf[k]) {
                    let c = cosine(&vectors[index[pf[k]]], &vectors[index[gf[k]]])?;
                    sims.values[k] = Some(c.max(0.0));
                }
            }
            row.push(sims);
        }
        out.push(row);
    }
    Ok(out)
}

/// Similarity of a single pair in `[0, 1]`.
pub fn pair_similarity(
    pred: &ExtractedRoI,
    gt: &GroundTruthRoI,
    embedder: &dyn Embedder,
) -> Result<f64, MatchError> {
    let sims = field_similarities(std::slice::from_ref(pred), std::slice::from_ref(gt), embedder)?;
    Ok(sims[0][0].aggregate())
}

/// Dense `|P| x |G|` score grid with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pred_count: usize,
    gt_count: usize,
    entries: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatchError> {
        let pred_count = rows.len();
        let gt_count = rows.first().map_or(0, Vec::len);
        let mut entries = Vec::with_capacity(pred_count * gt_count);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != gt_count {
                return Err(MatchError::Ragged);
            }
            for (j, &value) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&value) {
                    return Err(MatchError::OutOfRange { row: i, col: j, value });
                }
                entries.push(value);
            }
        }
        Ok(SimilarityMatrix {
            pred_count,
            gt_count,
            entries,
        })
    }

    /// Empty matrix with `pred_count` rows and `gt_count` columns where one
    /// side is zero.
    pub fn empty(pred_count: usize, gt_count: usize) -> Self {
        debug_assert!(pred_count == 0 || gt_count == 0);
        SimilarityMatrix {
            pred_count,
            gt_count,
            entries: Vec::new(),
        }
    }

    pub fn pred_count(&self) -> usize {
        self.pred_count
    }

    pub fn gt_count(&self) -> usize {
        self.gt_count
    }

    pub fn get(&self, pred: usize, gt: usize) -> f64 {
        self.entries[pred * self.gt_count + gt]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        if self.gt_count == 0 {
            return vec![Vec::new(); self.pred_count];
        }
        self.entries.chunks(self.gt_count).map(<[f64]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignedPair {
    pub pred_index: usize,
    pub gt_index: usize,
    pub score: f64,
}

/// Optimal one-to-one assignment before thresholding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub pred_count: usize,
    pub gt_count: usize,
    pub pairs: Vec<AssignedPair>,
}

impl Assignment {
    pub fn total(&self) -> f64 {
        self.pairs.iter().map(|p| p.score).sum()
    }
}

/// Square min-cost assignment (shortest augmenting path form of the
/// Hungarian method). Returns `col_of_row` plus the row and column
/// potentials, which satisfy `cost[i][j] - u[i] - v[j] >= 0` with equality
/// on every assigned cell.
fn solve_min_cost(cost: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.len();
    // 1-based with a virtual row/column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        col_of[row_of[j] - 1] = j - 1;
    }
    (col_of, u[1..].to_vec(), v[1..].to_vec())
}

/// Among all optimal assignments, move to the lexicographically smallest
/// `col_of` sequence. Every optimal assignment uses only tight cells under
/// the final potentials, so this searches alternating cycles in the tight
/// subgraph. One backward search per row keeps the pass cubic.
fn lexicographic_refine(tight: &[Vec<bool>], col_of: &mut [usize]) {
    let n = col_of.len();
    let mut row_of = vec![0usize; n];
    for (r, &c) in col_of.iter().enumerate() {
        row_of[c] = r;
    }
    for i in 0..n {
        let target = col_of[i];
        // next[r] = column r moves to so that the chain ends at `target`
        let mut next: Vec<Option<usize>> = vec![None; n];
        let mut queue = Vec::new();
        for r in (i + 1)..n {
            if tight[r][target] {
                next[r] = Some(target);
                queue.push(r);
            }
        }
        let mut head = 0;
        while head < queue.len() {
            let released = col_of[queue[head]];
            head += 1;
            for r in (i + 1)..n {
                if next[r].is_none() && tight[r][released] {
                    next[r] = Some(released);
                    queue.push(r);
                }
            }
        }
        let choice = (0..target).find(|&j| {
            tight[i][j] && row_of[j] > i && next[row_of[j]].is_some()
        });
        if let Some(j) = choice {
            let mut chain = vec![(i, j)];
            let mut r = row_of[j];
            loop {
                let c = next[r].expect("chain rows are reachable");
                chain.push((r, c));
                if c == target {
                    break;
                }
                r = row_of[c];
            }
            for (r, c) in chain {
                col_of[r] = c;
                row_of[c] = r;
            }
        }
    }
}

/// Maximum-total one-to-one assignment of a rectangular score grid.
///
/// The grid is padded to square with sentinel `-1` scores; pairs touching
/// padding are dropped, leaving `min(|P|, |G|)` pairs sorted by prediction
/// index. Ties between optimal assignments resolve to the lexicographically
/// smallest (pred, gt) sequence.
pub fn hungarian_assign(matrix: &SimilarityMatrix) -> Assignment {
    let (p, g) = (matrix.pred_count, matrix.gt_count);
    let mut assignment = Assignment {
        pred_count: p,
        gt_count: g,
        pairs: Vec::new(),
    };
    if p == 0 || g == 0 {
        return assignment;
    }
    let n = p.max(g);
    let score = |i: usize, j: usize| {
        if i < p && j < g {
            matrix.get(i, j)
        } else {
            SENTINEL
        }
    };
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| -score(i, j)).collect())
        .collect();
    let (mut col_of, u, v) = solve_min_cost(&cost);
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| cost[i][j] - u[i] - v[j] <= TIGHT_EPS)
                .collect()
        })
        .collect();
    lexicographic_refine(&tight, &mut col_of);

    assignment.pairs = col_of
        .iter()
        .enumerate()
        .filter(|&(i, &j)| i < p && j < g)
        .map(|(i, &j)| AssignedPair {
            pred_index: i,
            gt_index: j,
            score: matrix.get(i, j),
        })
        .collect();
    assignment
}

/// Thresholded assignment with detection counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<AssignedPair>,
    pub tau: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

pub fn validate_tau(tau: f64) -> Result<f64, MatchError> {
    if (0.0..=1.0).contains(&tau) {
        Ok(tau)
    } else {
        Err(MatchError::InvalidTau(tau))
    }
}

/// Keep assigned pairs with `score >= tau`.
pub fn match_with_threshold(assignment: &Assignment, tau: f64) -> Result<MatchResult, MatchError> {
    let tau = validate_tau(tau)?;
    let pairs: Vec<AssignedPair> = assignment
        .pairs
        .iter()
        .copied()
        .filter(|p| p.score >= tau)
        .collect();
    let tp = pairs.len();
    Ok(MatchResult {
        pairs,
        tau,
        tp,
        fp: assignment.pred_count - tp,
        fn_: assignment.gt_count - tp,
    })
}

/// Everything needed to score one report at any threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportAlignment {
    pub report_id: String,
    pub assignment: Assignment,
    /// Field similarities for each assigned pair, parallel to
    /// `assignment.pairs`.
    pub pair_fields: Vec<FieldSimilarities>,
}

impl ReportAlignment {
    /// Score the report at `tau`, reusing the stored field similarities.
    pub fn score_at(&self, tau: f64) -> Result<ReportScore, MatchError> {
        let result = match_with_threshold(&self.assignment, tau)?;
        let pairs = self
            .assignment
            .pairs
            .iter()
            .zip(&self.pair_fields)
            .filter(|(p, _)| p.score >= tau)
            .map(|(p, fields)| {
                let attributes = fields.attributes();
                ScoredPair {
                    pred_index: p.pred_index,
                    gt_index: p.gt_index,
                    score: p.score,
                    roiq: metrics::roiq(&attributes),
                    attributes,
                }
            })
            .collect();
        Ok(ReportScore::new(
            self.report_id.clone(),
            metrics::coverage(&result),
            pairs,
        ))
    }
}

/// Embed, build the similarity matrix and solve the assignment for one
/// report.
pub fn align_report(
    report_id: &str,
    preds: &[ExtractedRoI],
    gts: &[GroundTruthRoI],
    embedder: &dyn Embedder,
) -> Result<ReportAlignment, MatchError> {
    let fields = field_similarities(preds, gts, embedder)?;
    let matrix = if preds.is_empty() || gts.is_empty() {
        SimilarityMatrix::empty(preds.len(), gts.len())
    } else {
        let rows: Vec<Vec<f64>> = fields
            .iter()
            .map(|row| row.iter().map(FieldSimilarities::aggregate).collect())
            .collect();
        SimilarityMatrix::from_rows(&rows)?
    };
    let assignment = hungarian_assign(&matrix);
    let pair_fields = assignment
        .pairs
        .iter()
        .map(|p| fields[p.pred_index][p.gt_index])
        .collect();
    Ok(ReportAlignment {
        report_id: report_id.to_owned(),
        assignment,
        pair_fields,
    })
}

/// Inclusive arithmetic grid of thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        ThresholdGrid {
            min: 0.50,
            max: 0.95,
            step: 0.05,
        }
    }
}

impl ThresholdGrid {
    /// Grid values in ascending order. Each value is rounded to 1e-9 so that
    /// e.g. the fifth point of the default grid is exactly `0.70`.
    pub fn values(&self) -> Result<Vec<f64>, MatchError> {
        if !self.step.is_finite() || self.step <= 0.0 {
            return Err(MatchError::InvalidStep(self.step));
        }
        if self.min > self.max {
            return Err(MatchError::EmptyGrid {
                min: self.min,
                max: self.max,
            });
        }
        validate_tau(self.min)?;
        validate_tau(self.max)?;
        let count = ((self.max - self.min) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..count)
            .map(|k| ((self.min + k as f64 * self.step) * 1e9).round() / 1e9)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    #[serde(flatten)]
    pub metrics: CorpusMetrics,
}

/// Corpus metrics at every grid threshold, from assignments solved once.
pub fn sweep_thresholds(
    corpus: &[ReportAlignment],
    grid: &ThresholdGrid,
) -> Result<Vec<SweepRow>, MatchError> {
    grid.values()?
        .into_iter()
        .map(|tau| {
            let scores = corpus
                .iter()
                .map(|r| r.score_at(tau))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SweepRow {
                tau,
                metrics: metrics::aggregate_corpus(&scores)?,
            })
        })
        .collect()
}
