//! N-gram and embedding-based text similarity scores.
//!
//! All scores are percentages in `[0, 100]`. Texts go through [`tokenize`]:
//! NFC composition, lowercasing, then splitting at whitespace; every
//! character that is neither alphanumeric nor whitespace becomes its own
//! token.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use super::MetricsError;
use crate::embedding::{cosine, Embedder};

pub fn tokenize(text: &str) -> Vec<String> {
    let normalized: String = text.nfc().collect::<String>().to_lowercase().nfc().collect();
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in normalized.chars() {
        if c.is_alphanumeric() || is_combining(c) {
            word.push(c);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !c.is_whitespace() {
            tokens.push(c.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

// Marks left uncomposed by NFC stay attached to their word.
fn is_combining(c: char) -> bool {
    matches!(c as u32, 0x0300..=0x036F | 0x1AB0..=0x1AFF | 0x1DC0..=0x1DFF | 0x20D0..=0x20FF)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Sufficient statistics for BLEU-4, summable across sentence pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl BleuStats {
    pub fn from_texts(candidate: &str, reference: &str) -> Self {
        Self::from_tokens(&tokenize(candidate), &tokenize(reference))
    }

    pub fn from_tokens(candidate: &[String], reference: &[String]) -> Self {
        let mut stats = BleuStats {
            candidate_len: candidate.len(),
            reference_len: reference.len(),
            ..BleuStats::default()
        };
        for n in 1..=4 {
            let cand = ngram_counts(candidate, n);
            let refs = ngram_counts(reference, n);
            stats.matches[n - 1] = cand
                .iter()
                .map(|(gram, &c)| c.min(refs.get(gram).copied().unwrap_or(0)))
                .sum();
            stats.totals[n - 1] = candidate.len().saturating_sub(n - 1);
        }
        stats
    }

    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..4 {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }

    /// Unsmoothed BLEU-4 with uniform weights and brevity penalty.
    pub fn score(&self) -> f64 {
        if self.candidate_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for n in 0..4 {
            if self.matches[n] == 0 || self.totals[n] == 0 {
                return 0.0;
            }
            log_sum += (self.matches[n] as f64 / self.totals[n] as f64).ln();
        }
        let c = self.candidate_len as f64;
        let r = self.reference_len as f64;
        let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
        100.0 * bp * (log_sum / 4.0).exp()
    }
}

pub fn bleu4(candidate: &str, reference: &str) -> f64 {
    BleuStats::from_texts(candidate, reference).score()
}

/// Corpus BLEU-4: n-gram statistics are summed over all pairs before the
/// precisions and brevity penalty are computed.
pub fn corpus_bleu4<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> f64 {
    let mut total = BleuStats::default();
    for (c, r) in pairs {
        total.add(&BleuStats::from_texts(c, r));
    }
    total.score()
}

/// Precision, recall and F1 as percentages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_ratios(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision: 100.0 * precision,
            recall: 100.0 * recall,
            f1: 100.0 * f1,
        }
    }

    const ZERO: Prf = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScores {
    pub rouge1: Prf,
    #[serde(rename = "rougeL")]
    pub rouge_l: Prf,
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-1 (clipped unigram overlap) and ROUGE-L (longest common
/// subsequence).
pub fn rouge(candidate: &str, reference: &str) -> RougeScores {
    let cand = tokenize(candidate);
    let refs = tokenize(reference);
    if cand.is_empty() || refs.is_empty() {
        return RougeScores {
            rouge1: Prf::ZERO,
            rouge_l: Prf::ZERO,
        };
    }
    let (nc, nr) = (cand.len() as f64, refs.len() as f64);
    let cand_counts = ngram_counts(&cand, 1);
    let ref_counts = ngram_counts(&refs, 1);
    let overlap: usize = cand_counts
        .iter()
        .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum();
    let lcs = lcs_len(&cand, &refs) as f64;
    RougeScores {
        rouge1: Prf::from_ratios(overlap as f64 / nc, overlap as f64 / nr),
        rouge_l: Prf::from_ratios(lcs / nc, lcs / nr),
    }
}

/// Greedy token-embedding match score (no IDF weighting).
///
/// Precision averages, over candidate tokens, the best clamped cosine to any
/// reference token; recall does the same from the reference side.
pub fn embed_score(
    candidate: &str,
    reference: &str,
    embedder: &dyn Embedder,
) -> Result<Prf, MetricsError> {
    let cand = tokenize(candidate);
    let refs = tokenize(reference);
    if cand.is_empty() || refs.is_empty() {
        return Err(MetricsError::EmptyText);
    }
    let mut vocab: Vec<&str> = cand.iter().chain(&refs).map(String::as_str).collect();
    vocab.sort_unstable();
    vocab.dedup();
    let vectors = embedder.embed_batch(&vocab)?;
    let index: HashMap<&str, usize> = vocab.iter().enumerate().map(|(i, t)| (*t, i)).collect();

    let mut sims = vec![vec![0.0; refs.len()]; cand.len()];
    for (i, c) in cand.iter().enumerate() {
        for (j, r) in refs.iter().enumerate() {
            let s = cosine(&vectors[index[c.as_str()]], &vectors[index[r.as_str()]])?;
            sims[i][j] = s.max(0.0);
        }
    }
    let precision = sims
        .iter()
        .map(|row| row.iter().copied().fold(0.0, f64::max))
        .sum::<f64>()
        / cand.len() as f64;
    let recall = (0..refs.len())
        .map(|j| sims.iter().map(|row| row[j]).fold(0.0, f64::max))
        .sum::<f64>()
        / refs.len() as f64;
    Ok(Prf::from_ratios(precision, recall))
}
