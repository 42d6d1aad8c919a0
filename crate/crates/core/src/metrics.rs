//! Text-quality metrics over whitespace tokens, plus throughput.
//!
//! All quality scores lie in `[0, 1]`. Functions are generic over the
//! token type so callers can pass `&[&str]` or `&[String]`.

use std::collections::HashMap;
use std::hash::Hash;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("candidate is empty")]
    EmptyCandidate,
    #[error("reference set is empty")]
    EmptyReferences,
    #[error("n-gram order {0} not supported (use 1 or 2)")]
    Order(usize),
    #[error("duration must be positive and finite, got {0}")]
    Duration(f64),
    #[error("embedding dimensions differ: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("no embedding for `{0}`")]
    MissingEmbedding(String),
    #[error("nothing to score")]
    NoPairs,
}

/// Lowercase, then split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and total candidate n-grams of order `n`.
fn clipped<T: Eq + Hash, R: AsRef<[T]>>(candidate: &[T], references: &[R], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r.as_ref(), n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand
        .iter()
        .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`; the shorter one on ties.
fn closest_ref_len<T, R: AsRef<[T]>>(references: &[R], c: usize) -> usize {
    references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

#[derive(Clone, Copy, Debug, Default)]
struct BleuStats {
    matched: [usize; 8],
    total: [usize; 8],
    cand_len: usize,
    ref_len: usize,
}

fn bleu_stats<T: Eq + Hash, R: AsRef<[T]>>(candidate: &[T], references: &[R], max_n: usize) -> BleuStats {
    let mut s = BleuStats {
        cand_len: candidate.len(),
        ref_len: closest_ref_len(references, candidate.len()),
        ..BleuStats::default()
    };
    for n in 1..=max_n {
        (s.matched[n - 1], s.total[n - 1]) = clipped(candidate, references, n);
    }
    s
}

/// Orders with no candidate n-grams are left out of the geometric mean.
fn bleu_from_stats(s: &BleuStats, max_n: usize) -> f64 {
    if s.cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..max_n {
        if s.total[n] == 0 {
            continue;
        }
        if s.matched[n] == 0 {
            return 0.0;
        }
        log_sum += (s.matched[n] as f64 / s.total[n] as f64).ln();
        orders += 1;
    }
    let bp = (1.0 - s.ref_len as f64 / s.cand_len as f64).exp().min(1.0);
    bp * (log_sum / orders as f64).exp()
}

fn check_order(max_n: usize) -> Result<(), MetricError> {
    if (1..=8).contains(&max_n) {
        Ok(())
    } else {
        Err(MetricError::Order(max_n))
    }
}

/// Sentence BLEU without smoothing.
pub fn bleu<T: Eq + Hash, R: AsRef<[T]>>(candidate: &[T], references: &[R], max_n: usize) -> Result<f64, MetricError> {
    check_order(max_n)?;
    if candidate.is_empty() {
        return Err(MetricError::EmptyCandidate);
    }
    if references.is_empty() {
        return Err(MetricError::EmptyReferences);
    }
    Ok(bleu_from_stats(&bleu_stats(candidate, references, max_n), max_n))
}

/// Corpus BLEU: clipped counts and lengths are summed over all pairs
/// before the precisions are formed. Empty candidates count as length 0.
pub fn corpus_bleu<T: Eq + Hash, C: AsRef<[T]>, R: AsRef<[T]>>(
    pairs: &[(C, Vec<R>)],
    max_n: usize,
) -> Result<f64, MetricError> {
    check_order(max_n)?;
    if pairs.is_empty() {
        return Err(MetricError::NoPairs);
    }
    let mut acc = BleuStats::default();
    for (c, refs) in pairs {
        if refs.is_empty() {
            return Err(MetricError::EmptyReferences);
        }
        let s = bleu_stats(c.as_ref(), refs, max_n);
        for n in 0..max_n {
            acc.matched[n] += s.matched[n];
            acc.total[n] += s.total[n];
        }
        acc.cand_len += s.cand_len;
        acc.ref_len += s.ref_len;
    }
    Ok(bleu_from_stats(&acc, max_n))
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// ROUGE-N F1 for `n` in {1, 2}. When neither side has an n-gram of that
/// order the score is 1 for identical sequences and 0 otherwise.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> Result<f64, MetricError> {
    if !(1..=2).contains(&n) {
        return Err(MetricError::Order(n));
    }
    let (overlap, cand_total) = clipped(candidate, &[reference], n);
    let ref_total = reference.len().saturating_sub(n - 1);
    if cand_total == 0 && ref_total == 0 {
        return Ok(if candidate == reference { 1.0 } else { 0.0 });
    }
    if cand_total == 0 || ref_total == 0 {
        return Ok(0.0);
    }
    Ok(f1(overlap as f64 / cand_total as f64, overlap as f64 / ref_total as f64))
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 (beta = 1).
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return if candidate.len() == reference.len() { 1.0 } else { 0.0 };
    }
    let l = lcs_len(candidate, reference) as f64;
    f1(l / candidate.len() as f64, l / reference.len() as f64)
}

/// Search budget for the chunk-minimizing alignment; past it the best
/// alignment found so far is used.
const ALIGN_BUDGET: usize = 200_000;

struct Aligner {
    /// Reference positions holding each candidate token.
    options: Vec<Vec<usize>>,
    /// Per candidate position, its token class.
    class: Vec<usize>,
    /// Per class, candidate positions at or after `i` still unvisited,
    /// indexed as `remaining[class][i]`.
    remaining: Vec<Vec<usize>>,
    need: Vec<usize>,
    used: Vec<bool>,
    best: usize,
    nodes: usize,
}

impl Aligner {
    /// `last`: reference position matched by candidate `i - 1`, if any.
    fn search(&mut self, i: usize, last: Option<usize>, chunks: usize) {
        self.nodes += 1;
        if chunks >= self.best || self.nodes > ALIGN_BUDGET {
            return;
        }
        if i == self.class.len() {
            self.best = chunks;
            return;
        }
        let c = self.class[i];
        let needed = self.need[c];
        if needed > 0 {
            // continuing the current chunk first finds good bounds early
            let mut order: Vec<usize> = self.options[i].iter().copied().filter(|j| !self.used[*j]).collect();
            order.sort_by_key(|j| Some(*j) != last.map(|l| l + 1));
            for j in order {
                let extends = last.is_some_and(|l| l + 1 == j);
                self.used[j] = true;
                self.need[c] -= 1;
                self.search(i + 1, Some(j), chunks + usize::from(!extends));
                self.need[c] += 1;
                self.used[j] = false;
            }
        }
        if self.remaining[c][i + 1] >= needed {
            self.search(i + 1, None, chunks);
        }
    }
}

/// Matches and chunks of an exact-match alignment with the most matches
/// and, among those, the fewest chunks.
fn align<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> (usize, usize) {
    let mut ids: HashMap<&T, usize> = HashMap::new();
    for t in candidate.iter().chain(reference) {
        let next = ids.len();
        ids.entry(t).or_insert(next);
    }
    let classes = ids.len();
    let class: Vec<usize> = candidate.iter().map(|t| ids[t]).collect();
    let mut cand_count = vec![0usize; classes];
    let mut ref_count = vec![0usize; classes];
    for &c in &class {
        cand_count[c] += 1;
    }
    for t in reference {
        ref_count[ids[t]] += 1;
    }
    let need: Vec<usize> = (0..classes).map(|c| cand_count[c].min(ref_count[c])).collect();
    let m: usize = need.iter().sum();
    if m == 0 {
        return (0, 0);
    }
    let options = candidate
        .iter()
        .map(|t| (0..reference.len()).filter(|j| reference[*j] == *t).collect())
        .collect();
    let mut remaining = vec![vec![0usize; candidate.len() + 1]; classes];
    for i in (0..candidate.len()).rev() {
        for (c, rem) in remaining.iter_mut().enumerate() {
            rem[i] = rem[i + 1] + usize::from(class[i] == c);
        }
    }
    let mut a = Aligner {
        options,
        class,
        remaining,
        need,
        used: vec![false; reference.len()],
        best: m + 1,
        nodes: 0,
    };
    a.search(0, None, 0);
    (m, a.best.min(m))
}

/// METEOR with exact matching only: `F_mean = 10PR / (R + 9P)`,
/// penalty `0.5 (chunks / m)^3`.
pub fn meteor<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> f64 {
    let (m, chunks) = align(candidate, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

/// Maps a candidate/reference pair to two vectors of equal length.
pub trait Embedder {
    fn embed_pair(&self, candidate: &[String], reference: &[String]) -> Result<(Vec<f64>, Vec<f64>), MetricError>;
}

/// Term frequencies over the union vocabulary of the pair.
#[derive(Clone, Copy, Debug, Default)]
pub struct TfEmbedder;

impl Embedder for TfEmbedder {
    fn embed_pair(&self, candidate: &[String], reference: &[String]) -> Result<(Vec<f64>, Vec<f64>), MetricError> {
        let mut vocab: HashMap<&str, usize> = HashMap::new();
        for t in candidate.iter().chain(reference) {
            let next = vocab.len();
            vocab.entry(t.as_str()).or_insert(next);
        }
        let tf = |tokens: &[String]| {
            let mut v = vec![0.0; vocab.len()];
            for t in tokens {
                v[vocab[t.as_str()]] += 1.0;
            }
            v
        };
        Ok((tf(candidate), tf(reference)))
    }
}

/// Looks up externally computed vectors by the space-joined token text.
#[derive(Clone, Debug, Default)]
pub struct PrecomputedEmbedder {
    pub vectors: HashMap<String, Vec<f64>>,
}

impl Embedder for PrecomputedEmbedder {
    fn embed_pair(&self, candidate: &[String], reference: &[String]) -> Result<(Vec<f64>, Vec<f64>), MetricError> {
        let get = |tokens: &[String]| {
            let key = tokens.join(" ");
            self.vectors
                .get(&key)
                .cloned()
                .ok_or(MetricError::MissingEmbedding(key))
        };
        Ok((get(candidate)?, get(reference)?))
    }
}

/// Cosine of the embedded pair clamped to `[0, 1]`; a zero vector gives 0.
pub fn cosine(candidate: &[String], reference: &[String], embedder: &dyn Embedder) -> Result<f64, MetricError> {
    let (a, b) = embedder.embed_pair(candidate, reference)?;
    if a.len() != b.len() {
        return Err(MetricError::Dimension(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(0.0, 1.0))
}

pub fn tokens_per_second(n_tokens: u64, duration_s: f64) -> Result<f64, MetricError> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(MetricError::Duration(duration_s));
    }
    Ok(n_tokens as f64 / duration_s)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub bleu: f64,
    pub rouge1_f: f64,
    pub rouge2_f: f64,
    pub rouge_l_f: f64,
    pub meteor: f64,
    pub cosine: f64,
    pub tokens_per_s: f64,
}

impl MetricScores {
    /// The six bounded quality metrics, throughput excluded.
    pub fn quality(&self) -> [f64; 6] {
        [
            self.bleu,
            self.rouge1_f,
            self.rouge2_f,
            self.rouge_l_f,
            self.meteor,
            self.cosine,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Timing {
    pub n_tokens: u64,
    pub duration_s: f64,
}

/// Corpus BLEU over all pairs and per-pair means of the other metrics.
/// Pairs are `(candidate, reference)` texts, tokenized with [`tokenize`].
pub fn score_outputs(
    pairs: &[(String, String)],
    timing: Timing,
    embedder: &(dyn Embedder + Sync),
) -> Result<MetricScores, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::NoPairs);
    }
    let tokenized: Vec<(Vec<String>, Vec<String>)> = pairs.iter().map(|(c, r)| (tokenize(c), tokenize(r))).collect();
    let per_pair = tokenized
        .par_iter()
        .map(|(c, r)| -> Result<[f64; 5], MetricError> {
            Ok([rouge_n(c, r, 1)?, rouge_n(c, r, 2)?, rouge_l(c, r), meteor(c, r), cosine(c, r, embedder)?])
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut sums = [0.0f64; 5];
    for row in &per_pair {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    let n = pairs.len() as f64;
    let corpus: Vec<(&[String], Vec<&[String]>)> = tokenized
        .iter()
        .map(|(c, r)| (c.as_slice(), vec![r.as_slice()]))
        .collect();
    Ok(MetricScores {
        bleu: corpus_bleu(&corpus, 4)?,
        rouge1_f: sums[0] / n,
        rouge2_f: sums[1] / n,
        rouge_l_f: sums[2] / n,
        meteor: sums[3] / n,
        cosine: sums[4] / n,
        tokens_per_s: tokens_per_second(timing.n_tokens, timing.duration_s)?,
    })
}
