//! Summarization metrics: ROUGE (1, 2, L), corpus BLEU (1-4), sentence
//! BLEU (S-BLEU), exact-match METEOR, embedding-based token F1
//! (BERTScore-style), and the Lead baseline.
//!
//! All scores live in `[0, 1]`; reports scale them by 100 with two
//! decimals. The default metric tokenizer is character-level; the word
//! tokenizer is available and every report records which one was used.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;

/// One scored pair. Both sides must be produced by the same tokenizer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
}

impl EvalPair {
    pub fn new(candidate: Vec<String>, reference: Vec<String>) -> Self {
        Self {
            candidate,
            reference,
        }
    }

    /// Character-tokenized pair (the default).
    pub fn chars(candidate: &str, reference: &str) -> Self {
        Self::new(
            crate::tokenizer::chars(candidate),
            crate::tokenizer::chars(reference),
        )
    }

    /// Whitespace-word-tokenized pair.
    pub fn words(candidate: &str, reference: &str) -> Self {
        let split = |s: &str| {
            crate::tokenizer::words(s)
                .into_iter()
                .map(|w| w.to_string())
                .collect()
        };
        Self::new(split(candidate), split(reference))
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// ROUGE-N F1 (clipped n-gram overlap), N in {1, 2}.
pub fn rouge_n(pair: &EvalPair, n: usize) -> f64 {
    assert!(n == 1 || n == 2, "rouge_n supports n = 1 or 2");
    assert!(!pair.reference.is_empty(), "reference must be nonempty");
    if pair.candidate.len() < n {
        return 0.0;
    }
    let cand = ngram_counts(&pair.candidate, n);
    let refs = ngram_counts(&pair.reference, n);
    let overlap: usize = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    let cand_total = pair.candidate.len() + 1 - n;
    let ref_total = match pair.reference.len().checked_sub(n - 1) {
        Some(t) if t > 0 => t,
        _ => return 0.0,
    };
    f1(
        overlap as f64 / cand_total as f64,
        overlap as f64 / ref_total as f64,
    )
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l(pair: &EvalPair) -> f64 {
    assert!(!pair.reference.is_empty(), "reference must be nonempty");
    if pair.candidate.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(&pair.candidate, &pair.reference) as f64;
    f1(
        lcs / pair.candidate.len() as f64,
        lcs / pair.reference.len() as f64,
    )
}

/// Corpus BLEU-1..4 with clipped precision and brevity penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BleuScores {
    /// `by_order[k-1]` is BLEU-k over uniform weights 1..k.
    pub by_order: [f64; 4],
}

fn clipped_counts(pair: &EvalPair, n: usize) -> (usize, usize) {
    if pair.candidate.len() < n {
        return (0, 0);
    }
    let cand = ngram_counts(&pair.candidate, n);
    let refs = ngram_counts(&pair.reference, n);
    let clipped = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (clipped, pair.candidate.len() + 1 - n)
}

/// Micro-averaged corpus BLEU: n-gram statistics are summed over pairs
/// before combining, so the result is invariant to pair order.
pub fn bleu_corpus(pairs: &[EvalPair]) -> BleuScores {
    assert!(!pairs.is_empty(), "bleu_corpus needs at least one pair");
    let mut clipped = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for pair in pairs {
        cand_len += pair.candidate.len();
        ref_len += pair.reference.len();
        for n in 1..=4 {
            let (c, t) = clipped_counts(pair, n);
            clipped[n - 1] += c;
            totals[n - 1] += t;
        }
    }
    let bp = if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut by_order = [0.0; 4];
    for k in 1..=4 {
        let mut log_sum = 0.0;
        let mut any_zero = false;
        for n in 1..=k {
            if totals[n - 1] == 0 || clipped[n - 1] == 0 {
                any_zero = true;
                break;
            }
            log_sum += (clipped[n - 1] as f64 / totals[n - 1] as f64).ln() / k as f64;
        }
        by_order[k - 1] = if any_zero { 0.0 } else { bp * log_sum.exp() };
    }
    BleuScores { by_order }
}

/// Additive epsilon replacing zero clipped counts in sentence BLEU.
pub const SBLEU_EPS: f64 = 1e-9;

/// Sentence-level BLEU-4 with add-epsilon smoothing: any zero (or
/// undefined, for candidates shorter than n) precision contributes
/// `SBLEU_EPS` instead of zero.
pub fn sentence_bleu4(pair: &EvalPair) -> f64 {
    if pair.candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (clipped, total) = clipped_counts(pair, n);
        let p = if total == 0 || clipped == 0 {
            SBLEU_EPS
        } else {
            clipped as f64 / total as f64
        };
        log_sum += p.ln() / 4.0;
    }
    let c = pair.candidate.len() as f64;
    let r = pair.reference.len() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * log_sum.exp()
}

/// Macro-averaged sentence BLEU-4.
pub fn sbleu(pairs: &[EvalPair]) -> f64 {
    assert!(!pairs.is_empty(), "sbleu needs at least one pair");
    pairs.iter().map(sentence_bleu4).sum::<f64>() / pairs.len() as f64
}

const METEOR_ALPHA: f64 = 0.9;
const METEOR_BETA: f64 = 3.0;
const METEOR_GAMMA: f64 = 0.5;
/// Exact chunk search is used up to this many tokens per side.
const METEOR_EXACT_LIMIT: usize = 16;

fn multiset_matches(cand: &[String], reference: &[String]) -> usize {
    let mut counts: HashMap<&str, isize> = HashMap::new();
    for t in reference {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut m = 0;
    for t in cand {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                m += 1;
            }
        }
    }
    m
}

/// Maximum achievable matches from candidate position `i` with the free
/// reference positions in `mask` (bit set = used).
fn remaining_matches(cand: &[String], reference: &[String], i: usize, mask: u32) -> usize {
    let mut free: HashMap<&str, usize> = HashMap::new();
    for (j, t) in reference.iter().enumerate() {
        if mask & (1 << j) == 0 {
            *free.entry(t).or_insert(0) += 1;
        }
    }
    let mut rest: HashMap<&str, usize> = HashMap::new();
    for t in &cand[i..] {
        *rest.entry(t).or_insert(0) += 1;
    }
    rest.iter()
        .map(|(t, &c)| c.min(free.get(t).copied().unwrap_or(0)))
        .sum()
}

#[allow(clippy::too_many_arguments)]
fn chunk_search(
    cand: &[String],
    reference: &[String],
    i: usize,
    mask: u32,
    prev: usize, // 0 = previous position unmatched, else ref index + 1
    memo: &mut HashMap<(usize, u32, usize), usize>,
) -> usize {
    if i == cand.len() {
        return 0;
    }
    if let Some(&v) = memo.get(&(i, mask, prev)) {
        return v;
    }
    let budget = remaining_matches(cand, reference, i, mask);
    let mut best = usize::MAX;
    // skip this candidate position if max matches survive
    if remaining_matches(cand, reference, i + 1, mask) == budget {
        best = best.min(chunk_search(cand, reference, i + 1, mask, 0, memo));
    }
    for (j, t) in reference.iter().enumerate() {
        if mask & (1 << j) == 0 && t == &cand[i] {
            let start_cost = if prev > 0 && j == prev { 0 } else { 1 };
            let rest = chunk_search(cand, reference, i + 1, mask | (1 << j), j + 1, memo);
            best = best.min(start_cost + rest);
        }
    }
    memo.insert((i, mask, prev), best);
    best
}

/// Greedy maximal-munch fallback: repeatedly align the longest common run
/// of free positions; each munch is one chunk. Reaches the maximum match
/// count, but the chunk count is only an upper bound on the optimum.
fn munch_chunks(cand: &[String], reference: &[String]) -> usize {
    let mut cand_used = vec![false; cand.len()];
    let mut ref_used = vec![false; reference.len()];
    let mut chunks = 0;
    loop {
        let mut best: Option<(usize, usize, usize)> = None; // (len, ci, rj)
        for ci in 0..cand.len() {
            for rj in 0..reference.len() {
                let mut len = 0;
                while ci + len < cand.len()
                    && rj + len < reference.len()
                    && !cand_used[ci + len]
                    && !ref_used[rj + len]
                    && cand[ci + len] == reference[rj + len]
                {
                    len += 1;
                }
                if len > 0 && best.map(|(l, _, _)| len > l).unwrap_or(true) {
                    best = Some((len, ci, rj));
                }
            }
        }
        match best {
            Some((len, ci, rj)) => {
                for k in 0..len {
                    cand_used[ci + k] = true;
                    ref_used[rj + k] = true;
                }
                chunks += 1;
            }
            None => break,
        }
    }
    chunks
}

/// Exact-match METEOR: unigram alignment maximizing matches, then
/// minimizing chunks (exact up to [`METEOR_EXACT_LIMIT`] tokens per side,
/// greedy maximal-munch beyond); weighted harmonic mean with a
/// fragmentation penalty.
pub fn meteor_exact(pair: &EvalPair) -> f64 {
    assert!(!pair.reference.is_empty(), "reference must be nonempty");
    if pair.candidate.is_empty() {
        return 0.0;
    }
    let m = multiset_matches(&pair.candidate, &pair.reference);
    if m == 0 {
        return 0.0;
    }
    let chunks = if pair.candidate.len() <= METEOR_EXACT_LIMIT
        && pair.reference.len() <= METEOR_EXACT_LIMIT
    {
        let mut memo = HashMap::new();
        chunk_search(&pair.candidate, &pair.reference, 0, 0, 0, &mut memo)
    } else {
        munch_chunks(&pair.candidate, &pair.reference)
    };
    let p = m as f64 / pair.candidate.len() as f64;
    let r = m as f64 / pair.reference.len() as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / m as f64).powf(METEOR_BETA);
    f_mean * (1.0 - penalty)
}

/// Token embedding source for the embedding-based score. Deterministic:
/// the same token must always produce the same unit-norm vector.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn lookup(&self, token: &str) -> Vec<f64>;
}

/// Default provider: unit vectors seeded from a SHA-256 hash of the
/// token, so distinct tokens get independent, near-orthogonal directions
/// and the score is reproducible without any pretrained weights.
pub struct HashedEmbeddings {
    dim: usize,
}

impl HashedEmbeddings {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 2);
        Self { dim }
    }
}

impl Default for HashedEmbeddings {
    fn default() -> Self {
        Self::new(64)
    }
}

impl EmbeddingProvider for HashedEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn lookup(&self, token: &str) -> Vec<f64> {
        let digest = Sha256::digest(token.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let mut v: Vec<f64> = (0..self.dim)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x /= norm;
        }
        v
    }
}

/// Greedy max-cosine token matching: recall over reference tokens,
/// precision over candidate tokens, combined as F1 and clamped to
/// `[0, 1]` (hash embeddings can produce negative similarities).
pub fn bertscore(pair: &EvalPair, emb: &dyn EmbeddingProvider) -> f64 {
    assert!(!pair.reference.is_empty(), "reference must be nonempty");
    if pair.candidate.is_empty() {
        return 0.0;
    }
    let embed = |tokens: &[String]| -> Array2<f64> {
        let mut m = Array2::zeros((tokens.len(), emb.dim()));
        for (i, t) in tokens.iter().enumerate() {
            for (j, v) in emb.lookup(t).into_iter().enumerate() {
                m[[i, j]] = v;
            }
        }
        m
    };
    let s_ref = embed(&pair.reference);
    let s_cand = embed(&pair.candidate);
    let sims = s_ref.dot(&s_cand.t());
    let recall = sims
        .rows()
        .into_iter()
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / pair.reference.len() as f64;
    let precision = sims
        .columns()
        .into_iter()
        .map(|col| col.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / pair.candidate.len() as f64;
    if precision + recall <= 0.0 {
        return 0.0;
    }
    (2.0 * precision * recall / (precision + recall)).clamp(0.0, 1.0)
}

/// The Lead baseline: the first `k` characters of the long description.
pub fn lead_baseline(description: &str, k: usize) -> String {
    description.chars().take(k).collect()
}

pub const LEAD_DEFAULT_CHARS: usize = 80;

/// Per-sample metric detail.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleScores {
    pub id: String,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub sentence_bleu4: f64,
    pub meteor: f64,
    pub bertscore: f64,
}

/// Corpus-level evaluation report. Scores are stored in `[0, 1]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// What produced the candidates (e.g. "model", "lead").
    pub system: String,
    /// Metric tokenizer: "char" or "word".
    pub tokenizer: String,
    /// Decoding notes (e.g. "greedy", "beam:4", "n/a").
    pub decode: String,
    pub n_pairs: usize,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub bleu: [f64; 4],
    pub sbleu: f64,
    pub meteor: f64,
    pub bertscore: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attr_precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attr_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attr_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_sample: Option<Vec<SampleScores>>,
}

impl MetricsReport {
    /// All headline scores scaled by 100 and rounded to two decimals, the
    /// presentation used in score tables.
    pub fn scaled(&self) -> serde_json::Value {
        let s = |x: f64| (x * 10_000.0).round() / 100.0;
        serde_json::json!({
            "system": self.system,
            "tokenizer": self.tokenizer,
            "decode": self.decode,
            "n_pairs": self.n_pairs,
            "rouge_1": s(self.rouge1),
            "rouge_2": s(self.rouge2),
            "rouge_l": s(self.rouge_l),
            "bleu_1": s(self.bleu[0]),
            "bleu_2": s(self.bleu[1]),
            "bleu_3": s(self.bleu[2]),
            "bleu_4": s(self.bleu[3]),
            "s_bleu": s(self.sbleu),
            "meteor": s(self.meteor),
            "bert_score": s(self.bertscore),
            "attr_precision": self.attr_precision.map(s),
            "attr_recall": self.attr_recall.map(s),
            "attr_f1": self.attr_f1.map(s),
        })
    }
}

/// Score a corpus of (id, pair) rows with every metric.
pub fn evaluate_corpus(
    rows: &[(String, EvalPair)],
    emb: &dyn EmbeddingProvider,
    system: &str,
    tokenizer: &str,
    decode: &str,
    keep_per_sample: bool,
) -> MetricsReport {
    assert!(!rows.is_empty(), "evaluate_corpus needs at least one pair");
    let pairs: Vec<EvalPair> = rows.iter().map(|(_, p)| p.clone()).collect();
    let mut per_sample = Vec::with_capacity(rows.len());
    let mut sums = [0.0f64; 6];
    for (id, pair) in rows {
        let s = SampleScores {
            id: id.clone(),
            rouge1: rouge_n(pair, 1),
            rouge2: rouge_n(pair, 2),
            rouge_l: rouge_l(pair),
            sentence_bleu4: sentence_bleu4(pair),
            meteor: meteor_exact(pair),
            bertscore: bertscore(pair, emb),
        };
        sums[0] += s.rouge1;
        sums[1] += s.rouge2;
        sums[2] += s.rouge_l;
        sums[3] += s.sentence_bleu4;
        sums[4] += s.meteor;
        sums[5] += s.bertscore;
        per_sample.push(s);
    }
    let n = rows.len() as f64;
    MetricsReport {
        system: system.to_string(),
        tokenizer: tokenizer.to_string(),
        decode: decode.to_string(),
        n_pairs: rows.len(),
        rouge1: sums[0] / n,
        rouge2: sums[1] / n,
        rouge_l: sums[2] / n,
        bleu: bleu_corpus(&pairs).by_order,
        sbleu: sums[3] / n,
        meteor: sums[4] / n,
        bertscore: sums[5] / n,
        attr_precision: None,
        attr_recall: None,
        attr_f1: None,
        per_sample: keep_per_sample.then_some(per_sample),
    }
}
